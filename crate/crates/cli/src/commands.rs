use std::fs;
use std::path::Path;

use csca::data::text::{read_checkpoint_text, read_dataset_text, write_checkpoint_text, write_dataset_text};
use csca::data::{
    generate_synthetic, load_checkpoint, read_dataset, save_checkpoint, write_dataset, Checkpoint,
    Dataset,
};
use csca::gradcheck::model_grad_check;
use csca::metrics::{
    ablation_run, blocks_sweep, predict_records, read_records, vqa_consensus_accuracy,
    write_jsonl, write_records, EvalReport,
};
use csca::model::{forward, BlockAttention};
use csca::optim::{EpochRecord, Trainer};
use csca::{parameter_count, CscaConfig, CscaParams, Mode, RngStream, Tensor};
use serde::Serialize;
use serde_json::json;

use crate::config::RunConfig;
use crate::error::CliError;

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n")?;
    Ok(())
}

/// Writes through a temporary file so an interrupted save leaves the old
/// checkpoint intact.
fn save_atomic(path: &Path, ck: &Checkpoint) -> Result<(), CliError> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    save_checkpoint(&tmp, ck)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn load_data(cfg: &RunConfig) -> Result<(Dataset, Dataset), CliError> {
    let train = read_dataset(cfg.path(&cfg.paths.train_data))?;
    let eval = read_dataset(cfg.path(&cfg.paths.eval_data))?;
    if train.dims != eval.dims {
        return Err(CliError::Config(format!(
            "train and eval extents differ: {:?} vs {:?}",
            train.dims, eval.dims
        )));
    }
    Ok((train, eval))
}

fn describe(config: &CscaConfig) -> String {
    format!(
        "{} model, {} blocks, d={}, {} heads, {} parameters",
        config.variant,
        config.blocks,
        config.d,
        config.n_h,
        parameter_count(config)
    )
}

pub fn gen_data(cfg: &RunConfig) -> Result<(), CliError> {
    let syn = cfg.synthetic();
    let ds = generate_synthetic(&syn)?;
    let (train, eval) = ds.split(cfg.synthetic.train_samples)?;
    let (tp, ep) = (cfg.output(&cfg.paths.train_data)?, cfg.output(&cfg.paths.eval_data)?);
    write_dataset(&tp, &train)?;
    write_dataset(&ep, &eval)?;
    for (name, d, p) in [("train", &train, &tp), ("eval", &eval, &ep)] {
        let counts: Vec<String> = d
            .categories()
            .iter()
            .map(|c| format!("{c}={}", d.samples.iter().filter(|s| &s.category == c).count()))
            .collect();
        println!("{name}: {} samples ({}) -> {}", d.len(), counts.join(", "), p.display());
    }
    Ok(())
}

fn print_epoch(e: &EpochRecord) {
    let eval = e.eval_accuracy.map_or(String::from("-"), |a| format!("{a:.4}"));
    println!(
        "epoch {:>3}  lr {:.1e}  loss {:.5}  train {:.4}  eval {}  {:.1}s",
        e.epoch, e.lr, e.mean_loss, e.train_accuracy, eval, e.wall_secs
    );
}

pub fn train(
    cfg: &RunConfig,
    resume: bool,
    save_every: Option<usize>,
    max_steps: Option<usize>,
) -> Result<(), CliError> {
    let (train, eval) = load_data(cfg)?;
    let config = cfg.model_config(&train.dims)?;
    let tc = cfg.train_config();
    let ck_path = cfg.output(&cfg.paths.checkpoint)?;
    let mut trainer = if resume && ck_path.exists() {
        let ck = load_checkpoint(&ck_path, Some(&config))?;
        if ck.train != tc {
            return Err(CliError::Config(format!(
                "checkpoint was written with training settings {:?}, config gives {:?}",
                ck.train, tc
            )));
        }
        println!(
            "resuming {} at epoch {}, batch {}",
            ck_path.display(),
            ck.progress.epoch,
            ck.progress.batch
        );
        Trainer::resume(ck, &train.samples, Some(&eval.samples))?
    } else {
        let params = CscaParams::init(&config, cfg.seeds.init)?;
        Trainer::new(params, tc, &train.samples, Some(&eval.samples))?
    };
    println!("{}", describe(&config));

    let chunk = save_every.unwrap_or_else(|| trainer.batches_per_epoch()).max(1);
    let mut budget = max_steps.unwrap_or(usize::MAX);
    let mut reported = trainer.history().epochs.len();
    while !trainer.is_done() && budget > 0 {
        let ran = trainer.run_steps(chunk.min(budget))?;
        budget -= ran;
        for e in &trainer.history().epochs[reported..] {
            print_epoch(e);
        }
        reported = trainer.history().epochs.len();
        save_atomic(&ck_path, &trainer.checkpoint())?;
    }
    write_jsonl(cfg.output(&cfg.paths.history)?, &trainer.history().epochs)?;
    let p = trainer.progress();
    if trainer.is_done() {
        println!("training complete -> {}", ck_path.display());
    } else {
        println!(
            "stopped at epoch {}, batch {} -> {}",
            p.epoch,
            p.batch,
            ck_path.display()
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct ReportFile<'a> {
    #[serde(flatten)]
    report: &'a EvalReport,
    count: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    consensus: Option<f64>,
}

fn print_report(r: &EvalReport, consensus: Option<f64>) {
    for (name, c) in &r.categories {
        println!("{name:<16} {:.4}  ({} samples)", c.accuracy, c.count);
    }
    println!("overall {:.4}  ampt {:.4}  hmpt {:.4}", r.overall, r.ampt, r.hmpt);
    if let Some(c) = consensus {
        println!("consensus {c:.4}");
    }
}

pub fn eval(cfg: &RunConfig, records: Option<&Path>) -> Result<(), CliError> {
    let (report, consensus) = match records {
        Some(path) => {
            let recs = read_records(path)?;
            let consensus = recs
                .iter()
                .all(|r| r.annotators.is_some())
                .then(|| vqa_consensus_accuracy(&recs))
                .transpose()?;
            (EvalReport::from_records(&recs)?, consensus)
        }
        None => {
            let ck = load_checkpoint(cfg.path(&cfg.paths.checkpoint), None)?;
            let eval = read_dataset(cfg.path(&cfg.paths.eval_data))?;
            eval.dims.check_config(ck.config())?;
            let recs = predict_records(&ck.params, &eval)?;
            write_records(cfg.output(&cfg.paths.predictions)?, &recs)?;
            (EvalReport::from_records(&recs)?, None)
        }
    };
    print_report(&report, consensus);
    let file = ReportFile {
        report: &report,
        count: report.count(),
        consensus,
    };
    write_json(&cfg.output(&cfg.paths.report)?, &file)
}

pub fn ablate(cfg: &RunConfig) -> Result<(), CliError> {
    let (train, eval) = load_data(cfg)?;
    let config = cfg.model_config(&train.dims)?;
    let table = ablation_run(&config, &train, &eval, &cfg.train_config(), cfg.seeds.init)?;
    write_jsonl(cfg.output(&cfg.paths.ablation)?, &table.rows)?;
    write_json(&cfg.output(&cfg.paths.overlap)?, &table.overlap)?;
    print!("{}", table.render());
    Ok(())
}

pub fn sweep_blocks(cfg: &RunConfig, blocks: Option<Vec<usize>>) -> Result<(), CliError> {
    let blocks = blocks.unwrap_or_else(|| cfg.sweep.blocks.clone());
    let (train, eval) = load_data(cfg)?;
    let config = cfg.model_config(&train.dims)?;
    let table = blocks_sweep(&config, &blocks, &train, &eval, &cfg.train_config(), cfg.seeds.init)?;
    write_jsonl(cfg.output(&cfg.paths.sweep)?, &table.rows)?;
    print!("{}", table.render());
    Ok(())
}

pub fn gradcheck(cfg: &RunConfig, seeds: Option<u64>) -> Result<(), CliError> {
    let g = &cfg.gradcheck;
    let seeds = seeds.unwrap_or(g.seeds);
    let config = CscaConfig::tiny();
    let (mut rel, mut abs, mut checked, mut kinks, mut pass) = (0.0f64, 0.0f64, 0, 0, true);
    for seed in 0..seeds {
        let r = model_grad_check(&config, seed, g.step, g.tolerance)?;
        println!(
            "seed {seed:>3}: max relative error {:.3e}, max absolute error {:.3e}, {} checked, {} kinks skipped",
            r.max_rel_err, r.max_abs_err, r.checked, r.skipped_kinks
        );
        rel = rel.max(r.max_rel_err);
        abs = abs.max(r.max_abs_err);
        checked += r.checked;
        kinks += r.skipped_kinks;
        pass &= r.pass;
    }
    println!("max_rel_err {rel:.3e} (tolerance {:.0e})", g.tolerance);
    let out = json!({
        "config": config,
        "seeds": seeds,
        "step": g.step,
        "tolerance": g.tolerance,
        "max_rel_err": rel,
        "max_abs_err": abs,
        "checked": checked,
        "skipped_kinks": kinks,
        "pass": pass,
    });
    write_json(&cfg.output(&cfg.paths.gradcheck)?, &out)?;
    if pass {
        Ok(())
    } else {
        Err(CliError::Failed(format!("max relative error {rel:.3e}")))
    }
}

/// Mean attention each context position receives, over heads and query
/// positions. Rows of every head matrix are context positions.
fn received(heads: &[Tensor]) -> Vec<f64> {
    let rows = heads[0].rows();
    let cols = heads[0].cols();
    let scale = 1.0 / (heads.len() * cols) as f64;
    (0..rows)
        .map(|i| {
            heads
                .iter()
                .map(|h| (0..cols).map(|j| h.at(i, j)).sum::<f64>())
                .sum::<f64>()
                * scale
        })
        .collect()
}

fn top_k(scores: &[f64], k: usize) -> Vec<(usize, f64)> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.into_iter().take(k).map(|i| (i, scores[i])).collect()
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows())
        .map(|i| (0..t.cols()).map(|j| t.at(i, j)).collect())
        .collect()
}

fn heads_json(heads: &[Tensor]) -> serde_json::Value {
    heads.iter().map(rows).collect::<Vec<_>>().into()
}

fn ranked(top: &[(usize, f64)]) -> serde_json::Value {
    top.iter()
        .map(|&(index, score)| json!({ "index": index, "score": score }))
        .collect::<Vec<_>>()
        .into()
}

pub fn dump_attention(
    cfg: &RunConfig,
    samples: Option<usize>,
    top_k_arg: Option<usize>,
) -> Result<(), CliError> {
    let ck = load_checkpoint(cfg.path(&cfg.paths.checkpoint), None)?;
    let eval = read_dataset(cfg.path(&cfg.paths.eval_data))?;
    eval.dims.check_config(ck.config())?;
    let k = top_k_arg.unwrap_or(cfg.attention.top_k).max(1);
    let n = samples.unwrap_or(cfg.attention.samples).min(eval.len());
    let mut lines = Vec::with_capacity(n);
    for (i, s) in eval.samples.iter().take(n).enumerate() {
        let pred = forward(s, &ck.params, Mode::Eval, &mut RngStream::new(0), true)?;
        let last: BlockAttention<Tensor> = pred
            .attention
            .and_then(|mut blocks| blocks.pop())
            .unwrap_or_default();
        let (region_src, region_heads) = if !last.ca_question.is_empty() {
            ("ca_question", &last.ca_question)
        } else {
            ("sa_image", &last.sa_image)
        };
        let (word_src, word_heads) = if !last.ca_image.is_empty() {
            ("ca_image", &last.ca_image)
        } else {
            ("sa_question", &last.sa_question)
        };
        if region_heads.is_empty() || word_heads.is_empty() {
            return Err(CliError::Contract(format!(
                "the {} variant has no attention weights to dump",
                ck.config().variant
            )));
        }
        let region_scores = received(region_heads);
        let word_scores = received(word_heads);
        let top_regions = top_k(&region_scores, k);
        let top_word = top_k(&word_scores, 1)[0];
        let predicted = &eval.answer_labels[pred.answer];
        let answer = &eval.answer_labels[s.answer()];
        let shown: Vec<String> = top_regions
            .iter()
            .map(|(j, w)| format!("{j} ({w:.2})"))
            .collect();
        println!(
            "sample {i} [{}] predicted {predicted}, answer {answer}: regions {}; word {} ({:.2})",
            s.category,
            shown.join(", "),
            top_word.0,
            top_word.1
        );
        lines.push(json!({
            "id": i,
            "category": s.category,
            "predicted": predicted,
            "answer": answer,
            "region_source": region_src,
            "region_scores": region_scores,
            "top_regions": ranked(&top_regions),
            "word_source": word_src,
            "word_scores": word_scores,
            "top_word": { "index": top_word.0, "score": top_word.1 },
            "weights": {
                "sa_image": heads_json(&last.sa_image),
                "sa_question": heads_json(&last.sa_question),
                "ca_image": heads_json(&last.ca_image),
                "ca_question": heads_json(&last.ca_question),
            },
        }));
    }
    write_jsonl(cfg.output(&cfg.paths.attention)?, &lines)?;
    Ok(())
}

fn extension(p: &Path) -> &str {
    p.extension().and_then(|e| e.to_str()).unwrap_or("")
}

pub fn convert(cfg: &RunConfig, input: &Path, output: &Path) -> Result<(), CliError> {
    match (extension(input), extension(output)) {
        ("ds", "jsonl") => write_dataset_text(output, &read_dataset(input)?)?,
        ("jsonl", "ds") => write_dataset(output, &read_dataset_text(input)?)?,
        ("ck", "json") => write_checkpoint_text(output, &load_checkpoint(input, None)?.params)?,
        ("json", "ck") => save_checkpoint(output, &read_checkpoint_text(input, cfg.train_config())?)?,
        (a, b) => {
            return Err(CliError::Usage(format!(
                "cannot convert .{a} to .{b}; use .ds <-> .jsonl or .ck <-> .json"
            )))
        }
    }
    println!("{} -> {}", input.display(), output.display());
    Ok(())
}
