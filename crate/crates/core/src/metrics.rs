//! Accuracy metrics, prediction records, and the ablation and depth-sweep
//! harnesses.
//!
//! Prediction records are JSON lines:
//!
//! ```text
//! {"id":0,"predicted":"color3","category":"color","answer":"color3"}
//! {"id":1,"predicted":"2","category":"number","annotators":["2","2","3","2","two","2","2","3","2","2"]}
//! ```
//!
//! Exactly one of `answer` (single ground truth, scored 1 or 0) and
//! `annotators` (ten human answers, scored `min(matches / 3, 1)`) is present.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{ensure, Error, Result};
use crate::model::{self, parameter_count, CscaConfig, CscaParams, Variant};
use crate::optim::{self, TrainConfig, TrainHistory};

pub const ANNOTATORS: usize = 10;
/// Matching annotators needed for full credit.
pub const CONSENSUS: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionRecord {
    pub id: u64,
    pub predicted: String,
    pub category: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotators: Option<Vec<String>>,
}

impl PredictionRecord {
    /// Exact-match or consensus credit in `[0, 1]`.
    pub fn score(&self) -> Result<f64> {
        match (&self.answer, &self.annotators) {
            (Some(a), None) => Ok(if *a == self.predicted { 1.0 } else { 0.0 }),
            (None, Some(_)) => consensus_score(self),
            _ => Err(contract_one_truth(self.id)),
        }
    }
}

fn contract_one_truth(id: u64) -> Error {
    Error::Contract(format!(
        "record {id} must carry exactly one of answer and annotators"
    ))
}

fn consensus_score(r: &PredictionRecord) -> Result<f64> {
    let Some(ann) = &r.annotators else {
        return Err(Error::Contract(format!("record {} has no annotator answers", r.id)));
    };
    ensure!(
        r.answer.is_none(),
        "record {} must carry exactly one of answer and annotators",
        r.id
    );
    ensure!(
        ann.len() == ANNOTATORS,
        "record {} has {} annotator answers, expected {ANNOTATORS}",
        r.id,
        ann.len()
    );
    let matches = ann.iter().filter(|a| **a == r.predicted).count();
    Ok((matches as f64 / CONSENSUS as f64).min(1.0))
}

/// Mean of `min(matching annotators / 3, 1)`.
pub fn vqa_consensus_accuracy(records: &[PredictionRecord]) -> Result<f64> {
    ensure!(!records.is_empty(), "no prediction records");
    let total: f64 = records.iter().map(consensus_score).sum::<Result<f64>>()?;
    Ok(total / records.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryStats {
    pub accuracy: f64,
    pub count: usize,
}

/// Accuracy per question category, keyed by name.
pub fn category_accuracies(records: &[PredictionRecord]) -> Result<BTreeMap<String, CategoryStats>> {
    ensure!(!records.is_empty(), "no prediction records");
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for r in records {
        let s = r.score()?;
        let e = sums.entry(r.category.clone()).or_default();
        e.0 += s;
        e.1 += 1;
    }
    Ok(sums
        .into_iter()
        .map(|(k, (s, n))| {
            (
                k,
                CategoryStats {
                    accuracy: s / n as f64,
                    count: n,
                },
            )
        })
        .collect())
}

pub fn arithmetic_mean(accs: &[f64]) -> Result<f64> {
    ensure!(!accs.is_empty(), "mean of no categories");
    Ok(accs.iter().sum::<f64>() / accs.len() as f64)
}

/// `K / Σ 1/acc_k`, and 0 as soon as one accuracy is 0.
pub fn harmonic_mean(accs: &[f64]) -> Result<f64> {
    ensure!(!accs.is_empty(), "mean of no categories");
    if accs.contains(&0.0) {
        return Ok(0.0);
    }
    Ok(accs.len() as f64 / accs.iter().map(|a| 1.0 / a).sum::<f64>())
}

pub fn overall_accuracy(records: &[PredictionRecord]) -> Result<f64> {
    ensure!(!records.is_empty(), "no prediction records");
    let total: f64 = records.iter().map(PredictionRecord::score).sum::<Result<f64>>()?;
    Ok(total / records.len() as f64)
}

fn per_type(records: &[PredictionRecord]) -> Result<Vec<f64>> {
    Ok(category_accuracies(records)?
        .into_values()
        .map(|c| c.accuracy)
        .collect())
}

/// Arithmetic mean per question type.
pub fn ampt(records: &[PredictionRecord]) -> Result<f64> {
    arithmetic_mean(&per_type(records)?)
}

/// Harmonic mean per question type.
pub fn hmpt(records: &[PredictionRecord]) -> Result<f64> {
    harmonic_mean(&per_type(records)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: f64,
    pub ampt: f64,
    pub hmpt: f64,
    pub categories: BTreeMap<String, CategoryStats>,
}

impl EvalReport {
    pub fn from_records(records: &[PredictionRecord]) -> Result<Self> {
        let categories = category_accuracies(records)?;
        let accs: Vec<f64> = categories.values().map(|c| c.accuracy).collect();
        Ok(Self {
            overall: overall_accuracy(records)?,
            ampt: arithmetic_mean(&accs)?,
            hmpt: harmonic_mean(&accs)?,
            categories,
        })
    }

    pub fn count(&self) -> usize {
        self.categories.values().map(|c| c.count).sum()
    }
}

/// Eval-mode predictions for every sample, labelled with the dataset's
/// answer names.
pub fn predict_records(params: &CscaParams, ds: &Dataset) -> Result<Vec<PredictionRecord>> {
    let predicted = model::predict(params, &ds.samples)?;
    Ok(predicted
        .iter()
        .zip(&ds.samples)
        .enumerate()
        .map(|(i, (&p, s))| PredictionRecord {
            id: i as u64,
            predicted: ds.answer_labels[p].clone(),
            category: s.category.clone(),
            answer: Some(ds.answer_labels[s.answer()].clone()),
            annotators: None,
        })
        .collect())
}

pub fn evaluate(params: &CscaParams, ds: &Dataset) -> Result<EvalReport> {
    EvalReport::from_records(&predict_records(params, ds)?)
}

pub fn write_records(path: impl AsRef<Path>, records: &[PredictionRecord]) -> Result<()> {
    write_jsonl(path, records)
}

pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<PredictionRecord>> {
    let r = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PredictionRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

/// One JSON document per line.
pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, rows: &[T]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in rows {
        let s = serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(w, "{s}")?;
    }
    w.flush()?;
    Ok(())
}

/// A model trained by the harness, with its evaluation.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub params: CscaParams,
    pub history: TrainHistory,
    pub records: Vec<PredictionRecord>,
    pub report: EvalReport,
}

impl TrainedModel {
    pub fn correct(&self) -> Result<Vec<bool>> {
        self.records.iter().map(|r| Ok(r.score()? == 1.0)).collect()
    }
}

/// Initializes from `init_seed`, trains on `train`, evaluates on `eval`.
pub fn train_and_evaluate(
    config: &CscaConfig,
    train: &Dataset,
    eval: &Dataset,
    cfg: &TrainConfig,
    init_seed: u64,
) -> Result<TrainedModel> {
    train.dims.check_config(config)?;
    eval.dims.check_config(config)?;
    let params = CscaParams::init(config, init_seed)?;
    let (params, history) = optim::train(params, &train.samples, None, cfg)?;
    let records = predict_records(&params, eval)?;
    let report = EvalReport::from_records(&records)?;
    Ok(TrainedModel {
        params,
        history,
        records,
        report,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub parameter_count: usize,
    pub final_train_loss: f64,
    pub report: EvalReport,
}

/// Counts of eval samples answered correctly by subsets of the variants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Overlap {
    pub variants: Vec<Variant>,
    /// Correct under this variant and no other.
    pub only: Vec<usize>,
    /// `both[i][j]`: correct under variants `i` and `j`.
    pub both: Vec<Vec<usize>>,
    pub all: usize,
    pub none: usize,
}

impl Overlap {
    pub fn from_correct(variants: Vec<Variant>, correct: &[Vec<bool>]) -> Result<Self> {
        ensure!(
            variants.len() == correct.len() && !correct.is_empty(),
            "one correctness vector per variant"
        );
        let n = correct[0].len();
        ensure!(
            correct.iter().all(|c| c.len() == n),
            "correctness vectors differ in length"
        );
        let k = variants.len();
        let mut only = vec![0; k];
        let mut both = vec![vec![0; k]; k];
        let (mut all, mut none) = (0, 0);
        #[allow(clippy::needless_range_loop)]
        for s in 0..n {
            let hits: Vec<usize> = (0..k).filter(|&v| correct[v][s]).collect();
            match hits.len() {
                0 => none += 1,
                1 => only[hits[0]] += 1,
                _ => {}
            }
            if hits.len() == k {
                all += 1;
            }
            for &a in &hits {
                for &b in &hits {
                    both[a][b] += 1;
                }
            }
        }
        Ok(Self {
            variants,
            only,
            both,
            all,
            none,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub overlap: Overlap,
}

impl AblationTable {
    pub fn from_models(runs: &[(Variant, &TrainedModel)]) -> Result<Self> {
        let rows = runs
            .iter()
            .map(|(v, m)| AblationRow {
                variant: *v,
                parameter_count: parameter_count(&m.params.config),
                final_train_loss: m.history.epochs.last().map_or(f64::NAN, |e| e.mean_loss),
                report: m.report.clone(),
            })
            .collect();
        let correct = runs
            .iter()
            .map(|(_, m)| m.correct())
            .collect::<Result<Vec<_>>>()?;
        let overlap = Overlap::from_correct(runs.iter().map(|(v, _)| *v).collect(), &correct)?;
        Ok(Self { rows, overlap })
    }

    pub fn row(&self, v: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == v)
    }

    pub fn render(&self) -> String {
        let mut s = format!(
            "{:<8} {:>12} {:>9} {:>9} {:>9}\n",
            "variant", "parameters", "overall", "ampt", "hmpt"
        );
        for r in &self.rows {
            s += &format!(
                "{:<8} {:>12} {:>9.4} {:>9.4} {:>9.4}\n",
                r.variant.as_str(),
                r.parameter_count,
                r.report.overall,
                r.report.ampt,
                r.report.hmpt
            );
        }
        let o = &self.overlap;
        s += "correct only under:";
        for (v, n) in o.variants.iter().zip(&o.only) {
            s += &format!(" {v}={n}");
        }
        s += &format!("; under every variant {}; under no variant {}\n", o.all, o.none);
        s
    }
}

/// Trains every variant from the same seeds on the same data.
pub fn ablation_run(
    base: &CscaConfig,
    train: &Dataset,
    eval: &Dataset,
    cfg: &TrainConfig,
    init_seed: u64,
) -> Result<AblationTable> {
    let models = Variant::ALL
        .iter()
        .map(|&v| train_and_evaluate(&base.with_variant(v), train, eval, cfg, init_seed))
        .collect::<Result<Vec<_>>>()?;
    let runs: Vec<(Variant, &TrainedModel)> = Variant::ALL.iter().copied().zip(&models).collect();
    AblationTable::from_models(&runs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub blocks: usize,
    pub accuracy: f64,
    pub parameter_count: usize,
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn from_models(runs: &[(usize, &TrainedModel)]) -> Self {
        Self {
            rows: runs
                .iter()
                .map(|(t, m)| SweepRow {
                    blocks: *t,
                    accuracy: m.report.overall,
                    parameter_count: parameter_count(&m.params.config),
                    report: m.report.clone(),
                })
                .collect(),
        }
    }

    pub fn row(&self, blocks: usize) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.blocks == blocks)
    }

    pub fn render(&self) -> String {
        let mut s = format!("{:>6} {:>9} {:>12}\n", "blocks", "accuracy", "parameters");
        for r in &self.rows {
            s += &format!("{:>6} {:>9.4} {:>12}\n", r.blocks, r.accuracy, r.parameter_count);
        }
        s
    }
}

/// One model per cascade depth, all from the same seeds.
pub fn blocks_sweep(
    config: &CscaConfig,
    blocks: &[usize],
    train: &Dataset,
    eval: &Dataset,
    cfg: &TrainConfig,
    init_seed: u64,
) -> Result<SweepTable> {
    ensure!(!blocks.is_empty(), "no block counts to sweep");
    ensure!(blocks.iter().all(|&t| t >= 1), "block counts must be at least 1");
    let models = blocks
        .iter()
        .map(|&t| train_and_evaluate(&config.with_blocks(t), train, eval, cfg, init_seed))
        .collect::<Result<Vec<_>>>()?;
    let runs: Vec<(usize, &TrainedModel)> = blocks.iter().copied().zip(&models).collect();
    Ok(SweepTable::from_models(&runs))
}
