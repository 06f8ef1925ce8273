//! Acceptance suite. Every criterion prints one PASS/FAIL line to stderr
//! (bypassing the test harness capture) and then asserts.
//!
//! The training criteria share cached runs, so criteria 4, 5 and 9 together
//! train six models: four variants at T=2 plus sca at T=1 and T=4.

use std::io::Write;
use std::sync::OnceLock;
use std::time::Instant;

use csca::attention::{self, AttentionDims, AttentionLayerParams};
use csca::data::{
    decode_checkpoint, encode_checkpoint, generate_synthetic, load_checkpoint, save_checkpoint,
    Dataset, SyntheticConfig,
};
use csca::gradcheck::{grad_check_params, model_grad_check, GradCheckReport};
use csca::metrics::{
    ampt, arithmetic_mean, harmonic_mean, hmpt, overall_accuracy, train_and_evaluate,
    vqa_consensus_accuracy, AblationTable, PredictionRecord, SweepTable, TrainedModel, ANNOTATORS,
};
use csca::optim::{adamax_step, lr_at, AdamaxState, TrainConfig, Trainer};
use csca::params::ParamBuilder;
use csca::{parameter_count, CscaConfig, CscaParams, Graph, Result, RngStream, Tensor, Var, Variant};

const H: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;

fn verdict(criterion: u32, pass: bool, detail: &str) {
    let tag = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "acceptance criterion {criterion}: {tag}: {detail}");
}

fn random(shape: &[usize], rng: &mut RngStream) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.uniform_range(-1.0, 1.0))
}

// ---------------------------------------------------------------- criterion 1

fn readout(g: &mut Graph<'_>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = RngStream::new(seed ^ 0x5EED);
    let w = g.input(random(g.value(y).shape(), &mut rng));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

type OpBuilder = fn(&mut Graph<'_>, &[Var], u64) -> Result<Var>;

fn op_cases() -> Vec<(&'static str, Vec<Vec<usize>>, OpBuilder)> {
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], |g, v, _| g.matmul(v[0], v[1])),
        ("matmul_tn", vec![vec![4, 3], vec![4, 2]], |g, v, _| g.matmul_tn(v[0], v[1])),
        ("matmul_nt", vec![vec![3, 4], vec![2, 4]], |g, v, _| g.matmul_ex(v[0], false, v[1], true)),
        ("matmul_tt", vec![vec![4, 3], vec![2, 4]], |g, v, _| g.matmul_ex(v[0], true, v[1], true)),
        ("add", vec![vec![2, 3], vec![2, 3]], |g, v, _| g.add(v[0], v[1])),
        ("mul", vec![vec![2, 3], vec![2, 3]], |g, v, _| g.mul(v[0], v[1])),
        ("scale", vec![vec![5]], |g, v, _| Ok(g.scale(v[0], 0.37))),
        ("add_col_bias", vec![vec![3, 4], vec![3]], |g, v, _| g.add_col_bias(v[0], v[1])),
        ("relu", vec![vec![4, 3]], |g, v, _| Ok(g.relu(v[0]))),
        ("dropout", vec![vec![4, 3]], |g, v, seed| {
            g.dropout(v[0], 0.25, true, &mut RngStream::new(seed))
        }),
        ("softmax_axis0", vec![vec![4, 3]], |g, v, _| g.softmax(v[0], 0)),
        ("softmax_axis1", vec![vec![4, 3]], |g, v, _| g.softmax(v[0], 1)),
        ("layer_norm", vec![vec![5, 3], vec![5], vec![5]], |g, v, _| {
            g.layer_norm(v[0], v[1], v[2], 1e-5)
        }),
        ("mean_axis0", vec![vec![4, 3]], |g, v, _| g.mean_axis(v[0], 0)),
        ("mean_axis1", vec![vec![4, 3]], |g, v, _| g.mean_axis(v[0], 1)),
        ("concat_rows", vec![vec![2, 3], vec![3, 3]], |g, v, _| g.concat_rows(&[v[0], v[1]])),
        ("reshape", vec![vec![2, 6]], |g, v, _| g.reshape(v[0], [4, 3])),
        ("sum", vec![vec![2, 3]], |g, v, _| Ok(g.sum(v[0]))),
        ("cross_entropy", vec![vec![6]], |g, v, seed| {
            let mut rng = RngStream::new(seed + 7);
            let raw: Vec<f64> = (0..6).map(|_| rng.uniform() + 0.01).collect();
            let s: f64 = raw.iter().sum();
            let t = Tensor::vector(raw.iter().map(|x| x / s).collect());
            let p = g.softmax(v[0], 0)?;
            g.cross_entropy(p, &t, 1e-12)
        }),
    ]
}

#[test]
fn criterion_1_gradient_correctness() {
    let started = Instant::now();
    let seeds = 20u64;
    let mut worst_op = (0.0f64, "");
    let mut all_pass = true;
    for (name, shapes, build) in op_cases() {
        for seed in 0..seeds {
            let mut rng = RngStream::new(1000 + seed);
            let inputs: Vec<Tensor> = shapes.iter().map(|s| random(s, &mut rng)).collect();
            let r = grad_check_params(
                |g| {
                    let vars: Vec<Var> = (0..inputs.len()).map(|i| g.param(i)).collect();
                    let y = build(g, &vars, seed)?;
                    if g.value(y).is_scalar() {
                        Ok(y)
                    } else {
                        readout(g, y, seed)
                    }
                },
                &inputs,
                H,
                GRAD_TOL,
            )
            .unwrap();
            all_pass &= r.pass;
            if r.max_rel_err >= worst_op.0 {
                worst_op = (r.max_rel_err, name);
            }
        }
    }
    let config = CscaConfig::tiny();
    let mut model = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: 0,
        skipped_kinks: 0,
        pass: true,
    };
    for seed in 0..seeds {
        let r = model_grad_check(&config, seed, H, GRAD_TOL).unwrap();
        model.max_rel_err = model.max_rel_err.max(r.max_rel_err);
        model.max_abs_err = model.max_abs_err.max(r.max_abs_err);
        model.checked += r.checked;
        model.skipped_kinks += r.skipped_kinks;
        model.pass &= r.pass;
    }
    let secs = started.elapsed().as_secs_f64();
    let pass = all_pass && model.pass && model.max_rel_err < GRAD_TOL && secs < 120.0;
    verdict(
        1,
        pass,
        &format!(
            "{} ops x {seeds} seeds, worst op rel err {:.2e} ({}); full model {seeds} seeds, rel err {:.2e}, abs err {:.2e}, {} elements, {} kinks skipped; {secs:.1}s (limit 120s, tol 1e-4)",
            op_cases().len(),
            worst_op.0,
            worst_op.1,
            model.max_rel_err,
            model.max_abs_err,
            model.checked,
            model.skipped_kinks
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- criterion 2

struct LayerRun {
    output: Tensor,
    weights: Vec<Tensor>,
}

fn run_layer(tensors: &[Tensor], layer: &AttentionLayerParams, target: &Tensor, other: Option<&Tensor>) -> LayerRun {
    let mut g = Graph::new(tensors);
    let t = g.input(target.clone());
    let mut rng = RngStream::new(0);
    let a = match other {
        Some(o) => {
            let o = g.input(o.clone());
            attention::co_attention(&mut g, t, o, layer, false, &mut rng)
        }
        None => attention::self_attention(&mut g, t, layer, false, &mut rng),
    }
    .unwrap();
    LayerRun {
        output: g.value(a.output).clone(),
        weights: a.weights.iter().map(|&w| g.value(w).clone()).collect(),
    }
}

fn random_perm(n: usize, rng: &mut RngStream) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut p);
    p
}

#[test]
fn criterion_2_stochasticity_and_equivariance() {
    let mut worst_sum = 0.0f64;
    let mut worst_perm = 0.0f64;
    let mut rng = RngStream::new(77);
    for instance in 0..1000 {
        let heads = 1 + rng.below(3);
        let dims = AttentionDims {
            d_model: 2 + rng.below(8),
            heads,
            d_kq: 1 + rng.below(5),
            d_vs: 1 + rng.below(5),
            d_ff: 1 + rng.below(10),
            dropout: 0.1,
        };
        let mut init = RngStream::new(instance);
        let mut b = ParamBuilder::new(&mut init);
        let layer = AttentionLayerParams::build(&mut b, "l", &dims);
        let (tensors, _) = b.finish();
        let lt = 1 + rng.below(7);
        let lo = 1 + rng.below(7);
        let target = random(&[dims.d_model, lt], &mut rng);
        let co = instance % 2 == 1;
        let other = co.then(|| random(&[dims.d_model, lo], &mut rng));
        let base = run_layer(&tensors, &layer, &target, other.as_ref());

        for w in &base.weights {
            for j in 0..w.cols() {
                let s: f64 = (0..w.rows()).map(|i| w.at(i, j)).sum();
                worst_sum = worst_sum.max((s - 1.0).abs());
            }
        }

        let pt = random_perm(lt, &mut rng);
        let t2 = target.permute_columns(&pt).unwrap();
        let (po, o2) = match &other {
            Some(o) => {
                let p = random_perm(lo, &mut rng);
                let o2 = o.permute_columns(&p).unwrap();
                (p, Some(o2))
            }
            None => (pt.clone(), None),
        };
        let permuted = run_layer(&tensors, &layer, &t2, o2.as_ref());
        let expect_out = base.output.permute_columns(&pt).unwrap();
        worst_perm = worst_perm.max(permuted.output.max_abs_diff(&expect_out));
        for (w, w2) in base.weights.iter().zip(&permuted.weights) {
            #[allow(clippy::needless_range_loop)]
            for i in 0..w.rows() {
                for j in 0..w.cols() {
                    worst_perm = worst_perm.max((w2.at(i, j) - w.at(po[i], pt[j])).abs());
                }
            }
        }
    }
    let pass = worst_sum <= 1e-9 && worst_perm <= 1e-9;
    verdict(
        2,
        pass,
        &format!(
            "1000 layer instances (self and co), max |column sum - 1| {worst_sum:.2e}, max permutation deviation {worst_perm:.2e} (tol 1e-9)"
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- criterion 3

/// Direct loops: `V · softmax_ctx(Kᵀ Q / sqrt(d))`.
fn naive_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Tensor {
    let (d, lq) = (q.rows(), q.cols());
    let lk = k.cols();
    let mut out = Tensor::zeros([v.rows(), lq]);
    for j in 0..lq {
        let s: Vec<f64> = (0..lk)
            .map(|i| (0..d).map(|r| k.at(r, i) * q.at(r, j)).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
        let z: f64 = e.iter().sum();
        for r in 0..v.rows() {
            let val: f64 = (0..lk).map(|i| v.at(r, i) * e[i] / z).sum();
            out.set(r, j, val);
        }
    }
    out
}

#[test]
fn criterion_3_single_head_degeneracy() {
    let mut worst = 0.0f64;
    let mut worst_naive = 0.0f64;
    for seed in 0..200u64 {
        let mut rng = RngStream::new(seed);
        let d = 2 + rng.below(8);
        let dims = AttentionDims {
            d_model: d,
            heads: 1,
            d_kq: 1 + rng.below(6),
            d_vs: d,
            d_ff: 4,
            dropout: 0.0,
        };
        let mut init = RngStream::new(seed + 1);
        let mut b = ParamBuilder::new(&mut init);
        let layer = AttentionLayerParams::build(&mut b, "l", &dims);
        let (mut tensors, _) = b.finish();
        tensors[layer.mh.w_mh.0] = Tensor::identity(d);
        let (lq, lc) = (1 + rng.below(6), 1 + rng.below(6));
        let xq = random(&[d, lq], &mut rng);
        let xc = random(&[d, lc], &mut rng);

        let mut g = Graph::new(&tensors);
        let (q, c) = (g.input(xq.clone()), g.input(xc.clone()));
        let mh = attention::multi_head(&mut g, q, c, &layer.mh).unwrap();
        let mh_out = g.value(mh.output).clone();

        let h = &layer.mh.heads[0];
        let proj = |w: usize, x: &Tensor| tensors[w].transposed().unwrap().matmul(x).unwrap();
        let (pq, pk, pv) = (proj(h.w_q.0, &xq), proj(h.w_k.0, &xc), proj(h.w_v.0, &xc));
        let mut g2 = Graph::new(&[]);
        let (q2, k2, v2) = (g2.input(pq.clone()), g2.input(pk.clone()), g2.input(pv.clone()));
        let (single, _) = attention::scaled_dot_attention(&mut g2, q2, k2, v2).unwrap();
        worst = worst.max(mh_out.max_abs_diff(g2.value(single)));
        worst_naive = worst_naive.max(g2.value(single).max_abs_diff(&naive_attention(&pq, &pk, &pv)));
    }
    let pass = worst <= 1e-12 && worst_naive <= 1e-12;
    verdict(
        3,
        pass,
        &format!(
            "200 instances, n_h=1 with identity merge vs single head: max diff {worst:.2e}; single head vs direct loops: {worst_naive:.2e} (tol 1e-12)"
        ),
    );
    assert!(pass);
}

// ------------------------------------------------------- shared training runs

const DATA_SEED: u64 = 1;
const INIT_SEED: u64 = 2;
const SHUFFLE_SEED: u64 = 3;

fn synthetic_setup() -> &'static (Dataset, Dataset) {
    static DATA: OnceLock<(Dataset, Dataset)> = OnceLock::new();
    DATA.get_or_init(|| {
        let ds = generate_synthetic(&SyntheticConfig {
            n_v: 6,
            n_w: 6,
            d_v: 16,
            d_w: 20,
            shapes: 8,
            colors: 5,
            noise_sigma: 0.05,
            num_samples: 10_000,
            seed: DATA_SEED,
        })
        .unwrap();
        ds.split(8000).unwrap()
    })
}

fn base_config() -> CscaConfig {
    let (train, _) = synthetic_setup();
    let mut c = CscaConfig {
        d: 64,
        n_h: 4,
        d_kq: 16,
        d_vs: 16,
        d_ff: 256,
        d_hp: 128,
        blocks: 2,
        dropout: 0.1,
        variant: Variant::Sca,
        ..CscaConfig::default()
    };
    train.dims.apply(&mut c);
    c
}

fn training_schedule() -> TrainConfig {
    TrainConfig {
        epochs: 15,
        batch_size: 64,
        base_lr: 0.002,
        decay_factor: 0.1,
        decay_every: 5,
        shuffle_seed: SHUFFLE_SEED,
    }
}

const RUNS: [(Variant, usize); 6] = [
    (Variant::Sca, 2),
    (Variant::CaOnly, 2),
    (Variant::SaOnly, 2),
    (Variant::None, 2),
    (Variant::Sca, 1),
    (Variant::Sca, 4),
];

/// A trained model and the seconds its training and evaluation took.
fn trained(variant: Variant, blocks: usize) -> &'static (TrainedModel, f64) {
    static MODELS: [OnceLock<(TrainedModel, f64)>; 6] = [const { OnceLock::new() }; 6];
    let slot = RUNS
        .iter()
        .position(|&r| r == (variant, blocks))
        .expect("run is registered");
    MODELS[slot].get_or_init(|| {
        let (train, eval) = synthetic_setup();
        let config = base_config().with_variant(variant).with_blocks(blocks);
        let started = Instant::now();
        let m = train_and_evaluate(&config, train, eval, &training_schedule(), INIT_SEED).unwrap();
        let secs = started.elapsed().as_secs_f64();
        let _ = writeln!(
            std::io::stderr(),
            "  trained {variant} T={blocks}: eval accuracy {:.4}, {secs:.0}s",
            m.report.overall
        );
        (m, secs)
    })
}

// ---------------------------------------------------------------- criterion 4

#[test]
fn criterion_4_synthetic_learnability() {
    let (m, secs) = trained(Variant::Sca, 2);
    let acc = m.report.overall;
    let pass = acc >= 0.95;
    let cats: Vec<String> = m
        .report
        .categories
        .iter()
        .map(|(k, c)| format!("{k} {:.4}", c.accuracy))
        .collect();
    verdict(
        4,
        pass,
        &format!(
            "sca T=2 eval accuracy {acc:.4} (need >= 0.95; {}), trained 15 epochs in {:.1} min (target < 30)",
            cats.join(", "),
            secs / 60.0
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- criterion 5

#[test]
fn criterion_5_ablation_ordering() {
    let runs: Vec<(Variant, &TrainedModel)> = [Variant::None, Variant::SaOnly, Variant::CaOnly, Variant::Sca]
        .iter()
        .map(|&v| (v, &trained(v, 2).0))
        .collect();
    let table = AblationTable::from_models(&runs).unwrap();
    let acc = |v| table.row(v).unwrap().report.overall;
    let count = |v| parameter_count(&base_config().with_variant(v));
    let (sca, ca, sa, none) = (
        acc(Variant::Sca),
        acc(Variant::CaOnly),
        acc(Variant::SaOnly),
        acc(Variant::None),
    );
    let sca_margin = sca >= ca + 0.02;
    let ca_margin = ca >= sa + 0.02;
    let none_lowest = none < sa && none < ca && none < sca;
    let counts_ok = count(Variant::Sca) > count(Variant::CaOnly)
        && count(Variant::CaOnly) > count(Variant::None)
        && count(Variant::Sca) > count(Variant::SaOnly);
    let pass = sca_margin && ca_margin && none_lowest && counts_ok;
    let _ = write!(std::io::stderr(), "{}", table.render());
    verdict(
        5,
        pass,
        &format!(
            "accuracy sca {sca:.4}, ca-only {ca:.4}, sa-only {sa:.4}, none {none:.4}; sca >= ca-only + 0.02: {sca_margin}; ca-only >= sa-only + 0.02: {ca_margin}; none lowest: {none_lowest}; parameter ordering: {counts_ok}"
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- criterion 6

fn rec(id: u64, category: &str, hit: bool) -> PredictionRecord {
    PredictionRecord {
        id,
        predicted: "yes".into(),
        category: category.into(),
        answer: Some(if hit { "yes" } else { "no" }.into()),
        annotators: None,
    }
}

fn annotated(matches: usize) -> PredictionRecord {
    PredictionRecord {
        id: 0,
        predicted: "yes".into(),
        category: "c".into(),
        answer: None,
        annotators: Some(
            (0..ANNOTATORS)
                .map(|i| if i < matches { "yes" } else { "no" }.to_string())
                .collect(),
        ),
    }
}

#[test]
fn criterion_6_metric_fixtures() {
    let tol = 1e-12;
    let one_cat = vec![rec(0, "a", true), rec(1, "a", true), rec(2, "a", false), rec(3, "a", true)];
    let two_cat = vec![rec(0, "a", true), rec(1, "b", true), rec(2, "b", false)];
    let zero_cat = vec![rec(0, "a", true), rec(1, "b", false)];
    let fixtures = [
        ("overall 3/4", overall_accuracy(&one_cat).unwrap(), 0.75),
        ("ampt 3/4", ampt(&one_cat).unwrap(), 0.75),
        ("hmpt 3/4", hmpt(&one_cat).unwrap(), 0.75),
        ("ampt {1, 0.5}", ampt(&two_cat).unwrap(), 0.75),
        ("hmpt {1, 0.5}", hmpt(&two_cat).unwrap(), 2.0 / 3.0),
        ("hmpt with a zero category", hmpt(&zero_cat).unwrap(), 0.0),
        ("consensus 3 match", vqa_consensus_accuracy(&[annotated(3)]).unwrap(), 1.0),
        ("consensus 0 match", vqa_consensus_accuracy(&[annotated(0)]).unwrap(), 0.0),
        ("consensus 2 match", vqa_consensus_accuracy(&[annotated(2)]).unwrap(), 2.0 / 3.0),
    ];
    let bad: Vec<String> = fixtures
        .iter()
        .filter(|(_, got, want)| (got - want).abs() > tol)
        .map(|(n, got, want)| format!("{n}: {got} vs {want}"))
        .collect();

    let mut rng = RngStream::new(6);
    let mut violations = 0;
    for _ in 0..10_000 {
        let k = 1 + rng.below(10);
        let accs: Vec<f64> = (0..k)
            .map(|_| if rng.below(20) == 0 { 0.0 } else { rng.uniform() })
            .collect();
        if arithmetic_mean(&accs).unwrap() < harmonic_mean(&accs).unwrap() - 1e-15 {
            violations += 1;
        }
    }
    let pass = bad.is_empty() && violations == 0;
    verdict(
        6,
        pass,
        &format!(
            "{} fixtures within 1e-12 ({} off{}), AM >= HM on 10000 random profiles ({violations} violations)",
            fixtures.len(),
            bad.len(),
            if bad.is_empty() { String::new() } else { format!(": {}", bad.join("; ")) }
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- criterion 7

#[test]
fn criterion_7_optimizer_fixture() {
    let mut p = vec![Tensor::scalar(0.0)];
    let mut s = AdamaxState::new(&p);
    adamax_step(&mut p, &[Tensor::scalar(1.0)], &mut s, 0.002).unwrap();
    let theta = p[0].data()[0];
    let m = s.m[0].data()[0];
    let u = s.u[0].data()[0];
    // With eps in the denominator the exact value is -0.002 / (1 + 1e-8).
    let trace_ok = (m - 0.1).abs() <= 1e-12
        && (u - 1.0).abs() <= 1e-12
        && (theta - (-0.002 / (1.0 + 1e-8))).abs() <= 1e-12
        && (theta + 0.002).abs() <= 1e-10;
    let c = TrainConfig::default();
    let lrs = [lr_at(0, &c), lr_at(5, &c), lr_at(10, &c)];
    let sched_ok = [0.002, 0.0002, 0.00002]
        .iter()
        .zip(&lrs)
        .all(|(want, got)| (want - got).abs() <= 1e-12);
    let pass = trace_ok && sched_ok;
    verdict(
        7,
        pass,
        &format!(
            "one step from theta=0, g=1: m={m}, u={u}, theta={theta:.15e} (|theta + 0.002| = {:.1e}); lr at epochs 0/5/10 = {:e} / {:e} / {:e}",
            (theta + 0.002).abs(),
            lrs[0],
            lrs[1],
            lrs[2]
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- criterion 8

struct PipelineRun {
    checkpoint: Vec<u8>,
    history: csca::optim::TrainHistory,
    history_json: String,
}

fn small_pipeline() -> (Dataset, Dataset, CscaConfig, TrainConfig) {
    let ds = generate_synthetic(&SyntheticConfig {
        num_samples: 500,
        seed: 21,
        ..SyntheticConfig::default()
    })
    .unwrap();
    let (train, eval) = ds.split(400).unwrap();
    let mut config = CscaConfig {
        d: 16,
        n_h: 2,
        d_kq: 8,
        d_vs: 8,
        d_ff: 32,
        d_hp: 16,
        blocks: 2,
        dropout: 0.1,
        ..CscaConfig::default()
    };
    train.dims.apply(&mut config);
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 64,
        shuffle_seed: 23,
        ..TrainConfig::default()
    };
    (train, eval, config, cfg)
}

fn pipeline_once() -> PipelineRun {
    let (train, eval, config, cfg) = small_pipeline();
    let params = CscaParams::init(&config, 22).unwrap();
    let mut t = Trainer::new(params, cfg, &train.samples, Some(&eval.samples)).unwrap();
    t.run().unwrap();
    PipelineRun {
        checkpoint: encode_checkpoint(&t.checkpoint()).unwrap(),
        history: t.history().clone(),
        history_json: serde_json::to_string(t.history()).unwrap(),
    }
}

#[test]
fn criterion_8_determinism_and_persistence() {
    let a = pipeline_once();
    let b = pipeline_once();
    let rerun_ok = a.checkpoint == b.checkpoint
        && a.history.same_trajectory(&b.history)
        && a.history_json == b.history_json;

    // Interrupt mid-epoch (400 samples in batches of 64: 7 steps per epoch),
    // persist through a file, resume.
    let (train, eval, config, cfg) = small_pipeline();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.ck");
    let mut first = Trainer::new(
        CscaParams::init(&config, 22).unwrap(),
        cfg,
        &train.samples,
        Some(&eval.samples),
    )
    .unwrap();
    first.run_steps(10).unwrap();
    save_checkpoint(&path, &first.checkpoint()).unwrap();
    drop(first);
    let ck = load_checkpoint(&path, Some(&config)).unwrap();
    let mut resumed = Trainer::resume(ck, &train.samples, Some(&eval.samples)).unwrap();
    resumed.run().unwrap();
    let resumed_bytes = encode_checkpoint(&resumed.checkpoint()).unwrap();
    let resume_ok = resumed_bytes == a.checkpoint && resumed.history().same_trajectory(&a.history);
    let decoded = decode_checkpoint(&a.checkpoint, Some(&config)).unwrap();
    let round_trip_ok = encode_checkpoint(&decoded).unwrap() == a.checkpoint;

    let pass = rerun_ok && resume_ok && round_trip_ok;
    verdict(
        8,
        pass,
        &format!(
            "rerun identical (checkpoint {} bytes, {} epochs of history): {rerun_ok}; resumed after 10 of 21 steps equals uninterrupted: {resume_ok}; checkpoint round trip: {round_trip_ok}",
            a.checkpoint.len(),
            a.history.epochs.len()
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- criterion 9

/// Learnable scalars counted term by term.
fn hand_parameter_count(c: &CscaConfig) -> usize {
    let (d, h) = (c.d, c.n_h);
    let attention = h * (d * c.d_kq + d * c.d_kq + d * c.d_vs) + d * h * c.d_vs;
    let ffn = d * c.d_ff + c.d_ff + c.d_ff * d + d;
    let norms = 2 * (d + d);
    let layer = attention + ffn + norms;
    let layers_per_block = match c.variant {
        Variant::Sca => 4,
        Variant::SaOnly | Variant::CaOnly => 2,
        Variant::None => 0,
    };
    let projections = d * c.d_v + d * c.d_w;
    let classifier = c.d_hp * d + c.d_hp + c.n_c * c.d_hp + c.n_c;
    projections + c.blocks * layers_per_block * layer + classifier
}

#[test]
fn criterion_9_blocks_sweep() {
    let runs: Vec<(usize, &TrainedModel)> = [1, 2, 4].iter().map(|&t| (t, &trained(Variant::Sca, t).0)).collect();
    let table = SweepTable::from_models(&runs);
    let counts_ok = runs.iter().all(|(t, m)| {
        let c = base_config().with_blocks(*t);
        let n = parameter_count(&c);
        n == hand_parameter_count(&c) && n == m.params.scalar_count()
    });
    let increasing = table.rows.windows(2).all(|w| w[1].parameter_count > w[0].parameter_count);
    let acc = |t| table.row(t).unwrap().accuracy;
    let depth_ok = acc(2) >= acc(1) - 0.02;
    let pass = counts_ok && increasing && depth_ok;
    let _ = write!(std::io::stderr(), "{}", table.render());
    verdict(
        9,
        pass,
        &format!(
            "T=1/2/4 accuracy {:.4} / {:.4} / {:.4}, parameters {} / {} / {}; counts match closed form: {counts_ok}; strictly increasing: {increasing}; acc(T=2) >= acc(T=1) - 0.02: {depth_ok}",
            acc(1),
            acc(2),
            acc(4),
            table.rows[0].parameter_count,
            table.rows[1].parameter_count,
            table.rows[2].parameter_count
        ),
    );
    assert!(pass);
}
