//! Central finite-difference checks of reverse-mode gradients.

use crate::error::{ensure, Result};
use crate::model::{self, CscaConfig, CscaParams, Mode, VqaSample};
use crate::rng::RngStream;
use crate::tensor::{Graph, Tensor, Var};

/// Elements whose analytic and numeric derivatives differ by no more than
/// this count as exact. Finite differences of exactly-zero derivatives carry
/// roundoff noise around 1e-11, which a relative measure would blow up.
pub const ABS_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
    /// Elements skipped because the two probes landed on different sides of
    /// a ReLU kink.
    pub skipped_kinks: usize,
    pub pass: bool,
}

impl GradCheckReport {
    fn merge(&mut self, other: &GradCheckReport) {
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
        self.max_abs_err = self.max_abs_err.max(other.max_abs_err);
        self.checked += other.checked;
        self.skipped_kinks += other.skipped_kinks;
        self.pass &= other.pass;
    }
}

/// Relative error between an analytic and a numeric derivative.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff <= ABS_FLOOR {
        0.0
    } else {
        diff / analytic.abs().max(numeric.abs())
    }
}

/// Checks `d f(x) / d x` for a scalar-valued graph function of one tensor.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>, Var) -> Result<Var>,
{
    grad_check_params(
        |g| {
            let x = g.param(0);
            f(g, x)
        },
        std::slice::from_ref(x),
        h,
        tol,
    )
}

/// Checks the gradient of a scalar graph function with respect to every
/// element of every tensor in `params` (bound as the graph's parameters).
pub fn grad_check_params<F>(f: F, params: &[Tensor], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    ensure!(h > 0.0, "finite-difference step must be positive");
    let analytic: Vec<Tensor> = {
        let mut g = Graph::new(params);
        let root = f(&mut g)?;
        ensure!(
            g.value(root).is_scalar(),
            "grad_check needs a scalar function, got shape {:?}",
            g.value(root).shape()
        );
        let grads = g.backward(root)?;
        (0..params.len())
            .map(|i| grads.wrt(&g, g.param(i)))
            .collect()
    };

    let eval = |ps: &[Tensor]| -> Result<(f64, Vec<bool>)> {
        let mut g = Graph::new(ps).track_kinks();
        let root = f(&mut g)?;
        let v = g.value(root).item()?;
        Ok((v, g.relu_signs().unwrap_or_default().to_vec()))
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: 0,
        skipped_kinks: 0,
        pass: true,
    };
    let mut work = params.to_vec();
    for (pi, grad) in analytic.iter().enumerate() {
        let mut part = GradCheckReport {
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            checked: 0,
            skipped_kinks: 0,
            pass: true,
        };
        for e in 0..grad.len() {
            let orig = work[pi].data()[e];
            work[pi].data_mut()[e] = orig + h;
            let (fp, sp) = eval(&work)?;
            work[pi].data_mut()[e] = orig - h;
            let (fm, sm) = eval(&work)?;
            work[pi].data_mut()[e] = orig;
            if sp != sm {
                part.skipped_kinks += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * h);
            let a = grad.data()[e];
            part.max_abs_err = part.max_abs_err.max((a - numeric).abs());
            part.max_rel_err = part.max_rel_err.max(relative_error(a, numeric));
            part.checked += 1;
        }
        part.pass = part.max_rel_err <= tol;
        report.merge(&part);
    }
    Ok(report)
}

/// A sample with Gaussian features and a random soft target.
pub fn random_sample(config: &CscaConfig, rng: &mut RngStream) -> VqaSample {
    let raw: Vec<f64> = (0..config.n_c).map(|_| rng.uniform() + 0.01).collect();
    let total: f64 = raw.iter().sum();
    VqaSample {
        regions: Tensor::from_fn([config.d_v, config.n_v], |_| rng.normal()),
        words: Tensor::from_fn([config.d_w, config.n_w], |_| rng.normal()),
        target: Tensor::vector(raw.iter().map(|x| x / total).collect()),
        category: "random".into(),
    }
}

/// Checks the training-mode loss gradient of the whole model with respect to
/// every weight, on a random sample drawn from `seed`. Dropout masks are
/// replayed identically for every probe. Layer-norm gains and offsets are
/// moved off their initial values first.
pub fn model_grad_check(config: &CscaConfig, seed: u64, h: f64, tol: f64) -> Result<GradCheckReport> {
    let mut params = CscaParams::init(config, seed)?;
    let mut rng = RngStream::new(seed).fork(1);
    for (t, name) in params.tensors.iter_mut().zip(&params.names) {
        if name.contains(".ln") {
            for v in t.data_mut() {
                *v += 0.2 * rng.uniform_range(-1.0, 1.0);
            }
        }
    }
    let sample = random_sample(config, &mut rng);
    let dropout = RngStream::new(seed).fork(2);
    grad_check_params(
        |g| {
            let mut r = dropout.clone();
            let trace = model::forward_graph(g, &sample, &params, Mode::Train, &mut r)?;
            model::loss_ce(g, trace.probs, &sample.target)
        },
        &params.tensors,
        h,
        tol,
    )
}
