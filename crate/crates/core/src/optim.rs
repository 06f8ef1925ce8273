//! Adamax with step decay, and the mini-batch training loop.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::Checkpoint;
use crate::error::{ensure, Result};
use crate::model::{self, CscaParams, Mode, VqaSample};
use crate::rng::RngStream;
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAMAX_EPS: f64 = 1e-8;

const SHUFFLE_TAG: u64 = 1;
const DROPOUT_TAG: u64 = 2;

/// First moments `m`, infinity-norm accumulators `u` and the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamaxState {
    pub m: Vec<Tensor>,
    pub u: Vec<Tensor>,
    pub t: u64,
}

impl AdamaxState {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            m: zeros.clone(),
            u: zeros,
            t: 0,
        }
    }

    fn check(&self, params: &[Tensor]) -> Result<()> {
        ensure!(
            self.m.len() == params.len() && self.u.len() == params.len(),
            "optimizer tracks {} arrays, model has {}",
            self.m.len(),
            params.len()
        );
        for (i, p) in params.iter().enumerate() {
            ensure!(
                self.m[i].shape() == p.shape() && self.u[i].shape() == p.shape(),
                "optimizer state {i} does not match weight shape {:?}",
                p.shape()
            );
        }
        Ok(())
    }
}

/// One Adamax update of every array in `params`.
pub fn adamax_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamaxState,
    lr: f64,
) -> Result<()> {
    ensure!(
        grads.len() == params.len(),
        "{} gradients for {} weight arrays",
        grads.len(),
        params.len()
    );
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        ensure!(
            p.shape() == g.shape(),
            "gradient {i} has shape {:?}, weight has {:?}",
            g.shape(),
            p.shape()
        );
    }
    state.check(params)?;
    state.t += 1;
    let step = lr / (1.0 - BETA1.powi(state.t as i32));
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let u = state.u[i].data_mut();
        for (k, theta) in p.data_mut().iter_mut().enumerate() {
            m[k] = BETA1 * m[k] + (1.0 - BETA1) * g[k];
            u[k] = (BETA2 * u[k]).max(g[k].abs());
            *theta -= step * m[k] / (u[k] + ADAMAX_EPS);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    /// Drives the per-epoch sample order and the dropout masks.
    pub shuffle_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            batch_size: 64,
            base_lr: 0.002,
            decay_factor: 0.1,
            decay_every: 5,
            shuffle_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.epochs >= 1, "epochs must be at least 1");
        ensure!(self.batch_size >= 1, "batch size must be at least 1");
        ensure!(self.decay_every >= 1, "decay interval must be at least 1");
        ensure!(
            self.base_lr >= 0.0 && self.base_lr.is_finite(),
            "learning rate must be finite and nonnegative"
        );
        ensure!(
            self.decay_factor > 0.0 && self.decay_factor.is_finite(),
            "decay factor must be finite and positive"
        );
        Ok(())
    }
}

/// `base_lr · decay_factor^⌊epoch / decay_every⌋`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.base_lr * cfg.decay_factor.powi((epoch / cfg.decay_every) as i32)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean per-sample training loss over the epoch.
    pub mean_loss: f64,
    /// Accuracy of the training-mode predictions made during the epoch.
    pub train_accuracy: f64,
    pub eval_accuracy: Option<f64>,
    /// Not serialized, so stored histories of identical runs are identical.
    #[serde(skip)]
    pub wall_secs: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    /// Bitwise equality of everything except wall time.
    pub fn same_trajectory(&self, other: &TrainHistory) -> bool {
        let bits = |x: f64| x.to_bits();
        self.epochs.len() == other.epochs.len()
            && self.epochs.iter().zip(&other.epochs).all(|(a, b)| {
                a.epoch == b.epoch
                    && bits(a.lr) == bits(b.lr)
                    && bits(a.mean_loss) == bits(b.mean_loss)
                    && bits(a.train_accuracy) == bits(b.train_accuracy)
                    && a.eval_accuracy.map(bits) == b.eval_accuracy.map(bits)
            })
    }

    pub fn final_eval_accuracy(&self) -> Option<f64> {
        self.epochs.last().and_then(|e| e.eval_accuracy)
    }
}

/// Position inside a training run, with the running sums of the current epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Progress {
    pub epoch: usize,
    /// Batches completed in the current epoch.
    pub batch: usize,
    pub loss_sum: f64,
    pub correct: usize,
    pub seen: usize,
    pub wall_secs: f64,
}

/// Sample order of one epoch.
pub fn epoch_order(n: usize, shuffle_seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    RngStream::new(shuffle_seed)
        .fork(SHUFFLE_TAG)
        .fork(epoch as u64)
        .shuffle(&mut order);
    order
}

fn dropout_stream(shuffle_seed: u64, epoch: usize, position: usize) -> RngStream {
    RngStream::new(shuffle_seed)
        .fork(DROPOUT_TAG)
        .fork(epoch as u64)
        .fork(position as u64)
}

/// Steps through a training run one mini-batch at a time. Every batch draws
/// its order and dropout masks from `(shuffle_seed, epoch, position)`, so a
/// run resumed from a checkpoint matches an uninterrupted one bitwise.
pub struct Trainer<'a> {
    params: CscaParams,
    optimizer: AdamaxState,
    progress: Progress,
    history: TrainHistory,
    cfg: TrainConfig,
    train: &'a [VqaSample],
    eval: Option<&'a [VqaSample]>,
    order: Option<(usize, Vec<usize>)>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        params: CscaParams,
        cfg: TrainConfig,
        train: &'a [VqaSample],
        eval: Option<&'a [VqaSample]>,
    ) -> Result<Self> {
        let optimizer = AdamaxState::new(&params.tensors);
        Self::assemble(
            params,
            optimizer,
            Progress::default(),
            TrainHistory::default(),
            cfg,
            train,
            eval,
        )
    }

    /// Continues the run stored in `ck`. A checkpoint without optimizer
    /// state starts from fresh moments.
    pub fn resume(
        ck: Checkpoint,
        train: &'a [VqaSample],
        eval: Option<&'a [VqaSample]>,
    ) -> Result<Self> {
        let optimizer = ck
            .optimizer
            .unwrap_or_else(|| AdamaxState::new(&ck.params.tensors));
        Self::assemble(ck.params, optimizer, ck.progress, ck.history, ck.train, train, eval)
    }

    fn assemble(
        params: CscaParams,
        optimizer: AdamaxState,
        progress: Progress,
        history: TrainHistory,
        cfg: TrainConfig,
        train: &'a [VqaSample],
        eval: Option<&'a [VqaSample]>,
    ) -> Result<Self> {
        cfg.validate()?;
        ensure!(!train.is_empty(), "training set is empty");
        if let Some(e) = eval {
            ensure!(!e.is_empty(), "evaluation set is empty");
        }
        optimizer.check(&params.tensors)?;
        ensure!(
            progress.batch * cfg.batch_size < train.len() || progress.batch == 0,
            "checkpoint batch {} is past the end of a {}-sample epoch",
            progress.batch,
            train.len()
        );
        Ok(Self {
            params,
            optimizer,
            progress,
            history,
            cfg,
            train,
            eval,
            order: None,
        })
    }

    pub fn params(&self) -> &CscaParams {
        &self.params
    }

    pub fn history(&self) -> &TrainHistory {
        &self.history
    }

    pub fn progress(&self) -> Progress {
        self.progress
    }

    pub fn optimizer(&self) -> &AdamaxState {
        &self.optimizer
    }

    pub fn is_done(&self) -> bool {
        self.progress.epoch >= self.cfg.epochs
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.train.len().div_ceil(self.cfg.batch_size)
    }

    /// Runs one mini-batch; returns `false` once every epoch is complete.
    pub fn step(&mut self) -> Result<bool> {
        if self.is_done() {
            return Ok(false);
        }
        let started = Instant::now();
        let epoch = self.progress.epoch;
        if self.order.as_ref().is_none_or(|(e, _)| *e != epoch) {
            self.order = Some((epoch, epoch_order(self.train.len(), self.cfg.shuffle_seed, epoch)));
        }
        let order = &self.order.as_ref().expect("order set above").1;
        let lo = self.progress.batch * self.cfg.batch_size;
        let hi = (lo + self.cfg.batch_size).min(self.train.len());

        let mut acc: Vec<Tensor> = self
            .params
            .tensors
            .iter()
            .map(|p| Tensor::zeros(p.shape()))
            .collect();
        for (pos, &idx) in order.iter().enumerate().take(hi).skip(lo) {
            let sample = &self.train[idx];
            let mut rng = dropout_stream(self.cfg.shuffle_seed, epoch, pos);
            let (loss, predicted, grads) =
                model::loss_and_grads(sample, &self.params, Mode::Train, &mut rng)?;
            for (a, g) in acc.iter_mut().zip(grads) {
                if let Some(g) = g {
                    for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                        *x += y;
                    }
                }
            }
            self.progress.loss_sum += loss;
            self.progress.correct += usize::from(predicted == sample.answer());
            self.progress.seen += 1;
        }
        let inv = 1.0 / (hi - lo) as f64;
        for a in &mut acc {
            for x in a.data_mut() {
                *x *= inv;
            }
        }
        adamax_step(
            &mut self.params.tensors,
            &acc,
            &mut self.optimizer,
            lr_at(epoch, &self.cfg),
        )?;
        self.progress.batch += 1;
        self.progress.wall_secs += started.elapsed().as_secs_f64();
        if hi == self.train.len() {
            self.finish_epoch()?;
        }
        Ok(true)
    }

    fn finish_epoch(&mut self) -> Result<()> {
        let started = Instant::now();
        let p = self.progress;
        let eval_accuracy = match self.eval {
            Some(samples) => Some(model::accuracy(&self.params, samples)?),
            None => None,
        };
        self.history.epochs.push(EpochRecord {
            epoch: p.epoch,
            lr: lr_at(p.epoch, &self.cfg),
            mean_loss: p.loss_sum / p.seen as f64,
            train_accuracy: p.correct as f64 / p.seen as f64,
            eval_accuracy,
            wall_secs: p.wall_secs + started.elapsed().as_secs_f64(),
        });
        self.progress = Progress {
            epoch: p.epoch + 1,
            ..Progress::default()
        };
        Ok(())
    }

    /// Runs up to `n` mini-batches; returns how many ran.
    pub fn run_steps(&mut self, n: usize) -> Result<usize> {
        let mut done = 0;
        while done < n && self.step()? {
            done += 1;
        }
        Ok(done)
    }

    pub fn run(&mut self) -> Result<()> {
        while self.step()? {}
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            params: self.params.clone(),
            train: self.cfg.clone(),
            progress: self.progress,
            optimizer: Some(self.optimizer.clone()),
            history: self.history.clone(),
        }
    }

    pub fn into_parts(self) -> (CscaParams, TrainHistory) {
        (self.params, self.history)
    }
}

/// Trains to completion from `params`.
pub fn train(
    params: CscaParams,
    train: &[VqaSample],
    eval: Option<&[VqaSample]>,
    cfg: &TrainConfig,
) -> Result<(CscaParams, TrainHistory)> {
    let mut t = Trainer::new(params, cfg.clone(), train, eval)?;
    t.run()?;
    Ok(t.into_parts())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step_hand_trace() {
        let mut p = vec![Tensor::scalar(0.0)];
        let mut s = AdamaxState::new(&p);
        adamax_step(&mut p, &[Tensor::scalar(1.0)], &mut s, 0.002).unwrap();
        assert_eq!(s.t, 1);
        assert!((s.m[0].data()[0] - 0.1).abs() < 1e-15);
        assert_eq!(s.u[0].data()[0], 1.0);
        // step = 0.002 / (1 - 0.9) = 0.02; θ = -0.02 · 0.1 / (1 + 1e-8)
        let expected = -0.002 / (1.0 + 1e-8);
        assert!((p[0].data()[0] - expected).abs() < 1e-12);
        assert!((p[0].data()[0] + 0.002).abs() < 1e-10);
    }

    #[test]
    fn zero_gradient_on_fresh_state_is_identity() {
        let mut p = vec![Tensor::vector(vec![0.3, -1.2])];
        let before = p.clone();
        let mut s = AdamaxState::new(&p);
        adamax_step(&mut p, &[Tensor::zeros([2])], &mut s, 0.002).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let mut p = vec![Tensor::vector(vec![0.3, -1.2]), Tensor::zeros([2, 2])];
        let before = p.clone();
        let mut s = AdamaxState::new(&p);
        let g = vec![Tensor::vector(vec![1.0, 2.0]), Tensor::full([2, 2], -3.0)];
        for _ in 0..3 {
            adamax_step(&mut p, &g, &mut s, 0.0).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(s.t, 3);
    }

    #[test]
    fn accumulator_tracks_infinity_norm() {
        let mut p = vec![Tensor::scalar(0.0)];
        let mut s = AdamaxState::new(&p);
        for g in [2.0, -0.5, 0.1] {
            adamax_step(&mut p, &[Tensor::scalar(g)], &mut s, 0.001).unwrap();
        }
        let u = s.u[0].data()[0];
        assert!((u - 2.0 * BETA2 * BETA2).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = vec![Tensor::zeros([2])];
        let mut s = AdamaxState::new(&p);
        assert!(adamax_step(&mut p, &[Tensor::zeros([3])], &mut s, 0.1).is_err());
        assert!(adamax_step(&mut p, &[], &mut s, 0.1).is_err());
    }

    #[test]
    fn step_decay_schedule() {
        let c = TrainConfig::default();
        let cases = [(0, 0.002), (4, 0.002), (5, 0.0002), (9, 0.0002), (10, 0.00002)];
        for (epoch, want) in cases {
            assert!((lr_at(epoch, &c) - want).abs() < 1e-15, "epoch {epoch}");
        }
    }

    #[test]
    fn epoch_orders_are_permutations_and_differ() {
        let a = epoch_order(50, 3, 0);
        let b = epoch_order(50, 3, 1);
        let mut s = a.clone();
        s.sort_unstable();
        assert_eq!(s, (0..50).collect::<Vec<_>>());
        assert_ne!(a, b);
        assert_eq!(a, epoch_order(50, 3, 0));
    }
}
