//! Datasets, checkpoints and their file formats.
//!
//! Both binary formats are little-endian and built from the primitives in
//! `bytes`: integers, `f64`, length-prefixed strings, and tensors stored as
//! `u32 rank`, `u32` extents, then row-major `f64` entries.
//!
//! Dataset file (`CSCA-DS1`):
//!
//! ```text
//! magic   "CSCA-DS1"
//! dims    u32 d_v, n_v, d_w, n_w, n_c
//! labels  n_c strings
//! count   u64
//! sample  tensor regions [d_v, n_v], tensor words [d_w, n_w],
//!         tensor target [n_c], string category        (repeated)
//! ```
//!
//! Checkpoint file (`CSCA-CK1`):
//!
//! ```text
//! magic     "CSCA-CK1"
//! config    u32 d, d_v, d_w, n_v, n_w, n_h, d_kq, d_vs, d_ff, d_hp, n_c, blocks;
//!           f64 dropout; u8 variant (0 none, 1 sa-only, 2 ca-only, 3 sca)
//! weights   u32 count, then tensors in canonical order (see CscaParams::names)
//! train     u32 epochs, u32 batch_size, f64 base_lr, f64 decay_factor,
//!           u32 decay_every, u64 shuffle_seed
//! progress  u32 epoch, u32 batch, f64 loss_sum, u64 correct, u64 seen
//! optimizer u8 present; if 1: u64 t, u32 count + m tensors, u32 count + u tensors
//! history   u32 count; per epoch: u32 epoch, f64 lr, f64 mean_loss,
//!           f64 train_accuracy, u8 has_eval, f64 eval_accuracy
//! ```
//!
//! Wall-clock times are not stored, so identical runs write identical files.
//!
//! The text interchange forms live in [`text`].

mod bytes;
pub mod synthetic;
pub mod text;

use std::fs;
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};

use bytes::{ByteReader, ByteWriter};
use crate::error::{ensure, Error, Result};
use crate::model::{CscaConfig, CscaParams, Variant, VqaSample};
use crate::optim::{AdamaxState, EpochRecord, Progress, TrainConfig, TrainHistory};
use crate::tensor::Tensor;

pub use synthetic::{generate_synthetic, SyntheticConfig};

pub const DATASET_MAGIC: &str = "CSCA-DS1";
pub const CHECKPOINT_MAGIC: &str = "CSCA-CK1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetDims {
    pub d_v: usize,
    pub n_v: usize,
    pub d_w: usize,
    pub n_w: usize,
    pub n_c: usize,
}

impl DatasetDims {
    /// Fails with a config mismatch when `config` cannot consume these samples.
    pub fn check_config(&self, config: &CscaConfig) -> Result<()> {
        let pairs = [
            ("d_v", self.d_v, config.d_v),
            ("n_v", self.n_v, config.n_v),
            ("d_w", self.d_w, config.d_w),
            ("n_w", self.n_w, config.n_w),
            ("n_c", self.n_c, config.n_c),
        ];
        let bad: Vec<String> = pairs
            .iter()
            .filter(|(_, a, b)| a != b)
            .map(|(n, a, b)| format!("{n}: dataset {a}, model {b}"))
            .collect();
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::ConfigMismatch(bad.join(", ")))
        }
    }

    /// Copies the dataset extents into `config`.
    pub fn apply(&self, config: &mut CscaConfig) {
        config.d_v = self.d_v;
        config.n_v = self.n_v;
        config.d_w = self.d_w;
        config.n_w = self.n_w;
        config.n_c = self.n_c;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub dims: DatasetDims,
    /// Display name of every answer class.
    pub answer_labels: Vec<String>,
    pub samples: Vec<VqaSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Checks every sample against the header.
    pub fn validate(&self) -> Result<()> {
        let d = &self.dims;
        ensure!(
            self.answer_labels.len() == d.n_c,
            "{} answer labels for {} classes",
            self.answer_labels.len(),
            d.n_c
        );
        for (i, s) in self.samples.iter().enumerate() {
            ensure!(
                s.regions.shape() == [d.d_v, d.n_v]
                    && s.words.shape() == [d.d_w, d.n_w]
                    && s.target.shape() == [d.n_c],
                "sample {i} has shapes {:?}, {:?}, {:?}; header says [{}, {}], [{}, {}], [{}]",
                s.regions.shape(),
                s.words.shape(),
                s.target.shape(),
                d.d_v,
                d.n_v,
                d.d_w,
                d.n_w,
                d.n_c
            );
        }
        Ok(())
    }

    /// First `at` samples and the rest.
    pub fn split(mut self, at: usize) -> Result<(Dataset, Dataset)> {
        ensure!(at <= self.len(), "split point {at} past {} samples", self.len());
        let tail = self.samples.split_off(at);
        let other = Dataset {
            dims: self.dims,
            answer_labels: self.answer_labels.clone(),
            samples: tail,
        };
        Ok((self, other))
    }

    /// Category names in first-seen order.
    pub fn categories(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for s in &self.samples {
            if !out.contains(&s.category) {
                out.push(s.category.clone());
            }
        }
        out
    }
}

pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>> {
    ds.validate()?;
    let mut w = ByteWriter::new(Vec::new());
    w.bytes(DATASET_MAGIC.as_bytes())?;
    let d = &ds.dims;
    for v in [d.d_v, d.n_v, d.d_w, d.n_w, d.n_c] {
        w.u32(v)?;
    }
    for l in &ds.answer_labels {
        w.str(l)?;
    }
    w.u64(ds.samples.len() as u64)?;
    for s in &ds.samples {
        w.tensor(&s.regions)?;
        w.tensor(&s.words)?;
        w.tensor(&s.target)?;
        w.str(&s.category)?;
    }
    w.finish()
}

pub fn decode_dataset(buf: &[u8]) -> Result<Dataset> {
    let mut r = ByteReader::new(buf);
    r.magic(DATASET_MAGIC)?;
    let dims = DatasetDims {
        d_v: r.u32("d_v")?,
        n_v: r.u32("n_v")?,
        d_w: r.u32("d_w")?,
        n_w: r.u32("n_w")?,
        n_c: r.u32("n_c")?,
    };
    let answer_labels = (0..dims.n_c)
        .map(|_| r.str("answer label"))
        .collect::<Result<Vec<_>>>()?;
    let count = r.u64("sample count")?;
    let mut samples = Vec::new();
    for i in 0..count {
        let what = format!("sample {i}");
        samples.push(VqaSample {
            regions: r.tensor(&what)?,
            words: r.tensor(&what)?,
            target: r.tensor(&what)?,
            category: r.str(&what)?,
        });
    }
    r.expect_end()?;
    let ds = Dataset {
        dims,
        answer_labels,
        samples,
    };
    ds.validate().map_err(|e| Error::Format(e.to_string()))?;
    Ok(ds)
}

pub fn write_dataset(path: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    let bytes = encode_dataset(ds)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    decode_dataset(&fs::read(path)?)
}

/// Model weights plus everything needed to continue training.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: CscaParams,
    pub train: TrainConfig,
    pub progress: Progress,
    pub optimizer: Option<AdamaxState>,
    pub history: TrainHistory,
}

impl Checkpoint {
    /// A checkpoint of untrained or imported weights.
    pub fn fresh(params: CscaParams, train: TrainConfig) -> Self {
        Self {
            params,
            train,
            progress: Progress::default(),
            optimizer: None,
            history: TrainHistory::default(),
        }
    }

    pub fn config(&self) -> &CscaConfig {
        &self.params.config
    }
}

/// Field-by-field comparison; names every differing field.
pub fn check_config_matches(found: &CscaConfig, expected: &CscaConfig) -> Result<()> {
    let a = serde_json::to_value(found).map_err(|e| Error::Format(e.to_string()))?;
    let b = serde_json::to_value(expected).map_err(|e| Error::Format(e.to_string()))?;
    let (Some(a), Some(b)) = (a.as_object(), b.as_object()) else {
        return Err(Error::Format("config did not serialize to an object".into()));
    };
    let bad: Vec<String> = a
        .iter()
        .filter(|(k, v)| b.get(*k) != Some(v))
        .map(|(k, v)| format!("{k}: file {v}, expected {}", b[k]))
        .collect();
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Error::ConfigMismatch(bad.join(", ")))
    }
}

fn put_tensors<W: std::io::Write>(w: &mut ByteWriter<W>, ts: &[Tensor]) -> Result<()> {
    w.u32(ts.len())?;
    ts.iter().try_for_each(|t| w.tensor(t))
}

fn get_tensors(r: &mut ByteReader<'_>, what: &str) -> Result<Vec<Tensor>> {
    let n = r.u32(what)?;
    (0..n).map(|_| r.tensor(what)).collect()
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut w = ByteWriter::new(Vec::new());
    w.bytes(CHECKPOINT_MAGIC.as_bytes())?;
    let c = ck.config();
    for v in [
        c.d, c.d_v, c.d_w, c.n_v, c.n_w, c.n_h, c.d_kq, c.d_vs, c.d_ff, c.d_hp, c.n_c, c.blocks,
    ] {
        w.u32(v)?;
    }
    w.f64(c.dropout)?;
    w.u8(c.variant.code())?;
    put_tensors(&mut w, &ck.params.tensors)?;

    let t = &ck.train;
    w.u32(t.epochs)?;
    w.u32(t.batch_size)?;
    w.f64(t.base_lr)?;
    w.f64(t.decay_factor)?;
    w.u32(t.decay_every)?;
    w.u64(t.shuffle_seed)?;

    let p = &ck.progress;
    w.u32(p.epoch)?;
    w.u32(p.batch)?;
    w.f64(p.loss_sum)?;
    w.u64(p.correct as u64)?;
    w.u64(p.seen as u64)?;

    match &ck.optimizer {
        None => w.u8(0)?,
        Some(o) => {
            w.u8(1)?;
            w.u64(o.t)?;
            put_tensors(&mut w, &o.m)?;
            put_tensors(&mut w, &o.u)?;
        }
    }

    w.u32(ck.history.epochs.len())?;
    for e in &ck.history.epochs {
        w.u32(e.epoch)?;
        w.f64(e.lr)?;
        w.f64(e.mean_loss)?;
        w.f64(e.train_accuracy)?;
        w.u8(u8::from(e.eval_accuracy.is_some()))?;
        w.f64(e.eval_accuracy.unwrap_or(0.0))?;
    }
    w.finish()
}

/// Decodes a checkpoint; with `expected`, the stored config must equal it.
pub fn decode_checkpoint(buf: &[u8], expected: Option<&CscaConfig>) -> Result<Checkpoint> {
    let mut r = ByteReader::new(buf);
    r.magic(CHECKPOINT_MAGIC)?;
    let mut ext = [0usize; 12];
    for (i, e) in ext.iter_mut().enumerate() {
        *e = r.u32(&format!("config field {i}"))?;
    }
    let dropout = r.f64("dropout")?;
    let code = r.u8("variant")?;
    let variant = Variant::from_code(code)
        .ok_or_else(|| Error::Format(format!("unknown variant code {code}")))?;
    let [d, d_v, d_w, n_v, n_w, n_h, d_kq, d_vs, d_ff, d_hp, n_c, blocks] = ext;
    let config = CscaConfig {
        d,
        d_v,
        d_w,
        n_v,
        n_w,
        n_h,
        d_kq,
        d_vs,
        d_ff,
        d_hp,
        n_c,
        blocks,
        dropout,
        variant,
    };
    if let Some(want) = expected {
        check_config_matches(&config, want)?;
    }
    let tensors = get_tensors(&mut r, "weights")?;

    let train = TrainConfig {
        epochs: r.u32("epochs")?,
        batch_size: r.u32("batch size")?,
        base_lr: r.f64("base lr")?,
        decay_factor: r.f64("decay factor")?,
        decay_every: r.u32("decay interval")?,
        shuffle_seed: r.u64("shuffle seed")?,
    };
    let progress = Progress {
        epoch: r.u32("epoch")?,
        batch: r.u32("batch")?,
        loss_sum: r.f64("loss sum")?,
        correct: r.u64("correct count")? as usize,
        seen: r.u64("seen count")? as usize,
        wall_secs: 0.0,
    };
    let optimizer = match r.u8("optimizer flag")? {
        0 => None,
        1 => Some(AdamaxState {
            t: r.u64("optimizer step")?,
            m: get_tensors(&mut r, "first moments")?,
            u: get_tensors(&mut r, "norm accumulators")?,
        }),
        f => return Err(Error::Format(format!("optimizer flag {f}"))),
    };
    let n = r.u32("history length")?;
    let mut epochs = Vec::with_capacity(n);
    for _ in 0..n {
        let epoch = r.u32("history")?;
        let lr = r.f64("history")?;
        let mean_loss = r.f64("history")?;
        let train_accuracy = r.f64("history")?;
        let has_eval = r.u8("history")? == 1;
        let eval = r.f64("history")?;
        epochs.push(EpochRecord {
            epoch,
            lr,
            mean_loss,
            train_accuracy,
            eval_accuracy: has_eval.then_some(eval),
            wall_secs: 0.0,
        });
    }
    r.expect_end()?;

    let params = CscaParams::from_tensors(&config, tensors).map_err(|e| Error::Format(e.to_string()))?;
    if let Some(o) = &optimizer {
        let ok = o.m.len() == params.tensors.len()
            && o.u.len() == params.tensors.len()
            && params
                .tensors
                .iter()
                .zip(o.m.iter().zip(&o.u))
                .all(|(p, (m, u))| p.shape() == m.shape() && p.shape() == u.shape());
        if !ok {
            return Err(Error::Format("optimizer state does not match the weights".into()));
        }
    }
    Ok(Checkpoint {
        params,
        train,
        progress,
        optimizer,
        history: TrainHistory { epochs },
    })
}

pub fn save_checkpoint(path: impl AsRef<Path>, ck: &Checkpoint) -> Result<()> {
    let bytes = encode_checkpoint(ck)?;
    let f = fs::File::create(path)?;
    ByteWriter::new(BufWriter::new(f)).bytes(&bytes)
}

pub fn load_checkpoint(path: impl AsRef<Path>, expected: Option<&CscaConfig>) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?, expected)
}
