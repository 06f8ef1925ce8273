//! The run configuration file (TOML, schema `csca-config-v1`).
//!
//! Every section and key is optional. Model keys default to the published
//! settings; `d_v`, `n_v`, `d_w`, `n_w` and `n_c` default to the dataset's
//! extents. Relative paths are resolved against the directory holding the
//! config file.
//!
//! ```toml
//! schema = "csca-config-v1"
//!
//! [seeds]
//! data = 0          # synthetic generation
//! init = 0          # weight initialization
//! shuffle = 0       # batch order and dropout masks
//!
//! [model]
//! d = 512
//! n_h = 8
//! d_kq = 64
//! d_vs = 64
//! d_ff = 2048
//! d_hp = 1024
//! blocks = 4
//! dropout = 0.1
//! variant = "sca"   # none | sa-only | ca-only | sca
//!
//! [synthetic]
//! n_v = 6
//! n_w = 6
//! d_v = 16
//! d_w = 20
//! shapes = 8
//! colors = 5
//! noise_sigma = 0.05
//! train_samples = 8000
//! eval_samples = 2000
//!
//! [train]
//! epochs = 15
//! batch_size = 64
//! base_lr = 0.002
//! decay_factor = 0.1
//! decay_every = 5
//!
//! [sweep]
//! blocks = [1, 2, 4]
//!
//! [attention]
//! top_k = 2
//! samples = 16
//!
//! [gradcheck]
//! seeds = 20
//! step = 1e-5
//! tolerance = 1e-4
//!
//! [paths]
//! train_data = "train.ds"
//! eval_data = "eval.ds"
//! checkpoint = "model.ck"
//! history = "history.jsonl"
//! predictions = "predictions.jsonl"
//! report = "report.json"
//! ablation = "ablation.jsonl"
//! overlap = "overlap.json"
//! sweep = "sweep.jsonl"
//! attention = "attention.jsonl"
//! gradcheck = "gradcheck.json"
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use csca::data::{DatasetDims, SyntheticConfig};
use csca::optim::TrainConfig;
use csca::{CscaConfig, Variant};
use serde::Deserialize;

use crate::error::CliError;

pub const SCHEMA: &str = "csca-config-v1";

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema: Option<String>,
    pub seeds: Seeds,
    pub model: ModelSection,
    pub synthetic: SyntheticSection,
    pub train: TrainSection,
    pub sweep: SweepSection,
    pub attention: AttentionSection,
    pub gradcheck: GradcheckSection,
    pub paths: Paths,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    pub data: u64,
    pub init: u64,
    pub shuffle: u64,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub d: Option<usize>,
    pub d_v: Option<usize>,
    pub d_w: Option<usize>,
    pub n_v: Option<usize>,
    pub n_w: Option<usize>,
    pub n_h: Option<usize>,
    pub d_kq: Option<usize>,
    pub d_vs: Option<usize>,
    pub d_ff: Option<usize>,
    pub d_hp: Option<usize>,
    pub n_c: Option<usize>,
    pub blocks: Option<usize>,
    pub dropout: Option<f64>,
    pub variant: Option<Variant>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSection {
    pub n_v: usize,
    pub n_w: usize,
    pub d_v: usize,
    pub d_w: usize,
    pub shapes: usize,
    pub colors: usize,
    pub noise_sigma: f64,
    pub train_samples: usize,
    pub eval_samples: usize,
}

impl Default for SyntheticSection {
    fn default() -> Self {
        let s = SyntheticConfig::default();
        Self {
            n_v: s.n_v,
            n_w: s.n_w,
            d_v: s.d_v,
            d_w: s.d_w,
            shapes: s.shapes,
            colors: s.colors,
            noise_sigma: s.noise_sigma,
            train_samples: 8000,
            eval_samples: 2000,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            base_lr: t.base_lr,
            decay_factor: t.decay_factor,
            decay_every: t.decay_every,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub blocks: Vec<usize>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            blocks: vec![1, 2, 4],
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttentionSection {
    pub top_k: usize,
    pub samples: usize,
}

impl Default for AttentionSection {
    fn default() -> Self {
        Self { top_k: 2, samples: 16 }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckSection {
    pub seeds: u64,
    pub step: f64,
    pub tolerance: f64,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        Self {
            seeds: 20,
            step: 1e-5,
            tolerance: 1e-4,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub train_data: PathBuf,
    pub eval_data: PathBuf,
    pub checkpoint: PathBuf,
    pub history: PathBuf,
    pub predictions: PathBuf,
    pub report: PathBuf,
    pub ablation: PathBuf,
    pub overlap: PathBuf,
    pub sweep: PathBuf,
    pub attention: PathBuf,
    pub gradcheck: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            train_data: "train.ds".into(),
            eval_data: "eval.ds".into(),
            checkpoint: "model.ck".into(),
            history: "history.jsonl".into(),
            predictions: "predictions.jsonl".into(),
            report: "report.json".into(),
            ablation: "ablation.jsonl".into(),
            overlap: "overlap.json".into(),
            sweep: "sweep.jsonl".into(),
            attention: "attention.jsonl".into(),
            gradcheck: "gradcheck.json".into(),
        }
    }
}

impl RunConfig {
    /// Reads `path`, or the defaults rooted at the working directory.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self {
                base_dir: PathBuf::from("."),
                ..Self::default()
            });
        };
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        if let Some(s) = &cfg.schema {
            if s != SCHEMA {
                return Err(CliError::Config(format!(
                    "unsupported schema {s:?}, expected {SCHEMA:?}"
                )));
            }
        }
        cfg.base_dir = path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."))
            .to_path_buf();
        Ok(cfg)
    }

    pub fn path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Like `path`, for a file about to be written: missing parent
    /// directories are created.
    pub fn output(&self, p: &Path) -> Result<PathBuf, CliError> {
        let full = self.path(p);
        if let Some(dir) = full.parent() {
            fs::create_dir_all(dir)?;
        }
        Ok(full)
    }

    pub fn synthetic(&self) -> SyntheticConfig {
        let s = &self.synthetic;
        SyntheticConfig {
            n_v: s.n_v,
            n_w: s.n_w,
            d_v: s.d_v,
            d_w: s.d_w,
            shapes: s.shapes,
            colors: s.colors,
            noise_sigma: s.noise_sigma,
            num_samples: s.train_samples + s.eval_samples,
            seed: self.seeds.data,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            base_lr: t.base_lr,
            decay_factor: t.decay_factor,
            decay_every: t.decay_every,
            shuffle_seed: self.seeds.shuffle,
        }
    }

    /// The model configuration for data with extents `dims`. Extents given
    /// explicitly must agree with the data.
    pub fn model_config(&self, dims: &DatasetDims) -> Result<CscaConfig, CliError> {
        let m = &self.model;
        let def = CscaConfig::default();
        let data_field = |name: &str, given: Option<usize>, actual: usize| match given {
            Some(v) if v != actual => Err(CliError::Config(format!(
                "model.{name} = {v} but the dataset has {actual}"
            ))),
            _ => Ok(actual),
        };
        let config = CscaConfig {
            d: m.d.unwrap_or(def.d),
            d_v: data_field("d_v", m.d_v, dims.d_v)?,
            d_w: data_field("d_w", m.d_w, dims.d_w)?,
            n_v: data_field("n_v", m.n_v, dims.n_v)?,
            n_w: data_field("n_w", m.n_w, dims.n_w)?,
            n_h: m.n_h.unwrap_or(def.n_h),
            d_kq: m.d_kq.unwrap_or(def.d_kq),
            d_vs: m.d_vs.unwrap_or(def.d_vs),
            d_ff: m.d_ff.unwrap_or(def.d_ff),
            d_hp: m.d_hp.unwrap_or(def.d_hp),
            n_c: data_field("n_c", m.n_c, dims.n_c)?,
            blocks: m.blocks.unwrap_or(def.blocks),
            dropout: m.dropout.unwrap_or(def.dropout),
            variant: m.variant.unwrap_or(def.variant),
        };
        config
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        Ok(config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig, CliError> {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, text).unwrap();
        RunConfig::load(Some(&path))
    }

    fn dims() -> DatasetDims {
        DatasetDims {
            d_v: 16,
            n_v: 6,
            d_w: 20,
            n_w: 6,
            n_c: 12,
        }
    }

    #[test]
    fn empty_file_gives_published_defaults() {
        let c = parse("").unwrap();
        let m = c.model_config(&dims()).unwrap();
        assert_eq!((m.d, m.n_h, m.d_ff, m.blocks), (512, 8, 2048, 4));
        assert_eq!((m.d_v, m.n_c), (16, 12));
        let t = c.train_config();
        assert_eq!((t.epochs, t.batch_size, t.base_lr), (15, 64, 0.002));
    }

    #[test]
    fn unknown_keys_and_schemas_rejected() {
        assert!(matches!(parse("[model]\nwidth = 3\n"), Err(CliError::Config(_))));
        assert!(matches!(parse("colour = 1\n"), Err(CliError::Config(_))));
        assert!(matches!(parse("schema = \"csca-config-v0\"\n"), Err(CliError::Config(_))));
        parse("schema = \"csca-config-v1\"\n").unwrap();
    }

    #[test]
    fn explicit_extents_must_match_data() {
        let c = parse("[model]\nn_c = 11\n").unwrap();
        assert!(matches!(c.model_config(&dims()), Err(CliError::Config(_))));
        let c = parse("[model]\nn_c = 12\nvariant = \"ca-only\"\n").unwrap();
        assert_eq!(c.model_config(&dims()).unwrap().variant, Variant::CaOnly);
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "[paths]\ncheckpoint = \"out/m.ck\"\n").unwrap();
        let c = RunConfig::load(Some(&path)).unwrap();
        assert_eq!(c.path(&c.paths.checkpoint), dir.path().join("out/m.ck"));
    }

    #[test]
    fn shipped_synthetic_config_loads() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/synthetic.toml");
        let c = RunConfig::load(Some(&path)).unwrap();
        let m = c.model_config(&dims()).unwrap();
        assert_eq!((m.d, m.n_h, m.d_kq, m.d_hp, m.blocks), (64, 4, 16, 128, 2));
        assert_eq!(c.synthetic().num_samples, 10_000);
        assert_eq!(c.train_config().shuffle_seed, 3);
        assert_eq!(c.sweep.blocks, vec![1, 2, 4]);
    }

    #[test]
    fn output_creates_parent_directories() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "").unwrap();
        let c = RunConfig::load(Some(&path)).unwrap();
        let out = c.output(Path::new("a/b/report.json")).unwrap();
        assert!(out.parent().unwrap().is_dir());
    }
}
