//! A synthetic visual-question task that can only be solved by matching a
//! question token against region features.
//!
//! Each region carries a one-hot shape code and a one-hot color code. Two
//! question templates are drawn with equal probability:
//!
//! * `[WHAT][COLOR][SHAPE_k][PAD…]`, answered by the color of the unique
//!   region with shape `k` (category `"color"`);
//! * `[HOW][MANY][COLOR_c][PAD…]`, answered by the number of regions with
//!   color `c` (category `"counting"`).
//!
//! Word embedding layout (rows of the `d_w × n_w` matrix): 0 `WHAT`,
//! 1 `COLOR`, 2 `HOW`, 3 `MANY`, then `S` shape tokens and `C` color tokens.
//! `PAD` is the zero vector. Answer classes are the `C` colors followed by
//! the counts `0..=n_v`.

use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetDims};
use crate::error::{ensure, Result};
use crate::model::VqaSample;
use crate::rng::RngStream;
use crate::tensor::Tensor;

pub const TOKEN_WHAT: usize = 0;
pub const TOKEN_COLOR: usize = 1;
pub const TOKEN_HOW: usize = 2;
pub const TOKEN_MANY: usize = 3;
const TEMPLATE_TOKENS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub n_v: usize,
    pub n_w: usize,
    pub d_v: usize,
    pub d_w: usize,
    pub shapes: usize,
    pub colors: usize,
    pub noise_sigma: f64,
    pub num_samples: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_v: 6,
            n_w: 6,
            d_v: 16,
            d_w: 20,
            shapes: 8,
            colors: 5,
            noise_sigma: 0.05,
            num_samples: 10_000,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.n_v >= 1, "n_v must be at least 1");
        ensure!(self.n_w >= 3, "questions need at least 3 tokens, n_w = {}", self.n_w);
        ensure!(self.shapes >= 1 && self.colors >= 1, "shape and color vocabularies must be nonempty");
        ensure!(
            self.n_v == 1 || self.shapes >= 2,
            "a queried shape cannot be unique among {} regions with one shape",
            self.n_v
        );
        ensure!(
            self.d_v >= self.shapes + self.colors,
            "d_v = {} cannot hold {} shape and {} color codes",
            self.d_v,
            self.shapes,
            self.colors
        );
        ensure!(
            self.d_w >= self.shapes + self.colors + TEMPLATE_TOKENS,
            "d_w = {} cannot hold {} template, {} shape and {} color tokens",
            self.d_w,
            TEMPLATE_TOKENS,
            self.shapes,
            self.colors
        );
        ensure!(
            self.noise_sigma >= 0.0 && self.noise_sigma.is_finite(),
            "noise sigma must be finite and nonnegative"
        );
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.colors + self.n_v + 1
    }

    pub fn shape_token(&self, k: usize) -> usize {
        TEMPLATE_TOKENS + k
    }

    pub fn color_token(&self, c: usize) -> usize {
        TEMPLATE_TOKENS + self.shapes + c
    }

    pub fn color_class(&self, c: usize) -> usize {
        c
    }

    pub fn count_class(&self, n: usize) -> usize {
        self.colors + n
    }

    pub fn dims(&self) -> DatasetDims {
        DatasetDims {
            d_v: self.d_v,
            n_v: self.n_v,
            d_w: self.d_w,
            n_w: self.n_w,
            n_c: self.num_classes(),
        }
    }

    pub fn answer_labels(&self) -> Vec<String> {
        (0..self.colors)
            .map(|c| format!("color{c}"))
            .chain((0..=self.n_v).map(|n| format!("count{n}")))
            .collect()
    }
}

pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = RngStream::new(cfg.seed);
    let samples = (0..cfg.num_samples)
        .map(|_| generate_one(cfg, &mut rng))
        .collect();
    Ok(Dataset {
        dims: cfg.dims(),
        answer_labels: cfg.answer_labels(),
        samples,
    })
}

fn generate_one(cfg: &SyntheticConfig, rng: &mut RngStream) -> VqaSample {
    let (s_count, n_v) = (cfg.shapes, cfg.n_v);
    let mut pool: Vec<usize> = (0..s_count).collect();
    rng.shuffle(&mut pool);
    let queried = rng.below(n_v);
    let shapes: Vec<usize> = if s_count >= n_v {
        pool[..n_v].to_vec()
    } else {
        // Too few shapes for all-distinct regions: only the queried one is
        // kept unique, the rest repeat from the remaining pool.
        (0..n_v)
            .map(|j| {
                if j == queried {
                    pool[0]
                } else {
                    pool[1 + rng.below(s_count - 1)]
                }
            })
            .collect()
    };
    let colors: Vec<usize> = (0..n_v).map(|_| rng.below(cfg.colors)).collect();

    let mut regions = Tensor::zeros([cfg.d_v, n_v]);
    for j in 0..n_v {
        regions.set(shapes[j], j, 1.0);
        regions.set(s_count + colors[j], j, 1.0);
    }
    if cfg.noise_sigma > 0.0 {
        for v in regions.data_mut() {
            *v += cfg.noise_sigma * rng.normal();
        }
    }

    let mut words = Tensor::zeros([cfg.d_w, cfg.n_w]);
    let (answer, category) = if rng.below(2) == 0 {
        words.set(TOKEN_WHAT, 0, 1.0);
        words.set(TOKEN_COLOR, 1, 1.0);
        words.set(cfg.shape_token(shapes[queried]), 2, 1.0);
        (cfg.color_class(colors[queried]), "color")
    } else {
        let c = rng.below(cfg.colors);
        words.set(TOKEN_HOW, 0, 1.0);
        words.set(TOKEN_MANY, 1, 1.0);
        words.set(cfg.color_token(c), 2, 1.0);
        let count = colors.iter().filter(|&&x| x == c).count();
        (cfg.count_class(count), "counting")
    };
    let mut target = vec![0.0; cfg.num_classes()];
    target[answer] = 1.0;

    VqaSample {
        regions,
        words,
        target: Tensor::vector(target),
        category: category.to_string(),
    }
}
