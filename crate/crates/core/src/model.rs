//! The full CSCA model: feature projection, a cascade of SCA blocks, mean
//! pooling with element-wise fusion, and a one-hidden-layer classifier.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::{self, AttentionDims, AttentionLayerParams, Attended};
use crate::error::{contract, ensure, Error, Result};
use crate::params::{scalar_count, ParamBuilder, ParamId};
use crate::rng::RngStream;
use crate::tensor::{Graph, Tensor, Var};

/// Guard added inside the logarithm of the cross-entropy.
pub const LOG_EPS: f64 = 1e-12;

/// Which attention layers each block keeps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// No attention; blocks are the identity.
    None,
    SaOnly,
    CaOnly,
    Sca,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::None, Variant::SaOnly, Variant::CaOnly, Variant::Sca];

    pub fn has_self_attention(self) -> bool {
        matches!(self, Variant::SaOnly | Variant::Sca)
    }

    pub fn has_co_attention(self) -> bool {
        matches!(self, Variant::CaOnly | Variant::Sca)
    }

    pub fn layers_per_block(self) -> usize {
        2 * usize::from(self.has_self_attention()) + 2 * usize::from(self.has_co_attention())
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::None => "none",
            Variant::SaOnly => "sa-only",
            Variant::CaOnly => "ca-only",
            Variant::Sca => "sca",
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Variant::None => 0,
            Variant::SaOnly => 1,
            Variant::CaOnly => 2,
            Variant::Sca => 3,
        }
    }

    pub(crate) fn from_code(c: u8) -> Option<Self> {
        Self::ALL.get(c as usize).copied()
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| contract!("unknown variant {s:?}"))
    }
}

/// Architectural hyperparameters. Defaults are the published settings; the
/// answer vocabulary size `n_c` normally comes from the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CscaConfig {
    pub d: usize,
    pub d_v: usize,
    pub d_w: usize,
    pub n_v: usize,
    pub n_w: usize,
    pub n_h: usize,
    pub d_kq: usize,
    pub d_vs: usize,
    pub d_ff: usize,
    pub d_hp: usize,
    pub n_c: usize,
    pub blocks: usize,
    pub dropout: f64,
    pub variant: Variant,
}

impl Default for CscaConfig {
    fn default() -> Self {
        Self {
            d: 512,
            d_v: 2048,
            d_w: 300,
            n_v: 36,
            n_w: 14,
            n_h: 8,
            d_kq: 64,
            d_vs: 64,
            d_ff: 2048,
            d_hp: 1024,
            n_c: 3129,
            blocks: 4,
            dropout: 0.1,
            variant: Variant::Sca,
        }
    }
}

impl CscaConfig {
    /// The small configuration used by the gradient checks.
    pub fn tiny() -> Self {
        Self {
            d: 8,
            d_v: 5,
            d_w: 6,
            n_v: 3,
            n_w: 4,
            n_h: 2,
            d_kq: 4,
            d_vs: 4,
            d_ff: 16,
            d_hp: 8,
            n_c: 3,
            blocks: 2,
            dropout: 0.1,
            variant: Variant::Sca,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("d", self.d),
            ("d_v", self.d_v),
            ("d_w", self.d_w),
            ("n_v", self.n_v),
            ("n_w", self.n_w),
            ("n_h", self.n_h),
            ("d_kq", self.d_kq),
            ("d_vs", self.d_vs),
            ("d_ff", self.d_ff),
            ("d_hp", self.d_hp),
            ("n_c", self.n_c),
            ("blocks", self.blocks),
        ];
        for (name, v) in extents {
            ensure!(v >= 1, "config field {name} must be at least 1");
        }
        ensure!(
            (0.0..1.0).contains(&self.dropout),
            "dropout must lie in [0, 1), got {}",
            self.dropout
        );
        Ok(())
    }

    pub fn attention_dims(&self) -> AttentionDims {
        AttentionDims {
            d_model: self.d,
            heads: self.n_h,
            d_kq: self.d_kq,
            d_vs: self.d_vs,
            d_ff: self.d_ff,
            dropout: self.dropout,
        }
    }

    pub fn with_variant(&self, variant: Variant) -> Self {
        Self {
            variant,
            ..self.clone()
        }
    }

    pub fn with_blocks(&self, blocks: usize) -> Self {
        Self {
            blocks,
            ..self.clone()
        }
    }
}

/// Closed-form count of learnable scalars.
pub fn parameter_count(config: &CscaConfig) -> usize {
    let projections = config.d * config.d_v + config.d * config.d_w;
    let per_block = config.variant.layers_per_block() * config.attention_dims().layer_param_count();
    let classifier = config.d * config.d_hp + config.d_hp + config.d_hp * config.n_c + config.n_c;
    projections + config.blocks * per_block + classifier
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub sa_image: Option<AttentionLayerParams>,
    pub sa_question: Option<AttentionLayerParams>,
    pub ca_image: Option<AttentionLayerParams>,
    pub ca_question: Option<AttentionLayerParams>,
}

/// `logits = W_out · relu(W_h · F + b_h) + b_out`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierParams {
    /// `d_hp × d`
    pub w_h: ParamId,
    pub b_h: ParamId,
    /// `n_c × d_hp`
    pub w_out: ParamId,
    pub b_out: ParamId,
}

/// Where each weight array lives in [`CscaParams::tensors`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelLayout {
    /// `d × d_v`
    pub w_c_image: ParamId,
    /// `d × d_w`
    pub w_c_question: ParamId,
    pub blocks: Vec<BlockParams>,
    pub classifier: ClassifierParams,
}

impl ModelLayout {
    fn build(config: &CscaConfig, b: &mut ParamBuilder<'_>) -> Self {
        let d = config.d;
        let w_c_image = b.uniform("proj.image", &[d, config.d_v], config.d_v);
        let w_c_question = b.uniform("proj.question", &[d, config.d_w], config.d_w);
        let dims = config.attention_dims();
        let v = config.variant;
        let blocks = (0..config.blocks)
            .map(|t| {
                let mut layer = |on: bool, name: &str| {
                    on.then(|| AttentionLayerParams::build(b, &format!("block{t}.{name}"), &dims))
                };
                let sa_image = layer(v.has_self_attention(), "sa_image");
                let sa_question = layer(v.has_self_attention(), "sa_question");
                let ca_image = layer(v.has_co_attention(), "ca_image");
                let ca_question = layer(v.has_co_attention(), "ca_question");
                BlockParams {
                    sa_image,
                    sa_question,
                    ca_image,
                    ca_question,
                }
            })
            .collect();
        let classifier = ClassifierParams {
            w_h: b.uniform("cls.w_h", &[config.d_hp, d], d),
            b_h: b.uniform("cls.b_h", &[config.d_hp], d),
            w_out: b.uniform("cls.w_out", &[config.n_c, config.d_hp], config.d_hp),
            b_out: b.uniform("cls.b_out", &[config.n_c], config.d_hp),
        };
        Self {
            w_c_image,
            w_c_question,
            blocks,
            classifier,
        }
    }
}

/// All learnable arrays of one model, in canonical order.
#[derive(Clone, Debug, PartialEq)]
pub struct CscaParams {
    pub config: CscaConfig,
    pub tensors: Vec<Tensor>,
    pub names: Vec<String>,
    pub layout: ModelLayout,
}

impl CscaParams {
    /// Uniform `±1/sqrt(fan_in)` weights and biases, layer norms at `γ=1, β=0`.
    pub fn init(config: &CscaConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = RngStream::new(seed);
        let mut b = ParamBuilder::new(&mut rng);
        let layout = ModelLayout::build(config, &mut b);
        let (tensors, names) = b.finish();
        Ok(Self {
            config: config.clone(),
            tensors,
            names,
            layout,
        })
    }

    /// Rebuilds a model from arrays in canonical order, checking every shape.
    pub fn from_tensors(config: &CscaConfig, tensors: Vec<Tensor>) -> Result<Self> {
        let mut template = Self::init(config, 0)?;
        ensure!(
            tensors.len() == template.tensors.len(),
            "expected {} weight arrays, got {}",
            template.tensors.len(),
            tensors.len()
        );
        for ((t, want), name) in tensors.iter().zip(&template.tensors).zip(&template.names) {
            ensure!(
                t.shape() == want.shape(),
                "weight {name}: expected shape {:?}, got {:?}",
                want.shape(),
                t.shape()
            );
        }
        template.tensors = tensors;
        Ok(template)
    }

    pub fn scalar_count(&self) -> usize {
        scalar_count(&self.tensors)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }
}

/// One question about one image.
#[derive(Clone, Debug, PartialEq)]
pub struct VqaSample {
    /// `d_v × n_v` region features, one column per region.
    pub regions: Tensor,
    /// `d_w × n_w` word embeddings, one column per token.
    pub words: Tensor,
    /// Distribution over the `n_c` answers.
    pub target: Tensor,
    pub category: String,
}

impl VqaSample {
    pub fn answer(&self) -> usize {
        argmax(self.target.data())
    }

    pub fn check(&self, config: &CscaConfig) -> Result<()> {
        ensure!(
            self.regions.shape() == [config.d_v, config.n_v],
            "regions have shape {:?}, model expects [{}, {}]",
            self.regions.shape(),
            config.d_v,
            config.n_v
        );
        ensure!(
            self.words.shape() == [config.d_w, config.n_w],
            "words have shape {:?}, model expects [{}, {}]",
            self.words.shape(),
            config.d_w,
            config.n_w
        );
        ensure!(
            self.target.len() == config.n_c,
            "target has {} entries, model has {} classes",
            self.target.len(),
            config.n_c
        );
        check_simplex(&self.target)
    }
}

fn check_simplex(t: &Tensor) -> Result<()> {
    ensure!(
        t.data().iter().all(|&v| v >= 0.0),
        "target has negative entries"
    );
    let s = t.sum();
    ensure!((s - 1.0).abs() <= 1e-9, "target sums to {s}, not 1");
    Ok(())
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

impl Mode {
    pub fn training(self) -> bool {
        self == Mode::Train
    }
}

/// Per-head attention weights of the layers one block ran.
#[derive(Clone, Debug)]
pub struct BlockAttention<W> {
    pub sa_image: Vec<W>,
    pub sa_question: Vec<W>,
    /// Regions attending over words: `n_w × n_v` per head.
    pub ca_image: Vec<W>,
    /// Words attending over regions: `n_v × n_w` per head.
    pub ca_question: Vec<W>,
}

impl<W> Default for BlockAttention<W> {
    fn default() -> Self {
        Self {
            sa_image: Vec::new(),
            sa_question: Vec::new(),
            ca_image: Vec::new(),
            ca_question: Vec::new(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct AnswerPrediction {
    pub probabilities: Vec<f64>,
    pub answer: usize,
    pub attention: Option<Vec<BlockAttention<Tensor>>>,
}

pub fn project_features(
    g: &mut Graph<'_>,
    regions: Var,
    words: Var,
    layout: &ModelLayout,
) -> Result<(Var, Var)> {
    let ri = g.matmul(layout.w_c_image.var(g), regions)?;
    let eq = g.matmul(layout.w_c_question.var(g), words)?;
    Ok((ri, eq))
}

fn run_layer(
    g: &mut Graph<'_>,
    layer: Option<&AttentionLayerParams>,
    target: Var,
    other: Var,
    training: bool,
    rng: &mut RngStream,
    weights: &mut Vec<Var>,
) -> Result<Var> {
    match layer {
        Some(p) => {
            let Attended { output, weights: w } =
                attention::attention_layer(g, target, other, p, training, rng)?;
            *weights = w;
            Ok(output)
        }
        None => Ok(target),
    }
}

/// One SCA block. Self-attention on each modality, then co-attention of
/// each self-attended modality over the other. Absent layers pass their
/// input through, which yields the ablation variants.
pub fn sca_block(
    g: &mut Graph<'_>,
    image: Var,
    question: Var,
    block: &BlockParams,
    training: bool,
    rng: &mut RngStream,
) -> Result<(Var, Var, BlockAttention<Var>)> {
    let mut att = BlockAttention::default();
    let ri = run_layer(g, block.sa_image.as_ref(), image, image, training, rng, &mut att.sa_image)?;
    let eq = run_layer(
        g,
        block.sa_question.as_ref(),
        question,
        question,
        training,
        rng,
        &mut att.sa_question,
    )?;
    let ri_next = run_layer(g, block.ca_image.as_ref(), ri, eq, training, rng, &mut att.ca_image)?;
    let eq_next = run_layer(
        g,
        block.ca_question.as_ref(),
        eq,
        ri,
        training,
        rng,
        &mut att.ca_question,
    )?;
    Ok((ri_next, eq_next, att))
}

pub fn cascade(
    g: &mut Graph<'_>,
    image: Var,
    question: Var,
    layout: &ModelLayout,
    training: bool,
    rng: &mut RngStream,
) -> Result<(Var, Var, Vec<BlockAttention<Var>>)> {
    let (mut ri, mut eq) = (image, question);
    let mut trace = Vec::with_capacity(layout.blocks.len());
    for block in &layout.blocks {
        let (a, b, att) = sca_block(g, ri, eq, block, training, rng)?;
        ri = a;
        eq = b;
        trace.push(att);
    }
    Ok((ri, eq, trace))
}

/// `F = mean_cols(image) ⊙ mean_cols(question)`, a length-`d` vector.
pub fn pool_fuse(g: &mut Graph<'_>, image: Var, question: Var) -> Result<Var> {
    let di = g.value(image).dims2()?.0;
    let dq = g.value(question).dims2()?.0;
    ensure!(di == dq, "modalities differ in embedding size: {di} vs {dq}");
    let i_f = g.mean_axis(image, 1)?;
    let q_f = g.mean_axis(question, 1)?;
    g.mul(i_f, q_f)
}

/// Answer probabilities for a fused vector.
pub fn classify(g: &mut Graph<'_>, fused: Var, p: &ClassifierParams) -> Result<Var> {
    let d = g.value(fused).len();
    let f = g.reshape(fused, [d, 1])?;
    let h = g.matmul(p.w_h.var(g), f)?;
    let h = g.add_col_bias(h, p.b_h.var(g))?;
    let h = g.relu(h);
    let logits = g.matmul(p.w_out.var(g), h)?;
    let logits = g.add_col_bias(logits, p.b_out.var(g))?;
    let n = g.value(logits).len();
    let logits = g.reshape(logits, [n])?;
    g.softmax(logits, 0)
}

/// `-Σ target · ln(pred + 1e-12)`; the target must lie on the simplex.
pub fn loss_ce(g: &mut Graph<'_>, probs: Var, target: &Tensor) -> Result<Var> {
    check_simplex(target)?;
    g.cross_entropy(probs, target, LOG_EPS)
}

/// Values recorded by [`forward_graph`].
pub struct ForwardTrace {
    pub probs: Var,
    pub attention: Vec<BlockAttention<Var>>,
}

/// Records the forward pass on `g`, whose parameters must be `params.tensors`.
pub fn forward_graph(
    g: &mut Graph<'_>,
    sample: &VqaSample,
    params: &CscaParams,
    mode: Mode,
    rng: &mut RngStream,
) -> Result<ForwardTrace> {
    sample.check(&params.config)?;
    let regions = g.input(sample.regions.clone());
    let words = g.input(sample.words.clone());
    let layout = &params.layout;
    let (ri, eq) = project_features(g, regions, words, layout)?;
    let (ri, eq, attention) = cascade(g, ri, eq, layout, mode.training(), rng)?;
    let fused = pool_fuse(g, ri, eq)?;
    let probs = classify(g, fused, &layout.classifier)?;
    Ok(ForwardTrace { probs, attention })
}

/// Predicts one sample. With `record_attention`, every head's weights of
/// every block are copied out of the graph.
pub fn forward(
    sample: &VqaSample,
    params: &CscaParams,
    mode: Mode,
    rng: &mut RngStream,
    record_attention: bool,
) -> Result<AnswerPrediction> {
    let mut g = Graph::new(&params.tensors);
    let trace = forward_graph(&mut g, sample, params, mode, rng)?;
    let probabilities = g.value(trace.probs).data().to_vec();
    let answer = argmax(&probabilities);
    let attention = record_attention.then(|| {
        let copy = |vs: &[Var]| vs.iter().map(|&v| g.value(v).clone()).collect();
        trace
            .attention
            .iter()
            .map(|b| BlockAttention {
                sa_image: copy(&b.sa_image),
                sa_question: copy(&b.sa_question),
                ca_image: copy(&b.ca_image),
                ca_question: copy(&b.ca_question),
            })
            .collect()
    });
    Ok(AnswerPrediction {
        probabilities,
        answer,
        attention,
    })
}

/// Loss and per-array gradients for one sample.
pub fn loss_and_grads(
    sample: &VqaSample,
    params: &CscaParams,
    mode: Mode,
    rng: &mut RngStream,
) -> Result<(f64, usize, Vec<Option<Tensor>>)> {
    let mut g = Graph::new(&params.tensors);
    let trace = forward_graph(&mut g, sample, params, mode, rng)?;
    let answer = argmax(g.value(trace.probs).data());
    let loss = loss_ce(&mut g, trace.probs, &sample.target)?;
    let value = g.value(loss).item()?;
    let grads = g.backward(loss)?;
    Ok((value, answer, grads.into_param_grads(params.tensors.len())))
}

/// Eval-mode answer for every sample.
pub fn predict(params: &CscaParams, samples: &[VqaSample]) -> Result<Vec<usize>> {
    let mut rng = RngStream::new(0);
    samples
        .iter()
        .map(|s| Ok(forward(s, params, Mode::Eval, &mut rng, false)?.answer))
        .collect()
}

/// Fraction of samples whose eval-mode answer is the target's argmax.
pub fn accuracy(params: &CscaParams, samples: &[VqaSample]) -> Result<f64> {
    ensure!(!samples.is_empty(), "accuracy of an empty sample set");
    let predicted = predict(params, samples)?;
    let correct = predicted
        .iter()
        .zip(samples)
        .filter(|(p, s)| **p == s.answer())
        .count();
    Ok(correct as f64 / samples.len() as f64)
}
