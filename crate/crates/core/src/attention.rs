//! Scaled dot-product attention and the self-/co-attention layers built on it.
//!
//! Every sequence is a `d×l` matrix with one column per position. A layer
//! takes a *query source* (which also feeds the residual path and fixes the
//! output length) and a *context source* (which supplies keys and values).
//! Self-attention is the case where both are the same matrix.

use crate::error::{ensure, Result};
use crate::params::{ParamBuilder, ParamId};
use crate::rng::RngStream;
use crate::tensor::{Graph, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Extents shared by every attention layer of a model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionDims {
    pub d_model: usize,
    pub heads: usize,
    pub d_kq: usize,
    pub d_vs: usize,
    pub d_ff: usize,
    pub dropout: f64,
}

impl AttentionDims {
    /// Learnable scalars in one layer.
    pub fn layer_param_count(&self) -> usize {
        let Self {
            d_model: d,
            heads,
            d_kq,
            d_vs,
            d_ff,
            ..
        } = *self;
        let per_head = d * d_kq * 2 + d * d_vs;
        let merge = d * heads * d_vs;
        let ffn = d * d_ff + d_ff + d_ff * d + d;
        let norms = 4 * d;
        heads * per_head + merge + ffn + norms
    }
}

/// Per-head projections; `Q = W_qᵀ X`, `K = W_kᵀ C`, `V = W_vᵀ C`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadProjection {
    /// `d_m × d_kq`
    pub w_q: ParamId,
    /// `d_m × d_kq`
    pub w_k: ParamId,
    /// `d_m × d_vs`
    pub w_v: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiHeadParams {
    pub heads: Vec<HeadProjection>,
    /// `d_m × (heads·d_vs)` merge applied to the stacked head outputs.
    pub w_mh: ParamId,
}

/// Position-wise `W2ᵀ·dropout(relu(W1ᵀx + b1)) + b2`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeedForwardParams {
    /// `d_m × d_ff`
    pub w1: ParamId,
    pub b1: ParamId,
    /// `d_ff × d_m`
    pub w2: ParamId,
    pub b2: ParamId,
    pub dropout: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionLayerParams {
    pub mh: MultiHeadParams,
    pub ffn: FeedForwardParams,
    pub ln1: LayerNormParams,
    pub ln2: LayerNormParams,
}

impl AttentionLayerParams {
    /// Registers a layer's arrays in canonical order: per head `w_q, w_k,
    /// w_v`; then `w_mh`; `ln1`; FFN `w1, b1, w2, b2`; `ln2`.
    pub fn build(b: &mut ParamBuilder<'_>, prefix: &str, dims: &AttentionDims) -> Self {
        let d = dims.d_model;
        let heads = (0..dims.heads)
            .map(|h| HeadProjection {
                w_q: b.uniform(format!("{prefix}.head{h}.w_q"), &[d, dims.d_kq], d),
                w_k: b.uniform(format!("{prefix}.head{h}.w_k"), &[d, dims.d_kq], d),
                w_v: b.uniform(format!("{prefix}.head{h}.w_v"), &[d, dims.d_vs], d),
            })
            .collect();
        let hv = dims.heads * dims.d_vs;
        let w_mh = b.uniform(format!("{prefix}.w_mh"), &[d, hv], hv);
        let ln1 = LayerNormParams {
            gamma: b.constant(format!("{prefix}.ln1.gamma"), &[d], 1.0),
            beta: b.constant(format!("{prefix}.ln1.beta"), &[d], 0.0),
        };
        let ffn = FeedForwardParams {
            w1: b.uniform(format!("{prefix}.ffn.w1"), &[d, dims.d_ff], d),
            b1: b.uniform(format!("{prefix}.ffn.b1"), &[dims.d_ff], d),
            w2: b.uniform(format!("{prefix}.ffn.w2"), &[dims.d_ff, d], dims.d_ff),
            b2: b.uniform(format!("{prefix}.ffn.b2"), &[d], dims.d_ff),
            dropout: dims.dropout,
        };
        let ln2 = LayerNormParams {
            gamma: b.constant(format!("{prefix}.ln2.gamma"), &[d], 1.0),
            beta: b.constant(format!("{prefix}.ln2.beta"), &[d], 0.0),
        };
        Self {
            mh: MultiHeadParams { heads, w_mh },
            ffn,
            ln1,
            ln2,
        }
    }
}

/// Output of an attention computation plus the weights of every head, each
/// `l_ctx × l_out` with columns summing to one.
#[derive(Clone, Debug)]
pub struct Attended {
    pub output: Var,
    pub weights: Vec<Var>,
}

/// `out = V · softmax_ctx(Kᵀ Q / sqrt(d_kq))`.
///
/// `q` is `d_kq × l_out`, `k` is `d_kq × l_ctx`, `v` is `d_vs × l_ctx`.
/// Returns `(out, weights)` with `out` of shape `d_vs × l_out` and weights
/// `l_ctx × l_out`, normalized over the context axis.
pub fn scaled_dot_attention(g: &mut Graph<'_>, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let (dq, _) = g.value(q).dims2()?;
    let (dk, lk) = g.value(k).dims2()?;
    let (_, lv) = g.value(v).dims2()?;
    ensure!(
        dq == dk,
        "query/key feature sizes differ: {:?} vs {:?}",
        g.value(q).shape(),
        g.value(k).shape()
    );
    ensure!(
        lk == lv,
        "key/value context lengths differ: {:?} vs {:?}",
        g.value(k).shape(),
        g.value(v).shape()
    );
    let scores = g.matmul_tn(k, q)?;
    let scores = g.scale(scores, 1.0 / (dk as f64).sqrt());
    let weights = g.softmax(scores, 0)?;
    let out = g.matmul(v, weights)?;
    Ok((out, weights))
}

/// Multi-head attention of `queries_src` over `context_src`, merged by `W_mh`.
pub fn multi_head(
    g: &mut Graph<'_>,
    queries_src: Var,
    context_src: Var,
    p: &MultiHeadParams,
) -> Result<Attended> {
    let dq = g.value(queries_src).dims2()?.0;
    let dc = g.value(context_src).dims2()?.0;
    ensure!(
        dq == dc,
        "query and context embeddings differ in size: {dq} vs {dc}"
    );
    ensure!(!p.heads.is_empty(), "multi-head attention needs at least one head");
    let mut outs = Vec::with_capacity(p.heads.len());
    let mut weights = Vec::with_capacity(p.heads.len());
    for head in &p.heads {
        let q = g.matmul_tn(head.w_q.var(g), queries_src)?;
        let k = g.matmul_tn(head.w_k.var(g), context_src)?;
        let v = g.matmul_tn(head.w_v.var(g), context_src)?;
        let (h, w) = scaled_dot_attention(g, q, k, v)?;
        outs.push(h);
        weights.push(w);
    }
    let stacked = if outs.len() == 1 {
        outs[0]
    } else {
        g.concat_rows(&outs)?
    };
    let output = g.matmul(p.w_mh.var(g), stacked)?;
    Ok(Attended { output, weights })
}

fn feed_forward(
    g: &mut Graph<'_>,
    x: Var,
    p: &FeedForwardParams,
    training: bool,
    rng: &mut RngStream,
) -> Result<Var> {
    let h = g.matmul_tn(p.w1.var(g), x)?;
    let h = g.add_col_bias(h, p.b1.var(g))?;
    let h = g.relu(h);
    let h = g.dropout(h, p.dropout, training, rng)?;
    let y = g.matmul_tn(p.w2.var(g), h)?;
    g.add_col_bias(y, p.b2.var(g))
}

/// `y1 = LN1(X + dropout(MH(X, C)))`, `y2 = LN2(y1 + FFN(y1))`.
///
/// Randomness is drawn in a fixed order: the multi-head dropout mask first,
/// then the FFN mask.
pub fn attention_layer(
    g: &mut Graph<'_>,
    queries_src: Var,
    context_src: Var,
    p: &AttentionLayerParams,
    training: bool,
    rng: &mut RngStream,
) -> Result<Attended> {
    let mh = multi_head(g, queries_src, context_src, &p.mh)?;
    let attn = g.dropout(mh.output, p.ffn.dropout, training, rng)?;
    let res = g.add(queries_src, attn)?;
    let y1 = g.layer_norm(res, p.ln1.gamma.var(g), p.ln1.beta.var(g), LAYER_NORM_EPS)?;
    let ff = feed_forward(g, y1, &p.ffn, training, rng)?;
    let res = g.add(y1, ff)?;
    let y2 = g.layer_norm(res, p.ln2.gamma.var(g), p.ln2.beta.var(g), LAYER_NORM_EPS)?;
    Ok(Attended {
        output: y2,
        weights: mh.weights,
    })
}

pub fn self_attention(
    g: &mut Graph<'_>,
    x: Var,
    p: &AttentionLayerParams,
    training: bool,
    rng: &mut RngStream,
) -> Result<Attended> {
    attention_layer(g, x, x, p, training, rng)
}

/// Attention of `target` (queries, residual, output length) over `other`
/// (keys and values).
pub fn co_attention(
    g: &mut Graph<'_>,
    target: Var,
    other: Var,
    p: &AttentionLayerParams,
    training: bool,
    rng: &mut RngStream,
) -> Result<Attended> {
    attention_layer(g, target, other, p, training, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn singleton_context_returns_its_value() {
        let mut g = Graph::new(&[]);
        let q = g.input(Tensor::from_rows(&[&[0.3, -1.2, 2.0]]));
        let k = g.input(Tensor::from_rows(&[&[0.7]]));
        let v = g.input(Tensor::from_rows(&[&[4.0], &[-5.0]]));
        let (out, w) = scaled_dot_attention(&mut g, q, k, v).unwrap();
        assert_eq!(g.value(w).data(), &[1.0, 1.0, 1.0]);
        assert_eq!(g.value(out).data(), &[4.0, 4.0, 4.0, -5.0, -5.0, -5.0]);
    }

    #[test]
    fn identical_keys_average_values() {
        let mut g = Graph::new(&[]);
        let q = g.input(Tensor::from_rows(&[&[1.0], &[2.0]]));
        let k = g.input(Tensor::from_rows(&[&[0.5, 0.5], &[-1.0, -1.0]]));
        let v = g.input(Tensor::from_rows(&[&[1.0, 3.0], &[2.0, -2.0]]));
        let (out, _) = scaled_dot_attention(&mut g, q, k, v).unwrap();
        assert_eq!(g.value(out).data(), &[2.0, 0.0]);
    }

    #[test]
    fn hand_softmax_case() {
        // scores [ln 2, 0] -> weights [2/3, 1/3] -> 2/3 + 1 = 5/3
        let mut g = Graph::new(&[]);
        let q = g.input(Tensor::from_rows(&[&[1.0]]));
        let k = g.input(Tensor::from_rows(&[&[2f64.ln(), 0.0]]));
        let v = g.input(Tensor::from_rows(&[&[1.0, 3.0]]));
        let (out, w) = scaled_dot_attention(&mut g, q, k, v).unwrap();
        let wv = g.value(w).data();
        assert!((wv[0] - 2.0 / 3.0).abs() < 1e-15 && (wv[1] - 1.0 / 3.0).abs() < 1e-15);
        assert!((g.value(out).data()[0] - 5.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn zero_query_gives_uniform_weights() {
        // Q = [0]: every score is 0, so V is averaged.
        let mut g = Graph::new(&[]);
        let q = g.input(Tensor::from_rows(&[&[0.0]]));
        let k = g.input(Tensor::from_rows(&[&[2f64.ln(), 0.0]]));
        let v = g.input(Tensor::from_rows(&[&[1.0, 3.0]]));
        let (out, _) = scaled_dot_attention(&mut g, q, k, v).unwrap();
        assert!((g.value(out).data()[0] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn shape_errors() {
        let mut g = Graph::new(&[]);
        let q = g.input(Tensor::zeros([2, 3]));
        let k = g.input(Tensor::zeros([3, 4]));
        let v = g.input(Tensor::zeros([2, 4]));
        assert!(scaled_dot_attention(&mut g, q, k, v).is_err());
        let k = g.input(Tensor::zeros([2, 4]));
        let v = g.input(Tensor::zeros([2, 5]));
        assert!(scaled_dot_attention(&mut g, q, k, v).is_err());
    }

    #[test]
    fn layer_param_count_matches_builder() {
        let dims = AttentionDims {
            d_model: 6,
            heads: 3,
            d_kq: 2,
            d_vs: 4,
            d_ff: 10,
            dropout: 0.1,
        };
        let mut rng = RngStream::new(0);
        let mut b = ParamBuilder::new(&mut rng);
        AttentionLayerParams::build(&mut b, "l", &dims);
        let (tensors, names) = b.finish();
        assert_eq!(crate::params::scalar_count(&tensors), dims.layer_param_count());
        assert_eq!(names[0], "l.head0.w_q");
    }
}
