use super::kernels::{gemm, softmax_into};
use super::{axis_layout, Tensor};
use crate::error::{ensure, Result};
use crate::rng::RngStream;

/// Handle to a value recorded in a [`Graph`].
///
/// Ids below the parameter count refer to the borrowed parameter slice;
/// the rest index recorded nodes in append order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddColBias { x: Var, bias: Var },
    Relu(Var),
    Dropout { x: Var, mask: Vec<f64> },
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    MeanAxis { x: Var, axis: usize },
    ConcatRows(Vec<Var>),
    Reshape(Var),
    Sum(Var),
    CrossEntropy { p: Var, target: Vec<f64>, eps: f64 },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Records a computation for reverse-mode differentiation.
///
/// Parameters are borrowed rather than copied into the tape, so building a
/// graph per sample is cheap even for large models. Nodes are append-only,
/// which keeps the tape acyclic and topologically ordered.
#[derive(Debug)]
pub struct Graph<'p> {
    params: &'p [Tensor],
    nodes: Vec<Node>,
    relu_signs: Option<Vec<bool>>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p [Tensor]) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            relu_signs: None,
        }
    }

    /// Records the sign pattern of every ReLU input, so a caller can tell
    /// whether two evaluations straddle a kink.
    pub fn track_kinks(mut self) -> Self {
        self.relu_signs = Some(Vec::new());
        self
    }

    pub fn relu_signs(&self) -> Option<&[bool]> {
        self.relu_signs.as_deref()
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn len(&self) -> usize {
        self.params.len() + self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn param(&self, index: usize) -> Var {
        assert!(index < self.params.len(), "parameter {index} out of range");
        Var(index)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        if v.0 < self.params.len() {
            &self.params[v.0]
        } else {
            &self.nodes[v.0 - self.params.len()].value
        }
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.params.len() + self.nodes.len() - 1)
    }

    /// Adds a leaf holding `t`.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, false, b, false)
    }

    /// `aᵀ · b`.
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, true, b, false)
    }

    pub fn matmul_ex(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (ar, ac) = av.dims2()?;
        let (br, bc) = bv.dims2()?;
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        ensure!(
            k == k2,
            "matmul shape mismatch: {:?}{} x {:?}{}",
            av.shape(),
            if ta { "ᵀ" } else { "" },
            bv.shape(),
            if tb { "ᵀ" } else { "" }
        );
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), ta, bv.data(), tb, &mut out, false);
        let value = Tensor::new([m, n], out)?;
        Ok(self.push(Op::MatMul { a, b, ta, tb }, value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        av.same_shape(bv, "add")?;
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(Op::Add(a, b), value))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        av.same_shape(bv, "mul")?;
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(Op::Mul(a, b), value))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x * c);
        self.push(Op::Scale(a, c), value)
    }

    /// Adds `bias[i]` to every entry of row `i` of `x`.
    pub fn add_col_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let (r, c) = xv.dims2()?;
        ensure!(
            bv.len() == r,
            "bias of length {} for {r} rows",
            bv.len()
        );
        let mut data = xv.data().to_vec();
        for i in 0..r {
            let b = bv.data()[i];
            for v in &mut data[i * c..(i + 1) * c] {
                *v += b;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(Op::AddColBias { x, bias }, value))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let value = xv.map(|v| if v > 0.0 { v } else { 0.0 });
        if self.relu_signs.is_some() {
            let signs: Vec<bool> = xv.data().iter().map(|&v| v > 0.0).collect();
            if let Some(r) = self.relu_signs.as_mut() {
                r.extend(signs);
            }
        }
        self.push(Op::Relu(x), value)
    }

    /// Inverted dropout. Identity in eval mode or at rate 0; otherwise each
    /// element survives with probability `1 - rate` and is scaled by
    /// `1 / (1 - rate)`. Draws exactly one uniform per element when active.
    pub fn dropout(&mut self, x: Var, rate: f64, training: bool, rng: &mut RngStream) -> Result<Var> {
        ensure!(
            (0.0..1.0).contains(&rate),
            "dropout rate must lie in [0, 1), got {rate}"
        );
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let xv = self.value(x);
        let mask: Vec<f64> = (0..xv.len())
            .map(|_| if rng.uniform() < rate { 0.0 } else { keep })
            .collect();
        let data = xv.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(Op::Dropout { x, mask }, value))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        let (outer, len, inner) = axis_layout(xv.shape(), axis)?;
        let mut out = vec![0.0; xv.len()];
        softmax_into(xv.data(), &mut out, outer, len, inner);
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(Op::Softmax { x, axis }, value))
    }

    /// Normalizes every column of a `d×l` matrix over its `d` entries with
    /// population variance, then applies the per-row affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        ensure!(eps > 0.0, "layer norm eps must be positive, got {eps}");
        let xv = self.value(x);
        let (d, l) = xv.dims2()?;
        let (gv, bv) = (self.value(gamma), self.value(beta));
        ensure!(
            gv.len() == d && bv.len() == d,
            "layer norm affine sizes {:?}/{:?} for feature size {d}",
            gv.shape(),
            bv.shape()
        );
        let xd = xv.data();
        let mut xhat = vec![0.0; d * l];
        let mut inv_std = vec![0.0; l];
        let mut out = vec![0.0; d * l];
        for j in 0..l {
            let mean = (0..d).map(|i| xd[i * l + j]).sum::<f64>() / d as f64;
            let var = (0..d).map(|i| (xd[i * l + j] - mean).powi(2)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[j] = inv;
            for i in 0..d {
                let h = (xd[i * l + j] - mean) * inv;
                xhat[i * l + j] = h;
                out[i * l + j] = gv.data()[i] * h + bv.data()[i];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            value,
        ))
    }

    /// Arithmetic mean along `axis`; the axis is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        let (outer, len, inner) = axis_layout(xv.shape(), axis)?;
        let mut out = vec![0.0; outer * inner];
        let xd = xv.data();
        for o in 0..outer {
            for t in 0..len {
                let row = &xd[(o * len + t) * inner..(o * len + t + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        let inv = 1.0 / len as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let mut shape = xv.shape().to_vec();
        if !shape.is_empty() {
            shape.remove(axis);
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(Op::MeanAxis { x, axis }, value))
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        ensure!(!parts.is_empty(), "concat_rows of nothing");
        let cols = self.value(parts[0]).dims2()?.1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            ensure!(c == cols, "concat_rows: column counts {cols} and {c} differ");
            data.extend_from_slice(self.value(p).data());
            rows += r;
        }
        let value = Tensor::new([rows, cols], data)?;
        Ok(self.push(Op::ConcatRows(parts.to_vec()), value))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(Op::Reshape(x), value))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(Op::Sum(x), value)
    }

    /// `-Σ target[j] · ln(p[j] + eps)`.
    pub fn cross_entropy(&mut self, p: Var, target: &Tensor, eps: f64) -> Result<Var> {
        let pv = self.value(p);
        ensure!(
            pv.len() == target.len(),
            "cross entropy: {} probabilities vs {} targets",
            pv.len(),
            target.len()
        );
        let loss = -pv
            .data()
            .iter()
            .zip(target.data())
            .map(|(q, t)| if *t == 0.0 { 0.0 } else { t * (q + eps).ln() })
            .sum::<f64>();
        let value = Tensor::scalar(loss);
        Ok(self.push(
            Op::CrossEntropy {
                p,
                target: target.data().to_vec(),
                eps,
            },
            value,
        ))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        ensure!(root.0 < self.len(), "root {root:?} not in this graph");
        let rv = self.value(root);
        ensure!(
            rv.is_scalar(),
            "backward needs a scalar root, got shape {:?}",
            rv.shape()
        );
        let np = self.params.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.len()];
        grads[root.0] = Some(vec![1.0]);

        for idx in (0..self.nodes.len()).rev() {
            let id = np + idx;
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[id] = Some(g);
        }

        let shapes = (0..self.len()).map(|i| self.value(Var(i)).shape().to_vec());
        let grads = grads
            .into_iter()
            .zip(shapes)
            .map(|(g, s)| g.map(|data| Tensor { shape: s, data }))
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (ar, ac) = av.dims2().expect("matmul operand");
                let (br, bc) = bv.dims2().expect("matmul operand");
                let (m, k) = if *ta { (ac, ar) } else { (ar, ac) };
                let n = if *tb { br } else { bc };
                let ga = slot(grads, *a, av.len());
                if *ta {
                    // dA (k×m) = op(B) · dCᵀ
                    gemm(k, n, m, bv.data(), *tb, g, true, ga, true);
                } else {
                    // dA (m×k) = dC · op(B)ᵀ
                    gemm(m, n, k, g, false, bv.data(), !*tb, ga, true);
                }
                let gb = slot(grads, *b, bv.len());
                if *tb {
                    // dB (n×k) = dCᵀ · op(A)
                    gemm(n, m, k, g, true, av.data(), *ta, gb, true);
                } else {
                    // dB (k×n) = op(A)ᵀ · dC
                    gemm(k, m, n, av.data(), !*ta, g, false, gb, true);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    axpy(slot(grads, *v, g.len()), 1.0, g);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let ga = slot(grads, *a, g.len());
                for ((d, gi), bi) in ga.iter_mut().zip(g).zip(bv) {
                    *d += gi * bi;
                }
                let gb = slot(grads, *b, g.len());
                for ((d, gi), ai) in gb.iter_mut().zip(g).zip(av) {
                    *d += gi * ai;
                }
            }
            Op::Scale(a, c) => axpy(slot(grads, *a, g.len()), *c, g),
            Op::AddColBias { x, bias } => {
                axpy(slot(grads, *x, g.len()), 1.0, g);
                let (r, c) = out.dims2().expect("bias operand");
                let gb = slot(grads, *bias, r);
                for (i, d) in gb.iter_mut().enumerate() {
                    *d += g[i * c..(i + 1) * c].iter().sum::<f64>();
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let gx = slot(grads, *x, g.len());
                for ((d, gi), xi) in gx.iter_mut().zip(g).zip(xv) {
                    if *xi > 0.0 {
                        *d += gi;
                    }
                }
            }
            Op::Dropout { x, mask } => {
                let gx = slot(grads, *x, g.len());
                for ((d, gi), m) in gx.iter_mut().zip(g).zip(mask) {
                    *d += gi * m;
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_layout(out.shape(), *axis).expect("softmax axis");
                let y = out.data();
                let gx = slot(grads, *x, g.len());
                for o in 0..outer {
                    let base = o * len * inner;
                    for i in 0..inner {
                        let dot: f64 = (0..len)
                            .map(|t| g[base + t * inner + i] * y[base + t * inner + i])
                            .sum();
                        for t in 0..len {
                            let at = base + t * inner + i;
                            gx[at] += y[at] * (g[at] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (d, l) = out.dims2().expect("layer norm operand");
                let gam = self.value(*gamma).data();
                {
                    let gg = slot(grads, *gamma, d);
                    for i in 0..d {
                        gg[i] += (0..l).map(|j| g[i * l + j] * xhat[i * l + j]).sum::<f64>();
                    }
                }
                {
                    let gbeta = slot(grads, *beta, d);
                    for i in 0..d {
                        gbeta[i] += g[i * l..(i + 1) * l].iter().sum::<f64>();
                    }
                }
                let gx = slot(grads, *x, d * l);
                let df = d as f64;
                for j in 0..l {
                    let mut sum_dh = 0.0;
                    let mut sum_dh_h = 0.0;
                    for i in 0..d {
                        let dh = g[i * l + j] * gam[i];
                        sum_dh += dh;
                        sum_dh_h += dh * xhat[i * l + j];
                    }
                    let inv = inv_std[j];
                    for i in 0..d {
                        let dh = g[i * l + j] * gam[i];
                        gx[i * l + j] += inv / df * (df * dh - sum_dh - xhat[i * l + j] * sum_dh_h);
                    }
                }
            }
            Op::MeanAxis { x, axis } => {
                let xv = self.value(*x);
                let (outer, len, inner) = axis_layout(xv.shape(), *axis).expect("mean axis");
                let inv = 1.0 / len as f64;
                let gx = slot(grads, *x, xv.len());
                for o in 0..outer {
                    let src = &g[o * inner..(o + 1) * inner];
                    for t in 0..len {
                        let start = (o * len + t) * inner;
                        axpy(&mut gx[start..start + inner], inv, src);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    axpy(slot(grads, *p, n), 1.0, &g[offset..offset + n]);
                    offset += n;
                }
            }
            Op::Reshape(x) => axpy(slot(grads, *x, g.len()), 1.0, g),
            Op::Sum(x) => {
                let n = self.value(*x).len();
                let gx = slot(grads, *x, n);
                gx.iter_mut().for_each(|d| *d += g[0]);
            }
            Op::CrossEntropy { p, target, eps } => {
                let pv = self.value(*p).data();
                let gp = slot(grads, *p, pv.len());
                for ((d, t), q) in gp.iter_mut().zip(target).zip(pv) {
                    *d -= g[0] * t / (q + eps);
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Gradients of one scalar root with respect to every recorded value.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when the root does not depend on `v`.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, zero-filled when the root does not depend on it.
    pub fn wrt(&self, graph: &Graph<'_>, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(graph.value(v).shape().to_vec()))
    }

    /// Moves out the gradients of the first `n` ids (the parameters).
    pub fn into_param_grads(self, n: usize) -> Vec<Option<Tensor>> {
        self.grads.into_iter().take(n).collect()
    }
}
