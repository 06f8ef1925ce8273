//! Flat parameter storage.
//!
//! Models keep every learnable array in one ordered `Vec<Tensor>` and refer
//! to entries through [`ParamId`]. The order is the canonical order used by
//! checkpoints and the optimizer, and a [`crate::Graph`] built over the
//! vector exposes entry `i` as `Var` number `i`.

use crate::rng::RngStream;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

impl ParamId {
    pub fn var(self, g: &Graph<'_>) -> Var {
        g.param(self.0)
    }
}

/// Allocates and initializes parameters in registration order.
pub struct ParamBuilder<'r> {
    tensors: Vec<Tensor>,
    names: Vec<String>,
    rng: &'r mut RngStream,
}

impl<'r> ParamBuilder<'r> {
    pub fn new(rng: &'r mut RngStream) -> Self {
        Self {
            tensors: Vec::new(),
            names: Vec::new(),
            rng,
        }
    }

    /// Uniform in `±1/sqrt(fan_in)`.
    pub fn uniform(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape.to_vec(), |_| rng.uniform_range(-bound, bound));
        self.push(name.into(), t)
    }

    pub fn constant(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> ParamId {
        self.push(name.into(), Tensor::full(shape.to_vec(), value))
    }

    fn push(&mut self, name: String, t: Tensor) -> ParamId {
        self.tensors.push(t);
        self.names.push(name);
        ParamId(self.tensors.len() - 1)
    }

    pub fn finish(self) -> (Vec<Tensor>, Vec<String>) {
        (self.tensors, self.names)
    }
}

/// Total number of scalars across `tensors`.
pub fn scalar_count(tensors: &[Tensor]) -> usize {
    tensors.iter().map(Tensor::len).sum()
}
