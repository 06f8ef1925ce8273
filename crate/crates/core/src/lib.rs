//! Cascade of self- and co-attention (CSCA) for visual question answering.
//!
//! The crate is self-contained: a small dense tensor type with a reverse-mode
//! tape ([`tensor`]), attention layers ([`attention`]), the cascaded model
//! ([`model`]), data generation and persistence ([`data`]), Adamax training
//! ([`optim`]), and evaluation ([`metrics`]).

pub mod attention;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use model::{parameter_count, CscaConfig, CscaParams, Mode, Variant, VqaSample};
pub use rng::RngStream;
pub use tensor::{Graph, Tensor, Var};
