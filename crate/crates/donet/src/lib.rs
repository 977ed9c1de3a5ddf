//! From-scratch dual-decoder lesion segmentation stack: a rank-4 reverse-mode
//! autodiff engine, the layer zoo it needs (dilated conv, transposed conv,
//! ConvLSTM, attention gates, batch norm), a recurrent context encoding
//! module, dice/tversky/focal losses, segmentation metrics, synthetic data
//! tooling and a deterministic SGD training loop.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod rcem;
pub mod rng;
pub mod scalar;
pub mod shape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{GradGraph, Var};
pub use rng::Rng;
pub use scalar::Scalar;
pub use shape::Shape;
pub use tensor::{Init, Tensor};
