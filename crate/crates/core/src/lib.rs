//! Convolutional encoding models of visual neurons: feedforward and recurrent cores with
//! factorized readouts, a reverse-mode autodiff engine to train them, noise-normalized
//! evaluation, the multi-path ensemble view of unrolled recurrence, and virtual
//! neurophysiology probes.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); generic types default to `f64`.

pub mod autodiff;
pub mod checkpoint;
pub mod container;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod multipath;
pub mod neurophys;
pub mod ops;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use autodiff::{Graph, LossKind, Var};
pub use data::NeuralDataset;
pub use error::{Error, Result};
pub use model::{build_model, Model, ModelConfig, ModelKind, ReadoutMode};
pub use ops::Activation;
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Model32 = Model<f32>;
pub type Model64 = Model<f64>;
pub type Dataset32 = NeuralDataset<f32>;
pub type Dataset64 = NeuralDataset<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
