//! Summary-token KV compression for long-stream transformers.

pub mod compression;
pub mod error;
pub mod kvcache;
pub mod model;
pub mod numerics;
pub mod harness;
pub mod tasks;

pub use error::{Error, Result};
pub use model::{Model, ModelConfig, TokenId};
pub use numerics::{DType, Rng, Scalar, Tape, Tensor, Var};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Model32 = Model<f32>;
pub type Model64 = Model<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
