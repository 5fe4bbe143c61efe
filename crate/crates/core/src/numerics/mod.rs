//! Dense tensors, reverse-mode differentiation, optimizer, RNG and checkpoints.

pub mod checkpoint;
mod optim;
mod params;
mod rng;
mod scalar;
mod tape;
mod tensor;

pub use optim::{Adam, AdamConfig};
pub use params::ParamStore;
pub use rng::{Rng, ALGORITHM as RNG_ALGORITHM};
pub use scalar::{DType, Scalar};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
