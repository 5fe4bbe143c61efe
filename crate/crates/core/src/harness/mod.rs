//! Training, evaluation, cost accounting and the correctness checks.

pub mod bench;
pub mod checks;
pub mod config;
pub mod cost;
pub mod data;
pub mod eval;
pub mod forward;
pub mod train;

pub use config::{Execution, LrDecay, Policy, RunConfig};
pub use cost::{cost_model, CostQuery, CostReport};
pub use eval::{eval_csv, evaluate, EvalRow};
pub use forward::{forward_long, ForwardSpec, LongOutput};
pub use train::{load_checkpoint, save_checkpoint, train, MetricRecord};
