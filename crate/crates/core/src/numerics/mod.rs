//! Dense tensors, reverse-mode autodiff, MLPs and AdamW.

mod mlp;
mod optim;
mod params;
mod tape;
mod tensor;

pub use mlp::{mlp_apply, time_embedding, ConditionedMlp, MlpArch};
pub use optim::{adamw_step, clip_global_norm, AdamWConfig, OptimizerState};
pub use params::ParamSet;
pub use tape::{eval, grad, Bound, Gradients, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("non-finite value at node {node} ({op}{})", if label.is_empty() { String::new() } else { format!(", `{label}`") })]
    NonFinite { node: usize, op: &'static str, label: String },
}
