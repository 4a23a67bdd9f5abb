//! Dense tensors, a gradient tape, AdamW and a finite-difference checker.

mod gradcheck;
mod optim;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_only, GradCheckReport};
pub use optim::{cosine_lr, AdamWConfig, OptimizerState};
pub use params::ParamStore;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
