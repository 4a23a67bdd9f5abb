pub mod autodiff;
pub mod config;
pub mod encoder;
pub mod error;
pub mod finetune;
pub mod graph;
pub mod metrics;
pub mod pretrain;
pub mod queue;
pub mod sampler;
pub mod semantic;
pub mod structure;
pub mod synth;
pub mod toy;

pub use error::{PheError, Result};
