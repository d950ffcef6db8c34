//! Gradient-based meta-learning (MAML, first-order MAML, ANIL) over gated
//! graph neural networks, with multitask pre-training baselines and a
//! few-shot evaluation harness for molecular property tasks.

pub mod baselines;
pub mod chemgraph;
pub mod error;
pub mod evalbench;
pub mod ggnn;
pub mod metalearn;
pub mod optim;
pub mod params;
pub mod seed;
pub mod tensor;

pub use error::{Error, Result};
pub use params::ParamSet;
pub use tensor::{grad, Tape, Tensor, TensorError};
