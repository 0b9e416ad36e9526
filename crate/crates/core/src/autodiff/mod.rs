//! Reverse-mode differentiation over dense `f64` tensors.

mod gradcheck;
mod graph;
mod optim;
mod tensor;

pub use gradcheck::{grad_check, rel_error, GradCheckReport, ParamError};
pub use graph::{Gradients, Graph, Var, NEG_INF};
pub use optim::{clip_grad_norm, sgd_step};
pub use tensor::{ParamStore, Tensor};
