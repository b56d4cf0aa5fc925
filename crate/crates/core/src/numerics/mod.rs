//! Deterministic `f64` tensor engine with reverse-mode gradients.

pub mod gradcheck;
mod graph;
pub mod nn;
#[cfg(test)]
pub(crate) mod oracle;
mod params;
mod rng;
mod tensor;

pub use gradcheck::{grad_check, grad_check_filtered, GradCheckReport};
pub use graph::{gelu_scalar, Gradients, Graph, Var, LN_EPS};
pub use params::{Param, ParamId, ParamStore};
pub use rng::{derive_seed, Rng};
pub use tensor::{matmul, Tensor};
