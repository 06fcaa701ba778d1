//! Federated training with activation-norm regularization, plus Hessian
//! spectrum tooling for checking the curvature bounds it relies on.

pub mod autodiff;
pub mod cost;
pub mod curvature;
pub mod data;
pub mod fed;
pub mod graph;
pub mod model;
pub mod objective;
pub mod rng;
pub mod tensor;

pub use rng::Rng;
pub use tensor::{Tensor, TensorError};
