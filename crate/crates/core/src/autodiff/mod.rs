//! Minimal reverse-mode automatic differentiation over dense arrays.

mod adam;
pub mod gradcheck;
pub mod checkpoint;
mod graph;
mod params;
mod real;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use graph::{Gradients, Graph, Var};
pub use params::{Ctx, ParamGrads, ParamStore};
pub use real::Real;
pub use tensor::Tensor;
