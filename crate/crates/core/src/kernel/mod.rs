//! Minimal `f64` tensor library with reverse-mode differentiation.

pub mod gradcheck;
mod graph;
mod tensor;

pub use graph::{
    criss_cross_cells, criss_cross_weights, span_range, span_weights, Gradients, Graph, Var,
    NLL_FLOOR,
};
pub use tensor::{ShapeError, Tensor};
