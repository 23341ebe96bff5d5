//! Minimal deterministic reverse-mode engine over dense `f64` arrays.

mod graph;
pub mod gradcheck;
pub mod kernels;
mod tensor;

pub use graph::{Graph, Var, DEBUG_ENV};
pub use tensor::DTensor;
