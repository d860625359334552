//! Dense `f64` tensors with a reverse-mode tape.
//!
//! Everything the towers and losses need is expressed through [`Graph`]:
//! forward values are computed eagerly as nodes are pushed, and
//! [`Graph::backward`] sweeps the tape once from a scalar. Parameters live in
//! a [`ParamStore`] and are bound onto a fresh graph for every step.

mod gradcheck;
mod graph;
pub mod kernels;
mod params;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport, ScalarCheck};
pub use graph::{
    gelu, gelu_grad, softmax_in_place, AttentionLayout, Gradients, Graph, MaskKind, Segment, Var,
};
pub use params::{Bound, ParamStore};
pub use tensor::Tensor;
