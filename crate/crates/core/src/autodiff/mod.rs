//! Reverse-mode differentiation over dense real arrays.
//!
//! A [`GraphBuilder`] records primitive operations into an immutable
//! [`Graph`]. Inputs are named; [`Graph::evaluate`] runs the forward pass for
//! a set of [`Bindings`] and [`Graph::gradient`] returns the exact gradient of
//! the scalar output with respect to one named input.
//!
//! ```
//! use quce_core::autodiff::{Bindings, GraphBuilder, Tensor};
//!
//! let mut g = GraphBuilder::<f64>::new();
//! let x = g.input("x", &[2]).unwrap();
//! let sq = g.square(x);
//! let out = g.sum(sq);
//! let graph = g.build(out);
//!
//! let x = Tensor::vector(vec![3.0, 4.0]);
//! let b = Bindings::new().bind("x", &x);
//! assert_eq!(graph.evaluate(&b).unwrap().item(), Some(25.0));
//! assert_eq!(graph.gradient(&b, "x").unwrap().data(), &[6.0, 8.0]);
//! ```

mod graph;
mod tensor;

pub use graph::{sigmoid, Bindings, Graph, GraphBuilder, NodeId};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("input '{0}' is not bound")]
    UnboundInput(String),
    #[error("input '{0}' is not part of the graph")]
    UnknownInput(String),
    #[error("input '{0}' declared twice")]
    DuplicateInput(String),
    #[error("gradient requires a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("non-finite value at {0}")]
    NonFinite(String),
}
