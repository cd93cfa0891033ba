//! Dense arrays and a tape-based reverse-mode differentiator.
//!
//! Everything runs in `f64`. Each forward pass records onto its own
//! [`Graph`]; parameters live in a [`ParamStore`] and are bound into a graph by
//! id, so several graphs can read the same store concurrently.

mod array;
mod graph;
mod params;

pub use array::NdArray;
pub use graph::{Graph, Var, LAYER_NORM_EPS};
pub use params::{Grads, ParamId, ParamStore};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {got:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        got: Vec<usize>,
    },
    #[error("{op}: axis {axis} out of range for shape {shape:?}")]
    Axis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: index {index} out of bound {bound}")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("shape {shape:?} does not hold {len} values")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("zero extent in shape {0:?}")]
    ZeroExtent(Vec<usize>),
    #[error("{0}: empty input")]
    Empty(&'static str),
    #[error("{0}: produced a non-finite value")]
    NonFinite(&'static str),
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}
