//! Differentiable graph-network building blocks.
//!
//! [`tape`] holds a small reverse-mode engine over dense matrices; [`graph`]
//! builds deterministic cutoff/multi-hop edge lists; [`layers`] implements
//! radial basis expansion, continuous-filter message passing, and
//! fine-to-coarse pooling; [`check`] verifies any scalar graph against
//! central differences.

pub mod check;
pub mod graph;
pub mod layers;
pub mod params;
pub mod tape;

pub use check::gradient_check;
pub use graph::{hop_pairs, EdgeList};
pub use layers::{
    edge_feature_matrix, linear, message_passing_layer, pool_fg_to_cg, rbf_expand, ConvVars,
};
pub use params::{init_rng, uniform_init, BoundParams, ParamSet};
pub use tape::{Grads, Tape, Var};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GnnError {
    #[error("cutoff must be positive and finite, got {0}")]
    BadCutoff(f64),
    #[error("radial basis expansion needs at least one basis function")]
    BadBasisCount,
    #[error("edge ({a}, {b}) references a missing node (graph has {count})")]
    PairOutOfRange { a: usize, b: usize, count: usize },
    #[error("shape mismatch in {what}: expected {expected}, got {actual}")]
    ShapeMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
}
