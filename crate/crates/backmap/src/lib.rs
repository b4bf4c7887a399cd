//! Multiscale generative backmapping of coarse-grained protein ensembles.
//!
//! The crate reconstructs fine-grained (FG) coordinates from ultra
//! coarse-grained (UCG) bead positions by chaining conditional
//! variational autoencoders along a ladder of coarsening operators.
//! Each step model learns to invert one coarsening operator; inference
//! walks the chain from the coarsest level back to atomistic detail.
//!
//! Modules:
//! - [`mol`]: molecular domain types (elements, topologies, conformations).
//! - [`coarsen`]: coarse-grain mappings and how to learn or compose them.
//! - [`gnn`]: a small reverse-mode tensor engine plus the graph layers
//!   (radial basis expansion, continuous-filter message passing, pooling).
//! - [`cvae`]: the per-step conditional VAE (encoder, prior, decoder, losses).
//! - [`train`]: dataset splitting and the optimizer loop.
//! - [`pipeline`]: ladder construction, chain training, inference, and the
//!   synthetic ensemble generator.
//! - [`metrics`]: reconstruction quality measures and scheme evaluation.
//! - [`io`]: PDB and mapping-file parsing, run configs, checkpoints, manifests.
//! - [`experiments`]: scripted desk-scale comparisons of backmapping schemes.

pub mod cli;
pub mod coarsen;
pub mod cvae;
pub mod experiments;
pub mod gnn;
pub mod io;
pub mod metrics;
pub mod mol;
pub mod pipeline;
pub mod train;

pub use coarsen::CGMapping;
pub use cvae::{CvaeHyper, CvaeModel, LatentGaussian, StepContext};
pub use metrics::{evaluate_scheme, MetricsReport, ReconstructionScheme, SchemeEvaluation};
pub use pipeline::{
    backmap, build_ladder, generate_synthetic_ensemble, train_chain, BackmapChain,
    BackmapResult, Ladder, LevelSpec, SyntheticSpec,
};
pub use mol::{Conformation, Element, Ensemble, Topology};

