//! Anatomy-hierarchy supervision for pulmonary segment partitioning.
//!
//! Segment-level labels on the bronchovascular tree supervise voxels
//! directly; lobe-level labels supervise every in-lobe voxel indirectly
//! through a max reduction over each lobe's member segments; an L1
//! Laplacian term smooths the probability field. The crate carries the
//! hierarchy, the losses with analytic gradients, the evaluation metrics,
//! a procedural phantom generator and a free-logit-field optimizer.

pub mod anatomy;
pub mod error;
pub mod exec;
pub mod losses;
pub mod metrics;
pub mod optimizer;
pub mod phantom;
pub mod volume;

pub use error::{Error, Result};
