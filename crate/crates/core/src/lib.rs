//! Rigid point-cloud registration built on soft best-buddies matching.
//!
//! Matching scores every source/target pair by how mutually close they are
//! in an embedding space, turns those scores into per-point virtual targets
//! and confidence weights, and recovers the motion with a closed-form
//! weighted Procrustes solve. Iterating that step, first in feature space and
//! then on raw coordinates, gives the registration drivers in [`pipeline`].

pub mod cli;
pub mod datagen;
pub mod embed;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod io;
pub mod matching;
pub mod pipeline;
pub mod solve;

pub use embed::{embed, EmbeddingKind, FeatureCloud, FeatureRows};
pub use error::{Error, Result};
pub use geometry::{EulerAngles, PointCloud, RigidTransform};
pub use matching::{match_pass, SoftMatch};
pub use pipeline::{Method, PipelineConfig, RegistrationReport};
pub use solve::{weighted_procrustes, Correspondences};
