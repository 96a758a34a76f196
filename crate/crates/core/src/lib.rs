//! Simulation and numerical verification toolkit for the two-dimensional
//! scale-inhomogeneous discrete Gaussian free field (DGFF) and its
//! branching-random-walk surrogates.
//!
//! The crate provides exact covariance oracles, samplers, Gaussian comparison
//! couplings, extreme-value statistics and first/second-moment machinery for
//! the maximum of these fields at desk scales (N = 2^n, n ≲ 8).

pub mod compare;
pub mod cov;
pub mod error;
pub mod green;
pub mod lattice;
pub mod moments;
pub mod profile;
pub mod psi;
pub mod rng;
pub mod sampler;
pub mod stats;

pub use compare::{CouplingSpec, Direction};
pub use error::Error;
pub use green::{green_matrix, GreenMatrix, HarmonicOperator};
pub use lattice::{GridSize, Rect, ScaleBox, Vertex};
pub use moments::{MomentEstimate, MomentMethod, PathEventSpec};
pub use profile::{EffectiveProfile, StepProfile};
pub use sampler::{FieldKind, FieldSample};
pub use stats::{MaxSample, TailReport};

/// Crate result alias.
pub type Result<T> = std::result::Result<T, Error>;
