//! Monte Carlo laboratory for adapted perturbations of identity on a
//! discretized Wiener space.
//!
//! A shift `U = I + u` moves a Brownian path `w` by the time integral of a
//! nonanticipative drift density `u̇`. The crate samples such shifts,
//! evaluates their Girsanov exponentials, projects drifts onto the
//! observation filtration by least-squares regression, and compares the
//! relative entropy of the image measure with the kinetic energy
//! `½E|u|²_H`. Equality of the two characterizes invertible shifts; the
//! [`entropy`] module turns that into a statistical verdict.
//!
//! Module map:
//!
//! * [`wiener`]: grids, paths, counter-based RNG streams, Itô sums.
//! * [`shifts`]: adapted drifts, shift maps, Girsanov densities and the
//!   drift library.
//! * [`conditional`]: regression estimators of `E[· | 𝒰_t]`.
//! * [`innovation`]: innovation processes and representability tests.
//! * [`entropy`]: entropy and energy estimators, the invertibility gap,
//!   transport bounds and measure preservation.
//! * [`inverse`]: Euler solver for the inverse shift and identity checks.
//! * [`variational`]: Malliavin gradients, the fixed-point optimal drift and
//!   duality checks.

pub mod conditional;
pub mod entropy;
pub mod error;
pub mod innovation;
pub mod inverse;
pub mod quadrature;
pub mod registry;
pub mod shifts;
pub mod sinkhorn;
pub mod stats;
pub mod variational;
pub mod wiener;

pub use conditional::{EstimatorConfig, EstimatorKind, FeatureSet, FittedEstimator, SplitMode};
pub use entropy::{GapConfig, GapReport, TransportReport, Verdict};
pub use error::{Error, Result};
pub use innovation::InnovationResult;
pub use inverse::CompositionResidual;
pub use shifts::{AdaptedDrift, DriftEvaluator, ExponentialDensity, ShiftMap};
pub use stats::Estimate;
pub use variational::{CylindricalFunctional, VariationalSolution};
pub use wiener::{CameronMartinVector, DiscretePath, PathPrefix, RngStream, TimeGrid, WeightedEnsemble};
