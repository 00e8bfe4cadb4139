//! Nonparametric estimation of smooth mixing densities for directional data
//! on S² by predictive recursion, with structural-parameter estimation by PR
//! marginal likelihood, a Bayes-factor goodness-of-fit test, mode-based
//! clustering and an EM/BIC finite-mixture baseline.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cluster;
pub mod em;
pub mod error;
mod fastexp;
pub mod gof;
pub mod io;
pub mod kernels;
pub mod marginal;
pub mod pr;
pub mod seed;
pub mod sim;
pub mod sphere;

pub use error::{Error, Result};
pub use kernels::{KernelFamily, KernelSpec};
pub use pr::{PrEstimate, WeightSchedule};
pub use sphere::{MixingDensityGrid, SphereGrid, SphericalCoord, UnitVector};
