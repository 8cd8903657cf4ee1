//! Numerical laboratory for coupling-based and volume-preserving normalizing
//! flows in two dimensions.
//!
//! The crate builds affine coupling flows greedily, block by block, from
//! closed-form conditional-moment normalization; measures how much a single
//! additional block could still improve the fit; and computes the optimal
//! volume-preserving transport of a density together with the KL lower bound
//! it cannot undercut.
//!
//! - [`densities`]: analytic targets (Gaussian, mixtures, ring, box
//!   counterexample) and their grid discretizations.
//! - [`flow`]: rotation layers and spline-conditioned affine coupling blocks
//!   with exact log-determinants.
//! - [`trainer`]: greedy layer-wise construction, the block-improvement
//!   estimator, and Monte-Carlo KL.
//! - [`volpres`]: sorted grid transport, radial rearrangements, scale
//!   optimization, counterexample bounds, and mode counting.
//! - [`decomp`]: the passive/negentropy/non-standardness loss decomposition.

pub mod decomp;
pub mod densities;
pub mod error;
pub mod flow;
pub mod numeric;
pub mod trainer;
pub mod volpres;

pub use error::{CoreError, Result};
