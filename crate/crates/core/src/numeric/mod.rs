//! Shared numerical machinery: splines, quadrature, moment statistics, RNG streams.

pub mod quadrature;
pub mod rng;
pub mod spline;
pub mod stats;
