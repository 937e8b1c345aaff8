//! Spectral Galerkin simulation of parabolic evolution equations driven by
//! trace-class fractional Brownian motion with Hurst index above one half.
//!
//! The crate covers noise sampling and the fractional Cameron-Martin space,
//! the diagonal semigroup, semigroup-twisted increments, vector fields and
//! their brackets, the mild solver with Jacobian and right-inverse flows,
//! Malliavin matrices and a Monte Carlo density lab.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod exponents;
pub mod fbm;
pub mod fields;
pub mod grid;
pub mod increments;
pub mod lab;
pub mod malliavin;
pub mod par;
pub mod quadrature;
pub mod report;
pub mod semigroup;
pub mod spde;

pub use config::ExperimentConfig;
pub use error::{Error, Result};
pub use exponents::{choose_exponents, AssumptionProfile};
pub use fbm::{HurstParam, QFbmPath, TraceClassSpec};
pub use grid::TimeGrid;
pub use lab::{run_monte_carlo, DiagnosticsReport};
pub use semigroup::{GalerkinMatrix, GalerkinVector, SpectralSemigroup};
