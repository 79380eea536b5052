//! Deterministic moment propagation for Bayesian neural networks.
//!
//! A trained network plus a Gaussian weight posterior is pushed through
//! layer by layer, carrying a mean and a (diagonal or full) covariance. The
//! result feeds a probit classification head or a Gaussian regression head.
//! A Monte Carlo oracle, calibration metrics and input-sensitivity tools sit
//! on top.

pub mod analysis;
pub mod error;
pub mod exec;
pub mod fit;
pub mod grad;
pub mod heads;
pub mod model;
pub mod numerics;
pub mod oracle;
pub mod posterior;
pub mod propagate;

pub use error::{Error, Result};
pub use exec::Execution;
pub use numerics::{Matrix, SeededRng, Vector};
pub use posterior::{LayerPosterior, PosteriorSpec};
