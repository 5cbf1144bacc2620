//! Balancing weights for causal effect estimation.
//!
//! Weights are fit by minimizing dual objectives of convex weight problems,
//! checked against direct primal solves, and fed into weighting and augmented
//! estimators with Wald intervals. Numerical code is generic over [`Scalar`]
//! (`f32` or `f64`); the aliases at the crate root fix `f64`.

pub mod cli;
pub mod dataset;
pub mod dual;
pub mod error;
pub mod estimators;
pub mod imbalance;
pub mod io;
pub mod kernel;
pub mod linalg;
pub mod scalar;
pub mod serde_util;
pub mod simlab;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type ObservationTable = dataset::ObservationTable<f64>;
pub type FeatureMatrix = dataset::FeatureMatrix<f64>;
pub type Matrix = linalg::Matrix<f64>;
pub type WeightVector = imbalance::WeightVector<f64>;
pub type BalanceTarget = imbalance::BalanceTarget<f64>;
pub type DualSolution = dual::DualSolution<f64>;
