//! Density-based out-of-distribution detection.
//!
//! Feature vectors are modeled as class-conditional Gaussians with a shared
//! covariance. The crate estimates those Gaussians (batch, shrunk and
//! streaming), scores test points by Mahalanobis and relative Mahalanobis
//! distance alongside common baselines, evaluates AUROC and FPR at 95% TPR,
//! and trains a small network whose loss rewards Gaussian-shaped features.

pub mod embedding;
pub mod error;
pub mod experiment;
pub mod linalg;
pub mod loss;
pub mod metrics;
pub mod scorers;
pub mod stats;
pub mod trainer;

pub use embedding::{read_csv, read_emb, write_emb, EmbeddingSet};
pub use error::{Error, Result};
pub use stats::{GaussianStats, OnlineStatsState, ShrinkageMode};
