//! Longitudinal variational autoencoder with an additive Gaussian-process
//! prior over auxiliary covariates.

pub mod baselines;
pub mod benchmark;
pub mod checkpoint;
pub mod classifier;
pub mod covariates;
pub mod datagen;
pub mod error;
pub mod kernels;
pub mod kl;
pub mod linalg;
pub mod metrics;
pub mod nnet;
pub mod predictive;
pub mod trainer;

pub use covariates::{CovariateKind, CovariateMatrix, CovariateSchema, InstanceBatch, Points, Rows};
pub use error::{LvaeError, Result};
pub use kernels::{AdditivePrior, KernelTerm, TermSpec};
