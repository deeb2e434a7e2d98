//! GP-VAE: a variational autoencoder for multivariate time series with
//! missing values, whose latent trajectories carry a Gaussian-process prior
//! and whose approximate posterior has a tridiagonal precision per latent
//! dimension.
//!
//! The crate also provides the classical imputation baselines, generators
//! for several missingness mechanisms, dataset provisioning and the
//! evaluation metrics used to compare imputers.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod baselines;
pub mod binio;
pub mod data;
pub mod error;
pub mod eval;
pub mod kernels;
pub mod missingness;
pub mod model;
pub mod nets;
pub mod rng;
pub mod structured_gaussian;

pub use error::{Error, Result};
