//! Weight-trajectory forecasting for accelerating neural-network training.
//!
//! A small "introspection" network learns how individual weights evolve
//! during one training run and then forecasts the future values of every
//! weight of another network mid-training, which are written back in place.

pub mod analysis;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod history;
pub mod introspection;
pub mod nn;
pub mod optim;
pub mod predictors;
pub mod rng;

pub use error::{Error, Result};
