//! Mixing treated and control samples to estimate the ATT under weak overlap.

pub mod balancing;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod estimators;
pub mod inference;
pub mod propensity;
pub mod resample;
pub mod rng;
pub mod simulation;

pub use error::{Error, Result};
