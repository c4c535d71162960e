//! jepalab: a desk-scale laboratory for image joint-embedding predictive
//! architectures.
//!
//! The crate trains the baseline latent-prediction model and its
//! position-conditioned variant on CPU-sized data, and ships the
//! representation-quality metrics (soft effective rank, LDA effective rank)
//! and the frozen-backbone linear probe used to evaluate them.

pub mod error;
pub mod numerics;

pub mod data;
pub mod masking;

pub mod conditioning;
pub mod model;

pub mod checkpoint;
pub mod trainer;

pub mod metrics;
pub mod probe;

pub mod cli;
pub mod config;

pub use error::{Error, Result};
