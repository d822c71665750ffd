//! Causal multiple-instance survival modelling over whole-slide patch graphs.

pub mod audit;
pub mod autodiff;
pub mod cafd;
pub mod checkpoint;
pub mod cli;
pub mod cohort;
pub mod error;
pub mod gt;
pub mod nn;
pub mod plot;
pub mod report;
pub mod rng;
pub mod sampler;
pub mod survival;
pub mod trainer;

pub use error::{Error, Result};
