//! Bayesian spatial regression for areal counts with a localised conditional
//! autoregressive (LCAR) prior whose neighbourhood matrix is itself random.

pub mod diagnostics;
pub mod elicitation;
pub mod error;
pub mod graph;
pub mod io;
pub mod model;
pub mod precision;
pub mod rng;
pub mod simgen;
pub mod sampler;
pub mod stats;
pub mod workflow;

pub use error::{Error, Result};
