//! Theta Euler–Maruyama simulation and coupled multilevel Monte Carlo for
//! stochastic delay differential equations with small noise.

pub mod analysis;
pub mod cli;
pub mod coupling;
pub mod error;
pub mod mlmc;
pub mod model;
pub mod rng;
pub mod scheme;
pub mod stats;

pub use error::{Error, Result};
