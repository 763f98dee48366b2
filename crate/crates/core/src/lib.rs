//! Bayesian smoothing of small-area mortality rates with age-time and
//! age-space interaction models.

pub mod confounding;
pub mod data;
pub mod error;
pub mod graph;
pub mod inference;
pub mod marginal;
pub mod model;
pub mod oracle;
pub mod products;
pub mod structure;

pub use error::{Error, Result};
