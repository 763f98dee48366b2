//! Mortality data: loading, aggregation, simulation and export.

pub mod crude;
pub mod dataset;
pub mod export;
pub mod simulate;

pub use crude::{crude_rate, crude_rates, parse_grouping, CrudeRateRow, GroupKey};
pub use dataset::*;
pub use simulate::{simulate_dataset, SimulationInput, TruthRecord};
