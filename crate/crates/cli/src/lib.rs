//! Command-line experiment driver: model building, seeded replicated runs of
//! every sampler and estimator, and summary comparison.

pub mod compare;
pub mod config;
pub mod run;
