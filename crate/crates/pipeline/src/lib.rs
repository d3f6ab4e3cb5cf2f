//! Datasets, synthetic scenes, metrics and the end-to-end run.

pub mod config;
pub mod dataset;
pub mod fitting;
pub mod frontend;
pub mod metrics;
pub mod run;
pub mod synthetic;
