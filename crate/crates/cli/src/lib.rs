//! Experiment driver: configuration, on-disk containers, training runs,
//! evaluation, plotting data and the invariant suite.

pub mod app;
pub mod checkpoint;
pub mod config;
pub mod container;
pub mod metrics;
pub mod plot;
pub mod run;
pub mod verify;
