//! Experiment runner for the Berezin quantization library: configuration,
//! acceptance checks, JSON reports, and rendering.

pub mod config;
pub mod render;
pub mod report;
pub mod run;
pub mod suite;
