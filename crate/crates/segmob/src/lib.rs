//! Mobility segregation analytics.
//!
//! Turns raw stay-point trajectories, a socioeconomic (SES) map and a daily
//! NPI stringency series into stratification matrices, assortativity time
//! series, residual-isolation scores, per-user mobility entropies and
//! restriction-impact regressions. A seeded synthetic-city generator with
//! analytic oracles backs the test suites and provides runnable demo data.

pub mod config;
pub mod entropy;
pub mod error;
pub mod filter;
pub mod inference;
pub mod ingest;
pub mod pipeline;
pub mod segmentation;
pub mod spatial;
pub mod stats;
pub mod stratify;
pub mod synth;

pub use config::RunConfig;
pub use error::{Error, Result};
