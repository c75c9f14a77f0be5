//! Fisher–Shannon analysis of wind speed measured by station networks.
//!
//! The crate covers the whole chain from raw sub-hourly measurements to maps:
//!
//! - [`ingest`]: station tables, raw measurement files, daily means and gap filling
//! - [`stl`]: loess-based seasonal/trend decomposition with a calendar-mean seasonal
//! - [`kde`]: Gaussian kernel density estimates and bandwidth rules
//! - [`infometrics`]: Fisher information measure, Shannon entropy and entropy power
//! - [`distributions`]: Weibull, Gamma and GEV densities, maximum likelihood fits and
//!   Kullback–Leibler ranking
//! - [`spatial`]: kNN regression maps, shuffled-station structure test and covariate
//!   correlation
//! - [`fixtures`]: deterministic synthetic station networks
//! - [`cli`]: the pipeline driver behind the `windfs` binary
//!
//! Runnable walkthroughs of each capability live in the crate's `examples/`
//! directory (`cargo run --release --example <name>`).

pub mod cli;
pub mod distributions;
pub mod error;
pub mod fileio;
pub mod fixtures;
pub mod infometrics;
pub mod ingest;
pub mod kde;
pub mod optim;
pub mod quadrature;
pub mod spatial;
pub mod stats;
pub mod stl;

pub use error::{Error, Result};
