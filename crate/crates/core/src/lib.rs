//! Subseasonal global forecasting with a climatology-aware vision transformer.

pub mod ablation;
pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod embed;
pub mod ensemble;
pub mod error;
pub mod grid;
pub mod metrics;
pub mod model;
pub mod parallel;
pub mod params;
pub mod train;

pub use error::{Error, ErrorClass, Result};
