//! Day-ahead to two-week forecasting of zonal PV and wind generation.

pub mod dataset;
pub mod error;
pub mod evaluate;
pub mod ingest;
pub mod knn;
pub mod numeric;
pub mod pipeline;
pub mod preprocess;
pub mod qrf;
pub mod spline;
mod svg;
pub mod synth;
pub mod tune;
pub mod types;

pub use error::{Error, Result};
