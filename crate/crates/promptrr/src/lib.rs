//! Training, inference and file formats around `promptrr-core`.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod driver;
pub mod infer;
pub mod ppm;
