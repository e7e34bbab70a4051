pub mod curriculum;
pub mod embedding;
pub mod error;
pub mod evalharness;
pub mod generator;
pub mod identity;
pub mod kmeans;
pub mod quantizer;
pub mod reward;
pub mod sidmetrics;

pub use error::{Error, Result};
