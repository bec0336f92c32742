//! The forecaster and its inputs and outputs.

pub mod config;
pub mod distribution;
pub mod forecaster;
pub mod input;

pub use config::{Ablation, ModelConfig, ModelDims, Variant};
pub use distribution::{ForecastDistribution, GaussianStep, PointMode};
pub use forecaster::{distributions, DecodeModes, Forecaster, ForwardOutput, CORR_LIMIT};
pub use input::{prepare_sample, Batch, Sample, MERGED_FEATURES, TEMPORAL_FEATURES};

#[cfg(test)]
mod tests;
