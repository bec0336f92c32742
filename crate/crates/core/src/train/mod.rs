//! Losses, metrics, the training loop and density export.

pub mod heatmap;
pub mod loss;
pub mod metrics;
pub mod trainer;

pub use heatmap::{density_grid, grid_mass, write_heatmap_csv, GridSpec, HeatmapCell};
pub use loss::{loss_on_tape, mse_loss, nll_bivariate, LossReport, LossWeights, PROB_FLOOR};
pub use metrics::{weighted_sum, ClassMetrics, HorizonRmse, MetricAccumulator, MetricReport, CLASS_WEIGHTS};
pub use trainer::{evaluate, validation_loss, EpochRecord, TrainConfig, Trainer};

#[cfg(test)]
mod tests;
