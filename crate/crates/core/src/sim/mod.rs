//! Simulation designs, evaluation metrics and the Monte Carlo harness.

pub mod bench;
pub mod generate;
pub mod metrics;

pub use bench::{run_design, run_grid, BenchGrid, BenchSummary, CellSummary, DesignBlock, Method, RepRecord};
pub use generate::{generate_dataset, generate_with_scale, Generator, RadialSampler, SimDesign, SimSample};
pub use metrics::{aligned_mean_rse, hungarian, rand_index, rse, variance_rse};
