//! Synthetic cohorts, the leave-one-slide-out experiment grid and its reports.

mod experiment;
pub mod report;
mod synth;

pub use experiment::{
    cell_configs, cell_dir, derive_seed, gallery_for, run_experiment, train_cell, CellError, CellMetrics,
    ExperimentConfig, ExperimentOutcome, ExperimentVariant, Objective, Stream,
};
pub use report::{collect_cells, write_summary};
pub use synth::{generate_synthetic, SynthConfig};
