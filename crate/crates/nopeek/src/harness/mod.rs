//! Dataset ingestion, experiment orchestration, sweeps, and reports.

pub mod dataset;
pub mod experiment;
pub mod ppm;
pub mod report;

pub use dataset::{gen_synthetic, load_cifar10_bin, load_dataset, save_dataset, Dataset};
pub use experiment::{
    linear_probe, run_experiment, sweep_alpha, write_sweep_csv, ExperimentOptions,
    ExperimentOutcome, ReportRow, SweepRow,
};
pub use ppm::{dump_activation_images, row_to_ppm};
pub use report::{describe_report_dir, write_experiment};
