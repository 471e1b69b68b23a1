//! Experiment harness for the dual-branch federated traffic forecaster:
//! configuration, dataset files, the federated training loop, ablations,
//! sweeps and report emission.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod experiment;
pub mod io;
pub mod report;

pub use config::{ExperimentConfig, Mode};
pub use error::{LabError, Result};
pub use experiment::{prepare_data, run_ablation, run_federated_experiment, Dataset, ReportBundle, RunFailure, RunOptions};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "FEDDIS_OUT";

/// Output root: `explicit`, else `$FEDDIS_OUT`, else `./runs`.
pub fn output_root(explicit: Option<&std::path::Path>) -> std::path::PathBuf {
    explicit
        .map(std::path::Path::to_path_buf)
        .or_else(|| std::env::var_os(OUT_ENV).map(Into::into))
        .unwrap_or_else(|| "runs".into())
}
