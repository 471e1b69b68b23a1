use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use feddis_core::data::generate_synthetic;
use feddis_lab::experiment::{default_grid, run_sweep, RunFailure};
use feddis_lab::io::{write_csv, write_matrix_binary, write_partition_file, DatasetFormat};
use feddis_lab::report::{emit_comparison, emit_report};
use feddis_lab::{output_root, prepare_data, run_ablation, run_federated_experiment, ExperimentConfig, RunOptions};

#[derive(Parser)]
#[command(name = "feddis", version, about = "Federated dual-branch traffic forecasting experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML config; keys are the ExperimentConfig field names.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set rounds=10`. Repeatable.
    #[arg(short = 's', long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output root (default: $FEDDIS_OUT, else ./runs).
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one federated run and write its report.
    Run(Common),
    /// Run the five ablation variants of one config.
    Ablate(Common),
    /// Vary one config field over a list of values.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Field to vary: global_patterns, personal_patterns, top_k, or any
        /// other config key when --values is given.
        #[arg(long)]
        field: String,
        /// Comma-separated values (defaults exist for the three bank fields).
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
    },
    /// Write the synthetic dataset described by the config.
    Synth {
        /// TOML config; only the `synth_*`, `clients` and `seed` keys matter.
        #[arg(short, long)]
        config: Option<PathBuf>,
        /// Override a config field. Repeatable.
        #[arg(short = 's', long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Destination; `.csv` or `.bin`.
        #[arg(short, long)]
        out: PathBuf,
        /// Also write the generating node assignment here.
        #[arg(long)]
        partition: Option<PathBuf>,
    },
}

fn load(common: &Common) -> anyhow::Result<(ExperimentConfig, PathBuf)> {
    let cfg = ExperimentConfig::load(common.config.as_deref(), &common.overrides)?;
    let dir = output_root(common.out.as_deref()).join(&cfg.name);
    Ok((cfg, dir))
}

fn checkpoint_opts(dir: &Path) -> RunOptions {
    RunOptions {
        checkpoint_dir: Some(dir.join("checkpoints")),
    }
}

/// Writes whatever a failed run logged before surfacing its error.
fn salvage(failure: RunFailure, dir: &Path) -> anyhow::Error {
    let partial = dir.join("partial");
    match emit_report(&failure.partial, &partial) {
        Ok(_) => log::warn!("partial report written to {}", partial.display()),
        Err(e) => log::warn!("could not write partial report: {e}"),
    }
    failure.into()
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Run(common) => {
            let (cfg, dir) = load(&common)?;
            let data = prepare_data(&cfg)?;
            let bundle = run_federated_experiment(&cfg, &data, &checkpoint_opts(&dir)).map_err(|f| salvage(f, &dir))?;
            emit_report(&bundle, &dir)?;
            if let Some(t) = bundle.test() {
                let m = t.macro_metrics;
                println!("{}: test MAE {:.4}, RMSE {:.4} (round {})", cfg.name, m.mae, m.rmse, bundle.best_round);
            }
            println!("report: {}", dir.display());
        }
        Command::Ablate(common) => {
            let (cfg, dir) = load(&common)?;
            let dir = dir.join("ablation");
            let data = prepare_data(&cfg)?;
            let runs = run_ablation(&cfg, &data, &RunOptions::default()).map_err(|f| salvage(f, &dir))?;
            let runs: Vec<(String, _)> = runs.into_iter().map(|(v, b)| (v.to_string(), b)).collect();
            emit_comparison(&runs, &dir)?;
            println!("report: {}", dir.display());
        }
        Command::Sweep { common, field, values } => {
            let (cfg, dir) = load(&common)?;
            let values = if values.is_empty() {
                match default_grid(&field) {
                    Some(grid) => grid.iter().map(|v| v.to_string()).collect(),
                    None => bail!("no default grid for {field:?}; pass --values"),
                }
            } else {
                values
            };
            let dir = dir.join(format!("sweep-{field}"));
            let data = prepare_data(&cfg)?;
            let runs = run_sweep(&cfg, &data, &field, &values).map_err(|f| salvage(f, &dir))?;
            emit_comparison(&runs, &dir)?;
            println!("report: {}", dir.display());
        }
        Command::Synth {
            config,
            overrides,
            out,
            partition,
        } => {
            let cfg = ExperimentConfig::load(config.as_deref(), &overrides)?;
            let data = generate_synthetic(&cfg.synthetic(), cfg.synth_seed.unwrap_or(cfg.seed))?;
            match DatasetFormat::from_path(&out)? {
                DatasetFormat::Csv => write_csv(&out, &data.series)?,
                DatasetFormat::MatrixBinary => write_matrix_binary(&out, &data.series)?,
            }
            if let Some(p) = partition {
                write_partition_file(&p, &data.assignment).with_context(|| format!("writing {}", p.display()))?;
            }
            println!(
                "wrote {} steps x {} nodes to {}",
                data.series.num_steps(),
                data.series.num_nodes(),
                out.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
