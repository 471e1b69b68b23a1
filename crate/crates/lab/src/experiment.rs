//! The federated training loop and its variants.

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use feddis_core::data::{
    generate_synthetic, make_windows, partition_contiguous, partition_from_assignment, shuffled_indices,
    ClientPartition, NormStats, SplitWindows, TrafficSeries, WindowSet,
};
use feddis_core::init::{derive_seed, rng};
use feddis_core::metrics::{compute_metrics, weighted_metrics, Metrics};
use feddis_core::model::DualBranchModel;
use feddis_core::params::{role_of, ParamSet, Role};
use feddis_core::protocol::{client_local_round, server_round, ClientState, ClientUpdate, ServerPayload};
use feddis_core::wire;
use serde::Serialize;

use crate::checkpoint;
use crate::config::{variant_config, ExperimentConfig, VARIANTS};
use crate::error::{LabError, Result};
use crate::io::{load_dataset, read_partition_file, DatasetFormat};

/// One client's data, normalized with its own training statistics.
#[derive(Clone, Debug)]
pub struct ClientData {
    pub partition: ClientPartition,
    pub stats: NormStats,
    /// Data units.
    pub raw: SplitWindows,
    pub normalized: SplitWindows,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub series: TrafficSeries,
    pub clients: Vec<ClientData>,
}

impl Dataset {
    pub fn from_partitions(series: TrafficSeries, partitions: Vec<ClientPartition>, cfg: &ExperimentConfig) -> Result<Self> {
        let clients = partitions
            .into_iter()
            .map(|partition| {
                let raw = make_windows(&partition, cfg.input_len, cfg.horizon, cfg.splits())?;
                if raw.train.is_empty() {
                    return Err(LabError::Config(format!(
                        "client {} has no training windows",
                        partition.client_id
                    )));
                }
                let stats = NormStats::fit_train(&raw)?;
                let normalized = raw.normalized(&stats);
                Ok(ClientData {
                    partition,
                    stats,
                    raw,
                    normalized,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { series, clients })
    }
}

/// Loads or generates the series named by `cfg.dataset` and partitions it.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<Dataset> {
    let series = if cfg.is_synthetic() {
        generate_synthetic(&cfg.synthetic(), cfg.synth_seed.unwrap_or(cfg.seed))?.series
    } else {
        let path = Path::new(&cfg.dataset);
        load_dataset(path, DatasetFormat::from_path(path)?, cfg.interval_minutes)?
    };
    let partitions = match &cfg.partition_file {
        Some(file) => {
            let assignment = read_partition_file(Path::new(file))?;
            if assignment.len() != cfg.clients {
                return Err(LabError::Config(format!(
                    "partition file lists {} clients, config asks for {}",
                    assignment.len(),
                    cfg.clients
                )));
            }
            partition_from_assignment(&series, &assignment)?
        }
        None => partition_contiguous(&series, cfg.clients)?,
    };
    Dataset::from_partitions(series, partitions, cfg)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// Metrics of one split at one round, per client and sample-weighted.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRecord {
    pub round: usize,
    pub split: Split,
    pub macro_metrics: Metrics,
    pub clients: Vec<Metrics>,
    /// Windows scored per client; the macro weights.
    pub windows: Vec<usize>,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RoundLog {
    pub round: usize,
    /// Per-client mean training loss over the round's batches.
    pub train_loss: Vec<f64>,
    pub train_mae: Vec<f64>,
    pub train_mi: Vec<f64>,
    pub upload_bytes: usize,
    pub seconds: f64,
}

impl RoundLog {
    pub fn mean_train_loss(&self) -> f64 {
        self.train_loss.iter().sum::<f64>() / self.train_loss.len().max(1) as f64
    }
}

#[derive(Clone, Debug)]
pub struct ReportBundle {
    pub config: ExperimentConfig,
    /// Validation every round, then test at the selected round.
    pub records: Vec<MetricRecord>,
    pub rounds: Vec<RoundLog>,
    /// Round whose parameters were tested (0 = untrained).
    pub best_round: usize,
    pub total_seconds: f64,
    pub checkpoints: Vec<PathBuf>,
}

impl ReportBundle {
    fn new(config: &ExperimentConfig) -> Self {
        Self {
            config: config.clone(),
            records: Vec::new(),
            rounds: Vec::new(),
            best_round: 0,
            total_seconds: 0.0,
            checkpoints: Vec::new(),
        }
    }

    pub fn test(&self) -> Option<&MetricRecord> {
        self.records.iter().find(|r| r.split == Split::Test)
    }

    pub fn validation(&self) -> impl Iterator<Item = &MetricRecord> {
        self.records.iter().filter(|r| r.split == Split::Val)
    }
}

/// A run that stopped early, with everything logged up to the failure.
#[derive(Debug)]
pub struct RunFailure {
    pub error: LabError,
    pub partial: Box<ReportBundle>,
}

impl fmt::Display for RunFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "run {:?} failed: {}", self.partial.config.name, self.error)
    }
}

impl std::error::Error for RunFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

/// Hooks into the per-round exchange, used by tests to observe traffic.
pub trait RoundObserver {
    fn on_upload(&mut self, _update: &ClientUpdate, _bytes: &[u8]) {}
    fn on_payload(&mut self, _payload: &ServerPayload) {}
}

impl RoundObserver for () {}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Directory for per-round parameter archives (written when
    /// `config.checkpoints` is set).
    pub checkpoint_dir: Option<PathBuf>,
}

pub fn run_federated_experiment(
    cfg: &ExperimentConfig,
    data: &Dataset,
    opts: &RunOptions,
) -> std::result::Result<ReportBundle, RunFailure> {
    run_observed(cfg, data, opts, &mut ())
}

pub fn run_observed(
    cfg: &ExperimentConfig,
    data: &Dataset,
    opts: &RunOptions,
    observer: &mut dyn RoundObserver,
) -> std::result::Result<ReportBundle, RunFailure> {
    let mut bundle = ReportBundle::new(cfg);
    let start = Instant::now();
    let outcome = drive(cfg, data, opts, observer, &mut bundle);
    bundle.total_seconds = start.elapsed().as_secs_f64();
    match outcome {
        Ok(()) => Ok(bundle),
        Err(error) => Err(RunFailure {
            error,
            partial: Box::new(bundle),
        }),
    }
}

fn drive(
    cfg: &ExperimentConfig,
    data: &Dataset,
    opts: &RunOptions,
    observer: &mut dyn RoundObserver,
    bundle: &mut ReportBundle,
) -> Result<()> {
    cfg.validate()?;
    if data.clients.len() != cfg.clients {
        return Err(LabError::Config(format!(
            "dataset has {} clients, config asks for {}",
            data.clients.len(),
            cfg.clients
        )));
    }
    let shared_seed = derive_seed(cfg.seed, "shared", 0);
    let mut clients: Vec<ClientState> = data
        .clients
        .iter()
        .enumerate()
        .map(|(m, d)| {
            let model = DualBranchModel::init(
                cfg.model_config(d.partition.num_nodes()),
                shared_seed,
                derive_seed(cfg.seed, "client", m as u64),
            )?;
            Ok(ClientState::new(m, model, cfg.lr, d.normalized.train.len()))
        })
        .collect::<Result<_>>()?;
    let probes: Vec<Vec<Vec<f64>>> = data.clients.iter().map(raw_probes).collect();
    let server = cfg.server_config();

    if cfg.rounds == 0 {
        let t = Instant::now();
        let models: Vec<&DualBranchModel> = clients.iter().map(|c| &c.model).collect();
        for split in [Split::Val, Split::Test] {
            let mut rec = evaluate(&models, data, split, cfg)?;
            rec.seconds = t.elapsed().as_secs_f64();
            bundle.records.push(rec);
        }
        return Ok(());
    }

    let mut best: Option<(f64, Vec<ParamSet>)> = None;
    for round in 1..=cfg.rounds {
        let t = Instant::now();
        let mut log = RoundLog {
            round,
            train_loss: Vec::new(),
            train_mae: Vec::new(),
            train_mi: Vec::new(),
            upload_bytes: 0,
            seconds: 0.0,
        };
        let mut updates = Vec::with_capacity(clients.len());
        for (m, state) in clients.iter_mut().enumerate() {
            let train = &data.clients[m].normalized.train;
            let (update, stats) = client_local_round(
                state,
                None,
                round,
                cfg.local_epochs,
                |epoch| {
                    let label = derive_seed(cfg.seed, "shuffle", m as u64);
                    let mut r = rng(derive_seed(label, "epoch", ((round - 1) * cfg.local_epochs + epoch) as u64));
                    train.batches(&shuffled_indices(train.len(), &mut r), cfg.batch_size)
                },
                cfg.prox_mu(),
            )
            .map_err(|source| LabError::Round { round, source })?;
            if !(stats.loss.is_finite()) {
                return Err(LabError::Round {
                    round,
                    source: feddis_core::Error::NonFinite("training loss"),
                });
            }
            log.train_loss.push(stats.loss);
            log.train_mae.push(stats.mae);
            log.train_mi.push(stats.mi);

            let bytes = wire::encode_update(&update)?;
            let personal: Vec<&str> = state
                .model
                .params()
                .names()
                .filter(|n| role_of(n) == Role::Personal)
                .collect();
            let raw: Vec<&[f64]> = probes[m].iter().map(Vec::as_slice).collect();
            wire::check_upload(&bytes, &personal, &raw).map_err(|source| LabError::Round { round, source })?;
            observer.on_upload(&update, &bytes);
            log.upload_bytes += bytes.len();
            updates.push(wire::decode_update(&bytes)?);
        }

        let payloads = server_round(&server, &updates, clients.len()).map_err(|source| LabError::Round { round, source })?;
        for (state, payload) in clients.iter_mut().zip(&payloads) {
            let received = wire::decode_payload(&wire::encode_payload(payload)?)?;
            observer.on_payload(&received);
            state.install(&received).map_err(|source| LabError::Round { round, source })?;
        }

        if cfg.checkpoints {
            if let Some(dir) = &opts.checkpoint_dir {
                let round_dir = dir.join(format!("round_{round:04}"));
                std::fs::create_dir_all(&round_dir).map_err(|e| LabError::io(&round_dir, e))?;
                for state in &clients {
                    let path = round_dir.join(format!("client_{}.fdck", state.client_id));
                    checkpoint::save(&path, state.model.params())?;
                    bundle.checkpoints.push(path);
                }
            }
        }

        let models: Vec<&DualBranchModel> = clients.iter().map(|c| &c.model).collect();
        let mut rec = evaluate(&models, data, Split::Val, cfg)?;
        rec.round = round;
        let mae = rec.macro_metrics.mae;
        if !mae.is_finite() {
            return Err(LabError::Round {
                round,
                source: feddis_core::Error::NonFinite("validation MAE"),
            });
        }
        if best.as_ref().map_or(true, |(b, _)| mae < *b) {
            bundle.best_round = round;
            best = Some((mae, clients.iter().map(|c| c.model.params().clone()).collect()));
        }
        log.seconds = t.elapsed().as_secs_f64();
        rec.seconds = log.seconds;
        log::info!(
            "{} round {round}/{}: train loss {:.4}, val MAE {:.4} ({:.1}s)",
            cfg.name,
            cfg.rounds,
            log.mean_train_loss(),
            mae,
            log.seconds
        );
        bundle.records.push(rec);
        bundle.rounds.push(log);
    }

    let t = Instant::now();
    let (_, snapshot) = best.expect("at least one round");
    for (state, params) in clients.iter_mut().zip(snapshot) {
        *state.model.params_mut() = params;
    }
    let models: Vec<&DualBranchModel> = clients.iter().map(|c| &c.model).collect();
    let mut rec = evaluate(&models, data, Split::Test, cfg)?;
    rec.round = bundle.best_round;
    rec.seconds = t.elapsed().as_secs_f64();
    bundle.records.push(rec);
    Ok(())
}

/// Raw input columns of a few training windows, in data units and
/// normalized, that must never appear in an upload.
fn raw_probes(d: &ClientData) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for set in [&d.raw.train, &d.normalized.train] {
        if set.is_empty() {
            continue;
        }
        for start in [0, set.len() / 2, set.len() - 1] {
            for node in [0, set.num_nodes() - 1] {
                out.push(window_column(set, start, node));
            }
        }
    }
    out
}

fn window_column(set: &WindowSet, start: usize, node: usize) -> Vec<f64> {
    (0..set.input_len()).map(|t| set.series().get(start + t, node)).collect()
}

/// Scores every client on `split` in data units.
pub fn evaluate(models: &[&DualBranchModel], data: &Dataset, split: Split, cfg: &ExperimentConfig) -> Result<MetricRecord> {
    let mut clients = Vec::with_capacity(models.len());
    let mut windows = Vec::with_capacity(models.len());
    for (model, d) in models.iter().zip(&data.clients) {
        let (norm, raw) = match split {
            Split::Val => (&d.normalized.val, &d.raw.val),
            Split::Test => (&d.normalized.test, &d.raw.test),
        };
        windows.push(norm.len());
        if norm.is_empty() {
            clients.push(Metrics {
                mae: f64::NAN,
                rmse: f64::NAN,
                mape: None,
            });
            continue;
        }
        let (mut pred, mut truth) = (Vec::new(), Vec::new());
        for (nb, rb) in norm.all_batches(cfg.batch_size).iter().zip(raw.all_batches(cfg.batch_size)) {
            pred.extend(d.stats.inverse(&model.predict(nb)?).into_vec());
            truth.extend(rb.targets.into_vec());
        }
        let cols = cfg.horizon;
        let pred = feddis_core::Matrix::from_vec(pred.len() / cols, cols, pred)?;
        let truth = feddis_core::Matrix::from_vec(truth.len() / cols, cols, truth)?;
        clients.push(compute_metrics(&pred, &truth, cfg.mape_threshold)?);
    }
    let parts: Vec<(Metrics, f64)> = clients
        .iter()
        .zip(&windows)
        .filter(|(_, &w)| w > 0)
        .map(|(m, &w)| (*m, w as f64))
        .collect();
    if parts.is_empty() {
        return Err(LabError::Config(format!("no client has {split} windows")));
    }
    Ok(MetricRecord {
        round: 0,
        split,
        macro_metrics: weighted_metrics(&parts)?,
        clients,
        windows,
        seconds: 0.0,
    })
}

/// Runs the five ablation variants of `base` on the same data and seed.
pub fn run_ablation(
    base: &ExperimentConfig,
    data: &Dataset,
    opts: &RunOptions,
) -> std::result::Result<Vec<(&'static str, ReportBundle)>, RunFailure> {
    let mut out = Vec::with_capacity(VARIANTS.len());
    for variant in VARIANTS {
        let cfg = variant_config(base, variant).map_err(|error| RunFailure {
            error,
            partial: Box::new(ReportBundle::new(base)),
        })?;
        let opts = RunOptions {
            checkpoint_dir: opts.checkpoint_dir.as_ref().map(|d| d.join(variant)),
        };
        out.push((variant, run_federated_experiment(&cfg, data, &opts)?));
    }
    Ok(out)
}

/// Default sweep grids: global bank size, personal bank size, top-K.
pub const SWEEP_GLOBAL_PATTERNS: [usize; 4] = [8, 16, 24, 32];
pub const SWEEP_PERSONAL_PATTERNS: [usize; 4] = [64, 96, 128, 160];
pub const SWEEP_TOP_K: [usize; 4] = [2, 3, 4, 5];

/// Default grid for a sweepable field, if it has one.
pub fn default_grid(field: &str) -> Option<&'static [usize]> {
    match field {
        "global_patterns" => Some(&SWEEP_GLOBAL_PATTERNS),
        "personal_patterns" => Some(&SWEEP_PERSONAL_PATTERNS),
        "top_k" => Some(&SWEEP_TOP_K),
        _ => None,
    }
}

/// One run per value of `field`; every other setting comes from `base`.
pub fn run_sweep(
    base: &ExperimentConfig,
    data: &Dataset,
    field: &str,
    values: &[String],
) -> std::result::Result<Vec<(String, ReportBundle)>, RunFailure> {
    let mut out = Vec::with_capacity(values.len());
    for value in values {
        let cfg = sweep_point(base, field, value).map_err(|error| RunFailure {
            error,
            partial: Box::new(ReportBundle::new(base)),
        })?;
        out.push((format!("{field}={value}"), run_federated_experiment(&cfg, data, &RunOptions::default())?));
    }
    Ok(out)
}

fn sweep_point(base: &ExperimentConfig, field: &str, value: &str) -> Result<ExperimentConfig> {
    let mut cfg = base.with_overrides(&[format!("{field}={value}")])?;
    cfg.name = format!("{}-{field}-{value}", base.name);
    Ok(cfg)
}
