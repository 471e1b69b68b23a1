//! Experiment configuration: a flat TOML document whose keys are the field
//! names of [`ExperimentConfig`], plus `key=value` overrides.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use feddis_core::data::{Splits, SyntheticConfig};
use feddis_core::disentangle::BankInit;
use feddis_core::model::ModelConfig;
use feddis_core::protocol::{BankPolicy, CpsConfig, Fusion, ServerConfig};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// Value of `dataset` that selects the built-in generator.
pub const SYNTHETIC: &str = "synthetic";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Feddis,
    Fedavg,
    Fedprox,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Feddis => "feddis",
            Mode::Fedavg => "fedavg",
            Mode::Fedprox => "fedprox",
        })
    }
}

impl FromStr for Mode {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "feddis" => Ok(Mode::Feddis),
            "fedavg" => Ok(Mode::Fedavg),
            "fedprox" => Ok(Mode::Fedprox),
            other => Err(LabError::Config(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Run name, used as the output sub-directory.
    pub name: String,
    /// `"synthetic"` or a path to a `.csv` / `.bin` series.
    pub dataset: String,
    /// Optional node-index file, one client per line.
    pub partition_file: Option<String>,
    pub interval_minutes: u32,

    pub synth_nodes_per_client: usize,
    pub synth_steps: usize,
    pub synth_prototypes: usize,
    pub synth_amplitude: f64,
    pub synth_noise: f64,
    /// Generator seed; `seed` when absent.
    pub synth_seed: Option<u64>,

    /// Number of clients `M`.
    pub clients: usize,
    /// Input window `T`.
    pub input_len: usize,
    /// Forecast horizon `T'`.
    pub horizon: usize,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,

    /// Communication rounds `R_f`.
    pub rounds: usize,
    /// Local epochs per round `R_l`.
    pub local_epochs: usize,
    pub lr: f64,
    pub batch_size: usize,

    pub hidden: usize,
    pub embed_dim: usize,
    pub layers: usize,
    /// Personalized bank size `B`.
    pub personal_patterns: usize,
    /// Global bank size `O`.
    pub global_patterns: usize,
    /// Personalized bank momentum `alpha`.
    pub momentum: f64,
    /// CLUB weight `lambda`.
    pub lambda: f64,
    pub bank_init: String,

    /// Pattern-sharing top-K.
    pub top_k: usize,
    /// Pattern-sharing similarity threshold `tau`.
    pub threshold: f64,
    pub include_self: bool,
    /// Fusion temperature `epsilon`.
    pub epsilon: f64,
    pub mode: Mode,
    /// Proximal weight `mu` (fedprox only).
    pub prox_mu: f64,

    pub no_cd: bool,
    pub no_gp: bool,
    pub no_wu: bool,
    pub no_cps: bool,

    pub seed: u64,
    pub mape_threshold: f64,
    /// Write one checkpoint archive per round.
    pub checkpoints: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            dataset: SYNTHETIC.into(),
            partition_file: None,
            interval_minutes: 5,
            synth_nodes_per_client: 10,
            synth_steps: 2880,
            synth_prototypes: 3,
            synth_amplitude: 6.0,
            synth_noise: 1.0,
            synth_seed: None,
            clients: 4,
            input_len: 12,
            horizon: 12,
            train_fraction: 0.6,
            val_fraction: 0.2,
            test_fraction: 0.2,
            rounds: 100,
            local_epochs: 1,
            lr: 0.005,
            batch_size: 64,
            hidden: 64,
            embed_dim: 10,
            layers: 2,
            personal_patterns: 128,
            global_patterns: 16,
            momentum: 0.5,
            lambda: 0.1,
            bank_init: BankInit::RandomPcaWhiten.name().into(),
            top_k: 3,
            threshold: 0.3,
            include_self: false,
            epsilon: 0.1,
            mode: Mode::Feddis,
            prox_mu: 0.01,
            no_cd: false,
            no_gp: false,
            no_wu: false,
            no_cps: false,
            seed: 0,
            mape_threshold: feddis_core::metrics::DEFAULT_MAPE_THRESHOLD,
            checkpoints: false,
        }
    }
}

impl ExperimentConfig {
    /// The desk-scale synthetic benchmark: 4 clients of 10 nodes over 2880
    /// steps, 30 rounds, with a narrow model so a run takes minutes on one
    /// core.
    pub fn synthetic_benchmark(seed: u64) -> Self {
        Self {
            name: "synthetic-benchmark".into(),
            rounds: 30,
            hidden: 8,
            embed_dim: 4,
            personal_patterns: 16,
            global_patterns: 8,
            seed,
            ..Self::default()
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| LabError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Reads `path` and applies `overrides` (each `key=value`, the value in
    /// TOML syntax; bare words are taken as strings).
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| LabError::io(p, e))?;
                text.parse::<toml::Table>()
                    .map_err(|e| LabError::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        Self::from_table(table, overrides)
    }

    /// This configuration with `overrides` applied.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let table = toml::Table::try_from(self).map_err(|e| LabError::Config(e.to_string()))?;
        Self::from_table(table, overrides)
    }

    fn from_table(mut table: toml::Table, overrides: &[String]) -> Result<Self> {
        for item in overrides {
            let (key, value) = parse_override(item)?;
            table.insert(key, value);
        }
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| LabError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(LabError::Config(msg));
        let positive = [
            ("clients", self.clients),
            ("input_len", self.input_len),
            ("horizon", self.horizon),
            ("batch_size", self.batch_size),
            ("hidden", self.hidden),
            ("embed_dim", self.embed_dim),
            ("layers", self.layers),
            ("personal_patterns", self.personal_patterns),
            ("global_patterns", self.global_patterns),
            ("top_k", self.top_k),
            ("interval_minutes", self.interval_minutes as usize),
        ];
        for (name, v) in positive {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if !(self.lr >= 0.0) {
            return bad(format!("lr {} must be non-negative", self.lr));
        }
        if !(self.epsilon > 0.0) {
            return bad(format!("epsilon {} must be positive", self.epsilon));
        }
        if !(-1.0..=1.0).contains(&self.threshold) {
            return bad(format!("threshold {} outside [-1, 1]", self.threshold));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1]", self.momentum));
        }
        if !(self.lambda >= 0.0) || !(self.prox_mu >= 0.0) {
            return bad("lambda and prox_mu must be non-negative".into());
        }
        if BankInit::parse(&self.bank_init).is_none() {
            let names: Vec<_> = BankInit::ALL.iter().map(|b| b.name()).collect();
            return bad(format!("bank_init {:?} is not one of {names:?}", self.bank_init));
        }
        self.splits().boundaries(100).map_err(|e| LabError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn splits(&self) -> Splits {
        Splits {
            train: self.train_fraction,
            val: self.val_fraction,
            test: self.test_fraction,
        }
    }

    pub fn is_synthetic(&self) -> bool {
        self.dataset == SYNTHETIC
    }

    pub fn synthetic(&self) -> SyntheticConfig {
        SyntheticConfig {
            clients: self.clients,
            nodes_per_client: self.synth_nodes_per_client,
            steps: self.synth_steps,
            shared_prototypes: self.synth_prototypes,
            client_amplitude: self.synth_amplitude,
            noise_std: self.synth_noise,
            ..SyntheticConfig::default()
        }
    }

    pub fn bank_init(&self) -> BankInit {
        BankInit::parse(&self.bank_init).expect("validated")
    }

    pub fn model_config(&self, nodes: usize) -> ModelConfig {
        ModelConfig {
            nodes,
            input_dim: 1,
            horizon: self.horizon,
            hidden: self.hidden,
            embed_dim: self.embed_dim,
            layers: self.layers,
            personal_patterns: self.personal_patterns,
            global_patterns: self.global_patterns,
            momentum: self.momentum,
            lambda: if self.no_cd { 0.0 } else { self.lambda },
            bank_init: self.bank_init(),
            personal_extractor: !self.no_cd,
        }
    }

    /// Server behaviour implied by the mode and the ablation flags.
    pub fn server_config(&self) -> ServerConfig {
        let cps = CpsConfig {
            top_k: self.top_k,
            threshold: self.threshold,
            include_self: self.include_self,
        };
        let (fusion, banks) = match self.mode {
            Mode::Feddis => (
                if self.no_gp {
                    Fusion::Uniform
                } else {
                    Fusion::GraphAttention { epsilon: self.epsilon }
                },
                if self.no_cps {
                    BankPolicy::Average
                } else {
                    BankPolicy::Sharing(cps)
                },
            ),
            Mode::Fedavg | Mode::Fedprox => (Fusion::SampleWeighted, BankPolicy::Average),
        };
        ServerConfig {
            fusion,
            banks: if self.no_wu { BankPolicy::Echo } else { banks },
        }
    }

    pub fn prox_mu(&self) -> Option<f64> {
        (self.mode == Mode::Fedprox).then_some(self.prox_mu)
    }
}

fn parse_override(item: &str) -> Result<(String, toml::Value)> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| LabError::Config(format!("override {item:?} is not key=value")))?;
    let key = key.trim().to_string();
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((key, value))
}

/// Ablation variants, in report order.
pub const VARIANTS: [&str; 5] = ["full", "no_cd", "no_gp", "no_wu", "no_cps"];

/// The configuration of one ablation variant of `base` (always feddis).
pub fn variant_config(base: &ExperimentConfig, variant: &str) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig {
        mode: Mode::Feddis,
        no_cd: false,
        no_gp: false,
        no_wu: false,
        no_cps: false,
        ..base.clone()
    };
    match variant {
        "full" => {}
        "no_cd" => cfg.no_cd = true,
        "no_gp" => cfg.no_gp = true,
        "no_wu" => cfg.no_wu = true,
        "no_cps" => cfg.no_cps = true,
        other => return Err(LabError::Config(format!("unknown ablation variant {other:?}"))),
    }
    cfg.name = format!("{}-{variant}", base.name);
    Ok(cfg)
}
