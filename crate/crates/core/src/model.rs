//! The client-side dual-branch forecaster.
//!
//! Two structurally identical AGR encoders with unshared weights produce the
//! global features `S` and the personalized features `D`. `D` feeds the
//! momentum bank and its attention read-out `D_hat`; `S` reads the global
//! bank into `S_hat`. Each branch has a linear head and the two predictions
//! are summed. Training interleaves one critic ascent step on the Gaussian
//! log-likelihood with one descent step on `MAE + lambda * CLUB`.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::data::WindowBatch;
use crate::disentangle::{
    self, BankInit, CriticVars, ScoreVars, CRITIC_TENSORS,
};
use crate::encoder::{self, AgrLayerVars, EncoderVars, AGR_TENSORS};
use crate::error::{Error, Result};
use crate::init;
use crate::optim::Adam;
use crate::params::{role_of, ParamSet, Role, GLOBAL_BANK};
use crate::tensor::Matrix;

pub const PERSONAL_BANK: &str = "personal.bank";

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Node count of this client's subgraph.
    pub nodes: usize,
    /// Features per node and step (`F`).
    pub input_dim: usize,
    /// Prediction horizon `T'`.
    pub horizon: usize,
    /// Hidden width `C`.
    pub hidden: usize,
    /// Node-embedding width `d`.
    pub embed_dim: usize,
    /// Stacked AGR layers per encoder.
    pub layers: usize,
    /// Personalized bank size `B`.
    pub personal_patterns: usize,
    /// Global bank size `O`.
    pub global_patterns: usize,
    /// Personalized bank momentum `alpha`.
    pub momentum: f64,
    /// Weight `lambda` of the CLUB term.
    pub lambda: f64,
    pub bank_init: BankInit,
    /// When false the personalized extractor is bypassed (`D_hat = 0`).
    pub personal_extractor: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("nodes", self.nodes),
            ("input_dim", self.input_dim),
            ("horizon", self.horizon),
            ("hidden", self.hidden),
            ("embed_dim", self.embed_dim),
            ("layers", self.layers),
            ("personal_patterns", self.personal_patterns),
            ("global_patterns", self.global_patterns),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be positive")));
            }
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!("momentum {} outside [0, 1]", self.momentum)));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::InvalidArgument(format!("lambda {} must be non-negative", self.lambda)));
        }
        Ok(())
    }

    pub fn outputs(&self) -> usize {
        self.horizon * self.input_dim
    }
}

fn enc_name(branch: &str, layer: usize, tensor: &str) -> String {
    format!("{branch}.enc.l{layer}.{tensor}")
}

fn embed_name(branch: &str) -> String {
    format!("{branch}.enc.embed")
}

/// Per-batch training diagnostics.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub mae: f64,
    pub mi: f64,
    pub critic_log_likelihood: f64,
}

/// Tape handles of one forward pass.
pub struct Features {
    pub bound: BTreeMap<String, Var>,
    pub s: Var,
    pub d: Var,
    pub d_hat: Var,
    pub s_hat: Var,
    pub omega: Option<Var>,
    pub beta: Var,
    pub y_global: Var,
    pub y_personal: Var,
    pub y_hat: Var,
    pub new_bank: Option<Var>,
}

/// Tape handles of the scalar objective.
pub struct Objective {
    pub loss: Var,
    pub mae: Var,
    pub mi: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pass {
    /// Updates the personalized bank from the batch before retrieval.
    Train,
    /// Reads the stored bank.
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DualBranchModel {
    config: ModelConfig,
    params: ParamSet,
}

impl DualBranchModel {
    /// Shared-branch weights, the global bank and the prototype attention
    /// come from `shared_seed` (identical across clients); everything
    /// node-count dependent or personal comes from `client_seed`.
    pub fn init(config: ModelConfig, shared_seed: u64, client_seed: u64) -> Result<Self> {
        config.validate()?;
        let c = config.hidden;
        let mut params = ParamSet::new();
        let rng_for = |seed: u64, name: &str| init::rng(init::derive_seed(seed, name, 0));

        for branch in ["global", "personal"] {
            let seed = if branch == "global" { shared_seed } else { client_seed };
            for l in 0..config.layers {
                let input = if l == 0 { config.input_dim } else { c };
                for t in AGR_TENSORS {
                    let name = enc_name(branch, l, t);
                    let mut rng = rng_for(seed, &name);
                    let m = if t.starts_with('w') {
                        init::xavier_uniform(input + c, c, &mut rng)
                    } else {
                        Matrix::zeros(1, c)
                    };
                    params.insert(name, m);
                }
            }
            let name = embed_name(branch);
            let mut rng = rng_for(client_seed, &name);
            params.insert(name, init::standard_normal(config.nodes, config.embed_dim, &mut rng));
        }

        let global_bank_init = match config.bank_init {
            BankInit::RandomPcaWhiten => BankInit::Xavier,
            other => other,
        };
        params.insert(
            GLOBAL_BANK,
            disentangle::init_bank(config.global_patterns, c, global_bank_init, &mut rng_for(shared_seed, GLOBAL_BANK))?,
        );
        params.insert("global.query.w", init::xavier_uniform(c, c, &mut rng_for(shared_seed, "global.query.w")));
        params.insert("global.query.b", Matrix::zeros(1, c));
        for branch in ["global", "personal"] {
            let seed = if branch == "global" { shared_seed } else { client_seed };
            let name = format!("{branch}.head.w");
            let w = init::xavier_uniform(c, config.outputs(), &mut rng_for(seed, &name));
            params.insert(name, w);
            params.insert(format!("{branch}.head.b"), Matrix::zeros(1, config.outputs()));
        }

        params.insert(
            PERSONAL_BANK,
            disentangle::init_bank(config.personal_patterns, c, config.bank_init, &mut rng_for(client_seed, PERSONAL_BANK))?,
        );
        params.insert(
            "personal.projector",
            init::xavier_uniform(config.personal_patterns, config.nodes, &mut rng_for(client_seed, "personal.projector")),
        );
        for (t, rows, cols) in [("w_query", c, c), ("w_key", c, c), ("out", c, 1)] {
            let name = format!("personal.score.{t}");
            let m = init::xavier_uniform(rows, cols, &mut rng_for(client_seed, &name));
            params.insert(name, m);
        }
        params.insert("personal.score.bias", Matrix::zeros(1, c));

        for t in CRITIC_TENSORS {
            let name = format!("critic.{t}");
            let (rows, cols) = match t {
                "w1" => (c, c),
                "w_mu" | "w_logvar" => (c, c),
                _ => (1, c),
            };
            let m = if t.starts_with('w') {
                init::xavier_uniform(rows, cols, &mut rng_for(client_seed, &name))
            } else {
                Matrix::zeros(rows, cols)
            };
            params.insert(name, m);
        }

        let d = config.embed_dim;
        params.insert("prototype.w_v", init::xavier_uniform(d, d, &mut rng_for(shared_seed, "prototype.w_v")));
        params.insert("prototype.b_v", Matrix::zeros(1, d));
        params.insert("prototype.w", init::xavier_uniform(d, 1, &mut rng_for(shared_seed, "prototype.w")));

        Ok(Self { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let reference = Self::init(config.clone(), 0, 0)?;
        if !reference.params.same_layout(&params) {
            return Err(Error::InvalidArgument("parameter layout does not match the configuration".to_string()));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn shared_params(&self) -> ParamSet {
        self.params.with_role(Role::Shared)
    }

    pub fn global_bank(&self) -> &Matrix {
        self.params.expect(GLOBAL_BANK)
    }

    pub fn personal_bank(&self) -> &Matrix {
        self.params.expect(PERSONAL_BANK)
    }

    /// Replaces shared tensors and the global bank with server values.
    pub fn install(&mut self, shared: &ParamSet, bank: &Matrix) -> Result<()> {
        for (name, _) in shared.iter() {
            if role_of(name) != Role::Shared {
                return Err(Error::InvalidArgument(format!("{name} is not a shared tensor")));
            }
        }
        self.params.overwrite_from(shared)?;
        let dst = self.params.get_mut(GLOBAL_BANK).expect("global bank");
        if dst.shape() != bank.shape() {
            return Err(Error::Shape {
                op: "install bank",
                expected: dst.shape(),
                found: bank.shape(),
            });
        }
        *dst = bank.clone();
        Ok(())
    }

    /// Names updated by the main descent step.
    pub fn trainable_names(&self) -> Vec<String> {
        self.params
            .names()
            .filter(|n| is_main_trainable(n))
            .map(ToString::to_string)
            .collect()
    }

    pub fn critic_names(&self) -> Vec<String> {
        CRITIC_TENSORS.iter().map(|t| format!("critic.{t}")).collect()
    }

    fn bind_main(&self, tape: &mut Tape, trainable: bool) -> BTreeMap<String, Var> {
        self.params
            .iter()
            .filter(|(n, _)| is_main_trainable(n))
            .map(|(n, m)| {
                let v = if trainable {
                    tape.param(m.clone())
                } else {
                    tape.constant(m.clone())
                };
                (n.to_string(), v)
            })
            .collect()
    }

    /// Binds the critic tensors; trainable for the ascent step, constant
    /// (frozen) inside the main objective.
    pub fn bind_critic(&self, tape: &mut Tape, trainable: bool) -> CriticVars {
        let mut leaf = |t: &str| {
            let m = self.params.expect(&format!("critic.{t}")).clone();
            if trainable {
                tape.param(m)
            } else {
                tape.constant(m)
            }
        };
        CriticVars {
            w1: leaf("w1"),
            b1: leaf("b1"),
            w_mu: leaf("w_mu"),
            b_mu: leaf("b_mu"),
            w_logvar: leaf("w_logvar"),
            b_logvar: leaf("b_logvar"),
        }
    }

    fn check_batch(&self, batch: &WindowBatch) -> Result<()> {
        if batch.nodes != self.config.nodes {
            return Err(Error::InvalidArgument(format!(
                "batch has {} nodes, model expects {}",
                batch.nodes, self.config.nodes
            )));
        }
        if batch.inputs.is_empty() {
            return Err(Error::InvalidArgument("window must have at least one step".into()));
        }
        for x in &batch.inputs {
            if x.shape() != (batch.rows(), self.config.input_dim) {
                return Err(Error::Shape {
                    op: "batch input",
                    expected: (batch.rows(), self.config.input_dim),
                    found: x.shape(),
                });
            }
        }
        if batch.targets.shape() != (batch.rows(), self.config.outputs()) {
            return Err(Error::Shape {
                op: "batch targets",
                expected: (batch.rows(), self.config.outputs()),
                found: batch.targets.shape(),
            });
        }
        Ok(())
    }

    /// Records the forward pass of both branches on `tape`.
    pub fn forward_features(&self, tape: &mut Tape, batch: &WindowBatch, pass: Pass, trainable: bool) -> Result<Features> {
        self.check_batch(batch)?;
        let bound = self.bind_main(tape, trainable);
        let b = |name: &str| -> Var { *bound.get(name).unwrap_or_else(|| panic!("unbound {name}")) };
        let blocks = batch.batch;
        let inputs: Vec<Var> = batch.inputs.iter().map(|x| tape.constant(x.clone())).collect();

        let encoder_vars = |branch: &str| EncoderVars {
            embed: b(&embed_name(branch)),
            layers: (0..self.config.layers)
                .map(|l| AgrLayerVars {
                    w_z: b(&enc_name(branch, l, "w_z")),
                    b_z: b(&enc_name(branch, l, "b_z")),
                    w_r: b(&enc_name(branch, l, "w_r")),
                    b_r: b(&enc_name(branch, l, "b_r")),
                    w_h: b(&enc_name(branch, l, "w_h")),
                    b_h: b(&enc_name(branch, l, "b_h")),
                })
                .collect(),
        };
        let s = encoder::encode_on_tape(tape, &encoder_vars("global"), &inputs, blocks);
        let d = encoder::encode_on_tape(tape, &encoder_vars("personal"), &inputs, blocks);

        let (d_hat, omega, new_bank) = if self.config.personal_extractor {
            let old = tape.constant(self.personal_bank().clone());
            let (bank, new_bank) = match pass {
                Pass::Train => {
                    let nb = disentangle::bank_update_on_tape(
                        tape,
                        b("personal.projector"),
                        d,
                        old,
                        self.config.momentum,
                        blocks,
                    );
                    (nb, Some(nb))
                }
                Pass::Eval => (old, None),
            };
            let score = ScoreVars {
                w_query: b("personal.score.w_query"),
                w_key: b("personal.score.w_key"),
                bias: b("personal.score.bias"),
                out: b("personal.score.out"),
            };
            let (d_hat, omega) = disentangle::personalized_attend_on_tape(tape, d, bank, &score);
            (d_hat, Some(omega), new_bank)
        } else {
            let (r, c) = tape.shape(d);
            (tape.constant(Matrix::zeros(r, c)), None, None)
        };

        let (s_hat, beta) = disentangle::global_attend_on_tape(
            tape,
            s,
            b(GLOBAL_BANK),
            b("global.query.w"),
            b("global.query.b"),
        );
        let y_global = disentangle::predict_on_tape(tape, s, s_hat, b("global.head.w"), b("global.head.b"));
        let y_personal = disentangle::predict_on_tape(tape, d, d_hat, b("personal.head.w"), b("personal.head.b"));
        let y_hat = tape.add(y_global, y_personal);
        Ok(Features {
            bound,
            s,
            d,
            d_hat,
            s_hat,
            omega,
            beta,
            y_global,
            y_personal,
            y_hat,
            new_bank,
        })
    }

    /// `MAE + lambda * max(CLUB, 0) (+ mu/2 ||theta_s - theta_ref||^2)` on the
/// tape. `Objective::mi` keeps the raw estimate.
    pub fn attach_objective(
        &self,
        tape: &mut Tape,
        features: &Features,
        critic: &CriticVars,
        targets: &Matrix,
        prox: Option<(&ParamSet, f64)>,
    ) -> Objective {
        let y = tape.constant(targets.clone());
        let mae = disentangle::mae_on_tape(tape, features.y_hat, y);
        let mi = if self.config.lambda > 0.0 {
            disentangle::club_mi_on_tape(tape, features.s, features.d_hat, critic)
        } else {
            tape.constant(Matrix::zeros(1, 1))
        };
        // a negative estimate only means the critic lags the features
        let penalty = tape.relu(mi);
        let weighted = tape.scale(penalty, self.config.lambda);
        let mut loss = tape.add(mae, weighted);
        if let Some((reference, mu)) = prox {
            if mu > 0.0 {
                let term = fedprox_on_tape(tape, &features.bound, reference, mu);
                loss = tape.add(loss, term);
            }
        }
        Objective { loss, mae, mi }
    }

    /// One alternating update: critic ascent with features held fixed,
    /// then a main descent step with the critic frozen.
    pub fn train_step(
        &mut self,
        batch: &WindowBatch,
        opt: &mut Adam,
        critic_opt: &mut Adam,
        prox: Option<(&ParamSet, f64)>,
    ) -> Result<StepStats> {
        let mut tape = Tape::new();
        let features = self.forward_features(&mut tape, batch, Pass::Train, true)?;

        let mut critic_ll = 0.0;
        if self.config.lambda > 0.0 {
            critic_ll = self.critic_step(tape.value(features.s), tape.value(features.d_hat), critic_opt)?;
        }

        let critic = self.bind_critic(&mut tape, false);
        let obj = self.attach_objective(&mut tape, &features, &critic, &batch.targets, prox);
        let stats = StepStats {
            loss: tape.scalar(obj.loss),
            mae: tape.scalar(obj.mae),
            mi: tape.scalar(obj.mi),
            critic_log_likelihood: critic_ll,
        };
        if !stats.loss.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        let grads = tape.backward(obj.loss);
        opt.begin_step();
        for (name, var) in &features.bound {
            if let Some(g) = grads.get(*var) {
                let p = self.params.get_mut(name).expect("bound parameter");
                opt.update(name, p, g);
            }
        }
        if let Some(nb) = features.new_bank {
            *self.params.get_mut(PERSONAL_BANK).expect("personal bank") = tape.value(nb).clone();
        }
        Ok(stats)
    }

    /// Ascent step on `mean log q(S | D_hat)`; returns the pre-step value.
    pub fn critic_step(&mut self, s: &Matrix, d_hat: &Matrix, critic_opt: &mut Adam) -> Result<f64> {
        let mut tape = Tape::new();
        let sv = tape.constant(s.clone());
        let dv = tape.constant(d_hat.clone());
        let vars = self.bind_critic(&mut tape, true);
        let ll = disentangle::club_log_likelihood_on_tape(&mut tape, sv, dv, &vars);
        let value = tape.scalar(ll);
        if !value.is_finite() {
            return Err(Error::NonFinite("critic log-likelihood"));
        }
        let neg = tape.scale(ll, -1.0);
        let grads = tape.backward(neg);
        let handles = [vars.w1, vars.b1, vars.w_mu, vars.b_mu, vars.w_logvar, vars.b_logvar];
        critic_opt.begin_step();
        for (t, h) in CRITIC_TENSORS.iter().zip(handles) {
            if let Some(g) = grads.get(h) {
                let name = format!("critic.{t}");
                let p = self.params.get_mut(&name).expect("critic tensor");
                critic_opt.update(&name, p, g);
            }
        }
        Ok(value)
    }

    /// Normalized prediction `[batch*|V| x T'*F]` using the stored bank.
    pub fn predict(&self, batch: &WindowBatch) -> Result<Matrix> {
        let mut tape = Tape::new();
        let f = self.forward_features(&mut tape, batch, Pass::Eval, false)?;
        Ok(tape.value(f.y_hat).clone())
    }

    /// Objective value for a batch without updating anything (bank update
    /// included in the graph as in training).
    pub fn evaluate_objective(&self, batch: &WindowBatch) -> Result<StepStats> {
        let mut tape = Tape::new();
        let f = self.forward_features(&mut tape, batch, Pass::Train, false)?;
        let critic = self.bind_critic(&mut tape, false);
        let obj = self.attach_objective(&mut tape, &f, &critic, &batch.targets, None);
        Ok(StepStats {
            loss: tape.scalar(obj.loss),
            mae: tape.scalar(obj.mae),
            mi: tape.scalar(obj.mi),
            critic_log_likelihood: 0.0,
        })
    }
}

fn is_main_trainable(name: &str) -> bool {
    !(name.starts_with("critic.") || name.starts_with("prototype.") || name == PERSONAL_BANK)
}

/// `(mu / 2) * sum ||theta - theta_ref||^2` over the shared tensors bound on
/// the tape.
pub fn fedprox_on_tape(tape: &mut Tape, bound: &BTreeMap<String, Var>, reference: &ParamSet, mu: f64) -> Var {
    let mut total: Option<Var> = None;
    for (name, r) in reference.iter() {
        let Some(&v) = bound.get(name) else { continue };
        let rc = tape.constant(r.clone());
        let diff = tape.sub(v, rc);
        let sq = tape.square(diff);
        let s = tape.sum(sq);
        total = Some(match total {
            Some(t) => tape.add(t, s),
            None => s,
        });
    }
    let total = total.unwrap_or_else(|| tape.constant(Matrix::zeros(1, 1)));
    tape.scale(total, 0.5 * mu)
}
