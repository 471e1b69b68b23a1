//! Central-difference check of the full training objective against the
//! tape gradients, over every tensor the objective depends on.

use feddis_core::autodiff::Tape;
use feddis_core::data::{WindowBatch, WindowSet};
use feddis_core::disentangle::BankInit;
use feddis_core::model::{DualBranchModel, ModelConfig, Pass};
use feddis_core::optim::Adam;
use feddis_core::{Matrix, ParamSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
/// Gradients smaller than this are compared absolutely.
pub const FLOOR: f64 = 1e-6;
pub const CRITIC_FIT_STEPS: usize = 40;

pub struct Report {
    pub max_rel_error: f64,
    pub worst: String,
    pub scalars: usize,
    /// Raw CLUB estimate at the checked point; positive means the
    /// decoupling term and critic carry gradient.
    pub mi: f64,
    pub tensors: Vec<String>,
}

/// `|V| = 4`, `T = 3`, `C = 8`, `B = 4`, `O = 4`, two windows so the CLUB
/// term sees `U = 8` rows.
pub fn desk_config() -> ModelConfig {
    ModelConfig {
        nodes: 4,
        input_dim: 1,
        horizon: 2,
        hidden: 8,
        embed_dim: 3,
        layers: 2,
        personal_patterns: 4,
        global_patterns: 4,
        momentum: 0.5,
        lambda: 0.1,
        bank_init: BankInit::RandomPcaWhiten,
        personal_extractor: true,
    }
}

pub fn desk_batch(seed: u64) -> WindowBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let series = Matrix::from_fn(12, 4, |_, _| rng.random_range(-2.0..2.0));
    WindowSet::new(series, 3, 2).unwrap().batch(&[0, 5])
}

fn objective(model: &DualBranchModel, batch: &WindowBatch, prox: Option<(&ParamSet, f64)>) -> f64 {
    let mut tape = Tape::new();
    let f = model.forward_features(&mut tape, batch, Pass::Train, false).unwrap();
    let critic = model.bind_critic(&mut tape, false);
    let obj = model.attach_objective(&mut tape, &f, &critic, &batch.targets, prox);
    tape.scalar(obj.loss)
}

/// Compares tape and finite-difference gradients of
/// `MAE + lambda * CLUB (+ prox)` for every bound tensor, critic included.
pub fn check(seed: u64, prox_mu: Option<f64>) -> Report {
    let mut model = DualBranchModel::init(desk_config(), seed, seed + 1).unwrap();
    let batch = desk_batch(seed + 2);
    // a fitted critic moves the point well away from the max(CLUB, 0) kink
    let mut critic_opt = Adam::new(0.05);
    for _ in 0..CRITIC_FIT_STEPS {
        let mut tape = Tape::new();
        let f = model.forward_features(&mut tape, &batch, Pass::Train, false).unwrap();
        let (s, d_hat) = (tape.value(f.s).clone(), tape.value(f.d_hat).clone());
        model.critic_step(&s, &d_hat, &mut critic_opt).unwrap();
    }
    let reference = prox_mu.map(|_| {
        let mut r = model.shared_params();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 3);
        for (_, m) in r.iter_mut() {
            for v in m.as_mut_slice() {
                *v += rng.random_range(-0.1..0.1);
            }
        }
        r
    });
    let prox = reference.as_ref().zip(prox_mu);

    let mut tape = Tape::new();
    let f = model.forward_features(&mut tape, &batch, Pass::Train, true).unwrap();
    let critic = model.bind_critic(&mut tape, true);
    let obj = model.attach_objective(&mut tape, &f, &critic, &batch.targets, prox);
    let grads = tape.backward(obj.loss);

    let mut handles: Vec<(String, _)> = f.bound.iter().map(|(n, v)| (n.clone(), *v)).collect();
    for (t, v) in ["w1", "b1", "w_mu", "b_mu", "w_logvar", "b_logvar"]
        .iter()
        .zip([critic.w1, critic.b1, critic.w_mu, critic.b_mu, critic.w_logvar, critic.b_logvar])
    {
        handles.push((format!("critic.{t}"), v));
    }

    let mut report = Report {
        max_rel_error: 0.0,
        worst: String::new(),
        scalars: 0,
        mi: tape.scalar(obj.mi),
        tensors: Vec::new(),
    };
    let mut probe = model.clone();
    for (name, var) in handles {
        let value = model.params().expect(&name).clone();
        let analytic = grads.get_or_zeros(var, value.rows(), value.cols());
        for i in 0..value.len() {
            let original = value.as_slice()[i];
            probe.params_mut().get_mut(&name).unwrap().as_mut_slice()[i] = original + STEP;
            let up = objective(&probe, &batch, prox);
            probe.params_mut().get_mut(&name).unwrap().as_mut_slice()[i] = original - STEP;
            let down = objective(&probe, &batch, prox);
            probe.params_mut().get_mut(&name).unwrap().as_mut_slice()[i] = original;
            let numeric = (up - down) / (2.0 * STEP);
            let a = analytic.as_slice()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = format!("{name}[{i}]: tape {a:e}, numeric {numeric:e}");
            }
            report.scalars += 1;
        }
        report.tensors.push(name);
    }
    report
}
