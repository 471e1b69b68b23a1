//! Dual-branch decoupling: pattern banks, attention retrieval, prediction
//! heads and the CLUB mutual-information bound.
//!
//! The personalized branch keeps a momentum-updated bank `L [B x C]` fed by a
//! learnable node-axis projection of `D` and reads it with an MLP-scored
//! attention. The global branch keeps a learnable bank `W [O x C]` and reads
//! it with a projected-query dot-product attention. The two refined
//! representations are added to their encoder outputs and mapped to the
//! horizon by linear heads. A variational Gaussian critic `q(S | D_hat)`
//! gives the contrastive log-ratio upper bound on `I(S; D_hat)`.

use alloc::format;
use alloc::vec::Vec;

use nalgebra::DMatrix;
use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::init;
use crate::tensor::Matrix;

/// Bound on the critic's log-variance, applied as `b * tanh(raw / b)`.
pub const LOGVAR_BOUND: f64 = 6.0;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Pattern-bank initialization strategies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BankInit {
    /// i.i.d. standard normal.
    Random,
    /// Glorot uniform with `fan_in = B`, `fan_out = C`.
    Xavier,
    /// He normal with `fan_in = C`.
    Kaiming,
    /// Standard normal followed by PCA whitening of the columns.
    RandomPcaWhiten,
}

impl BankInit {
    pub const ALL: [BankInit; 4] = [
        BankInit::Random,
        BankInit::Xavier,
        BankInit::Kaiming,
        BankInit::RandomPcaWhiten,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BankInit::Random => "random",
            BankInit::Xavier => "xavier",
            BankInit::Kaiming => "kaiming",
            BankInit::RandomPcaWhiten => "random+pca-whiten",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|b| b.name() == s)
    }
}

/// Draws a `[rows x cols]` bank with the given strategy.
pub fn init_bank(rows: usize, cols: usize, strategy: BankInit, rng: &mut impl Rng) -> Result<Matrix> {
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidArgument("bank dimensions must be positive".into()));
    }
    Ok(match strategy {
        BankInit::Random => init::standard_normal(rows, cols, rng),
        BankInit::Xavier => init::xavier_uniform(rows, cols, rng),
        BankInit::Kaiming => init::kaiming_normal(cols, rows, rng).transpose(),
        BankInit::RandomPcaWhiten => {
            let raw = init::standard_normal(rows, cols, rng);
            if rows < 2 {
                log::warn!("bank with {rows} row(s) cannot be whitened; using unit-normalized rows");
                unit_rows(&raw)
            } else {
                pca_whiten(&raw)
            }
        }
    })
}

fn unit_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for i in 0..out.rows() {
        let norm = libm::sqrt(out.row(i).iter().map(|x| x * x).sum::<f64>());
        if norm > 0.0 {
            for x in out.row_mut(i) {
                *x /= norm;
            }
        }
    }
    out
}

/// Centers the columns and rotates/scales them so that the sample column
/// covariance (denominator `rows - 1`) is the identity on the retained
/// principal directions. Directions with eigenvalue below `1e-10` times the
/// largest are dropped (rank-deficient when `rows <= cols`).
pub fn pca_whiten(m: &Matrix) -> Matrix {
    let (b, c) = m.shape();
    let mean = m.mean_rows();
    let centered = Matrix::from_fn(b, c, |i, j| m.get(i, j) - mean.get(0, j));
    let x = DMatrix::from_row_slice(b, c, centered.as_slice());
    let cov = (x.transpose() * &x) / (b.saturating_sub(1).max(1) as f64);
    let eig = cov.symmetric_eigen();
    let max_ev = eig.eigenvalues.iter().copied().fold(0.0_f64, f64::max);
    let mut scale = DMatrix::<f64>::zeros(c, c);
    for k in 0..c {
        let ev = eig.eigenvalues[k];
        if ev > 1e-10 * max_ev && ev > 0.0 {
            scale[(k, k)] = 1.0 / libm::sqrt(ev);
        }
    }
    let white = x * &eig.eigenvectors * scale;
    Matrix::from_fn(b, c, |i, j| white[(i, j)])
}

/// Sample column covariance with denominator `rows - 1`.
pub fn column_covariance(m: &Matrix) -> Matrix {
    let (b, c) = m.shape();
    let mean = m.mean_rows();
    let denom = b.saturating_sub(1).max(1) as f64;
    Matrix::from_fn(c, c, |p, q| {
        (0..b)
            .map(|i| (m.get(i, p) - mean.get(0, p)) * (m.get(i, q) - mean.get(0, q)))
            .sum::<f64>()
            / denom
    })
}

/// Client-local personalized pattern bank `L [B x C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PersonalizedBank {
    pub patterns: Matrix,
    pub momentum: f64,
}

impl PersonalizedBank {
    pub fn new(patterns: Matrix, momentum: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::InvalidArgument(format!("momentum {momentum} outside [0, 1]")));
        }
        if !patterns.is_finite() {
            return Err(Error::NonFinite("personalized bank"));
        }
        Ok(Self { patterns, momentum })
    }

    pub fn init(
        patterns: usize,
        hidden: usize,
        momentum: f64,
        seed: u64,
        strategy: BankInit,
    ) -> Result<Self> {
        let mut rng = init::rng(seed);
        Self::new(init_bank(patterns, hidden, strategy, &mut rng)?, momentum)
    }

    pub fn len(&self) -> usize {
        self.patterns.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.patterns.rows() == 0
    }

    /// `L <- alpha * P D + (1 - alpha) * L` for one graph. `projector` is
    /// `[B x |V|]`.
    pub fn update(&self, projector: &Matrix, d: &Matrix) -> Result<Self> {
        let current = projector.matmul(d)?;
        if current.shape() != self.patterns.shape() {
            return Err(Error::Shape {
                op: "update_personalized_bank",
                expected: self.patterns.shape(),
                found: current.shape(),
            });
        }
        let a = self.momentum;
        let patterns = current.zip_map(&self.patterns, |new, old| a * new + (1.0 - a) * old);
        Ok(Self {
            patterns,
            momentum: a,
        })
    }
}

/// Momentum update on the tape for a batch: the current patterns are the
/// projection `P D_b` averaged over the `blocks` samples.
pub fn bank_update_on_tape(
    tape: &mut Tape,
    projector: Var,
    d: Var,
    old_bank: Var,
    momentum: f64,
    blocks: usize,
) -> Var {
    let projected = tape.block_left_mul(projector, d, blocks);
    let current = tape.block_mean(projected, blocks);
    let new_part = tape.scale(current, momentum);
    let old_part = tape.scale(old_bank, 1.0 - momentum);
    tape.add(new_part, old_part)
}

/// One-hidden-layer scorer `s(i,k) = v^T tanh(W_q D_i + W_k l_k + b)`,
/// i.e. an MLP over the concatenation `[D_i | l_k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreNet {
    pub w_query: Matrix,
    pub w_key: Matrix,
    pub bias: Matrix,
    pub out: Matrix,
}

#[derive(Clone, Copy, Debug)]
pub struct ScoreVars {
    pub w_query: Var,
    pub w_key: Var,
    pub bias: Var,
    pub out: Var,
}

impl ScoreNet {
    pub fn xavier(hidden: usize, width: usize, rng: &mut impl Rng) -> Self {
        Self {
            w_query: init::xavier_uniform(hidden, width, rng),
            w_key: init::xavier_uniform(hidden, width, rng),
            bias: Matrix::zeros(1, width),
            out: init::xavier_uniform(width, 1, rng),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> ScoreVars {
        ScoreVars {
            w_query: tape.constant(self.w_query.clone()),
            w_key: tape.constant(self.w_key.clone()),
            bias: tape.constant(self.bias.clone()),
            out: tape.constant(self.out.clone()),
        }
    }
}

/// Attention scores `[rows x B]`.
pub fn scores_on_tape(tape: &mut Tape, d: Var, bank: Var, net: &ScoreVars) -> Var {
    let q = tape.matmul(d, net.w_query);
    let k = tape.matmul(bank, net.w_key);
    let k = tape.add_row(k, net.bias);
    tape.additive_scores(q, k, net.out)
}

/// Returns `(D_hat, omega)`.
pub fn personalized_attend_on_tape(tape: &mut Tape, d: Var, bank: Var, net: &ScoreVars) -> (Var, Var) {
    let s = scores_on_tape(tape, d, bank, net);
    let omega = tape.softmax_rows(s);
    (tape.matmul(omega, bank), omega)
}

/// `D_hat = softmax_rows(scores) L`.
pub fn attend_with_scores(scores: &Matrix, bank: &Matrix) -> Result<Matrix> {
    scores.softmax_rows().matmul(bank)
}

/// Personalized retrieval for one graph; returns `(D_hat, omega)`.
pub fn personalized_attend(d: &Matrix, bank: &PersonalizedBank, net: &ScoreNet) -> Result<(Matrix, Matrix)> {
    if bank.is_empty() {
        return Err(Error::InvalidArgument("personalized bank is empty".into()));
    }
    if d.cols() != bank.patterns.cols() || net.w_query.rows() != d.cols() {
        return Err(Error::Shape {
            op: "personalized_attend",
            expected: (d.rows(), bank.patterns.cols()),
            found: d.shape(),
        });
    }
    let mut tape = Tape::new();
    let dv = tape.constant(d.clone());
    let lv = tape.constant(bank.patterns.clone());
    let vars = net.bind(&mut tape);
    let (dh, om) = personalized_attend_on_tape(&mut tape, dv, lv, &vars);
    Ok((tape.value(dh).clone(), tape.value(om).clone()))
}

/// Learnable global bank `W [O x C]` and its query projection.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalBank {
    pub patterns: Matrix,
    pub w_query: Matrix,
    pub b_query: Matrix,
}

impl GlobalBank {
    pub fn init(patterns: usize, hidden: usize, strategy: BankInit, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            patterns: init_bank(patterns, hidden, strategy, rng)?,
            w_query: init::xavier_uniform(hidden, hidden, rng),
            b_query: Matrix::zeros(1, hidden),
        })
    }
}

/// Returns `(S_hat, beta)` with `beta = softmax((S W_s + b_s) W^T)`.
pub fn global_attend_on_tape(tape: &mut Tape, s: Var, bank: Var, w_query: Var, b_query: Var) -> (Var, Var) {
    let q = tape.matmul(s, w_query);
    let q = tape.add_row(q, b_query);
    let wt = tape.transpose(bank);
    let logits = tape.matmul(q, wt);
    let beta = tape.softmax_rows(logits);
    (tape.matmul(beta, bank), beta)
}

pub fn global_attend(s: &Matrix, bank: &GlobalBank) -> Result<(Matrix, Matrix)> {
    let c = bank.patterns.cols();
    if s.cols() != c || bank.w_query.shape() != (c, c) || bank.b_query.shape() != (1, c) {
        return Err(Error::Shape {
            op: "global_attend",
            expected: (s.rows(), c),
            found: s.shape(),
        });
    }
    let mut tape = Tape::new();
    let sv = tape.constant(s.clone());
    let wv = tape.constant(bank.patterns.clone());
    let qw = tape.constant(bank.w_query.clone());
    let qb = tape.constant(bank.b_query.clone());
    let (sh, beta) = global_attend_on_tape(&mut tape, sv, wv, qw, qb);
    Ok((tape.value(sh).clone(), tape.value(beta).clone()))
}

/// Linear prediction head `[C -> T' * F]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub w: Matrix,
    pub b: Matrix,
}

impl Head {
    pub fn xavier(hidden: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        Self {
            w: init::xavier_uniform(hidden, outputs, rng),
            b: Matrix::zeros(1, outputs),
        }
    }
}

/// `head(features + refined)`.
pub fn predict_on_tape(tape: &mut Tape, features: Var, refined: Var, w: Var, b: Var) -> Var {
    let sum = tape.add(features, refined);
    let y = tape.matmul(sum, w);
    tape.add_row(y, b)
}

/// Personalized predictor `Y^P = head(D + D_hat)`.
pub fn predict_personalized(d: &Matrix, d_hat: &Matrix, head: &Head) -> Result<Matrix> {
    predict(d, d_hat, head)
}

/// Global predictor `Y^U = head(S + S_hat)`.
pub fn predict_global(s: &Matrix, s_hat: &Matrix, head: &Head) -> Result<Matrix> {
    predict(s, s_hat, head)
}

fn predict(x: &Matrix, refined: &Matrix, head: &Head) -> Result<Matrix> {
    if x.shape() != refined.shape() {
        return Err(Error::Shape {
            op: "predict",
            expected: x.shape(),
            found: refined.shape(),
        });
    }
    x.zip_map(refined, |a, b| a + b).matmul(&head.w)?.add_row(&head.b)
}

/// `Y = Y^U + Y^P`.
pub fn fuse_predictions(y_global: &Matrix, y_personal: &Matrix) -> Result<Matrix> {
    if y_global.shape() != y_personal.shape() {
        return Err(Error::Shape {
            op: "fuse_predictions",
            expected: y_global.shape(),
            found: y_personal.shape(),
        });
    }
    Ok(y_global.zip_map(y_personal, |a, b| a + b))
}

/// Variational critic `q(S | D_hat) = N(mu(D_hat), diag(exp(logvar(D_hat))))`
/// with one shared ReLU hidden layer and two linear heads.
#[derive(Clone, Debug, PartialEq)]
pub struct ClubCritic {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w_mu: Matrix,
    pub b_mu: Matrix,
    pub w_logvar: Matrix,
    pub b_logvar: Matrix,
}

pub const CRITIC_TENSORS: [&str; 6] = ["w1", "b1", "w_mu", "b_mu", "w_logvar", "b_logvar"];

#[derive(Clone, Copy, Debug)]
pub struct CriticVars {
    pub w1: Var,
    pub b1: Var,
    pub w_mu: Var,
    pub b_mu: Var,
    pub w_logvar: Var,
    pub b_logvar: Var,
}

impl ClubCritic {
    pub fn xavier(input: usize, hidden: usize, output: usize, rng: &mut impl Rng) -> Self {
        Self {
            w1: init::xavier_uniform(input, hidden, rng),
            b1: Matrix::zeros(1, hidden),
            w_mu: init::xavier_uniform(hidden, output, rng),
            b_mu: Matrix::zeros(1, output),
            w_logvar: init::xavier_uniform(hidden, output, rng),
            b_logvar: Matrix::zeros(1, output),
        }
    }

    /// A critic whose output ignores its input: `mu = mean`, `logvar`
    /// fixed.
    pub fn constant(input: usize, mean: &Matrix, logvar: &Matrix) -> Self {
        let c = mean.cols();
        Self {
            w1: Matrix::zeros(input, 1),
            b1: Matrix::zeros(1, 1),
            w_mu: Matrix::zeros(1, c),
            b_mu: mean.clone(),
            w_logvar: Matrix::zeros(1, c),
            b_logvar: logvar.map(|lv| LOGVAR_BOUND * libm::atanh(lv / LOGVAR_BOUND)),
        }
    }

    pub fn tensors(&self) -> [&Matrix; 6] {
        [&self.w1, &self.b1, &self.w_mu, &self.b_mu, &self.w_logvar, &self.b_logvar]
    }

    pub fn tensors_mut(&mut self) -> [&mut Matrix; 6] {
        [
            &mut self.w1,
            &mut self.b1,
            &mut self.w_mu,
            &mut self.b_mu,
            &mut self.w_logvar,
            &mut self.b_logvar,
        ]
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> CriticVars {
        let mut leaf = |m: &Matrix| {
            if trainable {
                tape.param(m.clone())
            } else {
                tape.constant(m.clone())
            }
        };
        CriticVars {
            w1: leaf(&self.w1),
            b1: leaf(&self.b1),
            w_mu: leaf(&self.w_mu),
            b_mu: leaf(&self.b_mu),
            w_logvar: leaf(&self.w_logvar),
            b_logvar: leaf(&self.b_logvar),
        }
    }

    /// `(mu, logvar)` for each row of `d_hat`.
    pub fn forward(&self, d_hat: &Matrix) -> Result<(Matrix, Matrix)> {
        if d_hat.cols() != self.w1.rows() {
            return Err(Error::Shape {
                op: "critic",
                expected: (d_hat.rows(), self.w1.rows()),
                found: d_hat.shape(),
            });
        }
        let mut tape = Tape::new();
        let x = tape.constant(d_hat.clone());
        let vars = self.bind(&mut tape, false);
        let (mu, lv) = critic_on_tape(&mut tape, x, &vars);
        Ok((tape.value(mu).clone(), tape.value(lv).clone()))
    }
}

/// Returns `(mu, logvar)` handles.
pub fn critic_on_tape(tape: &mut Tape, d_hat: Var, c: &CriticVars) -> (Var, Var) {
    let h = tape.matmul(d_hat, c.w1);
    let h = tape.add_row(h, c.b1);
    let h = tape.relu(h);
    let mu = tape.matmul(h, c.w_mu);
    let mu = tape.add_row(mu, c.b_mu);
    let raw = tape.matmul(h, c.w_logvar);
    let raw = tape.add_row(raw, c.b_logvar);
    let raw = tape.scale(raw, 1.0 / LOGVAR_BOUND);
    let lv = tape.tanh(raw);
    (mu, tape.scale(lv, LOGVAR_BOUND))
}

/// Mean over rows of the diagonal-Gaussian log-density of `s` under
/// `(mu, logvar)`, on the tape.
pub fn gaussian_log_likelihood_on_tape(tape: &mut Tape, s: Var, mu: Var, logvar: Var) -> Var {
    let c = tape.shape(s).1 as f64;
    let diff = tape.sub(s, mu);
    let sq = tape.square(diff);
    let neg_lv = tape.scale(logvar, -1.0);
    let prec = tape.exp(neg_lv);
    let mahal = tape.mul(sq, prec);
    let per = tape.add(mahal, logvar);
    let per_row = tape.sum_cols(per);
    let mean = tape.mean(per_row);
    let scaled = tape.scale(mean, -0.5);
    tape.add_scalar(scaled, -0.5 * c * LN_2PI)
}

/// Mean diagonal-Gaussian log-density for plain matrices.
pub fn gaussian_log_likelihood(s: &Matrix, mu: &Matrix, logvar: &Matrix) -> Result<f64> {
    if s.shape() != mu.shape() || s.shape() != logvar.shape() {
        return Err(Error::Shape {
            op: "gaussian_log_likelihood",
            expected: s.shape(),
            found: mu.shape(),
        });
    }
    if !logvar.is_finite() {
        return Err(Error::NonFinite("critic log-variance"));
    }
    let mut tape = Tape::new();
    let sv = tape.constant(s.clone());
    let mv = tape.constant(mu.clone());
    let lv = tape.constant(logvar.clone());
    let ll = gaussian_log_likelihood_on_tape(&mut tape, sv, mv, lv);
    Ok(tape.scalar(ll))
}

/// `mean_i log q(S_i | D_hat_i)` on the tape.
pub fn club_log_likelihood_on_tape(tape: &mut Tape, s: Var, d_hat: Var, critic: &CriticVars) -> Var {
    let (mu, lv) = critic_on_tape(tape, d_hat, critic);
    gaussian_log_likelihood_on_tape(tape, s, mu, lv)
}

/// CLUB estimate on the tape:
/// `mean_i [log q(S_i|D_i) - mean_j log q(S_j|D_i)]`.
///
/// The inner mean over `j` only needs the first two column moments of `S`,
/// since `mean_j (S_j - mu_i)^2 = m2 - 2 mu_i m1 + mu_i^2`; the normalizer
/// and log-variance terms cancel between the two sums.
pub fn club_mi_on_tape(tape: &mut Tape, s: Var, d_hat: Var, critic: &CriticVars) -> Var {
    let rows = tape.shape(s).0;
    if rows < 2 {
        return tape.constant(Matrix::zeros(1, 1));
    }
    let (mu, lv) = critic_on_tape(tape, d_hat, critic);
    let neg_lv = tape.scale(lv, -1.0);
    let prec = tape.exp(neg_lv);
    // positive pairs
    let diff = tape.sub(s, mu);
    let pos = tape.square(diff);
    // all pairs
    let m1 = tape.mean_rows(s);
    let s_sq = tape.square(s);
    let m2 = tape.mean_rows(s_sq);
    let mu_m1 = tape.mul_row(mu, m1);
    let cross = tape.scale(mu_m1, -2.0);
    let mu_sq = tape.square(mu);
    let neg = tape.add(cross, mu_sq);
    let neg = tape.add_row(neg, m2);
    // -0.5 * [pos - neg] * prec
    let gap = tape.sub(pos, neg);
    let weighted = tape.mul(gap, prec);
    let per_row = tape.sum_cols(weighted);
    let mean = tape.mean(per_row);
    tape.scale(mean, -0.5)
}

fn check_pairs(s: &Matrix, d_hat: &Matrix, critic: &ClubCritic) -> Result<()> {
    if s.rows() != d_hat.rows() {
        return Err(Error::Shape {
            op: "club batch",
            expected: (s.rows(), d_hat.cols()),
            found: d_hat.shape(),
        });
    }
    if s.rows() == 0 {
        return Err(Error::InvalidArgument("CLUB needs at least one sample".into()));
    }
    if critic.w_mu.cols() != s.cols() {
        return Err(Error::Shape {
            op: "club critic output",
            expected: (critic.w_mu.rows(), s.cols()),
            found: critic.w_mu.shape(),
        });
    }
    Ok(())
}

/// Mean conditional log-likelihood `mean_i log q(S_i | D_hat_i)`.
pub fn club_log_likelihood(s: &Matrix, d_hat: &Matrix, critic: &ClubCritic) -> Result<f64> {
    check_pairs(s, d_hat, critic)?;
    let (mu, lv) = critic.forward(d_hat)?;
    gaussian_log_likelihood(s, &mu, &lv)
}

/// Sample CLUB upper bound on `I(S; D_hat)` in nats.
pub fn club_mi_estimate(s: &Matrix, d_hat: &Matrix, critic: &ClubCritic) -> Result<f64> {
    check_pairs(s, d_hat, critic)?;
    let mut tape = Tape::new();
    let sv = tape.constant(s.clone());
    let dv = tape.constant(d_hat.clone());
    let vars = critic.bind(&mut tape, false);
    let mi = club_mi_on_tape(&mut tape, sv, dv, &vars);
    let v = tape.scalar(mi);
    if !v.is_finite() {
        return Err(Error::NonFinite("CLUB estimate"));
    }
    Ok(v)
}

/// Fits the critic by full-batch Adam ascent on the conditional
/// log-likelihood of `(s, d_hat)`. Returns the final log-likelihood.
pub fn fit_critic(
    critic: &mut ClubCritic,
    s: &Matrix,
    d_hat: &Matrix,
    steps: usize,
    lr: f64,
) -> Result<f64> {
    check_pairs(s, d_hat, critic)?;
    let mut opt = crate::optim::Adam::new(lr);
    let mut last = f64::NEG_INFINITY;
    for _ in 0..steps {
        let mut tape = Tape::new();
        let sv = tape.constant(s.clone());
        let dv = tape.constant(d_hat.clone());
        let vars = critic.bind(&mut tape, true);
        let ll = club_log_likelihood_on_tape(&mut tape, sv, dv, &vars);
        last = tape.scalar(ll);
        let neg = tape.scale(ll, -1.0);
        let grads = tape.backward(neg);
        let handles = [vars.w1, vars.b1, vars.w_mu, vars.b_mu, vars.w_logvar, vars.b_logvar];
        let gs: Vec<Matrix> = handles
            .iter()
            .zip(critic.tensors())
            .map(|(&h, m)| grads.get_or_zeros(h, m.rows(), m.cols()))
            .collect();
        opt.begin_step();
        for ((name, p), g) in CRITIC_TENSORS.iter().zip(critic.tensors_mut()).zip(&gs) {
            opt.update(name, p, g);
        }
    }
    Ok(last)
}

/// `mean|Y_hat - Y| + lambda * max(L_MI, 0)`.
pub fn total_loss(y_hat: &Matrix, y: &Matrix, mi: f64, lambda: f64) -> Result<f64> {
    if y_hat.shape() != y.shape() {
        return Err(Error::Shape {
            op: "total_loss",
            expected: y.shape(),
            found: y_hat.shape(),
        });
    }
    let mae = y_hat.zip_map(y, |a, b| libm::fabs(a - b)).mean();
    Ok(mae + lambda * mi.max(0.0))
}

/// `mean|Y_hat - Y|` on the tape; `y` is data.
pub fn mae_on_tape(tape: &mut Tape, y_hat: Var, y: Var) -> Var {
    let diff = tape.sub(y_hat, y);
    let abs = tape.abs(diff);
    tape.mean(abs)
}
