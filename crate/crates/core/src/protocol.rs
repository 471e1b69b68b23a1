//! Round-synchronous federation: local client rounds, pattern sharing,
//! prototype-guided fusion and the FedAvg/FedProx baselines.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::WindowBatch;
use crate::error::{Error, Result};
use crate::model::DualBranchModel;
use crate::optim::Adam;
use crate::params::ParamSet;
use crate::tensor::{softmax_in_place, Matrix};

/// Cosine similarity; zero when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (libm::sqrt(na) * libm::sqrt(nb))
}

/// Attention parameters for pooling node embeddings into one vector.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeAttention {
    /// `[d x d]`
    pub w_v: Matrix,
    /// `[1 x d]`
    pub b_v: Matrix,
    /// `[d x 1]`
    pub w: Matrix,
}

impl PrototypeAttention {
    pub fn from_params(params: &ParamSet) -> Result<Self> {
        let get = |n: &str| {
            params
                .get(n)
                .cloned()
                .ok_or_else(|| Error::InvalidArgument(format!("missing {n}")))
        };
        Ok(Self {
            w_v: get("prototype.w_v")?,
            b_v: get("prototype.b_v")?,
            w: get("prototype.w")?,
        })
    }
}

/// A client's graph summary with its node attention weights.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphPrototype {
    /// `[1 x d]`
    pub vector: Matrix,
    /// Attention over nodes, `[|V| x 1]`.
    pub weights: Matrix,
}

/// `h_G = sum_v softmax_v(w^T tanh(W_v h_v + b_v)) h_v`.
pub fn compute_graph_prototype(embeddings: &Matrix, attn: &PrototypeAttention) -> Result<GraphPrototype> {
    let (n, d) = embeddings.shape();
    if n == 0 {
        return Err(Error::InvalidArgument("prototype needs at least one node".into()));
    }
    if attn.w_v.shape() != (d, d) || attn.b_v.shape() != (1, d) || attn.w.shape() != (d, 1) {
        return Err(Error::Shape {
            op: "graph prototype",
            expected: (d, d),
            found: attn.w_v.shape(),
        });
    }
    let proj = embeddings.matmul(&attn.w_v)?.add_row(&attn.b_v)?.map(crate::math::tanh);
    let mut scores = proj.matmul(&attn.w)?.into_vec();
    softmax_in_place(&mut scores);
    let mut vector = Matrix::zeros(1, d);
    for (v, &a) in scores.iter().enumerate() {
        for (acc, &x) in vector.as_mut_slice().iter_mut().zip(embeddings.row(v)) {
            *acc += a * x;
        }
    }
    Ok(GraphPrototype {
        vector,
        weights: Matrix::from_vec(n, 1, scores)?,
    })
}

/// The prototype of a model, pooled from its global-branch node embeddings.
pub fn model_prototype(model: &DualBranchModel) -> Result<GraphPrototype> {
    let attn = PrototypeAttention::from_params(model.params())?;
    compute_graph_prototype(model.params().expect("global.enc.embed"), &attn)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CpsConfig {
    pub top_k: usize,
    pub threshold: f64,
    /// Adds the pattern itself to its selection set.
    pub include_self: bool,
}

/// Indices of the `k` rows of `bank` most cosine-similar to `query`, with
/// their similarities, best first (ties keep the lower index first).
fn top_k_similar(query: &[f64], bank: &Matrix, k: usize) -> Vec<(usize, f64)> {
    let mut sims: Vec<(usize, f64)> = (0..bank.rows()).map(|r| (r, cosine(query, bank.row(r)))).collect();
    sims.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    sims.truncate(k);
    sims
}

/// Replaces each pattern of each bank by the mean of the matching patterns
/// found in the other clients' banks. Every update reads the input banks,
/// never partially updated ones.
pub fn collaborative_pattern_sharing(banks: &[Matrix], config: &CpsConfig) -> Result<Vec<Matrix>> {
    if banks.len() < 2 {
        return Err(Error::InvalidArgument("pattern sharing needs at least two clients".into()));
    }
    if config.top_k == 0 {
        return Err(Error::InvalidArgument("top_k must be at least 1".into()));
    }
    if !(-1.0..=1.0).contains(&config.threshold) {
        return Err(Error::InvalidArgument(format!("threshold {} outside [-1, 1]", config.threshold)));
    }
    let shape = banks[0].shape();
    if let Some(b) = banks.iter().find(|b| b.shape() != shape) {
        return Err(Error::Shape {
            op: "pattern sharing",
            expected: shape,
            found: b.shape(),
        });
    }
    let (o, c) = shape;
    let mut out = Vec::with_capacity(banks.len());
    for (m, own) in banks.iter().enumerate() {
        let mut updated = own.clone();
        for j in 0..o {
            let query = own.row(j);
            let mut acc = vec![0.0; c];
            let mut count = 0usize;
            if config.include_self {
                acc.iter_mut().zip(query).for_each(|(a, x)| *a += x);
                count += 1;
            }
            let mut selected = 0usize;
            for (n, other) in banks.iter().enumerate() {
                if n == m {
                    continue;
                }
                for (k, sim) in top_k_similar(query, other, config.top_k) {
                    if sim > config.threshold {
                        acc.iter_mut().zip(other.row(k)).for_each(|(a, x)| *a += x);
                        count += 1;
                        selected += 1;
                    }
                }
            }
            if selected > 0 {
                let inv = 1.0 / count as f64;
                for (dst, a) in updated.row_mut(j).iter_mut().zip(&acc) {
                    *dst = a * inv;
                }
            }
        }
        out.push(updated);
    }
    Ok(out)
}

/// Row `i` holds `softmax_j(cos(h_i, h_j) / epsilon)`.
pub fn gaf_weights(prototypes: &[Matrix], epsilon: f64) -> Result<Matrix> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature {epsilon} must be positive")));
    }
    let m = prototypes.len();
    if m == 0 {
        return Err(Error::InvalidArgument("no prototypes".into()));
    }
    let mut w = Matrix::zeros(m, m);
    for i in 0..m {
        let row = w.row_mut(i);
        for (j, r) in row.iter_mut().enumerate() {
            *r = cosine(prototypes[i].as_slice(), prototypes[j].as_slice()) / epsilon;
        }
        softmax_in_place(row);
    }
    Ok(w)
}

/// Per-client fused shared parameters, one weight row per client.
pub fn graph_attention_fusion(prototypes: &[Matrix], shared: &[&ParamSet], epsilon: f64) -> Result<Vec<ParamSet>> {
    if prototypes.len() != shared.len() {
        return Err(Error::InvalidArgument(format!(
            "{} prototypes for {} parameter sets",
            prototypes.len(),
            shared.len()
        )));
    }
    let w = gaf_weights(prototypes, epsilon)?;
    (0..shared.len())
        .map(|i| ParamSet::weighted_sum(shared, w.row(i)))
        .collect()
}

/// Weighted mean per tensor; weights are normalized here.
pub fn fedavg_aggregate(sets: &[&ParamSet], weights: &[f64]) -> Result<ParamSet> {
    if weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::InvalidArgument("aggregation weights must be non-negative".into()));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::InvalidArgument("aggregation weights sum to zero".into()));
    }
    let normalized: Vec<f64> = weights.iter().map(|w| w / total).collect();
    ParamSet::weighted_sum(sets, &normalized)
}

/// `(mu / 2) * ||theta - theta_global||^2` over the tensors of `global`.
pub fn fedprox_term(local: &ParamSet, global: &ParamSet, mu: f64) -> Result<f64> {
    if !(mu >= 0.0) {
        return Err(Error::InvalidArgument(format!("proximal weight {mu} must be non-negative")));
    }
    let mut sq = 0.0;
    for (name, g) in global.iter() {
        let l = local
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("local set lacks {name}")))?;
        if l.shape() != g.shape() {
            return Err(Error::Shape {
                op: "fedprox",
                expected: g.shape(),
                found: l.shape(),
            });
        }
        sq += l.zip_map(g, |a, b| a - b).sq_norm();
    }
    Ok(0.5 * mu * sq)
}

/// What a client uploads after its local round.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub round: usize,
    pub sample_count: usize,
    pub shared: ParamSet,
    pub bank: Matrix,
    /// `[1 x d]`
    pub prototype: Matrix,
}

/// What the server returns to one client.
#[derive(Clone, Debug, PartialEq)]
pub struct ServerPayload {
    pub client_id: usize,
    pub round: usize,
    pub shared: ParamSet,
    pub bank: Matrix,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Fusion {
    /// Prototype-similarity softmax with temperature `epsilon`.
    GraphAttention { epsilon: f64 },
    /// Weighted by uploaded sample counts.
    SampleWeighted,
    Uniform,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BankPolicy {
    Sharing(CpsConfig),
    /// Elementwise mean, identical for every client.
    Average,
    /// Each client gets its own upload back.
    Echo,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ServerConfig {
    pub fusion: Fusion,
    pub banks: BankPolicy,
}

/// Aggregates one round. Fails unless exactly clients `0..expected` reported.
pub fn server_round(config: &ServerConfig, updates: &[ClientUpdate], expected: usize) -> Result<Vec<ServerPayload>> {
    let mut ordered: Vec<Option<&ClientUpdate>> = vec![None; expected];
    for u in updates {
        let slot = ordered
            .get_mut(u.client_id)
            .ok_or_else(|| Error::InvalidArgument(format!("unexpected client {}", u.client_id)))?;
        if slot.is_some() {
            return Err(Error::InvalidArgument(format!("client {} reported twice", u.client_id)));
        }
        *slot = Some(u);
    }
    let ordered: Vec<&ClientUpdate> = ordered
        .into_iter()
        .enumerate()
        .map(|(i, u)| u.ok_or(Error::MissingClient(i)))
        .collect::<Result<_>>()?;
    if ordered.is_empty() {
        return Err(Error::InvalidArgument("no clients".into()));
    }
    let round = ordered[0].round;
    if let Some(u) = ordered.iter().find(|u| u.round != round) {
        return Err(Error::InvalidArgument(format!(
            "client {} reported round {} during round {round}",
            u.client_id, u.round
        )));
    }

    let shared: Vec<&ParamSet> = ordered.iter().map(|u| &u.shared).collect();
    let fused: Vec<ParamSet> = match config.fusion {
        Fusion::GraphAttention { epsilon } => {
            let protos: Vec<Matrix> = ordered.iter().map(|u| u.prototype.clone()).collect();
            graph_attention_fusion(&protos, &shared, epsilon)?
        }
        Fusion::SampleWeighted => {
            let w: Vec<f64> = ordered.iter().map(|u| u.sample_count as f64).collect();
            vec![fedavg_aggregate(&shared, &w)?; ordered.len()]
        }
        Fusion::Uniform => {
            let w = vec![1.0; ordered.len()];
            vec![fedavg_aggregate(&shared, &w)?; ordered.len()]
        }
    };

    let uploaded: Vec<Matrix> = ordered.iter().map(|u| u.bank.clone()).collect();
    let banks = match config.banks {
        BankPolicy::Sharing(cps) if uploaded.len() >= 2 => collaborative_pattern_sharing(&uploaded, &cps)?,
        BankPolicy::Sharing(_) | BankPolicy::Echo => uploaded,
        BankPolicy::Average => {
            let mut mean = Matrix::zeros(uploaded[0].rows(), uploaded[0].cols());
            let inv = 1.0 / uploaded.len() as f64;
            for b in &uploaded {
                if b.shape() != mean.shape() {
                    return Err(Error::Shape {
                        op: "bank average",
                        expected: mean.shape(),
                        found: b.shape(),
                    });
                }
                mean.axpy(inv, b);
            }
            vec![mean; uploaded.len()]
        }
    };

    Ok(fused
        .into_iter()
        .zip(banks)
        .enumerate()
        .map(|(client_id, (shared, bank))| ServerPayload {
            client_id,
            round,
            shared,
            bank,
        })
        .collect())
}

/// Everything one client keeps between rounds.
#[derive(Clone, Debug)]
pub struct ClientState {
    pub client_id: usize,
    pub model: DualBranchModel,
    pub optimizer: Adam,
    pub critic_optimizer: Adam,
    /// Training windows, used as the aggregation weight.
    pub sample_count: usize,
}

impl ClientState {
    pub fn new(client_id: usize, model: DualBranchModel, lr: f64, sample_count: usize) -> Self {
        Self {
            client_id,
            model,
            optimizer: Adam::new(lr),
            critic_optimizer: Adam::new(lr),
            sample_count,
        }
    }

    pub fn install(&mut self, payload: &ServerPayload) -> Result<()> {
        if payload.client_id != self.client_id {
            return Err(Error::InvalidArgument(format!(
                "payload for client {} delivered to client {}",
                payload.client_id, self.client_id
            )));
        }
        self.model.install(&payload.shared, &payload.bank)
    }

    pub fn upload(&self, round: usize) -> Result<ClientUpdate> {
        Ok(ClientUpdate {
            client_id: self.client_id,
            round,
            sample_count: self.sample_count,
            shared: self.model.shared_params(),
            bank: self.model.global_bank().clone(),
            prototype: model_prototype(&self.model)?.vector,
        })
    }
}

/// Means of the per-batch training statistics of one local round.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LocalRoundStats {
    pub batches: usize,
    pub loss: f64,
    pub mae: f64,
    pub mi: f64,
}

/// Installs `payload` (if any), trains `epochs` passes over the batches
/// supplied for each epoch, and returns the upload for `round`. With
/// `prox_mu` set, the proximal reference is the shared set at the start of
/// the round.
pub fn client_local_round<F>(
    state: &mut ClientState,
    payload: Option<&ServerPayload>,
    round: usize,
    epochs: usize,
    mut batches_for_epoch: F,
    prox_mu: Option<f64>,
) -> Result<(ClientUpdate, LocalRoundStats)>
where
    F: FnMut(usize) -> Vec<WindowBatch>,
{
    if let Some(p) = payload {
        state.install(p)?;
    }
    let reference = prox_mu.map(|_| state.model.shared_params());
    let mut stats = LocalRoundStats::default();
    for epoch in 0..epochs {
        for batch in batches_for_epoch(epoch) {
            let prox = reference.as_ref().zip(prox_mu);
            let s = state
                .model
                .train_step(&batch, &mut state.optimizer, &mut state.critic_optimizer, prox)?;
            stats.batches += 1;
            stats.loss += s.loss;
            stats.mae += s.mae;
            stats.mi += s.mi;
        }
    }
    if stats.batches > 0 {
        let n = stats.batches as f64;
        stats.loss /= n;
        stats.mae /= n;
        stats.mi /= n;
    }
    Ok((state.upload(round)?, stats))
}
