//! One complete federated round checked against a separate straight-line
//! implementation. The oracle works per sample on nested `Vec`s, takes
//! gradients by forward-mode dual numbers (one tangent per scalar
//! parameter), computes the CLUB bound by brute force over all pairs, and
//! runs its own Adam, pattern sharing and fusion.

use std::collections::BTreeMap;

use feddis_core::data::{WindowBatch, WindowSet};
use feddis_core::disentangle::BankInit;
use feddis_core::model::{DualBranchModel, ModelConfig};
use feddis_core::protocol::{
    client_local_round, server_round, BankPolicy, ClientState, ClientUpdate, CpsConfig, Fusion, ServerConfig,
};
use feddis_core::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-10;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

// ---- dual numbers -------------------------------------------------------

/// Value plus gradient with respect to every seeded parameter; an empty
/// gradient means a constant.
#[derive(Clone, Debug)]
struct D {
    v: f64,
    g: Vec<f64>,
}

fn k(v: f64) -> D {
    D { v, g: Vec::new() }
}

fn combine(a: &[f64], ca: f64, b: &[f64], cb: f64) -> Vec<f64> {
    match (a.is_empty(), b.is_empty()) {
        (true, true) => Vec::new(),
        (false, true) => a.iter().map(|x| ca * x).collect(),
        (true, false) => b.iter().map(|x| cb * x).collect(),
        (false, false) => a.iter().zip(b).map(|(x, y)| ca * x + cb * y).collect(),
    }
}

fn add(a: &D, b: &D) -> D {
    D { v: a.v + b.v, g: combine(&a.g, 1.0, &b.g, 1.0) }
}
fn sub(a: &D, b: &D) -> D {
    D { v: a.v - b.v, g: combine(&a.g, 1.0, &b.g, -1.0) }
}
fn mul(a: &D, b: &D) -> D {
    D { v: a.v * b.v, g: combine(&a.g, b.v, &b.g, a.v) }
}
fn scale(a: &D, s: f64) -> D {
    D { v: a.v * s, g: combine(&a.g, s, &[], 0.0) }
}
/// `f(a)` with derivative `df`.
fn unary(a: &D, v: f64, df: f64) -> D {
    D { v, g: combine(&a.g, df, &[], 0.0) }
}
fn exp(a: &D) -> D {
    let e = a.v.exp();
    unary(a, e, e)
}
fn tanh(a: &D) -> D {
    let t = a.v.tanh();
    unary(a, t, 1.0 - t * t)
}
fn sigmoid(a: &D) -> D {
    let s = 1.0 / (1.0 + (-a.v).exp());
    unary(a, s, s * (1.0 - s))
}
fn relu(a: &D) -> D {
    if a.v > 0.0 {
        a.clone()
    } else {
        k(0.0)
    }
}
fn abs(a: &D) -> D {
    if a.v >= 0.0 {
        a.clone()
    } else {
        scale(a, -1.0)
    }
}
fn sum(xs: impl IntoIterator<Item = D>) -> D {
    xs.into_iter().fold(k(0.0), |acc, x| add(&acc, &x))
}

type M = Vec<Vec<D>>;

fn konst(m: &Matrix) -> M {
    (0..m.rows()).map(|i| m.row(i).iter().map(|&v| k(v)).collect()).collect()
}
fn values(m: &M) -> Matrix {
    Matrix::from_rows(&m.iter().map(|r| r.iter().map(|d| d.v).collect::<Vec<_>>()).collect::<Vec<_>>())
}
fn matmul(a: &M, b: &M) -> M {
    let inner = b.len();
    let cols = b[0].len();
    a.iter()
        .map(|row| (0..cols).map(|j| sum((0..inner).map(|t| mul(&row[t], &b[t][j])))).collect())
        .collect()
}
fn transpose(a: &M) -> M {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j].clone()).collect()).collect()
}
fn plus_row(a: &M, b: &M) -> M {
    a.iter().map(|r| r.iter().zip(&b[0]).map(|(x, y)| add(x, y)).collect()).collect()
}
fn zip(a: &M, b: &M, f: impl Fn(&D, &D) -> D) -> M {
    a.iter().zip(b).map(|(r, s)| r.iter().zip(s).map(|(x, y)| f(x, y)).collect()).collect()
}
fn map(a: &M, f: impl Fn(&D) -> D) -> M {
    a.iter().map(|r| r.iter().map(&f).collect()).collect()
}
fn softmax(row: &[D]) -> Vec<D> {
    let max = row.iter().map(|d| d.v).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<D> = row.iter().map(|d| exp(&unary(d, d.v - max, 1.0))).collect();
    let z = sum(e.iter().cloned());
    let inv = unary(&z, 1.0 / z.v, -1.0 / (z.v * z.v));
    e.iter().map(|x| mul(x, &inv)).collect()
}
fn softmax_rows(a: &M) -> M {
    a.iter().map(|r| softmax(r)).collect()
}
fn concat(a: &M, b: &M) -> M {
    a.iter().zip(b).map(|(x, y)| x.iter().chain(y).cloned().collect()).collect()
}

// ---- parameters ---------------------------------------------------------

#[derive(Clone, Debug)]
struct Params(BTreeMap<String, Matrix>);

impl Params {
    /// Binds every tensor; tensors in `seeded` get one tangent direction
    /// per scalar, numbered in map order.
    fn bind(&self, seeded: &[String]) -> (BTreeMap<String, M>, usize) {
        let n: usize = seeded.iter().map(|s| self.0[s].len()).sum();
        let mut offset = 0;
        let mut out = BTreeMap::new();
        for (name, m) in &self.0 {
            let bound = if seeded.contains(name) {
                let mut rows = Vec::new();
                for i in 0..m.rows() {
                    let mut row = Vec::new();
                    for j in 0..m.cols() {
                        let mut g = vec![0.0; n];
                        g[offset] = 1.0;
                        offset += 1;
                        row.push(D { v: m.get(i, j), g });
                    }
                    rows.push(row);
                }
                rows
            } else {
                konst(m)
            };
            out.insert(name.clone(), bound);
        }
        (out, n)
    }

    /// Splits a flat gradient back into tensors in seeding order.
    fn unflatten(&self, seeded: &[String], g: &[f64]) -> BTreeMap<String, Matrix> {
        let mut offset = 0;
        let mut out = BTreeMap::new();
        for name in self.0.keys().filter(|n| seeded.contains(n)) {
            let m = &self.0[name];
            let data = if g.is_empty() { vec![0.0; m.len()] } else { g[offset..offset + m.len()].to_vec() };
            offset += m.len();
            out.insert(name.clone(), Matrix::from_vec(m.rows(), m.cols(), data).unwrap());
        }
        out
    }
}

#[derive(Default)]
struct OracleAdam {
    t: i32,
    m: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
    lr: f64,
}

impl OracleAdam {
    fn step(&mut self, params: &mut Params, grads: &BTreeMap<String, Matrix>) {
        self.t += 1;
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        for (name, g) in grads {
            let p = params.0.get_mut(name).unwrap();
            let (m, v) = self.m.entry(name.clone()).or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            for i in 0..g.len() {
                let gi = g.as_slice()[i];
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let mh = m[i] / (1.0 - b1.powi(self.t));
                let vh = v[i] / (1.0 - b2.powi(self.t));
                p.as_mut_slice()[i] -= self.lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

// ---- model, per sample --------------------------------------------------

struct Cfg {
    layers: usize,
    momentum: f64,
    lambda: f64,
}

/// Final top-layer hidden state `[V x C]` of one encoder for one sample.
fn encode(p: &BTreeMap<String, M>, branch: &str, x: &[M], layers: usize) -> M {
    let e = &p[&format!("{branch}.enc.embed")];
    let adj = softmax_rows(&map(&matmul(e, &transpose(e)), relu));
    let v = e.len();
    let c = p[&format!("{branch}.enc.l0.b_z")][0].len();
    let mut h: Vec<M> = (0..layers).map(|_| vec![vec![k(0.0); c]; v]).collect();
    for xt in x {
        let mut feed = xt.clone();
        for l in 0..layers {
            let w = |t: &str| &p[&format!("{branch}.enc.l{l}.{t}")];
            let xh = concat(&feed, &h[l]);
            let axh = matmul(&adj, &xh);
            let z = map(&plus_row(&matmul(&axh, w("w_z")), w("b_z")), sigmoid);
            let r = map(&plus_row(&matmul(&axh, w("w_r")), w("b_r")), sigmoid);
            let rh = zip(&r, &h[l], mul);
            let cand = map(&plus_row(&matmul(&matmul(&adj, &concat(&feed, &rh)), w("w_h")), w("b_h")), tanh);
            let next = zip(&zip(&z, &h[l], mul), &zip(&map(&z, |zz| sub(&k(1.0), zz)), &cand, mul), add);
            h[l] = next;
            feed = h[l].clone();
        }
    }
    h.pop().unwrap()
}

struct Forward {
    /// Stacked sample-major rows.
    s: M,
    d_hat: M,
    y: M,
    new_bank: M,
}

fn forward(p: &BTreeMap<String, M>, cfg: &Cfg, samples: &[Vec<M>]) -> Forward {
    let enc: Vec<(M, M)> = samples
        .iter()
        .map(|x| (encode(p, "global", x, cfg.layers), encode(p, "personal", x, cfg.layers)))
        .collect();

    // momentum update from the batch mean of P D_b
    let proj = &p["personal.projector"];
    let nb = samples.len() as f64;
    let mut current: Option<M> = None;
    for (_, d) in &enc {
        let pd = matmul(proj, d);
        current = Some(match current {
            None => pd,
            Some(acc) => zip(&acc, &pd, add),
        });
    }
    let current = map(&current.unwrap(), |x| scale(x, 1.0 / nb));
    let old = &p["personal.bank"];
    let bank = zip(&map(&current, |x| scale(x, cfg.momentum)), &map(old, |x| scale(x, 1.0 - cfg.momentum)), add);

    let (wq, wk, bias, out) = (
        &p["personal.score.w_query"],
        &p["personal.score.w_key"],
        &p["personal.score.bias"],
        &p["personal.score.out"],
    );
    let keys = plus_row(&matmul(&bank, wk), bias);
    let gbank = &p["global.bank"];
    let mut s_rows = Vec::new();
    let mut dh_rows = Vec::new();
    let mut y_rows = Vec::new();
    for (s, d) in &enc {
        let q = matmul(d, wq);
        let scores: M = q
            .iter()
            .map(|qi| {
                keys.iter()
                    .map(|kk| sum(qi.iter().zip(kk).zip(out).map(|((a, b), o)| mul(&tanh(&add(a, b)), &o[0]))))
                    .collect()
            })
            .collect();
        let d_hat = matmul(&softmax_rows(&scores), &bank);
        let query = plus_row(&matmul(s, &p["global.query.w"]), &p["global.query.b"]);
        let s_hat = matmul(&softmax_rows(&matmul(&query, &transpose(gbank))), gbank);
        let yu = plus_row(&matmul(&zip(s, &s_hat, add), &p["global.head.w"]), &p["global.head.b"]);
        let yp = plus_row(&matmul(&zip(d, &d_hat, add), &p["personal.head.w"]), &p["personal.head.b"]);
        s_rows.extend(s.iter().cloned());
        dh_rows.extend(d_hat);
        y_rows.extend(zip(&yu, &yp, add));
    }
    Forward {
        s: s_rows,
        d_hat: dh_rows,
        y: y_rows,
        new_bank: bank,
    }
}

/// `(mu, logvar)` rows of the critic.
fn critic(p: &BTreeMap<String, M>, d_hat: &M) -> (M, M) {
    let h = map(&plus_row(&matmul(d_hat, &p["critic.w1"]), &p["critic.b1"]), relu);
    let mu = plus_row(&matmul(&h, &p["critic.w_mu"]), &p["critic.b_mu"]);
    let lv = map(&plus_row(&matmul(&h, &p["critic.w_logvar"]), &p["critic.b_logvar"]), |r| {
        scale(&tanh(&scale(r, 1.0 / 6.0)), 6.0)
    });
    (mu, lv)
}

/// `log q(s | mu, lv)` for one row pair.
fn log_density(s: &[D], mu: &[D], lv: &[D]) -> D {
    sum((0..s.len()).map(|c| {
        let diff = sub(&s[c], &mu[c]);
        let maha = mul(&mul(&diff, &diff), &exp(&scale(&lv[c], -1.0)));
        scale(&add(&add(&maha, &lv[c]), &k(LN_2PI)), -0.5)
    }))
}

fn critic_log_likelihood(p: &BTreeMap<String, M>, s: &M, d_hat: &M) -> D {
    let (mu, lv) = critic(p, d_hat);
    let n = s.len() as f64;
    scale(&sum((0..s.len()).map(|i| log_density(&s[i], &mu[i], &lv[i]))), 1.0 / n)
}

fn club_brute_force(p: &BTreeMap<String, M>, s: &M, d_hat: &M) -> D {
    let (mu, lv) = critic(p, d_hat);
    let n = s.len();
    let mut total = k(0.0);
    for i in 0..n {
        let positive = log_density(&s[i], &mu[i], &lv[i]);
        let negative = scale(&sum((0..n).map(|j| log_density(&s[j], &mu[i], &lv[i]))), 1.0 / n as f64);
        total = add(&total, &sub(&positive, &negative));
    }
    scale(&total, 1.0 / n as f64)
}

fn split_samples(batch: &WindowBatch) -> (Vec<Vec<M>>, M) {
    let (v, nb) = (batch.nodes, batch.batch);
    let samples = (0..nb)
        .map(|b| {
            batch
                .inputs
                .iter()
                .map(|x| (0..v).map(|n| x.row(n * nb + b).iter().map(|&z| k(z)).collect()).collect())
                .collect()
        })
        .collect();
    // restack the node-major targets sample by sample
    let targets = (0..nb)
        .flat_map(|b| (0..v).map(move |n| n * nb + b))
        .map(|row| batch.targets.row(row).iter().map(|&z| k(z)).collect())
        .collect();
    (samples, targets)
}

struct OracleClient {
    params: Params,
    main: OracleAdam,
    critic: OracleAdam,
}

const SHARED_EXCLUDED: [&str; 2] = ["global.enc.embed", "global.bank"];

fn is_main(name: &str) -> bool {
    !(name.starts_with("critic.") || name.starts_with("prototype.") || name == "personal.bank")
}

/// One training step: critic ascent, then main descent; returns the loss.
fn oracle_step(client: &mut OracleClient, cfg: &Cfg, batch: &WindowBatch) -> f64 {
    let (samples, targets) = split_samples(batch);
    let main_names: Vec<String> = client.params.0.keys().filter(|n| is_main(n)).cloned().collect();
    let critic_names: Vec<String> = client.params.0.keys().filter(|n| n.starts_with("critic.")).cloned().collect();

    let (bound, _) = client.params.bind(&main_names);
    let f = forward(&bound, cfg, &samples);

    // critic ascent on detached features
    let (cbound, _) = client.params.bind(&critic_names);
    let ll = critic_log_likelihood(&cbound, &konst(&values(&f.s)), &konst(&values(&f.d_hat)));
    let neg: Vec<f64> = ll.g.iter().map(|g| -g).collect();
    let grads = client.params.unflatten(&critic_names, &neg);
    client.critic.step(&mut client.params, &grads);

    // objective with the updated critic held fixed
    let mut frozen = bound.clone();
    for name in &critic_names {
        frozen.insert(name.clone(), konst(&client.params.0[name]));
    }
    let rows = f.y.len() * f.y[0].len();
    let mae = scale(&sum(f.y.iter().flatten().zip(targets.iter().flatten()).map(|(a, b)| abs(&sub(a, b)))), 1.0 / rows as f64);
    let loss = if cfg.lambda > 0.0 {
        add(&mae, &scale(&relu(&club_brute_force(&frozen, &f.s, &f.d_hat)), cfg.lambda))
    } else {
        mae
    };
    let grads = client.params.unflatten(&main_names, &loss.g);
    client.main.step(&mut client.params, &grads);
    *client.params.0.get_mut("personal.bank").unwrap() = values(&f.new_bank);
    loss.v
}

fn oracle_prototype(p: &Params) -> Vec<f64> {
    let e = &p.0["global.enc.embed"];
    let (wv, bv, w) = (&p.0["prototype.w_v"], &p.0["prototype.b_v"], &p.0["prototype.w"]);
    let (n, d) = e.shape();
    let scores: Vec<f64> = (0..n)
        .map(|v| {
            (0..d)
                .map(|j| {
                    let pre: f64 = (0..d).map(|t| e.get(v, t) * wv.get(t, j)).sum::<f64>() + bv.get(0, j);
                    pre.tanh() * w.get(j, 0)
                })
                .sum()
        })
        .collect();
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
    (0..d)
        .map(|j| (0..n).map(|v| (scores[v] - max).exp() / z * e.get(v, j)).sum())
        .collect()
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Pattern sharing by repeated arg-max selection.
fn oracle_cps(banks: &[Matrix], top_k: usize, tau: f64) -> Vec<Matrix> {
    banks
        .iter()
        .enumerate()
        .map(|(m, own)| {
            let mut out = own.clone();
            for j in 0..own.rows() {
                let mut picked: Vec<Vec<f64>> = Vec::new();
                for (n, other) in banks.iter().enumerate() {
                    if n == m {
                        continue;
                    }
                    let mut taken = vec![false; other.rows()];
                    for _ in 0..top_k.min(other.rows()) {
                        let best = (0..other.rows())
                            .filter(|&r| !taken[r])
                            .max_by(|&a, &b| cos(own.row(j), other.row(a)).total_cmp(&cos(own.row(j), other.row(b))).then(b.cmp(&a)))
                            .unwrap();
                        taken[best] = true;
                        if cos(own.row(j), other.row(best)) > tau {
                            picked.push(other.row(best).to_vec());
                        }
                    }
                }
                if !picked.is_empty() {
                    for c in 0..own.cols() {
                        out.set(j, c, picked.iter().map(|p| p[c]).sum::<f64>() / picked.len() as f64);
                    }
                }
            }
            out
        })
        .collect()
}

// ---- the check -----------------------------------------------------------

fn model_config(nodes: usize) -> ModelConfig {
    ModelConfig {
        nodes,
        input_dim: 1,
        horizon: 2,
        hidden: 3,
        embed_dim: 2,
        layers: 2,
        personal_patterns: 2,
        global_patterns: 3,
        momentum: 0.5,
        lambda: 0.1,
        bank_init: BankInit::RandomPcaWhiten,
        personal_extractor: true,
    }
}

fn batches(nodes: usize, seed: u64) -> Vec<WindowBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let series = Matrix::from_fn(12, nodes, |_, _| rng.random_range(-1.5..1.5));
    let set = WindowSet::new(series, 3, 2).unwrap();
    vec![set.batch(&[0, 4]), set.batch(&[6, 2])]
}

fn max_diff(a: &Matrix, b: &Matrix) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.max_abs_diff(b)
}

/// Runs one round of two heterogeneous clients through the library and the
/// oracle and panics on the first tensor or loss that differs by more than
/// `1e-10`.
pub fn check_one_round() {
    let lr = 0.01;
    let eps = 0.5;
    let cps = CpsConfig {
        top_k: 2,
        threshold: -0.2,
        include_self: false,
    };
    let nodes = [2usize, 3];
    let data: Vec<Vec<WindowBatch>> = nodes.iter().enumerate().map(|(m, &n)| batches(n, 40 + m as u64)).collect();

    let mut states: Vec<ClientState> = nodes
        .iter()
        .enumerate()
        .map(|(m, &n)| {
            let model = DualBranchModel::init(model_config(n), 7, 100 + m as u64).unwrap();
            ClientState::new(m, model, lr, 10 + m)
        })
        .collect();
    let mut oracles: Vec<OracleClient> = states
        .iter()
        .map(|s| OracleClient {
            params: Params(s.model.params().iter().map(|(n, m)| (n.to_string(), m.clone())).collect()),
            main: OracleAdam { lr, ..Default::default() },
            critic: OracleAdam { lr, ..Default::default() },
        })
        .collect();

    let cfg = Cfg {
        layers: 2,
        momentum: 0.5,
        lambda: 0.1,
    };
    let mut updates: Vec<ClientUpdate> = Vec::new();
    for (m, state) in states.iter_mut().enumerate() {
        let mut losses = Vec::new();
        for batch in &data[m] {
            losses.push(oracle_step(&mut oracles[m], &cfg, batch));
        }
        let (update, stats) = client_local_round(state, None, 1, 1, |_| data[m].clone(), None).unwrap();
        let oracle_mean = losses.iter().sum::<f64>() / losses.len() as f64;
        assert!((stats.loss - oracle_mean).abs() < TOL, "client {m}: loss {} vs {oracle_mean}", stats.loss);

        // uploaded tensors
        for (name, value) in update.shared.iter() {
            let d = max_diff(value, &oracles[m].params.0[name]);
            assert!(d < TOL, "client {m} {name}: {d:e}");
        }
        let expected_shared: Vec<&String> = oracles[m]
            .params
            .0
            .keys()
            .filter(|n| n.starts_with("global.") && !SHARED_EXCLUDED.contains(&n.as_str()))
            .collect();
        assert_eq!(update.shared.len(), expected_shared.len());
        assert!(max_diff(&update.bank, &oracles[m].params.0["global.bank"]) < TOL);
        let proto = Matrix::row_vector(&oracle_prototype(&oracles[m].params));
        assert!(max_diff(&update.prototype, &proto) < TOL);
        // everything kept locally also agrees
        for (name, value) in state.model.params().iter() {
            let d = max_diff(value, &oracles[m].params.0[name]);
            assert!(d < TOL, "client {m} local {name}: {d:e}");
        }
        updates.push(update);
    }

    // server
    let server = ServerConfig {
        fusion: Fusion::GraphAttention { epsilon: eps },
        banks: BankPolicy::Sharing(cps),
    };
    let payloads = server_round(&server, &updates, 2).unwrap();
    let protos: Vec<Vec<f64>> = oracles.iter().map(|o| oracle_prototype(&o.params)).collect();
    let banks: Vec<Matrix> = oracles.iter().map(|o| o.params.0["global.bank"].clone()).collect();
    let shared_banks = oracle_cps(&banks, cps.top_k, cps.threshold);
    for (i, payload) in payloads.iter().enumerate() {
        let logits: Vec<f64> = protos.iter().map(|p| cos(&protos[i], p) / eps).collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        let w: Vec<f64> = logits.iter().map(|l| l.exp() / z).collect();
        for (name, value) in payload.shared.iter() {
            let mut expect = Matrix::zeros(value.rows(), value.cols());
            for (j, o) in oracles.iter().enumerate() {
                expect.axpy(w[j], &o.params.0[name]);
            }
            assert!(max_diff(value, &expect) < TOL, "fused {name} for client {i}");
        }
        assert!(max_diff(&payload.bank, &shared_banks[i]) < TOL);
    }
}
