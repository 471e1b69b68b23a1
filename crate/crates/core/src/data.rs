//! Traffic series, client partitions, sliding windows, z-score
//! normalization and a synthetic heterogeneous benchmark generator.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::init;
use crate::tensor::Matrix;

/// Readings for `N` sensors over `T_total` steps, one row per step.
#[derive(Clone, Debug, PartialEq)]
pub struct TrafficSeries {
    values: Matrix,
    interval_minutes: u32,
    node_ids: Vec<String>,
}

impl TrafficSeries {
    pub fn new(values: Matrix, interval_minutes: u32, node_ids: Vec<String>) -> Result<Self> {
        if values.cols() == 0 || values.rows() == 0 {
            return Err(Error::InvalidArgument("series must have at least one node and one step".into()));
        }
        if node_ids.len() != values.cols() {
            return Err(Error::InvalidArgument(format!(
                "{} node ids for {} columns",
                node_ids.len(),
                values.cols()
            )));
        }
        if interval_minutes == 0 {
            return Err(Error::InvalidArgument("interval must be positive".into()));
        }
        if !values.is_finite() {
            return Err(Error::NonFinite("traffic series"));
        }
        Ok(Self {
            values,
            interval_minutes,
            node_ids,
        })
    }

    /// Series with generated ids `0..N` at the given interval.
    pub fn with_default_ids(values: Matrix, interval_minutes: u32) -> Result<Self> {
        let ids = (0..values.cols()).map(|i| format!("{i}")).collect();
        Self::new(values, interval_minutes, ids)
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn interval_minutes(&self) -> u32 {
        self.interval_minutes
    }

    pub fn node_ids(&self) -> &[String] {
        &self.node_ids
    }

    pub fn num_steps(&self) -> usize {
        self.values.rows()
    }

    pub fn num_nodes(&self) -> usize {
        self.values.cols()
    }

    fn select_nodes(&self, nodes: &[usize]) -> Matrix {
        Matrix::from_fn(self.values.rows(), nodes.len(), |t, j| self.values.get(t, nodes[j]))
    }
}

/// One client's node subset and its local series.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientPartition {
    pub client_id: usize,
    pub node_indices: Vec<usize>,
    /// `[T_total x |V^(m)|]`
    pub local_series: Matrix,
}

impl ClientPartition {
    pub fn num_nodes(&self) -> usize {
        self.node_indices.len()
    }
}

/// Splits nodes into `clients` contiguous index blocks whose sizes differ by
/// at most one; the first `N mod M` clients get the larger size.
pub fn partition_contiguous(series: &TrafficSeries, clients: usize) -> Result<Vec<ClientPartition>> {
    let n = series.num_nodes();
    if clients == 0 || clients > n {
        return Err(Error::Partition(format!("cannot split {n} nodes across {clients} clients")));
    }
    let base = n / clients;
    let extra = n % clients;
    let mut start = 0;
    let mut assignment = Vec::with_capacity(clients);
    for m in 0..clients {
        let size = base + usize::from(m < extra);
        assignment.push((start..start + size).collect::<Vec<_>>());
        start += size;
    }
    partition_from_assignment(series, &assignment)
}

/// Builds partitions from an explicit `client -> nodes` assignment, which
/// must cover every node exactly once with no empty client.
pub fn partition_from_assignment(
    series: &TrafficSeries,
    assignment: &[Vec<usize>],
) -> Result<Vec<ClientPartition>> {
    let n = series.num_nodes();
    if assignment.is_empty() || assignment.len() > n {
        return Err(Error::Partition(format!(
            "{} clients for {n} nodes",
            assignment.len()
        )));
    }
    let mut owner: Vec<Option<usize>> = vec![None; n];
    for (m, nodes) in assignment.iter().enumerate() {
        if nodes.is_empty() {
            return Err(Error::Partition(format!("client {m} has no nodes")));
        }
        for &v in nodes {
            if v >= n {
                return Err(Error::Partition(format!("node {v} out of range 0..{n}")));
            }
            if let Some(prev) = owner[v] {
                return Err(Error::Partition(format!(
                    "node {v} assigned to clients {prev} and {m}"
                )));
            }
            owner[v] = Some(m);
        }
    }
    if let Some(gap) = owner.iter().position(Option::is_none) {
        return Err(Error::Partition(format!("node {gap} is not assigned")));
    }
    Ok(assignment
        .iter()
        .enumerate()
        .map(|(m, nodes)| ClientPartition {
            client_id: m,
            node_indices: nodes.clone(),
            local_series: series.select_nodes(nodes),
        })
        .collect())
}

/// Temporal split fractions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Splits {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for Splits {
    fn default() -> Self {
        Self {
            train: 0.6,
            val: 0.2,
            test: 0.2,
        }
    }
}

impl Splits {
    /// Step ranges `[0, a)`, `[a, b)`, `[b, len)`.
    pub fn boundaries(&self, len: usize) -> Result<[(usize, usize); 3]> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|f| !(0.0..=1.0).contains(f)) || libm::fabs(self.train + self.val + self.test - 1.0) > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "split fractions {parts:?} must be in [0,1] and sum to 1"
            )));
        }
        let a = libm::floor(len as f64 * self.train + 1e-9) as usize;
        let b = (libm::floor(len as f64 * (self.train + self.val) + 1e-9) as usize).clamp(a, len);
        Ok([(0, a), (a, b), (b, len)])
    }
}

/// Number of stride-1 windows of `input + horizon` steps in `len` steps.
pub fn window_count(len: usize, input: usize, horizon: usize) -> usize {
    (len + 1).saturating_sub(input + horizon)
}

/// Stride-1 windows over one contiguous segment of a client's series.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSet {
    /// `[L x |V|]`
    series: Matrix,
    input: usize,
    horizon: usize,
}

impl WindowSet {
    pub fn new(series: Matrix, input: usize, horizon: usize) -> Result<Self> {
        if input == 0 || horizon == 0 {
            return Err(Error::InvalidArgument("window lengths must be positive".into()));
        }
        Ok(Self {
            series,
            input,
            horizon,
        })
    }

    pub fn len(&self) -> usize {
        window_count(self.series.rows(), self.input, self.horizon)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_nodes(&self) -> usize {
        self.series.cols()
    }

    pub fn input_len(&self) -> usize {
        self.input
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn series(&self) -> &Matrix {
        &self.series
    }

    /// Applies a z-score transform to the underlying segment.
    pub fn normalized(&self, stats: &NormStats) -> Self {
        Self {
            series: stats.forward(&self.series),
            input: self.input,
            horizon: self.horizon,
        }
    }

    /// Gathers the windows starting at `starts` into one batch.
    pub fn batch(&self, starts: &[usize]) -> WindowBatch {
        let v = self.num_nodes();
        let b = starts.len();
        let mut inputs = Vec::with_capacity(self.input);
        for t in 0..self.input {
            inputs.push(Matrix::from_fn(b * v, 1, |row, _| {
                let (node, s) = (row / b, starts[row % b]);
                self.series.get(s + t, node)
            }));
        }
        let targets = Matrix::from_fn(b * v, self.horizon, |row, h| {
            let (node, s) = (row / b, starts[row % b]);
            self.series.get(s + self.input + h, node)
        });
        WindowBatch {
            batch: b,
            nodes: v,
            inputs,
            targets,
        }
    }

    /// Consecutive batches over `order` (a permutation of window starts).
    pub fn batches(&self, order: &[usize], batch_size: usize) -> Vec<WindowBatch> {
        order.chunks(batch_size.max(1)).map(|c| self.batch(c)).collect()
    }

    pub fn all_batches(&self, batch_size: usize) -> Vec<WindowBatch> {
        let order: Vec<usize> = (0..self.len()).collect();
        self.batches(&order, batch_size)
    }
}

/// A batch of windows for one client, stored time-major.
///
/// Rows are laid out node-major: row `v * batch + b` is node `v` of
/// sample `b`. Each entry of `inputs` is one time step `[batch*nodes x F]`;
/// `targets` is `[batch*nodes x T'*F]`. Only `F = 1` is produced by
/// [`WindowSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct WindowBatch {
    pub batch: usize,
    pub nodes: usize,
    pub inputs: Vec<Matrix>,
    pub targets: Matrix,
}

impl WindowBatch {
    pub fn rows(&self) -> usize {
        self.batch * self.nodes
    }

    pub fn input_len(&self) -> usize {
        self.inputs.len()
    }
}

/// Train/validation/test windows for one client.
#[derive(Clone, Debug)]
pub struct SplitWindows {
    pub train: WindowSet,
    pub val: WindowSet,
    pub test: WindowSet,
}

impl SplitWindows {
    pub fn normalized(&self, stats: &NormStats) -> Self {
        Self {
            train: self.train.normalized(stats),
            val: self.val.normalized(stats),
            test: self.test.normalized(stats),
        }
    }
}

/// Cuts a client's series into temporal splits and wraps each in a
/// [`WindowSet`]. Windows never cross a split boundary; a split too short for
/// one window yields an empty set and a warning.
pub fn make_windows(
    partition: &ClientPartition,
    input: usize,
    horizon: usize,
    splits: Splits,
) -> Result<SplitWindows> {
    let series = &partition.local_series;
    if series.rows() < input + horizon {
        return Err(Error::InvalidArgument(format!(
            "{} steps cannot hold one window of {}",
            series.rows(),
            input + horizon
        )));
    }
    let bounds = splits.boundaries(series.rows())?;
    let mut sets = Vec::with_capacity(3);
    for (name, (a, b)) in ["train", "val", "test"].iter().zip(bounds) {
        let seg = Matrix::from_fn(b - a, series.cols(), |t, j| series.get(a + t, j));
        let set = WindowSet::new(seg, input, horizon)?;
        if set.is_empty() {
            log::warn!(
                "client {}: {name} split of {} steps holds no window",
                partition.client_id,
                b - a
            );
        }
        sets.push(set);
    }
    let test = sets.pop().expect("three splits");
    let val = sets.pop().expect("three splits");
    let train = sets.pop().expect("three splits");
    Ok(SplitWindows { train, val, test })
}

/// Scalar z-score statistics for one client.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

impl NormStats {
    pub const MIN_STD: f64 = 1e-8;

    pub fn new(mean: f64, std: f64) -> Result<Self> {
        if !mean.is_finite() || !std.is_finite() {
            return Err(Error::NonFinite("normalization stats"));
        }
        if std < Self::MIN_STD {
            return Err(Error::DegenerateStats { std });
        }
        Ok(Self { mean, std })
    }

    /// Population mean and standard deviation of `values`.
    pub fn fit(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("cannot fit stats on no data".into()));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        Self::new(mean, libm::sqrt(var))
    }

    /// Fits on the training segment of a client's windows.
    pub fn fit_train(windows: &SplitWindows) -> Result<Self> {
        Self::fit(windows.train.series().as_slice())
    }

    #[inline]
    pub fn forward_value(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }

    #[inline]
    pub fn inverse_value(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }

    pub fn forward(&self, m: &Matrix) -> Matrix {
        m.map(|x| self.forward_value(x))
    }

    pub fn inverse(&self, m: &Matrix) -> Matrix {
        m.map(|z| self.inverse_value(z))
    }
}

/// Parameters of the synthetic heterogeneous benchmark.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub clients: usize,
    pub nodes_per_client: usize,
    pub steps: usize,
    /// Number of shared daily prototypes, assigned to nodes round-robin.
    pub shared_prototypes: usize,
    /// Scale of the client-specific AR(1) component.
    pub client_amplitude: f64,
    pub noise_std: f64,
    /// Steps per simulated day (288 at 5-minute resolution).
    pub steps_per_day: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            clients: 4,
            nodes_per_client: 10,
            steps: 2880,
            shared_prototypes: 3,
            client_amplitude: 6.0,
            noise_std: 1.0,
            steps_per_day: 288,
        }
    }
}

impl SyntheticConfig {
    fn validate(&self) -> Result<()> {
        let dims = [
            ("clients", self.clients),
            ("nodes_per_client", self.nodes_per_client),
            ("steps", self.steps),
            ("shared_prototypes", self.shared_prototypes),
            ("steps_per_day", self.steps_per_day),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be positive")));
            }
        }
        if !(self.client_amplitude >= 0.0) || !(self.noise_std >= 0.0) {
            return Err(Error::InvalidArgument("amplitude and noise must be non-negative".into()));
        }
        Ok(())
    }

    /// AR(1) coefficient of client `m`, spread evenly over `[0.3, 0.97]`.
    pub fn ar_coefficient(&self, m: usize) -> f64 {
        if self.clients == 1 {
            return 0.6;
        }
        0.3 + 0.67 * m as f64 / (self.clients - 1) as f64
    }
}

/// Synthetic series plus the client assignment it was generated with.
#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub series: TrafficSeries,
    pub assignment: Vec<Vec<usize>>,
    /// Prototype index of every node.
    pub prototype_of: Vec<usize>,
}

/// Every node follows a shared daily prototype (assigned round-robin by
/// global node index) plus a client-specific AR(1) process plus white
/// observation noise. Client `m` owns nodes `m*k .. (m+1)*k`. The output is
/// a pure function of `(config, seed)`.
pub fn generate_synthetic(config: &SyntheticConfig, seed: u64) -> Result<SyntheticData> {
    config.validate()?;
    let n = config.clients * config.nodes_per_client;
    let day = config.steps_per_day as f64;

    let mut proto_rng = init::rng(init::derive_seed(seed, "synthetic.prototypes", 0));
    let protos: Vec<[f64; 5]> = (0..config.shared_prototypes)
        .map(|_| {
            [
                proto_rng.random_range(45.0..60.0),
                proto_rng.random_range(8.0..16.0),
                proto_rng.random_range(0.0..2.0 * PI),
                proto_rng.random_range(2.0..6.0),
                proto_rng.random_range(0.0..2.0 * PI),
            ]
        })
        .collect();
    let prototype_of: Vec<usize> = (0..n).map(|v| v % config.shared_prototypes).collect();

    let mut values = Matrix::zeros(config.steps, n);
    for v in 0..n {
        let m = v / config.nodes_per_client;
        let phi = config.ar_coefficient(m);
        let innovation = libm::sqrt(1.0 - phi * phi);
        let mut rng = init::rng(init::derive_seed(seed, "synthetic.node", v as u64));
        let [level, amp1, ph1, amp2, ph2] = protos[prototype_of[v]];
        let mut z: f64 = StandardNormal.sample(&mut rng);
        for t in 0..config.steps {
            let tt = t as f64;
            let base = level
                + amp1 * libm::sin(2.0 * PI * tt / day + ph1)
                + amp2 * libm::sin(4.0 * PI * tt / day + ph2);
            let eta: f64 = StandardNormal.sample(&mut rng);
            z = phi * z + innovation * eta;
            let noise: f64 = StandardNormal.sample(&mut rng);
            values.set(t, v, base + config.client_amplitude * z + config.noise_std * noise);
        }
    }
    let assignment = (0..config.clients)
        .map(|m| (m * config.nodes_per_client..(m + 1) * config.nodes_per_client).collect())
        .collect();
    Ok(SyntheticData {
        series: TrafficSeries::with_default_ids(values, 5)?,
        assignment,
        prototype_of,
    })
}

/// Draws a uniformly random permutation of `0..n`.
pub fn shuffled_indices(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(steps: usize, nodes: usize) -> TrafficSeries {
        let m = Matrix::from_fn(steps, nodes, |t, j| (t * nodes + j) as f64);
        TrafficSeries::with_default_ids(m, 5).unwrap()
    }

    #[test]
    fn contiguous_even_split() {
        let parts = partition_contiguous(&series(30, 8), 4).unwrap();
        let sizes: Vec<_> = parts.iter().map(ClientPartition::num_nodes).collect();
        assert_eq!(sizes, [2, 2, 2, 2]);
        assert_eq!(parts[0].node_indices, [0, 1]);
    }

    #[test]
    fn contiguous_remainder_rule() {
        let sizes: Vec<_> = partition_contiguous(&series(30, 7), 4)
            .unwrap()
            .iter()
            .map(ClientPartition::num_nodes)
            .collect();
        assert_eq!(sizes, [2, 2, 2, 1]);
        let sizes: Vec<_> = partition_contiguous(&series(2, 207), 4)
            .unwrap()
            .iter()
            .map(ClientPartition::num_nodes)
            .collect();
        assert_eq!(sizes, [52, 52, 52, 51]);
    }

    #[test]
    fn partition_local_series_selects_columns() {
        let s = series(3, 5);
        let parts = partition_from_assignment(&s, &[vec![4, 0], vec![1, 2, 3]]).unwrap();
        assert_eq!(parts[0].local_series.get(2, 0), s.values().get(2, 4));
        assert_eq!(parts[0].local_series.get(2, 1), s.values().get(2, 0));
    }

    #[test]
    fn partition_rejects_bad_assignments() {
        let s = series(3, 4);
        assert!(partition_contiguous(&s, 5).is_err());
        assert!(partition_contiguous(&s, 0).is_err());
        assert!(partition_from_assignment(&s, &[vec![0, 1], vec![1, 2, 3]]).is_err());
        assert!(partition_from_assignment(&s, &[vec![0, 1], vec![2]]).is_err());
        assert!(partition_from_assignment(&s, &[vec![0, 1, 2, 3], vec![]]).is_err());
    }

    #[test]
    fn window_counts() {
        assert_eq!(window_count(36, 12, 12), 13);
        assert_eq!(window_count(24, 12, 12), 1);
        assert_eq!(window_count(23, 12, 12), 0);
    }

    #[test]
    fn windows_do_not_cross_splits() {
        let s = series(100, 2);
        let p = partition_contiguous(&s, 1).unwrap().remove(0);
        let w = make_windows(&p, 3, 2, Splits::default()).unwrap();
        assert_eq!(w.train.series().rows(), 60);
        assert_eq!(w.val.series().rows(), 20);
        assert_eq!(w.test.series().rows(), 20);
        assert_eq!(w.train.len(), 56);
        // last train window ends exactly at step 59
        let last = w.train.batch(&[55]);
        assert_eq!(last.targets.get(1, 1), s.values().get(59, 1));
        // first val window starts at step 60
        let first = w.val.batch(&[0]);
        assert_eq!(first.inputs[0].get(0, 0), s.values().get(60, 0));
    }

    #[test]
    fn short_split_gives_empty_stream() {
        let s = series(30, 1);
        let p = partition_contiguous(&s, 1).unwrap().remove(0);
        let w = make_windows(&p, 12, 12, Splits::default()).unwrap();
        assert!(w.val.is_empty());
        assert!(w.train.is_empty());
        assert!(make_windows(&partition_contiguous(&series(23, 1), 1).unwrap()[0], 12, 12, Splits::default()).is_err());
    }

    #[test]
    fn batch_layout() {
        let s = series(10, 3);
        let p = partition_contiguous(&s, 1).unwrap().remove(0);
        let set = WindowSet::new(p.local_series, 2, 1).unwrap();
        let b = set.batch(&[4, 0]);
        assert_eq!(b.rows(), 6);
        assert_eq!(b.inputs.len(), 2);
        // sample 0 (start 4), node 2, t = 1
        assert_eq!(b.inputs[1].get(4, 0), s.values().get(5, 2));
        // sample 1 (start 0), node 1, horizon 0 -> step 2
        assert_eq!(b.targets.get(3, 0), s.values().get(2, 1));
    }

    #[test]
    fn normalize_examples() {
        let st = NormStats::new(50.0, 10.0).unwrap();
        assert_eq!(st.forward_value(65.0), 1.5);
        assert_eq!(st.forward_value(50.0), 0.0);
        assert!(NormStats::new(0.0, 1e-9).is_err());
        assert!(NormStats::fit(&[3.0, 3.0, 3.0]).is_err());
    }

    #[test]
    fn synthetic_shape_and_determinism() {
        let cfg = SyntheticConfig::default();
        let a = generate_synthetic(&cfg, 11).unwrap();
        let b = generate_synthetic(&cfg, 11).unwrap();
        assert_eq!(a.series.values().shape(), (2880, 40));
        assert_eq!(a.series.values(), b.series.values());
        let c = generate_synthetic(&cfg, 12).unwrap();
        assert_ne!(a.series.values(), c.series.values());
        assert_eq!(a.assignment.len(), 4);
        assert_eq!(a.assignment[1], (10..20).collect::<Vec<_>>());
    }

    #[test]
    fn synthetic_homogeneous_when_no_client_dynamics() {
        let cfg = SyntheticConfig {
            client_amplitude: 0.0,
            noise_std: 0.0,
            steps: 300,
            ..SyntheticConfig::default()
        };
        let d = generate_synthetic(&cfg, 3).unwrap();
        let vals = d.series.values();
        for v in 0..40 {
            let first_same = d.prototype_of[v];
            assert_eq!(first_same, v % 3);
            for t in 0..300 {
                assert_eq!(vals.get(t, v), vals.get(t, first_same));
            }
        }
    }

    #[test]
    fn synthetic_rejects_zero_dims() {
        let cfg = SyntheticConfig {
            clients: 0,
            ..SyntheticConfig::default()
        };
        assert!(generate_synthetic(&cfg, 0).is_err());
    }
}
