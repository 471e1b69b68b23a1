//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Tape`] records every operation as it is evaluated; [`Tape::backward`]
//! walks the record in reverse and accumulates adjoints. Nodes created from
//! [`Tape::constant`] (and everything computed only from constants) carry no
//! gradient, so data inputs cost nothing on the backward pass.

use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::tensor::{gemm, strided_gemm, Matrix};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `left [r x n]` applied to each `n`-row block of `right`.
    BlockLeftMul { left: Var, right: Var, blocks: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Square(Var),
    Abs(Var),
    SoftmaxRows(Var),
    ConcatCols(Var, Var),
    SliceCols { src: Var, start: usize },
    Transpose(Var),
    Reshape(Var),
    OuterAddRows(Var, Var),
    /// `aux` indexes the stored `tanh` activations.
    AdditiveScores { q: Var, k: Var, v: Var, aux: usize },
    BlockMean { src: Var, blocks: usize },
    MeanRows(Var),
    SumCols(Var),
    Mean(Var),
    Sum(Var),
}

struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    aux: Vec<Matrix>,
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of the given shape when nothing flowed to it.
    pub fn get_or_zeros(&self, v: Var, rows: usize, cols: usize) -> Matrix {
        self.get(v).cloned().unwrap_or_else(|| Matrix::zeros(rows, cols))
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A differentiable leaf (a parameter).
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that receives no gradient (data, frozen values).
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "scalar() on a non-scalar node");
        m.get(0, 0)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols(), bv.rows(), "matmul inner dimension");
        let mut out = Matrix::zeros(av.rows(), bv.cols());
        gemm(1.0, av, false, bv, false, 0.0, &mut out);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul(a, b), rg)
    }

    /// Applies `left [r x n]` to every block of a node-major
    /// `right [n*blocks x c]` (row `j * blocks + b` is node `j` of block `b`),
    /// giving `[r*blocks x c]` in the same layout. The buffer is an
    /// `[n x blocks*c]` matrix, so this is a single GEMM.
    pub fn block_left_mul(&mut self, left: Var, right: Var, blocks: usize) -> Var {
        let (lv, rv) = (self.value(left), self.value(right));
        let (r, n) = lv.shape();
        let c = rv.cols();
        assert_eq!(rv.rows(), blocks * n, "block_left_mul block layout");
        let mut out = Matrix::zeros(blocks * r, c);
        strided_gemm((r, n, blocks * c), 1.0, (lv.as_slice(), n, 1), (rv.as_slice(), blocks * c, 1), 0.0, out.as_mut_slice());
        let rg = self.rg(left) || self.rg(right);
        self.push(out, Op::BlockLeftMul { left, right, blocks }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Sub(a, b), rg)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul(a, b), rg)
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let out = self
            .value(a)
            .add_row(self.value(row))
            .expect("add_row shape");
        let rg = self.rg(a) || self.rg(row);
        self.push(out, Op::AddRow(a, row), rg)
    }

    /// Multiplies every row of `a` elementwise by a `1 x c` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!(rv.shape(), (1, av.cols()), "mul_row shape");
        let mut out = av.clone();
        for i in 0..out.rows() {
            for (x, r) in out.row_mut(i).iter_mut().zip(rv.as_slice()) {
                *x *= r;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(out, Op::MulRow(a, row), rg)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, move |x| k * x, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, move |x| x + k, Op::AddScalar(a))
    }

    /// `1 - a`
    pub fn one_minus(&mut self, a: Var) -> Var {
        let neg = self.scale(a, -1.0);
        self.add_scalar(neg, 1.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, math::sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, math::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, math::exp, Op::Exp(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out = self.value(a).softmax_rows();
        let rg = self.rg(a);
        self.push(out, Op::SoftmaxRows(a), rg)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let out = self
            .value(a)
            .concat_cols(self.value(b))
            .expect("concat_cols rows");
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::ConcatCols(a, b), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        assert!(start + len <= av.cols(), "slice_cols out of range");
        let out = Matrix::from_fn(av.rows(), len, |i, j| av.get(i, start + j));
        let rg = self.rg(a);
        self.push(out, Op::SliceCols { src: a, start }, rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(out, Op::Transpose(a), rg)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let out = self.value(a).clone().reshaped(rows, cols).expect("reshape");
        let rg = self.rg(a);
        self.push(out, Op::Reshape(a), rg)
    }

    /// `a [n x h]`, `b [k x h]` -> `[(n*k) x h]` with row `i*k + j = a_i + b_j`.
    pub fn outer_add_rows(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols(), bv.cols(), "outer_add_rows width");
        let (n, k, h) = (av.rows(), bv.rows(), av.cols());
        let mut out = Matrix::zeros(n * k, h);
        for i in 0..n {
            let ai = av.row(i);
            for j in 0..k {
                let bj = bv.row(j);
                for (o, (x, y)) in out.row_mut(i * k + j).iter_mut().zip(ai.iter().zip(bj)) {
                    *o = x + y;
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::OuterAddRows(a, b), rg)
    }

    /// `out[i, j] = sum_c v_c tanh(q[i, c] + k[j, c])` for `q [n x h]`,
    /// `k [m x h]`, `v [h x 1]`; an additive-attention scorer without the
    /// `[n*m x h]` intermediates on the tape.
    pub fn additive_scores(&mut self, q: Var, k: Var, v: Var) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, h) = qv.shape();
        let m = kv.rows();
        assert_eq!(kv.cols(), h, "additive_scores key width");
        assert_eq!(vv.shape(), (h, 1), "additive_scores output vector");
        let w = vv.as_slice();
        let mut act = Matrix::zeros(n * m, h);
        let mut out = Matrix::zeros(n, m);
        for i in 0..n {
            let qi = qv.row(i);
            for j in 0..m {
                let kj = kv.row(j);
                let t = act.row_mut(i * m + j);
                let mut acc = 0.0;
                for c in 0..h {
                    let a = math::tanh(qi[c] + kj[c]);
                    t[c] = a;
                    acc += w[c] * a;
                }
                out.set(i, j, acc);
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        let aux = self.aux.len();
        self.aux.push(act);
        self.push(out, Op::AdditiveScores { q, k, v, aux }, rg)
    }

    /// Node-major block mean: row `i` of the `[r x c]` result averages rows
    /// `i * blocks .. (i + 1) * blocks` of `a`.
    pub fn block_mean(&mut self, a: Var, blocks: usize) -> Var {
        let av = self.value(a);
        assert!(blocks > 0 && av.rows() % blocks == 0, "block_mean layout");
        let r = av.rows() / blocks;
        let c = av.cols();
        let inv = 1.0 / blocks as f64;
        let out = Matrix::from_fn(r, c, |i, k| (0..blocks).map(|b| av.get(i * blocks + b, k)).sum::<f64>() * inv);
        let rg = self.rg(a);
        self.push(out, Op::BlockMean { src: a, blocks }, rg)
    }

    /// Column means, `[r x c] -> [1 x c]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let out = self.value(a).mean_rows();
        let rg = self.rg(a);
        self.push(out, Op::MeanRows(a), rg)
    }

    /// Row sums, `[r x c] -> [r x 1]`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let out = Matrix::from_fn(av.rows(), 1, |i, _| av.row(i).iter().sum());
        let rg = self.rg(a);
        self.push(out, Op::SumCols(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a).mean();
        let rg = self.rg(a);
        self.push(Matrix::filled(1, 1, m), Op::Mean(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Matrix::filled(1, 1, s), Op::Sum(a), rg)
    }

    /// Reverse pass from a scalar `loss` node. Adjoints are kept for leaves
    /// only.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward from a non-scalar node");
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            // only leaves are read back; interior adjoints are freed early
            if matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], v: Var, delta: Matrix) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn accumulate_with(
        &self,
        grads: &mut [Option<Matrix>],
        v: Var,
        f: impl FnOnce(&mut Matrix),
    ) {
        if !self.rg(v) {
            return;
        }
        let (r, c) = self.shape(v);
        let slot = grads[v.0].get_or_insert_with(|| Matrix::zeros(r, c));
        f(slot);
    }

    fn propagate(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let out = &self.nodes[idx].value;
        match self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                self.accumulate_with(grads, a, |ga| gemm(1.0, g, false, bv, true, 1.0, ga));
                self.accumulate_with(grads, b, |gb| gemm(1.0, av, true, g, false, 1.0, gb));
            }
            Op::BlockLeftMul {
                left,
                right,
                blocks,
            } => {
                let (lv, rv) = (self.value(left), self.value(right));
                let (r, n) = lv.shape();
                let c = rv.cols();
                let bc = blocks * c;
                self.accumulate_with(grads, left, |gl| {
                    strided_gemm((r, bc, n), 1.0, (g.as_slice(), bc, 1), (rv.as_slice(), 1, bc), 1.0, gl.as_mut_slice());
                });
                self.accumulate_with(grads, right, |gr| {
                    strided_gemm((n, r, bc), 1.0, (lv.as_slice(), 1, n), (g.as_slice(), bc, 1), 1.0, gr.as_mut_slice());
                });
            }
            Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                self.accumulate_with(grads, a, |ga| {
                    for ((o, gi), bi) in ga.as_mut_slice().iter_mut().zip(g.as_slice()).zip(bv.as_slice()) {
                        *o += gi * bi;
                    }
                });
                self.accumulate_with(grads, b, |gb| {
                    for ((o, gi), ai) in gb.as_mut_slice().iter_mut().zip(g.as_slice()).zip(av.as_slice()) {
                        *o += gi * ai;
                    }
                });
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, row, g.mean_rows().scale(g.rows() as f64));
            }
            Op::MulRow(a, row) => {
                let (av, rv) = (self.value(a), self.value(row));
                self.accumulate_with(grads, a, |ga| {
                    for i in 0..g.rows() {
                        for ((o, gi), ri) in ga.row_mut(i).iter_mut().zip(g.row(i)).zip(rv.as_slice()) {
                            *o += gi * ri;
                        }
                    }
                });
                self.accumulate_with(grads, row, |gr| {
                    for i in 0..g.rows() {
                        for ((o, gi), ai) in gr.as_mut_slice().iter_mut().zip(g.row(i)).zip(av.row(i)) {
                            *o += gi * ai;
                        }
                    }
                });
            }
            Op::Scale(a, k) => self.accumulate(grads, a, g.scale(k)),
            Op::AddScalar(a) => self.accumulate(grads, a, g.clone()),
            Op::Sigmoid(a) => self.accumulate(grads, a, g.zip_map(out, |gi, y| gi * y * (1.0 - y))),
            Op::Tanh(a) => self.accumulate(grads, a, g.zip_map(out, |gi, y| gi * (1.0 - y * y))),
            Op::Relu(a) => {
                let x = self.value(a);
                self.accumulate(grads, a, g.zip_map(x, |gi, xi| if xi > 0.0 { gi } else { 0.0 }));
            }
            Op::Exp(a) => self.accumulate(grads, a, g.zip_map(out, |gi, y| gi * y)),
            Op::Square(a) => {
                let x = self.value(a);
                self.accumulate(grads, a, g.zip_map(x, |gi, xi| 2.0 * gi * xi));
            }
            Op::Abs(a) => {
                let x = self.value(a);
                self.accumulate(
                    grads,
                    a,
                    g.zip_map(x, |gi, xi| {
                        if xi > 0.0 {
                            gi
                        } else if xi < 0.0 {
                            -gi
                        } else {
                            0.0
                        }
                    }),
                );
            }
            Op::SoftmaxRows(a) => {
                let mut d = Matrix::zeros(out.rows(), out.cols());
                for i in 0..out.rows() {
                    let (y, gi) = (out.row(i), g.row(i));
                    let dot: f64 = y.iter().zip(gi).map(|(p, q)| p * q).sum();
                    for ((o, p), q) in d.row_mut(i).iter_mut().zip(y).zip(gi) {
                        *o = p * (q - dot);
                    }
                }
                self.accumulate(grads, a, d);
            }
            Op::ConcatCols(a, b) => {
                let ca = self.value(a).cols();
                let cb = self.value(b).cols();
                self.accumulate(grads, a, Matrix::from_fn(g.rows(), ca, |i, j| g.get(i, j)));
                self.accumulate(grads, b, Matrix::from_fn(g.rows(), cb, |i, j| g.get(i, ca + j)));
            }
            Op::SliceCols { src, start } => {
                self.accumulate_with(grads, src, |gs| {
                    for i in 0..g.rows() {
                        for (j, gi) in g.row(i).iter().enumerate() {
                            let cur = gs.get(i, start + j);
                            gs.set(i, start + j, cur + gi);
                        }
                    }
                });
            }
            Op::Transpose(a) => self.accumulate(grads, a, g.transpose()),
            Op::Reshape(a) => {
                let (r, c) = self.shape(a);
                self.accumulate(grads, a, g.clone().reshaped(r, c).expect("reshape grad"));
            }
            Op::AdditiveScores { q, k, v, aux } => {
                let act = &self.aux[aux];
                let (n, m) = g.shape();
                let h = act.cols();
                let w = self.value(v).as_slice();
                let mut gq = Matrix::zeros(n, h);
                let mut gk = Matrix::zeros(m, h);
                let mut gv = Matrix::zeros(h, 1);
                let mut pre = vec![0.0; h];
                for i in 0..n {
                    for j in 0..m {
                        let gij = g.get(i, j);
                        let t = act.row(i * m + j);
                        for c in 0..h {
                            pre[c] = gij * w[c] * (1.0 - t[c] * t[c]);
                            gv.as_mut_slice()[c] += gij * t[c];
                        }
                        gq.row_mut(i).iter_mut().zip(&pre).for_each(|(x, p)| *x += p);
                        gk.row_mut(j).iter_mut().zip(&pre).for_each(|(x, p)| *x += p);
                    }
                }
                self.accumulate(grads, q, gq);
                self.accumulate(grads, k, gk);
                self.accumulate(grads, v, gv);
            }
            Op::OuterAddRows(a, b) => {
                let n = self.value(a).rows();
                let k = self.value(b).rows();
                self.accumulate_with(grads, a, |ga| {
                    for i in 0..n {
                        for j in 0..k {
                            for (o, gi) in ga.row_mut(i).iter_mut().zip(g.row(i * k + j)) {
                                *o += gi;
                            }
                        }
                    }
                });
                self.accumulate_with(grads, b, |gb| {
                    for i in 0..n {
                        for j in 0..k {
                            for (o, gi) in gb.row_mut(j).iter_mut().zip(g.row(i * k + j)) {
                                *o += gi;
                            }
                        }
                    }
                });
            }
            Op::BlockMean { src, blocks } => {
                let inv = 1.0 / blocks as f64;
                let c = g.cols();
                self.accumulate_with(grads, src, |gs| {
                    for (row, o) in gs.as_mut_slice().chunks_mut(c).enumerate() {
                        for (x, gi) in o.iter_mut().zip(g.row(row / blocks)) {
                            *x += gi * inv;
                        }
                    }
                });
            }
            Op::MeanRows(a) => {
                let rows = self.value(a).rows();
                let inv = 1.0 / rows.max(1) as f64;
                self.accumulate_with(grads, a, |ga| {
                    for i in 0..rows {
                        for (o, gi) in ga.row_mut(i).iter_mut().zip(g.as_slice()) {
                            *o += gi * inv;
                        }
                    }
                });
            }
            Op::SumCols(a) => {
                self.accumulate_with(grads, a, |ga| {
                    for i in 0..ga.rows() {
                        let gi = g.get(i, 0);
                        for o in ga.row_mut(i) {
                            *o += gi;
                        }
                    }
                });
            }
            Op::Mean(a) => {
                let (r, c) = self.shape(a);
                let k = g.get(0, 0) / (r * c).max(1) as f64;
                self.accumulate(grads, a, Matrix::filled(r, c, k));
            }
            Op::Sum(a) => {
                let (r, c) = self.shape(a);
                self.accumulate(grads, a, Matrix::filled(r, c, g.get(0, 0)));
            }
        }
    }
}
