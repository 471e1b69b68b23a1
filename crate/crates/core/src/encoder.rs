//! Adaptive graph convolutional recurrent (AGR) encoder.
//!
//! The adjacency is learned from a node embedding `E` as
//! `softmax_rows(relu(E E^T))`; each AGR layer is a GRU whose affine maps are
//! first-order graph convolutions `A X W + b`. Stacked layers run over the
//! input window and the top layer's last hidden state is the node
//! representation.
//!
//! All batched entry points take row-stacked node features: `blocks` samples
//! of `|V|` rows each. The adjacency is applied block by block.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::init;
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub hidden: usize,
    pub embed_dim: usize,
    pub layers: usize,
}

/// Weights of one AGR layer. Gate weights take `[x_t | H_{t-1}]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AgrLayer {
    pub w_z: Matrix,
    pub b_z: Matrix,
    pub w_r: Matrix,
    pub b_r: Matrix,
    pub w_h: Matrix,
    pub b_h: Matrix,
}

pub const AGR_TENSORS: [&str; 6] = ["w_z", "b_z", "w_r", "b_r", "w_h", "b_h"];

impl AgrLayer {
    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        let w = || Matrix::zeros(input_dim + hidden, hidden);
        let b = || Matrix::zeros(1, hidden);
        Self {
            w_z: w(),
            b_z: b(),
            w_r: w(),
            b_r: b(),
            w_h: w(),
            b_h: b(),
        }
    }

    pub fn xavier(input_dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let fan_in = input_dim + hidden;
        Self {
            w_z: init::xavier_uniform(fan_in, hidden, rng),
            b_z: Matrix::zeros(1, hidden),
            w_r: init::xavier_uniform(fan_in, hidden, rng),
            b_r: Matrix::zeros(1, hidden),
            w_h: init::xavier_uniform(fan_in, hidden, rng),
            b_h: Matrix::zeros(1, hidden),
        }
    }

    pub fn hidden(&self) -> usize {
        self.b_z.cols()
    }

    pub fn tensors(&self) -> [&Matrix; 6] {
        [&self.w_z, &self.b_z, &self.w_r, &self.b_r, &self.w_h, &self.b_h]
    }

    pub fn tensors_mut(&mut self) -> [&mut Matrix; 6] {
        [
            &mut self.w_z,
            &mut self.b_z,
            &mut self.w_r,
            &mut self.b_r,
            &mut self.w_h,
            &mut self.b_h,
        ]
    }

    fn bind(&self, tape: &mut Tape, trainable: bool) -> AgrLayerVars {
        let mut leaf = |m: &Matrix| {
            if trainable {
                tape.param(m.clone())
            } else {
                tape.constant(m.clone())
            }
        };
        AgrLayerVars {
            w_z: leaf(&self.w_z),
            b_z: leaf(&self.b_z),
            w_r: leaf(&self.w_r),
            b_r: leaf(&self.b_r),
            w_h: leaf(&self.w_h),
            b_h: leaf(&self.b_h),
        }
    }
}

/// Stacked AGR layers (the recurrent part of one branch's encoder).
#[derive(Clone, Debug, PartialEq)]
pub struct AgrParams {
    pub layers: Vec<AgrLayer>,
}

impl AgrParams {
    pub fn xavier(config: &EncoderConfig, rng: &mut impl Rng) -> Self {
        let layers = (0..config.layers)
            .map(|l| {
                let input = if l == 0 { config.input_dim } else { config.hidden };
                AgrLayer::xavier(input, config.hidden, rng)
            })
            .collect();
        Self { layers }
    }

    pub fn hidden(&self) -> usize {
        self.layers.last().map_or(0, AgrLayer::hidden)
    }

    /// Parameter names of layer `l`, e.g. `enc.l0.w_z`.
    pub fn tensor_name(prefix: &str, layer: usize, tensor: &str) -> String {
        format!("{prefix}.l{layer}.{tensor}")
    }
}

/// Tape handles of one AGR layer.
#[derive(Clone, Copy, Debug)]
pub struct AgrLayerVars {
    pub w_z: Var,
    pub b_z: Var,
    pub w_r: Var,
    pub b_r: Var,
    pub w_h: Var,
    pub b_h: Var,
}

/// Tape handles of a whole encoder.
#[derive(Clone, Debug)]
pub struct EncoderVars {
    pub embed: Var,
    pub layers: Vec<AgrLayerVars>,
}

/// `softmax_rows(relu(E E^T))` on the tape.
pub fn adjacency_on_tape(tape: &mut Tape, embed: Var) -> Var {
    let et = tape.transpose(embed);
    let logits = tape.matmul(embed, et);
    let logits = tape.relu(logits);
    tape.softmax_rows(logits)
}

/// `A X W + b` with `A` applied per `|V|`-row block.
pub fn graph_conv_on_tape(tape: &mut Tape, x: Var, adj: Var, w: Var, b: Var, blocks: usize) -> Var {
    let ax = tape.block_left_mul(adj, x, blocks);
    let axw = tape.matmul(ax, w);
    tape.add_row(axw, b)
}

/// One AGR step; returns `H_t`.
pub fn agr_step_on_tape(
    tape: &mut Tape,
    x_t: Var,
    h_prev: Var,
    adj: Var,
    layer: &AgrLayerVars,
    blocks: usize,
) -> Var {
    let xh = tape.concat_cols(x_t, h_prev);
    // A [x|H] is shared by both gates
    let axh = tape.block_left_mul(adj, xh, blocks);
    let z = tape.matmul(axh, layer.w_z);
    let z = tape.add_row(z, layer.b_z);
    let z = tape.sigmoid(z);
    let r = tape.matmul(axh, layer.w_r);
    let r = tape.add_row(r, layer.b_r);
    let r = tape.sigmoid(r);
    let rh = tape.mul(r, h_prev);
    let xrh = tape.concat_cols(x_t, rh);
    let cand = graph_conv_on_tape(tape, xrh, adj, layer.w_h, layer.b_h, blocks);
    let cand = tape.tanh(cand);
    let keep = tape.mul(z, h_prev);
    let one_minus_z = tape.one_minus(z);
    let update = tape.mul(one_minus_z, cand);
    tape.add(keep, update)
}

/// Runs the stacked encoder over `inputs` (one `[blocks*|V| x F]` node per
/// step) and returns the top layer's final hidden state.
pub fn encode_on_tape(tape: &mut Tape, enc: &EncoderVars, inputs: &[Var], blocks: usize) -> Var {
    assert!(!inputs.is_empty(), "encoder needs at least one step");
    let adj = adjacency_on_tape(tape, enc.embed);
    let rows = tape.shape(inputs[0]).0;
    let mut hidden: Vec<Var> = enc
        .layers
        .iter()
        .map(|l| {
            let c = tape.shape(l.b_z).1;
            tape.constant(Matrix::zeros(rows, c))
        })
        .collect();
    for &x in inputs {
        let mut feed = x;
        for (l, layer) in enc.layers.iter().enumerate() {
            let h = agr_step_on_tape(tape, feed, hidden[l], adj, layer, blocks);
            hidden[l] = h;
            feed = h;
        }
    }
    *hidden.last().expect("at least one layer")
}

pub fn bind_encoder(tape: &mut Tape, params: &AgrParams, embed: &Matrix, trainable: bool) -> EncoderVars {
    let embed = if trainable {
        tape.param(embed.clone())
    } else {
        tape.constant(embed.clone())
    };
    EncoderVars {
        embed,
        layers: params.layers.iter().map(|l| l.bind(tape, trainable)).collect(),
    }
}

/// Row-stochastic adaptive adjacency for an embedding `[|V| x d]`.
pub fn adaptive_adjacency(embed: &Matrix) -> Matrix {
    let mut tape = Tape::new();
    let e = tape.constant(embed.clone());
    let a = adjacency_on_tape(&mut tape, e);
    tape.value(a).clone()
}

/// `A X W + b` for a single graph.
pub fn graph_conv(x: &Matrix, adj: &Matrix, w: &Matrix, b: &Matrix) -> Result<Matrix> {
    let v = x.rows();
    if adj.shape() != (v, v) {
        return Err(Error::Shape {
            op: "graph_conv adjacency",
            expected: (v, v),
            found: adj.shape(),
        });
    }
    if w.rows() != x.cols() {
        return Err(Error::Shape {
            op: "graph_conv weight",
            expected: (x.cols(), w.cols()),
            found: w.shape(),
        });
    }
    if b.shape() != (1, w.cols()) {
        return Err(Error::Shape {
            op: "graph_conv bias",
            expected: (1, w.cols()),
            found: b.shape(),
        });
    }
    adj.matmul(x)?.matmul(w)?.add_row(b)
}

fn check_step_shapes(x_t: &Matrix, h_prev: &Matrix, adj: &Matrix, layer: &AgrLayer) -> Result<()> {
    let c = layer.hidden();
    let v = x_t.rows();
    if h_prev.shape() != (v, c) {
        return Err(Error::Shape {
            op: "agr_cell_step hidden",
            expected: (v, c),
            found: h_prev.shape(),
        });
    }
    if adj.shape() != (v, v) {
        return Err(Error::Shape {
            op: "agr_cell_step adjacency",
            expected: (v, v),
            found: adj.shape(),
        });
    }
    if layer.w_z.rows() != x_t.cols() + c {
        return Err(Error::Shape {
            op: "agr_cell_step gate weight",
            expected: (x_t.cols() + c, c),
            found: layer.w_z.shape(),
        });
    }
    Ok(())
}

/// One AGR step for a single graph (no batching).
pub fn agr_cell_step(x_t: &Matrix, h_prev: &Matrix, adj: &Matrix, layer: &AgrLayer) -> Result<Matrix> {
    check_step_shapes(x_t, h_prev, adj, layer)?;
    let mut tape = Tape::new();
    let x = tape.constant(x_t.clone());
    let h = tape.constant(h_prev.clone());
    let a = tape.constant(adj.clone());
    let vars = layer.bind(&mut tape, false);
    let out = agr_step_on_tape(&mut tape, x, h, a, &vars, 1);
    Ok(tape.value(out).clone())
}

/// Update and reset gates `(z, r)` of one AGR step for a single graph.
pub fn agr_gates(x_t: &Matrix, h_prev: &Matrix, adj: &Matrix, layer: &AgrLayer) -> Result<(Matrix, Matrix)> {
    check_step_shapes(x_t, h_prev, adj, layer)?;
    let mut tape = Tape::new();
    let x = tape.constant(x_t.clone());
    let h = tape.constant(h_prev.clone());
    let a = tape.constant(adj.clone());
    let vars = layer.bind(&mut tape, false);
    let xh = tape.concat_cols(x, h);
    let axh = tape.block_left_mul(a, xh, 1);
    let mut gate = |w: Var, b: Var| {
        let g = tape.matmul(axh, w);
        let g = tape.add_row(g, b);
        let g = tape.sigmoid(g);
        tape.value(g).clone()
    };
    let z = gate(vars.w_z, vars.b_z);
    let r = gate(vars.w_r, vars.b_r);
    Ok((z, r))
}

/// Encodes one window given as `T` matrices of shape `[|V| x F]`.
pub fn encode_sequence(window: &[Matrix], params: &AgrParams, embed: &Matrix) -> Result<Matrix> {
    if window.is_empty() {
        return Err(Error::InvalidArgument("window must have at least one step".into()));
    }
    let v = embed.rows();
    for x in window {
        if x.rows() != v {
            return Err(Error::Shape {
                op: "encode_sequence input",
                expected: (v, x.cols()),
                found: x.shape(),
            });
        }
    }
    if params.layers.is_empty() {
        return Err(Error::InvalidArgument("encoder needs at least one layer".into()));
    }
    let mut tape = Tape::new();
    let inputs: Vec<Var> = window.iter().map(|x| tape.constant(x.clone())).collect();
    let vars = bind_encoder(&mut tape, params, embed, false);
    let out = encode_on_tape(&mut tape, &vars, &inputs, 1);
    Ok(tape.value(out).clone())
}
