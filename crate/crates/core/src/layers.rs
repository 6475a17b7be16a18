//! LSTM cell, masked bidirectional LSTM and affine layers.
//!
//! Parameter records are generic over their leaf type: `T = Tensor` is the
//! stored value, `T = Var` is the same record bound to a [`Graph`] for one
//! forward pass. Gate weights are packed `[input, forget, cell, output]`
//! along the last axis.

use rand::Rng;

use crate::tensor::{Graph, Result, Tensor, TensorError, Var};

/// Packing order of the four LSTM gates.
pub const GATE_ORDER: &str = "i,f,g,o";

#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams<T = Tensor> {
    /// `[in_dim × 4d]`
    pub w_ih: T,
    /// `[d × 4d]`
    pub w_hh: T,
    /// `[4d]`
    pub bias: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiLstmParams<T = Tensor> {
    pub forward: LstmParams<T>,
    pub backward: LstmParams<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams<T = Tensor> {
    /// `[in × out]`
    pub weight: T,
    /// `[out]`
    pub bias: T,
}

fn glorot(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

impl LstmParams {
    /// Glorot-uniform weights, zero bias except the forget slice at 1.0.
    pub fn init<R: Rng + ?Sized>(in_dim: usize, d: usize, rng: &mut R) -> Self {
        let w_ih = Tensor::uniform(&[in_dim, 4 * d], glorot(in_dim, 4 * d), rng);
        let w_hh = Tensor::uniform(&[d, 4 * d], glorot(d, 4 * d), rng);
        let mut bias = Tensor::zeros(&[4 * d]);
        bias.data_mut()[d..2 * d].fill(1.0);
        Self { w_ih, w_hh, bias }
    }

    pub fn hidden(&self) -> usize {
        self.w_hh.shape()[0]
    }

    pub fn input_dim(&self) -> usize {
        self.w_ih.shape()[0]
    }
}

impl BiLstmParams {
    pub fn init<R: Rng + ?Sized>(in_dim: usize, d: usize, rng: &mut R) -> Self {
        let forward = LstmParams::init(in_dim, d, rng);
        let backward = LstmParams::init(in_dim, d, rng);
        Self { forward, backward }
    }
}

impl LinearParams {
    pub fn init<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        Self {
            weight: Tensor::uniform(&[in_dim, out_dim], glorot(in_dim, out_dim), rng),
            bias: Tensor::zeros(&[out_dim]),
        }
    }
}

impl<T> LstmParams<T> {
    pub fn map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> LstmParams<U> {
        LstmParams {
            w_ih: f(&format!("{prefix}.w_ih"), &self.w_ih),
            w_hh: f(&format!("{prefix}.w_hh"), &self.w_hh),
            bias: f(&format!("{prefix}.bias"), &self.bias),
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut T)) {
        f(&format!("{prefix}.w_ih"), &mut self.w_ih);
        f(&format!("{prefix}.w_hh"), &mut self.w_hh);
        f(&format!("{prefix}.bias"), &mut self.bias);
    }
}

impl<T> BiLstmParams<T> {
    pub fn map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> BiLstmParams<U> {
        BiLstmParams {
            forward: self.forward.map(&format!("{prefix}.fwd"), f),
            backward: self.backward.map(&format!("{prefix}.bwd"), f),
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut T)) {
        self.forward.visit_mut(&format!("{prefix}.fwd"), f);
        self.backward.visit_mut(&format!("{prefix}.bwd"), f);
    }
}

impl<T> LinearParams<T> {
    pub fn map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> LinearParams<U> {
        LinearParams {
            weight: f(&format!("{prefix}.weight"), &self.weight),
            bias: f(&format!("{prefix}.bias"), &self.bias),
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut T)) {
        f(&format!("{prefix}.weight"), &mut self.weight);
        f(&format!("{prefix}.bias"), &mut self.bias);
    }
}

fn hidden_of(g: &Graph, p: &LstmParams<Var>) -> usize {
    g.shape(p.w_hh)[0]
}

/// One recurrence step given the already-projected input `x_t·W_ih + b`
/// (`[1×4d]`).
fn step_from_gates(g: &mut Graph, p: &LstmParams<Var>, xw: Var, h_prev: Var, c_prev: Var) -> Result<(Var, Var)> {
    let d = hidden_of(g, p);
    let hw = g.matmul(h_prev, p.w_hh)?;
    let z = g.add(xw, hw)?;
    let zi = g.slice_last(z, 0, d)?;
    let zf = g.slice_last(z, d, d)?;
    let zg = g.slice_last(z, 2 * d, d)?;
    let zo = g.slice_last(z, 3 * d, d)?;
    let i = g.sigmoid(zi);
    let f = g.sigmoid(zf);
    let cand = g.tanh(zg);
    let o = g.sigmoid(zo);
    let keep = g.mul(f, c_prev)?;
    let write = g.mul(i, cand)?;
    let c = g.add(keep, write)?;
    let tc = g.tanh(c);
    let h = g.mul(o, tc)?;
    Ok((h, c))
}

/// `i,f,o = σ(·)`, `g = tanh(·)`, `c = f⊙c_prev + i⊙g`, `h = o⊙tanh(c)`.
/// `x_t` is `[1×in]`, the states are `[1×d]`.
pub fn lstm_step(g: &mut Graph, p: &LstmParams<Var>, x_t: Var, h_prev: Var, c_prev: Var) -> Result<(Var, Var)> {
    let d = hidden_of(g, p);
    for v in [h_prev, c_prev] {
        if g.shape(v) != [1, d] {
            return Err(TensorError::Shape {
                op: "lstm_step",
                lhs: g.shape(v).to_vec(),
                rhs: vec![1, d],
            });
        }
    }
    let xw = g.matmul(x_t, p.w_ih)?;
    let b = g.reshape(p.bias, &[1, 4 * d])?;
    let xw = g.add(xw, b)?;
    step_from_gates(g, p, xw, h_prev, c_prev)
}

/// Runs one direction over every row of `seq` (`[L×in]`), returning the
/// hidden state for each row in original row order.
fn run_direction(g: &mut Graph, p: &LstmParams<Var>, seq: Var, reverse: bool) -> Result<Vec<Var>> {
    let d = hidden_of(g, p);
    let len = g.shape(seq)[0];
    let xw = g.matmul(seq, p.w_ih)?;
    let b = g.expand_rows(p.bias, len)?;
    let xw = g.add(xw, b)?;
    let mut h = g.constant(Tensor::zeros(&[1, d]));
    let mut c = g.constant(Tensor::zeros(&[1, d]));
    let mut out = vec![h; len];
    let steps: Box<dyn Iterator<Item = usize>> = if reverse {
        Box::new((0..len).rev())
    } else {
        Box::new(0..len)
    };
    for t in steps {
        let x = g.slice_rows(xw, t, 1)?;
        (h, c) = step_from_gates(g, p, x, h, c)?;
        out[t] = h;
    }
    Ok(out)
}

/// Number of leading true entries, rejecting masks that are not a true
/// prefix or are entirely false.
pub fn prefix_len(op: &'static str, mask: &[bool]) -> Result<usize> {
    let len = mask.iter().take_while(|&&m| m).count();
    if len == 0 {
        return Err(TensorError::DegenerateMask { op });
    }
    if mask[len..].iter().any(|&m| m) {
        return Err(TensorError::InvalidArgument {
            op,
            msg: "mask must be a true prefix (padding only at the end)".into(),
        });
    }
    Ok(len)
}

/// Bidirectional LSTM over `seq` (`[T×in]`). Only the unmasked prefix is
/// read; the forward direction starts at step 0, the backward direction at
/// the last unmasked step. Output is `[T×2d]`, `[h_fwd ∥ h_bwd]` per step,
/// with all-zero rows at masked steps.
pub fn bilstm_forward(g: &mut Graph, p: &BiLstmParams<Var>, seq: Var, mask: &[bool]) -> Result<Var> {
    let shape = g.shape(seq).to_vec();
    let [t_max, _] = shape[..] else {
        return Err(TensorError::Rank {
            op: "bilstm_forward",
            expected: 2,
            shape,
        });
    };
    if mask.len() != t_max {
        return Err(TensorError::Shape {
            op: "bilstm_forward",
            lhs: shape,
            rhs: vec![mask.len()],
        });
    }
    let len = prefix_len("bilstm_forward", mask)?;
    let live = if len < t_max { g.slice_rows(seq, 0, len)? } else { seq };
    let fwd = run_direction(g, &p.forward, live, false)?;
    let bwd = run_direction(g, &p.backward, live, true)?;
    let rows = fwd
        .iter()
        .zip(&bwd)
        .map(|(&f, &b)| g.concat_last(&[f, b]))
        .collect::<Result<Vec<_>>>()?;
    let stacked = g.concat_rows(&rows)?;
    g.pad_rows(stacked, t_max)
}

/// `x·W + b` for `x` of shape `[in]` (giving `[out]`) or `[T×in]`
/// (giving `[T×out]`).
pub fn linear(g: &mut Graph, p: &LinearParams<Var>, x: Var) -> Result<Var> {
    match *g.shape(x) {
        [n] => {
            let row = g.reshape(x, &[1, n])?;
            let y = g.matmul(row, p.weight)?;
            let out = g.shape(y)[1];
            let b = g.reshape(p.bias, &[1, out])?;
            let y = g.add(y, b)?;
            g.reshape(y, &[out])
        }
        [t, _] => {
            let y = g.matmul(x, p.weight)?;
            let b = g.expand_rows(p.bias, t)?;
            g.add(y, b)
        }
        _ => Err(TensorError::Rank {
            op: "linear",
            expected: 2,
            shape: g.shape(x).to_vec(),
        }),
    }
}

pub fn bind_lstm(g: &mut Graph, p: &LstmParams, trainable: bool) -> LstmParams<Var> {
    p.map("", &mut |_, t| g.leaf(t.clone(), trainable))
}

pub fn bind_bilstm(g: &mut Graph, p: &BiLstmParams, trainable: bool) -> BiLstmParams<Var> {
    p.map("", &mut |_, t| g.leaf(t.clone(), trainable))
}

pub fn bind_linear(g: &mut Graph, p: &LinearParams, trainable: bool) -> LinearParams<Var> {
    p.map("", &mut |_, t| g.leaf(t.clone(), trainable))
}
