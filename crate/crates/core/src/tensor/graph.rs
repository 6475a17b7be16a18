use rand::Rng;

use super::{Result, Tensor, TensorError};

/// Stand-in energy for masked positions before normalization.
pub const MASK_SENTINEL: f64 = -1e300;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Detach,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleBy { scalar: Var, input: Var },
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    ExpandRows(Var),
    ConcatLast(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows { input: Var, start: usize },
    PadRows(Var),
    SliceLast { input: Var, start: usize },
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Softmax(Var),
    MaxOverTime { input: Var, argmax: Vec<usize> },
    Dropout { input: Var, factors: Vec<f64> },
    GatherRows { table: Var, ids: Vec<usize> },
    Pick { input: Var, index: usize },
    LogFloor { input: Var, floor: f64 },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Append-only record of one forward pass.
///
/// Inputs of a node always precede it, so a reverse sweep over the node list
/// is a valid topological order for the chain rule.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradient store produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::Shape {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn rank2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    t.dims2().ok_or_else(|| TensorError::Rank {
        op,
        expected: 2,
        shape: t.shape().to_vec(),
    })
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `out[n×m] += a[n×k] · b[k×m]`
fn matmul_into(out: &mut [f64], a: &[f64], b: &[f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn transpose_data(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records a trainable leaf; it receives a gradient on backward.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Records a constant leaf; it never accumulates gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    /// Identity in the forward pass, blocks gradient flow.
    pub fn detach(&mut self, a: Var) -> Var {
        let v = self.value(a).clone();
        self.push(v, Op::Detach, false)
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(op, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Ok(Tensor {
            shape: ta.shape().to_vec(),
            data,
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("add", a, b, |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("sub", a, b, |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("mul", a, b, |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ta = self.value(a);
        let t = Tensor {
            shape: ta.shape().to_vec(),
            data: ta.data().iter().map(|x| x * c).collect(),
        };
        let ng = self.ng(a);
        self.push(t, Op::Scale(a, c), ng)
    }

    /// Multiplies every element of `input` by the single value held in `scalar`.
    pub fn scale_by(&mut self, scalar: Var, input: Var) -> Result<Var> {
        let ts = self.value(scalar);
        if ts.numel() != 1 {
            return Err(TensorError::Shape {
                op: "scale_by",
                lhs: ts.shape().to_vec(),
                rhs: vec![1],
            });
        }
        let s = ts.item();
        let ti = self.value(input);
        let t = Tensor {
            shape: ti.shape().to_vec(),
            data: ti.data().iter().map(|x| s * x).collect(),
        };
        let ng = self.ng(scalar) || self.ng(input);
        Ok(self.push(t, Op::ScaleBy { scalar, input }, ng))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = rank2("matmul", self.value(a))?;
        let (k2, m) = rank2("matmul", self.value(b))?;
        if k != k2 {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: vec![n, k],
                rhs: vec![k2, m],
            });
        }
        let mut out = vec![0.0; n * m];
        matmul_into(&mut out, self.value(a).data(), self.value(b).data(), n, k, m);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(
            Tensor {
                shape: vec![n, m],
                data: out,
            },
            Op::MatMul(a, b),
            ng,
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = rank2("transpose", self.value(a))?;
        let data = transpose_data(self.value(a).data(), r, c);
        let ng = self.ng(a);
        Ok(self.push(
            Tensor {
                shape: vec![c, r],
                data,
            },
            Op::Transpose(a),
            ng,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let numel: usize = shape.iter().product();
        if numel != ta.numel() || shape.contains(&0) {
            return Err(TensorError::Shape {
                op: "reshape",
                lhs: ta.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let t = Tensor {
            shape: shape.to_vec(),
            data: ta.data().to_vec(),
        };
        let ng = self.ng(a);
        Ok(self.push(t, Op::Reshape(a), ng))
    }

    /// Repeats a `[k]` or `[1×k]` tensor into `[rows×k]`.
    pub fn expand_rows(&mut self, a: Var, rows: usize) -> Result<Var> {
        let ta = self.value(a);
        let k = match ta.shape() {
            [k] | [1, k] => *k,
            s => {
                return Err(TensorError::Shape {
                    op: "expand_rows",
                    lhs: s.to_vec(),
                    rhs: vec![1, s.last().copied().unwrap_or(0)],
                })
            }
        };
        if rows == 0 {
            return Err(TensorError::Empty { op: "expand_rows" });
        }
        let data = ta.data().repeat(rows);
        let ng = self.ng(a);
        Ok(self.push(
            Tensor {
                shape: vec![rows, k],
                data,
            },
            Op::ExpandRows(a),
            ng,
        ))
    }

    /// Concatenates along the last axis.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(TensorError::Empty { op: "concat_last" })?;
        let lead = {
            let s = self.shape(*first);
            s[..s.len() - 1].to_vec()
        };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != lead.len() + 1 || s[..s.len() - 1] != lead[..] {
                return Err(TensorError::Shape {
                    op: "concat_last",
                    lhs: self.shape(*first).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            widths.push(*s.last().unwrap());
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor { shape, data }, Op::ConcatLast(parts.to_vec()), ng))
    }

    /// Stacks rank-2 tensors of equal width along the first axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(TensorError::Empty { op: "concat_rows" })?;
        let (_, w) = rank2("concat_rows", self.value(*first))?;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = rank2("concat_rows", self.value(p))?;
            if c != w {
                return Err(TensorError::Shape {
                    op: "concat_rows",
                    lhs: self.shape(*first).to_vec(),
                    rhs: vec![r, c],
                });
            }
            rows += r;
        }
        let mut data = Vec::with_capacity(rows * w);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            Tensor {
                shape: vec![rows, w],
                data,
            },
            Op::ConcatRows(parts.to_vec()),
            ng,
        ))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = rank2("slice_rows", self.value(a))?;
        if len == 0 || start + len > r {
            return Err(TensorError::InvalidArgument {
                op: "slice_rows",
                msg: format!("rows {start}..{} out of 0..{r}", start + len),
            });
        }
        let data = self.value(a).data()[start * c..(start + len) * c].to_vec();
        let ng = self.ng(a);
        Ok(self.push(
            Tensor {
                shape: vec![len, c],
                data,
            },
            Op::SliceRows { input: a, start },
            ng,
        ))
    }

    /// Appends zero rows until the matrix has `rows` rows.
    pub fn pad_rows(&mut self, a: Var, rows: usize) -> Result<Var> {
        let (r, c) = rank2("pad_rows", self.value(a))?;
        if rows < r {
            return Err(TensorError::InvalidArgument {
                op: "pad_rows",
                msg: format!("cannot pad {r} rows down to {rows}"),
            });
        }
        if rows == r {
            return Ok(a);
        }
        let mut data = self.value(a).data().to_vec();
        data.resize(rows * c, 0.0);
        let ng = self.ng(a);
        Ok(self.push(
            Tensor {
                shape: vec![rows, c],
                data,
            },
            Op::PadRows(a),
            ng,
        ))
    }

    /// Takes `len` entries of the last axis starting at `start`.
    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        let w = *ta.shape().last().unwrap();
        if len == 0 || start + len > w {
            return Err(TensorError::InvalidArgument {
                op: "slice_last",
                msg: format!("columns {start}..{} out of 0..{w}", start + len),
            });
        }
        let rows = ta.numel() / w;
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&ta.data()[r * w + start..r * w + start + len]);
        }
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let ng = self.ng(a);
        Ok(self.push(Tensor { shape, data }, Op::SliceLast { input: a, start }, ng))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let ta = self.value(a);
        let t = Tensor {
            shape: ta.shape().to_vec(),
            data: ta.data().iter().map(|&x| f(x)).collect(),
        };
        let ng = self.ng(a);
        self.push(t, op, ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    /// Row-wise softmax of a rank-2 tensor restricted to positions where
    /// `mask` (row-major, same extent) is true. Masked outputs are exactly 0.
    pub fn softmax_masked(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let (rows, cols) = rank2("softmax_masked", self.value(a))?;
        if mask.len() != rows * cols {
            return Err(TensorError::Shape {
                op: "softmax_masked",
                lhs: vec![rows, cols],
                rhs: vec![mask.len()],
            });
        }
        let src = self.value(a).data();
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let m = &mask[r * cols..(r + 1) * cols];
            if !m.iter().any(|&b| b) {
                return Err(TensorError::DegenerateMask { op: "softmax_masked" });
            }
            let x = &src[r * cols..(r + 1) * cols];
            let out = &mut data[r * cols..(r + 1) * cols];
            let energies: Vec<f64> = x
                .iter()
                .zip(m)
                .map(|(&v, &keep)| if keep { v } else { MASK_SENTINEL })
                .collect();
            let max = energies.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (o, &e) in out.iter_mut().zip(&energies) {
                *o = (e - max).exp();
                sum += *o;
            }
            for (o, &keep) in out.iter_mut().zip(m) {
                *o = if keep { *o / sum } else { 0.0 };
            }
        }
        let ng = self.ng(a);
        Ok(self.push(
            Tensor {
                shape: vec![rows, cols],
                data,
            },
            Op::Softmax(a),
            ng,
        ))
    }

    /// Softmax over the last axis with nothing masked.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let cols = *shape.last().unwrap();
        let rows = self.value(a).numel() / cols;
        let flat = if shape.len() == 2 { a } else { self.reshape(a, &[rows, cols])? };
        let s = self.softmax_masked(flat, &vec![true; rows * cols])?;
        if shape.len() == 2 {
            Ok(s)
        } else {
            self.reshape(s, &shape)
        }
    }

    /// Per-column maximum over the unmasked rows of a `[T×d]` tensor.
    /// Ties go to the earliest step.
    pub fn max_over_time(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let (t, d) = rank2("max_over_time", self.value(a))?;
        if mask.len() != t {
            return Err(TensorError::Shape {
                op: "max_over_time",
                lhs: vec![t, d],
                rhs: vec![mask.len()],
            });
        }
        if !mask.iter().any(|&b| b) {
            return Err(TensorError::DegenerateMask { op: "max_over_time" });
        }
        let src = self.value(a).data();
        let mut argmax = vec![usize::MAX; d];
        let mut out = vec![f64::NEG_INFINITY; d];
        for (step, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            for j in 0..d {
                let v = src[step * d + j];
                if argmax[j] == usize::MAX || v > out[j] {
                    out[j] = v;
                    argmax[j] = step;
                }
            }
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::vector(out), Op::MaxOverTime { input: a, argmax }, ng))
    }

    /// Inverted dropout: in training mode each element is zeroed with
    /// probability `rate` and survivors are scaled by `1/(1-rate)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, rate: f64, training: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::InvalidArgument {
                op: "dropout",
                msg: format!("rate must lie in [0, 1), got {rate}"),
            });
        }
        if !training || rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - rate);
        let ta = self.value(a);
        let factors: Vec<f64> = (0..ta.numel())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let t = Tensor {
            shape: ta.shape().to_vec(),
            data: ta.data().iter().zip(&factors).map(|(x, f)| x * f).collect(),
        };
        let ng = self.ng(a);
        Ok(self.push(t, Op::Dropout { input: a, factors }, ng))
    }

    /// Looks up rows of a `[V×r]` table. Row 0 is the padding row and never
    /// receives gradient.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, r) = rank2("gather_rows", self.value(table))?;
        if ids.is_empty() {
            return Err(TensorError::Empty { op: "gather_rows" });
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(TensorError::InvalidArgument {
                op: "gather_rows",
                msg: format!("index {bad} out of range for {v} rows"),
            });
        }
        let tt = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * r);
        for &i in ids {
            data.extend_from_slice(tt.row(i));
        }
        let ng = self.ng(table);
        Ok(self.push(
            Tensor {
                shape: vec![ids.len(), r],
                data,
            },
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    /// Extracts one element (flat row-major index) as a `[1]` tensor.
    pub fn pick(&mut self, a: Var, index: usize) -> Result<Var> {
        let ta = self.value(a);
        if index >= ta.numel() {
            return Err(TensorError::InvalidArgument {
                op: "pick",
                msg: format!("index {index} out of range for {:?}", ta.shape()),
            });
        }
        let t = Tensor::scalar(ta.data()[index]);
        let ng = self.ng(a);
        Ok(self.push(t, Op::Pick { input: a, index }, ng))
    }

    /// `ln(max(x, floor))`, elementwise.
    pub fn log_floor(&mut self, a: Var, floor: f64) -> Var {
        self.unary(a, |x| x.max(floor).ln(), Op::LogFloor { input: a, floor })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    /// Which side of each kink the recorded computation sits on: one entry
    /// per ReLU element (1 if positive) and one per max-pool column (the
    /// winning step). Only nodes that depend on a gradient-carrying leaf
    /// count, since nothing else moves when such a leaf is perturbed. Two
    /// passes with equal patterns ran through the same smooth piece.
    pub fn kink_pattern(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for n in self.nodes.iter().filter(|n| n.needs_grad) {
            match &n.op {
                Op::Relu(a) => out.extend(self.value(*a).data().iter().map(|&x| usize::from(x > 0.0))),
                Op::MaxOverTime { argmax, .. } => out.extend_from_slice(argmax),
                _ => {}
            }
        }
        out
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(TensorError::NonScalar(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(lt.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        // Intermediate nodes keep their adjoints (saliency reads them); nodes
        // that never needed one are dropped.
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if !n.needs_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let send = |grads: &mut [Option<Tensor>], v: Var, delta: Vec<f64>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(t) => t.accumulate(&delta),
                slot @ None => {
                    *slot = Some(Tensor {
                        shape: self.nodes[v.0].value.shape().to_vec(),
                        data: delta,
                    })
                }
            }
        };
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Detach => {}
            Op::Add(a, b) => {
                send(grads, *a, gd.to_vec());
                send(grads, *b, gd.to_vec());
            }
            Op::Sub(a, b) => {
                send(grads, *a, gd.to_vec());
                send(grads, *b, gd.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                send(grads, *a, gd.iter().zip(vb).map(|(g, y)| g * y).collect());
                send(grads, *b, gd.iter().zip(va).map(|(g, x)| g * x).collect());
            }
            Op::Scale(a, c) => send(grads, *a, gd.iter().map(|x| x * c).collect()),
            Op::ScaleBy { scalar, input } => {
                let s = self.value(*scalar).item();
                let vi = self.value(*input).data();
                let ds: f64 = gd.iter().zip(vi).map(|(g, x)| g * x).sum();
                send(grads, *scalar, vec![ds]);
                send(grads, *input, gd.iter().map(|g| g * s).collect());
            }
            Op::MatMul(a, b) => {
                let ta = self.value(*a);
                let tb = self.value(*b);
                let (n, k) = ta.dims2().unwrap();
                let m = tb.shape()[1];
                if self.ng(*a) {
                    // dA = G · Bᵀ
                    let bt = transpose_data(tb.data(), k, m);
                    let mut da = vec![0.0; n * k];
                    matmul_into(&mut da, gd, &bt, n, m, k);
                    send(grads, *a, da);
                }
                if self.ng(*b) {
                    // dB = Aᵀ · G
                    let at = transpose_data(ta.data(), n, k);
                    let mut db = vec![0.0; k * m];
                    matmul_into(&mut db, &at, gd, k, n, m);
                    send(grads, *b, db);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = g.dims2().unwrap();
                send(grads, *a, transpose_data(gd, r, c));
            }
            Op::Reshape(a) => send(grads, *a, gd.to_vec()),
            Op::ExpandRows(a) => {
                let (rows, k) = g.dims2().unwrap();
                let mut d = vec![0.0; k];
                for r in 0..rows {
                    for (acc, x) in d.iter_mut().zip(&gd[r * k..(r + 1) * k]) {
                        *acc += x;
                    }
                }
                send(grads, *a, d);
            }
            Op::ConcatLast(parts) => {
                let total = *g.shape().last().unwrap();
                let rows = g.numel() / total;
                let mut offset = 0;
                for &p in parts {
                    let w = *self.shape(p).last().unwrap();
                    let mut d = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        d.extend_from_slice(&gd[r * total + offset..r * total + offset + w]);
                    }
                    send(grads, p, d);
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    send(grads, p, gd[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::SliceRows { input, start } => {
                let ti = self.value(*input);
                let c = ti.shape()[1];
                let mut d = vec![0.0; ti.numel()];
                d[start * c..start * c + gd.len()].copy_from_slice(gd);
                send(grads, *input, d);
            }
            Op::PadRows(a) => {
                let n = self.value(*a).numel();
                send(grads, *a, gd[..n].to_vec());
            }
            Op::SliceLast { input, start } => {
                let ti = self.value(*input);
                let w = *ti.shape().last().unwrap();
                let len = *g.shape().last().unwrap();
                let rows = ti.numel() / w;
                let mut d = vec![0.0; ti.numel()];
                for r in 0..rows {
                    d[r * w + start..r * w + start + len].copy_from_slice(&gd[r * len..(r + 1) * len]);
                }
                send(grads, *input, d);
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                send(grads, *a, gd.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect());
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                send(grads, *a, gd.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect());
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                send(
                    grads,
                    *a,
                    gd.iter().zip(x).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }).collect(),
                );
            }
            Op::Softmax(a) => {
                let (rows, cols) = node.value.dims2().unwrap();
                let y = node.value.data();
                let mut d = vec![0.0; rows * cols];
                for r in 0..rows {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &gd[r * cols..(r + 1) * cols];
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for c in 0..cols {
                        d[r * cols + c] = yr[c] * (gr[c] - dot);
                    }
                }
                send(grads, *a, d);
            }
            Op::MaxOverTime { input, argmax, .. } => {
                let ti = self.value(*input);
                let d_width = argmax.len();
                let mut d = vec![0.0; ti.numel()];
                for (j, &step) in argmax.iter().enumerate() {
                    d[step * d_width + j] = gd[j];
                }
                send(grads, *input, d);
            }
            Op::Dropout { input, factors } => {
                send(grads, *input, gd.iter().zip(factors).map(|(g, f)| g * f).collect());
            }
            Op::GatherRows { table, ids } => {
                let tt = self.value(*table);
                let r = tt.shape()[1];
                let mut d = vec![0.0; tt.numel()];
                for (k, &i) in ids.iter().enumerate() {
                    if i == 0 {
                        continue;
                    }
                    for (acc, x) in d[i * r..(i + 1) * r].iter_mut().zip(&gd[k * r..(k + 1) * r]) {
                        *acc += x;
                    }
                }
                send(grads, *table, d);
            }
            Op::Pick { input, index } => {
                let mut d = vec![0.0; self.value(*input).numel()];
                d[*index] = gd[0];
                send(grads, *input, d);
            }
            Op::LogFloor { input, floor } => {
                let x = self.value(*input).data();
                send(
                    grads,
                    *input,
                    gd.iter()
                        .zip(x)
                        .map(|(g, &x)| if x > *floor { g / x } else { 0.0 })
                        .collect(),
                );
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                send(grads, *a, vec![gd[0]; n]);
            }
        }
    }
}
