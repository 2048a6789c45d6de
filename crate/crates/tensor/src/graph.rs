//! Reverse-mode tape.
//!
//! A [`Graph`] records every primitive applied during one forward pass. Nodes
//! are appended in evaluation order, so a reverse sweep over the node list is
//! a valid topological order for the backward pass. Each graph supports a
//! single backward pass; build a fresh graph for every forward.

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    MaskedSoftmax(Var),
    Gelu(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    ReplaceRow {
        x: Var,
        row: usize,
        src: Var,
    },
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        label: usize,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Single-use computation tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a (m×k) · bᵀ` where `b` is `n×k`.
fn matmul_bt_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `aᵀ · b` where `a` is `k×m` and `b` is `k×n`.
fn matmul_at_raw(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
        None => *slot = Some(g.to_vec()),
    }
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

    /// Registers a leaf. It receives a gradient iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs_grad = tensor.requires_grad();
        self.push(tensor, Op::Leaf, needs_grad)
    }

    /// Registers a leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        let tensor = if tensor.requires_grad() {
            tensor.detached()
        } else {
            tensor
        };
        self.push(tensor, Op::Leaf, false)
    }

    /// Copies `x` into a new constant, cutting the gradient path.
    pub fn detach(&mut self, x: Var) -> Var {
        let t = self.value(x).detached();
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient accumulated into a trainable leaf by [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    /// Takes the tensor of a node out of the graph (leaving a zero-size stub).
    pub fn take(&mut self, v: Var) -> Tensor {
        let shape = self.nodes[v.0].value.shape().to_vec();
        let stub = Tensor::zeros(&shape).expect("existing shape is valid");
        std::mem::replace(&mut self.nodes[v.0].value, stub)
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

    fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.matrix_dims()
    }

    fn shape_of(&self, v: Var) -> Vec<usize> {
        self.nodes[v.0].value.shape().to_vec()
    }

    fn require_matrix(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let rank = self.nodes[v.0].value.rank();
        if rank > 2 {
            return Err(TensorError::Rank { op, rank });
        }
        Ok(self.dims(v))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.require_matrix("matmul", a)?;
        let (k2, n) = self.require_matrix("matmul", b)?;
        if k != k2 {
            return Err(TensorError::Dimension {
                op: "matmul",
                left: self.shape_of(a),
                right: self.shape_of(b),
            });
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        check_finite("matmul", &out)?;
        let needs = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), needs))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).transpose()?;
        let needs = self.ng(a);
        Ok(self.push(t, Op::Transpose(a), needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.dims(a) != self.dims(b) {
            return Err(TensorError::Dimension {
                op: "add",
                left: self.shape_of(a),
                right: self.shape_of(b),
            });
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        check_finite("add", &out)?;
        let shape = self.shape_of(a);
        let needs = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Add(a, b), needs))
    }

    /// Adds a length-`cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, cols) = self.dims(a);
        if self.value(row).len() != cols {
            return Err(TensorError::Dimension {
                op: "add_row",
                left: self.shape_of(a),
                right: self.shape_of(row),
            });
        }
        let r = self.value(row).data();
        let out: Vec<f64> = self
            .value(a)
            .data()
            .chunks(cols)
            .flat_map(|chunk| chunk.iter().zip(r).map(|(x, y)| x + y))
            .collect();
        check_finite("add_row", &out)?;
        let shape = self.shape_of(a);
        let needs = self.ng(a) || self.ng(row);
        Ok(self.push(Tensor::new(&shape, out)?, Op::AddRow(a, row), needs))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out: Vec<f64> = self.value(a).data().iter().map(|x| x * s).collect();
        check_finite("scale", &out)?;
        let shape = self.shape_of(a);
        let needs = self.ng(a);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Scale(a, s), needs))
    }

    /// Per-row normalization to zero mean and unit variance (ε = 1e-5), then
    /// `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (rows, cols) = self.dims(x);
        if self.value(gain).len() != cols || self.value(bias).len() != cols {
            return Err(TensorError::Dimension {
                op: "layer_norm",
                left: self.shape_of(x),
                right: self.shape_of(gain),
            });
        }
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = is;
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        check_finite("layer_norm", &out)?;
        let shape = self.shape_of(x);
        let needs = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            needs,
        ))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (_, cols) = self.dims(x);
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(cols) {
            softmax_in_place(row);
        }
        check_finite("softmax_rows", &out)?;
        let shape = self.shape_of(x);
        let needs = self.ng(x);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Softmax(x), needs))
    }

    /// Row-wise softmax of `x + bias` restricted to entries whose bias is
    /// `Some`; entries with `None` are exactly zero in the output and pass no
    /// gradient. At least one entry must be active.
    pub fn masked_softmax_rows(&mut self, x: Var, bias: &[Option<f64>]) -> Result<Var> {
        let (_, cols) = self.dims(x);
        if bias.len() != cols {
            return Err(TensorError::Dimension {
                op: "masked_softmax_rows",
                left: self.shape_of(x),
                right: vec![bias.len()],
            });
        }
        if bias.iter().all(Option::is_none) {
            return Err(TensorError::Oracle(
                "masked_softmax_rows: every entry is masked".into(),
            ));
        }
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(cols) {
            masked_softmax_in_place(row, bias);
        }
        check_finite("masked_softmax_rows", &out)?;
        let shape = self.shape_of(x);
        let needs = self.ng(x);
        Ok(self.push(Tensor::new(&shape, out)?, Op::MaskedSoftmax(x), needs))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()))
            .collect();
        check_finite("gelu", &out)?;
        let shape = self.shape_of(x);
        let needs = self.ng(x);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Gelu(x), needs))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.require_matrix("slice_cols", x)?;
        if len == 0 || start + len > cols {
            return Err(TensorError::Index {
                op: "slice_cols",
                index: start + len,
                extent: cols,
            });
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let needs = self.ng(x);
        Ok(self.push(Tensor::matrix(rows, len, out)?, Op::SliceCols { x, start }, needs))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(TensorError::InvalidShape(vec![]));
        };
        let rows = self.dims(first).0;
        for &p in parts {
            if self.dims(p).0 != rows {
                return Err(TensorError::Dimension {
                    op: "concat_cols",
                    left: self.shape_of(first),
                    right: self.shape_of(p),
                });
            }
        }
        let total: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let (_, c) = self.dims(p);
                out.extend_from_slice(&self.value(p).data()[r * c..(r + 1) * c]);
            }
        }
        let needs = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            Tensor::matrix(rows, total, out)?,
            Op::ConcatCols(parts.to_vec()),
            needs,
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.require_matrix("slice_rows", x)?;
        if len == 0 || start + len > rows {
            return Err(TensorError::Index {
                op: "slice_rows",
                index: start + len,
                extent: rows,
            });
        }
        let out = self.value(x).data()[start * cols..(start + len) * cols].to_vec();
        let needs = self.ng(x);
        Ok(self.push(Tensor::matrix(len, cols, out)?, Op::SliceRows { x, start }, needs))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(TensorError::InvalidShape(vec![]));
        };
        let cols = self.dims(first).1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.dims(p);
            if c != cols {
                return Err(TensorError::Dimension {
                    op: "concat_rows",
                    left: self.shape_of(first),
                    right: self.shape_of(p),
                });
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        let needs = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            Tensor::matrix(rows, cols, out)?,
            Op::ConcatRows(parts.to_vec()),
            needs,
        ))
    }

    /// Copy of `x` with row `row` replaced by the single-row `src`.
    pub fn replace_row(&mut self, x: Var, row: usize, src: Var) -> Result<Var> {
        let (rows, cols) = self.require_matrix("replace_row", x)?;
        if row >= rows {
            return Err(TensorError::Index {
                op: "replace_row",
                index: row,
                extent: rows,
            });
        }
        if self.value(src).len() != cols {
            return Err(TensorError::Dimension {
                op: "replace_row",
                left: self.shape_of(x),
                right: self.shape_of(src),
            });
        }
        let mut out = self.value(x).data().to_vec();
        out[row * cols..(row + 1) * cols].copy_from_slice(self.value(src).data());
        let needs = self.ng(x) || self.ng(src);
        Ok(self.push(
            Tensor::matrix(rows, cols, out)?,
            Op::ReplaceRow { x, row, src },
            needs,
        ))
    }

    /// Scales each row to unit L2 norm. All-zero rows stay zero.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (_, cols) = self.dims(x);
        let mut out = self.value(x).data().to_vec();
        let mut norms = Vec::new();
        for row in out.chunks_mut(cols) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            norms.push(n);
            if n > 0.0 {
                row.iter_mut().for_each(|v| *v /= n);
            }
        }
        check_finite("normalize_rows", &out)?;
        let shape = self.shape_of(x);
        let needs = self.ng(x);
        Ok(self.push(Tensor::new(&shape, out)?, Op::NormalizeRows { x, norms }, needs))
    }

    /// `−log softmax(logits)[label]` for a single row of logits.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let (rows, cols) = self.dims(logits);
        if rows != 1 {
            return Err(TensorError::Dimension {
                op: "cross_entropy",
                left: self.shape_of(logits),
                right: vec![1, cols],
            });
        }
        if label >= cols {
            return Err(TensorError::Index {
                op: "cross_entropy",
                index: label,
                extent: cols,
            });
        }
        let z = self.value(logits).data();
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = z.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        let loss = lse - z[label];
        let probs: Vec<f64> = z.iter().map(|v| (v - lse).exp()).collect();
        check_finite("cross_entropy", &[loss])?;
        let needs = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                label,
                probs,
            },
            needs,
        ))
    }

    /// Runs the reverse sweep from a scalar `loss`, accumulating into the
    /// grad slot of every trainable leaf. Nodes that do not depend on a
    /// trainable leaf are skipped.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape_of(loss)));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            check_finite("backward", &g)?;
            self.backprop_node(i, &g, &mut grads)?;
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.nodes[i].value.accumulate_grad(&g);
            }
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        let send = |grads: &mut [Option<Vec<f64>>], v: Var, gv: &[f64]| {
            if self.ng(v) {
                accumulate(&mut grads[v.0], gv);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let (_, n) = self.dims(*b);
                if self.ng(*a) {
                    let ga = matmul_bt_raw(g, self.value(*b).data(), m, n, k);
                    send(grads, *a, &ga);
                }
                if self.ng(*b) {
                    let gb = matmul_at_raw(self.value(*a).data(), g, m, k, n);
                    send(grads, *b, &gb);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = node.value.matrix_dims();
                let gt = Tensor::matrix(r, c, g.to_vec())?.transpose()?;
                send(grads, *a, gt.data());
            }
            Op::Add(a, b) => {
                send(grads, *a, g);
                send(grads, *b, g);
            }
            Op::AddRow(a, row) => {
                send(grads, *a, g);
                if self.ng(*row) {
                    let cols = self.value(*row).len();
                    let mut gr = vec![0.0; cols];
                    for chunk in g.chunks(cols) {
                        for (s, v) in gr.iter_mut().zip(chunk) {
                            *s += v;
                        }
                    }
                    send(grads, *row, &gr);
                }
            }
            Op::Scale(a, s) => {
                let ga: Vec<f64> = g.iter().map(|v| v * s).collect();
                send(grads, *a, &ga);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (rows, cols) = self.dims(*x);
                let gv = self.value(*gain).data();
                if self.ng(*gain) || self.ng(*bias) {
                    let mut gg = vec![0.0; cols];
                    let mut gb = vec![0.0; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            gg[c] += g[r * cols + c] * xhat[r * cols + c];
                            gb[c] += g[r * cols + c];
                        }
                    }
                    send(grads, *gain, &gg);
                    send(grads, *bias, &gb);
                }
                if self.ng(*x) {
                    let mut gx = vec![0.0; rows * cols];
                    let nf = cols as f64;
                    for r in 0..rows {
                        let off = r * cols;
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for c in 0..cols {
                            let d = g[off + c] * gv[c];
                            mean_d += d;
                            mean_dx += d * xhat[off + c];
                        }
                        mean_d /= nf;
                        mean_dx /= nf;
                        for c in 0..cols {
                            let d = g[off + c] * gv[c];
                            gx[off + c] = inv_std[r] * (d - mean_d - xhat[off + c] * mean_dx);
                        }
                    }
                    send(grads, *x, &gx);
                }
            }
            Op::Softmax(x) | Op::MaskedSoftmax(x) => {
                let (_, cols) = node.value.matrix_dims();
                let y = node.value.data();
                let mut gx = vec![0.0; y.len()];
                for ((gr, yr), out) in g
                    .chunks(cols)
                    .zip(y.chunks(cols))
                    .zip(gx.chunks_mut(cols))
                {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        out[c] = yr[c] * (gr[c] - dot);
                    }
                }
                send(grads, *x, &gx);
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                let gx: Vec<f64> = xv
                    .iter()
                    .zip(g)
                    .map(|(&v, &gi)| {
                        let t = (GELU_C * (v + GELU_A * v * v * v)).tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                        gi * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
                    })
                    .collect();
                send(grads, *x, &gx);
            }
            Op::SliceCols { x, start } => {
                let (rows, cols) = self.dims(*x);
                let len = node.value.matrix_dims().1;
                let mut gx = vec![0.0; rows * cols];
                for r in 0..rows {
                    gx[r * cols + start..r * cols + start + len]
                        .copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                send(grads, *x, &gx);
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = node.value.matrix_dims();
                let mut offset = 0;
                for &p in parts {
                    let (_, c) = self.dims(p);
                    if self.ng(p) {
                        let mut gp = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            gp.extend_from_slice(&g[r * total + offset..r * total + offset + c]);
                        }
                        send(grads, p, &gp);
                    }
                    offset += c;
                }
            }
            Op::SliceRows { x, start } => {
                let (rows, cols) = self.dims(*x);
                let mut gx = vec![0.0; rows * cols];
                gx[start * cols..start * cols + g.len()].copy_from_slice(g);
                send(grads, *x, &gx);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    send(grads, p, &g[offset..offset + n]);
                    offset += n;
                }
            }
            Op::ReplaceRow { x, row, src } => {
                let (_, cols) = node.value.matrix_dims();
                if self.ng(*x) {
                    let mut gx = g.to_vec();
                    gx[row * cols..(row + 1) * cols].fill(0.0);
                    send(grads, *x, &gx);
                }
                send(grads, *src, &g[row * cols..(row + 1) * cols]);
            }
            Op::NormalizeRows { x, norms } => {
                let (_, cols) = node.value.matrix_dims();
                let y = node.value.data();
                let mut gx = vec![0.0; y.len()];
                for (r, &n) in norms.iter().enumerate() {
                    if n == 0.0 {
                        continue;
                    }
                    let off = r * cols;
                    let dot: f64 = (0..cols).map(|c| y[off + c] * g[off + c]).sum();
                    for c in 0..cols {
                        gx[off + c] = (g[off + c] - y[off + c] * dot) / n;
                    }
                }
                send(grads, *x, &gx);
            }
            Op::CrossEntropy {
                logits,
                label,
                probs,
            } => {
                let mut gx: Vec<f64> = probs.iter().map(|p| p * g[0]).collect();
                gx[*label] -= g[0];
                send(grads, *logits, &gx);
            }
        }
        Ok(())
    }
}

/// In-place max-subtracted softmax of one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

/// In-place softmax of `row + bias` over the entries with `Some` bias; the
/// rest are set to exactly zero.
pub fn masked_softmax_in_place(row: &mut [f64], bias: &[Option<f64>]) {
    let max = row
        .iter()
        .zip(bias)
        .filter_map(|(v, b)| b.map(|b| v + b))
        .fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (v, b) in row.iter_mut().zip(bias) {
        *v = match b {
            Some(b) => (*v + b - max).exp(),
            None => 0.0,
        };
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fd::{finite_diff_grad, max_relative_error};

    fn mat(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_one_by_one() {
        let mut g = Graph::new();
        let a = g.constant(mat(1, 1, &[2.0]));
        let b = g.constant(mat(1, 1, &[3.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[6.0]);
    }

    #[test]
    fn matmul_identity() {
        let x = mat(3, 2, &[1.5, -2.0, 0.25, 4.0, 9.0, -0.5]);
        let mut g = Graph::new();
        let i = g.constant(Tensor::identity(3));
        let xv = g.constant(x.clone());
        let y = g.matmul(i, xv).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut g = Graph::new();
        let a = g.constant(mat(2, 3, &[0.0; 6]));
        let b = g.constant(mat(2, 3, &[0.0; 6]));
        assert!(matches!(
            g.matmul(a, b),
            Err(TensorError::Dimension { op: "matmul", .. })
        ));
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let a0 = mat(3, 4, &[0.3, -1.2, 0.5, 2.0, 1.1, 0.0, -0.7, 0.4, 0.9, 1.3, -0.2, -1.5]);
        let b0 = mat(4, 2, &[0.2, -0.4, 1.0, 0.6, -0.9, 0.3, 0.5, 0.8]);
        let loss = |a: &Tensor, b: &Tensor, track: bool| {
            let mut g = Graph::new();
            let av = if track { g.leaf(a.clone().with_grad()) } else { g.constant(a.clone()) };
            let bv = g.constant(b.clone());
            let c = g.matmul(av, bv).unwrap();
            let ct = g.transpose(c).unwrap();
            let row = g.slice_rows(ct, 0, 1).unwrap();
            let l = g.cross_entropy(row, 1).unwrap();
            (g, av, l)
        };
        let (mut g, av, l) = loss(&a0, &b0, true);
        g.backward(l).unwrap();
        let analytic = g.grad(av).unwrap().to_vec();
        let numeric = finite_diff_grad(
            |a| {
                let (g, _, l) = loss(a, &b0, false);
                g.value(l).data()[0]
            },
            &a0,
            1e-5,
        )
        .unwrap();
        assert!(max_relative_error(&analytic, numeric.data()) < 1e-6);
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(&[0.0, 0.0, 0.0]));
        let y = g.softmax_rows(x).unwrap();
        for v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = g.constant(Tensor::vector(&[1000.0, 0.0]));
        let y = g.softmax_rows(x).unwrap();
        let d = g.value(y).data();
        assert!((d[0] - 1.0).abs() < 1e-300_f64.max(1e-15));
        assert!(d[1] >= 0.0 && d[1] < 1e-300);
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(&[4.0, 4.0, 4.0]));
        let gain = g.constant(Tensor::vector(&[1.0; 3]));
        let bias = g.constant(Tensor::vector(&[0.0; 3]));
        let y = g.layer_norm(x, gain, bias).unwrap();
        assert!(g.value(y).data().iter().all(|v| *v == 0.0));

        let x = g.constant(Tensor::vector(&[1.0, -1.0]));
        let gain = g.constant(Tensor::vector(&[1.0; 2]));
        let bias = g.constant(Tensor::vector(&[0.0; 2]));
        let y = g.layer_norm(x, gain, bias).unwrap();
        // mean 0, variance 1: x / sqrt(1 + 1e-5)
        let expected = 1.0 / (1.0f64 + 1e-5).sqrt();
        let d = g.value(y).data();
        assert!((d[0] - expected).abs() < 1e-15);
        assert!((d[1] + expected).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::vector(&[0.7; 4]));
        let l = g.cross_entropy(z, 2).unwrap();
        assert!((g.value(l).data()[0] - 4f64.ln()).abs() < 1e-15);

        let z = g.constant(Tensor::vector(&[100.0, 0.0, 0.0]));
        let l = g.cross_entropy(z, 0).unwrap();
        assert!(g.value(l).data()[0] < 1e-40);

        let z = g.constant(Tensor::vector(&[1.0, 2.0]));
        assert!(matches!(
            g.cross_entropy(z, 2),
            Err(TensorError::Index { op: "cross_entropy", .. })
        ));
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let logits = [0.3, -1.0, 2.2, 0.0];
        let mut g = Graph::new();
        let z = g.leaf(Tensor::vector(&logits).with_grad());
        let l = g.cross_entropy(z, 1).unwrap();
        g.backward(l).unwrap();
        let mut p = logits.to_vec();
        softmax_in_place(&mut p);
        p[1] -= 1.0;
        let grad = g.grad(z).unwrap();
        for (a, b) in grad.iter().zip(&p) {
            assert!((a - b).abs() < 1e-15);
        }
        let numeric = finite_diff_grad(
            |t| {
                let mut g = Graph::new();
                let z = g.constant(t.clone());
                let l = g.cross_entropy(z, 1).unwrap();
                g.value(l).data()[0]
            },
            &Tensor::vector(&logits),
            1e-5,
        )
        .unwrap();
        assert!(max_relative_error(grad, numeric.data()) < 1e-8);
    }

    #[test]
    fn frozen_leaf_gets_no_grad() {
        let mut g = Graph::new();
        let w = g.leaf(mat(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let x = g.leaf(Tensor::vector(&[0.5, -0.5]).with_grad());
        let y = g.matmul(x, w).unwrap();
        let l = g.cross_entropy(y, 0).unwrap();
        g.backward(l).unwrap();
        assert!(g.grad(w).is_none());
        assert!(g.grad(x).is_some());
    }

    #[test]
    fn tape_is_single_use() {
        let mut g = Graph::new();
        let z = g.leaf(Tensor::vector(&[1.0, 2.0]).with_grad());
        let l = g.cross_entropy(z, 0).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.backward(l), Err(TensorError::TapeConsumed));
    }

    #[test]
    fn backward_needs_scalar() {
        let mut g = Graph::new();
        let z = g.leaf(Tensor::vector(&[1.0, 2.0]).with_grad());
        assert!(matches!(g.backward(z), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn masked_softmax_zeroes_masked_entries() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(&[5.0, 1.0, 3.0]));
        let y = g
            .masked_softmax_rows(x, &[Some(0.0), None, Some(0.0)])
            .unwrap();
        let d = g.value(y).data();
        assert_eq!(d[1], 0.0);
        assert!((d[0] + d[2] - 1.0).abs() < 1e-15);
        assert!(g.masked_softmax_rows(x, &[None, None, None]).is_err());
    }

    #[test]
    fn replace_row_routes_gradients() {
        let mut g = Graph::new();
        let x = g.leaf(mat(2, 2, &[1.0, 2.0, 3.0, 4.0]).with_grad());
        let s = g.leaf(Tensor::vector(&[9.0, 8.0]).with_grad());
        let y = g.replace_row(x, 1, s).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 9.0, 8.0]);
        let row = g.slice_rows(y, 1, 1).unwrap();
        let l = g.cross_entropy(row, 0).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0; 4]);
        assert!(g.grad(s).unwrap().iter().any(|v| *v != 0.0));
    }
}
