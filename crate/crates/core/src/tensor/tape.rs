//! Operation tape for reverse-mode differentiation.
//!
//! Vars are indices into the tape's node list. Nodes are appended in
//! execution order, so every input precedes its consumers and the backward
//! sweep is a single reverse pass over the node list that visits each node
//! exactly once. Gradients accumulate with `+=`, which is what lets the
//! shared backbone collect contributions from both the reward path and the
//! policy path in one graph.

use super::{Result, Tensor, TensorError};

/// Handle to a tensor on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    /// out = a `[m x k]` @ b `[k x n]`
    Matmul { a: Var, b: Var },
    /// out = a `[m x k]` @ b `[n x k]` transposed
    MatmulNt { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    /// Per-row broadcast add of a `[c]` bias to `[r x c]`.
    AddBias { x: Var, bias: Var },
    Scale { x: Var, factor: f64 },
    /// Row lookup: out[t] = table[ids[t]].
    Embedding { table: Var, ids: Vec<usize> },
    SelectRow { x: Var, row: usize },
    SliceRows { x: Var, start: usize, len: usize },
    SliceCols { x: Var, start: usize, len: usize },
    ConcatCols { parts: Vec<Var> },
    /// Positions j > i replaced by a large negative constant.
    CausalMask { x: Var },
    SoftmaxRows { x: Var },
    LogSoftmaxRows { x: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, eps: f64 },
    Gelu { x: Var },
    LogSigmoid { x: Var },
    /// out[k] = x[indices[k].0, indices[k].1]
    Gather { x: Var, indices: Vec<(usize, usize)> },
    Sum { x: Var },
    Mean { x: Var },
    /// Pack scalar vars into one vector.
    Stack { parts: Vec<Var> },
}

struct Node {
    value: Tensor,
    op: Option<Op>,
    requires_grad: bool,
}

/// Additive constant used by the causal mask. Finite (so no Inf is ever
/// stored) but large enough that exp underflows to exactly zero.
const MASK_VALUE: f64 = -1.0e9;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register a leaf that does not need a gradient.
    pub fn input(&mut self, tensor: &Tensor) -> Var {
        self.push_leaf(tensor.clone(), false)
    }

    /// Register a trainable leaf; `backward` will produce a gradient for it.
    pub fn param(&mut self, tensor: &Tensor) -> Var {
        self.push_leaf(tensor.clone(), true)
    }

    /// Register a constant built in place.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::from_vec(shape, data)?;
        Ok(self.push_leaf(t, false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of a var, if any flowed to it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of a var, zeros when nothing flowed to it (an unused
    /// parameter has zero gradient, not a missing one).
    pub fn grad_or_zeros(&self, v: Var) -> Vec<f64> {
        match self.grad(v) {
            Some(g) => g.to_vec(),
            None => vec![0.0; self.nodes[v.0].value.numel()],
        }
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: None,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        // finiteness of `value` was already enforced by Tensor::from_vec
        self.nodes.push(Node {
            value,
            op: Some(op),
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    // ---- operations ----------------------------------------------------

    /// Matrix product `[m x k] @ [k x n] -> [m x n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        mm_acc(self.data(a), self.data(b), m, k, n, &mut out);
        let req = self.requires(a) || self.requires(b);
        let value = Tensor::from_vec(vec![m, n], out)?;
        Ok(self.push_op(value, Op::Matmul { a, b }, req))
    }

    /// Product with transposed right factor: `[m x k] @ [n x k]^T -> [m x n]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_nt",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![0.0; m * n];
        nt_acc(self.data(a), self.data(b), m, k, n, &mut out);
        let req = self.requires(a) || self.requires(b);
        let value = Tensor::from_vec(vec![m, n], out)?;
        Ok(self.push_op(value, Op::MatmulNt { a, b }, req))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise_pair(a, b, "add", |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise_pair(a, b, "sub", |x, y| x - y, |a, b| Op::Sub { a, b })
    }

    fn elementwise_pair(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: impl Fn(Var, Var) -> Op,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op: name,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        let req = self.requires(a) || self.requires(b);
        let value = Tensor::from_vec(self.shape(a).to_vec(), data)?;
        Ok(self.push_op(value, op(a, b), req))
    }

    /// `[r x c] + [c]` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(bias).to_vec());
        if sx.len() != 2 || sb.len() != 1 || sb[0] != sx[1] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: sx,
                rhs: sb,
            });
        }
        let (r, c) = (sx[0], sx[1]);
        let bdata = self.data(bias).to_vec();
        let data: Vec<f64> = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v + bdata[i % c])
            .collect();
        let req = self.requires(x) || self.requires(bias);
        let value = Tensor::from_vec(vec![r, c], data)?;
        Ok(self.push_op(value, Op::AddBias { x, bias }, req))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let data: Vec<f64> = self.data(x).iter().map(|v| v * factor).collect();
        let req = self.requires(x);
        let value = Tensor::from_vec(self.shape(x).to_vec(), data)?;
        Ok(self.push_op(value, Op::Scale { x, factor }, req))
    }

    /// Row lookup into an embedding table `[vocab x d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(TensorError::InvalidShape {
                op: "embedding",
                shape: st,
                reason: "table must be 2-d".into(),
            });
        }
        if ids.is_empty() {
            return Err(TensorError::Empty { op: "embedding" });
        }
        let (vocab, d) = (st[0], st[1]);
        if let Some(&bad) = ids.iter().find(|&&id| id >= vocab) {
            return Err(TensorError::IndexOutOfRange {
                op: "embedding",
                index: bad,
                size: vocab,
            });
        }
        let tdata = self.data(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            data.extend_from_slice(&tdata[id * d..(id + 1) * d]);
        }
        let req = self.requires(table);
        let value = Tensor::from_vec(vec![ids.len(), d], data)?;
        Ok(self.push_op(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            req,
        ))
    }

    /// One row of a matrix as `[1 x c]`.
    pub fn select_row(&mut self, x: Var, row: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(TensorError::InvalidShape {
                op: "select_row",
                shape: s,
                reason: "expected 2-d input".into(),
            });
        }
        if row >= s[0] {
            return Err(TensorError::IndexOutOfRange {
                op: "select_row",
                index: row,
                size: s[0],
            });
        }
        let c = s[1];
        let data = self.data(x)[row * c..(row + 1) * c].to_vec();
        let req = self.requires(x);
        let value = Tensor::from_vec(vec![1, c], data)?;
        Ok(self.push_op(value, Op::SelectRow { x, row }, req))
    }

    /// Contiguous row range `[start, start+len)`.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || len == 0 || start + len > s[0] {
            return Err(TensorError::InvalidShape {
                op: "slice_rows",
                shape: s,
                reason: format!("rows [{start}, {})", start + len),
            });
        }
        let c = s[1];
        let data = self.data(x)[start * c..(start + len) * c].to_vec();
        let req = self.requires(x);
        let value = Tensor::from_vec(vec![len, c], data)?;
        Ok(self.push_op(value, Op::SliceRows { x, start, len }, req))
    }

    /// Contiguous column range, used to split attention heads.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || len == 0 || start + len > s[1] {
            return Err(TensorError::InvalidShape {
                op: "slice_cols",
                shape: s,
                reason: format!("cols [{start}, {})", start + len),
            });
        }
        let (r, c) = (s[0], s[1]);
        let xdata = self.data(x);
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&xdata[i * c + start..i * c + start + len]);
        }
        let req = self.requires(x);
        let value = Tensor::from_vec(vec![r, len], data)?;
        Ok(self.push_op(value, Op::SliceCols { x, start, len }, req))
    }

    /// Concatenate matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::Empty { op: "concat_cols" });
        }
        let r = self.shape(parts[0])[0];
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != r {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: s.to_vec(),
                });
            }
        }
        let total_c: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
        let mut data = Vec::with_capacity(r * total_c);
        for i in 0..r {
            for &p in parts {
                let c = self.shape(p)[1];
                data.extend_from_slice(&self.data(p)[i * c..(i + 1) * c]);
            }
        }
        let req = parts.iter().any(|&p| self.requires(p));
        let value = Tensor::from_vec(vec![r, total_c], data)?;
        Ok(self.push_op(
            value,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            req,
        ))
    }

    /// Causal attention mask over square score matrices: entries above the
    /// diagonal become a large negative constant so softmax sends them to
    /// exactly zero probability.
    pub fn causal_mask(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] != s[1] {
            return Err(TensorError::InvalidShape {
                op: "causal_mask",
                shape: s,
                reason: "expected square score matrix".into(),
            });
        }
        let t = s[0];
        let mut data = self.data(x).to_vec();
        for i in 0..t {
            for j in (i + 1)..t {
                data[i * t + j] = MASK_VALUE;
            }
        }
        let req = self.requires(x);
        let value = Tensor::from_vec(vec![t, t], data)?;
        Ok(self.push_op(value, Op::CausalMask { x }, req))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(TensorError::InvalidShape {
                op: "softmax_rows",
                shape: s,
                reason: "expected 2-d input".into(),
            });
        }
        let (r, c) = (s[0], s[1]);
        let xdata = self.data(x);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &xdata[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..c {
                let e = (row[j] - max).exp();
                data[i * c + j] = e;
                sum += e;
            }
            for j in 0..c {
                data[i * c + j] /= sum;
            }
        }
        let req = self.requires(x);
        let value = Tensor::from_vec(vec![r, c], data)?;
        Ok(self.push_op(value, Op::SoftmaxRows { x }, req))
    }

    /// Per-row log softmax via max subtraction.
    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[1] == 0 {
            return Err(TensorError::InvalidShape {
                op: "log_softmax_rows",
                shape: s,
                reason: "expected 2-d input with at least one column".into(),
            });
        }
        let (r, c) = (s[0], s[1]);
        let xdata = self.data(x);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &xdata[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let log_sum = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for j in 0..c {
                data[i * c + j] = row[j] - max - log_sum;
            }
        }
        let req = self.requires(x);
        let value = Tensor::from_vec(vec![r, c], data)?;
        Ok(self.push_op(value, Op::LogSoftmaxRows { x }, req))
    }

    /// Per-row `(x - mean) / sqrt(var + eps) * gain + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = *s.last().unwrap_or(&0);
        if s.len() != 2 || d == 0 {
            return Err(TensorError::InvalidShape {
                op: "layer_norm",
                shape: s,
                reason: "expected 2-d input".into(),
            });
        }
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: s,
                rhs: self.shape(gain).to_vec(),
            });
        }
        if eps <= 0.0 {
            return Err(TensorError::NonFinite {
                op: "layer_norm",
                detail: format!("eps must be positive, got {eps}"),
            });
        }
        let r = s[0];
        let xdata = self.data(x);
        let g = self.data(gain).to_vec();
        let b = self.data(bias).to_vec();
        let mut data = vec![0.0; r * d];
        for i in 0..r {
            let row = &xdata[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                data[i * d + j] = (row[j] - mean) * rstd * g[j] + b[j];
            }
        }
        let req = self.requires(x) || self.requires(gain) || self.requires(bias);
        let value = Tensor::from_vec(vec![r, d], data)?;
        Ok(self.push_op(value, Op::LayerNorm { x, gain, bias, eps }, req))
    }

    /// GELU, tanh approximation:
    /// `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let data: Vec<f64> = self.data(x).iter().map(|&v| gelu_scalar(v)).collect();
        let req = self.requires(x);
        let value = Tensor::from_vec(self.shape(x).to_vec(), data)?;
        Ok(self.push_op(value, Op::Gelu { x }, req))
    }

    /// Elementwise `log sigmoid(x)` in the stable `min(x,0) - ln(1+e^{-|x|})`
    /// form.
    pub fn log_sigmoid(&mut self, x: Var) -> Result<Var> {
        let data: Vec<f64> = self
            .data(x)
            .iter()
            .map(|&v| super::log_sigmoid_scalar(v))
            .collect();
        let req = self.requires(x);
        let value = Tensor::from_vec(self.shape(x).to_vec(), data)?;
        Ok(self.push_op(value, Op::LogSigmoid { x }, req))
    }

    /// Pick entries of a matrix by (row, col) pairs into a vector.
    pub fn gather(&mut self, x: Var, indices: &[(usize, usize)]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(TensorError::InvalidShape {
                op: "gather",
                shape: s,
                reason: "expected 2-d input".into(),
            });
        }
        if indices.is_empty() {
            return Err(TensorError::Empty { op: "gather" });
        }
        let (r, c) = (s[0], s[1]);
        for &(i, j) in indices {
            if i >= r || j >= c {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather",
                    index: i.max(j),
                    size: r.max(c),
                });
            }
        }
        let xdata = self.data(x);
        let data: Vec<f64> = indices.iter().map(|&(i, j)| xdata[i * c + j]).collect();
        let req = self.requires(x);
        let value = Tensor::from_vec(vec![indices.len()], data)?;
        Ok(self.push_op(
            value,
            Op::Gather {
                x,
                indices: indices.to_vec(),
            },
            req,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total: f64 = self.data(x).iter().sum();
        let req = self.requires(x);
        let value = Tensor::scalar(total);
        Ok(self.push_op(value, Op::Sum { x }, req))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.data(x).len();
        if n == 0 {
            return Err(TensorError::Empty { op: "mean" });
        }
        let m: f64 = self.data(x).iter().sum::<f64>() / n as f64;
        let req = self.requires(x);
        let value = Tensor::scalar(m);
        Ok(self.push_op(value, Op::Mean { x }, req))
    }

    /// Pack scalar vars into a `[n]` vector.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::Empty { op: "stack" });
        }
        for &p in parts {
            if self.value(p).numel() != 1 {
                return Err(TensorError::NotScalar {
                    op: "stack",
                    shape: self.shape(p).to_vec(),
                });
            }
        }
        let data: Vec<f64> = parts.iter().map(|&p| self.data(p)[0]).collect();
        let req = parts.iter().any(|&p| self.requires(p));
        let value = Tensor::from_vec(vec![parts.len()], data)?;
        Ok(self.push_op(
            value,
            Op::Stack {
                parts: parts.to_vec(),
            },
            req,
        ))
    }

    // ---- backward ------------------------------------------------------

    /// Reverse sweep from a scalar loss. Populates gradients for every
    /// requires-grad var the loss depends on; untouched vars keep `None`
    /// (read as zeros through [`Tape::grad_or_zeros`]).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NotScalar {
                op: "backward",
                shape: self.shape(loss).to_vec(),
            });
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(upstream) = self.grads[idx].take() else {
                continue;
            };
            if self.nodes[idx].op.is_some() {
                self.backward_node(idx, &upstream);
            }
            self.grads[idx] = Some(upstream);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, delta: &[f64]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => self.grads[v.0] = Some(delta.to_vec()),
        }
    }

    fn backward_node(&mut self, idx: usize, dy: &[f64]) {
        // The op is moved out and restored so the borrow checker lets the
        // accumulate calls mutate grads while node data is read.
        let op = self.nodes[idx].op.take().expect("op checked by caller");
        match &op {
            Op::Matmul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.requires(*a) {
                    let mut da = vec![0.0; m * k];
                    nt_acc(dy, self.data(*b), m, n, k, &mut da);
                    self.accumulate(*a, &da);
                }
                if self.requires(*b) {
                    let mut db = vec![0.0; k * n];
                    tn_acc(self.data(*a), dy, m, k, n, &mut db);
                    self.accumulate(*b, &db);
                }
            }
            Op::MatmulNt { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[0];
                if self.requires(*a) {
                    let mut da = vec![0.0; m * k];
                    mm_acc(dy, self.data(*b), m, n, k, &mut da);
                    self.accumulate(*a, &da);
                }
                if self.requires(*b) {
                    let mut db = vec![0.0; n * k];
                    tn_acc(dy, self.data(*a), m, n, k, &mut db);
                    self.accumulate(*b, &db);
                }
            }
            Op::Add { a, b } => {
                self.accumulate(*a, dy);
                self.accumulate(*b, dy);
            }
            Op::Sub { a, b } => {
                self.accumulate(*a, dy);
                let neg: Vec<f64> = dy.iter().map(|v| -v).collect();
                self.accumulate(*b, &neg);
            }
            Op::AddBias { x, bias } => {
                self.accumulate(*x, dy);
                if self.requires(*bias) {
                    let c = self.shape(*bias)[0];
                    let mut db = vec![0.0; c];
                    for (i, v) in dy.iter().enumerate() {
                        db[i % c] += v;
                    }
                    self.accumulate(*bias, &db);
                }
            }
            Op::Scale { x, factor } => {
                let dx: Vec<f64> = dy.iter().map(|v| v * factor).collect();
                self.accumulate(*x, &dx);
            }
            Op::Embedding { table, ids } => {
                if self.requires(*table) {
                    let (vocab, d) = (self.shape(*table)[0], self.shape(*table)[1]);
                    let mut dt = vec![0.0; vocab * d];
                    for (t, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[id * d + j] += dy[t * d + j];
                        }
                    }
                    self.accumulate(*table, &dt);
                }
            }
            Op::SelectRow { x, row } => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                let mut dx = vec![0.0; r * c];
                dx[row * c..(row + 1) * c].copy_from_slice(dy);
                self.accumulate(*x, &dx);
            }
            Op::SliceRows { x, start, len } => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                let mut dx = vec![0.0; r * c];
                dx[start * c..(start + len) * c].copy_from_slice(dy);
                self.accumulate(*x, &dx);
            }
            Op::SliceCols { x, start, len } => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    dx[i * c + start..i * c + start + len]
                        .copy_from_slice(&dy[i * len..(i + 1) * len]);
                }
                self.accumulate(*x, &dx);
            }
            Op::ConcatCols { parts } => {
                let r = self.shape(parts[0])[0];
                let total_c: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
                let mut offset = 0;
                for &p in parts {
                    let c = self.shape(p)[1];
                    if self.requires(p) {
                        let mut dp = vec![0.0; r * c];
                        for i in 0..r {
                            dp[i * c..(i + 1) * c]
                                .copy_from_slice(&dy[i * total_c + offset..i * total_c + offset + c]);
                        }
                        self.accumulate(p, &dp);
                    }
                    offset += c;
                }
            }
            Op::CausalMask { x } => {
                let t = self.shape(*x)[0];
                let mut dx = vec![0.0; t * t];
                for i in 0..t {
                    for j in 0..=i {
                        dx[i * t + j] = dy[i * t + j];
                    }
                }
                self.accumulate(*x, &dx);
            }
            Op::SoftmaxRows { x } => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                let p = self.nodes[idx].value.data();
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let base = i * c;
                    let dot: f64 = (0..c).map(|j| dy[base + j] * p[base + j]).sum();
                    for j in 0..c {
                        dx[base + j] = p[base + j] * (dy[base + j] - dot);
                    }
                }
                self.accumulate(*x, &dx);
            }
            Op::LogSoftmaxRows { x } => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                let y = self.nodes[idx].value.data();
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let base = i * c;
                    let dsum: f64 = dy[base..base + c].iter().sum();
                    for j in 0..c {
                        dx[base + j] = dy[base + j] - y[base + j].exp() * dsum;
                    }
                }
                self.accumulate(*x, &dx);
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let (r, d) = (self.shape(*x)[0], self.shape(*x)[1]);
                let xd = self.data(*x).to_vec();
                let g = self.data(*gain).to_vec();
                let mut dx = vec![0.0; r * d];
                let mut dg = vec![0.0; d];
                let mut db = vec![0.0; d];
                for i in 0..r {
                    let row = &xd[i * d..(i + 1) * d];
                    let mean = row.iter().sum::<f64>() / d as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let rstd = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * rstd).collect();
                    let dyrow = &dy[i * d..(i + 1) * d];
                    let dxhat: Vec<f64> = (0..d).map(|j| dyrow[j] * g[j]).collect();
                    let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
                    let mean_dxhat_xhat =
                        (0..d).map(|j| dxhat[j] * xhat[j]).sum::<f64>() / d as f64;
                    for j in 0..d {
                        dx[i * d + j] =
                            rstd * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                        dg[j] += dyrow[j] * xhat[j];
                        db[j] += dyrow[j];
                    }
                }
                self.accumulate(*x, &dx);
                self.accumulate(*gain, &dg);
                self.accumulate(*bias, &db);
            }
            Op::Gelu { x } => {
                let dx: Vec<f64> = self
                    .data(*x)
                    .iter()
                    .zip(dy)
                    .map(|(&v, &d)| d * gelu_grad_scalar(v))
                    .collect();
                self.accumulate(*x, &dx);
            }
            Op::LogSigmoid { x } => {
                // d/dx log sigma(x) = sigma(-x)
                let dx: Vec<f64> = self
                    .data(*x)
                    .iter()
                    .zip(dy)
                    .map(|(&v, &d)| d * super::sigmoid_scalar(-v))
                    .collect();
                self.accumulate(*x, &dx);
            }
            Op::Gather { x, indices } => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                let mut dx = vec![0.0; r * c];
                for (k, &(i, j)) in indices.iter().enumerate() {
                    dx[i * c + j] += dy[k];
                }
                self.accumulate(*x, &dx);
            }
            Op::Sum { x } => {
                let dx = vec![dy[0]; self.nodes[x.0].value.numel()];
                self.accumulate(*x, &dx);
            }
            Op::Mean { x } => {
                let n = self.nodes[x.0].value.numel();
                let dx = vec![dy[0] / n as f64; n];
                self.accumulate(*x, &dx);
            }
            Op::Stack { parts } => {
                for (k, &p) in parts.iter().enumerate() {
                    self.accumulate(p, &dy[k..k + 1]);
                }
            }
        }
        self.nodes[idx].op = Some(op);
    }
}

const GELU_COEF: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_CUBIC: f64 = 0.044715;

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_COEF * (x + GELU_CUBIC * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_COEF * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_COEF * (1.0 + 3.0 * GELU_CUBIC * x * x)
}

// Accumulating matmul kernels. `out` must be sized by the caller.

/// out[m x n] += a[m x k] @ b[k x n]
fn mm_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

/// out[m x n] += a[m x k] @ b[n x k]^T
fn nt_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for p in 0..k {
                s += arow[p] * brow[p];
            }
            out[i * n + j] += s;
        }
    }
}

/// out[k x n] += a[m x k]^T @ b[m x n]
fn tn_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[i * n..(i + 1) * n];
            let orow = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}
