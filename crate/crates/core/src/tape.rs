//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! Operations are recorded on a [`Tape`] in execution order, which is a
//! topological order by construction. [`Tape::backward`] walks the nodes once
//! in reverse and accumulates gradients for every node that requires one.
//! The tape is never mutated by `backward`, so repeated passes give
//! bit-identical results.

use crate::losses::{ctc_forward_backward, CtcTarget};
use crate::error::{Error, Result};
use crate::tensor::{gelu, gelu_grad, log_sum_exp, sigmoid, softmax_in_place, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Sigmoid(Var),
    Gelu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    RmsNorm { x: Var, inv_rms: Vec<f64> },
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    Sum(Var),
    GatherRows { table: Var, ids: Vec<usize> },
    Unfold { x: Var, kernel: usize, stride: usize },
    CrossEntropy { logits: Var, probs: Tensor, targets: Vec<usize> },
    Ctc { log_probs: Var, grad: Tensor },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// The gradient tape. Single-threaded; one tape per forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
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

fn matrix(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    if !t.is_matrix() {
        return Err(Error::shape(op, t.shape(), &[]));
    }
    Ok((t.rows(), t.cols()))
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul_nt(self.value(b))?;
        Ok(self.push(v, Op::MatMulNt(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).transpose()?;
        Ok(self.push(v, Op::Transpose(a), &[a]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).scale(c);
        self.push(v, Op::Scale(a, c), &[a])
    }

    /// Adds a `1 × n` row to every row of an `m × n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let v = self.broadcast_row(a, row, "add_row", |x, y| x + y)?;
        Ok(self.push(v, Op::AddRow(a, row), &[a, row]))
    }

    /// Multiplies every row of an `m × n` matrix by a `1 × n` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let v = self.broadcast_row(a, row, "mul_row", |x, y| x * y)?;
        Ok(self.push(v, Op::MulRow(a, row), &[a, row]))
    }

    fn broadcast_row(
        &self,
        a: Var,
        row: Var,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (at, rt) = (self.value(a), self.value(row));
        let (_, n) = matrix(at, op)?;
        if rt.numel() != n {
            return Err(Error::shape(op, at.shape(), rt.shape()));
        }
        let mut out = at.clone();
        let r = rt.data();
        for i in 0..out.rows() {
            for (x, &y) in out.row_mut(i).iter_mut().zip(r) {
                *x = f(*x, y);
            }
        }
        Ok(out)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu);
        self.push(v, Op::Gelu(a), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).softmax_rows()?;
        Ok(self.push(v, Op::Softmax(a), &[a]))
    }

    /// Softmax where row `i` only sees columns `j <= i + (cols - rows)`.
    /// Hidden entries are exactly zero.
    pub fn causal_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (m, n) = matrix(x, "causal_softmax_rows")?;
        if n < m {
            return Err(Error::shape("causal_softmax_rows", x.shape(), &[m, m]));
        }
        let shift = n - m;
        let mut out = x.clone();
        for i in 0..m {
            let row = out.row_mut(i);
            let visible = i + shift + 1;
            softmax_in_place(&mut row[..visible]);
            row[visible..].iter_mut().for_each(|v| *v = 0.0);
        }
        Ok(self.push(out, Op::Softmax(a), &[a]))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).log_softmax_rows()?;
        Ok(self.push(v, Op::LogSoftmax(a), &[a]))
    }

    /// Scales each row to unit root-mean-square.
    pub fn rms_norm_rows(&mut self, a: Var, eps: f64) -> Result<Var> {
        let x = self.value(a);
        let (m, n) = matrix(x, "rms_norm_rows")?;
        let mut out = x.clone();
        let mut inv_rms = Vec::with_capacity(m);
        for i in 0..m {
            let row = out.row_mut(i);
            let ms = row.iter().map(|v| v * v).sum::<f64>() / n.max(1) as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            row.iter_mut().for_each(|v| *v *= inv);
            inv_rms.push(inv);
        }
        Ok(self.push(out, Op::RmsNorm { x: a, inv_rms }, &[a]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_cols(&vals)?;
        Ok(self.push(v, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let v = self.value(a).slice_cols(start, end)?;
        Ok(self.push(v, Op::SliceCols { x: a, start }, &[a]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_rows(&vals)?;
        Ok(self.push(v, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let v = self.value(a).slice_rows(start, end)?;
        Ok(self.push(v, Op::SliceRows { x: a, start }, &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Mean of several same-shaped values.
    pub fn mean_of(&mut self, parts: &[Var]) -> Result<Var> {
        let (&first, rest) = parts.split_first().ok_or(Error::Empty("mean_of inputs"))?;
        let mut acc = first;
        for &p in rest {
            acc = self.add(acc, p)?;
        }
        Ok(self.scale(acc, 1.0 / parts.len() as f64))
    }

    /// `Σ a ⊙ weights` for a constant weight tensor.
    pub fn weighted_sum(&mut self, a: Var, weights: &Tensor) -> Result<Var> {
        let w = self.constant(weights.clone());
        let p = self.mul(a, w)?;
        Ok(self.sum(p))
    }

    /// Selects rows of `table` (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (rows, cols) = matrix(t, "gather_rows")?;
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(Error::IndexOutOfRange {
                    index: id,
                    bound: rows,
                });
            }
            data.extend_from_slice(t.row(id));
        }
        let v = Tensor::matrix(ids.len(), cols, data)?;
        Ok(self.push(
            v,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Sliding windows over time: row `p` of the output is the concatenation
    /// of input rows `p·stride .. p·stride + kernel`. Valid padding only.
    pub fn unfold_time(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let t = self.value(x);
        let (len, d) = matrix(t, "unfold_time")?;
        if kernel == 0 || stride == 0 {
            return Err(Error::Invalid("kernel and stride must be positive".into()));
        }
        if len < kernel {
            return Err(Error::InputTooShort {
                required: kernel,
                got: len,
            });
        }
        let out_len = (len - kernel) / stride + 1;
        let mut data = Vec::with_capacity(out_len * kernel * d);
        for p in 0..out_len {
            let start = p * stride;
            data.extend_from_slice(&t.data()[start * d..(start + kernel) * d]);
        }
        let v = Tensor::matrix(out_len, kernel * d, data)?;
        Ok(self.push(v, Op::Unfold { x, kernel, stride }, &[x]))
    }

    /// Mean token negative log-likelihood of `targets` under row-wise
    /// softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let x = self.value(logits);
        let (l, v) = matrix(x, "cross_entropy")?;
        if targets.len() != l {
            return Err(Error::shape("cross_entropy", x.shape(), &[targets.len()]));
        }
        if l == 0 {
            return Err(Error::Empty("cross_entropy targets"));
        }
        let mut probs = x.clone();
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t >= v {
                return Err(Error::IndexOutOfRange { index: t, bound: v });
            }
            let row = x.row(i);
            total += log_sum_exp(row) - row[t];
            softmax_in_place(probs.row_mut(i));
        }
        let loss = Tensor::scalar(total / l as f64);
        Ok(self.push(
            loss,
            Op::CrossEntropy {
                logits,
                probs,
                targets: targets.to_vec(),
            },
            &[logits],
        ))
    }

    /// CTC negative log-likelihood of `target` given per-frame log scores.
    pub fn ctc_loss(&mut self, log_probs: Var, target: &CtcTarget) -> Result<Var> {
        let (loss, grad) = ctc_forward_backward(self.value(log_probs), target)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Ctc { log_probs, grad },
            &[log_probs],
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let node = &self.nodes[loss.0];
        if !node.value.is_scalar() {
            return Err(Error::NonScalarLoss(node.value.shape().to_vec()));
        }
        if !node.requires_grad {
            return Err(Error::DetachedLoss);
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(node.value.shape(), 1.0));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if needs(*a) {
                    self.accumulate(grads, *a, g.matmul_nt(val(*b))?);
                }
                if needs(*b) {
                    self.accumulate(grads, *b, val(*a).matmul_tn(g)?);
                }
            }
            Op::MatMulNt(a, b) => {
                // y = a bᵀ: da = g b, db = gᵀ a
                if needs(*a) {
                    self.accumulate(grads, *a, g.matmul(val(*b))?);
                }
                if needs(*b) {
                    self.accumulate(grads, *b, g.matmul_tn(val(*a))?);
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()?),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    self.accumulate(grads, *a, g.zip_map(val(*b), |x, y| x * y)?);
                }
                if needs(*b) {
                    self.accumulate(grads, *b, g.zip_map(val(*a), |x, y| x * y)?);
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.scale(*c)),
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if needs(*row) {
                    let mut acc = vec![0.0; g.cols()];
                    for i in 0..g.rows() {
                        for (s, x) in acc.iter_mut().zip(g.row(i)) {
                            *s += x;
                        }
                    }
                    let shape = val(*row).shape().to_vec();
                    self.accumulate(grads, *row, Tensor::new(shape, acc)?);
                }
            }
            Op::MulRow(a, row) => {
                let r = val(*row).data();
                if needs(*a) {
                    let mut ga = g.clone();
                    for i in 0..ga.rows() {
                        for (x, y) in ga.row_mut(i).iter_mut().zip(r) {
                            *x *= y;
                        }
                    }
                    self.accumulate(grads, *a, ga);
                }
                if needs(*row) {
                    let av = val(*a);
                    let mut acc = vec![0.0; g.cols()];
                    for i in 0..g.rows() {
                        for ((s, x), y) in acc.iter_mut().zip(g.row(i)).zip(av.row(i)) {
                            *s += x * y;
                        }
                    }
                    let shape = val(*row).shape().to_vec();
                    self.accumulate(grads, *row, Tensor::new(shape, acc)?);
                }
            }
            Op::Sigmoid(a) => {
                let d = g.zip_map(&node.value, |gy, y| gy * y * (1.0 - y))?;
                self.accumulate(grads, *a, d);
            }
            Op::Gelu(a) => {
                let d = g.zip_map(val(*a), |gy, x| gy * gelu_grad(x))?;
                self.accumulate(grads, *a, d);
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let mut d = g.clone();
                for i in 0..y.rows() {
                    let dot: f64 = g.row(i).iter().zip(y.row(i)).map(|(a, b)| a * b).sum();
                    for (dx, &yv) in d.row_mut(i).iter_mut().zip(y.row(i)) {
                        *dx = yv * (*dx - dot);
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::LogSoftmax(a) => {
                let y = &node.value;
                let mut d = g.clone();
                for i in 0..y.rows() {
                    let total: f64 = g.row(i).iter().sum();
                    for (dx, &ly) in d.row_mut(i).iter_mut().zip(y.row(i)) {
                        *dx -= ly.exp() * total;
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::RmsNorm { x, inv_rms } => {
                let y = &node.value;
                let n = y.cols().max(1) as f64;
                let mut d = g.clone();
                for (i, &inv) in inv_rms.iter().enumerate() {
                    let dot: f64 = g.row(i).iter().zip(y.row(i)).map(|(a, b)| a * b).sum();
                    for (dx, &yv) in d.row_mut(i).iter_mut().zip(y.row(i)) {
                        *dx = inv * (*dx - yv * dot / n);
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if needs(p) {
                        self.accumulate(grads, p, g.slice_cols(start, start + w)?);
                    }
                    start += w;
                }
            }
            Op::SliceCols { x, start } => {
                let src = val(*x);
                let mut d = Tensor::zeros(src.shape());
                let w = g.cols();
                for i in 0..g.rows() {
                    d.row_mut(i)[*start..*start + w].copy_from_slice(g.row(i));
                }
                self.accumulate(grads, *x, d);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let h = val(p).rows();
                    if needs(p) {
                        self.accumulate(grads, p, g.slice_rows(start, start + h)?);
                    }
                    start += h;
                }
            }
            Op::SliceRows { x, start } => {
                let src = val(*x);
                let mut d = Tensor::zeros(src.shape());
                let c = g.cols();
                d.data_mut()[start * c..(start + g.rows()) * c].copy_from_slice(g.data());
                self.accumulate(grads, *x, d);
            }
            Op::Sum(a) => {
                let s = g.item();
                self.accumulate(grads, *a, Tensor::full(val(*a).shape(), s));
            }
            Op::GatherRows { table, ids } => {
                let mut d = Tensor::zeros(val(*table).shape());
                for (i, &id) in ids.iter().enumerate() {
                    for (dst, x) in d.row_mut(id).iter_mut().zip(g.row(i)) {
                        *dst += x;
                    }
                }
                self.accumulate(grads, *table, d);
            }
            Op::Unfold { x, kernel, stride } => {
                let src = val(*x);
                let dcols = src.cols();
                let mut d = Tensor::zeros(src.shape());
                for p in 0..g.rows() {
                    let start = p * stride * dcols;
                    let dst = &mut d.data_mut()[start..start + kernel * dcols];
                    for (a, b) in dst.iter_mut().zip(g.row(p)) {
                        *a += b;
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::CrossEntropy {
                logits,
                probs,
                targets,
            } => {
                let s = g.item() / targets.len() as f64;
                let mut d = probs.clone();
                for (i, &t) in targets.iter().enumerate() {
                    d.row_mut(i)[t] -= 1.0;
                }
                self.accumulate(grads, *logits, d.scale(s));
            }
            Op::Ctc { log_probs, grad } => {
                self.accumulate(grads, *log_probs, grad.scale(g.item()));
            }
        }
        Ok(())
    }
}

/// Central-difference gradient of a scalar function of one tensor.
pub fn finite_diff_grad(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, eps: f64) -> Tensor {
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (plus - minus) / (2.0 * eps);
    }
    out
}

/// Entries whose magnitudes are both below this are compared absolutely.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// `max_i |a_i - n_i| / max(|a_i|, |n_i|, REL_ERR_FLOOR)`.
pub fn max_rel_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(REL_ERR_FLOOR))
        .fold(0.0, f64::max)
}
