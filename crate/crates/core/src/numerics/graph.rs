//! Reverse-mode automatic differentiation over an append-only tape.
//!
//! Nodes are pushed in evaluation order, so the tape is already topologically
//! sorted and the backward pass is a single reverse sweep over it.

use rayon::prelude::*;
use libm::erf;

use crate::error::{Error, Result};

use super::kernels;
use super::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One attention sequence inside a packed row block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
    /// Rows `start + n_prefix ..` are objective tokens; only meaningful for
    /// [`MaskKind::CausalIsolatedTail`].
    pub n_prefix: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskKind {
    /// Position i sees every position j <= i.
    Causal,
    /// Causal, except tail positions (j >= n_prefix) are hidden from other
    /// tail positions.
    CausalIsolatedTail,
}

impl MaskKind {
    #[inline]
    pub fn allows(self, seg: &Segment, i: usize, j: usize) -> bool {
        if j > i {
            return false;
        }
        match self {
            MaskKind::Causal => true,
            MaskKind::CausalIsolatedTail => !(j >= seg.n_prefix && i >= seg.n_prefix && i != j),
        }
    }
}

#[derive(Clone, Debug)]
pub struct AttentionLayout {
    pub segments: Vec<Segment>,
    pub heads: usize,
    pub mask: MaskKind,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Square(Var),
    Gelu(Var),
    Map(Var, fn(f64) -> f64),
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<f64>,
    },
    Softmax {
        x: Var,
        temperature: f64,
    },
    LogSoftmax {
        x: Var,
        temperature: f64,
    },
    TopKRenorm {
        x: Var,
        selected: Vec<bool>,
        sums: Vec<f64>,
    },
    L2Rows {
        x: Var,
        norms: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: AttentionLayout,
        probs: Vec<Vec<f64>>,
    },
    Rows {
        sources: Vec<Var>,
        index: Vec<(usize, usize)>,
    },
    Pool {
        table: Var,
        groups: Vec<Vec<usize>>,
    },
    ConcatCols(Vec<Var>),
    SelectCol(Var, usize),
    MulCol(Var, Var),
    Pick(Var, Vec<usize>),
    Sum(Var),
    WeightedSum(Var, Vec<f64>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of a scalar with respect to every gradient-carrying leaf.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, or zeros shaped like `like` when nothing reached it.
    pub fn get_or_zeros(&self, v: Var, like: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like))
    }
}

/// Compute tape. Build values with the op methods, then call
/// [`Graph::backward`] once on a scalar.
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf that receives a gradient.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copy of `v` cut off from the gradient graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Transpose(a), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let ta = self.value(a);
        let tb = self.value(b);
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.zip_with(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.zip_with(a, b, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.zip_with(a, b, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// `x[m,n] + bias[n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.dims(x);
        if self.value(bias).numel() != n {
            return Err(Error::shape(
                "add_row",
                format!("bias has {} values, rows have {n}", self.value(bias).numel()),
            ));
        }
        let mut value = self.value(x).clone();
        let b = self.value(bias).data().to_vec();
        for row in value.data_mut().chunks_mut(n) {
            for (v, bj) in row.iter_mut().zip(&b) {
                *v += bj;
            }
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(value, Op::AddRow(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let mut value = self.value(x).clone();
        value.data_mut().iter_mut().for_each(|v| *v *= c);
        let rg = self.rg(&[x]);
        self.push(value, Op::Scale(x, c), rg)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        value.data_mut().iter_mut().for_each(|v| *v *= *v);
        let rg = self.rg(&[x]);
        self.push(value, Op::Square(x), rg)
    }

    /// Exact GeLU, `x * Phi(x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        value.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
        let rg = self.rg(&[x]);
        self.push(value, Op::Gelu(x), rg)
    }

    /// Elementwise `f` with caller-supplied derivative `df`.
    pub fn map(&mut self, x: Var, f: fn(f64) -> f64, df: fn(f64) -> f64) -> Var {
        let mut value = self.value(x).clone();
        value.data_mut().iter_mut().for_each(|v| *v = f(*v));
        let rg = self.rg(&[x]);
        self.push(value, Op::Map(x, df), rg)
    }

    /// Row-wise RMS normalization with a learned gain over the last axis.
    pub fn rmsnorm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::invalid("rmsnorm eps must be positive"));
        }
        let (rows, d) = self.dims(x);
        if self.value(gain).numel() != d {
            return Err(Error::shape("rmsnorm", "gain length differs from row width"));
        }
        let g = self.value(gain).data().to_vec();
        let mut value = self.value(x).clone();
        let mut inv_rms = Vec::with_capacity(rows);
        for row in value.data_mut().chunks_mut(d) {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            for (v, gj) in row.iter_mut().zip(&g) {
                *v *= inv * gj;
            }
            inv_rms.push(inv);
        }
        let rg = self.rg(&[x, gain]);
        Ok(self.push(value, Op::RmsNorm { x, gain, inv_rms }, rg))
    }

    /// Row-wise softmax of `x / temperature`.
    pub fn softmax(&mut self, x: Var, temperature: f64) -> Result<Var> {
        check_temperature(temperature)?;
        let mut value = self.value(x).clone();
        let n = value.cols();
        for row in value.data_mut().chunks_mut(n) {
            softmax_in_place(row, temperature);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Softmax { x, temperature }, rg))
    }

    /// Row-wise log-softmax of `x / temperature`.
    pub fn log_softmax(&mut self, x: Var, temperature: f64) -> Result<Var> {
        check_temperature(temperature)?;
        let mut value = self.value(x).clone();
        let n = value.cols();
        for row in value.data_mut().chunks_mut(n) {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v / temperature));
            let lse = max
                + row
                    .iter()
                    .map(|&v| (v / temperature - max).exp())
                    .sum::<f64>()
                    .ln();
            row.iter_mut().for_each(|v| *v = *v / temperature - lse);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::LogSoftmax { x, temperature }, rg))
    }

    /// Keeps the `k` largest entries of each row (ties to the lower column),
    /// zeroes the rest and rescales the kept entries to sum to one.
    ///
    /// Rows must be nonnegative with a positive kept sum, e.g. softmax output.
    pub fn top_k_renorm(&mut self, x: Var, k: usize) -> Result<Var> {
        let (rows, n) = self.dims(x);
        if k == 0 || k > n {
            return Err(Error::invalid(format!("top-k {k} outside 1..={n}")));
        }
        let mut value = self.value(x).clone();
        let mut selected = vec![false; rows * n];
        let mut sums = Vec::with_capacity(rows);
        for (r, row) in value.data_mut().chunks_mut(n).enumerate() {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            let sel = &mut selected[r * n..(r + 1) * n];
            for &j in &order[..k] {
                sel[j] = true;
            }
            let s: f64 = (0..n).filter(|&j| sel[j]).map(|j| row[j]).sum();
            for (j, v) in row.iter_mut().enumerate() {
                *v = if sel[j] { *v / s } else { 0.0 };
            }
            sums.push(s);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::TopKRenorm { x, selected, sums }, rg))
    }

    /// Scales every row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        let n = value.cols();
        let mut norms = Vec::with_capacity(value.rows());
        for row in value.data_mut().chunks_mut(n) {
            let norm = kernels::dot(row, row).sqrt().max(1e-12);
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        let rg = self.rg(&[x]);
        self.push(value, Op::L2Rows { x, norms }, rg)
    }

    /// Scaled dot-product attention over packed segments.
    ///
    /// `q`, `k`, `v` are `[rows, d]`; each segment attends only within itself
    /// under `layout.mask`. Heads split `d` into equal column blocks and
    /// logits are scaled by `1/sqrt(d / heads)`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: AttentionLayout) -> Result<Var> {
        let (rows, d) = self.dims(q);
        if self.dims(k) != (rows, d) || self.dims(v) != (rows, d) {
            return Err(Error::shape("attention", "q, k, v must share shape"));
        }
        if layout.heads == 0 || d % layout.heads != 0 {
            return Err(Error::shape(
                "attention",
                format!("width {d} not divisible into {} heads", layout.heads),
            ));
        }
        for s in &layout.segments {
            if s.start + s.len > rows {
                return Err(Error::shape("attention", "segment past end of rows"));
            }
        }
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let per_segment: Vec<(Vec<f64>, Vec<f64>)> = layout
            .segments
            .par_iter()
            .map(|seg| attention_segment_forward(qd, kd, vd, d, layout.heads, layout.mask, seg))
            .collect();
        let mut out = vec![0.0; rows * d];
        let mut probs = Vec::with_capacity(per_segment.len());
        for (seg, (o, p)) in layout.segments.iter().zip(per_segment) {
            out[seg.start * d..(seg.start + seg.len) * d].copy_from_slice(&o);
            probs.push(p);
        }
        let value = Tensor::matrix(rows, d, out)?;
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            },
            rg,
        ))
    }

    /// Output row `r` is row `index[r].1` of `sources[index[r].0]`.
    pub fn assemble_rows(&mut self, sources: &[Var], index: Vec<(usize, usize)>) -> Result<Var> {
        let cols = match sources.first() {
            Some(&s) => self.dims(s).1,
            None => return Err(Error::shape("assemble_rows", "no sources")),
        };
        for &s in sources {
            if self.dims(s).1 != cols {
                return Err(Error::shape("assemble_rows", "sources differ in width"));
            }
        }
        let mut data = Vec::with_capacity(index.len() * cols);
        for &(s, r) in &index {
            let src = sources
                .get(s)
                .ok_or_else(|| Error::shape("assemble_rows", format!("no source {s}")))?;
            let t = self.value(*src);
            if r >= t.rows() {
                return Err(Error::shape("assemble_rows", format!("row {r} out of range")));
            }
            data.extend_from_slice(t.row(r));
        }
        let value = Tensor::matrix(index.len(), cols, data)?;
        let rg = self.rg(sources);
        Ok(self.push(
            value,
            Op::Rows {
                sources: sources.to_vec(),
                index,
            },
            rg,
        ))
    }

    pub fn gather_rows(&mut self, src: Var, rows: &[usize]) -> Result<Var> {
        self.assemble_rows(&[src], rows.iter().map(|&r| (0, r)).collect())
    }

    /// Output row `g` is the sum of `table` rows listed in `groups[g]`;
    /// an empty group yields a zero row.
    pub fn pool_rows(&mut self, table: Var, groups: Vec<Vec<usize>>) -> Result<Var> {
        let (n_rows, cols) = self.dims(table);
        let t = self.value(table);
        let mut data = vec![0.0; groups.len() * cols];
        for (g, members) in groups.iter().enumerate() {
            let out = &mut data[g * cols..(g + 1) * cols];
            for &r in members {
                if r >= n_rows {
                    return Err(Error::shape("pool_rows", format!("row {r} out of range")));
                }
                for (o, x) in out.iter_mut().zip(t.row(r)) {
                    *o += x;
                }
            }
        }
        let value = Tensor::matrix(groups.len(), cols, data)?;
        let rg = self.rg(&[table]);
        Ok(self.push(value, Op::Pool { table, groups }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = match parts.first() {
            Some(&p) => self.dims(p).0,
            None => return Err(Error::shape("concat_cols", "no parts")),
        };
        let widths: Vec<usize> = parts.iter().map(|&p| self.dims(p).1).collect();
        if parts.iter().any(|&p| self.dims(p).0 != rows) {
            return Err(Error::shape("concat_cols", "parts differ in row count"));
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::matrix(rows, total, data)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Column `j` of `x[m,n]` as `[m,1]`.
    pub fn select_col(&mut self, x: Var, j: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if j >= n {
            return Err(Error::shape("select_col", format!("column {j} of {n}")));
        }
        let data = (0..m).map(|r| self.value(x).data()[r * n + j]).collect();
        let value = Tensor::matrix(m, 1, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::SelectCol(x, j), rg))
    }

    /// `x[m,n] * c[m,1]`, scaling each row by its coefficient.
    pub fn mul_col(&mut self, x: Var, c: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.value(c).numel() != m {
            return Err(Error::shape("mul_col", "coefficient count differs from rows"));
        }
        let coef = self.value(c).data().to_vec();
        let mut value = self.value(x).clone();
        for (row, cr) in value.data_mut().chunks_mut(n).zip(&coef) {
            row.iter_mut().for_each(|v| *v *= cr);
        }
        let rg = self.rg(&[x, c]);
        Ok(self.push(value, Op::MulCol(x, c), rg))
    }

    /// Flat elements of `x` at `positions`, as a vector.
    pub fn pick(&mut self, x: Var, positions: Vec<usize>) -> Result<Var> {
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(positions.len());
        for &p in &positions {
            data.push(
                *src
                    .get(p)
                    .ok_or_else(|| Error::shape("pick", format!("position {p} out of range")))?,
            );
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::vector(data), Op::Pick(x, positions), rg))
    }

    /// Main diagonal of a square matrix.
    pub fn diag(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        if m != n {
            return Err(Error::shape("diag", format!("[{m},{n}] is not square")));
        }
        self.pick(x, (0..n).map(|i| i * n + i).collect())
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// `sum_i weights[i] * x[i]` over the flat elements of `x`.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<f64>) -> Result<Var> {
        if weights.len() != self.value(x).numel() {
            return Err(Error::shape("weighted_sum", "weight count differs from numel"));
        }
        let s = kernels::dot(self.value(x).data(), &weights);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum(x, weights), rg))
    }

    /// `x W + b` for `x[m,in]`, `W[in,out]`, `b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add_row(h, b)
    }

    pub fn backward_done(&self) -> bool {
        self.backward_done
    }

    /// Re-arms [`Graph::backward`] on the same tape.
    pub fn reset_backward(&mut self) {
        self.backward_done = false;
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Contributions from several consumers of one node are summed, so a
    /// parameter used in many places receives its total derivative.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.backward_done {
            return Err(Error::invalid(
                "backward already ran on this tape; call reset_backward first",
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| match (g, &node.op) {
                (Some(g), Op::Leaf) if node.requires_grad => {
                    Some(Tensor::new(node.value.shape().to_vec(), g).expect("grad shape"))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut send = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                slot @ None => *slot = Some(contrib),
            }
        };

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).rows(), val(*a).cols());
                let n = val(*b).cols();
                if wants(*a) {
                    send(*a, kernels::matmul_bt(g, val(*b).data(), m, n, k));
                }
                if wants(*b) {
                    send(*b, kernels::matmul_at(val(*a).data(), g, m, k, n));
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (val(*a).rows(), val(*a).cols());
                send(*a, kernels::transpose(g, n, m));
            }
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a).data(), val(*b).data());
                if wants(*a) {
                    send(*a, g.iter().zip(vb).map(|(g, y)| g * y).collect());
                }
                if wants(*b) {
                    send(*b, g.iter().zip(va).map(|(g, x)| g * x).collect());
                }
            }
            Op::AddRow(x, b) => {
                let n = val(*b).numel();
                send(*x, g.to_vec());
                if wants(*b) {
                    let mut gb = vec![0.0; n];
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(a, r)| *a += r);
                    }
                    send(*b, gb);
                }
            }
            Op::Scale(x, c) => send(*x, g.iter().map(|v| v * c).collect()),
            Op::Square(x) => {
                let vx = val(*x).data();
                send(*x, g.iter().zip(vx).map(|(g, x)| 2.0 * x * g).collect());
            }
            Op::Gelu(x) => {
                let vx = val(*x).data();
                send(*x, g.iter().zip(vx).map(|(g, &x)| g * gelu_grad(x)).collect());
            }
            Op::Map(x, df) => {
                let vx = val(*x).data();
                send(*x, g.iter().zip(vx).map(|(g, &x)| g * df(x)).collect());
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let d = val(*gain).numel();
                let (vx, vg) = (val(*x).data(), val(*gain).data());
                if wants(*x) {
                    let mut gx = vec![0.0; vx.len()];
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        let xr = &vx[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let dot: f64 = (0..d).map(|j| gr[j] * vg[j] * xr[j]).sum();
                        let c = inv * inv * inv * dot / d as f64;
                        for j in 0..d {
                            gx[r * d + j] = inv * gr[j] * vg[j] - c * xr[j];
                        }
                    }
                    send(*x, gx);
                }
                if wants(*gain) {
                    let mut gg = vec![0.0; d];
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * vx[r * d + j] * inv;
                        }
                    }
                    send(*gain, gg);
                }
            }
            Op::Softmax { x, temperature } => {
                let y = node.value.data();
                let n = node.value.cols();
                let mut gx = vec![0.0; y.len()];
                for ((yr, gr), out) in y.chunks(n).zip(g.chunks(n)).zip(gx.chunks_mut(n)) {
                    let s = kernels::dot(yr, gr);
                    for j in 0..n {
                        out[j] = yr[j] * (gr[j] - s) / temperature;
                    }
                }
                send(*x, gx);
            }
            Op::LogSoftmax { x, temperature } => {
                let y = node.value.data();
                let n = node.value.cols();
                let mut gx = vec![0.0; y.len()];
                for ((yr, gr), out) in y.chunks(n).zip(g.chunks(n)).zip(gx.chunks_mut(n)) {
                    let s: f64 = gr.iter().sum();
                    for j in 0..n {
                        out[j] = (gr[j] - yr[j].exp() * s) / temperature;
                    }
                }
                send(*x, gx);
            }
            Op::TopKRenorm { x, selected, sums } => {
                let y = node.value.data();
                let n = node.value.cols();
                let mut gx = vec![0.0; y.len()];
                for (r, &s) in sums.iter().enumerate() {
                    let yr = &y[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let dot = kernels::dot(yr, gr);
                    for j in 0..n {
                        if selected[r * n + j] {
                            gx[r * n + j] = (gr[j] - dot) / s;
                        }
                    }
                }
                send(*x, gx);
            }
            Op::L2Rows { x, norms } => {
                let y = node.value.data();
                let n = node.value.cols();
                let mut gx = vec![0.0; y.len()];
                for (r, &norm) in norms.iter().enumerate() {
                    let yr = &y[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let dot = kernels::dot(yr, gr);
                    for j in 0..n {
                        gx[r * n + j] = (gr[j] - yr[j] * dot) / norm;
                    }
                }
                send(*x, gx);
            }
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            } => {
                let d = val(*q).cols();
                let rows = val(*q).rows();
                let (qd, kd, vd) = (val(*q).data(), val(*k).data(), val(*v).data());
                let per_segment: Vec<[Vec<f64>; 3]> = layout
                    .segments
                    .par_iter()
                    .zip(probs.par_iter())
                    .map(|(seg, p)| {
                        attention_segment_backward(qd, kd, vd, g, p, d, layout.heads, seg)
                    })
                    .collect();
                let mut gq = vec![0.0; rows * d];
                let mut gk = vec![0.0; rows * d];
                let mut gv = vec![0.0; rows * d];
                for (seg, [sq, sk, sv]) in layout.segments.iter().zip(per_segment) {
                    let span = seg.start * d..(seg.start + seg.len) * d;
                    gq[span.clone()].iter_mut().zip(&sq).for_each(|(a, b)| *a += b);
                    gk[span.clone()].iter_mut().zip(&sk).for_each(|(a, b)| *a += b);
                    gv[span].iter_mut().zip(&sv).for_each(|(a, b)| *a += b);
                }
                send(*q, gq);
                send(*k, gk);
                send(*v, gv);
            }
            Op::Rows { sources, index } => {
                let cols = node.value.cols();
                let mut parts: Vec<Option<Vec<f64>>> = sources
                    .iter()
                    .map(|&s| wants(s).then(|| vec![0.0; val(s).numel()]))
                    .collect();
                for (r, &(s, src_row)) in index.iter().enumerate() {
                    if let Some(buf) = &mut parts[s] {
                        let dst = &mut buf[src_row * cols..(src_row + 1) * cols];
                        dst.iter_mut()
                            .zip(&g[r * cols..(r + 1) * cols])
                            .for_each(|(a, b)| *a += b);
                    }
                }
                for (&s, part) in sources.iter().zip(parts) {
                    if let Some(buf) = part {
                        send(s, buf);
                    }
                }
            }
            Op::Pool { table, groups } => {
                let cols = node.value.cols();
                let mut gt = vec![0.0; val(*table).numel()];
                for (gi, members) in groups.iter().enumerate() {
                    let src = &g[gi * cols..(gi + 1) * cols];
                    for &r in members {
                        gt[r * cols..(r + 1) * cols]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(a, b)| *a += b);
                    }
                }
                send(*table, gt);
            }
            Op::ConcatCols(parts) => {
                let rows = node.value.rows();
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if wants(p) {
                        let mut gp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            gp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        send(p, gp);
                    }
                    offset += w;
                }
            }
            Op::SelectCol(x, j) => {
                let n = val(*x).cols();
                let mut gx = vec![0.0; val(*x).numel()];
                for (r, gr) in g.iter().enumerate() {
                    gx[r * n + j] = *gr;
                }
                send(*x, gx);
            }
            Op::MulCol(x, c) => {
                let n = val(*x).cols();
                let (vx, vc) = (val(*x).data(), val(*c).data());
                if wants(*x) {
                    let mut gx = g.to_vec();
                    for (row, cr) in gx.chunks_mut(n).zip(vc) {
                        row.iter_mut().for_each(|v| *v *= cr);
                    }
                    send(*x, gx);
                }
                if wants(*c) {
                    let gc = g
                        .chunks(n)
                        .zip(vx.chunks(n))
                        .map(|(gr, xr)| kernels::dot(gr, xr))
                        .collect();
                    send(*c, gc);
                }
            }
            Op::Pick(x, positions) => {
                let mut gx = vec![0.0; val(*x).numel()];
                for (&p, gp) in positions.iter().zip(g) {
                    gx[p] += gp;
                }
                send(*x, gx);
            }
            Op::Sum(x) => send(*x, vec![g[0]; val(*x).numel()]),
            Op::WeightedSum(x, w) => send(*x, w.iter().map(|w| w * g[0]).collect()),
        }
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("temperature must be positive, got {t}")))
    }
}

/// Stable softmax of `row / temperature`, in place.
pub fn softmax_in_place(row: &mut [f64], temperature: f64) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = ((*v - max) / temperature).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

fn attention_segment_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    d: usize,
    heads: usize,
    mask: MaskKind,
    seg: &Segment,
) -> (Vec<f64>, Vec<f64>) {
    let n = seg.len;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; n * d];
    let mut probs = vec![0.0; heads * n * n];
    let off = |i: usize, h: usize| (seg.start + i) * d + h * dh;
    for h in 0..heads {
        for i in 0..n {
            let p = &mut probs[(h * n + i) * n..(h * n + i + 1) * n];
            let qi = &q[off(i, h)..off(i, h) + dh];
            let mut max = f64::NEG_INFINITY;
            for j in 0..n {
                if mask.allows(seg, i, j) {
                    p[j] = kernels::dot(qi, &k[off(j, h)..off(j, h) + dh]) * scale;
                    max = max.max(p[j]);
                }
            }
            let mut total = 0.0;
            for j in 0..n {
                if mask.allows(seg, i, j) {
                    p[j] = (p[j] - max).exp();
                    total += p[j];
                }
            }
            let o = &mut out[i * d + h * dh..i * d + (h + 1) * dh];
            for j in 0..n {
                if p[j] != 0.0 {
                    p[j] /= total;
                    for (oc, vc) in o.iter_mut().zip(&v[off(j, h)..off(j, h) + dh]) {
                        *oc += p[j] * vc;
                    }
                }
            }
        }
    }
    (out, probs)
}

#[allow(clippy::too_many_arguments)]
fn attention_segment_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    g: &[f64],
    probs: &[f64],
    d: usize,
    heads: usize,
    seg: &Segment,
) -> [Vec<f64>; 3] {
    let n = seg.len;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut gq = vec![0.0; n * d];
    let mut gk = vec![0.0; n * d];
    let mut gv = vec![0.0; n * d];
    let at = |i: usize, h: usize| (seg.start + i) * d + h * dh;
    let mut dp = vec![0.0; n];
    for h in 0..heads {
        for i in 0..n {
            let p = &probs[(h * n + i) * n..(h * n + i + 1) * n];
            let gi = &g[at(i, h)..at(i, h) + dh];
            let mut weighted = 0.0;
            for j in 0..n {
                if p[j] == 0.0 {
                    dp[j] = 0.0;
                    continue;
                }
                let vj = &v[at(j, h)..at(j, h) + dh];
                dp[j] = kernels::dot(gi, vj);
                weighted += p[j] * dp[j];
                let gvj = &mut gv[j * d + h * dh..j * d + (h + 1) * dh];
                gvj.iter_mut().zip(gi).for_each(|(a, b)| *a += p[j] * b);
            }
            let qi = &q[at(i, h)..at(i, h) + dh];
            for j in 0..n {
                if p[j] == 0.0 {
                    continue;
                }
                let ds = p[j] * (dp[j] - weighted) * scale;
                let kj = &k[at(j, h)..at(j, h) + dh];
                let gqi = &mut gq[i * d + h * dh..i * d + (h + 1) * dh];
                gqi.iter_mut().zip(kj).for_each(|(a, b)| *a += ds * b);
                let gkj = &mut gk[j * d + h * dh..j * d + (h + 1) * dh];
                gkj.iter_mut().zip(qi).for_each(|(a, b)| *a += ds * b);
            }
        }
    }
    [gq, gk, gv]
}
