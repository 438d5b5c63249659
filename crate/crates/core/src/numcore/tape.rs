//! Define-by-run computation record with reverse-mode differentiation.
//!
//! Every op appends a node whose inputs are strictly earlier nodes, so the
//! node order is already a topological order and the backward sweep simply
//! walks it in reverse.

use rand::Rng;

use super::params::ParamStore;
use super::tensor::{gemm, Tensor};
use super::NumError;

/// Handle to a node in a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    Bmm { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddTiled(Var, Var),
    MulRows(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    RowSoftmax(Var),
    SegmentSoftmax { x: Var, seg: Vec<usize> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    MaskMul(Var, Vec<f64>),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    GatherRows(Var, Vec<usize>),
    ScatterAddRows(Var, Vec<usize>),
    SumCols(Var),
    ReduceSum(Var),
    ReduceMean(Var),
    Transpose(Var),
    Reshape(Var),
    BceLogits { logits: Var, coef_pos: Vec<f64>, coef_neg: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
}

#[cfg(test)]
thread_local! {
    /// Flips the sign of the relu backward rule; used by the gradient-check
    /// negative control.
    pub(crate) static CORRUPT_RELU_BACKWARD: std::cell::Cell<bool> = const { std::cell::Cell::new(false) };
}

pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    check_finite: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> NumError {
    NumError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn acc<'a>(grads: &'a mut [Option<Vec<f64>>], v: Var, len: usize) -> &'a mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            check_finite: cfg!(debug_assertions),
        }
    }

    /// Reject any op producing NaN or infinite values.
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
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

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var, NumError> {
        if self.check_finite && !value.is_finite() {
            return Err(NumError::NonFinite {
                op: op_name(&op),
            });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn val(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// Constant input; receives a gradient but is not trainable.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a named parameter from `store` as a trainable leaf.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var, NumError> {
        let idx = store
            .index_of(name)
            .ok_or_else(|| NumError::UnknownParam(name.to_string()))?;
        let value = store.value_at(idx).clone();
        self.nodes.push(Node {
            value,
            op: Op::Param(idx),
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.val(a), false, self.val(b), false, &mut out, false);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b))
    }

    /// Batched matmul: `[bt,m,k] x [bt,k,n]`, or `[bt,m,k] x [bt,n,k]^T`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, NumError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(mismatch("bmm", sa, sb));
        }
        let (bt, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(mismatch("bmm", sa, sb));
        }
        let mut out = vec![0.0; bt * m * n];
        let (av, bv) = (self.val(a), self.val(b));
        for i in 0..bt {
            gemm(
                m,
                k,
                n,
                &av[i * m * k..(i + 1) * m * k],
                false,
                &bv[i * k * n..(i + 1) * k * n],
                trans_b,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        self.push(Tensor::new(vec![bt, m, n], out)?, Op::Bmm { a, b, trans_b })
    }

    fn zip(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor, NumError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(mismatch(name, sa, sb));
        }
        let out: Vec<f64> = self.val(a).iter().zip(self.val(b)).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(sa.to_vec(), out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let t = self.zip(a, b, "add", |x, y| x + y)?;
        self.push(t, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let t = self.zip(a, b, "sub", |x, y| x - y)?;
        self.push(t, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let t = self.zip(a, b, "mul", |x, y| x * y)?;
        self.push(t, Op::Mul(a, b))
    }

    /// Adds `b` (`[k,n]` or `[n]`) to every consecutive block of `k` rows of `a`.
    /// With `k = 1` this is a bias add.
    pub fn add_tiled(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (m, n) = self.value(a).as_matrix_dims();
        let (k, nb) = self.value(b).as_matrix_dims();
        if n != nb || k == 0 || m % k != 0 {
            return Err(mismatch("add_tiled", self.shape(a), self.shape(b)));
        }
        let bv = self.val(b);
        let mut out = self.val(a).to_vec();
        for (r, row) in out.chunks_mut(n).enumerate() {
            let brow = &bv[(r % k) * n..(r % k + 1) * n];
            row.iter_mut().zip(brow).for_each(|(o, x)| *o += x);
        }
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(shape, out)?, Op::AddTiled(a, b))
    }

    /// Scales row `r` of `a` (`[m,n]`) by `s[r]`.
    pub fn mul_rows(&mut self, a: Var, s: Var) -> Result<Var, NumError> {
        let (m, n) = self.value(a).as_matrix_dims();
        if self.value(s).len() != m {
            return Err(mismatch("mul_rows", self.shape(a), self.shape(s)));
        }
        let sv = self.val(s);
        let mut out = self.val(a).to_vec();
        for (r, row) in out.chunks_mut(n.max(1)).enumerate() {
            row.iter_mut().for_each(|o| *o *= sv[r]);
        }
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(shape, out)?, Op::MulRows(a, s))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, NumError> {
        let out: Vec<f64> = self.val(a).iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(shape, out)?, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, NumError> {
        let out: Vec<f64> = self.val(a).iter().map(|x| x.max(0.0)).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(shape, out)?, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, NumError> {
        let out: Vec<f64> = self.val(a).iter().map(|x| sigmoid(*x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(shape, out)?, Op::Sigmoid(a))
    }

    /// Softmax over the last axis.
    pub fn row_softmax(&mut self, a: Var) -> Result<Var, NumError> {
        let (_, n) = self.value(a).as_matrix_dims();
        let mut out = self.val(a).to_vec();
        if n > 0 {
            for row in out.chunks_mut(n) {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    z += *v;
                }
                row.iter_mut().for_each(|v| *v /= z);
            }
        }
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(shape, out)?, Op::RowSoftmax(a))
    }

    /// Softmax over groups of entries of the 1-D `x` sharing a segment id.
    pub fn segment_softmax(&mut self, x: Var, seg: &[usize], n_segments: usize) -> Result<Var, NumError> {
        let xv = self.val(x);
        if xv.len() != seg.len() {
            return Err(mismatch("segment_softmax", self.shape(x), &[seg.len()]));
        }
        if let Some(&bad) = seg.iter().find(|&&s| s >= n_segments) {
            return Err(NumError::IndexOutOfRange {
                op: "segment_softmax",
                index: bad,
                bound: n_segments,
            });
        }
        let mut max = vec![f64::NEG_INFINITY; n_segments];
        for (v, &s) in xv.iter().zip(seg) {
            max[s] = max[s].max(*v);
        }
        let mut out: Vec<f64> = xv.iter().zip(seg).map(|(v, &s)| (v - max[s]).exp()).collect();
        let mut z = vec![0.0; n_segments];
        for (v, &s) in out.iter().zip(seg) {
            z[s] += v;
        }
        for (v, &s) in out.iter_mut().zip(seg) {
            *v /= z[s];
        }
        let shape = self.shape(x).to_vec();
        self.push(
            Tensor::new(shape, out)?,
            Op::SegmentSoftmax {
                x,
                seg: seg.to_vec(),
            },
        )
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, NumError> {
        let (m, n) = self.value(x).as_matrix_dims();
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return Err(mismatch("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let (xv, gv, bv) = (self.val(x), self.val(gamma), self.val(beta));
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..n {
                let h = (row[c] - mean) * is;
                xhat[r * n + c] = h;
                out[r * n + c] = h * gv[c] + bv[c];
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Inverted dropout: zeroes each entry with probability `p` and scales
    /// survivors by `1/(1-p)`. Identity when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var, NumError> {
        if p <= 0.0 {
            return Ok(x);
        }
        let mask = dropout_mask(self.value(x).len(), p, rng);
        self.mask_mul(x, mask)
    }

    /// Elementwise product with a constant mask.
    pub fn mask_mul(&mut self, x: Var, mask: Vec<f64>) -> Result<Var, NumError> {
        if mask.len() != self.value(x).len() {
            return Err(mismatch("mask_mul", self.shape(x), &[mask.len()]));
        }
        let out: Vec<f64> = self.val(x).iter().zip(&mask).map(|(a, b)| a * b).collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::new(shape, out)?, Op::MaskMul(x, mask))
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumError> {
        let Some(&first) = parts.first() else {
            return Err(NumError::Empty("concat_cols"));
        };
        let (m, _) = self.value(first).as_matrix_dims();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (mp, np) = self.value(p).as_matrix_dims();
            if mp != m {
                return Err(mismatch("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(np);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; m * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pv = self.val(p);
            for r in 0..m {
                out[r * total + off..r * total + off + w].copy_from_slice(&pv[r * w..(r + 1) * w]);
            }
            off += w;
        }
        self.push(Tensor::new(vec![m, total], out)?, Op::ConcatCols(parts.to_vec()))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var, NumError> {
        let (m, n) = self.value(x).as_matrix_dims();
        if start > end || end > n {
            return Err(mismatch("slice_cols", self.shape(x), &[start, end]));
        }
        let w = end - start;
        let xv = self.val(x);
        let mut out = Vec::with_capacity(m * w);
        for r in 0..m {
            out.extend_from_slice(&xv[r * n + start..r * n + end]);
        }
        self.push(Tensor::new(vec![m, w], out)?, Op::SliceCols { x, start })
    }

    /// Selects rows of a matrix; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var, NumError> {
        let (m, n) = self.value(x).as_matrix_dims();
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(NumError::IndexOutOfRange {
                op: "gather_rows",
                index: bad,
                bound: m,
            });
        }
        let xv = self.val(x);
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(&xv[i * n..(i + 1) * n]);
        }
        self.push(Tensor::new(vec![idx.len(), n], out)?, Op::GatherRows(x, idx.to_vec()))
    }

    /// Sums row `e` of `x` into output row `idx[e]` of an `[rows, n]` result.
    pub fn scatter_add_rows(&mut self, x: Var, idx: &[usize], rows: usize) -> Result<Var, NumError> {
        let (m, n) = self.value(x).as_matrix_dims();
        if idx.len() != m {
            return Err(mismatch("scatter_add_rows", self.shape(x), &[idx.len()]));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(NumError::IndexOutOfRange {
                op: "scatter_add_rows",
                index: bad,
                bound: rows,
            });
        }
        let xv = self.val(x);
        let mut out = vec![0.0; rows * n];
        for (e, &i) in idx.iter().enumerate() {
            out[i * n..(i + 1) * n]
                .iter_mut()
                .zip(&xv[e * n..(e + 1) * n])
                .for_each(|(o, v)| *o += v);
        }
        self.push(Tensor::new(vec![rows, n], out)?, Op::ScatterAddRows(x, idx.to_vec()))
    }

    /// Row sums: `[m,n] -> [m]`.
    pub fn sum_cols(&mut self, x: Var) -> Result<Var, NumError> {
        let (m, n) = self.value(x).as_matrix_dims();
        let xv = self.val(x);
        let out: Vec<f64> = (0..m).map(|r| xv[r * n..(r + 1) * n].iter().sum()).collect();
        self.push(Tensor::new(vec![m], out)?, Op::SumCols(x))
    }

    pub fn reduce_sum(&mut self, x: Var) -> Result<Var, NumError> {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::ReduceSum(x))
    }

    pub fn reduce_mean(&mut self, x: Var) -> Result<Var, NumError> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(NumError::Empty("reduce_mean"));
        }
        let s = self.value(x).sum() / n as f64;
        self.push(Tensor::scalar(s), Op::ReduceMean(x))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, NumError> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(mismatch("transpose", s, &[]));
        }
        let (m, n) = (s[0], s[1]);
        let xv = self.val(x);
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            for c in 0..n {
                out[c * m + r] = xv[r * n + c];
            }
        }
        self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, NumError> {
        let t = self.value(x).clone().reshaped(shape)?;
        self.push(t, Op::Reshape(x))
    }

    /// Mean over valid cells of the weighted binary cross-entropy, computed
    /// from logits: `pos_weight*y*softplus(-x) + (1-y)*softplus(x)`.
    pub fn bce_with_logits(
        &mut self,
        logits: Var,
        targets: &[f64],
        valid: &[bool],
        pos_weight: f64,
    ) -> Result<Var, NumError> {
        let n = self.value(logits).len();
        if targets.len() != n || valid.len() != n {
            return Err(mismatch("bce_with_logits", self.shape(logits), &[targets.len()]));
        }
        let count = valid.iter().filter(|v| **v).count();
        if count == 0 {
            return Err(NumError::Empty("bce_with_logits"));
        }
        let inv = 1.0 / count as f64;
        let mut coef_pos = vec![0.0; n];
        let mut coef_neg = vec![0.0; n];
        let mut loss = 0.0;
        let xv = self.val(logits);
        for i in 0..n {
            if !valid[i] {
                continue;
            }
            coef_pos[i] = pos_weight * targets[i] * inv;
            coef_neg[i] = (1.0 - targets[i]) * inv;
            loss += coef_pos[i] * softplus(-xv[i]) + coef_neg[i] * softplus(xv[i]);
        }
        self.push(
            Tensor::scalar(loss),
            Op::BceLogits {
                logits,
                coef_pos,
                coef_neg,
            },
        )
    }

    /// Reverse sweep from the scalar `loss`. Gradients of bound parameters are
    /// added into `store`; calling again accumulates.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<(), NumError> {
        self.backward_tape(loss)?;
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(pidx) = node.op {
                let g = self.grads[i].as_deref();
                store.accumulate_grad(pidx, g);
            }
        }
        Ok(())
    }

    /// Reverse sweep that only fills the tape's own gradient buffers.
    pub fn backward_tape(&mut self, loss: Var) -> Result<(), NumError> {
        if self.value(loss).len() != 1 {
            return Err(NumError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (av, bv) = (self.val(*a), self.val(*b));
                // dA = G B^T, dB = A^T G
                gemm(m, n, k, g, false, bv, true, acc(grads, *a, m * k), true);
                gemm(k, m, n, av, true, g, false, acc(grads, *b, k * n), true);
            }
            Op::Bmm { a, b, trans_b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (bt, m, k) = (sa[0], sa[1], sa[2]);
                let n = if *trans_b { sb[1] } else { sb[2] };
                let (av, bv) = (self.val(*a), self.val(*b));
                {
                    let ga = acc(grads, *a, bt * m * k);
                    for t in 0..bt {
                        let gt = &g[t * m * n..(t + 1) * m * n];
                        let bt_ = &bv[t * k * n..(t + 1) * k * n];
                        // dA = G B^T (or G B when b was transposed)
                        gemm(m, n, k, gt, false, bt_, !*trans_b, &mut ga[t * m * k..(t + 1) * m * k], true);
                    }
                }
                let gb = acc(grads, *b, bt * k * n);
                for t in 0..bt {
                    let gt = &g[t * m * n..(t + 1) * m * n];
                    let at = &av[t * m * k..(t + 1) * m * k];
                    let dst = &mut gb[t * k * n..(t + 1) * k * n];
                    if *trans_b {
                        // B is [n,k]: dB = G^T A
                        gemm(n, m, k, gt, true, at, false, dst, true);
                    } else {
                        gemm(k, m, n, at, true, gt, false, dst, true);
                    }
                }
            }
            Op::Add(a, b) => {
                add_into(acc(grads, *a, g.len()), g);
                add_into(acc(grads, *b, g.len()), g);
            }
            Op::Sub(a, b) => {
                add_into(acc(grads, *a, g.len()), g);
                acc(grads, *b, g.len()).iter_mut().zip(g).for_each(|(d, x)| *d -= x);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let ga = acc(grads, *a, g.len());
                for j in 0..g.len() {
                    ga[j] += g[j] * bv[j];
                }
                let gb = acc(grads, *b, g.len());
                for j in 0..g.len() {
                    gb[j] += g[j] * av[j];
                }
            }
            Op::AddTiled(a, b) => {
                add_into(acc(grads, *a, g.len()), g);
                let (k, n) = self.value(*b).as_matrix_dims();
                let gb = acc(grads, *b, k * n);
                for (r, row) in g.chunks(n).enumerate() {
                    let dst = &mut gb[(r % k) * n..(r % k + 1) * n];
                    add_into(dst, row);
                }
            }
            Op::MulRows(a, s) => {
                let (m, n) = self.value(*a).as_matrix_dims();
                let (av, sv) = (self.val(*a), self.val(*s));
                let ga = acc(grads, *a, m * n);
                for r in 0..m {
                    for c in 0..n {
                        ga[r * n + c] += g[r * n + c] * sv[r];
                    }
                }
                let gs = acc(grads, *s, m);
                for r in 0..m {
                    gs[r] += (0..n).map(|c| g[r * n + c] * av[r * n + c]).sum::<f64>();
                }
            }
            Op::Scale(a, c) => {
                acc(grads, *a, g.len()).iter_mut().zip(g).for_each(|(d, x)| *d += c * x);
            }
            Op::Relu(a) => {
                let av = self.val(*a);
                #[cfg(test)]
                let sign = if CORRUPT_RELU_BACKWARD.with(|c| c.get()) { -1.0 } else { 1.0 };
                #[cfg(not(test))]
                let sign = 1.0;
                let ga = acc(grads, *a, g.len());
                for j in 0..g.len() {
                    if av[j] > 0.0 {
                        ga[j] += sign * g[j];
                    }
                }
            }
            Op::Sigmoid(a) => {
                let ga = acc(grads, *a, g.len());
                for j in 0..g.len() {
                    ga[j] += g[j] * out[j] * (1.0 - out[j]);
                }
            }
            Op::RowSoftmax(a) => {
                let (_, n) = self.value(*a).as_matrix_dims();
                let ga = acc(grads, *a, g.len());
                for r in 0..g.len() / n.max(1) {
                    let (y, gy) = (&out[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for c in 0..n {
                        ga[r * n + c] += y[c] * (gy[c] - dot);
                    }
                }
            }
            Op::SegmentSoftmax { x, seg } => {
                let nseg = seg.iter().max().map_or(0, |m| m + 1);
                let mut dot = vec![0.0; nseg];
                for j in 0..g.len() {
                    dot[seg[j]] += out[j] * g[j];
                }
                let gx = acc(grads, *x, g.len());
                for j in 0..g.len() {
                    gx[j] += out[j] * (g[j] - dot[seg[j]]);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (m, n) = self.value(*x).as_matrix_dims();
                let gv = self.val(*gamma);
                {
                    let gg = acc(grads, *gamma, n);
                    for r in 0..m {
                        for c in 0..n {
                            gg[c] += g[r * n + c] * xhat[r * n + c];
                        }
                    }
                }
                {
                    let gb = acc(grads, *beta, n);
                    for r in 0..m {
                        add_into(gb, &g[r * n..(r + 1) * n]);
                    }
                }
                let gx = acc(grads, *x, m * n);
                let nf = n as f64;
                for r in 0..m {
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for c in 0..n {
                        let dh = g[r * n + c] * gv[c];
                        s1 += dh;
                        s2 += dh * xhat[r * n + c];
                    }
                    for c in 0..n {
                        let dh = g[r * n + c] * gv[c];
                        gx[r * n + c] += inv_std[r] / nf * (nf * dh - s1 - xhat[r * n + c] * s2);
                    }
                }
            }
            Op::MaskMul(x, mask) => {
                let gx = acc(grads, *x, g.len());
                for j in 0..g.len() {
                    gx[j] += g[j] * mask[j];
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.shape()[1];
                let m = node.value.shape()[0];
                let mut off = 0;
                for &p in parts {
                    let (_, w) = self.value(p).as_matrix_dims();
                    let gp = acc(grads, p, m * w);
                    for r in 0..m {
                        add_into(&mut gp[r * w..(r + 1) * w], &g[r * total + off..r * total + off + w]);
                    }
                    off += w;
                }
            }
            Op::SliceCols { x, start } => {
                let (m, n) = self.value(*x).as_matrix_dims();
                let w = node.value.shape()[1];
                let gx = acc(grads, *x, m * n);
                for r in 0..m {
                    add_into(&mut gx[r * n + start..r * n + start + w], &g[r * w..(r + 1) * w]);
                }
            }
            Op::GatherRows(x, idx) => {
                let (m, n) = self.value(*x).as_matrix_dims();
                let gx = acc(grads, *x, m * n);
                for (e, &r) in idx.iter().enumerate() {
                    add_into(&mut gx[r * n..(r + 1) * n], &g[e * n..(e + 1) * n]);
                }
            }
            Op::ScatterAddRows(x, idx) => {
                let (m, n) = self.value(*x).as_matrix_dims();
                let gx = acc(grads, *x, m * n);
                for (e, &r) in idx.iter().enumerate() {
                    add_into(&mut gx[e * n..(e + 1) * n], &g[r * n..(r + 1) * n]);
                }
            }
            Op::SumCols(x) => {
                let (m, n) = self.value(*x).as_matrix_dims();
                let gx = acc(grads, *x, m * n);
                for r in 0..m {
                    gx[r * n..(r + 1) * n].iter_mut().for_each(|d| *d += g[r]);
                }
            }
            Op::ReduceSum(x) => {
                let n = self.value(*x).len();
                acc(grads, *x, n).iter_mut().for_each(|d| *d += g[0]);
            }
            Op::ReduceMean(x) => {
                let n = self.value(*x).len();
                let v = g[0] / n as f64;
                acc(grads, *x, n).iter_mut().for_each(|d| *d += v);
            }
            Op::Transpose(x) => {
                let (m, n) = (self.shape(*x)[0], self.shape(*x)[1]);
                let gx = acc(grads, *x, m * n);
                for r in 0..m {
                    for c in 0..n {
                        gx[r * n + c] += g[c * m + r];
                    }
                }
            }
            Op::Reshape(x) => {
                add_into(acc(grads, *x, g.len()), g);
            }
            Op::BceLogits {
                logits,
                coef_pos,
                coef_neg,
            } => {
                let xv = self.val(*logits);
                let gx = acc(grads, *logits, xv.len());
                for j in 0..xv.len() {
                    let s = sigmoid(xv[j]);
                    gx[j] += g[0] * (coef_pos[j] * (s - 1.0) + coef_neg[j] * s);
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Param(_) => "param",
        Op::MatMul(..) => "matmul",
        Op::Bmm { .. } => "bmm",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::AddTiled(..) => "add_tiled",
        Op::MulRows(..) => "mul_rows",
        Op::Scale(..) => "scale",
        Op::Relu(_) => "relu",
        Op::Sigmoid(_) => "sigmoid",
        Op::RowSoftmax(_) => "row_softmax",
        Op::SegmentSoftmax { .. } => "segment_softmax",
        Op::LayerNorm { .. } => "layer_norm",
        Op::MaskMul(..) => "mask_mul",
        Op::ConcatCols(_) => "concat_cols",
        Op::SliceCols { .. } => "slice_cols",
        Op::GatherRows(..) => "gather_rows",
        Op::ScatterAddRows(..) => "scatter_add_rows",
        Op::SumCols(_) => "sum_cols",
        Op::ReduceSum(_) => "reduce_sum",
        Op::ReduceMean(_) => "reduce_mean",
        Op::Transpose(_) => "transpose",
        Op::Reshape(_) => "reshape",
        Op::BceLogits { .. } => "bce_with_logits",
    }
}

/// Inverted-dropout keep mask: each entry is `0` with probability `p`,
/// otherwise `1/(1-p)`.
pub fn dropout_mask<R: Rng + ?Sized>(len: usize, p: f64, rng: &mut R) -> Vec<f64> {
    let keep = 1.0 - p;
    let scale = if keep > 0.0 { 1.0 / keep } else { 0.0 };
    (0..len)
        .map(|_| if rng.random::<f64>() < keep { scale } else { 0.0 })
        .collect()
}
