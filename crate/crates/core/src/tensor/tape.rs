//! Wengert tape: operations recorded in topological order during the
//! forward pass, replayed in exact reverse order by [`Tape::backward`].
//!
//! Gradients accumulate additively across fan-out and across repeated
//! backward calls; [`Tape::zero_grad`] resets them. Graph construction and
//! backward are single-threaded; evaluation of disjoint tapes may run in
//! parallel.

use crate::error::{Error, Result};
use crate::tensor::{all_finite, matmul_acc, matmul_nt_acc, matmul_tn_acc, Tensor};

const LN_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Matmul(Var, Var),
    MatmulNT(Var, Var),
    Transpose(Var),
    SliceRows(Var, usize, usize),
    SliceCols(Var, usize, usize),
    ConcatCols(Vec<Var>),
    Embed(Var, Vec<u32>),
    Softmax(Var),
    LogSoftmax(Var),
    SoftmaxCausal(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var },
    Gelu(Var),
    Relu(Var),
    Softplus(Var),
    Exp(Var),
    Sqrt(Var),
    Sum(Var),
    L2Norm(Var),
    CrossEntropy { logits: Var, targets: Vec<(usize, u32)> },
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
    /// Op-specific intermediates saved for backward (layer-norm: xhat ++ istd;
    /// cross-entropy: per-target softmax rows).
    saved: Vec<f64>,
}

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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward target with respect to `v`, if any
    /// was populated.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool, saved: Vec<f64>, opname: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(opname));
        }
        self.nodes.push(Node { op, value, requires_grad, saved });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Result<Var> {
        self.push(Op::Leaf, t, requires_grad, Vec::new(), "leaf")
    }

    /// Leaf insertion without the finiteness scan, for tensors already
    /// validated by the caller (model parameters on the hot path). A stray
    /// NaN still surfaces at the first op that consumes it.
    pub(crate) fn leaf_trusted(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { op: Op::Leaf, value: t, requires_grad, saved: Vec::new() });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.leaf(t, false)
    }

    fn req2(&self, a: Var, b: Var) -> bool {
        self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::ShapeMismatch { op, lhs: sa.to_vec(), rhs: sb.to_vec() });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.push(Op::Add(a, b), Tensor::new(shape, out)?, self.req2(a, b), Vec::new(), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.push(Op::Sub(a, b), Tensor::new(shape, out)?, self.req2(a, b), Vec::new(), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.push(Op::Mul(a, b), Tensor::new(shape, out)?, self.req2(a, b), Vec::new(), "mul")
    }

    /// (rows, n) + (n,) broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.value(x).shape().to_vec(), self.value(bias).shape().to_vec());
        let n = *sx.last().unwrap_or(&0);
        if sb.len() != 1 || sb[0] != n {
            return Err(Error::ShapeMismatch { op: "add-bias", lhs: sx, rhs: sb });
        }
        let bd = self.value(bias).data().to_vec();
        let out: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bd[i % n])
            .collect();
        self.push(Op::AddBias(x, bias), Tensor::new(sx, out)?, self.req2(x, bias), Vec::new(), "add-bias")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out: Vec<f64> = self.value(a).data().iter().map(|x| x * c).collect();
        let shape = self.value(a).shape().to_vec();
        let req = self.nodes[a.0].requires_grad;
        self.push(Op::Scale(a, c), Tensor::new(shape, out)?, req, Vec::new(), "scale")
    }

    fn mat_shape(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.value(v).shape();
        if s.len() != 2 {
            return Err(Error::InvalidArgument { op, msg: format!("expected rank-2 tensor, got {s:?}") });
        }
        Ok((s[0], s[1]))
    }

    /// A(m,k) @ B(k,n)
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat_shape("matmul", a)?;
        let (k2, n) = self.mat_shape("matmul", b)?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        self.push(Op::Matmul(a, b), Tensor::new(vec![m, n], out)?, self.req2(a, b), Vec::new(), "matmul")
    }

    /// A(m,k) @ B(n,k)^T
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat_shape("matmul-nt", a)?;
        let (n, k2) = self.mat_shape("matmul-nt", b)?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul-nt",
                lhs: vec![m, k],
                rhs: vec![n, k2],
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_nt_acc(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        self.push(Op::MatmulNT(a, b), Tensor::new(vec![m, n], out)?, self.req2(a, b), Vec::new(), "matmul-nt")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.mat_shape("transpose", a)?;
        let ad = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = ad[i * n + j];
            }
        }
        let req = self.nodes[a.0].requires_grad;
        self.push(Op::Transpose(a), Tensor::new(vec![n, m], out)?, req, Vec::new(), "transpose")
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.mat_shape("slice-rows", a)?;
        if start >= end || end > m {
            return Err(Error::InvalidArgument {
                op: "slice-rows",
                msg: format!("range {start}..{end} out of 0..{m}"),
            });
        }
        let out = self.value(a).data()[start * n..end * n].to_vec();
        let req = self.nodes[a.0].requires_grad;
        self.push(Op::SliceRows(a, start, end), Tensor::new(vec![end - start, n], out)?, req, Vec::new(), "slice-rows")
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.mat_shape("slice-cols", a)?;
        if start >= end || end > n {
            return Err(Error::InvalidArgument {
                op: "slice-cols",
                msg: format!("range {start}..{end} out of 0..{n}"),
            });
        }
        let w = end - start;
        let ad = self.value(a).data();
        let mut out = vec![0.0; m * w];
        for i in 0..m {
            out[i * w..(i + 1) * w].copy_from_slice(&ad[i * n + start..i * n + end]);
        }
        let req = self.nodes[a.0].requires_grad;
        self.push(Op::SliceCols(a, start, end), Tensor::new(vec![m, w], out)?, req, Vec::new(), "slice-cols")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument { op: "concat-cols", msg: "no inputs".into() });
        }
        let (m, _) = self.mat_shape("concat-cols", parts[0])?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0usize;
        for &p in parts {
            let (mp, np) = self.mat_shape("concat-cols", p)?;
            if mp != m {
                return Err(Error::ShapeMismatch {
                    op: "concat-cols",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
            widths.push(np);
            total += np;
        }
        let mut out = vec![0.0; m * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pd = self.value(p).data();
            for i in 0..m {
                out[i * total + off..i * total + off + w].copy_from_slice(&pd[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let req = parts.iter().any(|&p| self.nodes[p.0].requires_grad);
        self.push(Op::ConcatCols(parts.to_vec()), Tensor::new(vec![m, total], out)?, req, Vec::new(), "concat-cols")
    }

    /// Row lookup: weight (V, d), ids of length T -> (T, d).
    pub fn embed(&mut self, weight: Var, ids: &[u32]) -> Result<Var> {
        let (v, d) = self.mat_shape("embed", weight)?;
        for &id in ids {
            if id as usize >= v {
                return Err(Error::UnknownToken { id, vocab: v });
            }
        }
        let wd = self.value(weight).data();
        let mut out = vec![0.0; ids.len() * d];
        for (t, &id) in ids.iter().enumerate() {
            out[t * d..(t + 1) * d].copy_from_slice(&wd[id as usize * d..(id as usize + 1) * d]);
        }
        let req = self.nodes[weight.0].requires_grad;
        self.push(Op::Embed(weight, ids.to_vec()), Tensor::new(vec![ids.len(), d], out)?, req, Vec::new(), "embed")
    }

    fn rows_cols(&self, v: Var) -> (usize, usize) {
        let s = self.value(v).shape();
        let n = *s.last().unwrap_or(&1);
        (self.value(v).numel() / n.max(1), n)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (rows, n) = self.rows_cols(a);
        let ad = self.value(a).data();
        let mut out = vec![0.0; ad.len()];
        for r in 0..rows {
            softmax_row(&ad[r * n..(r + 1) * n], &mut out[r * n..(r + 1) * n]);
        }
        let shape = self.value(a).shape().to_vec();
        let req = self.nodes[a.0].requires_grad;
        self.push(Op::Softmax(a), Tensor::new(shape, out)?, req, Vec::new(), "softmax")
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let (rows, n) = self.rows_cols(a);
        let ad = self.value(a).data();
        let mut out = vec![0.0; ad.len()];
        for r in 0..rows {
            let row = &ad[r * n..(r + 1) * n];
            let lse = log_sum_exp(row);
            for (o, &x) in out[r * n..(r + 1) * n].iter_mut().zip(row) {
                *o = x - lse;
            }
        }
        let shape = self.value(a).shape().to_vec();
        let req = self.nodes[a.0].requires_grad;
        self.push(Op::LogSoftmax(a), Tensor::new(shape, out)?, req, Vec::new(), "log-softmax")
    }

    /// Causal softmax on a square (t, t) score matrix: row i is a softmax
    /// over columns 0..=i, exactly zero elsewhere.
    pub fn softmax_causal(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.mat_shape("softmax-causal", a)?;
        if m != n {
            return Err(Error::ShapeMismatch { op: "softmax-causal", lhs: vec![m, n], rhs: vec![n, n] });
        }
        let ad = self.value(a).data();
        let mut out = vec![0.0; ad.len()];
        for i in 0..m {
            softmax_row(&ad[i * n..i * n + i + 1], &mut out[i * n..i * n + i + 1]);
        }
        let req = self.nodes[a.0].requires_grad;
        self.push(Op::SoftmaxCausal(a), Tensor::new(vec![m, n], out)?, req, Vec::new(), "softmax-causal")
    }

    /// Layer normalization over the last axis with affine rescale.
    /// Variance is floored by epsilon 1e-5, so constant inputs normalize
    /// to zero before the affine terms.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (rows, n) = self.rows_cols(x);
        let sg = self.value(gamma).shape().to_vec();
        if sg != [n] || self.value(beta).shape() != [n] {
            return Err(Error::ShapeMismatch { op: "layer-norm", lhs: self.value(x).shape().to_vec(), rhs: sg });
        }
        let xd = self.value(x).data();
        let gd = self.value(gamma).data().to_vec();
        let bd = self.value(beta).data().to_vec();
        let mut out = vec![0.0; xd.len()];
        let mut saved = vec![0.0; xd.len() + rows]; // xhat ++ istd
        for r in 0..rows {
            let row = &xd[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let istd = 1.0 / (var + LN_EPS).sqrt();
            for j in 0..n {
                let xhat = (row[j] - mean) * istd;
                saved[r * n + j] = xhat;
                out[r * n + j] = xhat * gd[j] + bd[j];
            }
            saved[xd.len() + r] = istd;
        }
        let shape = self.value(x).shape().to_vec();
        let req = self.nodes[x.0].requires_grad || self.req2(gamma, beta);
        self.push(Op::LayerNorm { x, gamma, beta }, Tensor::new(shape, out)?, req, saved, "layer-norm")
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out: Vec<f64> = self.value(a).data().iter().map(|&x| gelu(x)).collect();
        let shape = self.value(a).shape().to_vec();
        let req = self.nodes[a.0].requires_grad;
        self.push(Op::Gelu(a), Tensor::new(shape, out)?, req, Vec::new(), "gelu")
    }

    /// Clamp at zero.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out: Vec<f64> = self.value(a).data().iter().map(|&x| x.max(0.0)).collect();
        let shape = self.value(a).shape().to_vec();
        let req = self.nodes[a.0].requires_grad;
        self.push(Op::Relu(a), Tensor::new(shape, out)?, req, Vec::new(), "relu")
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let out: Vec<f64> = self.value(a).data().iter().map(|&x| softplus(x)).collect();
        let shape = self.value(a).shape().to_vec();
        let req = self.nodes[a.0].requires_grad;
        self.push(Op::Softplus(a), Tensor::new(shape, out)?, req, Vec::new(), "softplus")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out: Vec<f64> = self.value(a).data().iter().map(|&x| x.exp()).collect();
        let shape = self.value(a).shape().to_vec();
        let req = self.nodes[a.0].requires_grad;
        self.push(Op::Exp(a), Tensor::new(shape, out)?, req, Vec::new(), "exp")
    }

    /// Elementwise square root. The derivative at exactly zero is taken as
    /// zero (subgradient convention), matching `l2_norm`.
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let out: Vec<f64> = self.value(a).data().iter().map(|&x| x.sqrt()).collect();
        let shape = self.value(a).shape().to_vec();
        let req = self.nodes[a.0].requires_grad;
        self.push(Op::Sqrt(a), Tensor::new(shape, out)?, req, Vec::new(), "sqrt")
    }

    /// Sum of all entries -> scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().sum();
        let req = self.nodes[a.0].requires_grad;
        self.push(Op::Sum(a), Tensor::scalar(s), req, Vec::new(), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Euclidean norm of all entries -> scalar. Gradient at the zero
    /// vector is zero (subgradient convention).
    pub fn l2_norm(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().map(|x| x * x).sum();
        let req = self.nodes[a.0].requires_grad;
        self.push(Op::L2Norm(a), Tensor::scalar(s.sqrt()), req, Vec::new(), "l2-norm")
    }

    /// Mean negative log-likelihood of `targets = [(row, token)]` under the
    /// per-row softmax of `logits` -> scalar.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[(usize, u32)]) -> Result<Var> {
        let (rows, v) = self.mat_shape("cross-entropy", logits)?;
        if targets.is_empty() {
            return Err(Error::InvalidArgument { op: "cross-entropy", msg: "no targets".into() });
        }
        for &(r, t) in targets {
            if r >= rows || t as usize >= v {
                return Err(Error::InvalidArgument {
                    op: "cross-entropy",
                    msg: format!("target ({r},{t}) outside logits ({rows},{v})"),
                });
            }
        }
        let ld = self.value(logits).data();
        let mut saved = vec![0.0; targets.len() * v]; // softmax of each target row
        let mut total = 0.0;
        for (i, &(r, t)) in targets.iter().enumerate() {
            let row = &ld[r * v..(r + 1) * v];
            let lse = log_sum_exp(row);
            total += lse - row[t as usize];
            for (p, &x) in saved[i * v..(i + 1) * v].iter_mut().zip(row) {
                *p = (x - lse).exp();
            }
        }
        let meannll = total / targets.len() as f64;
        let req = self.nodes[logits.0].requires_grad;
        self.push(
            Op::CrossEntropy { logits, targets: targets.to_vec() },
            Tensor::scalar(meannll),
            req,
            saved,
            "cross-entropy",
        )
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Populate gradients of `loss` with respect to every reachable node
    /// that requires grad, in exact reverse topological order.
    ///
    /// Repeated backward calls accumulate additively into the stored
    /// gradients; propagation itself always runs through fresh buffers.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::InvalidArgument { op: "backward", msg: "empty graph".into() });
        }
        let lshape = self.value(loss).shape().to_vec();
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(lshape));
        }
        let mut work: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        work[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let g = match work[id].take() {
                Some(g) => g,
                None => continue,
            };
            // Finite-gradient invariant: a NaN here means the graph diverged.
            if !all_finite(&g) {
                return Err(Error::NonFinite("backward"));
            }
            self.propagate(id, &g, &mut work)?;
            work[id] = Some(g);
        }
        for (slot, w) in self.grads.iter_mut().zip(work) {
            if let Some(g) = w {
                match slot {
                    Some(buf) => {
                        for (b, x) in buf.iter_mut().zip(&g) {
                            *b += x;
                        }
                    }
                    None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn accum(&mut self, work: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = &mut work[v.0];
        match slot {
            Some(buf) => {
                for (b, x) in buf.iter_mut().zip(g) {
                    *b += x;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    fn propagate(&mut self, id: usize, g: &[f64], work: &mut [Option<Vec<f64>>]) -> Result<()> {
        let op = self.nodes[id].op.clone();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(work, a, g);
                self.accum(work, b, g);
            }
            Op::Sub(a, b) => {
                self.accum(work, a, g);
                let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                self.accum(work, b, &neg);
            }
            Op::Mul(a, b) => {
                let da: Vec<f64> = g.iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
                let db: Vec<f64> = g.iter().zip(self.value(a).data()).map(|(x, y)| x * y).collect();
                self.accum(work, a, &da);
                self.accum(work, b, &db);
            }
            Op::AddBias(x, bias) => {
                self.accum(work, x, g);
                let n = self.value(bias).numel();
                let mut db = vec![0.0; n];
                for (i, &v) in g.iter().enumerate() {
                    db[i % n] += v;
                }
                self.accum(work, bias, &db);
            }
            Op::Scale(a, c) => {
                let da: Vec<f64> = g.iter().map(|x| x * c).collect();
                self.accum(work, a, &da);
            }
            Op::Matmul(a, b) => {
                let (m, k) = (self.value(a).shape()[0], self.value(a).shape()[1]);
                let n = self.value(b).shape()[1];
                let mut da = vec![0.0; m * k];
                matmul_nt_acc(g, self.value(b).data(), m, n, k, &mut da);
                let mut db = vec![0.0; k * n];
                matmul_tn_acc(self.value(a).data(), g, m, k, n, &mut db);
                self.accum(work, a, &da);
                self.accum(work, b, &db);
            }
            Op::MatmulNT(a, b) => {
                let (m, k) = (self.value(a).shape()[0], self.value(a).shape()[1]);
                let n = self.value(b).shape()[0];
                let mut da = vec![0.0; m * k];
                matmul_acc(g, self.value(b).data(), m, n, k, &mut da);
                let mut db = vec![0.0; n * k];
                matmul_tn_acc(g, self.value(a).data(), m, n, k, &mut db);
                self.accum(work, a, &da);
                self.accum(work, b, &db);
            }
            Op::Transpose(a) => {
                let (m, n) = (self.value(a).shape()[0], self.value(a).shape()[1]);
                let mut da = vec![0.0; m * n];
                for j in 0..n {
                    for i in 0..m {
                        da[i * n + j] = g[j * m + i];
                    }
                }
                self.accum(work, a, &da);
            }
            Op::SliceRows(a, start, end) => {
                let n = self.value(a).shape()[1];
                let mut da = vec![0.0; self.value(a).numel()];
                da[start * n..end * n].copy_from_slice(g);
                self.accum(work, a, &da);
            }
            Op::SliceCols(a, start, end) => {
                let (m, n) = (self.value(a).shape()[0], self.value(a).shape()[1]);
                let w = end - start;
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    da[i * n + start..i * n + end].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                self.accum(work, a, &da);
            }
            Op::ConcatCols(parts) => {
                let total: usize = parts.iter().map(|&p| self.value(p).shape()[1]).sum();
                let m = self.value(parts[0]).shape()[0];
                let mut off = 0;
                for &p in &parts {
                    let w = self.value(p).shape()[1];
                    let mut dp = vec![0.0; m * w];
                    for i in 0..m {
                        dp[i * w..(i + 1) * w].copy_from_slice(&g[i * total + off..i * total + off + w]);
                    }
                    self.accum(work, p, &dp);
                    off += w;
                }
            }
            Op::Embed(weight, ids) => {
                let (v, d) = (self.value(weight).shape()[0], self.value(weight).shape()[1]);
                let mut dw = vec![0.0; v * d];
                for (t, &id) in ids.iter().enumerate() {
                    let dst = &mut dw[id as usize * d..(id as usize + 1) * d];
                    for (o, &x) in dst.iter_mut().zip(&g[t * d..(t + 1) * d]) {
                        *o += x;
                    }
                }
                self.accum(work, weight, &dw);
            }
            Op::Softmax(a) => {
                let y = self.nodes[id].value.clone();
                let n = *y.shape().last().unwrap();
                let mut da = vec![0.0; y.numel()];
                for r in 0..y.numel() / n {
                    let yr = &y.data()[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        da[r * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accum(work, a, &da);
            }
            Op::LogSoftmax(a) => {
                let y = self.nodes[id].value.clone();
                let n = *y.shape().last().unwrap();
                let mut da = vec![0.0; y.numel()];
                for r in 0..y.numel() / n {
                    let yr = &y.data()[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let gsum: f64 = gr.iter().sum();
                    for j in 0..n {
                        da[r * n + j] = gr[j] - yr[j].exp() * gsum;
                    }
                }
                self.accum(work, a, &da);
            }
            Op::SoftmaxCausal(a) => {
                let y = self.nodes[id].value.clone();
                let n = y.shape()[1];
                let mut da = vec![0.0; y.numel()];
                for i in 0..n {
                    let yr = &y.data()[i * n..i * n + i + 1];
                    let gr = &g[i * n..i * n + i + 1];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..=i {
                        da[i * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accum(work, a, &da);
            }
            Op::LayerNorm { x, gamma, beta } => {
                let n = self.value(gamma).numel();
                let numel = self.value(x).numel();
                let rows = numel / n;
                let saved = std::mem::take(&mut self.nodes[id].saved);
                let (xhat, istd) = saved.split_at(numel);
                let gd = self.value(gamma).data().to_vec();
                let mut dx = vec![0.0; numel];
                let mut dgamma = vec![0.0; n];
                let mut dbeta = vec![0.0; n];
                for r in 0..rows {
                    let xh = &xhat[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for j in 0..n {
                        let dxh = gr[j] * gd[j];
                        sum_dxhat += dxh;
                        sum_dxhat_xhat += dxh * xh[j];
                        dgamma[j] += gr[j] * xh[j];
                        dbeta[j] += gr[j];
                    }
                    let c = istd[r] / n as f64;
                    for j in 0..n {
                        let dxh = gr[j] * gd[j];
                        dx[r * n + j] = c * (n as f64 * dxh - sum_dxhat - xh[j] * sum_dxhat_xhat);
                    }
                }
                self.nodes[id].saved = saved;
                self.accum(work, x, &dx);
                self.accum(work, gamma, &dgamma);
                self.accum(work, beta, &dbeta);
            }
            Op::Gelu(a) => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(self.value(a).data())
                    .map(|(gv, &x)| gv * gelu_deriv(x))
                    .collect();
                self.accum(work, a, &da);
            }
            Op::Relu(a) => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(self.value(a).data())
                    .map(|(gv, &x)| if x > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.accum(work, a, &da);
            }
            Op::Softplus(a) => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(self.value(a).data())
                    .map(|(gv, &x)| gv * sigmoid(x))
                    .collect();
                self.accum(work, a, &da);
            }
            Op::Exp(a) => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(self.nodes[id].value.data())
                    .map(|(gv, &y)| gv * y)
                    .collect();
                self.accum(work, a, &da);
            }
            Op::Sqrt(a) => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(self.nodes[id].value.data())
                    .map(|(gv, &y)| if y == 0.0 { 0.0 } else { gv / (2.0 * y) })
                    .collect();
                self.accum(work, a, &da);
            }
            Op::Sum(a) => {
                let da = vec![g[0]; self.value(a).numel()];
                self.accum(work, a, &da);
            }
            Op::L2Norm(a) => {
                let norm = self.nodes[id].value.item();
                let da: Vec<f64> = if norm == 0.0 {
                    vec![0.0; self.value(a).numel()]
                } else {
                    self.value(a).data().iter().map(|&x| g[0] * x / norm).collect()
                };
                self.accum(work, a, &da);
            }
            Op::CrossEntropy { logits, targets } => {
                let v = self.value(logits).shape()[1];
                let numel = self.value(logits).numel();
                let saved = std::mem::take(&mut self.nodes[id].saved);
                let scale = g[0] / targets.len() as f64;
                let mut dl = vec![0.0; numel];
                for (i, &(r, t)) in targets.iter().enumerate() {
                    let probs = &saved[i * v..(i + 1) * v];
                    let dst = &mut dl[r * v..(r + 1) * v];
                    for (o, &p) in dst.iter_mut().zip(probs) {
                        *o += scale * p;
                    }
                    dst[t as usize] -= scale;
                }
                self.nodes[id].saved = saved;
                self.accum(work, logits, &dl);
            }
        }
        Ok(())
    }
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf1(tape: &mut Tape, v: Vec<f64>) -> Var {
        let n = v.len();
        tape.leaf(Tensor::new(vec![n], v).unwrap(), true).unwrap()
    }

    #[test]
    fn square_gradient() {
        // f(x) = x^2 at x = 3 -> grad 6
        let mut t = Tape::new();
        let x = leaf1(&mut t, vec![3.0]);
        let y = t.mul(x, x).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn product_gradients() {
        // f(x,y) = x*y at (2,5) -> grads (5,2)
        let mut t = Tape::new();
        let x = leaf1(&mut t, vec![2.0]);
        let y = leaf1(&mut t, vec![5.0]);
        let z = t.mul(x, y).unwrap();
        t.backward(z).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[5.0]);
        assert_eq!(t.grad(y).unwrap(), &[2.0]);
    }

    #[test]
    fn grad_of_sum_is_all_ones() {
        let mut t = Tape::new();
        let h = leaf1(&mut t, vec![0.3, -1.2, 4.0]);
        let s = t.sum(h).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(h).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn linear_head_grad_equals_weights() {
        // loss = w . h -> dloss/dh = w
        let mut t = Tape::new();
        let h = leaf1(&mut t, vec![0.5, -2.0, 1.5]);
        let w = t
            .constant(Tensor::new(vec![3], vec![2.0, -1.0, 0.25]).unwrap())
            .unwrap();
        let p = t.mul(h, w).unwrap();
        let loss = t.sum(p).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(h).unwrap(), &[2.0, -1.0, 0.25]);
    }

    #[test]
    fn gradients_accumulate_until_zeroed() {
        let mut t = Tape::new();
        let x = leaf1(&mut t, vec![3.0]);
        let y = t.mul(x, x).unwrap();
        t.backward(y).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[12.0]);
        t.zero_grad();
        assert!(t.grad(x).is_none());
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let x = leaf1(&mut t, vec![1.0, 2.0]);
        let y = t.scale(x, 2.0).unwrap();
        assert!(matches!(t.backward(y), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::zeros(vec![2, 3]), false).unwrap();
        let b = t.leaf(Tensor::zeros(vec![3, 3]), false).unwrap();
        match t.add(a, b) {
            Err(Error::ShapeMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![3, 3]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn non_finite_input_rejected() {
        let mut t = Tape::new();
        assert!(t.leaf(Tensor::new(vec![1], vec![f64::NAN]).unwrap(), false).is_err());
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut t = Tape::new();
        let x = leaf1(&mut t, vec![0.0, 0.0]);
        let y = t.softmax(x).unwrap();
        assert_eq!(t.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn layer_norm_of_constant_vector_is_zero_before_affine() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![1, 4], vec![3.7; 4]).unwrap(), false).unwrap();
        let gamma = t.constant(Tensor::new(vec![4], vec![1.0; 4]).unwrap()).unwrap();
        let beta = t.constant(Tensor::new(vec![4], vec![0.0; 4]).unwrap()).unwrap();
        let y = t.layer_norm(x, gamma, beta).unwrap();
        for &v in t.value(y).data() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_ln_vocab() {
        let mut t = Tape::new();
        let logits = t.leaf(Tensor::zeros(vec![1, 4]), false).unwrap();
        let ce = t.cross_entropy(logits, &[(0, 2)]).unwrap();
        assert!((t.value(ce).item() - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn causal_softmax_rows_sum_to_one_and_future_is_zero() {
        let mut t = Tape::new();
        let x = t
            .leaf(Tensor::from_fn(vec![3, 3], |i| (i as f64) * 0.37 - 1.0), true)
            .unwrap();
        let y = t.softmax_causal(x).unwrap();
        let d = t.value(y).data();
        assert_eq!(d[1], 0.0);
        assert_eq!(d[2], 0.0);
        assert_eq!(d[5], 0.0);
        for i in 0..3 {
            let s: f64 = d[i * 3..(i + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let mut t = Tape::new();
            let x = t
                .leaf(Tensor::from_fn(vec![4, 4], |i| ((i * 7 + 3) % 11) as f64 * 0.21 - 1.0), true)
                .unwrap();
            let w = t
                .leaf(Tensor::from_fn(vec![4, 4], |i| ((i * 5 + 1) % 13) as f64 * 0.13 - 0.7), true)
                .unwrap();
            let h = t.matmul(x, w).unwrap();
            let a = t.gelu(h).unwrap();
            let s = t.softmax(a).unwrap();
            let loss = t.sum(s).unwrap();
            t.backward(loss).unwrap();
            (t.grad(x).unwrap().to_vec(), t.grad(w).unwrap().to_vec())
        };
        let (gx1, gw1) = run();
        let (gx2, gw2) = run();
        for (a, b) in gx1.iter().zip(&gx2).chain(gw1.iter().zip(&gw2)) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
