//! Reverse-mode tape. A [`Graph`] records every operation applied to its
//! [`Var`] handles; `backward` replays the record in reverse and accumulates
//! adjoints into the leaves. Graphs are built per example, used once for a
//! forward/backward pair, then dropped.
//!
//! Only rank-1 and rank-2 tensors flow through the tape; matrices are
//! row-major throughout.

use super::scalar::{gemm, Scalar};
use super::tensor::Tensor;
use super::{NumericsError, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Handle to a node in a [`Graph`]. Only valid for the graph that minted it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Operation kinds that can be deliberately corrupted via
/// [`Graph::inject_adjoint_fault`]. Test-only plumbing for proving that the
/// finite-difference oracle actually catches a wrong adjoint.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FaultOp {
    Matmul,
    Gelu,
    SoftmaxRows,
    LayerNormRows,
    CrossEntropyMean,
}

/// A fault to apply during backward: the adjoint flowing out of every node
/// of kind `op` is multiplied by `scale`.
#[doc(hidden)]
#[derive(Clone, Copy, Debug)]
pub struct AdjointFault {
    pub op: FaultOp,
    pub scale: f64,
}

enum Op<S: Scalar> {
    Leaf,
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, S),
    AddBiasRow(usize, usize),
    /// `a [m,k] * b [k,n]`
    Matmul(usize, usize),
    /// `a [m,k] * b^T` with `b` stored `[n,k]`
    MatmulNT(usize, usize),
    Gelu(usize),
    SoftmaxRows(usize),
    LayerNormRows {
        x: usize,
        gain: usize,
        shift: usize,
        mean: Vec<S>,
        inv_std: Vec<S>,
    },
    CrossEntropyMean {
        logits: usize,
        targets: Vec<usize>,
        weights: Vec<S>,
        probs: Vec<S>,
        weight_sum: S,
    },
    GatherRows {
        table: usize,
        rows: Vec<usize>,
    },
    SliceRows {
        x: usize,
        start: usize,
    },
    SliceCols {
        x: usize,
        start: usize,
    },
    ConcatCols(Vec<usize>),
    Dropout {
        x: usize,
        mask: Vec<S>,
    },
    Sum(usize),
}

impl<S: Scalar> Op<S> {
    fn fault_kind(&self) -> Option<FaultOp> {
        match self {
            Op::Matmul(..) | Op::MatmulNT(..) => Some(FaultOp::Matmul),
            Op::Gelu(_) => Some(FaultOp::Gelu),
            Op::SoftmaxRows(_) => Some(FaultOp::SoftmaxRows),
            Op::LayerNormRows { .. } => Some(FaultOp::LayerNormRows),
            Op::CrossEntropyMean { .. } => Some(FaultOp::CrossEntropyMean),
            _ => None,
        }
    }
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
    grad: Option<Vec<S>>,
}

/// Recording computation tape.
pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
    fault: Option<AdjointFault>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            fault: None,
        }
    }

    /// Registers a tensor on the tape. The value buffer is shared, not
    /// copied; whether gradients flow to it follows the tensor's own flag.
    pub fn leaf(&mut self, t: &Tensor<S>) -> Var {
        let requires_grad = t.requires_grad();
        self.push(t.shallow_copy(), Op::Leaf, requires_grad)
    }

    /// Registers a value that never receives gradients (masks, constants).
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        let mut t = t;
        t.set_requires_grad(false);
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Adjoint accumulated on a leaf by `backward`, if any.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Scales the adjoint flowing out of every node of the given kind.
    /// Exists so tests can prove the finite-difference oracle rejects a
    /// corrupted backward rule; never set in production paths.
    #[doc(hidden)]
    pub fn inject_adjoint_fault(&mut self, fault: AdjointFault) {
        self.fault = Some(fault);
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn mat_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() == 2 {
            Ok((s[0], s[1]))
        } else {
            Err(NumericsError::BadRank {
                op,
                expected: "a rank-2 tensor",
                got: s.to_vec(),
            })
        }
    }

    // ---- elementwise and broadcast ops ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(NumericsError::ShapeMismatch {
                op: "add",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let data: Vec<S> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).expect("add: shape preserved");
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(t, Op::Add(a.0, b.0), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(NumericsError::ShapeMismatch {
                op: "mul",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let data: Vec<S> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).expect("mul: shape preserved");
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(t, Op::Mul(a.0, b.0), rg))
    }

    pub fn scale(&mut self, x: Var, k: S) -> Var {
        let data: Vec<S> = self.value(x).data().iter().map(|&v| v * k).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data).expect("scale: shape preserved");
        let rg = self.requires(x);
        self.push(t, Op::Scale(x.0, k), rg)
    }

    /// `x [m,n] + bias [n]`, bias broadcast over rows.
    pub fn add_bias_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.mat_dims(x, "add_bias_row")?;
        if self.shape(bias) != [n] {
            return Err(NumericsError::ShapeMismatch {
                op: "add_bias_row",
                left: vec![m, n],
                right: self.shape(bias).to_vec(),
            });
        }
        let xs = self.value(x).data();
        let bs = self.value(bias).data();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                data.push(xs[i * n + j] + bs[j]);
            }
        }
        let t = Tensor::matrix(m, n, data).expect("add_bias_row: sized above");
        let rg = self.requires(x) || self.requires(bias);
        Ok(self.push(t, Op::AddBiasRow(x.0, bias.0), rg))
    }

    // ---- matrix products ----

    /// `a [m,k] * b [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.mat_dims(a, "matmul")?;
        let (kb, n) = self.mat_dims(b, "matmul")?;
        if ka != kb {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul",
                left: vec![m, ka],
                right: vec![kb, n],
            });
        }
        let mut out = vec![S::zero(); m * n];
        gemm(
            false,
            false,
            m,
            ka,
            n,
            S::one(),
            self.value(a).data(),
            self.value(b).data(),
            S::zero(),
            &mut out,
        );
        let t = Tensor::matrix(m, n, out).expect("matmul: sized above");
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(t, Op::Matmul(a.0, b.0), rg))
    }

    /// `a [m,k] * b^T -> [m,n]` where `b` is stored `[n,k]`. Saves an
    /// explicit transpose in attention score computation.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.mat_dims(a, "matmul_nt")?;
        let (n, kb) = self.mat_dims(b, "matmul_nt")?;
        if ka != kb {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul_nt",
                left: vec![m, ka],
                right: vec![n, kb],
            });
        }
        let mut out = vec![S::zero(); m * n];
        gemm(
            false,
            true,
            m,
            ka,
            n,
            S::one(),
            self.value(a).data(),
            self.value(b).data(),
            S::zero(),
            &mut out,
        );
        let t = Tensor::matrix(m, n, out).expect("matmul_nt: sized above");
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(t, Op::MatmulNT(a.0, b.0), rg))
    }

    // ---- nonlinearities ----

    /// GELU in its tanh form: smooth everywhere, which keeps central
    /// differences honest during gradient checking.
    pub fn gelu(&mut self, x: Var) -> Var {
        let data: Vec<S> = self
            .value(x)
            .data()
            .iter()
            .map(|&v| gelu_scalar(v.as_f64()))
            .map(S::from_f64)
            .collect();
        let t = Tensor::new(self.shape(x).to_vec(), data).expect("gelu: shape preserved");
        let rg = self.requires(x);
        self.push(t, Op::Gelu(x.0), rg)
    }

    /// Row-wise softmax with max subtraction for stability.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.mat_dims(x, "softmax_rows")?;
        let xs = self.value(x).data();
        let mut data = vec![S::zero(); m * n];
        for i in 0..m {
            let row = &xs[i * n..(i + 1) * n];
            softmax_into(row, &mut data[i * n..(i + 1) * n]);
        }
        let t = Tensor::matrix(m, n, data).expect("softmax_rows: sized above");
        let rg = self.requires(x);
        Ok(self.push(t, Op::SoftmaxRows(x.0), rg))
    }

    /// Per-row layer normalisation with learned gain and shift:
    /// `y = gain * (x - mean) / sqrt(var + eps) + shift`, statistics taken
    /// over each row (biased variance).
    pub fn layer_norm_rows(&mut self, x: Var, gain: Var, shift: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.mat_dims(x, "layer_norm_rows")?;
        if self.shape(gain) != [n] || self.shape(shift) != [n] {
            return Err(NumericsError::ShapeMismatch {
                op: "layer_norm_rows",
                left: vec![m, n],
                right: self.shape(gain).to_vec(),
            });
        }
        let xs = self.value(x).data();
        let gs = self.value(gain).data();
        let ss = self.value(shift).data();
        let mut data = vec![S::zero(); m * n];
        let mut mean = vec![S::zero(); m];
        let mut inv_std = vec![S::zero(); m];
        let nf = n as f64;
        for i in 0..m {
            let row = &xs[i * n..(i + 1) * n];
            let mu: f64 = row.iter().map(|v| v.as_f64()).sum::<f64>() / nf;
            let var: f64 = row
                .iter()
                .map(|v| {
                    let d = v.as_f64() - mu;
                    d * d
                })
                .sum::<f64>()
                / nf;
            let inv = 1.0 / (var + eps).sqrt();
            mean[i] = S::from_f64(mu);
            inv_std[i] = S::from_f64(inv);
            for j in 0..n {
                let xhat = (row[j].as_f64() - mu) * inv;
                data[i * n + j] = S::from_f64(xhat) * gs[j] + ss[j];
            }
        }
        let t = Tensor::matrix(m, n, data).expect("layer_norm_rows: sized above");
        let rg = self.requires(x) || self.requires(gain) || self.requires(shift);
        Ok(self.push(
            t,
            Op::LayerNormRows {
                x: x.0,
                gain: gain.0,
                shift: shift.0,
                mean,
                inv_std,
            },
            rg,
        ))
    }

    // ---- losses and reductions ----

    /// Weighted mean token cross-entropy over rows of `logits [t,v]`:
    /// `sum_i w_i * -ln softmax(logits_i)[target_i] / sum_i w_i`.
    /// Rows with weight zero contribute neither loss nor gradient.
    pub fn cross_entropy_mean(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[S],
    ) -> Result<Var> {
        let (t_rows, v_cols) = self.mat_dims(logits, "cross_entropy_mean")?;
        if targets.len() != t_rows || weights.len() != t_rows {
            return Err(NumericsError::Contract {
                op: "cross_entropy_mean",
                msg: format!(
                    "{} logit rows, {} targets, {} weights",
                    t_rows,
                    targets.len(),
                    weights.len()
                ),
            });
        }
        let xs = self.value(logits).data();
        if xs.iter().any(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite {
                op: "cross_entropy_mean",
            });
        }
        let mut probs = vec![S::zero(); t_rows * v_cols];
        let mut loss = 0.0f64;
        let mut weight_sum = 0.0f64;
        for i in 0..t_rows {
            let tgt = targets[i];
            if tgt >= v_cols {
                return Err(NumericsError::IndexOutOfRange {
                    op: "cross_entropy_mean",
                    index: tgt,
                    bound: v_cols,
                });
            }
            let row = &xs[i * v_cols..(i + 1) * v_cols];
            softmax_into(row, &mut probs[i * v_cols..(i + 1) * v_cols]);
            let w = weights[i].as_f64();
            if w != 0.0 {
                let p = probs[i * v_cols + tgt].as_f64();
                loss -= w * p.max(f64::MIN_POSITIVE).ln();
                weight_sum += w;
            }
        }
        if weight_sum == 0.0 {
            return Err(NumericsError::Contract {
                op: "cross_entropy_mean",
                msg: "all row weights are zero".to_owned(),
            });
        }
        loss /= weight_sum;
        if !loss.is_finite() {
            return Err(NumericsError::NonFinite {
                op: "cross_entropy_mean",
            });
        }
        let t = Tensor::scalar(S::from_f64(loss));
        let rg = self.requires(logits);
        Ok(self.push(
            t,
            Op::CrossEntropyMean {
                logits: logits.0,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
                weight_sum: S::from_f64(weight_sum),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self
            .value(x)
            .data()
            .iter()
            .fold(S::zero(), |acc, &v| acc + v);
        let rg = self.requires(x);
        self.push(Tensor::scalar(total), Op::Sum(x.0), rg)
    }

    // ---- indexing and reshaping ----

    /// Gathers rows of `table [r,c]` by index; duplicate indices are fine
    /// and their adjoints accumulate. This is the embedding lookup.
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.mat_dims(table, "gather_rows")?;
        let ts = self.value(table).data();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &idx in rows {
            if idx >= r {
                return Err(NumericsError::IndexOutOfRange {
                    op: "gather_rows",
                    index: idx,
                    bound: r,
                });
            }
            data.extend_from_slice(&ts[idx * c..(idx + 1) * c]);
        }
        let t = Tensor::matrix(rows.len(), c, data).expect("gather_rows: sized above");
        let rg = self.requires(table);
        Ok(self.push(
            t,
            Op::GatherRows {
                table: table.0,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Contiguous row slice `x[start..start+len, :]`.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.mat_dims(x, "slice_rows")?;
        if start + len > m {
            return Err(NumericsError::IndexOutOfRange {
                op: "slice_rows",
                index: start + len,
                bound: m,
            });
        }
        let xs = self.value(x).data();
        let data = xs[start * n..(start + len) * n].to_vec();
        let t = Tensor::matrix(len, n, data).expect("slice_rows: sized above");
        let rg = self.requires(x);
        Ok(self.push(t, Op::SliceRows { x: x.0, start }, rg))
    }

    /// Contiguous column slice `x[:, start..start+len]`.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.mat_dims(x, "slice_cols")?;
        if start + len > n {
            return Err(NumericsError::IndexOutOfRange {
                op: "slice_cols",
                index: start + len,
                bound: n,
            });
        }
        let xs = self.value(x).data();
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&xs[i * n + start..i * n + start + len]);
        }
        let t = Tensor::matrix(m, len, data).expect("slice_cols: sized above");
        let rg = self.requires(x);
        Ok(self.push(t, Op::SliceCols { x: x.0, start }, rg))
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(NumericsError::Contract {
                op: "concat_cols",
                msg: "no inputs".to_owned(),
            });
        }
        let (m, _) = self.mat_dims(parts[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (mp, np) = self.mat_dims(p, "concat_cols")?;
            if mp != m {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat_cols",
                    left: self.shape(parts[0]).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
            widths.push(np);
        }
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                let ps = self.value(p).data();
                data.extend_from_slice(&ps[i * w..(i + 1) * w]);
            }
        }
        let t = Tensor::matrix(m, n, data).expect("concat_cols: sized above");
        let rg = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(t, Op::ConcatCols(parts.iter().map(|p| p.0).collect()), rg))
    }

    // ---- stochastic ----

    /// Inverted dropout: kept entries are scaled by `1/(1-p)` so the
    /// expectation is unchanged; `p == 0` is the identity.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut ChaCha8Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(NumericsError::Contract {
                op: "dropout",
                msg: format!("rate {p} outside [0, 1)"),
            });
        }
        if p == 0.0 {
            return Ok(x);
        }
        let keep = S::from_f64(1.0 / (1.0 - p));
        let mask: Vec<S> = (0..self.value(x).numel())
            .map(|_| {
                if rng.gen::<f64>() < p {
                    S::zero()
                } else {
                    keep
                }
            })
            .collect();
        let data: Vec<S> = self
            .value(x)
            .data()
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        let t = Tensor::new(self.shape(x).to_vec(), data).expect("dropout: shape preserved");
        let rg = self.requires(x);
        Ok(self.push(t, Op::Dropout { x: x.0, mask }, rg))
    }

    // ---- reverse pass ----

    /// Replays the tape in reverse from `loss`, accumulating adjoints into
    /// every gradient-enabled leaf. Each call adds a full gradient on top of
    /// whatever is already stored, so two calls double the leaves' grads.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.numel() != 1 {
            return Err(NumericsError::NonScalarLoss {
                shape: loss_node.value.shape().to_vec(),
            });
        }
        if !loss_node.value.item().is_finite() {
            return Err(NumericsError::NonFinite { op: "backward" });
        }
        if !loss_node.requires_grad {
            return Err(NumericsError::Contract {
                op: "backward",
                msg: "loss does not depend on any gradient-enabled leaf".to_owned(),
            });
        }

        // Fresh adjoint buffers per call: persisted node grads only collect
        // finished gradients, they never feed back into propagation.
        let mut adj: Vec<Option<Vec<S>>> = Vec::new();
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(vec![S::one()]);

        for id in (0..=loss.0).rev() {
            let Some(mut g) = adj[id].take() else {
                continue;
            };
            if !self.nodes[id].requires_grad {
                continue;
            }
            if let (Some(fault), Some(kind)) = (self.fault, self.nodes[id].op.fault_kind()) {
                if fault.op == kind {
                    let k = S::from_f64(fault.scale);
                    for v in &mut g {
                        *v = *v * k;
                    }
                }
            }
            self.propagate(id, &g, &mut adj);
            if matches!(self.nodes[id].op, Op::Leaf) {
                accum(&mut self.nodes[id].grad, &g);
            }
        }
        Ok(())
    }

    /// Sends the node's adjoint `g` into its inputs' buffers.
    fn propagate(&self, id: usize, g: &[S], adj: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[id];
        let want = |adj_id: usize| self.nodes[adj_id].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if want(*a) {
                    accum(&mut adj[*a], g);
                }
                if want(*b) {
                    accum(&mut adj[*b], g);
                }
            }
            Op::Mul(a, b) => {
                if want(*a) {
                    let bs = self.nodes[*b].value.data();
                    accum_prod(&mut adj[*a], g, bs);
                }
                if want(*b) {
                    let as_ = self.nodes[*a].value.data();
                    accum_prod(&mut adj[*b], g, as_);
                }
            }
            Op::Scale(x, k) => {
                if want(*x) {
                    let scaled: Vec<S> = g.iter().map(|&v| v * *k).collect();
                    accum(&mut adj[*x], &scaled);
                }
            }
            Op::AddBiasRow(x, bias) => {
                let n = self.nodes[*bias].value.numel();
                let m = g.len() / n;
                if want(*x) {
                    accum(&mut adj[*x], g);
                }
                if want(*bias) {
                    let mut db = vec![S::zero(); n];
                    for i in 0..m {
                        for j in 0..n {
                            db[j] = db[j] + g[i * n + j];
                        }
                    }
                    accum(&mut adj[*bias], &db);
                }
            }
            Op::Matmul(a, b) => {
                let (m, k) = mat2(&self.nodes[*a].value);
                let n = self.nodes[*b].value.shape()[1];
                if want(*a) {
                    // dA += dC * B^T  ([m,n] x [n,k])
                    let buf = slot(&mut adj[*a], m * k);
                    gemm(
                        false,
                        true,
                        m,
                        n,
                        k,
                        S::one(),
                        g,
                        self.nodes[*b].value.data(),
                        S::one(),
                        buf,
                    );
                }
                if want(*b) {
                    // dB += A^T * dC  ([k,m] x [m,n])
                    let buf = slot(&mut adj[*b], k * n);
                    gemm(
                        true,
                        false,
                        k,
                        m,
                        n,
                        S::one(),
                        self.nodes[*a].value.data(),
                        g,
                        S::one(),
                        buf,
                    );
                }
            }
            Op::MatmulNT(a, b) => {
                let (m, k) = mat2(&self.nodes[*a].value);
                let n = self.nodes[*b].value.shape()[0];
                if want(*a) {
                    // dA += dC * B  ([m,n] x [n,k])
                    let buf = slot(&mut adj[*a], m * k);
                    gemm(
                        false,
                        false,
                        m,
                        n,
                        k,
                        S::one(),
                        g,
                        self.nodes[*b].value.data(),
                        S::one(),
                        buf,
                    );
                }
                if want(*b) {
                    // dB += dC^T * A  ([n,m] x [m,k])
                    let buf = slot(&mut adj[*b], n * k);
                    gemm(
                        true,
                        false,
                        n,
                        m,
                        k,
                        S::one(),
                        g,
                        self.nodes[*a].value.data(),
                        S::one(),
                        buf,
                    );
                }
            }
            Op::Gelu(x) => {
                if want(*x) {
                    let xs = self.nodes[*x].value.data();
                    let dx: Vec<S> = xs
                        .iter()
                        .zip(g)
                        .map(|(&v, &gi)| S::from_f64(gelu_grad_scalar(v.as_f64())) * gi)
                        .collect();
                    accum(&mut adj[*x], &dx);
                }
            }
            Op::SoftmaxRows(x) => {
                if want(*x) {
                    let y = node.value.data();
                    let n = node.value.shape()[1];
                    let m = node.value.shape()[0];
                    let mut dx = vec![S::zero(); m * n];
                    for i in 0..m {
                        let yr = &y[i * n..(i + 1) * n];
                        let gr = &g[i * n..(i + 1) * n];
                        let dot: f64 = yr
                            .iter()
                            .zip(gr)
                            .map(|(&yv, &gv)| yv.as_f64() * gv.as_f64())
                            .sum();
                        for j in 0..n {
                            dx[i * n + j] =
                                S::from_f64(yr[j].as_f64() * (gr[j].as_f64() - dot));
                        }
                    }
                    accum(&mut adj[*x], &dx);
                }
            }
            Op::LayerNormRows {
                x,
                gain,
                shift,
                mean,
                inv_std,
            } => {
                let xs = self.nodes[*x].value.data();
                let gs = self.nodes[*gain].value.data();
                let (m, n) = mat2(&self.nodes[*x].value);
                let nf = n as f64;
                let mut dx = if want(*x) {
                    vec![S::zero(); m * n]
                } else {
                    Vec::new()
                };
                let mut dgain = if want(*gain) {
                    vec![S::zero(); n]
                } else {
                    Vec::new()
                };
                let mut dshift = if want(*shift) {
                    vec![S::zero(); n]
                } else {
                    Vec::new()
                };
                for i in 0..m {
                    let mu = mean[i].as_f64();
                    let inv = inv_std[i].as_f64();
                    let gr = &g[i * n..(i + 1) * n];
                    if want(*gain) || want(*shift) {
                        for j in 0..n {
                            let xhat = (xs[i * n + j].as_f64() - mu) * inv;
                            if want(*gain) {
                                dgain[j] = dgain[j] + S::from_f64(gr[j].as_f64() * xhat);
                            }
                            if want(*shift) {
                                dshift[j] = dshift[j] + gr[j];
                            }
                        }
                    }
                    if want(*x) {
                        let mut m1 = 0.0f64;
                        let mut m2 = 0.0f64;
                        for j in 0..n {
                            let xhat = (xs[i * n + j].as_f64() - mu) * inv;
                            let dxhat = gr[j].as_f64() * gs[j].as_f64();
                            m1 += dxhat;
                            m2 += dxhat * xhat;
                        }
                        m1 /= nf;
                        m2 /= nf;
                        for j in 0..n {
                            let xhat = (xs[i * n + j].as_f64() - mu) * inv;
                            let dxhat = gr[j].as_f64() * gs[j].as_f64();
                            dx[i * n + j] = S::from_f64(inv * (dxhat - m1 - xhat * m2));
                        }
                    }
                }
                if want(*x) {
                    accum(&mut adj[*x], &dx);
                }
                if want(*gain) {
                    accum(&mut adj[*gain], &dgain);
                }
                if want(*shift) {
                    accum(&mut adj[*shift], &dshift);
                }
            }
            Op::CrossEntropyMean {
                logits,
                targets,
                weights,
                probs,
                weight_sum,
            } => {
                if want(*logits) {
                    let v_cols = self.nodes[*logits].value.shape()[1];
                    let g0 = g[0].as_f64();
                    let wsum = weight_sum.as_f64();
                    let mut dl = vec![S::zero(); probs.len()];
                    for (i, (&tgt, w)) in targets.iter().zip(weights).enumerate() {
                        let w = w.as_f64();
                        if w == 0.0 {
                            continue;
                        }
                        let coeff = g0 * w / wsum;
                        for j in 0..v_cols {
                            let p = probs[i * v_cols + j].as_f64();
                            let onehot = if j == tgt { 1.0 } else { 0.0 };
                            dl[i * v_cols + j] = S::from_f64(coeff * (p - onehot));
                        }
                    }
                    accum(&mut adj[*logits], &dl);
                }
            }
            Op::GatherRows { table, rows } => {
                if want(*table) {
                    let (r, c) = mat2(&self.nodes[*table].value);
                    let buf = slot(&mut adj[*table], r * c);
                    for (t, &idx) in rows.iter().enumerate() {
                        for j in 0..c {
                            buf[idx * c + j] = buf[idx * c + j] + g[t * c + j];
                        }
                    }
                }
            }
            Op::SliceRows { x, start } => {
                if want(*x) {
                    let (m, n) = mat2(&self.nodes[*x].value);
                    let buf = slot(&mut adj[*x], m * n);
                    for (off, &gv) in g.iter().enumerate() {
                        buf[start * n + off] = buf[start * n + off] + gv;
                    }
                }
            }
            Op::SliceCols { x, start } => {
                if want(*x) {
                    let (m, n) = mat2(&self.nodes[*x].value);
                    let len = node.value.shape()[1];
                    let buf = slot(&mut adj[*x], m * n);
                    for i in 0..m {
                        for j in 0..len {
                            buf[i * n + start + j] = buf[i * n + start + j] + g[i * len + j];
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let m = node.value.shape()[0];
                let n = node.value.shape()[1];
                let mut col = 0;
                for &p in parts {
                    let w = self.nodes[p].value.shape()[1];
                    if want(p) {
                        let buf = slot(&mut adj[p], m * w);
                        for i in 0..m {
                            for j in 0..w {
                                buf[i * w + j] = buf[i * w + j] + g[i * n + col + j];
                            }
                        }
                    }
                    col += w;
                }
            }
            Op::Dropout { x, mask } => {
                if want(*x) {
                    accum_prod(&mut adj[*x], g, mask);
                }
            }
            Op::Sum(x) => {
                if want(*x) {
                    let n = self.nodes[*x].value.numel();
                    let buf = slot(&mut adj[*x], n);
                    for v in buf.iter_mut() {
                        *v = *v + g[0];
                    }
                }
            }
        }
    }
}

fn mat2<S: Scalar>(t: &Tensor<S>) -> (usize, usize) {
    let s = t.shape();
    debug_assert_eq!(s.len(), 2, "rank-2 tensor expected on the tape");
    (s[0], s[1])
}

fn accum<S: Scalar>(dst: &mut Option<Vec<S>>, src: &[S]) {
    match dst {
        Some(v) => {
            debug_assert_eq!(v.len(), src.len());
            for (a, &b) in v.iter_mut().zip(src) {
                *a = *a + b;
            }
        }
        None => *dst = Some(src.to_vec()),
    }
}

/// `dst += g (elementwise*) other`.
fn accum_prod<S: Scalar>(dst: &mut Option<Vec<S>>, g: &[S], other: &[S]) {
    let v = slot(dst, g.len());
    for ((a, &gi), &oi) in v.iter_mut().zip(g).zip(other) {
        *a = *a + gi * oi;
    }
}

fn slot<S: Scalar>(dst: &mut Option<Vec<S>>, len: usize) -> &mut Vec<S> {
    dst.get_or_insert_with(|| vec![S::zero(); len])
}

fn softmax_into<S: Scalar>(row: &[S], out: &mut [S]) {
    let max = row
        .iter()
        .map(|v| v.as_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0f64;
    let mut exps = vec![0.0f64; row.len()];
    for (j, v) in row.iter().enumerate() {
        let e = (v.as_f64() - max).exp();
        exps[j] = e;
        total += e;
    }
    for (o, e) in out.iter_mut().zip(exps) {
        *o = S::from_f64(e / total);
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

fn gelu_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_K * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_K * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_K * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn param(rows: usize, cols: usize, data: Vec<f64>) -> Tensor<f64> {
        Tensor::matrix(rows, cols, data).unwrap().with_grad()
    }

    #[test]
    fn matmul_small_product() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let b = g.constant(Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap());
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_identity_preserves_input() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let eye = g.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let c = g.matmul(a, eye).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::matrix(1, 3, vec![1.0; 3]).unwrap());
        let b = g.constant(Tensor::matrix(2, 1, vec![1.0; 2]).unwrap());
        assert!(matches!(
            g.matmul(a, b),
            Err(NumericsError::ShapeMismatch { op: "matmul", .. })
        ));
    }

    #[test]
    fn matmul_nt_matches_explicit_transpose() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        // b stored [2,3]; logical b^T is [3,2]
        let b = g.constant(Tensor::matrix(2, 3, vec![1.0, 0.0, 2.0, 0.0, 1.0, 1.0]).unwrap());
        let c = g.matmul_nt(a, b).unwrap();
        // row0: [1,2,3].[1,0,2] = 7, [1,2,3].[0,1,1] = 5
        // row1: [4,5,6].[1,0,2] = 16, [4,5,6].[0,1,1] = 11
        assert_eq!(g.value(c).data(), &[7.0, 5.0, 16.0, 11.0]);
    }

    #[test]
    fn matmul_adjoints_match_hand_rule() {
        // C = A*B, loss = sum(C): dA = 1 * B^T row sums, dB = A^T * 1.
        let ta = param(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let tb = param(2, 2, vec![5.0, 6.0, 7.0, 8.0]);
        let mut g = Graph::<f64>::new();
        let a = g.leaf(&ta);
        let b = g.leaf(&tb);
        let c = g.matmul(a, b).unwrap();
        let loss = g.sum(c);
        g.backward(loss).unwrap();
        // dC = ones; dA = dC*B^T = [[11,15],[11,15]]; dB = A^T*dC = [[4,4],[6,6]]
        assert_eq!(g.grad(a).unwrap(), &[11.0, 15.0, 11.0, 15.0]);
        assert_eq!(g.grad(b).unwrap(), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn softmax_uniform_rows() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::matrix(1, 4, vec![0.0; 4]).unwrap());
        let y = g.softmax_rows(x).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_known_ratio() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::matrix(1, 2, vec![0.0, 3.0f64.ln()]).unwrap());
        let y = g.softmax_rows(x).unwrap();
        let d = g.value(y).data();
        assert!((d[0] - 0.25).abs() < 1e-12);
        assert!((d[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_shift_invariance() {
        let row = vec![0.3, -1.2, 4.0, 0.0];
        let shifted: Vec<f64> = row.iter().map(|v| v + 123.5).collect();
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::matrix(1, 4, row).unwrap());
        let b = g.constant(Tensor::matrix(1, 4, shifted).unwrap());
        let ya = g.softmax_rows(a).unwrap();
        let yb = g.softmax_rows(b).unwrap();
        for (u, v) in g.value(ya).data().iter().zip(g.value(yb).data()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_known_value_and_grad() {
        let tl = param(1, 2, vec![0.0, 0.0]);
        let mut g = Graph::<f64>::new();
        let logits = g.leaf(&tl);
        let loss = g.cross_entropy_mean(logits, &[0], &[1.0]).unwrap();
        assert!((g.value(loss).item() - 2.0f64.ln()).abs() < 1e-12);
        g.backward(loss).unwrap();
        let d = g.grad(logits).unwrap();
        assert!((d[0] + 0.5).abs() < 1e-12);
        assert!((d[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_zero_weight_rows_are_inert() {
        let tl = param(2, 2, vec![0.0, 0.0, 5.0, -5.0]);
        let mut g = Graph::<f64>::new();
        let logits = g.leaf(&tl);
        // Row 1 weight zero: loss must equal the single-row case and its
        // gradient block must stay zero.
        let loss = g.cross_entropy_mean(logits, &[0, 1], &[1.0, 0.0]).unwrap();
        assert!((g.value(loss).item() - 2.0f64.ln()).abs() < 1e-12);
        g.backward(loss).unwrap();
        let d = g.grad(logits).unwrap();
        assert_eq!(&d[2..], &[0.0, 0.0]);
    }

    #[test]
    fn cross_entropy_rejects_all_zero_weights() {
        let mut g = Graph::<f64>::new();
        let logits = g.constant(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        assert!(g.cross_entropy_mean(logits, &[0], &[0.0]).is_err());
    }

    #[test]
    fn layer_norm_hand_example() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::matrix(1, 2, vec![2.0, 4.0]).unwrap());
        let gain = g.constant(Tensor::vector(vec![2.0, 2.0]));
        let shift = g.constant(Tensor::vector(vec![1.0, 1.0]));
        let y = g.layer_norm_rows(x, gain, shift, 1e-5).unwrap();
        let d = g.value(y).data();
        assert!((d[0] + 1.0).abs() < 1e-4, "got {}", d[0]);
        assert!((d[1] - 3.0).abs() < 1e-4, "got {}", d[1]);
    }

    #[test]
    fn gelu_known_points() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::matrix(1, 3, vec![0.0, 1.0, -10.0]).unwrap());
        let y = g.gelu(x);
        let d = g.value(y).data();
        assert_eq!(d[0], 0.0);
        assert!((d[1] - 0.841192).abs() < 1e-4);
        assert!(d[2].abs() < 1e-6);
    }

    #[test]
    fn repeated_operand_accumulates_grad() {
        let tx = Tensor::scalar(3.0f64).with_grad();
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&tx);
        let y = g.mul(x, x).unwrap();
        let loss = g.sum(y);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_twice_doubles_grads() {
        let tx = Tensor::scalar(3.0f64).with_grad();
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&tx);
        let y = g.mul(x, x).unwrap();
        let loss = g.sum(y);
        g.backward(loss).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[12.0]);
    }

    #[test]
    fn frozen_leaf_receives_no_grad() {
        let tw = param(1, 1, vec![2.0]);
        let frozen = Tensor::matrix(1, 1, vec![5.0]).unwrap(); // requires_grad = false
        let mut g = Graph::<f64>::new();
        let w = g.leaf(&tw);
        let f = g.leaf(&frozen);
        let y = g.mul(w, f).unwrap();
        let loss = g.sum(y);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[5.0]);
        assert!(g.grad(f).is_none());
    }

    #[test]
    fn backward_rejects_frozen_only_loss() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::scalar(1.0));
        let loss = g.sum(x);
        assert!(matches!(
            g.backward(loss),
            Err(NumericsError::Contract { op: "backward", .. })
        ));
    }

    #[test]
    fn backward_rejects_non_finite_loss() {
        let tx = Tensor::scalar(f64::NAN).with_grad();
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&tx);
        let loss = g.sum(x);
        assert!(matches!(
            g.backward(loss),
            Err(NumericsError::NonFinite { op: "backward" })
        ));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let tx = param(1, 2, vec![1.0, 2.0]);
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&tx);
        assert!(matches!(
            g.backward(x),
            Err(NumericsError::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn gather_rows_scatter_adds_duplicates() {
        let table = param(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let mut g = Graph::<f64>::new();
        let t = g.leaf(&table);
        let picked = g.gather_rows(t, &[0, 0, 1]).unwrap();
        assert_eq!(g.value(picked).data(), &[1.0, 2.0, 1.0, 2.0, 3.0, 4.0]);
        let loss = g.sum(picked);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(t).unwrap(), &[2.0, 2.0, 1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn slice_concat_round_trip_and_grads() {
        let tx = param(2, 4, (1..=8).map(|v| v as f64).collect());
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&tx);
        let left = g.slice_cols(x, 0, 1).unwrap();
        let right = g.slice_cols(x, 1, 3).unwrap();
        let back = g.concat_cols(&[left, right]).unwrap();
        assert_eq!(g.value(back).data(), g.value(x).data());
        let loss = g.sum(back);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 8]);
    }

    #[test]
    fn slice_rows_grads_land_in_place() {
        let tx = param(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&tx);
        let mid = g.slice_rows(x, 1, 1).unwrap();
        assert_eq!(g.value(mid).data(), &[3.0, 4.0]);
        let loss = g.sum(mid);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn add_bias_row_grad_is_column_sum() {
        let tx = param(2, 3, vec![0.0; 6]);
        let tb = Tensor::vector(vec![1.0f64, 2.0, 3.0]).with_grad();
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&tx);
        let b = g.leaf(&tb);
        let y = g.add_bias_row(x, b).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        let loss = g.sum(y);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(b).unwrap(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn dropout_zero_rate_is_identity() {
        let tx = param(1, 4, vec![1.0, 2.0, 3.0, 4.0]);
        let mut rng = crate::rng::rng_from_seed(7);
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&tx);
        let y = g.dropout(x, 0.0, &mut rng).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn dropout_scales_kept_entries() {
        let tx = param(1, 64, vec![1.0; 64]);
        let mut rng = crate::rng::rng_from_seed(7);
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&tx);
        let y = g.dropout(x, 0.5, &mut rng).unwrap();
        let mut zeros = 0;
        for &v in g.value(y).data() {
            assert!(v == 0.0 || (v - 2.0).abs() < 1e-12);
            if v == 0.0 {
                zeros += 1;
            }
        }
        assert!(zeros > 10 && zeros < 54, "mask looks degenerate: {zeros}");
        let loss = g.sum(y);
        g.backward(loss).unwrap();
        let d = g.grad(x).unwrap();
        for (gv, yv) in d.iter().zip(g.value(y).data()) {
            assert_eq!(gv, yv); // grads equal the mask since inputs are ones
        }
    }

    #[test]
    fn dropout_rejects_bad_rate() {
        let mut rng = crate::rng::rng_from_seed(7);
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::vector(vec![1.0f64]));
        assert!(g.dropout(x, 1.0, &mut rng).is_err());
        assert!(g.dropout(x, -0.1, &mut rng).is_err());
    }

    #[test]
    fn injected_fault_perturbs_adjoint() {
        let run = |faulted: bool| {
            let ta = param(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
            let tb = param(2, 2, vec![5.0, 6.0, 7.0, 8.0]);
            let mut g = Graph::<f64>::new();
            if faulted {
                g.inject_adjoint_fault(AdjointFault {
                    op: FaultOp::Matmul,
                    scale: 1.01,
                });
            }
            let a = g.leaf(&ta);
            let b = g.leaf(&tb);
            let c = g.matmul(a, b).unwrap();
            let loss = g.sum(c);
            g.backward(loss).unwrap();
            g.grad(a).unwrap().to_vec()
        };
        let clean = run(false);
        let bad = run(true);
        for (c, b) in clean.iter().zip(&bad) {
            assert!((b / c - 1.01).abs() < 1e-12);
        }
    }
}
