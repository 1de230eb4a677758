//! Gradient tape: records primitive applications, replays them in reverse.

use super::{AutodiffError, Result, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Multiply(Var, Var),
    Concat { inputs: Vec<Var>, axis: usize },
    LeakyRelu { x: Var, slope: f64 },
    Elu(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    SegmentSoftmax { x: Var, segments: Vec<usize> },
    SegmentSum { x: Var, segments: Vec<usize> },
    LayerNorm { x: Var, scale: Var, offset: Var, eps: f64 },
    BatchNormTrain { x: Var, gamma: Var, beta: Var, eps: f64, mean: Vec<f64>, var: Vec<f64> },
    BatchNormEval { x: Var, gamma: Var, beta: Var, eps: f64, mean: Vec<f64>, var: Vec<f64> },
    LogSoftmax(Var),
    NllLoss { log_probs: Var, targets: Vec<usize> },
    GatherRows { x: Var, ids: Vec<usize> },
    ScatterAddRows { x: Var, ids: Vec<usize> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct GradMap {
    grads: Vec<Option<Tensor>>,
}

impl GradMap {
    /// Gradient of the loss with respect to `v`, if `v` was tracked.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.id()).and_then(|g| g.as_ref())
    }
}

/// Records forward primitives in topological order.
///
/// One tape serves one forward/backward pass; build a fresh tape per pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shapes(ts: &[(usize, usize)]) -> String {
    ts.iter().map(|(r, c)| format!("[{r}x{c}]")).collect::<Vec<_>>().join(", ")
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Forward value of a recorded node.
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.id()].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.id()].requires_grad
    }

    /// Register an input tensor. Tracked leaves receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Untracked input (data, masks, fixed coefficients).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ar, ac) = self.value(a).shape();
        let (br, bc) = self.value(b).shape();
        if ac != br {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                shapes: shapes(&[(ar, ac), (br, bc)]),
            });
        }
        let value = self.value(a).matmul(self.value(b));
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(value, Op::MatMul(a, b), req))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let value = self.value(x).transpose();
        let req = self.requires(x);
        self.push(value, Op::Transpose(x), req)
    }

    /// Elementwise sum; also broadcasts a `[1, m]` bias over the rows of an
    /// `[n, m]` left operand.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ar, ac) = self.value(a).shape();
        let (br, bc) = self.value(b).shape();
        let value = if (ar, ac) == (br, bc) {
            let data = self
                .value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(&x, &y)| x + y)
                .collect();
            Tensor::new(ar, ac, data)
        } else if br == 1 && bc == ac {
            let bias = self.value(b).data();
            let mut data = Vec::with_capacity(ar * ac);
            for row in self.value(a).data().chunks_exact(ac) {
                data.extend(row.iter().zip(bias).map(|(&x, &y)| x + y));
            }
            Tensor::new(ar, ac, data)
        } else {
            return Err(AutodiffError::ShapeMismatch {
                op: "add",
                shapes: shapes(&[(ar, ac), (br, bc)]),
            });
        };
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(value, Op::Add(a, b), req))
    }

    /// Elementwise product; also broadcasts an `[n, 1]` column over the
    /// columns of an `[n, m]` left operand.
    pub fn multiply(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ar, ac) = self.value(a).shape();
        let (br, bc) = self.value(b).shape();
        let value = if (ar, ac) == (br, bc) {
            let data = self
                .value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(&x, &y)| x * y)
                .collect();
            Tensor::new(ar, ac, data)
        } else if br == ar && bc == 1 {
            let scale = self.value(b).data();
            let mut data = Vec::with_capacity(ar * ac);
            for (row, &s) in self.value(a).data().chunks_exact(ac).zip(scale) {
                data.extend(row.iter().map(|&x| x * s));
            }
            Tensor::new(ar, ac, data)
        } else {
            return Err(AutodiffError::ShapeMismatch {
                op: "multiply",
                shapes: shapes(&[(ar, ac), (br, bc)]),
            });
        };
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(value, Op::Multiply(a, b), req))
    }

    /// Concatenate along `axis` (0 = stack rows, 1 = widen columns).
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        assert!(!inputs.is_empty(), "concat of zero tensors");
        assert!(axis < 2, "concat axis must be 0 or 1");
        let first = self.value(inputs[0]).shape();
        let mut rows = first.0;
        let mut cols = first.1;
        for &v in &inputs[1..] {
            let (r, c) = self.value(v).shape();
            let compatible = if axis == 0 { c == cols } else { r == rows };
            if !compatible {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat",
                    shapes: shapes(&[(rows, cols), (r, c)]),
                });
            }
            if axis == 0 {
                rows += r;
            } else {
                cols += c;
            }
        }
        if axis == 0 {
            rows = inputs.iter().map(|&v| self.value(v).rows()).sum();
        }
        let mut out = Tensor::zeros(rows, cols);
        if axis == 0 {
            let mut offset = 0;
            for &v in inputs {
                let t = self.value(v);
                out.data_mut()[offset..offset + t.len()].copy_from_slice(t.data());
                offset += t.len();
            }
        } else {
            let mut col_off = 0;
            for &v in inputs {
                let t = self.value(v);
                let c = t.cols();
                for r in 0..rows {
                    let src = t.row_slice(r);
                    out.row_mut(r)[col_off..col_off + c].copy_from_slice(src);
                }
                col_off += c;
            }
        }
        let req = inputs.iter().any(|&v| self.requires(v));
        Ok(self.push(out, Op::Concat { inputs: inputs.to_vec(), axis }, req))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let value = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        let req = self.requires(x);
        self.push(value, Op::LeakyRelu { x, slope }, req)
    }

    pub fn elu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > 0.0 { v } else { v.exp() - 1.0 });
        let req = self.requires(x);
        self.push(value, Op::Elu(x), req)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        let req = self.requires(x);
        self.push(value, Op::Relu(x), req)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::exp);
        let req = self.requires(x);
        self.push(value, Op::Exp(x), req)
    }

    pub fn log(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::ln);
        let req = self.requires(x);
        self.push(value, Op::Log(x), req)
    }

    /// Softmax within each segment, per column. `segments[i]` assigns row `i`
    /// of `x` to a segment; every segment in `0..n_segments` must be hit.
    pub fn segment_softmax(&mut self, x: Var, segments: &[usize], n_segments: usize) -> Result<Var> {
        let t = self.value(x);
        let (rows, cols) = t.shape();
        if segments.len() != rows {
            return Err(AutodiffError::ShapeMismatch {
                op: "segment_softmax",
                shapes: format!("[{rows}x{cols}] with {} segment ids", segments.len()),
            });
        }
        let mut seen = vec![false; n_segments];
        for &s in segments {
            assert!(s < n_segments, "segment id {s} out of range {n_segments}");
            seen[s] = true;
        }
        if let Some(missing) = seen.iter().position(|&h| !h) {
            return Err(AutodiffError::InvalidSegment(missing));
        }

        // Max-shift per segment per column for stability.
        let mut max = vec![f64::NEG_INFINITY; n_segments * cols];
        for (r, &s) in segments.iter().enumerate() {
            for c in 0..cols {
                let m = &mut max[s * cols + c];
                *m = m.max(t.get(r, c));
            }
        }
        let mut out = Tensor::zeros(rows, cols);
        let mut denom = vec![0.0; n_segments * cols];
        for (r, &s) in segments.iter().enumerate() {
            for c in 0..cols {
                let e = (t.get(r, c) - max[s * cols + c]).exp();
                out.set(r, c, e);
                denom[s * cols + c] += e;
            }
        }
        for (r, &s) in segments.iter().enumerate() {
            for c in 0..cols {
                let v = out.get(r, c) / denom[s * cols + c];
                out.set(r, c, v);
            }
        }
        let req = self.requires(x);
        Ok(self.push(out, Op::SegmentSoftmax { x, segments: segments.to_vec() }, req))
    }

    /// Sum rows of `x` into `n_segments` output rows by segment id.
    pub fn segment_sum(&mut self, x: Var, segments: &[usize], n_segments: usize) -> Result<Var> {
        let t = self.value(x);
        let (rows, cols) = t.shape();
        if segments.len() != rows {
            return Err(AutodiffError::ShapeMismatch {
                op: "segment_sum",
                shapes: format!("[{rows}x{cols}] with {} segment ids", segments.len()),
            });
        }
        let mut out = Tensor::zeros(n_segments, cols);
        for (r, &s) in segments.iter().enumerate() {
            assert!(s < n_segments, "segment id {s} out of range {n_segments}");
            let src = t.row_slice(r);
            for (o, &v) in out.row_mut(s).iter_mut().zip(src) {
                *o += v;
            }
        }
        let req = self.requires(x);
        Ok(self.push(out, Op::SegmentSum { x, segments: segments.to_vec() }, req))
    }

    /// Per-row normalization over columns with learned scale and offset
    /// (both `[1, m]`).
    pub fn layer_norm(&mut self, x: Var, scale: Var, offset: Var, eps: f64) -> Result<Var> {
        let (rows, cols) = self.value(x).shape();
        let sc = self.value(scale).shape();
        let of = self.value(offset).shape();
        if sc != (1, cols) || of != (1, cols) {
            return Err(AutodiffError::ShapeMismatch {
                op: "layer_norm",
                shapes: shapes(&[(rows, cols), sc, of]),
            });
        }
        let mut out = Tensor::zeros(rows, cols);
        let scale_row = self.value(scale).data().to_vec();
        let offset_row = self.value(offset).data().to_vec();
        for r in 0..rows {
            let row = self.value(x).row_slice(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (c, o) in out.row_mut(r).iter_mut().enumerate() {
                let xhat = (row[c] - mean) * inv;
                *o = scale_row[c] * xhat + offset_row[c];
            }
        }
        let req = self.requires(x) || self.requires(scale) || self.requires(offset);
        Ok(self.push(out, Op::LayerNorm { x, scale, offset, eps }, req))
    }

    /// Batch normalization over rows using batch statistics. Returns the
    /// output plus the per-column batch mean and (population) variance so the
    /// caller can maintain running statistics.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let (rows, cols) = self.value(x).shape();
        self.check_affine_params("batch_norm", cols, gamma, beta)?;
        let t = self.value(x);
        let mut mean = vec![0.0; cols];
        for r in 0..rows {
            for (m, &v) in mean.iter_mut().zip(t.row_slice(r)) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= rows as f64;
        }
        let mut var = vec![0.0; cols];
        for r in 0..rows {
            for (c, &v) in t.row_slice(r).iter().enumerate() {
                var[c] += (v - mean[c]).powi(2);
            }
        }
        for v in &mut var {
            *v /= rows as f64;
        }
        let inv: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let gamma_row = self.value(gamma).data().to_vec();
        let beta_row = self.value(beta).data().to_vec();
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let src = t.row_slice(r);
            for (c, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = gamma_row[c] * (src[c] - mean[c]) * inv[c] + beta_row[c];
            }
        }
        let req = self.requires(x) || self.requires(gamma) || self.requires(beta);
        let op = Op::BatchNormTrain { x, gamma, beta, eps, mean: mean.clone(), var: var.clone() };
        Ok((self.push(out, op, req), mean, var))
    }

    /// Batch normalization with fixed (running) statistics: a deterministic
    /// affine map.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (rows, cols) = self.value(x).shape();
        self.check_affine_params("batch_norm", cols, gamma, beta)?;
        assert_eq!(mean.len(), cols, "running mean length");
        assert_eq!(var.len(), cols, "running var length");
        let inv: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let gamma_row = self.value(gamma).data().to_vec();
        let beta_row = self.value(beta).data().to_vec();
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let src = self.value(x).row_slice(r);
            let dst = out.row_mut(r);
            for c in 0..cols {
                dst[c] = gamma_row[c] * (src[c] - mean[c]) * inv[c] + beta_row[c];
            }
        }
        let req = self.requires(x) || self.requires(gamma) || self.requires(beta);
        let op = Op::BatchNormEval { x, gamma, beta, eps, mean: mean.to_vec(), var: var.to_vec() };
        Ok(self.push(out, op, req))
    }

    fn check_affine_params(
        &self,
        op: &'static str,
        cols: usize,
        gamma: Var,
        beta: Var,
    ) -> Result<()> {
        let g = self.value(gamma).shape();
        let b = self.value(beta).shape();
        if g != (1, cols) || b != (1, cols) {
            return Err(AutodiffError::ShapeMismatch { op, shapes: shapes(&[(1, cols), g, b]) });
        }
        Ok(())
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (rows, cols) = t.shape();
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let row = t.row_slice(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let log_z = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            for c in 0..cols {
                out.set(r, c, t.get(r, c) - log_z);
            }
        }
        let req = self.requires(x);
        self.push(out, Op::LogSoftmax(x), req)
    }

    /// Mean negative log-likelihood of `targets` under row-wise
    /// log-probabilities. Returns a scalar.
    pub fn nll_loss(&mut self, log_probs: Var, targets: &[usize]) -> Result<Var> {
        let (rows, cols) = self.value(log_probs).shape();
        if targets.len() != rows {
            return Err(AutodiffError::ShapeMismatch {
                op: "nll_loss",
                shapes: format!("[{rows}x{cols}] with {} targets", targets.len()),
            });
        }
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            assert!(t < cols, "target class {t} out of range {cols}");
            total -= self.value(log_probs).get(r, t);
        }
        let value = Tensor::scalar(total / rows as f64);
        let req = self.requires(log_probs);
        Ok(self.push(value, Op::NllLoss { log_probs, targets: targets.to_vec() }, req))
    }

    /// Select rows by index (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (rows, cols) = t.shape();
        for &i in ids {
            if i >= rows {
                return Err(AutodiffError::ShapeMismatch {
                    op: "gather_rows",
                    shapes: format!("row {i} out of [{rows}x{cols}]"),
                });
            }
        }
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            data.extend_from_slice(t.row_slice(i));
        }
        let out = Tensor::new(ids.len(), cols, data);
        let req = self.requires(x);
        Ok(self.push(out, Op::GatherRows { x, ids: ids.to_vec() }, req))
    }

    /// Accumulate row `i` of `x` into output row `ids[i]` of an
    /// `[n_rows, cols]` result.
    pub fn scatter_add_rows(&mut self, x: Var, ids: &[usize], n_rows: usize) -> Result<Var> {
        let t = self.value(x);
        let (rows, cols) = t.shape();
        if ids.len() != rows {
            return Err(AutodiffError::ShapeMismatch {
                op: "scatter_add_rows",
                shapes: format!("[{rows}x{cols}] with {} ids", ids.len()),
            });
        }
        let mut out = Tensor::zeros(n_rows, cols);
        for (r, &i) in ids.iter().enumerate() {
            assert!(i < n_rows, "scatter id {i} out of range {n_rows}");
            let src = t.row_slice(r);
            for (o, &v) in out.row_mut(i).iter_mut().zip(src) {
                *o += v;
            }
        }
        let req = self.requires(x);
        Ok(self.push(out, Op::ScatterAddRows { x, ids: ids.to_vec() }, req))
    }

    /// Reverse pass from a scalar loss. Gradients are produced for every
    /// node on the path to a tracked leaf; untracked leaves are absent.
    pub fn backward(&self, loss: Var) -> Result<GradMap> {
        let n = self.value(loss).len();
        if n != 1 {
            return Err(AutodiffError::NotScalarLoss(n));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.id()] = Some(Tensor::scalar(1.0));

        for id in (0..=loss.id()).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(grad) = grads[id].take() else { continue };
            self.propagate(id, &grad, &mut grads);
            grads[id] = Some(grad);
        }
        // Drop gradients of interior untracked paths: by construction only
        // requires_grad nodes ever received one, which is what callers need
        // (tracked leaves and tracked intermediates alike).
        Ok(GradMap { grads })
    }

    fn accumulate(grads: &mut [Option<Tensor>], v: Var, contribution: Tensor) {
        match &mut grads[v.id()] {
            Some(existing) => {
                for (e, c) in existing.data_mut().iter_mut().zip(contribution.data()) {
                    *e += c;
                }
            }
            slot => *slot = Some(contribution),
        }
    }

    fn propagate(&self, id: usize, grad: &Tensor, grads: &mut [Option<Tensor>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.requires(*a) {
                    let d = grad.matmul(&self.value(*b).transpose());
                    Self::accumulate(grads, *a, d);
                }
                if self.requires(*b) {
                    let d = self.value(*a).transpose().matmul(grad);
                    Self::accumulate(grads, *b, d);
                }
            }
            Op::Transpose(x) => {
                if self.requires(*x) {
                    Self::accumulate(grads, *x, grad.transpose());
                }
            }
            Op::Add(a, b) => {
                if self.requires(*a) {
                    Self::accumulate(grads, *a, grad.clone());
                }
                if self.requires(*b) {
                    let (br, bc) = self.value(*b).shape();
                    if (br, bc) == grad.shape() {
                        Self::accumulate(grads, *b, grad.clone());
                    } else {
                        // Bias broadcast: sum over rows.
                        let mut d = Tensor::zeros(1, bc);
                        for r in 0..grad.rows() {
                            for (o, &g) in d.data_mut().iter_mut().zip(grad.row_slice(r)) {
                                *o += g;
                            }
                        }
                        Self::accumulate(grads, *b, d);
                    }
                }
            }
            Op::Multiply(a, b) => {
                let (ar, ac) = self.value(*a).shape();
                let (br, bc) = self.value(*b).shape();
                if self.requires(*a) {
                    let mut d = grad.clone();
                    if (br, bc) == (ar, ac) {
                        for (g, &v) in d.data_mut().iter_mut().zip(self.value(*b).data()) {
                            *g *= v;
                        }
                    } else {
                        for r in 0..ar {
                            let s = self.value(*b).data()[r];
                            for v in d.row_mut(r) {
                                *v *= s;
                            }
                        }
                    }
                    Self::accumulate(grads, *a, d);
                }
                if self.requires(*b) {
                    if (br, bc) == (ar, ac) {
                        let mut d = grad.clone();
                        for (g, &v) in d.data_mut().iter_mut().zip(self.value(*a).data()) {
                            *g *= v;
                        }
                        Self::accumulate(grads, *b, d);
                    } else {
                        // Column broadcast: reduce over columns.
                        let mut d = Tensor::zeros(ar, 1);
                        for r in 0..ar {
                            let s: f64 = grad
                                .row_slice(r)
                                .iter()
                                .zip(self.value(*a).row_slice(r))
                                .map(|(&g, &v)| g * v)
                                .sum();
                            d.data_mut()[r] = s;
                        }
                        Self::accumulate(grads, *b, d);
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let mut row_off = 0;
                let mut col_off = 0;
                for &v in inputs {
                    let (r, c) = self.value(v).shape();
                    if self.requires(v) {
                        let mut d = Tensor::zeros(r, c);
                        for i in 0..r {
                            let src = &grad.row_slice(row_off + i)[col_off..col_off + c];
                            d.row_mut(i).copy_from_slice(src);
                        }
                        Self::accumulate(grads, v, d);
                    }
                    if *axis == 0 {
                        row_off += r;
                    } else {
                        col_off += c;
                    }
                }
            }
            Op::LeakyRelu { x, slope } => {
                if self.requires(*x) {
                    let mut d = grad.clone();
                    for (g, &v) in d.data_mut().iter_mut().zip(self.value(*x).data()) {
                        *g *= if v > 0.0 { 1.0 } else { *slope };
                    }
                    Self::accumulate(grads, *x, d);
                }
            }
            Op::Elu(x) => {
                if self.requires(*x) {
                    let mut d = grad.clone();
                    let y = &self.nodes[id].value;
                    for ((g, &xv), &yv) in
                        d.data_mut().iter_mut().zip(self.value(*x).data()).zip(y.data())
                    {
                        *g *= if xv > 0.0 { 1.0 } else { yv + 1.0 };
                    }
                    Self::accumulate(grads, *x, d);
                }
            }
            Op::Relu(x) => {
                if self.requires(*x) {
                    let mut d = grad.clone();
                    for (g, &v) in d.data_mut().iter_mut().zip(self.value(*x).data()) {
                        if v <= 0.0 {
                            *g = 0.0;
                        }
                    }
                    Self::accumulate(grads, *x, d);
                }
            }
            Op::Exp(x) => {
                if self.requires(*x) {
                    let mut d = grad.clone();
                    for (g, &yv) in d.data_mut().iter_mut().zip(self.nodes[id].value.data()) {
                        *g *= yv;
                    }
                    Self::accumulate(grads, *x, d);
                }
            }
            Op::Log(x) => {
                if self.requires(*x) {
                    let mut d = grad.clone();
                    for (g, &xv) in d.data_mut().iter_mut().zip(self.value(*x).data()) {
                        *g /= xv;
                    }
                    Self::accumulate(grads, *x, d);
                }
            }
            Op::SegmentSoftmax { x, segments } => {
                if self.requires(*x) {
                    let y = &self.nodes[id].value;
                    let (rows, cols) = y.shape();
                    let n_segments = segments.iter().max().map_or(0, |&m| m + 1);
                    // dot[s, c] = sum over segment rows of g * y
                    let mut dot = vec![0.0; n_segments * cols];
                    for (r, &s) in segments.iter().enumerate() {
                        for c in 0..cols {
                            dot[s * cols + c] += grad.get(r, c) * y.get(r, c);
                        }
                    }
                    let mut d = Tensor::zeros(rows, cols);
                    for (r, &s) in segments.iter().enumerate() {
                        for c in 0..cols {
                            let v = y.get(r, c) * (grad.get(r, c) - dot[s * cols + c]);
                            d.set(r, c, v);
                        }
                    }
                    Self::accumulate(grads, *x, d);
                }
            }
            Op::SegmentSum { x, segments } => {
                if self.requires(*x) {
                    let (rows, cols) = self.value(*x).shape();
                    let mut d = Tensor::zeros(rows, cols);
                    for (r, &s) in segments.iter().enumerate() {
                        d.row_mut(r).copy_from_slice(grad.row_slice(s));
                    }
                    Self::accumulate(grads, *x, d);
                }
            }
            Op::LayerNorm { x, scale, offset, eps } => {
                let t = self.value(*x);
                let (rows, cols) = t.shape();
                let m = cols as f64;
                let scale_row = self.value(*scale).data().to_vec();
                let mut dx = Tensor::zeros(rows, cols);
                let mut dscale = Tensor::zeros(1, cols);
                let mut doffset = Tensor::zeros(1, cols);
                let mut xhat = vec![0.0; cols];
                let mut gh = vec![0.0; cols];
                for r in 0..rows {
                    let row = t.row_slice(r);
                    let g_row = grad.row_slice(r);
                    let mean = row.iter().sum::<f64>() / m;
                    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m;
                    let inv = 1.0 / (var + eps).sqrt();
                    let mut g_sum = 0.0;
                    let mut gx_sum = 0.0;
                    for c in 0..cols {
                        xhat[c] = (row[c] - mean) * inv;
                        gh[c] = g_row[c] * scale_row[c];
                        g_sum += gh[c];
                        gx_sum += gh[c] * xhat[c];
                    }
                    for (c, (&g, &xh)) in g_row.iter().zip(&xhat).enumerate() {
                        dscale.data_mut()[c] += g * xh;
                        doffset.data_mut()[c] += g;
                    }
                    for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                        *o = inv * (gh[c] - g_sum / m - xhat[c] * gx_sum / m);
                    }
                }
                if self.requires(*x) {
                    Self::accumulate(grads, *x, dx);
                }
                if self.requires(*scale) {
                    Self::accumulate(grads, *scale, dscale);
                }
                if self.requires(*offset) {
                    Self::accumulate(grads, *offset, doffset);
                }
            }
            Op::BatchNormTrain { x, gamma, beta, eps, mean, var } => {
                let t = self.value(*x);
                let (rows, cols) = t.shape();
                let n = rows as f64;
                let inv: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
                let gamma_row = self.value(*gamma).data().to_vec();
                let mut dx = Tensor::zeros(rows, cols);
                let mut dgamma = Tensor::zeros(1, cols);
                let mut dbeta = Tensor::zeros(1, cols);
                let mut g_sum = vec![0.0; cols];
                let mut gx_sum = vec![0.0; cols];
                for r in 0..rows {
                    let row = t.row_slice(r);
                    let g_row = grad.row_slice(r);
                    for c in 0..cols {
                        let xhat = (row[c] - mean[c]) * inv[c];
                        g_sum[c] += g_row[c];
                        gx_sum[c] += g_row[c] * xhat;
                        dgamma.data_mut()[c] += g_row[c] * xhat;
                        dbeta.data_mut()[c] += g_row[c];
                    }
                }
                for r in 0..rows {
                    let row = t.row_slice(r);
                    let g_row = grad.row_slice(r);
                    for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                        let xhat = (row[c] - mean[c]) * inv[c];
                        *o = gamma_row[c]
                            * inv[c]
                            * (g_row[c] - g_sum[c] / n - xhat * gx_sum[c] / n);
                    }
                }
                if self.requires(*x) {
                    Self::accumulate(grads, *x, dx);
                }
                if self.requires(*gamma) {
                    Self::accumulate(grads, *gamma, dgamma);
                }
                if self.requires(*beta) {
                    Self::accumulate(grads, *beta, dbeta);
                }
            }
            Op::BatchNormEval { x, gamma, beta, eps, mean, var } => {
                let t = self.value(*x);
                let (rows, cols) = t.shape();
                let inv: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
                if self.requires(*x) {
                    let gamma_row = self.value(*gamma).data().to_vec();
                    let mut dx = Tensor::zeros(rows, cols);
                    for r in 0..rows {
                        let g_row = grad.row_slice(r);
                        for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                            *o = g_row[c] * gamma_row[c] * inv[c];
                        }
                    }
                    Self::accumulate(grads, *x, dx);
                }
                if self.requires(*gamma) {
                    let mut dg = Tensor::zeros(1, cols);
                    for r in 0..rows {
                        let row = t.row_slice(r);
                        let g_row = grad.row_slice(r);
                        for (c, o) in dg.data_mut().iter_mut().enumerate() {
                            *o += g_row[c] * (row[c] - mean[c]) * inv[c];
                        }
                    }
                    Self::accumulate(grads, *gamma, dg);
                }
                if self.requires(*beta) {
                    let mut db = Tensor::zeros(1, cols);
                    for r in 0..rows {
                        for (o, &g) in db.data_mut().iter_mut().zip(grad.row_slice(r)) {
                            *o += g;
                        }
                    }
                    Self::accumulate(grads, *beta, db);
                }
            }
            Op::LogSoftmax(x) => {
                if self.requires(*x) {
                    let y = &self.nodes[id].value;
                    let (rows, cols) = y.shape();
                    let mut d = Tensor::zeros(rows, cols);
                    for r in 0..rows {
                        let g_row = grad.row_slice(r);
                        let y_row = y.row_slice(r);
                        let g_sum: f64 = g_row.iter().sum();
                        for (c, o) in d.row_mut(r).iter_mut().enumerate() {
                            *o = g_row[c] - y_row[c].exp() * g_sum;
                        }
                    }
                    Self::accumulate(grads, *x, d);
                }
            }
            Op::NllLoss { log_probs, targets } => {
                if self.requires(*log_probs) {
                    let (rows, cols) = self.value(*log_probs).shape();
                    let g = grad.item();
                    let mut d = Tensor::zeros(rows, cols);
                    for (r, &t) in targets.iter().enumerate() {
                        d.set(r, t, -g / rows as f64);
                    }
                    Self::accumulate(grads, *log_probs, d);
                }
            }
            Op::GatherRows { x, ids } => {
                if self.requires(*x) {
                    let (rows, cols) = self.value(*x).shape();
                    let mut d = Tensor::zeros(rows, cols);
                    for (r, &i) in ids.iter().enumerate() {
                        let src = grad.row_slice(r);
                        for (o, &g) in d.row_mut(i).iter_mut().zip(src) {
                            *o += g;
                        }
                    }
                    Self::accumulate(grads, *x, d);
                }
            }
            Op::ScatterAddRows { x, ids } => {
                if self.requires(*x) {
                    let (rows, cols) = self.value(*x).shape();
                    let mut d = Tensor::zeros(rows, cols);
                    for (r, &i) in ids.iter().enumerate() {
                        d.row_mut(r).copy_from_slice(grad.row_slice(i));
                    }
                    Self::accumulate(grads, *x, d);
                }
            }
        }
    }
}
