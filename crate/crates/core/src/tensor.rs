//! Dense-tensor tape with reverse-mode differentiation.
//!
//! The tape records exactly the operations the forecaster's forward pass
//! needs: matmul, bias/elementwise adds, last-dim softmax, layer norm,
//! GELU, slicing/concatenation for head split and token assembly, and an
//! MSE loss. Everything runs in f64; a graph is single-threaded and owns
//! the stored activations needed for backward.

use crate::error::{Error, Result};

/// Identity of a tensor within one [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: TensorId, b: TensorId },
    /// Same-shape elementwise add.
    Add { a: TensorId, b: TensorId },
    /// `a: [..., d] + bias: [d]`, bias repeated over leading dims. The only
    /// broadcast the engine supports.
    AddBias { a: TensorId, bias: TensorId },
    /// Elementwise product, same shape.
    Mul { a: TensorId, b: TensorId },
    /// Multiply by a compile-time constant (attention scaling).
    Scale { a: TensorId, c: f64 },
    SoftmaxLastDim { a: TensorId },
    LayerNorm { a: TensorId, gamma: TensorId, beta: TensorId, eps: f64 },
    Gelu { a: TensorId },
    Transpose { a: TensorId },
    ConcatRows { parts: Vec<TensorId> },
    ConcatCols { parts: Vec<TensorId> },
    SliceRows { a: TensorId, start: usize },
    SliceCols { a: TensorId, start: usize },
    Sum { a: TensorId },
    MseLoss { pred: TensorId, target: TensorId },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
}

/// Recorded computation graph. Nodes are appended in topological order and
/// backward walks them exactly once in reverse.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

// Row-major kernels. The p-loop accumulation order is fixed, so results are
// bitwise reproducible run to run.

/// C[m,n] = A[m,k] * B[k,n]
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// C[m,k] = A[m,n] * B[k,n]^T  (rows of B used as dot-product partners)
fn matmul_a_bt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * k];
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            let mut s = 0.0;
            for (&av, &bv) in a_row.iter().zip(b_row) {
                s += av * bv;
            }
            c[i * k + p] = s;
        }
    }
    c
}

/// C[k,n] = A[m,k]^T * B[m,n]
fn matmul_at_b(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let c_row = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
    c
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.3989422804014327; // 1/sqrt(2*pi)

/// Exact GELU, x * Phi(x) with the erf form.
pub fn gelu_scalar(x: f64) -> f64 {
    x * 0.5 * (1.0 + libm::erf(x * INV_SQRT_2))
}

/// d/dx of [`gelu_scalar`]: Phi(x) + x * phi(x).
pub fn gelu_grad_scalar(x: f64) -> f64 {
    let phi_cdf = 0.5 * (1.0 + libm::erf(x * INV_SQRT_2));
    let phi_pdf = INV_SQRT_2PI * (-0.5 * x * x).exp();
    phi_cdf + x * phi_pdf
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, values: Vec<f64>) -> TensorId {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node { op, shape, values, grad: None });
        id
    }

    /// Insert an input or parameter tensor.
    pub fn leaf(&mut self, values: Vec<f64>, shape: Vec<usize>) -> TensorId {
        assert_eq!(
            shape.iter().product::<usize>(),
            values.len(),
            "leaf: shape {:?} does not match {} values",
            shape,
            values.len()
        );
        self.push(Op::Leaf, shape, values)
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn values(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].values
    }

    /// Populated for every node reachable from the loss after [`Tape::backward`].
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn scalar(&self, id: TensorId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].values.len(), 1);
        self.nodes[id.0].values[0]
    }

    /// Drop all accumulated gradients so the same graph can run backward again.
    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn dims2(&self, id: TensorId, op: &'static str) -> Result<(usize, usize)> {
        let s = &self.nodes[id.0].shape;
        if s.len() != 2 {
            return Err(Error::Shape { op, lhs: s.clone(), rhs: vec![] });
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, ka) = self.dims2(a, "matmul")?;
        let (kb, n) = self.dims2(b, "matmul")?;
        if ka != kb {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let values = matmul_raw(&self.nodes[a.0].values, &self.nodes[b.0].values, m, ka, n);
        Ok(self.push(Op::MatMul { a, b }, vec![m, n], values))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::Shape {
                op: "add",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let values: Vec<f64> = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(Op::Add { a, b }, shape, values))
    }

    pub fn add_bias(&mut self, a: TensorId, bias: TensorId) -> Result<TensorId> {
        let a_shape = self.nodes[a.0].shape.clone();
        let b_shape = &self.nodes[bias.0].shape;
        let d = *a_shape.last().unwrap_or(&0);
        if b_shape.len() != 1 || b_shape[0] != d {
            return Err(Error::Shape {
                op: "add_bias",
                lhs: a_shape,
                rhs: b_shape.clone(),
            });
        }
        let bias_vals = &self.nodes[bias.0].values;
        let values: Vec<f64> = self.nodes[a.0]
            .values
            .iter()
            .enumerate()
            .map(|(i, x)| x + bias_vals[i % d])
            .collect();
        Ok(self.push(Op::AddBias { a, bias }, a_shape, values))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::Shape {
                op: "mul",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let values: Vec<f64> = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(Op::Mul { a, b }, shape, values))
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let values: Vec<f64> = self.nodes[a.0].values.iter().map(|x| x * c).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(Op::Scale { a, c }, shape, values)
    }

    /// Softmax along the final axis, computed with max subtraction.
    pub fn softmax_lastdim(&mut self, a: TensorId) -> TensorId {
        let shape = self.nodes[a.0].shape.clone();
        let d = *shape.last().expect("softmax on 0-dim tensor");
        assert!(d >= 1);
        let src = &self.nodes[a.0].values;
        let mut values = vec![0.0; src.len()];
        for (out, row) in values.chunks_mut(d).zip(src.chunks(d)) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (o, &x) in out.iter_mut().zip(row) {
                let e = (x - max).exp();
                *o = e;
                sum += e;
            }
            for o in out.iter_mut() {
                *o /= sum;
            }
        }
        self.push(Op::SoftmaxLastDim { a }, shape, values)
    }

    pub fn layer_norm(
        &mut self,
        a: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> Result<TensorId> {
        let shape = self.nodes[a.0].shape.clone();
        let d = *shape.last().unwrap_or(&0);
        for (id, name) in [(gamma, "gamma"), (beta, "beta")] {
            let s = &self.nodes[id.0].shape;
            if s.len() != 1 || s[0] != d {
                let _ = name;
                return Err(Error::Shape { op: "layer_norm", lhs: shape, rhs: s.clone() });
            }
        }
        assert!(eps > 0.0, "layer_norm eps must be positive");
        let g = self.nodes[gamma.0].values.clone();
        let b = self.nodes[beta.0].values.clone();
        let src = &self.nodes[a.0].values;
        let mut values = vec![0.0; src.len()];
        for (out, row) in values.chunks_mut(d).zip(src.chunks(d)) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                out[j] = (row[j] - mean) * inv_std * g[j] + b[j];
            }
        }
        Ok(self.push(Op::LayerNorm { a, gamma, beta, eps }, shape, values))
    }

    pub fn gelu(&mut self, a: TensorId) -> TensorId {
        let shape = self.nodes[a.0].shape.clone();
        let values: Vec<f64> = self.nodes[a.0].values.iter().map(|&x| gelu_scalar(x)).collect();
        self.push(Op::Gelu { a }, shape, values)
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let (m, n) = self.dims2(a, "transpose")?;
        let src = &self.nodes[a.0].values;
        let mut values = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                values[j * m + i] = src[i * n + j];
            }
        }
        Ok(self.push(Op::Transpose { a }, vec![n, m], values))
    }

    /// Stack 2-D tensors with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        assert!(!parts.is_empty());
        let (_, cols) = self.dims2(parts[0], "concat_rows")?;
        let mut rows = 0;
        let mut values = Vec::new();
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_rows")?;
            if c != cols {
                return Err(Error::Shape {
                    op: "concat_rows",
                    lhs: self.nodes[parts[0].0].shape.clone(),
                    rhs: self.nodes[p.0].shape.clone(),
                });
            }
            rows += r;
            values.extend_from_slice(&self.nodes[p.0].values);
        }
        Ok(self.push(Op::ConcatRows { parts: parts.to_vec() }, vec![rows, cols], values))
    }

    /// Stack 2-D tensors with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        assert!(!parts.is_empty());
        let (rows, _) = self.dims2(parts[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut cols = 0;
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_cols")?;
            if r != rows {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: self.nodes[parts[0].0].shape.clone(),
                    rhs: self.nodes[p.0].shape.clone(),
                });
            }
            widths.push(c);
            cols += c;
        }
        let mut values = vec![0.0; rows * cols];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = &self.nodes[p.0].values;
            for i in 0..rows {
                values[i * cols + offset..i * cols + offset + w]
                    .copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        Ok(self.push(Op::ConcatCols { parts: parts.to_vec() }, vec![rows, cols], values))
    }

    pub fn slice_rows(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let (m, n) = self.dims2(a, "slice_rows")?;
        if start + len > m {
            return Err(Error::Shape {
                op: "slice_rows",
                lhs: vec![m, n],
                rhs: vec![start, len],
            });
        }
        let values = self.nodes[a.0].values[start * n..(start + len) * n].to_vec();
        Ok(self.push(Op::SliceRows { a, start }, vec![len, n], values))
    }

    pub fn slice_cols(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let (m, n) = self.dims2(a, "slice_cols")?;
        if start + len > n {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: vec![m, n],
                rhs: vec![start, len],
            });
        }
        let src = &self.nodes[a.0].values;
        let mut values = vec![0.0; m * len];
        for i in 0..m {
            values[i * len..(i + 1) * len].copy_from_slice(&src[i * n + start..i * n + start + len]);
        }
        Ok(self.push(Op::SliceCols { a, start }, vec![m, len], values))
    }

    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let s: f64 = self.nodes[a.0].values.iter().sum();
        self.push(Op::Sum { a }, vec![1], vec![s])
    }

    /// Mean of squared differences over the whole tensor.
    pub fn mse_loss(&mut self, pred: TensorId, target: TensorId) -> Result<TensorId> {
        if self.nodes[pred.0].shape != self.nodes[target.0].shape {
            return Err(Error::Shape {
                op: "mse_loss",
                lhs: self.nodes[pred.0].shape.clone(),
                rhs: self.nodes[target.0].shape.clone(),
            });
        }
        let n = self.nodes[pred.0].values.len();
        assert!(n >= 1, "mse_loss on empty tensors");
        let mut s = 0.0;
        for (p, t) in self.nodes[pred.0].values.iter().zip(&self.nodes[target.0].values) {
            let d = p - t;
            s += d * d;
        }
        Ok(self.push(Op::MseLoss { pred, target }, vec![1], vec![s / n as f64]))
    }

    fn accumulate(&mut self, id: TensorId, contribution: &[f64]) {
        let node = &mut self.nodes[id.0];
        match &mut node.grad {
            Some(g) => {
                for (gv, &c) in g.iter_mut().zip(contribution) {
                    *gv += c;
                }
            }
            None => node.grad = Some(contribution.to_vec()),
        }
    }

    /// Reverse pass seeding d(loss)/d(loss) = 1. The loss must be scalar.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.nodes[loss.0].values.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let grad = match &self.nodes[i].grad {
                Some(g) => g.clone(),
                None => continue, // not reachable from the loss
            };
            match self.nodes[i].op.clone() {
                Op::Leaf => {}
                Op::MatMul { a, b } => {
                    let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    let n = self.nodes[b.0].shape[1];
                    let da = matmul_a_bt(&grad, &self.nodes[b.0].values, m, n, k);
                    let db = matmul_at_b(&self.nodes[a.0].values, &grad, m, k, n);
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }
                Op::Add { a, b } => {
                    self.accumulate(a, &grad);
                    self.accumulate(b, &grad);
                }
                Op::AddBias { a, bias } => {
                    self.accumulate(a, &grad);
                    let d = self.nodes[bias.0].values.len();
                    let mut db = vec![0.0; d];
                    for (i, &g) in grad.iter().enumerate() {
                        db[i % d] += g;
                    }
                    self.accumulate(bias, &db);
                }
                Op::Mul { a, b } => {
                    let da: Vec<f64> =
                        grad.iter().zip(&self.nodes[b.0].values).map(|(g, v)| g * v).collect();
                    let db: Vec<f64> =
                        grad.iter().zip(&self.nodes[a.0].values).map(|(g, v)| g * v).collect();
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }
                Op::Scale { a, c } => {
                    let da: Vec<f64> = grad.iter().map(|g| g * c).collect();
                    self.accumulate(a, &da);
                }
                Op::SoftmaxLastDim { a } => {
                    let d = *self.nodes[i].shape.last().unwrap();
                    let out = &self.nodes[i].values;
                    let mut da = vec![0.0; out.len()];
                    for ((dx, s), g) in da.chunks_mut(d).zip(out.chunks(d)).zip(grad.chunks(d)) {
                        let dot: f64 = g.iter().zip(s).map(|(gv, sv)| gv * sv).sum();
                        for j in 0..d {
                            dx[j] = s[j] * (g[j] - dot);
                        }
                    }
                    self.accumulate(a, &da);
                }
                Op::LayerNorm { a, gamma, beta, eps } => {
                    let d = *self.nodes[i].shape.last().unwrap();
                    let x = &self.nodes[a.0].values;
                    let g_vals = &self.nodes[gamma.0].values;
                    let mut dx = vec![0.0; x.len()];
                    let mut dgamma = vec![0.0; d];
                    let mut dbeta = vec![0.0; d];
                    for (row_idx, (row, grow)) in x.chunks(d).zip(grad.chunks(d)).enumerate() {
                        let mean = row.iter().sum::<f64>() / d as f64;
                        let var =
                            row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                        let inv_std = 1.0 / (var + eps).sqrt();
                        let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv_std).collect();
                        let dxhat: Vec<f64> =
                            grow.iter().zip(g_vals).map(|(g, gm)| g * gm).collect();
                        let sum_dxhat: f64 = dxhat.iter().sum();
                        let sum_dxhat_xhat: f64 =
                            dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                        let df = d as f64;
                        let base = row_idx * d;
                        for j in 0..d {
                            dgamma[j] += grow[j] * xhat[j];
                            dbeta[j] += grow[j];
                            dx[base + j] = inv_std / df
                                * (df * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                        }
                    }
                    self.accumulate(a, &dx);
                    self.accumulate(gamma, &dgamma);
                    self.accumulate(beta, &dbeta);
                }
                Op::Gelu { a } => {
                    let da: Vec<f64> = grad
                        .iter()
                        .zip(&self.nodes[a.0].values)
                        .map(|(g, &x)| g * gelu_grad_scalar(x))
                        .collect();
                    self.accumulate(a, &da);
                }
                Op::Transpose { a } => {
                    let (n, m) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                    let mut da = vec![0.0; grad.len()];
                    for r in 0..n {
                        for c in 0..m {
                            da[c * n + r] = grad[r * m + c];
                        }
                    }
                    self.accumulate(a, &da);
                }
                Op::ConcatRows { parts } => {
                    let cols = self.nodes[i].shape[1];
                    let mut offset = 0;
                    for p in parts {
                        let rows = self.nodes[p.0].shape[0];
                        let slice = grad[offset * cols..(offset + rows) * cols].to_vec();
                        self.accumulate(p, &slice);
                        offset += rows;
                    }
                }
                Op::ConcatCols { parts } => {
                    let rows = self.nodes[i].shape[0];
                    let cols = self.nodes[i].shape[1];
                    let mut offset = 0;
                    for p in parts {
                        let w = self.nodes[p.0].shape[1];
                        let mut dp = vec![0.0; rows * w];
                        for r in 0..rows {
                            dp[r * w..(r + 1) * w]
                                .copy_from_slice(&grad[r * cols + offset..r * cols + offset + w]);
                        }
                        self.accumulate(p, &dp);
                        offset += w;
                    }
                }
                Op::SliceRows { a, start } => {
                    let n = self.nodes[a.0].shape[1];
                    let mut da = vec![0.0; self.nodes[a.0].values.len()];
                    da[start * n..start * n + grad.len()].copy_from_slice(&grad);
                    self.accumulate(a, &da);
                }
                Op::SliceCols { a, start } => {
                    let (m, n) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    let w = self.nodes[i].shape[1];
                    let mut da = vec![0.0; m * n];
                    for r in 0..m {
                        da[r * n + start..r * n + start + w]
                            .copy_from_slice(&grad[r * w..(r + 1) * w]);
                    }
                    self.accumulate(a, &da);
                }
                Op::Sum { a } => {
                    let da = vec![grad[0]; self.nodes[a.0].values.len()];
                    self.accumulate(a, &da);
                }
                Op::MseLoss { pred, target } => {
                    let n = self.nodes[pred.0].values.len() as f64;
                    let scale = 2.0 * grad[0] / n;
                    let dpred: Vec<f64> = self.nodes[pred.0]
                        .values
                        .iter()
                        .zip(&self.nodes[target.0].values)
                        .map(|(p, t)| scale * (p - t))
                        .collect();
                    let dtarget: Vec<f64> = dpred.iter().map(|d| -d).collect();
                    self.accumulate(pred, &dpred);
                    self.accumulate(target, &dtarget);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_diff, max_rel_err};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randv(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn matmul_identity_and_row_sum() {
        let mut tape = Tape::new();
        let eye = tape.leaf(vec![1.0, 0.0, 0.0, 1.0], vec![2, 2]);
        let a = tape.leaf(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2]);
        let c = tape.matmul(eye, a).unwrap();
        assert_eq!(tape.values(c), &[1.0, 2.0, 3.0, 4.0]);

        let row = tape.leaf(vec![1.0, 2.0, 3.0], vec![1, 3]);
        let ones = tape.leaf(vec![1.0, 1.0, 1.0], vec![3, 1]);
        let s = tape.matmul(row, ones).unwrap();
        assert_eq!(tape.values(s), &[6.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(vec![0.0; 6], vec![2, 3]);
        let b = tape.leaf(vec![0.0; 8], vec![4, 2]);
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn matmul_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a0 = randv(&mut rng, 12);
        let b0 = randv(&mut rng, 8);

        let f = |x: &[f64]| {
            let mut tape = Tape::new();
            let a = tape.leaf(x[..12].to_vec(), vec![3, 4]);
            let b = tape.leaf(x[12..].to_vec(), vec![4, 2]);
            let c = tape.matmul(a, b).unwrap();
            let s = tape.sum(c);
            tape.scalar(s)
        };
        let mut joint = a0.clone();
        joint.extend_from_slice(&b0);
        let numeric = central_diff(f, &joint, 1e-5);

        let mut tape = Tape::new();
        let a = tape.leaf(a0, vec![3, 4]);
        let b = tape.leaf(b0, vec![4, 2]);
        let c = tape.matmul(a, b).unwrap();
        let s = tape.sum(c);
        tape.backward(s).unwrap();
        let mut analytic = tape.grad(a).unwrap().to_vec();
        analytic.extend_from_slice(tape.grad(b).unwrap());
        assert!(max_rel_err(&analytic, &numeric, 1e-6) < 1e-6);
    }

    #[test]
    fn matmul_associativity_within_tolerance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let a = randv(&mut rng, 16);
            let b = randv(&mut rng, 16);
            let c = randv(&mut rng, 16);
            let ab_c = matmul_raw(&matmul_raw(&a, &b, 4, 4, 4), &c, 4, 4, 4);
            let a_bc = matmul_raw(&a, &matmul_raw(&b, &c, 4, 4, 4), 4, 4, 4);
            let max_diff = ab_c
                .iter()
                .zip(&a_bc)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0f64, f64::max);
            assert!(max_diff < 1e-9, "associativity violated: {max_diff}");
        }
    }

    #[test]
    fn softmax_symmetry_and_overflow() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![0.0, 0.0], vec![2]);
        let s = tape.softmax_lastdim(x);
        assert_eq!(tape.values(s), &[0.5, 0.5]);

        let big = tape.leaf(vec![1000.0, 1000.0], vec![2]);
        let s2 = tape.softmax_lastdim(big);
        assert_eq!(tape.values(s2), &[0.5, 0.5]);
        assert!(tape.values(s2).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let mut tape = Tape::new();
            let x = tape.leaf(randv(&mut rng, 12), vec![3, 4]);
            let s = tape.softmax_lastdim(x);
            for row in tape.values(s).chunks(4) {
                assert!(row.iter().all(|&v| v >= 0.0));
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn softmax_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x0 = randv(&mut rng, 5);
        // weight the outputs so the gradient is not identically zero
        let w: Vec<f64> = (0..5).map(|i| (i + 1) as f64).collect();
        let wc = w.clone();
        let f = move |x: &[f64]| {
            let mut tape = Tape::new();
            let xs = tape.leaf(x.to_vec(), vec![5]);
            let s = tape.softmax_lastdim(xs);
            let wt = tape.leaf(wc.clone(), vec![5]);
            let p = tape.mul(s, wt).unwrap();
            let l = tape.sum(p);
            tape.scalar(l)
        };
        let numeric = central_diff(f, &x0, 1e-5);

        let mut tape = Tape::new();
        let xs = tape.leaf(x0, vec![5]);
        let s = tape.softmax_lastdim(xs);
        let wt = tape.leaf(w, vec![5]);
        let p = tape.mul(s, wt).unwrap();
        let l = tape.sum(p);
        tape.backward(l).unwrap();
        assert!(max_rel_err(tape.grad(xs).unwrap(), &numeric, 1e-6) < 1e-6);
    }

    #[test]
    fn layer_norm_constant_slice_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![3.5, 3.5, 3.5], vec![1, 3]);
        let g = tape.leaf(vec![1.0, 1.0, 1.0], vec![3]);
        let b = tape.leaf(vec![0.0, 0.0, 0.0], vec![3]);
        let y = tape.layer_norm(x, g, b, 1e-6).unwrap();
        for &v in tape.values(y) {
            assert!(v.abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_zero_gamma_collapses_to_beta() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![1.0, -2.0, 0.5, 4.0], vec![2, 2]);
        let g = tape.leaf(vec![0.0, 0.0], vec![2]);
        let b = tape.leaf(vec![0.7, -0.3], vec![2]);
        let y = tape.layer_norm(x, g, b, 1e-6).unwrap();
        assert_eq!(tape.values(y), &[0.7, -0.3, 0.7, -0.3]);
    }

    #[test]
    fn layer_norm_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x0 = randv(&mut rng, 16);
        let g0 = randv(&mut rng, 8);
        let b0 = randv(&mut rng, 8);
        let w: Vec<f64> = (0..16).map(|i| ((i * 7) % 5) as f64 - 2.0).collect();

        let wc = w.clone();
        let f = move |joint: &[f64]| {
            let mut tape = Tape::new();
            let x = tape.leaf(joint[..16].to_vec(), vec![2, 8]);
            let g = tape.leaf(joint[16..24].to_vec(), vec![8]);
            let b = tape.leaf(joint[24..].to_vec(), vec![8]);
            let y = tape.layer_norm(x, g, b, 1e-6).unwrap();
            let wt = tape.leaf(wc.clone(), vec![2, 8]);
            let p = tape.mul(y, wt).unwrap();
            let l = tape.sum(p);
            tape.scalar(l)
        };
        let mut joint = x0.clone();
        joint.extend_from_slice(&g0);
        joint.extend_from_slice(&b0);
        let numeric = central_diff(f, &joint, 1e-5);

        let mut tape = Tape::new();
        let x = tape.leaf(x0, vec![2, 8]);
        let g = tape.leaf(g0, vec![8]);
        let b = tape.leaf(b0, vec![8]);
        let y = tape.layer_norm(x, g, b, 1e-6).unwrap();
        let wt = tape.leaf(w, vec![2, 8]);
        let p = tape.mul(y, wt).unwrap();
        let l = tape.sum(p);
        tape.backward(l).unwrap();
        let mut analytic = tape.grad(x).unwrap().to_vec();
        analytic.extend_from_slice(tape.grad(g).unwrap());
        analytic.extend_from_slice(tape.grad(b).unwrap());
        assert!(max_rel_err(&analytic, &numeric, 1e-5) < 1e-5);
    }

    #[test]
    fn gelu_fixed_points() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert!((gelu_scalar(10.0) - 10.0).abs() < 1e-6);
        // symmetric negative tail decays to zero
        assert!(gelu_scalar(-10.0).abs() < 1e-6);
    }

    #[test]
    fn gelu_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x0: Vec<f64> = (0..8).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let f = |x: &[f64]| {
            let mut tape = Tape::new();
            let xs = tape.leaf(x.to_vec(), vec![8]);
            let y = tape.gelu(xs);
            let l = tape.sum(y);
            tape.scalar(l)
        };
        let numeric = central_diff(f, &x0, 1e-5);
        let mut tape = Tape::new();
        let xs = tape.leaf(x0, vec![8]);
        let y = tape.gelu(xs);
        let l = tape.sum(y);
        tape.backward(l).unwrap();
        assert!(max_rel_err(tape.grad(xs).unwrap(), &numeric, 1e-6) < 1e-6);
    }

    #[test]
    fn mse_values() {
        let mut tape = Tape::new();
        let p = tape.leaf(vec![1.0, 2.0], vec![2]);
        let t = tape.leaf(vec![1.0, 2.0], vec![2]);
        let l = tape.mse_loss(p, t).unwrap();
        assert_eq!(tape.scalar(l), 0.0);

        let p2 = tape.leaf(vec![0.0, 0.0], vec![2]);
        let t2 = tape.leaf(vec![3.0, 4.0], vec![2]);
        let l2 = tape.mse_loss(p2, t2).unwrap();
        assert_eq!(tape.scalar(l2), 12.5);
    }

    #[test]
    fn mse_gradient_is_two_over_n_times_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let p0 = randv(&mut rng, 6);
        let t0 = randv(&mut rng, 6);
        let mut tape = Tape::new();
        let p = tape.leaf(p0.clone(), vec![6]);
        let t = tape.leaf(t0.clone(), vec![6]);
        let l = tape.mse_loss(p, t).unwrap();
        tape.backward(l).unwrap();
        let g = tape.grad(p).unwrap();
        for i in 0..6 {
            let expected = 2.0 * (p0[i] - t0[i]) / 6.0;
            assert!((g[i] - expected).abs() < 1e-12);
        }

        let tc = t0.clone();
        let f = move |x: &[f64]| {
            let mut tape = Tape::new();
            let p = tape.leaf(x.to_vec(), vec![6]);
            let t = tape.leaf(tc.clone(), vec![6]);
            let l = tape.mse_loss(p, t).unwrap();
            tape.scalar(l)
        };
        let numeric = central_diff(f, &p0, 1e-5);
        assert!(max_rel_err(g, &numeric, 1e-6) < 1e-6);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![1.0, -4.0, 2.5, 0.0, 9.0, 3.0], vec![2, 3]);
        let l = tape.sum(x);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_of_square_is_two_x() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![3.0], vec![1]);
        let sq = tape.mul(x, x).unwrap();
        let l = tape.sum(sq);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![1.0, 2.0], vec![2]);
        let err = tape.backward(x).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn repeated_backward_is_bitwise_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut tape = Tape::new();
        let a = tape.leaf(randv(&mut rng, 12), vec![3, 4]);
        let b = tape.leaf(randv(&mut rng, 8), vec![4, 2]);
        let c = tape.matmul(a, b).unwrap();
        let s = tape.softmax_lastdim(c);
        let l = tape.sum(s);
        tape.backward(l).unwrap();
        let g1a = tape.grad(a).unwrap().to_vec();
        let g1b = tape.grad(b).unwrap().to_vec();
        tape.zero_grads();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &g1a[..]);
        assert_eq!(tape.grad(b).unwrap(), &g1b[..]);
    }

    /// Every differentiable op agrees with central differences on several
    /// random instances.
    #[test]
    fn all_ops_pass_gradient_check() {
        type Build = fn(&mut Tape, TensorId) -> TensorId;
        let cases: Vec<(&str, Vec<usize>, Build)> = vec![
            ("scale", vec![3, 2], |t, x| t.scale(x, -1.7)),
            ("transpose", vec![3, 2], |t, x| {
                let y = t.transpose(x).unwrap();
                let w = t.leaf((0..6).map(|i| i as f64 - 2.0).collect(), vec![2, 3]);
                t.mul(y, w).unwrap()
            }),
            ("gelu", vec![6], |t, x| t.gelu(x)),
            ("softmax", vec![2, 3], |t, x| {
                let s = t.softmax_lastdim(x);
                let w = t.leaf((0..6).map(|i| (i as f64).cos()).collect(), vec![2, 3]);
                t.mul(s, w).unwrap()
            }),
            ("add_bias", vec![2, 3], |t, x| {
                let b = t.leaf(vec![0.4, -0.2, 1.1], vec![3]);
                t.add_bias(x, b).unwrap()
            }),
            ("slice_concat", vec![4, 3], |t, x| {
                let top = t.slice_rows(x, 0, 2).unwrap();
                let bottom = t.slice_rows(x, 2, 2).unwrap();
                let back = t.concat_rows(&[bottom, top]).unwrap();
                let left = t.slice_cols(back, 0, 1).unwrap();
                let right = t.slice_cols(back, 1, 2).unwrap();
                let joined = t.concat_cols(&[right, left]).unwrap();
                let w = t.leaf((0..12).map(|i| (i as f64) * 0.3 - 1.0).collect(), vec![4, 3]);
                t.mul(joined, w).unwrap()
            }),
        ];

        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for (name, shape, build) in cases {
            for trial in 0..5 {
                let n: usize = shape.iter().product();
                let x0 = randv(&mut rng, n);
                let shape_c = shape.clone();
                let f = move |x: &[f64]| {
                    let mut tape = Tape::new();
                    let xs = tape.leaf(x.to_vec(), shape_c.clone());
                    let y = build(&mut tape, xs);
                    let l = tape.sum(y);
                    tape.scalar(l)
                };
                let numeric = central_diff(&f, &x0, 1e-5);
                let mut tape = Tape::new();
                let xs = tape.leaf(x0, shape.clone());
                let y = build(&mut tape, xs);
                let l = tape.sum(y);
                tape.backward(l).unwrap();
                let rel = max_rel_err(tape.grad(xs).unwrap(), &numeric, 1e-6);
                assert!(rel < 1e-4, "{name} trial {trial}: rel err {rel}");
            }
        }
    }
}
