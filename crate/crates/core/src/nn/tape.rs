//! Reverse-mode gradient recording.
//!
//! A [`Tape`] records one forward pass. Every operation appends a node holding
//! its value and enough context to push gradients back to its inputs; calling
//! [`Tape::backward`] walks the nodes in reverse. Tapes are single-use.

use std::sync::Arc;

use super::real::{gemm, Real};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Backward rule for an operation defined outside this module.
pub trait CustomOp<F: Real>: Send + Sync {
    fn inputs(&self) -> &[Var];

    /// Returns one gradient per entry of [`inputs`](CustomOp::inputs), or
    /// `None` where an input receives no gradient.
    fn backward(&self, values: &dyn Fn(Var) -> Arc<Vec<F>>, grad: &[F], needs: &[bool]) -> Vec<Option<Vec<F>>>;
}

/// Geometry of a 2-D convolution with square kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn patch(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
}

enum Op<F: Real> {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool, m: usize, k: usize, n: usize },
    Add(Var, Var),
    AddRowBias { x: Var, b: Var },
    Scale { x: Var, s: F },
    Relu(Var),
    SliceCols { x: Var, start: usize, cols: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    Reshape(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<F>, inv_std: Vec<F> },
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom },
    PoolTokens { x: Var, dims: [usize; 4], grid: (usize, usize) },
    MeanRows(Var),
    Nll { x: Var, targets: Vec<usize> },
    Custom(Box<dyn CustomOp<F>>),
}

struct Node<F: Real> {
    shape: Vec<usize>,
    value: Arc<Vec<F>>,
    op: Op<F>,
    needs_grad: bool,
}

pub struct Tape<F: Real> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(msg: impl Into<String>) -> Error {
    Error::DimensionMismatch(msg.into())
}

/// Adaptive pooling window `[start, end)` for output cell `i` of `out` over `len` inputs.
pub fn pool_window(i: usize, out: usize, len: usize) -> (usize, usize) {
    let start = i * len / out;
    let end = ((i + 1) * len).div_ceil(out);
    (start, end)
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<F>, op: Op<F>, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.push_shared(shape, Arc::new(value), op, needs_grad)
    }

    fn push_shared(&mut self, shape: Vec<usize>, value: Arc<Vec<F>>, op: Op<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf sharing storage with a parameter store.
    pub fn leaf(&mut self, value: Arc<Vec<F>>, shape: &[usize]) -> Var {
        assert_eq!(shape.iter().product::<usize>(), value.len(), "leaf shape");
        self.push_shared(shape.to_vec(), value, Op::Leaf, true)
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, value: Vec<F>, shape: &[usize]) -> Var {
        assert_eq!(shape.iter().product::<usize>(), value.len(), "constant shape");
        self.push(shape.to_vec(), value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[F] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// `(rows, cols)` treating the last axis as columns.
    pub fn rows_cols(&self, v: Var) -> (usize, usize) {
        let s = self.shape(v);
        let cols = *s.last().unwrap_or(&1);
        let rows = self.value(v).len().checked_div(cols).unwrap_or(0);
        (rows, cols)
    }

    fn matrix_dims(&self, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(mismatch(format!("expected a matrix, found shape {s:?}"))),
        }
    }

    /// `op(a) · op(b)` for matrices, with optional transposition of either side.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let (ar, ac) = self.matrix_dims(a)?;
        let (br, bc) = self.matrix_dims(b)?;
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(mismatch(format!(
                "matmul inner dimensions {k} vs {k2} (shapes {:?}{} x {:?}{})",
                self.shape(a),
                if ta { "ᵀ" } else { "" },
                self.shape(b),
                if tb { "ᵀ" } else { "" }
            )));
        }
        let mut out = vec![F::zero(); m * n];
        gemm(m, k, n, self.value(a), ta, self.value(b), tb, &mut out, F::zero());
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, ta, tb, m, k, n }, needs))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(format!("add shapes {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), needs))
    }

    /// Adds a bias vector along the last axis.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (_, cols) = self.rows_cols(x);
        if self.value(b).len() != cols {
            return Err(mismatch(format!("bias length {} vs width {cols}", self.value(b).len())));
        }
        let bv = self.value(b);
        let out = self
            .value(x)
            .chunks(cols.max(1))
            .flat_map(|row| row.iter().zip(bv).map(|(&v, &c)| v + c))
            .collect();
        let needs = self.needs(x) || self.needs(b);
        Ok(self.push(self.shape(x).to_vec(), out, Op::AddRowBias { x, b }, needs))
    }

    pub fn scale(&mut self, x: Var, s: F) -> Var {
        let out = self.value(x).iter().map(|&v| v * s).collect();
        let needs = self.needs(x);
        self.push(self.shape(x).to_vec(), out, Op::Scale { x, s }, needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| if v > F::zero() { v } else { F::zero() }).collect();
        let needs = self.needs(x);
        self.push(self.shape(x).to_vec(), out, Op::Relu(x), needs)
    }

    /// Columns `[start, start + cols)` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, cols: usize) -> Result<Var> {
        let (r, c) = self.matrix_dims(x)?;
        if start + cols > c {
            return Err(mismatch(format!("column slice {start}..{} of width {c}", start + cols)));
        }
        let v = self.value(x);
        let mut out = Vec::with_capacity(r * cols);
        for row in v.chunks(c) {
            out.extend_from_slice(&row[start..start + cols]);
        }
        let needs = self.needs(x);
        Ok(self.push(vec![r, cols], out, Op::SliceCols { x, start, cols }, needs))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.matrix_dims(parts[0])?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.matrix_dims(p)?;
            if r != rows {
                return Err(mismatch(format!("concat_cols row counts {rows} vs {r}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(vec![rows, total], out, Op::ConcatCols(parts.to_vec()), needs))
    }

    /// Stacks matrices with equal widths vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.matrix_dims(parts[0])?.1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.matrix_dims(p)?;
            if c != cols {
                return Err(mismatch(format!("concat_rows widths {cols} vs {c}")));
            }
            rows += r;
            out.extend_from_slice(self.value(p));
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(vec![rows, cols], out, Op::ConcatRows(parts.to_vec()), needs))
    }

    /// Rows `[start, start + rows)` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, rows: usize) -> Result<Var> {
        let (r, c) = self.matrix_dims(x)?;
        if start + rows > r {
            return Err(mismatch(format!("row slice {start}..{} of {r} rows", start + rows)));
        }
        let out = self.value(x)[start * c..(start + rows) * c].to_vec();
        let needs = self.needs(x);
        Ok(self.push(vec![rows, c], out, Op::SliceRows { x, start }, needs))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(mismatch(format!("cannot reshape {:?} to {shape:?}", self.shape(x))));
        }
        let value = Arc::clone(&self.nodes[x.0].value);
        let needs = self.needs(x);
        Ok(self.push_shared(shape.to_vec(), value, Op::Reshape(x), needs))
    }

    /// Max-shifted softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let (_, cols) = self.rows_cols(x);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(cols.max(1)) {
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut sum = F::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let needs = self.needs(x);
        self.push(self.shape(x).to_vec(), out, Op::Softmax(x), needs)
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let (_, cols) = self.rows_cols(x);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(cols.max(1)) {
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<F>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let needs = self.needs(x);
        self.push(self.shape(x).to_vec(), out, Op::LogSoftmax(x), needs)
    }

    /// Standardizes along the last axis, then applies `gamma * x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: F) -> Result<Var> {
        let (rows, d) = self.rows_cols(x);
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(mismatch(format!("layer_norm affine width vs {d}")));
        }
        let xv = self.value(x);
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut xhat = vec![F::zero(); rows * d];
        let mut inv_std = vec![F::zero(); rows];
        let mut out = vec![F::zero(); rows * d];
        let df = F::from_f64(d as f64);
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<F>() / df;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / df;
            let is = F::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            needs,
        ))
    }

    /// Convolution of `x: [B, Cin, H, W]` with `w: [Cout, Cin·k·k]` and bias `[Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        let (batch, in_channels, height, width) = match self.shape(x) {
            [a, b, c, d] => (*a, *b, *c, *d),
            s => return Err(mismatch(format!("conv2d input must be 4-D, found {s:?}"))),
        };
        let (out_channels, patch) = self.matrix_dims(w)?;
        let geom = ConvGeom {
            batch,
            in_channels,
            out_channels,
            height,
            width,
            kernel,
            stride,
            padding,
        };
        if patch != geom.patch() || self.value(b).len() != out_channels {
            return Err(mismatch(format!(
                "conv2d weight {:?} / bias {} for {in_channels} input channels, kernel {kernel}",
                self.shape(w),
                self.value(b).len()
            )));
        }
        if height + 2 * padding < kernel || width + 2 * padding < kernel || stride == 0 {
            return Err(mismatch(format!("conv2d input {height}x{width} too small for kernel {kernel}")));
        }
        let (oh, ow) = (geom.out_height(), geom.out_width());
        let spatial = oh * ow;
        let mut out = vec![F::zero(); batch * out_channels * spatial];
        let mut cols = vec![F::zero(); geom.patch() * spatial];
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(b);
        for n in 0..batch {
            im2col(&xv[n * in_channels * height * width..(n + 1) * in_channels * height * width], &geom, &mut cols);
            let dst = &mut out[n * out_channels * spatial..(n + 1) * out_channels * spatial];
            for (c, row) in dst.chunks_mut(spatial).enumerate() {
                row.fill(bv[c]);
            }
            gemm(out_channels, geom.patch(), spatial, wv, false, &cols, false, dst, F::one());
        }
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(vec![batch, out_channels, oh, ow], out, Op::Conv2d { x, w, b, geom }, needs))
    }

    /// Adaptive average pooling of `[B, C, H, W]` onto a `gh x gw` grid,
    /// emitted as tokens `[B·gh·gw, C]` in `(b, row, col)` order.
    pub fn pool_tokens(&mut self, x: Var, gh: usize, gw: usize) -> Result<Var> {
        let dims = match self.shape(x) {
            [a, b, c, d] => [*a, *b, *c, *d],
            s => return Err(mismatch(format!("pool_tokens input must be 4-D, found {s:?}"))),
        };
        let [batch, ch, h, w] = dims;
        if gh == 0 || gw == 0 || h == 0 || w == 0 {
            return Err(mismatch("pool_tokens needs a non-empty grid and input".to_string()));
        }
        let xv = self.value(x);
        let mut out = vec![F::zero(); batch * gh * gw * ch];
        for n in 0..batch {
            for i in 0..gh {
                let (y0, y1) = pool_window(i, gh, h);
                for j in 0..gw {
                    let (x0, x1) = pool_window(j, gw, w);
                    let inv = F::one() / F::from_f64(((y1 - y0) * (x1 - x0)) as f64);
                    let tok = (n * gh + i) * gw + j;
                    for c in 0..ch {
                        let base = (n * ch + c) * h * w;
                        let mut s = F::zero();
                        for yy in y0..y1 {
                            for xx in x0..x1 {
                                s += xv[base + yy * w + xx];
                            }
                        }
                        out[tok * ch + c] = s * inv;
                    }
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(vec![batch * gh * gw, ch], out, Op::PoolTokens { x, dims, grid: (gh, gw) }, needs))
    }

    /// Mean over rows: `[R, C] -> [1, C]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims(x)?;
        if r == 0 {
            return Err(Error::EmptyGraph);
        }
        let mut out = vec![F::zero(); c];
        for row in self.value(x).chunks(c) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let inv = F::one() / F::from_f64(r as f64);
        for o in &mut out {
            *o *= inv;
        }
        let needs = self.needs(x);
        Ok(self.push(vec![1, c], out, Op::MeanRows(x), needs))
    }

    /// Mean negative log-likelihood of `targets` under log-probabilities `x: [B, n]`.
    pub fn nll(&mut self, x: Var, targets: &[usize]) -> Result<Var> {
        let (b, n) = self.matrix_dims(x)?;
        if targets.len() != b || b == 0 {
            return Err(mismatch(format!("nll: {} targets for batch {b}", targets.len())));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= n) {
            return Err(mismatch(format!("nll: target {t} out of {n} classes")));
        }
        let xv = self.value(x);
        let total: F = targets.iter().enumerate().map(|(i, &t)| -xv[i * n + t]).sum();
        let loss = total / F::from_f64(b as f64);
        let needs = self.needs(x);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::Nll {
                x,
                targets: targets.to_vec(),
            },
            needs,
        ))
    }

    /// Appends the result of an externally defined operation.
    pub fn custom(&mut self, shape: Vec<usize>, value: Vec<F>, op: Box<dyn CustomOp<F>>) -> Var {
        let needs = op.inputs().iter().any(|&v| self.needs(v));
        self.push(shape, value, Op::Custom(op), needs)
    }

    /// Back-propagates from a scalar node, seeding its gradient with `seed`.
    pub fn backward_with(&self, root: Var, seed: F) -> Gradients<F> {
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        let n = self.nodes[root.0].value.len();
        grads[root.0] = Some(vec![seed; n]);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
        }
        Gradients { grads }
    }

    pub fn backward(&self, root: Var) -> Gradients<F> {
        self.backward_with(root, F::one())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<F>>], v: Var, g: Vec<F>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(&g) {
                    *a += *b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, idx: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, ta, tb, m, k, n } => {
                if self.needs(a) {
                    // C = op(A) op(B): dop(A) = G op(B)ᵀ
                    let mut da = vec![F::zero(); m * k];
                    if ta {
                        // dA = op(B) Gᵀ  [k, m]
                        gemm(k, n, m, self.value(b), tb, g, true, &mut da, F::zero());
                    } else {
                        gemm(m, n, k, g, false, self.value(b), !tb, &mut da, F::zero());
                    }
                    self.accumulate(grads, a, da);
                }
                if self.needs(b) {
                    let mut db = vec![F::zero(); k * n];
                    if tb {
                        // dB = Gᵀ op(A)  [n, k]
                        gemm(n, m, k, g, true, self.value(a), ta, &mut db, F::zero());
                    } else {
                        gemm(k, m, n, self.value(a), !ta, g, false, &mut db, F::zero());
                    }
                    self.accumulate(grads, b, db);
                }
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, g.to_vec());
                self.accumulate(grads, b, g.to_vec());
            }
            &Op::AddRowBias { x, b } => {
                self.accumulate(grads, x, g.to_vec());
                if self.needs(b) {
                    let cols = self.value(b).len();
                    let mut db = vec![F::zero(); cols];
                    for row in g.chunks(cols) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, b, db);
                }
            }
            &Op::Scale { x, s } => {
                self.accumulate(grads, x, g.iter().map(|&v| v * s).collect());
            }
            &Op::Relu(x) => {
                let xv = self.value(x);
                let dx = g
                    .iter()
                    .zip(xv)
                    .map(|(&gv, &v)| if v > F::zero() { gv } else { F::zero() })
                    .collect();
                self.accumulate(grads, x, dx);
            }
            &Op::SliceCols { x, start, cols } => {
                let (r, c) = (node.shape[0], self.shape(x)[1]);
                let mut dx = vec![F::zero(); r * c];
                for i in 0..r {
                    dx[i * c + start..i * c + start + cols].copy_from_slice(&g[i * cols..(i + 1) * cols]);
                }
                self.accumulate(grads, x, dx);
            }
            Op::ConcatCols(parts) => {
                let rows = node.shape[0];
                let total = node.shape[1];
                let mut off = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    if self.needs(p) {
                        let mut dp = Vec::with_capacity(rows * w);
                        for i in 0..rows {
                            dp.extend_from_slice(&g[i * total + off..i * total + off + w]);
                        }
                        self.accumulate(grads, p, dp);
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.needs(p) {
                        self.accumulate(grads, p, g[off..off + len].to_vec());
                    }
                    off += len;
                }
            }
            &Op::SliceRows { x, start } => {
                let c = node.shape[1];
                let mut dx = vec![F::zero(); self.value(x).len()];
                dx[start * c..start * c + g.len()].copy_from_slice(g);
                self.accumulate(grads, x, dx);
            }
            &Op::Reshape(x) => self.accumulate(grads, x, g.to_vec()),
            &Op::Softmax(x) => {
                let cols = *node.shape.last().unwrap();
                let y = &node.value;
                let mut dx = vec![F::zero(); g.len()];
                for ((dr, yr), gr) in dx.chunks_mut(cols).zip(y.chunks(cols)).zip(g.chunks(cols)) {
                    let dot: F = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..cols {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, x, dx);
            }
            &Op::LogSoftmax(x) => {
                let cols = *node.shape.last().unwrap();
                let y = &node.value;
                let mut dx = vec![F::zero(); g.len()];
                for ((dr, yr), gr) in dx.chunks_mut(cols).zip(y.chunks(cols)).zip(g.chunks(cols)) {
                    let sum: F = gr.iter().copied().sum();
                    for j in 0..cols {
                        dr[j] = gr[j] - yr[j].exp() * sum;
                    }
                }
                self.accumulate(grads, x, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = *node.shape.last().unwrap();
                let gv = self.value(*gamma);
                if self.needs(*gamma) || self.needs(*beta) {
                    let mut dg = vec![F::zero(); d];
                    let mut db = vec![F::zero(); d];
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * hr[j];
                            db[j] += gr[j];
                        }
                    }
                    self.accumulate(grads, *gamma, dg);
                    self.accumulate(grads, *beta, db);
                }
                if self.needs(*x) {
                    let df = F::from_f64(d as f64);
                    let mut dx = vec![F::zero(); g.len()];
                    for (r, ((dr, gr), hr)) in dx.chunks_mut(d).zip(g.chunks(d)).zip(xhat.chunks(d)).enumerate() {
                        let mut sum = F::zero();
                        let mut sum_h = F::zero();
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            sum += dh;
                            sum_h += dh * hr[j];
                        }
                        let scale = inv_std[r] / df;
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            dr[j] = scale * (df * dh - sum - hr[j] * sum_h);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            &Op::Conv2d { x, w, b, geom } => self.conv_backward(g, x, w, b, &geom, grads),
            &Op::PoolTokens { x, dims, grid } => {
                let [batch, ch, h, w] = dims;
                let (gh, gw) = grid;
                let mut dx = vec![F::zero(); batch * ch * h * w];
                for n in 0..batch {
                    for i in 0..gh {
                        let (y0, y1) = pool_window(i, gh, h);
                        for j in 0..gw {
                            let (x0, x1) = pool_window(j, gw, w);
                            let inv = F::one() / F::from_f64(((y1 - y0) * (x1 - x0)) as f64);
                            let tok = (n * gh + i) * gw + j;
                            for c in 0..ch {
                                let gval = g[tok * ch + c] * inv;
                                let base = (n * ch + c) * h * w;
                                for yy in y0..y1 {
                                    for xx in x0..x1 {
                                        dx[base + yy * w + xx] += gval;
                                    }
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, x, dx);
            }
            &Op::MeanRows(x) => {
                let (r, _) = self.rows_cols(x);
                let inv = F::one() / F::from_f64(r as f64);
                let row: Vec<F> = g.iter().map(|&v| v * inv).collect();
                let dx = (0..r).flat_map(|_| row.iter().copied()).collect();
                self.accumulate(grads, x, dx);
            }
            Op::Nll { x, targets } => {
                let n = self.shape(*x)[1];
                let mut dx = vec![F::zero(); self.value(*x).len()];
                let scale = -g[0] / F::from_f64(targets.len() as f64);
                for (i, &t) in targets.iter().enumerate() {
                    dx[i * n + t] = scale;
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Custom(op) => {
                let inputs = op.inputs().to_vec();
                let needs: Vec<bool> = inputs.iter().map(|&v| self.needs(v)).collect();
                let values = |v: Var| Arc::clone(&self.nodes[v.0].value);
                let out = op.backward(&values, g, &needs);
                for (v, dv) in inputs.into_iter().zip(out) {
                    if let Some(dv) = dv {
                        self.accumulate(grads, v, dv);
                    }
                }
            }
        }
    }

    fn conv_backward(&self, g: &[F], x: Var, w: Var, b: Var, geom: &ConvGeom, grads: &mut [Option<Vec<F>>]) {
        let spatial = geom.out_height() * geom.out_width();
        let per_in = geom.in_channels * geom.height * geom.width;
        let per_out = geom.out_channels * spatial;
        if self.needs(b) {
            let mut db = vec![F::zero(); geom.out_channels];
            for n in 0..geom.batch {
                for (c, row) in g[n * per_out..(n + 1) * per_out].chunks(spatial).enumerate() {
                    db[c] += row.iter().copied().sum::<F>();
                }
            }
            self.accumulate(grads, b, db);
        }
        let need_w = self.needs(w);
        let need_x = self.needs(x);
        if !need_w && !need_x {
            return;
        }
        let xv = self.value(x);
        let wv = self.value(w);
        let mut cols = vec![F::zero(); geom.patch() * spatial];
        let mut dw = if need_w {
            vec![F::zero(); geom.out_channels * geom.patch()]
        } else {
            Vec::new()
        };
        let mut dx = if need_x { vec![F::zero(); geom.batch * per_in] } else { Vec::new() };
        for n in 0..geom.batch {
            let gn = &g[n * per_out..(n + 1) * per_out];
            if need_w {
                im2col(&xv[n * per_in..(n + 1) * per_in], geom, &mut cols);
                gemm(geom.out_channels, spatial, geom.patch(), gn, false, &cols, true, &mut dw, F::one());
            }
            if need_x {
                gemm(geom.patch(), geom.out_channels, spatial, wv, true, gn, false, &mut cols, F::zero());
                col2im(&cols, geom, &mut dx[n * per_in..(n + 1) * per_in]);
            }
        }
        if need_w {
            self.accumulate(grads, w, dw);
        }
        if need_x {
            self.accumulate(grads, x, dx);
        }
    }
}

fn im2col<F: Real>(x: &[F], geom: &ConvGeom, cols: &mut [F]) {
    let (oh, ow) = (geom.out_height(), geom.out_width());
    let k = geom.kernel;
    for c in 0..geom.in_channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * geom.stride + ky) as isize - geom.padding as isize;
                    for ox in 0..ow {
                        let ix = (ox * geom.stride + kx) as isize - geom.padding as isize;
                        dst[oy * ow + ox] = if iy >= 0 && ix >= 0 && (iy as usize) < geom.height && (ix as usize) < geom.width {
                            x[(c * geom.height + iy as usize) * geom.width + ix as usize]
                        } else {
                            F::zero()
                        };
                    }
                }
            }
        }
    }
}

fn col2im<F: Real>(cols: &[F], geom: &ConvGeom, dx: &mut [F]) {
    let (oh, ow) = (geom.out_height(), geom.out_width());
    let k = geom.kernel;
    for c in 0..geom.in_channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * geom.stride + ky) as isize - geom.padding as isize;
                    if iy < 0 || iy as usize >= geom.height {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * geom.stride + kx) as isize - geom.padding as isize;
                        if ix >= 0 && (ix as usize) < geom.width {
                            dx[(c * geom.height + iy as usize) * geom.width + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients<F: Real> {
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<F>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}
