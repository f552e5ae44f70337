//! Dense reverse-mode automatic differentiation.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its output
//! value and the ids of its inputs. [`Graph::backward`] walks the tape in
//! reverse and accumulates gradients additively, so calling it twice on the
//! same graph doubles every gradient.
//!
//! Tensors are row-major `f64`. Matrix ops view a tensor as
//! `rows x last_dim`, with a rank-1 tensor treated as a single row.
//! Reductions always sum in ascending index order, which keeps forward values
//! bitwise reproducible.

use rayon::prelude::*;

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape(format!("zero-sized dimension in {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len().max(1)], data: if data.is_empty() { vec![0.0] } else { data } }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// `(rows, cols)` viewing the last axis as columns.
    pub fn dims2(&self) -> (usize, usize) {
        let cols = *self.shape.last().expect("tensor has at least one dimension");
        (self.data.len() / cols, cols)
    }

    pub fn get2(&self, row: usize, col: usize) -> f64 {
        let (_, cols) = self.dims2();
        self.data[row * cols + col]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    MeanRows(Var),
    Sum(Var),
    Reshape(Var),
    SoftmaxRows(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu(Var),
    Relu(Var),
    PearsonLoss { pred: Var, grad: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Reverse-mode tape. Single owner; build a fresh graph per forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

/// Products above this many multiply-adds are split across threads by row.
const PARALLEL_MATMUL_WORK: usize = 1 << 18;

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, p: usize) {
    let row = |(i, out_row): (usize, &mut [f64])| {
        let a_row = &a[i * k..(i + 1) * k];
        for (kk, &a_ik) in a_row.iter().enumerate() {
            if a_ik == 0.0 {
                continue;
            }
            let b_row = &b[kk * p..(kk + 1) * p];
            for (o, &b_kj) in out_row.iter_mut().zip(b_row) {
                *o += a_ik * b_kj;
            }
        }
    };
    if m * k * p >= PARALLEL_MATMUL_WORK && m > 1 {
        out.par_chunks_mut(p).enumerate().for_each(row);
    } else {
        out.chunks_mut(p).enumerate().for_each(row);
    }
}

fn transpose_data(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Exact GELU, `x * Phi(x)`.
pub fn gelu_scalar(x: f64) -> f64 {
    x * normal_cdf(x)
}

fn gelu_grad(x: f64) -> f64 {
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    normal_cdf(x) + x * pdf
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Adds an input tensor to the tape.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of the last backward seed with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.value(v).dims2()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, p) = self.dims(b);
        if self.shape(b).len() != 2 || k != k2 {
            return Err(Error::shape(format!(
                "matmul {:?} x {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = vec![0.0; m * p];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, p);
        Ok(self.push(Tensor { shape: vec![m, p], data: out }, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let data = transpose_data(self.value(a).data(), r, c);
        self.push(Tensor { shape: vec![c, r], data }, Op::Transpose(a))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{what} {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let shape = self.shape(a).to_vec();
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        self.push(Tensor { shape, data }, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// Adds a length-`cols` vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, cols) = self.dims(a);
        if self.value(row).numel() != cols {
            return Err(Error::shape(format!(
                "row broadcast {:?} onto {:?}",
                self.shape(row),
                self.shape(a)
            )));
        }
        let bias = self.value(row).data().to_vec();
        let mut value = self.value(a).clone();
        for chunk in value.data.chunks_mut(cols) {
            for (v, b) in chunk.iter_mut().zip(&bias) {
                *v += b;
            }
        }
        Ok(self.push(value, Op::AddRow(a, row)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let mut value = self.value(a).clone();
        value.data.iter_mut().for_each(|v| *v *= factor);
        self.push(value, Op::Scale(a, factor))
    }

    /// Stacks inputs along the row axis; all must share the column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts
            .first()
            .map(|&p| self.dims(p).1)
            .ok_or_else(|| Error::shape("concat of nothing"))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.dims(p);
            if c != cols {
                return Err(Error::shape(format!("concat_rows width {c} vs {cols}")));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        Ok(self.push(Tensor { shape: vec![rows, cols], data }, Op::ConcatRows(parts.to_vec())))
    }

    /// Joins inputs side by side; all must share the row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|&p| self.dims(p).0)
            .ok_or_else(|| Error::shape("concat of nothing"))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims(p);
            if r != rows {
                return Err(Error::shape(format!("concat_cols height {r} vs {rows}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        Ok(self.push(Tensor { shape: vec![rows, total], data }, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.dims(a);
        if len == 0 || start + len > rows {
            return Err(Error::shape(format!("rows {start}..{} of {rows}", start + len)));
        }
        let data = self.value(a).data()[start * cols..(start + len) * cols].to_vec();
        Ok(self.push(Tensor { shape: vec![len, cols], data }, Op::SliceRows(a, start)))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.dims(a);
        if len == 0 || start + len > cols {
            return Err(Error::shape(format!("cols {start}..{} of {cols}", start + len)));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        Ok(self.push(Tensor { shape: vec![rows, len], data }, Op::SliceCols(a, start)))
    }

    /// Column means, `[rows x cols] -> [1 x cols]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (rows, cols) = self.dims(a);
        let src = self.value(a).data();
        let mut data = vec![0.0; cols];
        for r in 0..rows {
            for (acc, v) in data.iter_mut().zip(&src[r * cols..(r + 1) * cols]) {
                *acc += v;
            }
        }
        data.iter_mut().for_each(|v| *v /= rows as f64);
        self.push(Tensor { shape: vec![1, cols], data }, Op::MeanRows(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().fold(0.0, |acc, v| acc + v);
        self.push(Tensor::scalar(total), Op::Sum(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = Tensor::new(shape.to_vec(), self.value(a).data().to_vec())?;
        Ok(self.push(value, Op::Reshape(a)))
    }

    /// Softmax over the last axis, stabilized by subtracting the row max.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (_, cols) = self.dims(a);
        let mut value = self.value(a).clone();
        for row in value.data.chunks_mut(cols) {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        self.push(value, Op::SoftmaxRows(a))
    }

    /// Standardizes each row (biased variance) then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (rows, cols) = self.dims(x);
        if self.value(gain).numel() != cols || self.value(bias).numel() != cols {
            return Err(Error::shape(format!(
                "layer_norm affine {:?}/{:?} for width {cols}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; rows * cols];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let mean = row.iter().fold(0.0, |acc, v| acc + v) / cols as f64;
            let var = row.iter().fold(0.0, |acc, v| acc + (v - mean) * (v - mean)) / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            rstd[r] = inv;
            for c in 0..cols {
                let h = (row[c] - mean) * inv;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(Tensor { shape, data: out }, Op::LayerNorm { x, gain, bias, xhat, rstd }))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        value.data.iter_mut().for_each(|v| *v = gelu_scalar(*v));
        self.push(value, Op::Gelu(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        value.data.iter_mut().for_each(|v| *v = v.max(0.0));
        self.push(value, Op::Relu(a))
    }

    /// `1 - r` where `r` is the sample Pearson correlation between `pred` and
    /// the constant `target`. The result lies in `[0, 2]`.
    pub fn pearson_loss(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        let p = self.value(pred).data();
        let (loss, grad) = pearson_loss_and_grad(p, target)?;
        Ok(self.push(Tensor::scalar(loss), Op::PearsonLoss { pred, grad }))
    }

    /// Back-propagates from the scalar `output` with seed 1.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if self.value(output).numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar output, got {:?}",
                self.shape(output)
            )));
        }
        self.backward_with(output, Tensor::full(self.shape(output), 1.0))
    }

    /// Back-propagates an arbitrary upstream gradient from `output`.
    pub fn backward_with(&mut self, output: Var, seed: Tensor) -> Result<()> {
        if seed.shape() != self.shape(output) {
            return Err(Error::shape("backward seed shape"));
        }
        let mut pending: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        pending[output.0] = Some(seed);
        for idx in (0..=output.0).rev() {
            let Some(upstream) = pending[idx].take() else {
                continue;
            };
            self.propagate(idx, &upstream, &mut pending);
            match &mut self.grads[idx] {
                Some(existing) => existing.add_assign(&upstream),
                slot @ None => *slot = Some(upstream),
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, up: &Tensor, pending: &mut [Option<Tensor>]) {
        let mut send = |v: Var, g: Tensor| match &mut pending[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        };
        let node = &self.nodes[idx];
        let shaped = |v: Var, data: Vec<f64>| Tensor {
            shape: self.shape(v).to_vec(),
            data,
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let (_, p) = self.dims(*b);
                // dA = dC * B^T, dB = A^T * dC
                let bt = transpose_data(self.value(*b).data(), k, p);
                let mut da = vec![0.0; m * k];
                matmul_into(&up.data, &bt, &mut da, m, p, k);
                let at = transpose_data(self.value(*a).data(), m, k);
                let mut db = vec![0.0; k * p];
                matmul_into(&at, &up.data, &mut db, k, m, p);
                send(*a, shaped(*a, da));
                send(*b, shaped(*b, db));
            }
            Op::Transpose(a) => {
                let (r, c) = self.dims(*a);
                send(*a, shaped(*a, transpose_data(&up.data, c, r)));
            }
            Op::Add(a, b) => {
                send(*a, shaped(*a, up.data.clone()));
                send(*b, shaped(*b, up.data.clone()));
            }
            Op::Sub(a, b) => {
                send(*a, shaped(*a, up.data.clone()));
                send(*b, shaped(*b, up.data.iter().map(|v| -v).collect()));
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                send(*a, shaped(*a, up.data.iter().zip(bv).map(|(g, y)| g * y).collect()));
                send(*b, shaped(*b, up.data.iter().zip(av).map(|(g, x)| g * x).collect()));
            }
            Op::AddRow(a, row) => {
                let cols = self.value(*row).numel();
                let mut drow = vec![0.0; cols];
                for chunk in up.data.chunks(cols) {
                    for (acc, g) in drow.iter_mut().zip(chunk) {
                        *acc += g;
                    }
                }
                send(*a, shaped(*a, up.data.clone()));
                send(*row, shaped(*row, drow));
            }
            Op::Scale(a, factor) => {
                send(*a, shaped(*a, up.data.iter().map(|g| g * factor).collect()));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    send(p, shaped(p, up.data[offset..offset + n].to_vec()));
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.dims2().1;
                let mut col = 0;
                for &p in parts {
                    let (rows, w) = self.dims(p);
                    let mut data = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        data.extend_from_slice(&up.data[r * total + col..r * total + col + w]);
                    }
                    send(p, shaped(p, data));
                    col += w;
                }
            }
            Op::SliceRows(a, start) => {
                let (_, cols) = self.dims(*a);
                let mut data = vec![0.0; self.value(*a).numel()];
                data[start * cols..start * cols + up.data.len()].copy_from_slice(&up.data);
                send(*a, shaped(*a, data));
            }
            Op::SliceCols(a, start) => {
                let (rows, cols) = self.dims(*a);
                let len = up.data.len() / rows;
                let mut data = vec![0.0; rows * cols];
                for r in 0..rows {
                    data[r * cols + start..r * cols + start + len]
                        .copy_from_slice(&up.data[r * len..(r + 1) * len]);
                }
                send(*a, shaped(*a, data));
            }
            Op::MeanRows(a) => {
                let (rows, cols) = self.dims(*a);
                let mut data = Vec::with_capacity(rows * cols);
                for _ in 0..rows {
                    data.extend(up.data.iter().map(|g| g / rows as f64));
                }
                send(*a, shaped(*a, data));
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                send(*a, shaped(*a, vec![up.data[0]; n]));
            }
            Op::Reshape(a) => send(*a, shaped(*a, up.data.clone())),
            Op::SoftmaxRows(a) => {
                let cols = node.value.dims2().1;
                let mut data = vec![0.0; up.data.len()];
                for ((y, g), d) in node
                    .value
                    .data
                    .chunks(cols)
                    .zip(up.data.chunks(cols))
                    .zip(data.chunks_mut(cols))
                {
                    let dot = y.iter().zip(g).fold(0.0, |acc, (yi, gi)| acc + yi * gi);
                    for i in 0..cols {
                        d[i] = y[i] * (g[i] - dot);
                    }
                }
                send(*a, shaped(*a, data));
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let (rows, cols) = self.dims(*x);
                let g = self.value(*gain).data();
                let mut dx = vec![0.0; rows * cols];
                let mut dgain = vec![0.0; cols];
                let mut dbias = vec![0.0; cols];
                for r in 0..rows {
                    let up_row = &up.data[r * cols..(r + 1) * cols];
                    let h = &xhat[r * cols..(r + 1) * cols];
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for c in 0..cols {
                        let dh = up_row[c] * g[c];
                        mean_dh += dh;
                        mean_dh_h += dh * h[c];
                        dgain[c] += up_row[c] * h[c];
                        dbias[c] += up_row[c];
                    }
                    mean_dh /= cols as f64;
                    mean_dh_h /= cols as f64;
                    for c in 0..cols {
                        let dh = up_row[c] * g[c];
                        dx[r * cols + c] = rstd[r] * (dh - mean_dh - h[c] * mean_dh_h);
                    }
                }
                send(*x, shaped(*x, dx));
                send(*gain, shaped(*gain, dgain));
                send(*bias, shaped(*bias, dbias));
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                send(*a, shaped(*a, up.data.iter().zip(x).map(|(g, &v)| g * gelu_grad(v)).collect()));
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                send(
                    *a,
                    shaped(*a, up.data.iter().zip(x).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }).collect()),
                );
            }
            Op::PearsonLoss { pred, grad } => {
                send(*pred, shaped(*pred, grad.iter().map(|d| d * up.data[0]).collect()));
            }
        }
    }
}

/// Negative Pearson loss and its gradient with respect to `pred`.
pub fn pearson_loss_and_grad(pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    if pred.len() != target.len() || pred.len() < 2 {
        return Err(Error::shape(format!(
            "pearson loss over {} and {} samples",
            pred.len(),
            target.len()
        )));
    }
    let n = pred.len() as f64;
    let mean_p = pred.iter().fold(0.0, |acc, v| acc + v) / n;
    let mean_t = target.iter().fold(0.0, |acc, v| acc + v) / n;
    let a: Vec<f64> = pred.iter().map(|v| v - mean_p).collect();
    let b: Vec<f64> = target.iter().map(|v| v - mean_t).collect();
    let (mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(&b) {
        saa += x * x;
        sbb += y * y;
        sab += x * y;
    }
    let degenerate = |s: f64, v: &[f64]| {
        let scale = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        !(s.is_finite()) || s <= n * (1e-12 * scale).powi(2) || s == 0.0
    };
    if degenerate(saa, pred) {
        return Err(Error::degenerate("prediction has zero variance"));
    }
    if degenerate(sbb, target) {
        return Err(Error::degenerate("target has zero variance"));
    }
    let denom = (saa * sbb).sqrt();
    let r = sab / denom;
    // d r / d p_i = b_i / denom - r a_i / saa; the mean terms vanish.
    let grad = a
        .iter()
        .zip(&b)
        .map(|(ai, bi)| -(bi / denom - r * ai / saa))
        .collect();
    Ok((1.0 - r.clamp(-1.0, 1.0), grad))
}

/// Largest relative discrepancy between `analytic` and central differences of
/// `value` around `x`, using `|a - n| / max(1, |a|, |n|)` per coordinate.
pub fn compare_with_finite_differences<F>(mut value: F, x: &[f64], analytic: &[f64], h: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if x.len() != analytic.len() {
        return Err(Error::shape("gradient length mismatch"));
    }
    let mut probe = x.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let plus = value(&probe)?;
        probe[i] = x[i] - h;
        let minus = value(&probe)?;
        probe[i] = x[i];
        if !(plus.is_finite() && minus.is_finite()) {
            return Err(Error::NonFinite(format!("function value near coordinate {i}")));
        }
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[i];
        let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Checks the tape gradient of a scalar function `f` at `x` against central
/// differences with step `h`; returns the maximum relative error.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let input = g.leaf(x.clone());
    let out = f(&mut g, input)?;
    if !g.value(out).is_finite() {
        return Err(Error::NonFinite("function value".into()));
    }
    g.backward(out)?;
    let analytic = g
        .grad(input)
        .map(|t| t.data().to_vec())
        .unwrap_or_else(|| vec![0.0; x.numel()]);
    let shape = x.shape().to_vec();
    compare_with_finite_differences(
        |probe| {
            let mut g = Graph::new();
            let input = g.leaf(Tensor::new(shape.clone(), probe.to_vec())?);
            let out = f(&mut g, input)?;
            Ok(g.value(out).data()[0])
        },
        x.data(),
        &analytic,
        h,
    )
}
