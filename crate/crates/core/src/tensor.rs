//! Dense row-major `f64` tensors and the forward primitives the transformer needs.
//!
//! Broadcasting is limited to the leading batch dimensions of [`matmul`]; every
//! elementwise primitive requires equal shapes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::InvalidArgument(format!(
                "shape {:?} holds {} elements but {} were supplied",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a 2-D tensor from nested rows. Panics on ragged input.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self {
            shape: vec![rows.len(), cols],
            data: rows.iter().flatten().copied().collect(),
        }
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Size of the last axis (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Number of rows when the tensor is viewed as `[-1, last_dim]`.
    pub fn n_rows(&self) -> usize {
        let d = self.last_dim();
        if d == 0 {
            0
        } else {
            self.data.len() / d
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| {
                assert!(i < d, "index {i} out of bounds for axis of size {d}");
                acc * d + i
            })
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let d = self.last_dim();
        &self.data[r * d..(r + 1) * d]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let d = self.last_dim();
        &mut self.data[r * d..(r + 1) * d]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        same_shape(op, self, other)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        same_shape("add_assign", self, other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, factor: f64) -> Self {
        self.map(|x| x * factor)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Largest elementwise absolute difference; `INFINITY` when shapes differ.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        if self.shape != other.shape {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&self) -> Self {
        let r = self.rank();
        assert!(r >= 2, "transpose_last needs rank >= 2");
        let (m, n) = (self.shape[r - 2], self.shape[r - 1]);
        let batch = self.data.len() / (m * n).max(1);
        let mut out = vec![0.0; self.data.len()];
        for b in 0..batch {
            let src = &self.data[b * m * n..(b + 1) * m * n];
            let dst = &mut out[b * m * n..(b + 1) * m * n];
            for i in 0..m {
                for j in 0..n {
                    dst[j * m + i] = src[i * n + j];
                }
            }
        }
        let mut shape = self.shape.clone();
        shape.swap(r - 2, r - 1);
        Self { shape, data: out }
    }
}

pub(crate) fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::Shape {
            op,
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    Ok(())
}

fn broadcast_batch(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Maps a flat index over the broadcast batch shape back to an operand's batch offset.
fn batch_offset(flat: usize, full: &[usize], own: &[usize]) -> usize {
    let mut rem = flat;
    let mut off = 0;
    let mut stride = 1;
    for (axis, &d) in full.iter().enumerate().rev() {
        let idx = rem % d;
        rem /= d;
        let k = axis as isize - (full.len() - own.len()) as isize;
        if k >= 0 {
            let od = own[k as usize];
            if od != 1 {
                off += idx * stride;
            }
            stride *= od;
        }
    }
    off
}

/// Batched matrix product `[.., m, k] · [.., k, n] -> [.., m, n]`.
///
/// Leading batch dimensions broadcast numpy-style; rank-1 operands are not accepted.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let err = || Error::Shape {
        op: "matmul",
        lhs: a.shape.clone(),
        rhs: b.shape.clone(),
    };
    if a.rank() < 2 || b.rank() < 2 {
        return Err(err());
    }
    let (ra, rb) = (a.rank(), b.rank());
    let (m, k) = (a.shape[ra - 2], a.shape[ra - 1]);
    let (k2, n) = (b.shape[rb - 2], b.shape[rb - 1]);
    if k != k2 {
        return Err(err());
    }
    let (ba, bb) = (&a.shape[..ra - 2], &b.shape[..rb - 2]);
    let batch_shape = broadcast_batch(ba, bb).ok_or_else(err)?;
    let batch: usize = batch_shape.iter().product();
    let mut out = vec![0.0; batch * m * n];
    for bi in 0..batch {
        let oa = batch_offset(bi, &batch_shape, ba) * m * k;
        let ob = batch_offset(bi, &batch_shape, bb) * k * n;
        let a_blk = &a.data[oa..oa + m * k];
        let b_blk = &b.data[ob..ob + k * n];
        let o_blk = &mut out[bi * m * n..(bi + 1) * m * n];
        for i in 0..m {
            let o_row = &mut o_blk[i * n..(i + 1) * n];
            for (p, &av) in a_blk[i * k..(i + 1) * k].iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                for (o, &bv) in o_row.iter_mut().zip(&b_blk[p * n..(p + 1) * n]) {
                    *o += av * bv;
                }
            }
        }
    }
    let mut shape = batch_shape;
    shape.extend([m, n]);
    Ok(Tensor { shape, data: out })
}

/// `x · Wᵀ + b` over the last axis of `x`, with `W` stored `[out, in]`.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    if w.rank() != 2 || x.last_dim() != w.shape[1] {
        return Err(Error::Shape {
            op: "linear",
            lhs: x.shape.clone(),
            rhs: w.shape.clone(),
        });
    }
    let (out_dim, in_dim) = (w.shape[0], w.shape[1]);
    if let Some(b) = b {
        if b.data.len() != out_dim {
            return Err(Error::Shape {
                op: "linear bias",
                lhs: w.shape.clone(),
                rhs: b.shape.clone(),
            });
        }
    }
    let rows = x.n_rows();
    let mut data = vec![0.0; rows * out_dim];
    for r in 0..rows {
        let xr = &x.data[r * in_dim..(r + 1) * in_dim];
        let yr = &mut data[r * out_dim..(r + 1) * out_dim];
        for (j, y) in yr.iter_mut().enumerate() {
            let wr = &w.data[j * in_dim..(j + 1) * in_dim];
            let mut acc = 0.0;
            for (a, c) in xr.iter().zip(wr) {
                acc += a * c;
            }
            *y = acc + b.map_or(0.0, |b| b.data[j]);
        }
    }
    let mut shape = x.shape.clone();
    *shape.last_mut().unwrap() = out_dim;
    Ok(Tensor { shape, data })
}

/// `g · W` over the last axis of `g`, with `W` stored `[out, in]`; the transpose action of [`linear`].
pub fn matmul_rows(g: &Tensor, w: &Tensor) -> Result<Tensor> {
    if w.rank() != 2 || g.last_dim() != w.shape[0] {
        return Err(Error::Shape {
            op: "matmul_rows",
            lhs: g.shape.clone(),
            rhs: w.shape.clone(),
        });
    }
    let (out_dim, in_dim) = (w.shape[0], w.shape[1]);
    let rows = g.n_rows();
    let mut data = vec![0.0; rows * in_dim];
    for r in 0..rows {
        let gr = &g.data[r * out_dim..(r + 1) * out_dim];
        let yr = &mut data[r * in_dim..(r + 1) * in_dim];
        for (j, &gv) in gr.iter().enumerate() {
            if gv == 0.0 {
                continue;
            }
            for (y, &wv) in yr.iter_mut().zip(&w.data[j * in_dim..(j + 1) * in_dim]) {
                *y += gv * wv;
            }
        }
    }
    let mut shape = g.shape.clone();
    *shape.last_mut().unwrap() = in_dim;
    Ok(Tensor { shape, data })
}

/// Softmax along `axis` of `x / temperature`, stabilized by max-subtraction.
pub fn softmax(x: &Tensor, axis: usize, temperature: f64) -> Result<Tensor> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "softmax temperature must be positive, got {temperature}"
        )));
    }
    if axis >= x.rank().max(1) {
        return Err(Error::InvalidArgument(format!(
            "softmax axis {axis} out of range for shape {:?}",
            x.shape
        )));
    }
    if x.rank() == 0 {
        return Ok(Tensor::scalar(1.0));
    }
    let n = x.shape[axis];
    let inner: usize = x.shape[axis + 1..].iter().product();
    let outer: usize = x.shape[..axis].iter().product();
    let mut out = vec![0.0; x.data.len()];
    let mut buf = vec![0.0; n];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * n + k) * inner + i;
            for (k, b) in buf.iter_mut().enumerate() {
                *b = x.data[idx(k)] / temperature;
            }
            softmax_in_place(&mut buf, None);
            for (k, b) in buf.iter().enumerate() {
                out[idx(k)] = *b;
            }
        }
    }
    Ok(Tensor {
        shape: x.shape.clone(),
        data: out,
    })
}

/// Row softmax on a slice; entries where `keep[k]` is false are excluded and set to 0.
pub(crate) fn softmax_in_place(row: &mut [f64], keep: Option<&[bool]>) {
    let kept = |k: usize| keep.map_or(true, |m| m[k]);
    let mut max = f64::NEG_INFINITY;
    for (k, &v) in row.iter().enumerate() {
        if kept(k) && v > max {
            max = v;
        }
    }
    if max == f64::NEG_INFINITY {
        row.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let mut total = 0.0;
    for (k, v) in row.iter_mut().enumerate() {
        if kept(k) {
            *v = (*v - max).exp();
            total += *v;
        } else {
            *v = 0.0;
        }
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Masked softmax along the last axis. `mask` (same length as `x`) marks entries that take part.
pub fn softmax_masked(x: &Tensor, temperature: f64, mask: Option<&[bool]>) -> Result<Tensor> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "softmax temperature must be positive, got {temperature}"
        )));
    }
    if let Some(m) = mask {
        if m.len() != x.len() {
            return Err(Error::InvalidArgument("softmax mask length mismatch".into()));
        }
    }
    let d = x.last_dim();
    let mut out = x.map(|v| v / temperature);
    for r in 0..x.n_rows() {
        let keep = mask.map(|m| &m[r * d..(r + 1) * d]);
        softmax_in_place(out.row_mut(r), keep);
    }
    Ok(out)
}

fn check_affine(op: &'static str, x: &Tensor, p: &Tensor) -> Result<()> {
    if p.len() != x.last_dim() {
        return Err(Error::Shape {
            op,
            lhs: x.shape.clone(),
            rhs: p.shape.clone(),
        });
    }
    Ok(())
}

/// `(x − E[x]) / √(Var[x] + eps) · γ + β` over the last axis (biased variance).
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    check_affine("layer_norm", x, gamma)?;
    check_affine("layer_norm", x, beta)?;
    let d = x.last_dim();
    let mut out = x.clone();
    for r in 0..x.n_rows() {
        let row = out.row_mut(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let g = (var + eps).sqrt();
        for (k, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) / g * gamma.data[k] + beta.data[k];
        }
    }
    Ok(out)
}

/// `x / √(mean(x²) + eps) · γ` over the last axis.
pub fn rms_norm(x: &Tensor, gamma: &Tensor, eps: f64) -> Result<Tensor> {
    check_affine("rms_norm", x, gamma)?;
    let d = x.last_dim();
    let mut out = x.clone();
    for r in 0..x.n_rows() {
        let row = out.row_mut(r);
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let g = (ms + eps).sqrt();
        for (k, v) in row.iter_mut().enumerate() {
            *v = *v / g * gamma.data[k];
        }
    }
    Ok(out)
}

pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn gelu_grad_scalar(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn silu_scalar(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn silu_grad_scalar(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Exact (erf-based) GELU.
pub fn gelu(x: &Tensor) -> Tensor {
    x.map(gelu_scalar)
}

pub fn silu(x: &Tensor) -> Tensor {
    x.map(silu_scalar)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_map(b, "add", |x, y| x + y)
}

pub fn hadamard(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_map(b, "hadamard", |x, y| x * y)
}
