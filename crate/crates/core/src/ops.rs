//! Forward kernels on plain tensors.
//!
//! These are pure functions, safe to call concurrently on disjoint inputs.
//! The autodiff graph in [`crate::autograd`] records calls to them and owns
//! the matching backward rules.

use crate::tensor::{Result, Tensor, TensorError};

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

/// Splits `shape` around `axis` into `(outer, extent, inner)` block sizes.
pub(crate) fn axis_blocks(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(TensorError::Axis {
            axis,
            rank: shape.len(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// `out[m,n] += a[m,k] · b[k,n]`, accumulating over `k` in ascending order.
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,k] += a[m,n] · b[k,n]ᵀ`.
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            let dot: f64 = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
            out[i * k + p] += dot;
        }
    }
}

/// `out[k,n] += a[m,k]ᵀ · b[m,n]`.
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// Matrix dimensions of a (possibly batched) product.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct MatmulDims {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    /// Whether the right operand is a single matrix shared by every batch.
    pub shared_rhs: bool,
}

pub(crate) fn matmul_dims(a: &Tensor, b: &Tensor) -> Result<MatmulDims> {
    let err = || shape_err("matmul", a, b);
    let (batch, m, k) = match *a.shape() {
        [m, k] => (None, m, k),
        [bt, m, k] => (Some(bt), m, k),
        _ => return Err(err()),
    };
    let (b_batch, k2, n) = match *b.shape() {
        [k2, n] => (None, k2, n),
        [bt, k2, n] => (Some(bt), k2, n),
        _ => return Err(err()),
    };
    if k != k2 {
        return Err(err());
    }
    match (batch, b_batch) {
        (None, None) => Ok(MatmulDims { batch: 1, m, k, n, shared_rhs: true }),
        (Some(bt), None) => Ok(MatmulDims { batch: bt, m, k, n, shared_rhs: true }),
        (Some(x), Some(y)) if x == y => Ok(MatmulDims { batch: x, m, k, n, shared_rhs: false }),
        _ => Err(err()),
    }
}

/// Matrix product of rank-2 or rank-3 operands; a rank-2 right operand is
/// broadcast over the leading batch dimension of a rank-3 left operand.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let d = matmul_dims(a, b)?;
    let mut out = vec![0.0; d.batch * d.m * d.n];
    for bi in 0..d.batch {
        let a_blk = &a.data()[bi * d.m * d.k..(bi + 1) * d.m * d.k];
        let b_blk = if d.shared_rhs {
            b.data()
        } else {
            &b.data()[bi * d.k * d.n..(bi + 1) * d.k * d.n]
        };
        gemm_nn(a_blk, b_blk, &mut out[bi * d.m * d.n..(bi + 1) * d.m * d.n], d.m, d.k, d.n);
    }
    let shape = if a.rank() == 3 {
        vec![d.batch, d.m, d.n]
    } else {
        vec![d.m, d.n]
    };
    Tensor::new(shape, out)
}

/// Swaps the last two axes.
pub fn transpose(x: &Tensor) -> Result<Tensor> {
    let (batch, rows, cols) = match *x.shape() {
        [r, c] => (1, r, c),
        [b, r, c] => (b, r, c),
        _ => {
            return Err(TensorError::Invalid(format!(
                "transpose needs rank 2 or 3, got {:?}",
                x.shape()
            )))
        }
    };
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for b in 0..batch {
        let off = b * rows * cols;
        for r in 0..rows {
            for c in 0..cols {
                out[off + c * rows + r] = src[off + r * cols + c];
            }
        }
    }
    let mut shape = x.shape().to_vec();
    let rank = shape.len();
    shape.swap(rank - 2, rank - 1);
    Tensor::new(shape, out)
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, a, b));
    }
    Ok(())
}

fn zip_with(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    same_shape(op, a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with("add", a, b, |x, y| x + y)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with("sub", a, b, |x, y| x - y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with("mul", a, b, |x, y| x * y)
}

fn row_width(op: &'static str, x: &Tensor, row: &Tensor) -> Result<usize> {
    let width = *x.shape().last().unwrap();
    if row.numel() != width || row.shape().iter().rev().skip(1).any(|&d| d != 1) {
        return Err(shape_err(op, x, row));
    }
    Ok(width)
}

fn row_broadcast(op: &'static str, x: &Tensor, row: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    let width = row_width(op, x, row)?;
    let r = row.data();
    let data = x
        .data()
        .chunks_exact(width)
        .flat_map(|chunk| chunk.iter().zip(r).map(|(&v, &w)| f(v, w)))
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Adds a vector to every row (last-axis broadcast).
pub fn add_row(x: &Tensor, row: &Tensor) -> Result<Tensor> {
    row_broadcast("add_row", x, row, |v, w| v + w)
}

/// Multiplies every row elementwise by a vector (last-axis broadcast).
pub fn mul_row(x: &Tensor, row: &Tensor) -> Result<Tensor> {
    row_broadcast("mul_row", x, row, |v, w| v * w)
}

pub fn scale(x: &Tensor, factor: f64) -> Tensor {
    let data = x.data().iter().map(|v| v * factor).collect();
    Tensor::new(x.shape().to_vec(), data).unwrap()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub(crate) fn gelu_derivative(x: f64) -> f64 {
    let inner = GELU_C * (x + GELU_A * x * x * x);
    let t = inner.tanh();
    let d_inner = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
}

pub fn gelu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| gelu_scalar(v)).collect();
    Tensor::new(x.shape().to_vec(), data).unwrap()
}

/// Softmax along `axis`, with the per-slice maximum subtracted first.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, len, inner) = axis_blocks(x.shape(), axis)?;
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let max = (0..len).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..len {
                let e = (src[at(j)] - max).exp();
                out[at(j)] = e;
                sum += e;
            }
            for j in 0..len {
                out[at(j)] /= sum;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Per-row normalization statistics kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct NormCache {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

/// Layer normalization over the last axis with population variance.
///
/// A row whose `variance + eps` is zero normalizes to zeros, so the output
/// row is exactly `beta`.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    layer_norm_cached(x, gamma, beta, eps).map(|(t, _)| t)
}

pub(crate) fn layer_norm_cached(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, NormCache)> {
    let width = row_width("layer_norm", x, gamma)?;
    row_width("layer_norm", x, beta)?;
    let rows = x.numel() / width;
    let mut out = vec![0.0; x.numel()];
    let mut xhat = vec![0.0; x.numel()];
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let row = &x.data()[r * width..(r + 1) * width];
        let mean = row.iter().sum::<f64>() / width as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
        let denom = var + eps;
        let inv = if denom > 0.0 { 1.0 / denom.sqrt() } else { 0.0 };
        inv_std[r] = inv;
        for c in 0..width {
            let h = (row[c] - mean) * inv;
            xhat[r * width + c] = h;
            out[r * width + c] = h * gamma.data()[c] + beta.data()[c];
        }
    }
    Ok((Tensor::new(x.shape().to_vec(), out)?, NormCache { xhat, inv_std }))
}

/// Concatenates tensors along `axis`; all other extents must agree.
pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| TensorError::Invalid("concat of zero tensors".into()))?;
    let (outer, _, inner) = axis_blocks(first.shape(), axis)?;
    let mut total = 0;
    for p in parts {
        let compatible = p.rank() == first.rank()
            && p.shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !compatible {
            return Err(shape_err("concat", first, p));
        }
        total += p.shape()[axis];
    }
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let blk = p.shape()[axis] * inner;
            out.extend_from_slice(&p.data()[o * blk..(o + 1) * blk]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    Tensor::new(shape, out)
}

/// Contiguous range `[start, start + len)` along `axis`.
pub fn slice(x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    let (outer, extent, inner) = axis_blocks(x.shape(), axis)?;
    if len == 0 || start + len > extent {
        return Err(TensorError::Invalid(format!(
            "slice [{start}, {}) outside extent {extent} on axis {axis}",
            start + len
        )));
    }
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = o * extent * inner;
        out.extend_from_slice(&x.data()[base + start * inner..base + (start + len) * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    Tensor::new(shape, out)
}

/// Splits along `axis` into consecutive pieces of the given extents.
pub fn split(x: &Tensor, axis: usize, sizes: &[usize]) -> Result<Vec<Tensor>> {
    let (_, extent, _) = axis_blocks(x.shape(), axis)?;
    if sizes.iter().sum::<usize>() != extent {
        return Err(TensorError::Invalid(format!(
            "split sizes {sizes:?} do not cover extent {extent}"
        )));
    }
    let mut start = 0;
    sizes
        .iter()
        .map(|&len| {
            let piece = slice(x, axis, start, len);
            start += len;
            piece
        })
        .collect()
}

pub fn mean(x: &Tensor) -> Tensor {
    Tensor::scalar(x.data().iter().sum::<f64>() / x.numel() as f64)
}

pub fn flatten(x: &Tensor) -> Tensor {
    x.clone().reshape(vec![x.numel()]).unwrap()
}

/// Numerically stable mean binary cross-entropy on raw logits.
pub fn bce_with_logits(logits: &[f64], labels: &[f64]) -> Result<f64> {
    if logits.len() != labels.len() || logits.is_empty() {
        return Err(TensorError::Invalid(format!(
            "bce needs matching non-empty logits/labels, got {} and {}",
            logits.len(),
            labels.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
        return Err(TensorError::Invalid(format!("bce label {bad} is not 0 or 1")));
    }
    let total: f64 = logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
        .sum();
    Ok(total / logits.len() as f64)
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
