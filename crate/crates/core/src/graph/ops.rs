//! Slice-level numerics shared by standalone nodes and fused epilogues.

use crate::error::{Error, Result};
use crate::kernels::gelu;
use crate::quantizer::{dequantize_scalar, quantize_scalar};
use crate::tensor::QuantParams;

/// Resolves a reshape target (`0` copies the input extent, one `-1` is inferred).
pub(crate) fn reshape_target(input: &[usize], spec: &[i64]) -> Result<Vec<usize>> {
    let total: usize = input.iter().product();
    let mut out = Vec::with_capacity(spec.len());
    let mut infer = None;
    for (i, &d) in spec.iter().enumerate() {
        match d {
            0 => out.push(*input.get(i).ok_or_else(|| {
                Error::Shape(format!("reshape copies axis {i} of rank-{} input", input.len()))
            })?),
            -1 if infer.is_none() => {
                infer = Some(i);
                out.push(1);
            }
            d if d > 0 => out.push(d as usize),
            _ => return Err(Error::Shape(format!("bad reshape target {spec:?}"))),
        }
    }
    let known: usize = out.iter().product();
    if let Some(i) = infer {
        if known == 0 || total % known != 0 {
            return Err(Error::Shape(format!("cannot infer reshape {spec:?} for {input:?}")));
        }
        out[i] = total / known;
    }
    if out.iter().product::<usize>() != total {
        return Err(Error::Shape(format!("cannot reshape {input:?} into {spec:?}")));
    }
    Ok(out)
}

pub(crate) fn transposed_shape(shape: &[usize], perm: &[usize]) -> Result<Vec<usize>> {
    let mut seen = vec![false; shape.len()];
    if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::Shape(format!("permutation {perm:?} invalid for rank {}", shape.len())));
    }
    Ok(perm.iter().map(|&p| shape[p]).collect())
}

/// `dst[out_index] = src[in_index]` with `out_index[i] = in_index[perm[i]]`.
pub(crate) fn transpose<T: Copy>(src: &[T], shape: &[usize], perm: &[usize], dst: &mut [T]) {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    // input stride walked by each output axis
    let walk: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut idx = vec![0usize; rank];
    let mut src_off = 0usize;
    for d in dst.iter_mut() {
        *d = src[src_off];
        for axis in (0..rank).rev() {
            idx[axis] += 1;
            src_off += walk[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            src_off -= walk[axis] * out_shape[axis];
            idx[axis] = 0;
        }
    }
}

/// 2-D transpose of a `rows x cols` matrix.
pub(crate) fn transpose2<T: Copy>(src: &[T], rows: usize, cols: usize, dst: &mut [T]) {
    for r in 0..rows {
        for c in 0..cols {
            dst[c * rows + r] = src[r * cols + c];
        }
    }
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut lanes = [0.0f32; 8];
    let chunks = a.len() / 8;
    for i in 0..chunks {
        for l in 0..8 {
            lanes[l] += a[i * 8 + l] * b[i * 8 + l];
        }
    }
    let mut tail = 0.0f32;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    lanes.iter().sum::<f32>() + tail
}

/// `y[r][m] = sum_k x[r][k] * w[m][k]`.
pub(crate) fn inner_product_f32(x: &[f32], w: &[f32], k: usize, m: usize, y: &mut [f32]) {
    for (xr, yr) in x.chunks_exact(k).zip(y.chunks_exact_mut(m)) {
        for (j, out) in yr.iter_mut().enumerate() {
            *out = dot(xr, &w[j * k..(j + 1) * k]);
        }
    }
}

/// Batched `[batch, m, k] x [batch, k, n]`.
pub(crate) fn matmul_f32(a: &[f32], b: &[f32], batch: usize, m: usize, k: usize, n: usize, y: &mut [f32]) {
    y.fill(0.0);
    for bi in 0..batch {
        let a = &a[bi * m * k..(bi + 1) * m * k];
        let b = &b[bi * k * n..(bi + 1) * k * n];
        let y = &mut y[bi * m * n..(bi + 1) * m * n];
        for i in 0..m {
            let yr = &mut y[i * n..(i + 1) * n];
            for kk in 0..k {
                let av = a[i * k + kk];
                for (o, &bv) in yr.iter_mut().zip(&b[kk * n..(kk + 1) * n]) {
                    *o += av * bv;
                }
            }
        }
    }
}

/// Batched integer matmul with zero-point correction:
/// `y = sum_k (a - zp_a) * (b - zp_b)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul_quant<A: Copy + Into<i32>, B: Copy + Into<i32>>(
    a: &[A],
    zp_a: i32,
    b: &[B],
    zp_b: i32,
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    y: &mut [i32],
) {
    y.fill(0);
    let mut brow = vec![0i32; n];
    for bi in 0..batch {
        let a = &a[bi * m * k..(bi + 1) * m * k];
        let b = &b[bi * k * n..(bi + 1) * k * n];
        let y = &mut y[bi * m * n..(bi + 1) * m * n];
        for kk in 0..k {
            for (o, &v) in brow.iter_mut().zip(&b[kk * n..(kk + 1) * n]) {
                *o = v.into() - zp_b;
            }
            for i in 0..m {
                let av = a[i * k + kk].into() - zp_a;
                if av == 0 {
                    continue;
                }
                for (o, &bv) in y[i * n..(i + 1) * n].iter_mut().zip(&brow) {
                    *o += av * bv;
                }
            }
        }
    }
}

pub(crate) fn bias_add_inplace(data: &mut [f32], bias: &[f32]) {
    for row in data.chunks_exact_mut(bias.len()) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

pub(crate) fn gelu_inplace(data: &mut [f32]) {
    data.iter_mut().for_each(|v| *v = gelu(*v));
}

pub(crate) fn relu_inplace(data: &mut [f32]) {
    data.iter_mut().for_each(|v| *v = v.max(0.0));
}

pub(crate) fn layer_norm_inplace(data: &mut [f32], gamma: &[f32], beta: &[f32], eps: f32) {
    let h = gamma.len();
    for row in data.chunks_exact_mut(h) {
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / h as f64;
        let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / h as f64;
        let inv = 1.0 / (var + eps as f64).sqrt();
        for ((v, g), b) in row.iter_mut().zip(gamma).zip(beta) {
            *v = ((*v as f64 - mean) * inv) as f32 * g + b;
        }
    }
}

pub(crate) fn softmax_inplace(data: &mut [f32], last: usize) {
    for row in data.chunks_exact_mut(last) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f64;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v as f64;
        }
        let inv = (1.0 / sum) as f32;
        row.iter_mut().for_each(|v| *v *= inv);
    }
}

pub(crate) fn add(a: &[f32], b: &[f32], out: &mut [f32]) {
    for ((o, x), y) in out.iter_mut().zip(a).zip(b) {
        *o = x + y;
    }
}

pub(crate) fn quantize_f32<Q: crate::quantizer::QuantInt>(src: &[f32], qp: &QuantParams, dst: &mut [Q]) {
    let (lo, hi) = qp.target().range();
    let (scale, zp) = (qp.scale(0), qp.zero_point());
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = Q::from_clamped(quantize_scalar(s as f64, scale, zp, lo, hi));
    }
}

pub(crate) fn dequantize_q<Q: crate::quantizer::QuantInt>(src: &[Q], qp: &QuantParams, dst: &mut [f32]) {
    let (scale, zp) = (qp.scale(0), qp.zero_point());
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = dequantize_scalar(s.widen(), scale, zp) as f32;
    }
}

/// Converts accumulators to f32 in place; `scales` has one entry or one per
/// element of the last axis.
pub(crate) fn dequantize_acc_inplace(words: &mut [i32], scales: &[f32]) {
    if scales.len() == 1 {
        let s = scales[0];
        words.iter_mut().for_each(|w| *w = (*w as f32 * s).to_bits() as i32);
    } else {
        for row in words.chunks_exact_mut(scales.len()) {
            for (w, &s) in row.iter_mut().zip(scales) {
                *w = (*w as f32 * s).to_bits() as i32;
            }
        }
    }
}
