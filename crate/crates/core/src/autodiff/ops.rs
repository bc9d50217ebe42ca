//! Forward and backward kernels for every [`OpKind`].

use super::{OpKind, Tensor};
use crate::error::{Error, Result};

pub(super) fn forward(op: &OpKind, inputs: &[&Tensor]) -> Result<Tensor> {
    let name = op.name();
    let arity = match op {
        OpKind::MatMul | OpKind::Add | OpKind::Mul | OpKind::Cosine => Some(2),
        OpKind::Concat | OpKind::Stack => None,
        _ => Some(1),
    };
    match arity {
        Some(n) if inputs.len() != n => {
            let shapes: Vec<&[usize]> = inputs.iter().map(|t| t.shape()).collect();
            return Err(Error::shape(name, &shapes));
        }
        None if inputs.is_empty() => return Err(Error::shape(name, &[])),
        _ => {}
    }

    match op {
        OpKind::MatMul => matmul(inputs[0], inputs[1]),
        OpKind::Add => {
            let (big, small, _) = broadcast_pair(name, inputs[0], inputs[1])?;
            let s = small.data();
            let data = big.data().iter().enumerate().map(|(i, x)| x + s[i % s.len()]).collect();
            Ok(Tensor::from_parts(big.shape().to_vec(), data))
        }
        OpKind::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape() == b.shape() {
                let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
                Ok(Tensor::from_parts(a.shape().to_vec(), data))
            } else if b.len() == 1 || a.len() == 1 {
                let (big, s) = if b.len() == 1 { (a, b.data()[0]) } else { (b, a.data()[0]) };
                Ok(Tensor::from_parts(big.shape().to_vec(), big.data().iter().map(|x| x * s).collect()))
            } else {
                Err(Error::shape(name, &[a.shape(), b.shape()]))
            }
        }
        OpKind::Tanh => Ok(map(inputs[0], f64::tanh)),
        OpKind::Sigmoid => Ok(map(inputs[0], sigmoid)),
        OpKind::Concat => concat(inputs),
        OpKind::Stack => {
            let len = inputs[0].len();
            if inputs.iter().any(|t| t.shape().len() != 1 || t.len() != len) {
                let shapes: Vec<&[usize]> = inputs.iter().map(|t| t.shape()).collect();
                return Err(Error::shape(name, &shapes));
            }
            let data = inputs.iter().flat_map(|t| t.data().iter().copied()).collect();
            Ok(Tensor::from_parts(vec![inputs.len(), len], data))
        }
        OpKind::Softmax => {
            let x = inputs[0];
            let cols = x.cols();
            let mut out = x.data().to_vec();
            for row in out.chunks_mut(cols) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    z += *v;
                }
                for v in row.iter_mut() {
                    *v /= z;
                }
            }
            Ok(Tensor::from_parts(x.shape().to_vec(), out))
        }
        OpKind::Log => {
            if inputs[0].data().iter().any(|&x| x <= 0.0) {
                return Err(Error::NonFinite { op: name });
            }
            Ok(map(inputs[0], f64::ln))
        }
        OpKind::ClampMin(floor) => Ok(map(inputs[0], |x| x.max(*floor))),
        OpKind::Sum => Ok(Tensor::scalar(inputs[0].data().iter().sum())),
        OpKind::Mean => {
            let x = inputs[0];
            Ok(Tensor::scalar(x.data().iter().sum::<f64>() / x.len() as f64))
        }
        OpKind::Scale(s) => Ok(map(inputs[0], |x| x * s)),
        OpKind::Slice { start, len } => {
            let x = inputs[0];
            let cols = x.cols();
            if *len == 0 || start + len > cols {
                return Err(Error::shape(name, &[x.shape(), &[*start, *len]]));
            }
            let data = x.data().chunks(cols).flat_map(|row| row[*start..start + len].iter().copied()).collect();
            let mut shape = x.shape().to_vec();
            *shape.last_mut().unwrap() = *len;
            Ok(Tensor::from_parts(shape, data))
        }
        OpKind::IndexSelect(indices) => {
            let x = inputs[0];
            let first = x.shape()[0];
            if indices.is_empty() || indices.iter().any(|&i| i >= first) {
                return Err(Error::shape(name, &[x.shape(), indices]));
            }
            let stride = x.len() / first;
            let mut data = Vec::with_capacity(indices.len() * stride);
            for &i in indices {
                data.extend_from_slice(&x.data()[i * stride..(i + 1) * stride]);
            }
            let mut shape = x.shape().to_vec();
            shape[0] = indices.len();
            Ok(Tensor::from_parts(shape, data))
        }
        OpKind::Reshape(shape) => {
            let x = inputs[0];
            if shape.is_empty() || shape.contains(&0) || shape.iter().product::<usize>() != x.len() {
                return Err(Error::shape(name, &[x.shape(), shape]));
            }
            Ok(Tensor::from_parts(shape.clone(), x.data().to_vec()))
        }
        OpKind::Cosine => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape().len() != 1 || a.shape() != b.shape() {
                return Err(Error::shape(name, &[a.shape(), b.shape()]));
            }
            let c = cosine(a.data(), b.data()).ok_or(Error::ZeroVector { op: name })?;
            Ok(Tensor::scalar(c))
        }
    }
}

/// Per-input gradient contributions; `None` where `wanted` is false.
pub(super) fn backward(
    op: &OpKind,
    inputs: &[&Tensor],
    out: &Tensor,
    grad: &[f64],
    wanted: &[bool],
) -> Vec<Option<Vec<f64>>> {
    let mut result: Vec<Option<Vec<f64>>> = vec![None; inputs.len()];
    match op {
        OpKind::MatMul => {
            let (da, db) = matmul_backward(inputs[0], inputs[1], grad, wanted[0], wanted[1]);
            result[0] = da;
            result[1] = db;
        }
        OpKind::Add => {
            let (a, b) = (inputs[0], inputs[1]);
            let a_is_big = a.len() >= b.len();
            let small_len = a.len().min(b.len());
            let small_grad = || {
                let mut g = vec![0.0; small_len];
                for (i, d) in grad.iter().enumerate() {
                    g[i % small_len] += d;
                }
                g
            };
            if wanted[0] {
                result[0] = Some(if a_is_big { grad.to_vec() } else { small_grad() });
            }
            if wanted[1] {
                result[1] = Some(if a_is_big { small_grad() } else { grad.to_vec() });
            }
        }
        OpKind::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape() == b.shape() {
                if wanted[0] {
                    result[0] = Some(grad.iter().zip(b.data()).map(|(g, y)| g * y).collect());
                }
                if wanted[1] {
                    result[1] = Some(grad.iter().zip(a.data()).map(|(g, x)| g * x).collect());
                }
            } else {
                // one side is a scalar
                let (big_idx, scalar_idx) = if b.len() == 1 { (0, 1) } else { (1, 0) };
                let big = inputs[big_idx];
                let s = inputs[scalar_idx].data()[0];
                if wanted[big_idx] {
                    result[big_idx] = Some(grad.iter().map(|g| g * s).collect());
                }
                if wanted[scalar_idx] {
                    result[scalar_idx] = Some(vec![dot(grad, big.data())]);
                }
            }
        }
        OpKind::Tanh => {
            result[0] = Some(grad.iter().zip(out.data()).map(|(g, y)| g * (1.0 - y * y)).collect());
        }
        OpKind::Sigmoid => {
            result[0] = Some(grad.iter().zip(out.data()).map(|(g, y)| g * y * (1.0 - y)).collect());
        }
        OpKind::Concat => {
            let out_cols = out.cols();
            let mut offset = 0;
            for (k, t) in inputs.iter().enumerate() {
                let cols = t.cols();
                if wanted[k] {
                    let g = grad
                        .chunks(out_cols)
                        .flat_map(|row| row[offset..offset + cols].iter().copied())
                        .collect();
                    result[k] = Some(g);
                }
                offset += cols;
            }
        }
        OpKind::Stack => {
            let len = inputs[0].len();
            for (k, chunk) in grad.chunks(len).enumerate() {
                if wanted[k] {
                    result[k] = Some(chunk.to_vec());
                }
            }
        }
        OpKind::Softmax => {
            let cols = out.cols();
            let mut g = vec![0.0; grad.len()];
            for ((gi, yi), dy) in g.chunks_mut(cols).zip(out.data().chunks(cols)).zip(grad.chunks(cols)) {
                let inner = dot(yi, dy);
                for j in 0..cols {
                    gi[j] = yi[j] * (dy[j] - inner);
                }
            }
            result[0] = Some(g);
        }
        OpKind::Log => {
            result[0] = Some(grad.iter().zip(inputs[0].data()).map(|(g, x)| g / x).collect());
        }
        OpKind::ClampMin(floor) => {
            let g = grad
                .iter()
                .zip(inputs[0].data())
                .map(|(g, x)| if *x >= *floor { *g } else { 0.0 })
                .collect();
            result[0] = Some(g);
        }
        OpKind::Sum => result[0] = Some(vec![grad[0]; inputs[0].len()]),
        OpKind::Mean => {
            let n = inputs[0].len();
            result[0] = Some(vec![grad[0] / n as f64; n]);
        }
        OpKind::Scale(s) => result[0] = Some(grad.iter().map(|g| g * s).collect()),
        OpKind::Slice { start, len } => {
            let cols = inputs[0].cols();
            let mut g = vec![0.0; inputs[0].len()];
            for (row, dy) in g.chunks_mut(cols).zip(grad.chunks(*len)) {
                row[*start..start + len].copy_from_slice(dy);
            }
            result[0] = Some(g);
        }
        OpKind::IndexSelect(indices) => {
            let x = inputs[0];
            let stride = x.len() / x.shape()[0];
            let mut g = vec![0.0; x.len()];
            for (k, &i) in indices.iter().enumerate() {
                for (dst, src) in g[i * stride..(i + 1) * stride].iter_mut().zip(&grad[k * stride..(k + 1) * stride]) {
                    *dst += src;
                }
            }
            result[0] = Some(g);
        }
        OpKind::Reshape(_) => result[0] = Some(grad.to_vec()),
        OpKind::Cosine => {
            let (a, b) = (inputs[0].data(), inputs[1].data());
            let (na, nb) = (norm(a), norm(b));
            let c = out.data()[0];
            let g = grad[0];
            if wanted[0] {
                result[0] = Some(a.iter().zip(b).map(|(x, y)| g * (y / (na * nb) - c * x / (na * na))).collect());
            }
            if wanted[1] {
                result[1] = Some(a.iter().zip(b).map(|(x, y)| g * (x / (na * nb) - c * y / (nb * nb))).collect());
            }
        }
    }
    for (slot, w) in result.iter_mut().zip(wanted) {
        if !w {
            *slot = None;
        }
    }
    result
}

fn map(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity clamped to `[-1, 1]`; `None` if either vector has zero norm.
///
/// The denominator is `sqrt(|a|^2 |b|^2)`, which makes `cosine(v, v)` exactly 1.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let (aa, bb) = (dot(a, a), dot(b, b));
    if aa == 0.0 || bb == 0.0 {
        return None;
    }
    Some((dot(a, b) / (aa * bb).sqrt()).clamp(-1.0, 1.0))
}

/// Returns `(larger, smaller, swapped)` when `smaller` broadcasts onto `larger`.
fn broadcast_pair<'a>(op: &'static str, a: &'a Tensor, b: &'a Tensor) -> Result<(&'a Tensor, &'a Tensor, bool)> {
    let fits = |big: &Tensor, small: &Tensor| {
        small.len() == 1 || big.shape() == small.shape() || big.shape().ends_with(small.shape())
    };
    if a.len() >= b.len() && fits(a, b) {
        Ok((a, b, false))
    } else if fits(b, a) {
        Ok((b, a, true))
    } else {
        Err(Error::shape(op, &[a.shape(), b.shape()]))
    }
}

// Views both operands as matrices: a vector `a` is one row, a vector `b` one column.
fn matmul_dims(a: &Tensor, b: &Tensor) -> Option<(usize, usize, usize, Vec<usize>)> {
    match (a.shape(), b.shape()) {
        ([m, k], [k2, n]) if k == k2 => Some((*m, *k, *n, vec![*m, *n])),
        ([m, k], [k2]) if k == k2 => Some((*m, *k, 1, vec![*m])),
        ([k], [k2, n]) if k == k2 => Some((1, *k, *n, vec![*n])),
        _ => None,
    }
}

fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k, n, shape) = matmul_dims(a, b).ok_or_else(|| Error::shape("matmul", &[a.shape(), b.shape()]))?;
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    if n == 1 {
        for (i, o) in out.iter_mut().enumerate() {
            *o = dot(&ad[i * k..(i + 1) * k], bd);
        }
    } else {
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = ad[i * k + p];
                if x == 0.0 {
                    continue;
                }
                for (o, y) in orow.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                    *o += x * y;
                }
            }
        }
    }
    Ok(Tensor::from_parts(shape, out))
}

fn matmul_backward(a: &Tensor, b: &Tensor, grad: &[f64], want_a: bool, want_b: bool) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (m, k, n, _) = matmul_dims(a, b).expect("validated in forward");
    let (ad, bd) = (a.data(), b.data());
    let da = want_a.then(|| {
        let mut da = vec![0.0; m * k];
        if n == 1 {
            for i in 0..m {
                let g = grad[i];
                for (d, y) in da[i * k..(i + 1) * k].iter_mut().zip(bd) {
                    *d = g * y;
                }
            }
        } else {
            for i in 0..m {
                let grow = &grad[i * n..(i + 1) * n];
                for p in 0..k {
                    da[i * k + p] = dot(grow, &bd[p * n..(p + 1) * n]);
                }
            }
        }
        da
    });
    let db = want_b.then(|| {
        let mut db = vec![0.0; k * n];
        for i in 0..m {
            let grow = &grad[i * n..(i + 1) * n];
            for p in 0..k {
                let x = ad[i * k + p];
                if x == 0.0 {
                    continue;
                }
                for (d, g) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                    *d += x * g;
                }
            }
        }
        db
    });
    (da, db)
}

fn concat(inputs: &[&Tensor]) -> Result<Tensor> {
    let first = inputs[0];
    let rank = first.shape().len();
    let rows = first.rows();
    let consistent = inputs
        .iter()
        .all(|t| t.shape().len() == rank && t.shape()[..rank - 1] == first.shape()[..rank - 1]);
    if !consistent {
        let shapes: Vec<&[usize]> = inputs.iter().map(|t| t.shape()).collect();
        return Err(Error::shape("concat", &shapes));
    }
    let total: usize = inputs.iter().map(|t| t.cols()).sum();
    let mut data = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for t in inputs {
            let c = t.cols();
            data.extend_from_slice(&t.data()[r * c..(r + 1) * c]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[rank - 1] = total;
    Ok(Tensor::from_parts(shape, data))
}
