//! Forward kernels and their analytic backward passes.
//!
//! Every public forward kernel that performs a matrix product reports its
//! multiply-accumulate count to a thread-local counter (see [`count_macs`]);
//! backward kernels do not.

use std::cell::Cell;

use super::{Precision, Tensor};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

thread_local! {
    static MACS: Cell<Option<u64>> = const { Cell::new(None) };
}

fn record_macs(n: usize) {
    MACS.with(|c| {
        if let Some(total) = c.get() {
            c.set(Some(total + n as u64));
        }
    });
}

/// Run `f` and return its result with the number of multiply-accumulates
/// performed by forward kernels on this thread while it ran.
pub fn count_macs<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let outer = MACS.with(|c| c.replace(Some(0)));
    let out = f();
    let inner = MACS.with(|c| c.get()).unwrap_or(0);
    MACS.with(|c| c.set(outer.map(|o| o + inner)));
    (out, inner)
}

// c[m×r] = a[m×k]·b[k×r]
fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, r: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * r];
    for i in 0..m {
        let row = &mut c[i * r..(i + 1) * r];
        for l in 0..k {
            let av = a[i * k + l];
            if av == 0.0 {
                continue;
            }
            let brow = &b[l * r..(l + 1) * r];
            for (cv, bv) in row.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

// c[k×r] = aᵀ·b with a[m×k], b[m×r]
fn gemm_tn(a: &[f64], b: &[f64], m: usize, k: usize, r: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * r];
    for i in 0..m {
        let brow = &b[i * r..(i + 1) * r];
        for l in 0..k {
            let av = a[i * k + l];
            if av == 0.0 {
                continue;
            }
            let row = &mut c[l * r..(l + 1) * r];
            for (cv, bv) in row.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

// c[m×k] = a·bᵀ with a[m×r], b[k×r]
fn gemm_nt(a: &[f64], b: &[f64], m: usize, r: usize, k: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * r..(i + 1) * r];
        for l in 0..k {
            let brow = &b[l * r..(l + 1) * r];
            c[i * k + l] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    c
}

fn require_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::invalid(
            op,
            format!("expected rank {rank}, got shape {:?}", t.shape()),
        ));
    }
    Ok(())
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    require_rank("matmul", a, 2)?;
    require_rank("matmul", b, 2)?;
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, r) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    record_macs(m * k * r);
    Ok(Tensor::from_parts(
        vec![m, r],
        gemm(a.data(), b.data(), m, k, r),
        a.precision().join(b.precision()),
    ))
}

/// Returns `(dA, dB) = (dC·Bᵀ, Aᵀ·dC)`.
pub fn matmul_backward(a: &Tensor, b: &Tensor, dc: &Tensor) -> (Tensor, Tensor) {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let r = b.shape()[1];
    let da = gemm_nt(dc.data(), b.data(), m, r, k);
    let db = gemm_tn(a.data(), dc.data(), m, k, r);
    (
        Tensor::from_parts(vec![m, k], da, Precision::F64),
        Tensor::from_parts(vec![k, r], db, Precision::F64),
    )
}

/// `x·W + b` over the last axis of `x`, broadcast across leading axes.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    require_rank("linear", w, 2)?;
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    if x.last_dim() != din {
        return Err(Error::shape("linear", x.shape(), w.shape()));
    }
    if let Some(b) = b {
        if b.shape() != [dout] {
            return Err(Error::shape("linear bias", w.shape(), b.shape()));
        }
    }
    let rows = x.leading();
    record_macs(rows * din * dout);
    let mut y = gemm(x.data(), w.data(), rows, din, dout);
    let mut precision = x.precision().join(w.precision());
    if let Some(b) = b {
        precision = precision.join(b.precision());
        for row in y.chunks_mut(dout) {
            for (v, bv) in row.iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = dout;
    Ok(Tensor::from_parts(shape, y, precision))
}

pub struct LinearGrads {
    pub dx: Tensor,
    pub dw: Tensor,
    pub db: Option<Tensor>,
}

pub fn linear_backward(x: &Tensor, w: &Tensor, with_bias: bool, dy: &Tensor) -> LinearGrads {
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    let rows = x.leading();
    let dx = gemm_nt(dy.data(), w.data(), rows, dout, din);
    let dw = gemm_tn(x.data(), dy.data(), rows, din, dout);
    let db = with_bias.then(|| {
        let mut acc = vec![0.0; dout];
        for row in dy.data().chunks(dout) {
            for (a, v) in acc.iter_mut().zip(row) {
                *a += v;
            }
        }
        Tensor::from_parts(vec![dout], acc, Precision::F64)
    });
    LinearGrads {
        dx: Tensor::from_parts(x.shape().to_vec(), dx, Precision::F64),
        dw: Tensor::from_parts(vec![din, dout], dw, Precision::F64),
        db,
    }
}

pub fn softmax_lastdim(x: &Tensor) -> Tensor {
    let d = x.last_dim();
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(d) {
        softmax_in_place(row);
    }
    Tensor::from_parts(x.shape().to_vec(), out, x.precision())
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Given the softmax output `y` and upstream `dy`, returns `dx`.
pub fn softmax_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let d = y.last_dim();
    let mut dx = vec![0.0; y.len()];
    for ((out, yr), dyr) in dx
        .chunks_mut(d)
        .zip(y.data().chunks(d))
        .zip(dy.data().chunks(d))
    {
        softmax_row_backward(yr, dyr, out);
    }
    Tensor::from_parts(y.shape().to_vec(), dx, Precision::F64)
}

fn softmax_row_backward(y: &[f64], dy: &[f64], dx: &mut [f64]) {
    let dot: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
    for ((o, yv), dyv) in dx.iter_mut().zip(y).zip(dy) {
        *o = yv * (dyv - dot);
    }
}

/// Normalized input and per-row inverse standard deviation, kept for the
/// backward pass.
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
}

pub fn layer_norm(
    x: &Tensor,
    gain: &Tensor,
    bias: &Tensor,
    eps: f64,
) -> Result<(Tensor, LayerNormCache)> {
    let d = x.last_dim();
    if gain.shape() != [d] {
        return Err(Error::shape("layer_norm gain", x.shape(), gain.shape()));
    }
    if bias.shape() != [d] {
        return Err(Error::shape("layer_norm bias", x.shape(), bias.shape()));
    }
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::invalid(
            "layer_norm",
            format!("eps must be > 0, got {eps}"),
        ));
    }
    let mut xhat = vec![0.0; x.len()];
    let mut y = vec![0.0; x.len()];
    let mut inv_std = Vec::with_capacity(x.leading());
    for ((xr, hr), yr) in x
        .data()
        .chunks(d)
        .zip(xhat.chunks_mut(d))
        .zip(y.chunks_mut(d))
    {
        let mean = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std.push(is);
        for i in 0..d {
            hr[i] = (xr[i] - mean) * is;
            yr[i] = hr[i] * gain.data()[i] + bias.data()[i];
        }
    }
    let precision = x.precision().join(gain.precision()).join(bias.precision());
    Ok((
        Tensor::from_parts(x.shape().to_vec(), y, precision),
        LayerNormCache {
            xhat: Tensor::from_parts(x.shape().to_vec(), xhat, Precision::F64),
            inv_std,
        },
    ))
}

/// Returns `(dx, dgain, dbias)`.
pub fn layer_norm_backward(
    cache: &LayerNormCache,
    gain: &Tensor,
    dy: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let d = gain.len();
    let mut dx = vec![0.0; dy.len()];
    let mut dgain = vec![0.0; d];
    let mut dbias = vec![0.0; d];
    let mut g = vec![0.0; d];
    for (((dxr, hr), dyr), &is) in dx
        .chunks_mut(d)
        .zip(cache.xhat.data().chunks(d))
        .zip(dy.data().chunks(d))
        .zip(&cache.inv_std)
    {
        for i in 0..d {
            dgain[i] += dyr[i] * hr[i];
            dbias[i] += dyr[i];
            g[i] = dyr[i] * gain.data()[i];
        }
        let mean_g = g.iter().sum::<f64>() / d as f64;
        let mean_gh = g.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        for i in 0..d {
            dxr[i] = is * (g[i] - mean_g - hr[i] * mean_gh);
        }
    }
    (
        Tensor::from_parts(dy.shape().to_vec(), dx, Precision::F64),
        Tensor::from_parts(vec![d], dgain, Precision::F64),
        Tensor::from_parts(vec![d], dbias, Precision::F64),
    )
}

const GELU_C: f64 = 0.044715;

fn sqrt_2_over_pi() -> f64 {
    (2.0 / std::f64::consts::PI).sqrt()
}

pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (sqrt_2_over_pi() * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let k = sqrt_2_over_pi();
    let u = k * (x + GELU_C * x * x * x);
    let th = u.tanh();
    let du = k * (1.0 + 3.0 * GELU_C * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
}

pub fn gelu(x: &Tensor) -> Tensor {
    x.map(gelu_scalar)
}

pub fn gelu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| g * gelu_grad_scalar(v))
        .collect();
    Tensor::from_parts(x.shape().to_vec(), data, Precision::F64)
}

pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::invalid("concat", "empty list of parts"))?;
    if axis >= first.rank() {
        return Err(Error::invalid(
            "concat",
            format!("axis {axis} out of range for {:?}", first.shape()),
        ));
    }
    for p in &parts[1..] {
        let compatible = p.rank() == first.rank()
            && p.shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !compatible {
            return Err(Error::shape("concat", first.shape(), p.shape()));
        }
    }
    let outer: usize = first.shape()[..axis].iter().product();
    let inner: usize = first.shape()[axis + 1..].iter().product();
    let total: usize = parts.iter().map(|p| p.shape()[axis]).sum();
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let chunk = p.shape()[axis] * inner;
            data.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    let precision = parts
        .iter()
        .fold(Precision::F64, |acc, p| acc.join(p.precision()));
    Ok(Tensor::from_parts(shape, data, precision))
}

pub fn mean_axis(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.rank() || x.rank() < 2 {
        return Err(Error::invalid(
            "mean_axis",
            format!("axis {axis} for shape {:?}", x.shape()),
        ));
    }
    let outer: usize = x.shape()[..axis].iter().product();
    let extent = x.shape()[axis];
    let inner: usize = x.shape()[axis + 1..].iter().product();
    // Running mean: exact when every value along the axis is equal.
    let mut data = vec![0.0; outer * inner];
    for o in 0..outer {
        let dst = &mut data[o * inner..(o + 1) * inner];
        for e in 0..extent {
            let base = (o * extent + e) * inner;
            let k = (e + 1) as f64;
            for (d, v) in dst.iter_mut().zip(&x.data()[base..base + inner]) {
                *d += (v - *d) / k;
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape.remove(axis);
    Ok(Tensor::from_parts(shape, data, x.precision()))
}

pub fn mean_axis_backward(input_shape: &[usize], axis: usize, dy: &Tensor) -> Tensor {
    let outer: usize = input_shape[..axis].iter().product();
    let extent = input_shape[axis];
    let inner: usize = input_shape[axis + 1..].iter().product();
    let mut dx = vec![0.0; outer * extent * inner];
    let scale = 1.0 / extent as f64;
    for o in 0..outer {
        let src = &dy.data()[o * inner..(o + 1) * inner];
        for e in 0..extent {
            let base = (o * extent + e) * inner;
            for (d, v) in dx[base..base + inner].iter_mut().zip(src) {
                *d = v * scale;
            }
        }
    }
    Tensor::from_parts(input_shape.to_vec(), dx, Precision::F64)
}

fn attention_dims(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
) -> Result<(usize, usize, usize, usize)> {
    let rank = q.rank();
    if !(rank == 2 || rank == 3) || k.rank() != rank || v.rank() != rank {
        return Err(Error::invalid(
            "attention",
            format!(
                "expected rank 2 or 3 inputs, got {:?} {:?} {:?}",
                q.shape(),
                k.shape(),
                v.shape()
            ),
        ));
    }
    if k.shape() != v.shape() {
        return Err(Error::shape("attention keys/values", k.shape(), v.shape()));
    }
    let d = q.last_dim();
    let groups = if rank == 3 { q.shape()[0] } else { 1 };
    if k.last_dim() != d || (rank == 3 && k.shape()[0] != groups) {
        return Err(Error::shape("attention", q.shape(), k.shape()));
    }
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::invalid(
            "attention",
            format!("{heads} heads do not divide width {d}"),
        ));
    }
    let lq = q.shape()[rank - 2];
    let lk = k.shape()[rank - 2];
    Ok((groups, lq, lk, d))
}

/// Scaled dot-product attention split over `heads` along the last axis:
/// per group and head, `softmax(Q Kᵀ / √d_h) V`, heads re-concatenated.
///
/// Inputs are `[Lq×D]`, `[Lk×D]`, `[Lk×D]` or the same with a shared
/// leading group axis. Returns the output and the attention weights laid
/// out as `[groups, heads, Lq, Lk]`.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<(Tensor, Vec<f64>)> {
    let (groups, lq, lk, d) = attention_dims(q, k, v, heads)?;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    record_macs(2 * groups * lq * lk * d);

    let mut probs = vec![0.0; groups * heads * lq * lk];
    let mut out = vec![0.0; q.len()];
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    for g in 0..groups {
        let qg = &qd[g * lq * d..(g + 1) * lq * d];
        let kg = &kd[g * lk * d..(g + 1) * lk * d];
        let vg = &vd[g * lk * d..(g + 1) * lk * d];
        let og = &mut out[g * lq * d..(g + 1) * lq * d];
        for h in 0..heads {
            let off = h * dh;
            let pg = &mut probs[(g * heads + h) * lq * lk..(g * heads + h + 1) * lq * lk];
            for i in 0..lq {
                let qi = &qg[i * d + off..i * d + off + dh];
                let row = &mut pg[i * lk..(i + 1) * lk];
                for (j, s) in row.iter_mut().enumerate() {
                    let kj = &kg[j * d + off..j * d + off + dh];
                    *s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                }
                softmax_in_place(row);
                debug_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                let oi = &mut og[i * d + off..i * d + off + dh];
                for (j, &p) in row.iter().enumerate() {
                    let vj = &vg[j * d + off..j * d + off + dh];
                    for (o, x) in oi.iter_mut().zip(vj) {
                        *o += p * x;
                    }
                }
            }
        }
    }
    let precision = q.precision().join(k.precision()).join(v.precision());
    Ok((
        Tensor::from_parts(q.shape().to_vec(), out, precision),
        probs,
    ))
}

/// Returns `(dQ, dK, dV)` for [`attention`].
pub fn attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    probs: &[f64],
    heads: usize,
    dout: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let d = q.last_dim();
    let rank = q.rank();
    let groups = if rank == 3 { q.shape()[0] } else { 1 };
    let lq = q.shape()[rank - 2];
    let lk = k.shape()[rank - 2];
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    let mut dp = vec![0.0; lk];
    let mut ds = vec![0.0; lk];
    for g in 0..groups {
        let qg = &q.data()[g * lq * d..(g + 1) * lq * d];
        let kg = &k.data()[g * lk * d..(g + 1) * lk * d];
        let vg = &v.data()[g * lk * d..(g + 1) * lk * d];
        let dog = &dout.data()[g * lq * d..(g + 1) * lq * d];
        let dqg = &mut dq[g * lq * d..(g + 1) * lq * d];
        let dkg = &mut dk[g * lk * d..(g + 1) * lk * d];
        let dvg = &mut dv[g * lk * d..(g + 1) * lk * d];
        for h in 0..heads {
            let off = h * dh;
            let pg = &probs[(g * heads + h) * lq * lk..(g * heads + h + 1) * lq * lk];
            for i in 0..lq {
                let row = &pg[i * lk..(i + 1) * lk];
                let doi = &dog[i * d + off..i * d + off + dh];
                for j in 0..lk {
                    let vj = &vg[j * d + off..j * d + off + dh];
                    dp[j] = doi.iter().zip(vj).map(|(a, b)| a * b).sum();
                    let dvj = &mut dvg[j * d + off..j * d + off + dh];
                    for (o, x) in dvj.iter_mut().zip(doi) {
                        *o += row[j] * x;
                    }
                }
                softmax_row_backward(row, &dp, &mut ds);
                let qi = &qg[i * d + off..i * d + off + dh];
                for j in 0..lk {
                    let s = ds[j] * scale;
                    if s == 0.0 {
                        continue;
                    }
                    let kj = &kg[j * d + off..j * d + off + dh];
                    let dqi = &mut dqg[i * d + off..i * d + off + dh];
                    for (o, x) in dqi.iter_mut().zip(kj) {
                        *o += s * x;
                    }
                    let dkj = &mut dkg[j * d + off..j * d + off + dh];
                    for (o, x) in dkj.iter_mut().zip(qi) {
                        *o += s * x;
                    }
                }
            }
        }
    }
    (
        Tensor::from_parts(q.shape().to_vec(), dq, Precision::F64),
        Tensor::from_parts(k.shape().to_vec(), dk, Precision::F64),
        Tensor::from_parts(v.shape().to_vec(), dv, Precision::F64),
    )
}

/// `-log softmax(logits)[label]` over a flat logit vector, with the
/// softmax probabilities (whose difference from the one-hot label is the
/// gradient).
pub fn cross_entropy(logits: &Tensor, label: usize) -> Result<(f64, Tensor)> {
    let m = logits.len();
    if label >= m {
        return Err(Error::invalid(
            "cross_entropy",
            format!("label {label} out of range for {m} classes"),
        ));
    }
    let max = logits
        .data()
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let lse = logits
        .data()
        .iter()
        .map(|v| (v - max).exp())
        .sum::<f64>()
        .ln()
        + max;
    let probs = logits.map(|v| (v - lse).exp());
    Ok((lse - logits.data()[label], probs))
}
