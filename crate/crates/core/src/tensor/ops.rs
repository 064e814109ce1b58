//! Pure forward operators. Each returns a fresh tensor; none touches its inputs
//! except [`batch_norm`], which updates running statistics in training mode.

use super::{Element, Shape, Tensor};
use crate::error::{shape_err, Error, Result};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// Mirror an out-of-range index back into `0..len`, repeating the edge
/// sample: `-1 -> 0`, `-2 -> 1`, `len -> len - 1`, `len + 1 -> len - 2`.
pub fn reflect_index(mut t: isize, len: usize) -> usize {
    let len = len as isize;
    loop {
        if t < 0 {
            t = -t - 1;
        } else if t >= len {
            t = 2 * len - 1 - t;
        } else {
            return t as usize;
        }
    }
}

/// `(N, C, H, W) -> (N, C/r², H·r, W·r)`.
pub fn pixel_shuffle<T: Element>(input: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let s = input.shape();
    if r == 0 || !s.c.is_multiple_of(r * r) {
        return Err(shape_err!(
            "pixel_shuffle: {} channels not divisible by r²={}",
            s.c,
            r * r
        ));
    }
    let co = s.c / (r * r);
    let mut out = Tensor::zeros([s.n, co, s.h * r, s.w * r]);
    for n in 0..s.n {
        for c in 0..co {
            for i in 0..r {
                for j in 0..r {
                    let src = input.plane(n, c * r * r + i * r + j);
                    for h in 0..s.h {
                        for w in 0..s.w {
                            out.set(n, c, h * r + i, w * r + j, src[h * s.w + w]);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`pixel_shuffle`].
pub fn pixel_unshuffle<T: Element>(input: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let s = input.shape();
    if r == 0 || !s.h.is_multiple_of(r) || !s.w.is_multiple_of(r) {
        return Err(shape_err!("pixel_unshuffle: {} not divisible by {r}", s));
    }
    let (ho, wo) = (s.h / r, s.w / r);
    let mut out = Tensor::zeros([s.n, s.c * r * r, ho, wo]);
    for n in 0..s.n {
        for c in 0..s.c {
            for i in 0..r {
                for j in 0..r {
                    let oc = c * r * r + i * r + j;
                    for h in 0..ho {
                        for w in 0..wo {
                            out.set(n, oc, h, w, input.at(n, c, h * r + i, w * r + j));
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Nearest-neighbour 2x upsampling.
pub fn nearest_upsample2x<T: Element>(input: &Tensor<T>) -> Tensor<T> {
    let s = input.shape();
    let (h2, w2) = (s.h * 2, s.w * 2);
    let mut out = Tensor::zeros([s.n, s.c, h2, w2]);
    for n in 0..s.n {
        for c in 0..s.c {
            let src = input.plane(n, c);
            let dst = out.plane_mut(n, c);
            for y in 0..h2 {
                let row = &src[(y / 2) * s.w..(y / 2 + 1) * s.w];
                for (x, d) in dst[y * w2..(y + 1) * w2].iter_mut().enumerate() {
                    *d = row[x / 2];
                }
            }
        }
    }
    out
}

pub fn leaky_relu<T: Element>(x: &Tensor<T>, alpha: T) -> Tensor<T> {
    x.map(|v| if v >= T::zero() { v } else { alpha * v })
}

pub fn sigmoid<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

/// Kept strictly inside (0, 1): saturated values are pinned to the nearest
/// representable numbers above 0 and below 1.
#[inline]
pub(crate) fn sigmoid_scalar<T: Element>(v: T) -> T {
    // Split on sign so exp never overflows.
    let y = if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    };
    let two = T::one() + T::one();
    y.max(T::min_positive_value())
        .min(T::one() - T::epsilon() / two)
}

/// Round half away from zero.
pub fn round<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.round())
}

pub fn clip<T: Element>(x: &Tensor<T>, lo: T, hi: T) -> Tensor<T> {
    x.map(|v| v.max(lo).min(hi))
}

/// Channels `[start, start + len)`.
pub fn slice_channels<T: Element>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if len == 0 || start + len > s.c {
        return Err(shape_err!(
            "channel slice {start}..{} of {} channels",
            start + len,
            s.c
        ));
    }
    let p = s.plane();
    let mut data = Vec::with_capacity(s.n * len * p);
    for n in 0..s.n {
        let base = (n * s.c + start) * p;
        data.extend_from_slice(&x.data()[base..base + len * p]);
    }
    Tensor::from_vec([s.n, len, s.h, s.w], data)
}

/// Concatenate along the channel axis.
pub fn concat_channels<T: Element>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| shape_err!("concat of zero tensors"))?
        .shape();
    let mut c_total = 0;
    for t in parts {
        let s = t.shape();
        if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
            return Err(shape_err!("concat: {} vs {}", s, first));
        }
        c_total += s.c;
    }
    let p = first.plane();
    let mut data = Vec::with_capacity(first.n * c_total * p);
    for n in 0..first.n {
        for t in parts {
            let c = t.shape().c;
            data.extend_from_slice(&t.data()[n * c * p..(n + 1) * c * p]);
        }
    }
    Tensor::from_vec([first.n, c_total, first.h, first.w], data)
}

fn check_channel_vec<T: Element>(v: &Tensor<T>, c: usize, what: &str) -> Result<()> {
    if v.numel() != c {
        return Err(shape_err!("{what} has {} entries, expected {c}", v.numel()));
    }
    Ok(())
}

/// Per-channel batch statistics in double precision: `(mean, biased variance)`.
pub fn channel_stats<T: Element>(x: &Tensor<T>) -> (Vec<f64>, Vec<f64>) {
    let s = x.shape();
    let count = (s.n * s.plane()) as f64;
    let mut mean = vec![0.0; s.c];
    let mut var = vec![0.0; s.c];
    for c in 0..s.c {
        let m: f64 = (0..s.n)
            .flat_map(|n| x.plane(n, c).iter())
            .map(|v| v.to_f64_lossy())
            .sum::<f64>()
            / count;
        let v: f64 = (0..s.n)
            .flat_map(|n| x.plane(n, c).iter())
            .map(|v| (v.to_f64_lossy() - m).powi(2))
            .sum::<f64>()
            / count;
        mean[c] = m;
        var[c] = v;
    }
    (mean, var)
}

/// `(x - mean) * gamma / sqrt(var + eps) + beta` with fixed per-channel statistics.
pub fn batch_norm_eval<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mean: &Tensor<T>,
    var: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    let s = x.shape();
    for (v, name) in [
        (gamma, "gamma"),
        (beta, "beta"),
        (mean, "mean"),
        (var, "var"),
    ] {
        check_channel_vec(v, s.c, name)?;
    }
    let mut out = Tensor::zeros_like(x);
    for c in 0..s.c {
        let denom = var.data()[c].to_f64_lossy() + eps;
        if denom <= 0.0 {
            return Err(Error::Numeric(format!(
                "var + eps = {denom} on channel {c}"
            )));
        }
        let scale = T::from_f64_lossy(gamma.data()[c].to_f64_lossy() / denom.sqrt());
        let (m, b) = (mean.data()[c], beta.data()[c]);
        for n in 0..s.n {
            for (o, &v) in out.plane_mut(n, c).iter_mut().zip(x.plane(n, c)) {
                *o = (v - m) * scale + b;
            }
        }
    }
    Ok(out)
}

/// Training-mode normalisation with the batch's own statistics.
/// Returns the output with the batch mean and biased variance.
pub fn batch_norm_train<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, Vec<f64>, Vec<f64>)> {
    let s = x.shape();
    check_channel_vec(gamma, s.c, "gamma")?;
    check_channel_vec(beta, s.c, "beta")?;
    let (mean, var) = channel_stats(x);
    let mut out = Tensor::zeros_like(x);
    for c in 0..s.c {
        let inv = 1.0 / (var[c] + eps).sqrt();
        let g = gamma.data()[c].to_f64_lossy();
        let b = beta.data()[c].to_f64_lossy();
        for n in 0..s.n {
            for (o, &v) in out.plane_mut(n, c).iter_mut().zip(x.plane(n, c)) {
                *o = T::from_f64_lossy((v.to_f64_lossy() - mean[c]) * inv * g + b);
            }
        }
    }
    Ok((out, mean, var))
}

/// Exponential running-statistics update. The variance is converted to the
/// unbiased estimate before blending.
pub fn update_running_stats<T: Element>(
    running_mean: &mut Tensor<T>,
    running_var: &mut Tensor<T>,
    batch_mean: &[f64],
    batch_var: &[f64],
    count: usize,
    momentum: f64,
) {
    let unbias = if count > 1 {
        count as f64 / (count as f64 - 1.0)
    } else {
        1.0
    };
    for (rm, &m) in running_mean.data_mut().iter_mut().zip(batch_mean) {
        *rm = T::from_f64_lossy((1.0 - momentum) * rm.to_f64_lossy() + momentum * m);
    }
    for (rv, &v) in running_var.data_mut().iter_mut().zip(batch_var) {
        *rv = T::from_f64_lossy((1.0 - momentum) * rv.to_f64_lossy() + momentum * v * unbias);
    }
}

/// Batch normalisation over `(N, H, W)` per channel. In training mode the
/// running statistics are updated with momentum [`BN_MOMENTUM`].
#[allow(clippy::too_many_arguments)]
pub fn batch_norm<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &mut Tensor<T>,
    running_var: &mut Tensor<T>,
    eps: f64,
    training: bool,
) -> Result<Tensor<T>> {
    if eps <= 0.0 {
        return Err(Error::Contract(format!(
            "batch_norm eps must be > 0, got {eps}"
        )));
    }
    if training {
        check_channel_vec(running_mean, x.shape().c, "running_mean")?;
        check_channel_vec(running_var, x.shape().c, "running_var")?;
        let (y, m, v) = batch_norm_train(x, gamma, beta, eps)?;
        let s: Shape = x.shape();
        update_running_stats(
            running_mean,
            running_var,
            &m,
            &v,
            s.n * s.plane(),
            BN_MOMENTUM,
        );
        Ok(y)
    } else {
        batch_norm_eval(x, gamma, beta, running_mean, running_var, eps)
    }
}
