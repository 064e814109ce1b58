//! Losses, fidelity metrics and the latency-weighted challenge score.

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Element, Tensor};

pub const CHARBONNIER_EPS: f64 = 1e-3;
pub const PIXEL_MAX: f64 = 255.0;
/// MSE floor the trainer adds before taking the PSNR loss.
pub const PSNR_LOSS_FLOOR: f64 = 1e-8;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

pub fn mse<T: Element>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    pred.expect_same_shape(target)?;
    let sum: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a.to_f64_lossy() - b.to_f64_lossy()).powi(2))
        .sum();
    Ok(sum / pred.numel() as f64)
}

/// Mean of `sqrt((pred - target)² + eps²)`.
///
/// Evaluated as `eps + mean(d² / (sqrt(d² + eps²) + eps))`, which is exact at
/// zero difference and avoids cancellation for small `d`.
pub fn charbonnier_loss<T: Element>(pred: &Tensor<T>, target: &Tensor<T>, eps: f64) -> Result<f64> {
    pred.expect_same_shape(target)?;
    let eps2 = eps * eps;
    let excess: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| {
            let d = a.to_f64_lossy() - b.to_f64_lossy();
            let d2 = d * d;
            d2 / ((d2 + eps2).sqrt() + eps)
        })
        .sum();
    Ok(eps + excess / pred.numel() as f64)
}

/// Peak signal-to-noise ratio in dB; `f64::INFINITY` for identical inputs.
pub fn psnr<T: Element>(pred: &Tensor<T>, target: &Tensor<T>, max_val: f64) -> Result<f64> {
    let m = mse(pred, target)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max_val * max_val / m).log10())
}

/// `-psnr(pred, target)` against a peak of 255.
pub fn psnr_loss<T: Element>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    let m = mse(pred, target)?;
    if m == 0.0 {
        return Err(Error::Numeric(
            "psnr loss undefined at zero MSE; add a floor".into(),
        ));
    }
    Ok(-10.0 * (PIXEL_MAX * PIXEL_MAX / m).log10())
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable valid-mode Gaussian filter of one plane.
fn filter_valid(
    src: &[f64],
    h: usize,
    w: usize,
    k: &[f64; SSIM_WINDOW],
) -> (Vec<f64>, usize, usize) {
    let wo = w - SSIM_WINDOW + 1;
    let ho = h - SSIM_WINDOW + 1;
    let mut tmp = vec![0.0; h * wo];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..wo {
            tmp[y * wo + x] = k
                .iter()
                .zip(&row[x..x + SSIM_WINDOW])
                .map(|(a, b)| a * b)
                .sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = k
                .iter()
                .enumerate()
                .map(|(i, a)| a * tmp[(y + i) * wo + x])
                .sum();
        }
    }
    (out, ho, wo)
}

/// Mean structural similarity over all planes, 11x11 Gaussian window
/// (sigma 1.5), dynamic range 255, no padding.
pub fn ssim<T: Element>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    pred.expect_same_shape(target)?;
    let s = pred.shape();
    if s.h < SSIM_WINDOW || s.w < SSIM_WINDOW {
        return Err(shape_err!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {}x{}",
            s.h,
            s.w
        ));
    }
    let k = gaussian_window();
    let c1 = (SSIM_K1 * PIXEL_MAX).powi(2);
    let c2 = (SSIM_K2 * PIXEL_MAX).powi(2);
    let mut total = 0.0;
    for n in 0..s.n {
        for c in 0..s.c {
            let a: Vec<f64> = pred.plane(n, c).iter().map(|v| v.to_f64_lossy()).collect();
            let b: Vec<f64> = target
                .plane(n, c)
                .iter()
                .map(|v| v.to_f64_lossy())
                .collect();
            let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
            let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
            let ab: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x * y).collect();
            let (mu_a, _, _) = filter_valid(&a, s.h, s.w, &k);
            let (mu_b, _, _) = filter_valid(&b, s.h, s.w, &k);
            let (e_aa, _, _) = filter_valid(&aa, s.h, s.w, &k);
            let (e_bb, _, _) = filter_valid(&bb, s.h, s.w, &k);
            let (e_ab, _, _) = filter_valid(&ab, s.h, s.w, &k);
            let mut acc = 0.0;
            for i in 0..mu_a.len() {
                let (ma, mb) = (mu_a[i], mu_b[i]);
                let va = e_aa[i] - ma * ma;
                let vb = e_bb[i] - mb * mb;
                let cov = e_ab[i] - ma * mb;
                acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            }
            total += acc / mu_a.len() as f64;
        }
    }
    Ok(total / (s.n * s.c) as f64)
}

#[derive(Copy, Clone, Debug, PartialEq)]
pub struct ScoreInput {
    pub psnr_db: f64,
    /// Seconds.
    pub runtime_s: f64,
}

/// `2^(2·(PSNR − 38)) / t`, with `t` in seconds.
pub fn challenge_score(input: ScoreInput) -> Result<f64> {
    if !(input.runtime_s > 0.0) {
        return Err(Error::Contract(format!(
            "runtime must be positive, got {}",
            input.runtime_s
        )));
    }
    Ok(2f64.powf(2.0 * (input.psnr_db - 38.0)) / input.runtime_s)
}
