//! Reference implementations written directly from the definitions, sharing
//! no code with the library. Everything runs in f64.

#![allow(dead_code)]

use fastshade::nn::{BatchNorm, Conv2d, MbrConv};
use fastshade::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn f64s(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Plain nested-loop cross-correlation with zero padding and groups.
#[allow(clippy::too_many_arguments)]
pub fn naive_conv(
    x: &[f64],
    [n, cin, h, w]: [usize; 4],
    wt: &[f64],
    [cout, cin_g, kh, kw]: [usize; 4],
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> (Vec<f64>, [usize; 4]) {
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let cout_g = cout / groups;
    assert_eq!(cin, cin_g * groups);
    let mut out = vec![0.0; n * cout * ho * wo];
    for b in 0..n {
        for o in 0..cout {
            let g = o / cout_g;
            for y in 0..ho {
                for xo in 0..wo {
                    let mut acc = bias.map_or(0.0, |b| b[o]);
                    for ci in 0..cin_g {
                        let c = g * cin_g + ci;
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let iy = (y * stride + dy) as isize - pad as isize;
                                let ix = (xo * stride + dx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xi = ((b * cin + c) * h + iy as usize) * w + ix as usize;
                                let wi = ((o * cin_g + ci) * kh + dy) * kw + dx;
                                acc += x[xi] * wt[wi];
                            }
                        }
                    }
                    out[((b * cout + o) * ho + y) * wo + xo] = acc;
                }
            }
        }
    }
    (out, [n, cout, ho, wo])
}

pub fn conv_layer(x: &[f64], dims: [usize; 4], c: &Conv2d) -> (Vec<f64>, [usize; 4]) {
    let bias = c.bias.as_ref().map(f64s);
    naive_conv(
        x,
        dims,
        &f64s(&c.weight),
        c.weight.dims(),
        bias.as_deref(),
        c.params.stride,
        c.params.padding,
        c.params.groups,
    )
}

/// `(x - mean) / sqrt(var + eps) * gamma + beta`, per channel.
pub fn bn_eval(x: &mut [f64], [n, c, h, w]: [usize; 4], bn: &BatchNorm) {
    let (g, b, m, v) = (
        f64s(&bn.gamma),
        f64s(&bn.beta),
        f64s(&bn.running_mean),
        f64s(&bn.running_var),
    );
    for i in 0..n {
        for ch in 0..c {
            let s = g[ch] / (v[ch] + bn.eps).sqrt();
            for p in &mut x[(i * c + ch) * h * w..(i * c + ch + 1) * h * w] {
                *p = (*p - m[ch]) * s + b[ch];
            }
        }
    }
}

pub fn leaky(x: &mut [f64], slope: f64) {
    for v in x {
        if *v < 0.0 {
            *v *= slope;
        }
    }
}

pub fn sigmoid(x: &mut [f64]) {
    for v in x {
        *v = 1.0 / (1.0 + (-*v).exp());
    }
}

/// Output channel `c` at `(h*r + i, w*r + j)` reads input channel
/// `c*r*r + i*r + j` at `(h, w)`.
pub fn naive_pixel_shuffle(
    x: &[f64],
    [n, c, h, w]: [usize; 4],
    r: usize,
) -> (Vec<f64>, [usize; 4]) {
    let co = c / (r * r);
    let (ho, wo) = (h * r, w * r);
    let mut out = vec![0.0; x.len()];
    for b in 0..n {
        for oc in 0..co {
            for y in 0..ho {
                for xx in 0..wo {
                    let ic = oc * r * r + (y % r) * r + xx % r;
                    out[((b * co + oc) * ho + y) * wo + xx] =
                        x[((b * c + ic) * h + y / r) * w + xx / r];
                }
            }
        }
    }
    (out, [n, co, ho, wo])
}

pub fn naive_upsample2x(x: &[f64], [n, c, h, w]: [usize; 4]) -> (Vec<f64>, [usize; 4]) {
    let mut out = vec![0.0; x.len() * 4];
    for p in 0..n * c {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                out[(p * 2 * h + y) * 2 * w + xx] = x[(p * h + y / 2) * w + xx / 2];
            }
        }
    }
    (out, [n, c, 2 * h, 2 * w])
}

pub fn channel_concat(parts: &[(&[f64], [usize; 4])]) -> (Vec<f64>, [usize; 4]) {
    let [n, _, h, w] = parts[0].1;
    let c: usize = parts.iter().map(|p| p.1[1]).sum();
    let mut out = Vec::with_capacity(n * c * h * w);
    for b in 0..n {
        for (data, d) in parts {
            let len = d[1] * h * w;
            out.extend_from_slice(&data[b * len..(b + 1) * len]);
        }
    }
    (out, [n, c, h, w])
}

pub fn channel_slice(
    x: &[f64],
    [n, c, h, w]: [usize; 4],
    start: usize,
    len: usize,
) -> (Vec<f64>, [usize; 4]) {
    let mut out = Vec::with_capacity(n * len * h * w);
    for b in 0..n {
        let base = (b * c + start) * h * w;
        out.extend_from_slice(&x[base..base + len * h * w]);
    }
    (out, [n, len, h, w])
}

/// Eval-mode MBRConv evaluated one output pixel at a time: gather the
/// zero-padded `k x k` patch, multiply by each branch's flattened kernel
/// (smaller kernels read the centred sub-patch), normalise, concatenate
/// and project.
pub fn mbrconv_by_patches(m: &MbrConv, x: &[f64], [n, cin, h, w]: [usize; 4]) -> Vec<f64> {
    let k = m.kernel;
    let r = (k / 2) as isize;
    let proj = f64s(&m.projection.weight);
    let proj_b = m.projection.bias.as_ref().map(f64s);
    let wide: Vec<usize> = m.branches.iter().map(|b| b.conv.out_channels()).collect();
    let cat: usize = wide.iter().sum();
    let mut out = vec![0.0; n * m.out_ch * h * w];
    let mut patch = vec![0.0; cin * k * k];
    let mut feat = vec![0.0; cat];
    for b in 0..n {
        for y in 0..h {
            for xx in 0..w {
                for c in 0..cin {
                    for dy in 0..k {
                        for dx in 0..k {
                            let iy = y as isize + dy as isize - r;
                            let ix = xx as isize + dx as isize - r;
                            patch[(c * k + dy) * k + dx] =
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    0.0
                                } else {
                                    x[((b * cin + c) * h + iy as usize) * w + ix as usize]
                                };
                        }
                    }
                }
                let mut j = 0;
                for br in &m.branches {
                    let wt = f64s(&br.conv.weight);
                    let [co, ci, kb, _] = br.conv.weight.dims();
                    let off = (k - kb) / 2;
                    let (g, be, mu, var) = (
                        f64s(&br.bn.gamma),
                        f64s(&br.bn.beta),
                        f64s(&br.bn.running_mean),
                        f64s(&br.bn.running_var),
                    );
                    for o in 0..co {
                        let mut acc = br.conv.bias.as_ref().map_or(0.0, |bb| bb.data()[o] as f64);
                        for c in 0..ci {
                            for dy in 0..kb {
                                for dx in 0..kb {
                                    acc += wt[((o * ci + c) * kb + dy) * kb + dx]
                                        * patch[(c * k + dy + off) * k + dx + off];
                                }
                            }
                        }
                        feat[j] = (acc - mu[o]) * g[o] / (var[o] + br.bn.eps).sqrt() + be[o];
                        j += 1;
                    }
                }
                for o in 0..m.out_ch {
                    let mut acc = proj_b.as_ref().map_or(0.0, |pb| pb[o]);
                    for (i, f) in feat.iter().enumerate() {
                        acc += proj[o * cat + i] * f;
                    }
                    out[((b * m.out_ch + o) * h + y) * w + xx] = acc;
                }
            }
        }
    }
    out
}

/// Direct-sum DFT magnitude squared, unshifted.
pub fn naive_dft_power(x: &[f64], h: usize, w: usize) -> Vec<f64> {
    use std::f64::consts::PI;
    let mut out = vec![0.0; h * w];
    for u in 0..h {
        for v in 0..w {
            let (mut re, mut im) = (0.0, 0.0);
            for y in 0..h {
                for xx in 0..w {
                    let a = -2.0 * PI * (u * y) as f64 / h as f64
                        - 2.0 * PI * (v * xx) as f64 / w as f64;
                    re += x[y * w + xx] * a.cos();
                    im += x[y * w + xx] * a.sin();
                }
            }
            out[u * w + v] = re * re + im * im;
        }
    }
    out
}

/// Spearman rank correlation (no ties expected).
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let rank = |v: &[f64]| {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].partial_cmp(&v[j]).unwrap());
        let mut r = vec![0.0; v.len()];
        for (pos, &i) in idx.iter().enumerate() {
            r[i] = pos as f64;
        }
        r
    };
    let (ra, rb) = (rank(a), rank(b));
    let n = a.len() as f64;
    let d2: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - y).powi(2)).sum();
    1.0 - 6.0 * d2 / (n * (n * n - 1.0))
}
