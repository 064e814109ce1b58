//! Finite-difference checks of the reverse sweep in double precision.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::metrics::{CHARBONNIER_EPS, PIXEL_MAX};
use crate::model::{build_model, FastShadeConfig};
use crate::nn::{Afdb, BatchNorm, ConvUnit, DownsampleMode, MbrConv, Sgu, LEAKY_SLOPE};
use crate::tensor::{Conv2dParams, Graph, NodeId, Tensor};

pub const STEP: f64 = 1e-4;
/// Step for whole-network checks. Some pre-activations inevitably sit near a
/// LeakyReLU kink, and a 1e-4 probe can straddle one.
pub const NETWORK_STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-4;
/// Entries probed per tensor; larger tensors are sampled at a fixed stride.
pub const MAX_PROBES: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckResult {
    pub name: String,
    /// Largest per-tensor `|a - n| / max(|a|, |n|)` over probed entries
    /// (Euclidean norms).
    pub rel_err: f64,
    pub tol: f64,
    /// Number of probed entries.
    pub probes: usize,
    pub pass: bool,
}

impl GradcheckResult {
    fn new(name: &str, rel_err: f64, tol: f64, probes: usize) -> Self {
        Self {
            name: name.to_owned(),
            rel_err,
            tol,
            probes,
            pass: rel_err <= tol,
        }
    }
}

fn probe_indices(n: usize, max: usize) -> Vec<usize> {
    if n <= max {
        (0..n).collect()
    } else {
        (0..max).map(|k| k * (n - 1) / (max - 1)).collect()
    }
}

fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(n));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

fn scalar(g: &Graph<f64>, loss: NodeId) -> Result<f64> {
    g.value(loss).item()
}

/// Check `d f / d inputs` and `d f / d θ` for every named parameter `θ` that
/// `f` registers, against central differences with step `step`. `f` must
/// build a single-element loss from the given leaves.
pub fn finite_diff_check<F>(
    name: &str,
    inputs: &[Tensor<f64>],
    f: F,
    step: f64,
    tol: f64,
) -> Result<GradcheckResult>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let eval = |g: &mut Graph<f64>, xs: &[Tensor<f64>]| -> Result<f64> {
        let ids: Vec<NodeId> = xs.iter().map(|x| g.leaf(x.clone(), true)).collect();
        let l = f(g, &ids)?;
        scalar(g, l)
    };

    let mut g = Graph::<f64>::new();
    let ids: Vec<NodeId> = inputs.iter().map(|x| g.leaf(x.clone(), true)).collect();
    let loss = f(&mut g, &ids)?;
    let grads = g.backward(loss)?;

    let mut worst = 0.0f64;
    let mut probes = 0;
    for (k, x) in inputs.iter().enumerate() {
        let zero = Tensor::zeros(x.dims());
        let a = grads.get(ids[k]).unwrap_or(&zero);
        let idx = probe_indices(x.numel(), MAX_PROBES);
        let mut an = Vec::with_capacity(idx.len());
        let mut nu = Vec::with_capacity(idx.len());
        for &i in &idx {
            let mut xs = inputs.to_vec();
            xs[k].data_mut()[i] = x.data()[i] + step;
            let up = eval(&mut Graph::new(), &xs)?;
            xs[k].data_mut()[i] = x.data()[i] - step;
            let down = eval(&mut Graph::new(), &xs)?;
            nu.push((up - down) / (2.0 * step));
            an.push(a.data()[i]);
        }
        probes += idx.len();
        worst = worst.max(rel_err(&an, &nu));
    }

    let mut names: Vec<String> = g.param_names().map(str::to_owned).collect();
    names.sort();
    for pname in names {
        let id = g.param_id(&pname).expect("listed by the graph");
        let base = g.value(id).clone();
        let zero = Tensor::zeros(base.dims());
        let a = grads.get(id).unwrap_or(&zero);
        let idx = probe_indices(base.numel(), MAX_PROBES);
        let mut an = Vec::with_capacity(idx.len());
        let mut nu = Vec::with_capacity(idx.len());
        for &i in &idx {
            let shifted = |delta: f64| -> Result<f64> {
                let mut t = base.clone();
                t.data_mut()[i] += delta;
                let mut g = Graph::with_overrides(HashMap::from([(pname.clone(), t)]));
                eval(&mut g, inputs)
            };
            let up = shifted(step)?;
            let down = shifted(-step)?;
            nu.push((up - down) / (2.0 * step));
            an.push(a.data()[i]);
        }
        probes += idx.len();
        worst = worst.max(rel_err(&an, &nu));
    }
    if !worst.is_finite() {
        return Err(Error::Numeric(format!("{name}: non-finite gradient error")));
    }
    Ok(GradcheckResult::new(name, worst, tol, probes))
}

/// Backward of `sum(round(x))` through the straight-through estimator must
/// be exactly one everywhere.
pub fn ste_check(x: &Tensor<f64>) -> Result<GradcheckResult> {
    let mut g = Graph::<f64>::new();
    let id = g.leaf(x.clone(), true);
    let r = g.ste_round(id);
    let s = g.sum(r);
    let grads = g.backward(s)?;
    let gx = grads
        .get(id)
        .ok_or_else(|| Error::Numeric("no gradient reached the input".into()))?;
    let exact = gx.data().iter().all(|&v| v == 1.0);
    Ok(GradcheckResult {
        name: "ste_round".into(),
        rel_err: if exact { 0.0 } else { 1.0 },
        tol: 0.0,
        probes: x.numel(),
        pass: exact,
    })
}

/// `sum(y * w)` for a fixed random `w`, so no direction of `y` is invisible
/// to the loss.
fn weighted_sum(g: &mut Graph<f64>, y: NodeId, seed: u64) -> Result<NodeId> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::<f64>::uniform(g.value(y).dims(), -1.0, 1.0, &mut rng);
    let w = g.input(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

/// Uniform values whose magnitude is at least `gap`.
fn away_from_zero<R: Rng + ?Sized>(dims: [usize; 4], gap: f64, rng: &mut R) -> Tensor<f64> {
    let mut t = Tensor::<f64>::uniform(dims, gap, 1.0, rng);
    for v in t.data_mut() {
        if rng.random_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

/// The standard battery: primitive ops, each block, both losses and a
/// complete small network.
pub fn standard_suite(seed: u64) -> Result<Vec<GradcheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let (h, tol) = (STEP, TOLERANCE);

    for (label, k, p) in [
        ("conv2d 3x3", 3, Conv2dParams::new(1, 1, 1)),
        ("conv2d 2x2 stride 2", 2, Conv2dParams::new(2, 0, 1)),
        ("conv2d 3x3 stride 2", 3, Conv2dParams::new(2, 1, 1)),
        ("conv2d depthwise", 3, Conv2dParams::new(1, 1, 4)),
    ] {
        let cin_g = 4 / p.groups;
        let x = Tensor::<f64>::uniform([2, 4, 6, 6], -1.0, 1.0, &mut rng);
        let w = Tensor::<f64>::uniform([4, cin_g, k, k], -1.0, 1.0, &mut rng);
        let b = Tensor::<f64>::uniform([1, 4, 1, 1], -1.0, 1.0, &mut rng);
        out.push(finite_diff_check(
            label,
            &[x, w, b],
            |g, ids| {
                let y = g.conv2d(ids[0], ids[1], Some(ids[2]), p)?;
                weighted_sum(g, y, 1)
            },
            h,
            tol,
        )?);
    }

    let x = Tensor::<f64>::uniform([2, 3, 4, 4], -2.0, 3.0, &mut rng);
    let mut bn = BatchNorm::new(3);
    bn.randomize(&mut rng);
    out.push(finite_diff_check(
        "batch_norm train",
        std::slice::from_ref(&x),
        |g, ids| {
            let y = bn.clone().forward_graph(g, ids[0], "bn", true)?;
            weighted_sum(g, y, 2)
        },
        h,
        tol,
    )?);
    out.push(finite_diff_check(
        "batch_norm eval",
        &[x],
        |g, ids| {
            let y = bn.clone().forward_graph(g, ids[0], "bn", false)?;
            weighted_sum(g, y, 3)
        },
        h,
        tol,
    )?);

    let x = away_from_zero([1, 3, 5, 5], 0.05, &mut rng);
    out.push(finite_diff_check(
        "leaky_relu",
        &[x],
        |g, ids| {
            let y = g.leaky_relu(ids[0], LEAKY_SLOPE as f64);
            weighted_sum(g, y, 4)
        },
        h,
        tol,
    )?);

    let x = Tensor::<f64>::uniform([1, 3, 5, 5], -4.0, 4.0, &mut rng);
    out.push(finite_diff_check(
        "sigmoid",
        &[x],
        |g, ids| {
            let y = g.sigmoid(ids[0]);
            weighted_sum(g, y, 5)
        },
        h,
        tol,
    )?);

    let x = Tensor::<f64>::uniform([2, 8, 3, 3], -1.0, 1.0, &mut rng);
    out.push(finite_diff_check(
        "pixel_shuffle",
        std::slice::from_ref(&x),
        |g, ids| {
            let y = g.pixel_shuffle(ids[0], 2)?;
            weighted_sum(g, y, 6)
        },
        h,
        tol,
    )?);
    out.push(finite_diff_check(
        "upsample2x",
        &[x],
        |g, ids| {
            let y = g.upsample2x(ids[0]);
            weighted_sum(g, y, 7)
        },
        h,
        tol,
    )?);

    let x = Tensor::<f64>::uniform([2, 4, 5, 5], -1.0, 1.0, &mut rng);
    let mut mbr = ConvUnit::Multi(MbrConv::new(4, 4, 3, &mut rng));
    mbr.randomize_norms(&mut rng);
    out.push(finite_diff_check(
        "mbrconv train",
        &[x],
        |g, ids| {
            let y = mbr.clone().forward_graph(g, ids[0], "mbr", true)?;
            weighted_sum(g, y, 8)
        },
        h,
        tol,
    )?);

    for (label, ratio, training) in [
        ("afdb train", 0.25, true),
        ("afdb eval", 0.25, false),
        ("afdb 1:1 train", 0.5, true),
    ] {
        let x = Tensor::<f64>::uniform([1, 8, 6, 6], -1.0, 1.0, &mut rng);
        let mut block = Afdb::new(8, ratio, 0.2, &mut rng);
        for u in block.units_mut() {
            u.randomize_norms(&mut rng);
        }
        out.push(finite_diff_check(
            label,
            &[x],
            |g, ids| {
                let y = block.clone().forward_graph(g, ids[0], "afdb", training)?;
                weighted_sum(g, y, 9)
            },
            h,
            tol,
        )?);
    }

    for (label, dw) in [("sgu", false), ("sgu depthwise", true)] {
        let lr = Tensor::<f64>::uniform([1, 6, 3, 3], -1.0, 1.0, &mut rng);
        let hr = Tensor::<f64>::uniform([1, 4, 6, 6], -1.0, 1.0, &mut rng);
        let sgu = Sgu::new(6, 4, dw, &mut rng);
        out.push(finite_diff_check(
            label,
            &[lr, hr],
            |g, ids| {
                let y = sgu.forward_graph(g, ids[0], ids[1], "sgu")?;
                weighted_sum(g, y, 10)
            },
            h,
            tol,
        )?);
    }

    let pred = Tensor::<f64>::uniform([1, 3, 4, 4], 0.0, 255.0, &mut rng);
    let target = Tensor::<f64>::uniform([1, 3, 4, 4], 0.0, 255.0, &mut rng);
    out.push(finite_diff_check(
        "charbonnier",
        &[pred.clone(), target.clone()],
        |g, ids| g.charbonnier(ids[0], ids[1], CHARBONNIER_EPS),
        h,
        tol,
    )?);
    out.push(finite_diff_check(
        "psnr_loss",
        &[pred, target],
        |g, ids| g.psnr_loss(ids[0], ids[1], PIXEL_MAX, 1e-8),
        h,
        tol,
    )?);

    let x = Tensor::<f64>::uniform([1, 3, 4, 4], -3.0, 3.0, &mut rng);
    out.push(ste_check(&x)?);

    for mode in [DownsampleMode::Conv2x2, DownsampleMode::HaarLearnable] {
        let cfg = FastShadeConfig {
            downsample_mode: mode,
            ..FastShadeConfig::tiny()
        };
        let mut model = build_model(&cfg, seed)?;
        model.randomize_norm_stats(&mut rng);
        let img = Tensor::<f64>::uniform([2, 3, 8, 8], 0.0, 255.0, &mut rng);
        out.push(finite_diff_check(
            &format!("model ({})", mode.as_str()),
            &[img],
            |g, ids| {
                let y = model.clone().forward_graph_raw(g, ids[0], true)?;
                weighted_sum(g, y, 11)
            },
            NETWORK_STEP,
            tol,
        )?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::<f64>::full([1, 1, 1, 1], 3.0);
        let r = finite_diff_check(
            "square",
            &[x],
            |g, ids| {
                let y = g.mul(ids[0], ids[0])?;
                Ok(g.sum(y))
            },
            1e-4,
            1e-8,
        )
        .unwrap();
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn wrong_gradient_is_caught() {
        // The graph's clip masks gradients outside [lo, hi]; probing exactly
        // at a kink with a huge step makes the estimates disagree.
        let x = Tensor::<f64>::full([1, 1, 1, 1], 1.0);
        let r = finite_diff_check(
            "clip at kink",
            &[x],
            |g, ids| {
                let y = g.clip(ids[0], 0.0, 1.0);
                Ok(g.sum(y))
            },
            0.5,
            1e-4,
        )
        .unwrap();
        assert!(!r.pass);
    }

    #[test]
    fn probes_cover_ends() {
        assert_eq!(probe_indices(3, 16), vec![0, 1, 2]);
        let p = probe_indices(100, 5);
        assert_eq!((p[0], p[4], p.len()), (0, 99, 5));
    }
}
