//! Structural reparameterisation: collapse every multi-branch block into one
//! convolution and fold the I/O and residual scalars into weights.
//!
//! All arithmetic happens in f64; each output tensor is cast to f32 once.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{FastShadeModel, Topology, PIXEL_SCALE};
use crate::nn::{BatchNorm, Conv2d, ConvUnit, MbrConv};
use crate::tensor::{Conv2dParams, Tensor};

/// Convolution weights held in double precision during fusion.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvF64 {
    /// `[cout, cin, k, k]`
    pub dims: [usize; 4],
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvF64 {
    pub fn from_conv(conv: &Conv2d) -> Self {
        let dims = conv.weight.dims();
        Self {
            dims,
            weight: conv.weight.data().iter().map(|&v| v as f64).collect(),
            bias: match &conv.bias {
                Some(b) => b.data().iter().map(|&v| v as f64).collect(),
                None => vec![0.0; dims[0]],
            },
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.weight
            .iter_mut()
            .chain(self.bias.iter_mut())
            .for_each(|v| *v *= s);
    }

    /// The one cast back to f32.
    pub fn into_conv(self, params: Conv2dParams) -> Conv2d {
        let weight = Tensor::from_vec(self.dims, self.weight.iter().map(|&v| v as f32).collect())
            .expect("fused weight size");
        let bias = Tensor::vector(self.bias.iter().map(|&v| v as f32).collect());
        Conv2d::new(weight, Some(bias), params)
    }

    /// Zero-pad a square kernel to `k x k`, centred.
    fn pad_to(&self, k: usize) -> Self {
        let [co, ci, kh, kw] = self.dims;
        if kh == k && kw == k {
            return self.clone();
        }
        let off = (k - kh) / 2;
        let mut w = vec![0.0; co * ci * k * k];
        for oc in 0..co * ci {
            for y in 0..kh {
                for x in 0..kw {
                    w[(oc * k + y + off) * k + x + off] = self.weight[(oc * kh + y) * kw + x];
                }
            }
        }
        Self {
            dims: [co, ci, k, k],
            weight: w,
            bias: self.bias.clone(),
        }
    }
}

/// Fold an eval-mode batch norm into the preceding convolution:
/// `w' = w * g / sqrt(var + eps)`, `b' = (b - mean) * g / sqrt(var + eps) + beta`.
pub fn fold_bn(conv: &Conv2d, bn: &BatchNorm) -> Result<ConvF64> {
    let mut c = ConvF64::from_conv(conv);
    let cout = c.dims[0];
    if bn.channels() != cout {
        return Err(Error::Structural(format!(
            "batch norm over {} channels follows a conv with {cout} outputs",
            bn.channels()
        )));
    }
    let per_out = c.weight.len() / cout;
    for o in 0..cout {
        let denom = bn.running_var.data()[o] as f64 + bn.eps;
        if denom <= 0.0 {
            return Err(Error::Numeric(format!(
                "var + eps = {denom} <= 0 in channel {o}"
            )));
        }
        let s = bn.gamma.data()[o] as f64 / denom.sqrt();
        c.weight[o * per_out..(o + 1) * per_out]
            .iter_mut()
            .for_each(|w| *w *= s);
        c.bias[o] = (c.bias[o] - bn.running_mean.data()[o] as f64) * s + bn.beta.data()[o] as f64;
    }
    Ok(c)
}

/// Geometry shared by every branch: largest kernel, its padding and stride.
fn common_geometry(m: &MbrConv) -> Result<(usize, Conv2dParams)> {
    let widest = m
        .branches
        .iter()
        .max_by_key(|b| b.conv.kernel())
        .ok_or_else(|| Error::Structural("MBRConv without branches".into()))?;
    let k = widest.conv.kernel();
    let p = widest.conv.params;
    for b in &m.branches {
        let (kb, pb) = (b.conv.kernel(), b.conv.params);
        let [_, _, kh, kw] = b.conv.weight.dims();
        let aligned = kh == kw && (k - kb) % 2 == 0 && pb.padding + (k - kb) / 2 == p.padding;
        if pb.stride != p.stride || pb.groups != 1 || !aligned {
            return Err(Error::Structural(format!(
                "branch ({kb}x{kb}, {pb:?}) cannot be merged with ({k}x{k}, {p:?})"
            )));
        }
    }
    let q = m.projection.params;
    if m.projection.kernel() != 1 || q.stride != 1 || q.padding != 0 || q.groups != 1 {
        return Err(Error::Structural(
            "MBRConv projection must be a plain 1x1 conv".into(),
        ));
    }
    Ok((k, p))
}

/// Collapse an MBRConv, staying in f64.
fn fuse_mbrconv_f64(m: &MbrConv) -> Result<(ConvF64, Conv2dParams)> {
    let (k, params) = common_geometry(m)?;
    let branches = m
        .branches
        .iter()
        .map(|b| Ok(fold_bn(&b.conv, &b.bn)?.pad_to(k)))
        .collect::<Result<Vec<_>>>()?;
    let proj = ConvF64::from_conv(&m.projection);
    let [cout, cat, _, _] = proj.dims;
    let cin = m.in_ch;
    let kernel_len = cin * k * k;
    let mut weight = vec![0.0; cout * kernel_len];
    let mut bias = proj.bias.clone();
    let mut j = 0;
    for br in &branches {
        for bo in 0..br.dims[0] {
            let src = &br.weight[bo * kernel_len..(bo + 1) * kernel_len];
            for o in 0..cout {
                let p = proj.weight[o * cat + j];
                if p == 0.0 {
                    continue;
                }
                let dst = &mut weight[o * kernel_len..(o + 1) * kernel_len];
                dst.iter_mut().zip(src).for_each(|(d, &s)| *d += p * s);
                bias[o] += p * br.bias[bo];
            }
            j += 1;
        }
    }
    debug_assert_eq!(j, cat);
    let fused = ConvF64 {
        dims: [cout, cin, k, k],
        weight,
        bias,
    };
    Ok((fused, params))
}

/// One dense `k x k` convolution computing the same eval-mode map.
pub fn fuse_mbrconv(m: &MbrConv) -> Result<Conv2d> {
    let (c, p) = fuse_mbrconv_f64(m)?;
    Ok(c.into_conv(p))
}

/// Replace every MBRConv with its fused convolution. Scalars stay at runtime.
pub fn fuse_branches(model: &FastShadeModel) -> Result<FastShadeModel> {
    let mut out = model.clone();
    for u in out.units_mut() {
        if let ConvUnit::Multi(m) = u {
            *u = ConvUnit::Fused(fuse_mbrconv(m)?);
        }
    }
    Ok(out)
}

fn scaled(conv: &Conv2d, s: f64) -> Conv2d {
    let mut c = ConvF64::from_conv(conv);
    c.scale(s);
    let had_bias = conv.bias.is_some();
    let mut out = c.into_conv(conv.params);
    if !had_bias {
        out.bias = None;
    }
    out.weight_kind = conv.weight_kind;
    out
}

/// Fold 1/255 into the first conv, x255 into the tail and each block's
/// residual scale into its fuse conv. The model must already be branch-fused.
pub fn fold_io_scalars(model: &FastShadeModel) -> Result<FastShadeModel> {
    match model.topology() {
        Topology::Training => {
            return Err(Error::Ordering(
                "fold_io_scalars needs every MBRConv fused first".into(),
            ))
        }
        Topology::Fused => return Err(Error::Ordering("I/O scalars are already folded".into())),
        Topology::BranchesFused => {}
    }
    let mut out = model.clone();
    out.down1.conv = scaled(&model.down1.conv, 1.0 / PIXEL_SCALE as f64);
    out.tail.conv = scaled(&model.tail.conv, PIXEL_SCALE as f64);
    for b in out.stage1.iter_mut().chain(out.stage2.iter_mut()) {
        if let Some(s) = b.res_scale.take() {
            let ConvUnit::Fused(c) = &b.fuse else {
                unreachable!("topology checked")
            };
            b.fuse = ConvUnit::Fused(scaled(c, s.item()? as f64));
        }
    }
    out.io_folded = true;
    Ok(out)
}

/// Full export: fuse branches and fold scalars. Every weight that absorbs a
/// scalar is scaled in f64 before its single cast. A fused model is returned
/// unchanged.
pub fn fuse_model(model: &FastShadeModel) -> Result<FastShadeModel> {
    match model.topology() {
        Topology::Fused => return Ok(model.clone()),
        Topology::BranchesFused => return fold_io_scalars(model),
        Topology::Training => {}
    }
    let mut out = model.clone();
    let fuse_unit = |u: &mut ConvUnit, s: f64| -> Result<()> {
        let ConvUnit::Multi(m) = u else {
            unreachable!("training topology")
        };
        let (mut c, p) = fuse_mbrconv_f64(m)?;
        c.scale(s);
        *u = ConvUnit::Fused(c.into_conv(p));
        Ok(())
    };
    for d in [&mut out.down1, &mut out.down2] {
        if let Some(u) = &mut d.projection {
            fuse_unit(u, 1.0)?;
        }
    }
    for b in out.stage1.iter_mut().chain(out.stage2.iter_mut()) {
        if let Some(u) = &mut b.lf {
            fuse_unit(u, 1.0)?;
        }
        if let Some(u) = &mut b.hf {
            fuse_unit(u, 1.0)?;
        }
        let s = match b.res_scale.take() {
            Some(s) => s.item()? as f64,
            None => 1.0,
        };
        fuse_unit(&mut b.fuse, s)?;
    }
    out.down1.conv = scaled(&model.down1.conv, 1.0 / PIXEL_SCALE as f64);
    out.tail.conv = scaled(&model.tail.conv, PIXEL_SCALE as f64);
    out.io_folded = true;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EquivalenceReport {
    pub n_trials: usize,
    /// Pre-rounding outputs, [0, 255] scale.
    pub max_abs_diff: f64,
    pub mean_abs_diff: f64,
    /// Share of pixels whose rounded, clipped values differ. Reported only.
    pub rounded_mismatch_fraction: f64,
    pub threshold: f64,
    pub pass: bool,
}

pub const EQUIVALENCE_SIZE: usize = 64;

/// Seeded random integer images in [0, 255].
pub fn random_images(n: usize, h: usize, w: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| Tensor::uniform([1, 3, h, w], 0.0, 255.0, &mut rng).map(f32::round))
        .collect()
}

/// Compare pre-rounding outputs of two models on `n_trials` random 64x64
/// integer images.
pub fn verify_equivalence(
    a: &FastShadeModel,
    b: &FastShadeModel,
    n_trials: usize,
    seed: u64,
    threshold: f64,
) -> Result<EquivalenceReport> {
    if a.config != b.config {
        return Err(Error::Structural(format!(
            "models have different configs: {:?} vs {:?}",
            a.config, b.config
        )));
    }
    let (mut max, mut sum, mut count, mut mismatched) = (0.0f64, 0.0f64, 0usize, 0usize);
    for img in random_images(n_trials, EQUIVALENCE_SIZE, EQUIVALENCE_SIZE, seed) {
        let ya = a.forward_raw(&img)?;
        let yb = b.forward_raw(&img)?;
        for (&p, &q) in ya.data().iter().zip(yb.data()) {
            let d = (p as f64 - q as f64).abs();
            // NaN poisons the maximum so the report cannot pass.
            max = if d.is_nan() { f64::NAN } else { max.max(d) };
            sum += d;
            let rp = p.round().clamp(0.0, PIXEL_SCALE);
            let rq = q.round().clamp(0.0, PIXEL_SCALE);
            mismatched += usize::from(rp != rq);
        }
        count += ya.numel();
    }
    let denom = count.max(1) as f64;
    Ok(EquivalenceReport {
        n_trials,
        max_abs_diff: max,
        mean_abs_diff: sum / denom,
        rounded_mismatch_fraction: mismatched as f64 / denom,
        threshold,
        pass: max <= threshold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, FastShadeConfig};
    use crate::nn::{MbrBranch, Module};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn unit_bn(c: usize) -> BatchNorm {
        BatchNorm {
            eps: 0.0,
            ..BatchNorm::new(c)
        }
    }

    #[test]
    fn fold_bn_affine_identity() {
        let conv = Conv2d::new(
            Tensor::full([1, 1, 1, 1], 1.0),
            Some(Tensor::vector(vec![0.0])),
            Conv2dParams::default(),
        );
        let mut bn = unit_bn(1);
        let unchanged = fold_bn(&conv, &bn).unwrap();
        assert_eq!((unchanged.weight[0], unchanged.bias[0]), (1.0, 0.0));
        bn.gamma = Tensor::vector(vec![2.0]);
        bn.beta = Tensor::vector(vec![1.0]);
        let f = fold_bn(&conv, &bn).unwrap();
        assert_eq!((f.weight[0], f.bias[0]), (2.0, 1.0));
        bn.running_var = Tensor::vector(vec![-1.0]);
        assert!(matches!(fold_bn(&conv, &bn), Err(Error::Numeric(_))));
    }

    #[test]
    fn fold_bn_matches_conv_then_bn() {
        let mut r = rng(0);
        let conv = Conv2d::init(5, 7, 3, Conv2dParams::same(3), true, &mut r);
        let mut bn = BatchNorm::new(7);
        bn.randomize(&mut r);
        let x = Tensor::uniform([2, 5, 9, 8], -1.0, 1.0, &mut r);
        let want = bn.forward(&conv.forward(&x).unwrap()).unwrap();
        let got = fold_bn(&conv, &bn)
            .unwrap()
            .into_conv(conv.params)
            .forward(&x)
            .unwrap();
        assert!(got.max_abs_diff(&want).unwrap() <= 1e-5);
    }

    #[test]
    fn single_branch_identity_projection() {
        let mut r = rng(1);
        let w = Tensor::uniform([3, 3, 3, 3], -1.0, 1.0, &mut r);
        let mut proj = Tensor::zeros([3, 3, 1, 1]);
        for i in 0..3 {
            proj.set(i, i, 0, 0, 1.0);
        }
        let m = MbrConv::from_parts(
            3,
            vec![MbrBranch {
                conv: Conv2d::new(w.clone(), None, Conv2dParams::same(3)),
                bn: unit_bn(3),
            }],
            Conv2d::new(proj, None, Conv2dParams::default()),
        )
        .unwrap();
        assert_eq!(fuse_mbrconv(&m).unwrap().weight, w);
    }

    #[test]
    fn pointwise_branch_lands_at_centre() {
        let w = Tensor::from_vec([1, 1, 1, 1], vec![0.75]).unwrap();
        let m = MbrConv::from_parts(
            3,
            vec![
                MbrBranch {
                    conv: Conv2d::new(Tensor::zeros([1, 1, 3, 3]), None, Conv2dParams::same(3)),
                    bn: unit_bn(1),
                },
                MbrBranch {
                    conv: Conv2d::new(w, None, Conv2dParams::default()),
                    bn: unit_bn(1),
                },
            ],
            Conv2d::new(
                Tensor::full([1, 2, 1, 1], 1.0),
                None,
                Conv2dParams::default(),
            ),
        )
        .unwrap();
        let f = fuse_mbrconv(&m).unwrap();
        let mut want = [0.0; 9];
        want[4] = 0.75;
        assert_eq!(f.weight.data(), &want[..]);
        assert_eq!(f.params, Conv2dParams::same(3));
    }

    #[test]
    fn mismatched_strides_rejected() {
        let mut r = rng(2);
        let mut m = MbrConv::new(2, 2, 3, &mut r);
        m.branches[1].conv.params.stride = 2;
        assert!(matches!(fuse_mbrconv(&m), Err(Error::Structural(_))));
    }

    #[test]
    fn random_mbrconv_equivalence() {
        let mut r = rng(3);
        for k in [1, 3, 5] {
            let mut m = MbrConv::new(6, 8, k, &mut r);
            for b in &mut m.branches {
                b.bn.randomize(&mut r);
            }
            let f = fuse_mbrconv(&m).unwrap();
            for _ in 0..10 {
                let x = Tensor::uniform([1, 6, 12, 12], 0.0, 255.0, &mut r);
                let d = f.forward(&x).unwrap().max_abs_diff(&m.forward(&x).unwrap());
                assert!(d.unwrap() <= 1e-4 * 255.0, "k={k}");
            }
        }
    }

    #[test]
    fn fold_ordering_and_residual_scale() {
        let m = build_model(&FastShadeConfig::tiny(), 0).unwrap();
        assert!(matches!(fold_io_scalars(&m), Err(Error::Ordering(_))));
        let b = fuse_branches(&m).unwrap();
        assert_eq!(b.topology(), Topology::BranchesFused);
        let f = fold_io_scalars(&b).unwrap();
        assert_eq!(f.topology(), Topology::Fused);
        assert!(matches!(fold_io_scalars(&f), Err(Error::Ordering(_))));
        let (ConvUnit::Fused(before), ConvUnit::Fused(after)) =
            (&b.stage1[0].fuse, &f.stage1[0].fuse)
        else {
            panic!("expected fused units")
        };
        let s = (0.2f32 as f64 * before.weight.data()[0] as f64) as f32;
        assert_eq!(after.weight.data()[0], s);
        assert!(f.stage1[0].res_scale.is_none());
        let rep = verify_equivalence(&b, &f, 4, 0, 1e-4).unwrap();
        assert!(rep.pass, "{rep:?}");
    }

    #[test]
    fn zero_tail_survives_folding() {
        let mut m = build_model(&FastShadeConfig::tiny(), 1).unwrap();
        m.tail.zero();
        let f = fuse_model(&m).unwrap();
        let x = random_images(1, 16, 16, 0).pop().unwrap();
        assert_eq!(f.forward(&x).unwrap(), x);
    }

    #[test]
    fn fuse_model_properties() {
        let mut m = build_model(&FastShadeConfig::m(), 2).unwrap();
        m.randomize_norm_stats(&mut rng(2));
        let f = fuse_model(&m).unwrap();
        assert!(f.param_count() < m.param_count());
        assert_eq!(fuse_model(&f).unwrap(), f);
        let mut bn_count = 0;
        f.visit("", &mut |n, _, _| {
            bn_count += usize::from(n.contains(".bn."))
        });
        assert_eq!(bn_count, 0);
        let rep = verify_equivalence(&m, &f, 3, 9, 1e-4).unwrap();
        assert!(rep.pass && rep.max_abs_diff >= rep.mean_abs_diff, "{rep:?}");
        // The one-pass export and the two-step route agree.
        let two_step = fold_io_scalars(&fuse_branches(&m).unwrap()).unwrap();
        assert!(verify_equivalence(&two_step, &f, 2, 1, 1e-4).unwrap().pass);
    }

    #[test]
    fn verify_detects_perturbation_and_mismatch() {
        let m = build_model(&FastShadeConfig::tiny(), 3).unwrap();
        let same = verify_equivalence(&m, &m, 2, 0, 1e-4).unwrap();
        assert_eq!(same.max_abs_diff, 0.0);
        let mut p = m.clone();
        let w = p.tail.conv.weight.data_mut();
        w[0] += 0.1;
        assert!(!verify_equivalence(&m, &p, 2, 0, 1e-4).unwrap().pass);
        let other = build_model(&FastShadeConfig::m(), 3).unwrap();
        assert!(matches!(
            verify_equivalence(&m, &other, 1, 0, 1e-4),
            Err(Error::Structural(_))
        ));
    }
}
