//! Randomised invariants.

mod common;

use common::*;
use fastshade::augment::{
    augment_sample, extract_noise, geo_apply, noise_shift_with, shift_noise, AugmentPolicy,
    GeoTransform, NoisePair,
};
use fastshade::metrics::{
    challenge_score, charbonnier_loss, psnr, ssim, ScoreInput, CHARBONNIER_EPS, PIXEL_MAX,
};
use fastshade::model::BlockTap;
use fastshade::nn::{split_channels, Afdb, BatchNorm, Conv2d, ConvUnit, MbrConv, Module, Sgu};
use fastshade::reparam::{fold_bn, fuse_mbrconv, fuse_model};
use fastshade::spectral::{fft2d_magnitude_plane, radial_power_spectrum};
use fastshade::tensor::{conv2d, conv2d_direct, ops, Conv2dParams};
use fastshade::trainer::cosine_lr;
use fastshade::{build_model, FastShadeConfig, Tensor};
use proptest::prelude::*;

fn cfg(cases: u32) -> ProptestConfig {
    ProptestConfig {
        cases,
        ..ProptestConfig::default()
    }
}

fn tiny(seed: u64) -> fastshade::FastShadeModel {
    build_model(&FastShadeConfig::tiny(), seed).unwrap()
}

fn image(seed: u64, h: usize, w: usize) -> Tensor {
    Tensor::uniform([1, 3, h, w], 0.0, 255.0, &mut rng(seed)).map(f32::round)
}

proptest! {
    #![proptest_config(cfg(48))]

    #[test]
    fn gemm_conv_equals_direct_conv(
        seed in any::<u64>(), n in 1usize..3, g in 1usize..4, cin_g in 1usize..4,
        cout_g in 1usize..4, k in 1usize..4, stride in 1usize..3, pad in 0usize..3,
        h in 3usize..9, w in 3usize..9,
    ) {
        prop_assume!(h + 2 * pad >= k && w + 2 * pad >= k);
        let mut r = rng(seed);
        let x: Tensor = Tensor::uniform([n, g * cin_g, h, w], -1.0, 1.0, &mut r);
        let wt = Tensor::uniform([g * cout_g, cin_g, k, k], -1.0, 1.0, &mut r);
        let b = Tensor::uniform([1, g * cout_g, 1, 1], -1.0, 1.0, &mut r);
        let p = Conv2dParams::new(stride, pad, g);
        let fast = conv2d(&x, &wt, Some(&b), p).unwrap();
        let slow = conv2d_direct(&x, &wt, Some(&b), p).unwrap();
        prop_assert!(fast.max_abs_diff(&slow).unwrap() < 1e-5);
    }

    #[test]
    fn depthwise_equals_per_channel_conv(seed in any::<u64>(), c in 1usize..6, k in 1usize..4) {
        let mut r = rng(seed);
        let x: Tensor = Tensor::uniform([1, c, 6, 5], -1.0, 1.0, &mut r);
        let wt = Tensor::uniform([c, 1, k, k], -1.0, 1.0, &mut r);
        let p = Conv2dParams::new(1, k / 2, c);
        let y = conv2d(&x, &wt, None, p).unwrap();
        for ch in 0..c {
            let xc = ops::slice_channels(&x, ch, 1).unwrap();
            let wc = wt.batch_slice(ch, 1).unwrap();
            let yc = conv2d(&xc, &wc, None, Conv2dParams::same(k)).unwrap();
            let want = ops::slice_channels(&y, ch, 1).unwrap();
            prop_assert_eq!(yc.data(), want.data());
        }
    }

    #[test]
    fn pixel_shuffle_round_trips(seed in any::<u64>(), c in 1usize..4, r in 1usize..4, h in 1usize..5) {
        let x: Tensor = Tensor::uniform([2, c * r * r, h, h + 1], -1.0, 1.0, &mut rng(seed));
        let y = ops::pixel_shuffle(&x, r).unwrap();
        prop_assert_eq!(y.dims(), [2, c, h * r, (h + 1) * r]);
        prop_assert_eq!(ops::pixel_unshuffle(&y, r).unwrap(), x);
    }

    #[test]
    fn afdb_keeps_shape_and_zero_scale_is_identity(
        seed in any::<u64>(), c in 1usize..20, ratio in 0.0f64..=1.0, h in 1usize..7, w in 1usize..7,
    ) {
        let mut r = rng(seed);
        let mut b = Afdb::new(c, ratio, 0.2, &mut r);
        let x = Tensor::uniform([1, c, h, w], -2.0, 2.0, &mut r);
        prop_assert_eq!(b.forward(&x).unwrap().dims(), x.dims());
        b.res_scale = Some(Tensor::scalar(0.0));
        prop_assert_eq!(b.forward(&x).unwrap(), x);
    }

    #[test]
    fn split_uses_floor(c in 1usize..200, ratio in 0.0f64..=1.0) {
        let (lf, hf) = split_channels(c, ratio);
        prop_assert_eq!(lf + hf, c);
        prop_assert_eq!(lf, (ratio * c as f64).floor() as usize);
    }

    #[test]
    fn sgu_mask_in_open_unit_interval(seed in any::<u64>(), dw in any::<bool>(), scale in 0.1f64..20.0) {
        let mut r = rng(seed);
        let s = Sgu::new(8, 4, dw, &mut r);
        let lr = Tensor::uniform([1, 8, 3, 3], -scale, scale, &mut r);
        let m = s.mask(&lr).unwrap();
        prop_assert_eq!(m.dims(), [1, 4, 6, 6]);
        prop_assert!(m.data().iter().all(|&v| v > 0.0 && v < 1.0));
        let main = ops::pixel_shuffle(&s.proj_main.forward(&lr).unwrap(), 2).unwrap();
        prop_assert_eq!(s.forward(&lr, &Tensor::zeros([1, 4, 6, 6])).unwrap(), main);
    }

    #[test]
    fn mbrconv_eval_is_affine(seed in any::<u64>(), k in prop::sample::select(vec![1usize, 3, 5])) {
        let mut r = rng(seed);
        let mut u = ConvUnit::Multi(MbrConv::new(3, 3, k, &mut r));
        u.randomize_norms(&mut r);
        let x1 = Tensor::uniform([1, 3, 6, 6], 0.0, 255.0, &mut r);
        let x2 = Tensor::uniform([1, 3, 6, 6], 0.0, 255.0, &mut r);
        let f = |x: &Tensor| f64s(&u.forward(x).unwrap());
        let (a, b, s, z) = (f(&x1), f(&x2), f(&x1.add(&x2).unwrap()), f(&Tensor::zeros([1, 3, 6, 6])));
        let scale = s.iter().map(|v| v.abs()).fold(1.0, f64::max);
        for i in 0..a.len() {
            prop_assert!((s[i] - a[i] - b[i] + z[i]).abs() <= 1e-4 * scale);
        }
    }

    #[test]
    fn fold_bn_matches_conv_then_bn(seed in any::<u64>(), k in 1usize..4, with_bias in any::<bool>()) {
        let mut r = rng(seed);
        let conv = Conv2d::init(3, 4, k, Conv2dParams::same(k), with_bias, &mut r);
        let mut conv = conv;
        if let Some(b) = &mut conv.bias {
            *b = Tensor::uniform(b.dims(), -1.0, 1.0, &mut r);
        }
        let mut bn = BatchNorm::new(4);
        bn.randomize(&mut r);
        let x = Tensor::uniform([2, 3, 5, 5], -1.0, 1.0, &mut r);
        let want = bn.forward(&conv.forward(&x).unwrap()).unwrap();
        let folded = fold_bn(&conv, &bn).unwrap().into_conv(conv.params);
        prop_assert!(folded.forward(&x).unwrap().max_abs_diff(&want).unwrap() <= 1e-5);
    }

    #[test]
    fn fused_mbrconv_matches_branches(seed in any::<u64>(), k in prop::sample::select(vec![1usize, 3, 5])) {
        let mut r = rng(seed);
        let mut u = ConvUnit::Multi(MbrConv::new(4, 4, k, &mut r));
        u.randomize_norms(&mut r);
        let ConvUnit::Multi(m) = &u else { unreachable!() };
        let x = Tensor::uniform([1, 4, 8, 8], 0.0, 255.0, &mut r);
        let y = m.forward(&x).unwrap();
        let fy = fuse_mbrconv(m).unwrap().forward(&x).unwrap();
        let scale = y.data().iter().fold(1.0f64, |a, &v| a.max(v.abs() as f64));
        prop_assert!(y.max_abs_diff(&fy).unwrap() <= 1e-6 * scale.max(100.0));
    }

    #[test]
    fn charbonnier_at_least_eps(seed in any::<u64>(), spread in 0.0f64..50.0) {
        let mut r = rng(seed);
        let a: Tensor = Tensor::uniform([1, 3, 4, 4], 0.0, 255.0, &mut r);
        let b = a.add(&Tensor::uniform([1, 3, 4, 4], -spread, spread, &mut r)).unwrap();
        let l = charbonnier_loss(&a, &b, CHARBONNIER_EPS).unwrap();
        prop_assert!(l >= CHARBONNIER_EPS);
        prop_assert_eq!(charbonnier_loss(&a, &a, CHARBONNIER_EPS).unwrap(), CHARBONNIER_EPS);
    }

    #[test]
    fn psnr_strictly_decreasing_in_error(d1 in 0.01f32..100.0, extra in 0.01f32..100.0) {
        let a = Tensor::full([1, 3, 4, 4], 100.0f32);
        let near = a.map(|v| v + d1);
        let far = a.map(|v| v + d1 + extra);
        prop_assert!(psnr(&a, &near, PIXEL_MAX).unwrap() > psnr(&a, &far, PIXEL_MAX).unwrap());
    }

    #[test]
    fn score_monotone(p in 30.0f64..45.0, dp in 0.001f64..2.0, t in 0.001f64..5.0, dt in 0.001f64..1.0) {
        let s = |psnr_db, runtime_s| challenge_score(ScoreInput { psnr_db, runtime_s }).unwrap();
        prop_assert!(s(p + dp, t) > s(p, t));
        prop_assert!(s(p, t + dt) < s(p, t));
    }

    #[test]
    fn ssim_symmetric(seed in any::<u64>()) {
        let mut r = rng(seed);
        let a: Tensor = Tensor::uniform([1, 2, 12, 13], 0.0, 255.0, &mut r);
        let b: Tensor = Tensor::uniform([1, 2, 12, 13], 0.0, 255.0, &mut r);
        prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() <= 1e-9);
        prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn cosine_stays_in_bounds(total in 1usize..200, frac in 0.0f64..=1.0) {
        let t = (frac * total as f64) as usize;
        let lr = cosine_lr(t, total, 1e-3, 1e-5).unwrap();
        prop_assert!((1e-5..=1e-3).contains(&lr));
        if t < total {
            prop_assert!(cosine_lr(t + 1, total, 1e-3, 1e-5).unwrap() <= lr);
        }
        prop_assert!(cosine_lr(total + 1, total, 1e-3, 1e-5).is_err());
    }
}

fn noise_field(seed: u64, h: usize, w: usize) -> Tensor {
    Tensor::uniform([1, 3, h, w], -30.0, 30.0, &mut rng(seed)).map(f32::round)
}

fn shift_strategy() -> impl Strategy<Value = (i32, i32)> {
    (-2i32..=2, -2i32..=2).prop_filter("null shift", |&s| s != (0, 0))
}

proptest! {
    #![proptest_config(cfg(64))]

    #[test]
    fn shift_interior_is_exact_translate(seed in any::<u64>(), (sx, sy) in shift_strategy(), h in 5usize..12, w in 5usize..12) {
        let n = noise_field(seed, h, w);
        let out = shift_noise(&n, sx, sy).unwrap();
        for c in 0..3 {
            for i in 2..h - 2 {
                for j in 2..w - 2 {
                    let si = (i as i32 - sy) as usize;
                    let sj = (j as i32 - sx) as usize;
                    prop_assert_eq!(out.at(0, c, i, j), n.at(0, c, si, sj));
                }
            }
        }
    }

    #[test]
    fn shift_keeps_clean_and_range(seed in any::<u64>(), (sx, sy) in shift_strategy()) {
        let mut r = rng(seed);
        let clean: Tensor = Tensor::uniform([1, 3, 8, 8], 0.0, 255.0, &mut r).map(f32::round);
        let noisy = clean.add(&noise_field(seed ^ 1, 8, 8)).unwrap().map(|v| v.clamp(0.0, 255.0));
        let pair = NoisePair::new(clean.clone(), noisy, "p").unwrap();
        let out = noise_shift_with(&pair, sx, sy).unwrap();
        prop_assert_eq!(&out.clean, &clean);
        prop_assert!(out.noisy.data().iter().all(|&v| (0.0..=255.0).contains(&v)));
    }

    #[test]
    fn unclipped_shift_commutes_with_extraction(seed in any::<u64>(), (sx, sy) in shift_strategy()) {
        let clean = Tensor::full([1, 3, 8, 8], 128.0f32);
        let pair = NoisePair::new(clean.clone(), clean.add(&noise_field(seed, 8, 8)).unwrap(), "p").unwrap();
        let out = noise_shift_with(&pair, sx, sy).unwrap();
        prop_assert_eq!(
            extract_noise(&out).unwrap(),
            shift_noise(&extract_noise(&pair).unwrap(), sx, sy).unwrap()
        );
    }

    #[test]
    fn geometry_commutes_with_extraction(seed in any::<u64>(), turns in 0u8..4, hf in any::<bool>(), vf in any::<bool>()) {
        let mut r = rng(seed);
        let clean: Tensor = Tensor::uniform([1, 3, 5, 7], 0.0, 255.0, &mut r).map(f32::round);
        let noisy: Tensor = Tensor::uniform([1, 3, 5, 7], 0.0, 255.0, &mut r).map(f32::round);
        let pair = NoisePair::new(clean, noisy, "p").unwrap();
        let g = GeoTransform { quarter_turns: turns, hflip: hf, vflip: vf };
        let out = geo_apply(&pair, g);
        prop_assert_eq!(extract_noise(&out).unwrap(), g.apply(&extract_noise(&pair).unwrap()));
        let mut a: Vec<u32> = pair.clean.data().iter().map(|v| *v as u32).collect();
        let mut b: Vec<u32> = out.clean.data().iter().map(|v| *v as u32).collect();
        a.sort();
        b.sort();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn augmentation_is_deterministic(seed in any::<u64>(), draw in any::<u64>()) {
        let mut r = rng(seed);
        let clean: Tensor = Tensor::uniform([1, 3, 8, 8], 0.0, 255.0, &mut r).map(f32::round);
        let noisy = clean.add(&noise_field(seed, 8, 8)).unwrap().map(|v| v.clamp(0.0, 255.0));
        let pair = NoisePair::new(clean, noisy, "p").unwrap();
        let policy = AugmentPolicy::default();
        let a = augment_sample(&pair, &policy, &mut rng(draw)).unwrap();
        let b = augment_sample(&pair, &policy, &mut rng(draw)).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn radial_bins_account_for_all_power(seed in any::<u64>(), h in 2usize..20, w in 2usize..20) {
        let mut r = rng(seed);
        let x: Tensor = Tensor::uniform([1, 1, h, w], -5.0, 5.0, &mut r);
        let spec = fft2d_magnitude_plane(x.data(), h, w).unwrap();
        let rs = radial_power_spectrum(&spec);
        let direct: f64 = spec.mag.iter().map(|m| m * m).sum();
        prop_assert!((rs.total_power() - direct).abs() <= 1e-6 * direct);
        prop_assert_eq!(rs.n_bins(), h.min(w) / 2);
        prop_assert!(rs.bins.iter().all(|&b| (0.0..=1.0).contains(&b)));
        prop_assert_eq!(radial_power_spectrum(&spec), rs);
    }
}

proptest! {
    #![proptest_config(cfg(12))]

    #[test]
    fn forward_is_pure(seed in any::<u64>()) {
        let m = tiny(seed);
        let img = image(seed, 16, 12);
        let a = m.forward_raw(&img).unwrap();
        let b = m.forward_raw(&img).unwrap();
        prop_assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        prop_assert_eq!(&tiny(seed), &m);
    }

    #[test]
    fn zero_tail_is_identity(seed in any::<u64>(), h in 1usize..5, w in 1usize..5) {
        for m in [tiny(seed), build_model(&FastShadeConfig::m(), seed).unwrap()] {
            let mut m = m;
            m.tail.zero();
            let img = image(seed, 4 * h, 4 * w);
            prop_assert_eq!(m.forward(&img).unwrap(), img.clone());
            prop_assert_eq!(fuse_model(&m).unwrap().forward(&img).unwrap(), img);
        }
    }

    #[test]
    fn eval_output_is_integer_in_range(seed in any::<u64>()) {
        let mut m = tiny(seed);
        m.tail.conv.weight = m.tail.conv.weight.scale(300.0);
        let out = m.forward(&image(seed, 16, 16)).unwrap();
        prop_assert_eq!(out.dims(), [1, 3, 16, 16]);
        prop_assert!(out.data().iter().all(|&v| v.fract() == 0.0 && (0.0..=255.0).contains(&v)));
    }

    #[test]
    fn skip_connection_shapes(seed in any::<u64>(), h in 1usize..4, w in 1usize..4) {
        let c = FastShadeConfig::tiny();
        let m = build_model(&c, seed).unwrap();
        let img = image(seed, 8 * h, 8 * w);
        let hr = m.block_taps(&img, BlockTap { stage: 1, index: c.n1 - 1 }).unwrap().out;
        let lr = m.block_taps(&img, BlockTap { stage: 2, index: c.n2 - 1 }).unwrap().out;
        prop_assert_eq!(hr.dims(), [1, c.c1, 4 * h, 4 * w]);
        prop_assert_eq!(lr.dims(), [1, c.c2, 2 * h, 2 * w]);
        prop_assert!(m.forward(&image(seed, 8 * h + 2, 8 * w)).is_err());
    }

    #[test]
    fn fused_model_has_no_norms_or_scalars(seed in any::<u64>()) {
        let m = tiny(seed);
        let f = fuse_model(&m).unwrap();
        let mut names = Vec::new();
        f.visit("", &mut |n, _, _| names.push(n.to_owned()));
        prop_assert!(names.iter().all(|n| !n.contains("bn") && !n.contains("res_scale")));
        prop_assert!(f.units().all(|u| u.is_fused()));
        prop_assert_eq!(f.units().count(), m.units().count());
        prop_assert!(f.param_count() < m.param_count());
        prop_assert_eq!(fuse_model(&f).unwrap(), f);
    }
}
