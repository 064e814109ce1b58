//! Two-stage training: AdamW, a per-epoch cosine schedule, an EMA of the
//! weights, and procedurally generated noisy/clean pairs for desk-scale runs.

use std::collections::BTreeMap;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::augment::{augment_sample, random_crop, AugmentPolicy, NoisePair, PairDataset};
use crate::error::{shape_err, Error, Result};
use crate::metrics::{self, CHARBONNIER_EPS, PIXEL_MAX, PSNR_LOSS_FLOOR};
use crate::model::FastShadeModel;
use crate::nn::{Module, ParamKind};
use crate::tensor::{Gradients, Graph, Tensor};

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f32>,
    v: Vec<f32>,
}

/// Optimizer state: hyperparameters, step count and per-tensor moments keyed
/// by parameter name.
#[derive(Clone, Debug)]
pub struct AdamWState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    moments: BTreeMap<String, Moments>,
}

impl AdamWState {
    pub const BETAS: (f64, f64) = (0.9, 0.999);
    pub const EPS: f64 = 1e-8;
    pub const DEFAULT_WEIGHT_DECAY: f64 = 0.01;

    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: Self::BETAS.0,
            beta2: Self::BETAS.1,
            eps: Self::EPS,
            weight_decay,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Drop all moments and restart the step count.
    pub fn reset(&mut self) {
        self.step = 0;
        self.moments.clear();
    }

    pub fn moment_len(&self, name: &str) -> Option<usize> {
        self.moments.get(name).map(|m| m.m.len())
    }

    /// One update of a single tensor at the current step count. `grad` of
    /// `None` means a zero gradient.
    fn update(&mut self, name: &str, param: &mut Tensor, grad: Option<&Tensor>) -> Result<()> {
        if let Some(g) = grad {
            if g.shape() != param.shape() {
                return Err(shape_err!(
                    "gradient for {name} has shape {}, parameter {}",
                    g.shape(),
                    param.shape()
                ));
            }
        }
        let n = param.numel();
        let mo = self
            .moments
            .entry(name.to_owned())
            .or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
        if mo.m.len() != n {
            return Err(shape_err!(
                "moments for {name} hold {} values, parameter {n}",
                mo.m.len()
            ));
        }
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        let decay = 1.0 - self.lr * self.weight_decay;
        for (i, p) in param.data_mut().iter_mut().enumerate() {
            let g = grad.map_or(0.0, |g| g.data()[i] as f64);
            let m = b1 * mo.m[i] as f64 + (1.0 - b1) * g;
            let v = b2 * mo.v[i] as f64 + (1.0 - b2) * g * g;
            mo.m[i] = m as f32;
            mo.v[i] = v as f32;
            let upd = (m / c1) / ((v / c2).sqrt() + self.eps);
            *p = (*p as f64 * decay - self.lr * upd) as f32;
        }
        Ok(())
    }
}

/// Advance the step count and update every trainable tensor of `model` from
/// `grads`, matched by name. Trainable tensors absent from `grads` get a zero
/// gradient (decay still applies).
pub fn adamw_step<M: Module + ?Sized>(
    state: &mut AdamWState,
    model: &mut M,
    grads: &Gradients,
) -> Result<()> {
    state.step += 1;
    let mut err = None;
    model.visit_mut("", &mut |name, t, kind| {
        if kind != ParamKind::Trainable || err.is_some() {
            return;
        }
        if let Err(e) = state.update(name, t, grads.by_name(name)) {
            err = Some(e);
        }
    });
    err.map_or(Ok(()), Err)
}

/// `lr_min + (lr_max - lr_min) (1 + cos(pi t / T)) / 2` for `0 <= t <= T`.
pub fn cosine_lr(t: usize, total: usize, lr_max: f64, lr_min: f64) -> Result<f64> {
    if total == 0 || t > total {
        return Err(Error::Contract(format!(
            "cosine schedule needs 0 <= t <= T, T >= 1 (t={t}, T={total})"
        )));
    }
    let c = (std::f64::consts::PI * t as f64 / total as f64).cos();
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + c))
}

/// Exponential moving average of every tensor of a model, buffers included.
#[derive(Clone, Debug)]
pub struct EmaState<M> {
    pub shadow: M,
    pub decay: f64,
    /// Use `min(decay, (1 + n) / (10 + n))` at update `n`, so short runs are
    /// not dominated by the initial weights.
    pub warmup: bool,
    pub updates: u64,
}

impl<M: Module + Clone> EmaState<M> {
    pub const DECAY: f64 = 0.999;

    pub fn new(model: &M, decay: f64, warmup: bool) -> Self {
        Self {
            shadow: model.clone(),
            decay,
            warmup,
            updates: 0,
        }
    }

    pub fn current_decay(&self) -> f64 {
        if self.warmup {
            let n = self.updates as f64;
            self.decay.min((1.0 + n) / (10.0 + n))
        } else {
            self.decay
        }
    }

    /// `shadow = d * shadow + (1 - d) * param`, elementwise.
    pub fn update(&mut self, model: &M) -> Result<()> {
        let d = self.current_decay();
        let mut src: Vec<(String, Tensor)> = Vec::new();
        model.visit("", &mut |n, t, _| src.push((n.to_owned(), t.clone())));
        let mut i = 0;
        let mut err = None;
        self.shadow.visit_mut("", &mut |n, s, _| {
            if err.is_some() {
                return;
            }
            match src.get(i) {
                Some((sn, p)) if sn == n && p.shape() == s.shape() => {
                    for (a, &b) in s.data_mut().iter_mut().zip(p.data()) {
                        *a = (d * *a as f64 + (1.0 - d) * b as f64) as f32;
                    }
                }
                Some((sn, p)) => {
                    err = Some(shape_err!(
                        "EMA shadow {n} {} does not match parameter {sn} {}",
                        s.shape(),
                        p.shape()
                    ))
                }
                None => err = Some(shape_err!("model has no tensor for EMA shadow {n}")),
            }
            i += 1;
        });
        if err.is_none() && i != src.len() {
            err = Some(shape_err!(
                "model has {} tensors, EMA shadow {i}",
                src.len()
            ));
        }
        self.updates += 1;
        err.map_or(Ok(()), Err)
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Charbonnier,
    Psnr,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub epochs: usize,
    /// Optimizer steps per epoch; `None` means one pass over the training
    /// pairs, `ceil(pairs / batch)`.
    pub steps_per_epoch: Option<usize>,
    pub patch_size: usize,
    pub batch: usize,
    pub loss: LossKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainPlan {
    pub stage1: StagePlan,
    pub stage2: StagePlan,
    pub lr_max: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub ema_decay: f64,
    pub ema_warmup: bool,
    pub augment: AugmentPolicy,
}

impl TrainPlan {
    /// 80 Charbonnier epochs on 256 patches, then 20 PSNR epochs on 512
    /// patches, batch 32.
    pub fn full() -> Self {
        Self {
            stage1: StagePlan {
                epochs: 80,
                steps_per_epoch: None,
                patch_size: 256,
                batch: 32,
                loss: LossKind::Charbonnier,
            },
            stage2: StagePlan {
                epochs: 20,
                steps_per_epoch: None,
                patch_size: 512,
                batch: 32,
                loss: LossKind::Psnr,
            },
            lr_max: 1e-3,
            lr_min: 1e-5,
            weight_decay: AdamWState::DEFAULT_WEIGHT_DECAY,
            ema_decay: EmaState::<FastShadeModel>::DECAY,
            ema_warmup: true,
            augment: AugmentPolicy::default(),
        }
    }

    /// 200 optimizer steps: 8 x 20 on 32 patches, then 2 x 20 on 48 patches.
    pub fn toy() -> Self {
        Self {
            stage1: StagePlan {
                epochs: 8,
                steps_per_epoch: Some(20),
                patch_size: 32,
                batch: 8,
                loss: LossKind::Charbonnier,
            },
            stage2: StagePlan {
                epochs: 2,
                steps_per_epoch: Some(20),
                patch_size: 48,
                batch: 8,
                loss: LossKind::Psnr,
            },
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        for (i, s) in [&self.stage1, &self.stage2].into_iter().enumerate() {
            let k = i + 1;
            if s.epochs == 0 {
                bad.push(format!("stage{k} epochs = 0"));
            }
            if s.steps_per_epoch == Some(0) {
                bad.push(format!("stage{k} steps_per_epoch = 0"));
            }
            if s.batch == 0 {
                bad.push(format!("stage{k} batch = 0"));
            }
            if s.patch_size == 0 || s.patch_size % 4 != 0 {
                bad.push(format!(
                    "stage{k} patch_size = {} not a positive multiple of 4",
                    s.patch_size
                ));
            }
        }
        if self.stage2.patch_size <= self.stage1.patch_size {
            bad.push(format!(
                "stage2 patch_size {} must exceed stage1 patch_size {}",
                self.stage2.patch_size, self.stage1.patch_size
            ));
        }
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr_max && self.lr_max.is_finite()) {
            bad.push(format!(
                "need 0 <= lr_min <= lr_max (got {} and {})",
                self.lr_min, self.lr_max
            ));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            bad.push(format!("weight_decay = {}", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            bad.push(format!("ema_decay = {} outside [0, 1)", self.ema_decay));
        }
        if let Err(Error::Config(m)) = self.augment.validate() {
            bad.push(m);
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }

    pub fn total_steps(&self, n_pairs: usize) -> usize {
        [&self.stage1, &self.stage2]
            .iter()
            .map(|s| s.epochs * steps_per_epoch(s, n_pairs))
            .sum()
    }
}

fn steps_per_epoch(s: &StagePlan, n_pairs: usize) -> usize {
    s.steps_per_epoch
        .unwrap_or_else(|| n_pairs.div_ceil(s.batch).max(1))
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseModel {
    Gaussian {
        sigma: f64,
    },
    /// Variance `a * clean + b`: scaled Poisson shot noise plus Gaussian read
    /// noise.
    PoissonGaussian {
        a: f64,
        b: f64,
    },
}

impl FromStr for NoiseModel {
    type Err = Error;

    /// `gaussian:SIGMA` or `poisson_gaussian:A:B`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let num = |v: &str| {
            v.parse::<f64>()
                .map_err(|_| Error::Config(format!("bad number {v:?} in noise model {s:?}")))
        };
        match parts.as_slice() {
            ["gaussian", sigma] => Ok(Self::Gaussian { sigma: num(sigma)? }),
            ["poisson_gaussian", a, b] => Ok(Self::PoissonGaussian {
                a: num(a)?,
                b: num(b)?,
            }),
            _ => Err(Error::Config(format!(
                "noise model {s:?}: expected gaussian:SIGMA or poisson_gaussian:A:B"
            ))),
        }
    }
}

fn synth_clean<R: Rng + ?Sized>(size: usize, rng: &mut R) -> Tensor {
    use std::f64::consts::TAU;
    let s = size as f64;
    let mut img = vec![[0.0f64; 3]; size * size];

    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(70.0..185.0));
    let grad: [(f64, f64); 3] =
        std::array::from_fn(|_| (rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0)));
    let wave_f = rng.random_range(0.5..2.0);
    let wave_a: f64 = rng.random_range(0.5..2.0);
    let (wave_dx, wave_dy) = (wave_a.cos(), wave_a.sin());
    let wave_amp = rng.random_range(5.0..20.0);
    let wave_ph: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..TAU));
    for y in 0..size {
        for x in 0..size {
            let (u, v) = (x as f64 / s - 0.5, y as f64 / s - 0.5);
            let t = (u * wave_dx + v * wave_dy) * wave_f * TAU;
            for c in 0..3 {
                img[y * size + x][c] =
                    base[c] + grad[c].0 * u + grad[c].1 * v + wave_amp * (t + wave_ph[c]).sin();
            }
        }
    }

    // Flat-coloured rectangles and discs give sharp edges; some carry a
    // fine stripe texture.
    for _ in 0..rng.random_range(2..=5) {
        let colour: [f64; 3] = {
            let l = rng.random_range(20.0..235.0);
            std::array::from_fn(|_| l + rng.random_range(-25.0..25.0))
        };
        let cy = rng.random_range(0.0..s);
        let cx = rng.random_range(0.0..s);
        let ry = rng.random_range(0.08..0.3) * s;
        let rx = rng.random_range(0.08..0.3) * s;
        let disc = rng.random_bool(0.5);
        let texture = rng.random_bool(0.5).then(|| {
            let f = rng.random_range(0.15..0.45);
            let a: f64 = rng.random_range(0.0..std::f64::consts::PI);
            (f * a.cos(), f * a.sin(), rng.random_range(4.0..12.0))
        });
        for y in 0..size {
            for x in 0..size {
                let (dy, dx) = ((y as f64 - cy) / ry, (x as f64 - cx) / rx);
                let inside = if disc {
                    dx * dx + dy * dy <= 1.0
                } else {
                    dx.abs() <= 1.0 && dy.abs() <= 1.0
                };
                if !inside {
                    continue;
                }
                let tex = texture.map_or(0.0, |(fx, fy, amp)| {
                    amp * (TAU * (fx * x as f64 + fy * y as f64)).sin()
                });
                img[y * size + x] = std::array::from_fn(|c| colour[c] + tex);
            }
        }
    }

    let mut t = Tensor::zeros([1, 3, size, size]);
    for c in 0..3 {
        for (d, px) in t.plane_mut(0, c).iter_mut().zip(&img) {
            *d = px[c].round().clamp(0.0, 255.0) as f32;
        }
    }
    t
}

fn add_noise<R: Rng + ?Sized>(clean: &Tensor, noise: NoiseModel, rng: &mut R) -> Result<Tensor> {
    let mut out = clean.clone();
    match noise {
        NoiseModel::Gaussian { sigma } => {
            let d = Normal::new(0.0, sigma)
                .map_err(|e| Error::Config(format!("gaussian noise: {e}")))?;
            for v in out.data_mut() {
                *v = (*v as f64 + d.sample(rng)).round().clamp(0.0, 255.0) as f32;
            }
        }
        NoiseModel::PoissonGaussian { a, b } => {
            let read = Normal::new(0.0, b.sqrt())
                .map_err(|e| Error::Config(format!("read noise: {e}")))?;
            for v in out.data_mut() {
                let lambda = *v as f64 / a;
                let shot = if lambda > 0.0 {
                    let p = Poisson::new(lambda)
                        .map_err(|e| Error::Config(format!("shot noise: {e}")))?;
                    a * p.sample(rng)
                } else {
                    0.0
                };
                *v = (shot + read.sample(rng)).round().clamp(0.0, 255.0) as f32;
            }
        }
    }
    Ok(out)
}

/// `n` procedurally generated `size x size` clean images (smooth gradients,
/// flat shapes with hard edges, striped textures) with seeded noise.
pub fn synth_dataset(
    n: usize,
    size: usize,
    noise: NoiseModel,
    seed: u64,
) -> Result<Vec<NoisePair>> {
    if size == 0 || !size.is_multiple_of(4) {
        return Err(Error::Contract(format!(
            "synthetic image size {size} must be a positive multiple of 4"
        )));
    }
    match noise {
        NoiseModel::Gaussian { sigma } if !(sigma > 0.0) => {
            return Err(Error::Config(format!(
                "gaussian sigma {sigma} must be positive"
            )))
        }
        NoiseModel::PoissonGaussian { a, b } if !(a > 0.0 && b >= 0.0) => {
            return Err(Error::Config(format!(
                "poisson_gaussian needs a > 0 and b >= 0 (got {a}, {b})"
            )))
        }
        _ => {}
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let clean = synth_clean(size, &mut rng);
            let noisy = add_noise(&clean, noise, &mut rng)?;
            NoisePair::new(clean, noisy, "synth")
        })
        .collect()
}

pub struct TrainData {
    pub train: PairDataset,
    /// Held-out full images; sides must be multiples of 4.
    pub val: Vec<NoisePair>,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: u8,
    /// Epoch within the stage, from 0.
    pub epoch: usize,
    /// Optimizer steps taken so far over both stages.
    pub step: usize,
    pub lr: f64,
    /// Mean training loss over the epoch.
    pub loss: f64,
    /// Mean validation PSNR of the EMA model.
    pub val_psnr: f64,
    pub raw_val_psnr: f64,
    pub noisy_val_psnr: f64,
    /// Mean validation Charbonnier loss of the EMA and the raw model.
    pub val_loss: f64,
    pub raw_val_loss: f64,
}

pub struct TrainOutcome {
    pub model: FastShadeModel,
    pub ema_model: FastShadeModel,
    pub log: Vec<EpochLog>,
}

impl TrainOutcome {
    pub fn log_jsonl(&self) -> String {
        self.log
            .iter()
            .map(|r| serde_json::to_string(r).expect("log records serialise") + "\n")
            .collect()
    }
}

struct ValStats {
    psnr: f64,
    loss: f64,
}

fn evaluate(model: &FastShadeModel, val: &[NoisePair]) -> Result<ValStats> {
    let (mut psnr, mut loss) = (0.0, 0.0);
    for p in val {
        let out = model.forward(&p.noisy)?;
        psnr += capped_psnr(&out, &p.clean)?;
        loss += metrics::charbonnier_loss(&out, &p.clean, CHARBONNIER_EPS)?;
    }
    let n = val.len() as f64;
    Ok(ValStats {
        psnr: psnr / n,
        loss: loss / n,
    })
}

/// PSNR with an exact match counted as 100 dB so averages stay finite.
fn capped_psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok(metrics::psnr(a, b, PIXEL_MAX)?.min(100.0))
}

fn sample_batch<R: Rng + ?Sized>(
    data: &PairDataset,
    stage: &StagePlan,
    policy: &AugmentPolicy,
    rng: &mut R,
) -> Result<(Tensor, Tensor)> {
    let mut noisy = Vec::with_capacity(stage.batch);
    let mut clean = Vec::with_capacity(stage.batch);
    for _ in 0..stage.batch {
        let p = &data.pairs[rng.random_range(0..data.pairs.len())];
        let crop = random_crop(p, stage.patch_size, rng)?;
        let s = augment_sample(&crop, policy, rng)?;
        noisy.push(s.noisy);
        clean.push(s.clean);
    }
    Ok((Tensor::stack(&noisy)?, Tensor::stack(&clean)?))
}

/// Run both stages and return the raw model, the EMA model (the one to
/// evaluate) and the per-epoch log.
pub fn train_two_stage<R: Rng + ?Sized>(
    model: FastShadeModel,
    plan: &TrainPlan,
    data: &TrainData,
    rng: &mut R,
) -> Result<TrainOutcome> {
    train_two_stage_with(model, plan, data, rng, &mut |_| {})
}

/// As [`train_two_stage`], calling `on_epoch` after each logged epoch.
pub fn train_two_stage_with<R: Rng + ?Sized>(
    mut model: FastShadeModel,
    plan: &TrainPlan,
    data: &TrainData,
    rng: &mut R,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    plan.validate()?;
    if data.train.pairs.is_empty() {
        return Err(Error::Dataset("no training pairs".into()));
    }
    if data.val.is_empty() {
        return Err(Error::Dataset("no validation pairs".into()));
    }
    if !matches!(model.topology(), crate::Topology::Training) {
        return Err(Error::Ordering(
            "only an unfused model can be trained".into(),
        ));
    }
    let noisy_val_psnr = data
        .val
        .iter()
        .map(|p| capped_psnr(&p.noisy, &p.clean))
        .sum::<Result<f64>>()?
        / data.val.len() as f64;

    let mut ema = EmaState::new(&model, plan.ema_decay, plan.ema_warmup);
    let mut log = Vec::new();
    let mut step = 0usize;
    for (k, stage) in [(1u8, &plan.stage1), (2u8, &plan.stage2)] {
        let mut opt = AdamWState::new(plan.lr_max, plan.weight_decay);
        let spe = steps_per_epoch(stage, data.train.pairs.len());
        for epoch in 0..stage.epochs {
            opt.lr = cosine_lr(epoch, stage.epochs, plan.lr_max, plan.lr_min)?;
            let mut loss_sum = 0.0;
            for _ in 0..spe {
                let (noisy, clean) = sample_batch(&data.train, stage, &plan.augment, rng)?;
                let mut g = Graph::<f32>::new();
                let x = g.input(noisy);
                let t = g.input(clean);
                let y = model.forward_graph(&mut g, x, true)?;
                let loss = match stage.loss {
                    LossKind::Charbonnier => g.charbonnier(y, t, CHARBONNIER_EPS)?,
                    LossKind::Psnr => g.psnr_loss(y, t, PIXEL_MAX, PSNR_LOSS_FLOOR)?,
                };
                let lv = g.value(loss).item()? as f64;
                if !lv.is_finite() {
                    return Err(Error::Diverged(format!(
                        "stage {k} epoch {epoch} step {step}: loss = {lv}"
                    )));
                }
                let grads = g.backward(loss)?;
                adamw_step(&mut opt, &mut model, &grads)?;
                ema.update(&model)?;
                loss_sum += lv;
                step += 1;
            }
            let ev = evaluate(&ema.shadow, &data.val)?;
            let raw = evaluate(&model, &data.val)?;
            let rec = EpochLog {
                stage: k,
                epoch,
                step,
                lr: opt.lr,
                loss: loss_sum / spe as f64,
                val_psnr: ev.psnr,
                raw_val_psnr: raw.psnr,
                noisy_val_psnr,
                val_loss: ev.loss,
                raw_val_loss: raw.loss,
            };
            on_epoch(&rec);
            log.push(rec);
        }
    }
    Ok(TrainOutcome {
        model,
        ema_model: ema.shadow,
        log,
    })
}
