//! Training-pair augmentation: noise shifting, synthetic Gaussian noise,
//! rotations and flips, and multi-source batch composition.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::image_io;
use crate::tensor::{ops, Tensor};

/// Aligned clean and noisy `(1, 3, H, W)` images with values in [0, 255].
#[derive(Clone, Debug, PartialEq)]
pub struct NoisePair {
    pub clean: Tensor,
    pub noisy: Tensor,
    pub source_tag: String,
}

impl NoisePair {
    pub fn new(clean: Tensor, noisy: Tensor, source_tag: impl Into<String>) -> Result<Self> {
        clean.expect_same_shape(&noisy)?;
        let s = clean.shape();
        if s.n != 1 || s.c != 3 {
            return Err(shape_err!(
                "noise pair images must be (1, 3, H, W), got {s}"
            ));
        }
        let in_range = |t: &Tensor| t.data().iter().all(|v| (0.0..=255.0).contains(v));
        if !in_range(&clean) || !in_range(&noisy) {
            return Err(Error::Contract("pair values must lie in [0, 255]".into()));
        }
        Ok(Self {
            clean,
            noisy,
            source_tag: source_tag.into(),
        })
    }

    fn with_noisy(&self, noisy: Tensor) -> Self {
        Self {
            clean: self.clean.clone(),
            noisy,
            source_tag: self.source_tag.clone(),
        }
    }

    pub fn height(&self) -> usize {
        self.clean.shape().h
    }

    pub fn width(&self) -> usize {
        self.clean.shape().w
    }
}

/// `noisy - clean`.
pub fn extract_noise(pair: &NoisePair) -> Result<Tensor> {
    pair.noisy.sub(&pair.clean)
}

pub const SHIFT_BOUND: i32 = 2;

/// Translate a noise field by `(sx, sy)`, filling the border by reflection:
/// `out[c, i, j] = n[c, reflect(i - sy), reflect(j - sx)]`.
pub fn shift_noise(n: &Tensor, sx: i32, sy: i32) -> Result<Tensor> {
    if (sx, sy) == (0, 0) {
        return Err(Error::Contract(
            "zero shift leaves the noise unchanged".into(),
        ));
    }
    if sx.abs() > SHIFT_BOUND || sy.abs() > SHIFT_BOUND {
        return Err(Error::Contract(format!(
            "shift ({sx}, {sy}) exceeds bound {SHIFT_BOUND}"
        )));
    }
    let s = n.shape();
    let mut out = Tensor::zeros_like(n);
    for b in 0..s.n {
        for c in 0..s.c {
            let src = n.plane(b, c);
            let dst = out.plane_mut(b, c);
            for i in 0..s.h {
                let si = ops::reflect_index(i as isize - sy as isize, s.h);
                for j in 0..s.w {
                    let sj = ops::reflect_index(j as isize - sx as isize, s.w);
                    dst[i * s.w + j] = src[si * s.w + sj];
                }
            }
        }
    }
    Ok(out)
}

/// Which shifts count as valid draws.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftSet {
    /// Every `(sx, sy)` in `[-2, 2]²` except `(0, 0)`: 24 pairs.
    #[default]
    ExcludeJointZero,
    /// Both components nonzero: 16 pairs.
    ExcludeAxisZero,
}

impl ShiftSet {
    pub fn pairs(self) -> Vec<(i32, i32)> {
        let r = -SHIFT_BOUND..=SHIFT_BOUND;
        r.clone()
            .flat_map(|sy| r.clone().map(move |sx| (sx, sy)))
            .filter(|&(sx, sy)| match self {
                Self::ExcludeJointZero => (sx, sy) != (0, 0),
                Self::ExcludeAxisZero => sx != 0 && sy != 0,
            })
            .collect()
    }
}

fn clip_pixels(t: &Tensor) -> Tensor {
    ops::clip(t, 0.0, 255.0)
}

/// `noisy' = clip(clean + shift(noisy - clean, sx, sy))`.
pub fn noise_shift_with(pair: &NoisePair, sx: i32, sy: i32) -> Result<NoisePair> {
    let alt = shift_noise(&extract_noise(pair)?, sx, sy)?;
    Ok(pair.with_noisy(clip_pixels(&pair.clean.add(&alt)?)))
}

/// Noise shifting with a shift drawn uniformly from `set`.
pub fn noise_shift_augment<R: Rng + ?Sized>(
    pair: &NoisePair,
    set: ShiftSet,
    rng: &mut R,
) -> Result<NoisePair> {
    let pairs = set.pairs();
    let (sx, sy) = pairs[rng.random_range(0..pairs.len())];
    noise_shift_with(pair, sx, sy)
}

/// Replace the noise with `round(N(0, sigma))`, clipped to [0, 255].
pub fn gaussian_augment<R: Rng + ?Sized>(
    pair: &NoisePair,
    sigma: f64,
    rng: &mut R,
) -> Result<NoisePair> {
    let normal = Normal::new(0.0, sigma)
        .ok()
        .filter(|_| sigma > 0.0)
        .ok_or_else(|| Error::Contract(format!("sigma must be positive, got {sigma}")))?;
    let mut noisy = pair.clean.clone();
    for v in noisy.data_mut() {
        *v = (*v as f64 + normal.sample(rng)).round().clamp(0.0, 255.0) as f32;
    }
    Ok(pair.with_noisy(noisy))
}

/// Exchange the noise residuals of two equally sized pairs.
pub fn noise_swap(a: &NoisePair, b: &NoisePair) -> Result<(NoisePair, NoisePair)> {
    let (na, nb) = (extract_noise(a)?, extract_noise(b)?);
    let a2 = a.with_noisy(clip_pixels(&a.clean.add(&nb)?));
    let b2 = b.with_noisy(clip_pixels(&b.clean.add(&na)?));
    Ok((a2, b2))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentPolicy {
    pub p_rot90: f64,
    pub p_hflip: f64,
    pub p_vflip: f64,
    pub p_gaussian: f64,
    pub gaussian_sigma: f64,
    pub p_noise_shift: f64,
    pub shift_set: ShiftSet,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            p_rot90: 0.5,
            p_hflip: 0.3,
            p_vflip: 0.3,
            p_gaussian: 0.2,
            gaussian_sigma: 25.0,
            p_noise_shift: 0.25,
            shift_set: ShiftSet::default(),
        }
    }
}

impl AugmentPolicy {
    /// No augmentation at all.
    pub fn none() -> Self {
        Self {
            p_rot90: 0.0,
            p_hflip: 0.0,
            p_vflip: 0.0,
            p_gaussian: 0.0,
            p_noise_shift: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("p_rot90", self.p_rot90),
            ("p_hflip", self.p_hflip),
            ("p_vflip", self.p_vflip),
            ("p_gaussian", self.p_gaussian),
            ("p_noise_shift", self.p_noise_shift),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} outside [0, 1]")));
            }
        }
        if self.p_gaussian + self.p_noise_shift > 1.0 {
            return Err(Error::Config("p_gaussian + p_noise_shift exceeds 1".into()));
        }
        if self.p_gaussian > 0.0 && self.gaussian_sigma <= 0.0 {
            return Err(Error::Config("gaussian_sigma must be positive".into()));
        }
        Ok(())
    }
}

/// Counter-clockwise quarter turns followed by optional flips.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq)]
pub struct GeoTransform {
    pub quarter_turns: u8,
    pub hflip: bool,
    pub vflip: bool,
}

impl GeoTransform {
    /// A rotation (when drawn) is by 90, 180 or 270 degrees with equal odds.
    pub fn sample<R: Rng + ?Sized>(policy: &AugmentPolicy, rng: &mut R) -> Self {
        let quarter_turns = if rng.random_bool(policy.p_rot90) {
            rng.random_range(1..=3)
        } else {
            0
        };
        Self {
            quarter_turns,
            hflip: rng.random_bool(policy.p_hflip),
            vflip: rng.random_bool(policy.p_vflip),
        }
    }

    pub fn apply(&self, t: &Tensor) -> Tensor {
        let mut out = t.clone();
        for _ in 0..self.quarter_turns % 4 {
            out = rot90(&out);
        }
        if self.hflip {
            out = flip(&out, true);
        }
        if self.vflip {
            out = flip(&out, false);
        }
        out
    }
}

fn rot90(t: &Tensor) -> Tensor {
    let s = t.shape();
    let mut out = Tensor::zeros([s.n, s.c, s.w, s.h]);
    for n in 0..s.n {
        for c in 0..s.c {
            let src = t.plane(n, c);
            let dst = out.plane_mut(n, c);
            for i in 0..s.w {
                for j in 0..s.h {
                    dst[i * s.h + j] = src[j * s.w + (s.w - 1 - i)];
                }
            }
        }
    }
    out
}

fn flip(t: &Tensor, horizontal: bool) -> Tensor {
    let s = t.shape();
    let mut out = Tensor::zeros_like(t);
    for n in 0..s.n {
        for c in 0..s.c {
            let src = t.plane(n, c);
            let dst = out.plane_mut(n, c);
            for i in 0..s.h {
                for j in 0..s.w {
                    let (si, sj) = if horizontal {
                        (i, s.w - 1 - j)
                    } else {
                        (s.h - 1 - i, j)
                    };
                    dst[i * s.w + j] = src[si * s.w + sj];
                }
            }
        }
    }
    out
}

pub fn geo_apply(pair: &NoisePair, g: GeoTransform) -> NoisePair {
    NoisePair {
        clean: g.apply(&pair.clean),
        noisy: g.apply(&pair.noisy),
        source_tag: pair.source_tag.clone(),
    }
}

pub fn geo_augment<R: Rng + ?Sized>(
    pair: &NoisePair,
    rng: &mut R,
    policy: &AugmentPolicy,
) -> NoisePair {
    geo_apply(pair, GeoTransform::sample(policy, rng))
}

/// Full per-sample policy: geometry first, then at most one noise
/// replacement. One uniform draw `u` picks noise shifting when
/// `u < p_noise_shift`, else Gaussian noise when `u < p_noise_shift + p_gaussian`.
pub fn augment_sample<R: Rng + ?Sized>(
    pair: &NoisePair,
    policy: &AugmentPolicy,
    rng: &mut R,
) -> Result<NoisePair> {
    let p = geo_augment(pair, rng, policy);
    let u: f64 = rng.random();
    if u < policy.p_noise_shift {
        noise_shift_augment(&p, policy.shift_set, rng)
    } else if u < policy.p_noise_shift + policy.p_gaussian {
        gaussian_augment(&p, policy.gaussian_sigma, rng)
    } else {
        Ok(p)
    }
}

/// Random aligned `size x size` crop.
pub fn random_crop<R: Rng + ?Sized>(
    pair: &NoisePair,
    size: usize,
    rng: &mut R,
) -> Result<NoisePair> {
    let (h, w) = (pair.height(), pair.width());
    if size > h || size > w {
        return Err(shape_err!("crop {size} larger than {h}x{w} pair"));
    }
    let top = rng.random_range(0..=h - size);
    let left = rng.random_range(0..=w - size);
    Ok(NoisePair {
        clean: image_io::crop(&pair.clean, top, left, size, size)?,
        noisy: image_io::crop(&pair.noisy, top, left, size, size)?,
        source_tag: pair.source_tag.clone(),
    })
}

/// A named set of pairs, optionally partitioned into groups (for example one
/// group per camera sensor).
#[derive(Clone, Debug, PartialEq)]
pub struct PairDataset {
    pub name: String,
    pub pairs: Vec<NoisePair>,
    /// Group label of each pair, parallel to `pairs`.
    pub groups: Option<Vec<String>>,
}

impl PairDataset {
    pub fn new(name: impl Into<String>, pairs: Vec<NoisePair>) -> Self {
        Self {
            name: name.into(),
            pairs,
            groups: None,
        }
    }

    pub fn with_groups(mut self, groups: Vec<String>) -> Result<Self> {
        if groups.len() != self.pairs.len() {
            return Err(Error::Dataset(format!(
                "{} group labels for {} pairs",
                groups.len(),
                self.pairs.len()
            )));
        }
        self.groups = Some(groups);
        Ok(self)
    }

    /// Pair indices per group, ordered by group label.
    fn group_members(&self) -> Vec<Vec<usize>> {
        match &self.groups {
            None => (0..self.pairs.len()).map(|i| vec![i]).collect(),
            Some(labels) => {
                let mut by: std::collections::BTreeMap<&str, Vec<usize>> = Default::default();
                for (i, g) in labels.iter().enumerate() {
                    by.entry(g).or_default().push(i);
                }
                by.into_values().collect()
            }
        }
    }
}

/// Read `dir/clean/*.png` and `dir/noisy/*.png`, matched by file name, plus an
/// optional `dir/groups.txt` of `filename group` lines.
pub fn load_pair_dir(dir: &Path) -> Result<PairDataset> {
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string());
    let mut files: Vec<String> = fs::read_dir(dir.join("clean"))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|f| f.to_ascii_lowercase().ends_with(".png"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Dataset(format!(
            "{}: no clean PNG files",
            dir.display()
        )));
    }
    let mut pairs = Vec::with_capacity(files.len());
    for f in &files {
        let noisy_path = dir.join("noisy").join(f);
        if !noisy_path.exists() {
            return Err(Error::Dataset(format!("{f}: no matching noisy image")));
        }
        let clean = image_io::read_png(&dir.join("clean").join(f))?;
        let noisy = image_io::read_png(&noisy_path)?;
        pairs.push(NoisePair::new(clean, noisy, name.clone())?);
    }
    let ds = PairDataset::new(name, pairs);
    let manifest = dir.join("groups.txt");
    if !manifest.exists() {
        return Ok(ds);
    }
    let text = fs::read_to_string(&manifest)?;
    let mut map = HashMap::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace();
        match (it.next(), it.next(), it.next()) {
            (Some(f), Some(g), None) => {
                map.insert(f.to_owned(), g.to_owned());
            }
            _ => {
                return Err(Error::Dataset(format!(
                    "groups.txt line {}: expected `filename group`",
                    ln + 1
                )))
            }
        }
    }
    let groups = files
        .iter()
        .map(|f| {
            map.get(f)
                .cloned()
                .ok_or_else(|| Error::Dataset(format!("groups.txt has no entry for {f}")))
        })
        .collect::<Result<Vec<_>>>()?;
    ds.with_groups(groups)
}

/// Draw `count` pairs from each source and augment each with `policy`.
///
/// Within a source, groups are visited in a shuffled round-robin so every
/// group contributes once before any repeats; the member within a group is
/// drawn uniformly. Sources without groups treat each pair as its own group.
pub fn compose_batch<R: Rng + ?Sized>(
    sources: &[(&PairDataset, usize)],
    policy: &AugmentPolicy,
    rng: &mut R,
) -> Result<Vec<NoisePair>> {
    policy.validate()?;
    let mut batch = Vec::with_capacity(sources.iter().map(|s| s.1).sum());
    for (ds, count) in sources {
        if ds.pairs.is_empty() {
            return Err(Error::Dataset(format!("source {:?} is empty", ds.name)));
        }
        let groups = ds.group_members();
        let mut order: Vec<usize> = Vec::new();
        for _ in 0..*count {
            if order.is_empty() {
                order = (0..groups.len()).collect();
                order.shuffle(rng);
            }
            let g = &groups[order.pop().expect("refilled above")];
            let pick = g[rng.random_range(0..g.len())];
            let mut p = augment_sample(&ds.pairs[pick], policy, rng)?;
            p.source_tag = ds.name.clone();
            batch.push(p);
        }
    }
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn plane(h: usize, w: usize, v: &[f32]) -> Tensor {
        Tensor::from_vec([1, 1, h, w], v.to_vec()).unwrap()
    }

    fn pair(clean: f32, noisy: f32, tag: &str) -> NoisePair {
        NoisePair::new(
            Tensor::full([1, 3, 4, 4], clean),
            Tensor::full([1, 3, 4, 4], noisy),
            tag,
        )
        .unwrap()
    }

    #[test]
    fn noise_extraction() {
        let p = pair(100.0, 103.0, "a");
        let n = extract_noise(&p).unwrap();
        assert!(n.data().iter().all(|&v| v == 3.0));
        assert_eq!(p.clean.add(&n).unwrap(), p.noisy);
        assert!(NoisePair::new(
            Tensor::zeros([1, 3, 2, 2]),
            Tensor::zeros([1, 3, 2, 3]),
            "x"
        )
        .is_err());
        assert!(NoisePair::new(
            Tensor::zeros([1, 3, 2, 2]),
            Tensor::full([1, 3, 2, 2], 300.0),
            "x"
        )
        .is_err());
    }

    #[test]
    fn shift_examples() {
        let n = plane(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(shift_noise(&n, 1, 0).unwrap().data(), &[1.0, 1.0, 3.0, 3.0]);
        assert_eq!(
            shift_noise(&n, 0, -1).unwrap().data(),
            &[3.0, 4.0, 3.0, 4.0]
        );
        let c = Tensor::full([1, 3, 5, 5], 7.0);
        assert_eq!(shift_noise(&c, -2, 2).unwrap(), c);
        assert!(matches!(shift_noise(&n, 0, 0), Err(Error::Contract(_))));
        assert!(matches!(shift_noise(&n, 3, 0), Err(Error::Contract(_))));
    }

    #[test]
    fn shift_sets() {
        assert_eq!(ShiftSet::ExcludeJointZero.pairs().len(), 24);
        assert_eq!(ShiftSet::ExcludeAxisZero.pairs().len(), 16);
        assert!(!ShiftSet::default().pairs().contains(&(0, 0)));
    }

    #[test]
    fn noise_shift_clips_and_keeps_clean() {
        let mut clean = Tensor::full([1, 3, 4, 4], 250.0);
        clean.set(0, 0, 0, 0, 100.0);
        let mut noisy = clean.map(|v: f32| (v + 5.0).min(255.0));
        noisy.set(0, 0, 1, 1, 110.0);
        let p = NoisePair::new(clean, noisy, "a").unwrap();
        let out = noise_shift_with(&p, 1, 1).unwrap();
        assert_eq!(out.clean, p.clean);
        assert!(out.noisy.data().iter().all(|v| (0.0..=255.0).contains(v)));
        let zero = pair(10.0, 10.0, "z");
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(
            noise_shift_augment(&zero, ShiftSet::default(), &mut rng).unwrap(),
            zero
        );
    }

    #[test]
    fn gaussian_zero_sigma_rejected_and_tiny_sigma_is_identity() {
        let p = pair(128.0, 140.0, "g");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(gaussian_augment(&p, 0.0, &mut rng).is_err());
        let out = gaussian_augment(&p, 1e-6, &mut rng).unwrap();
        assert_eq!(out.noisy, p.clean);
    }

    #[test]
    fn rotations_and_flips() {
        let t = plane(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let r = rot90(&t);
        assert_eq!(r.dims(), [1, 1, 3, 2]);
        assert_eq!(r.data(), &[3.0, 6.0, 2.0, 5.0, 1.0, 4.0]);
        let full = (0..4).fold(t.clone(), |a, _| rot90(&a));
        assert_eq!(full, t);
        assert_eq!(flip(&t, true).data(), &[3.0, 2.0, 1.0, 6.0, 5.0, 4.0]);
        assert_eq!(flip(&t, false).data(), &[4.0, 5.0, 6.0, 1.0, 2.0, 3.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = pair(3.0, 9.0, "a");
        assert_eq!(geo_augment(&p, &mut rng, &AugmentPolicy::none()), p);
    }

    #[test]
    fn policy_validation() {
        AugmentPolicy::default().validate().unwrap();
        let bad = AugmentPolicy {
            p_hflip: 1.5,
            ..AugmentPolicy::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn batch_composition() {
        let a = PairDataset::new("A", vec![pair(1.0, 2.0, "x"); 3]);
        let b_pairs: Vec<_> = (0..40).map(|i| pair(i as f32, i as f32, "y")).collect();
        let b = PairDataset::new("B", b_pairs)
            .with_groups((0..40).map(|i| format!("s{}", i / 2)).collect())
            .unwrap();
        let c = PairDataset::new("C", vec![pair(5.0, 5.0, "z")]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let policy = AugmentPolicy::none();
        let batch = compose_batch(&[(&a, 10), (&b, 20), (&c, 2)], &policy, &mut rng).unwrap();
        assert_eq!(batch.len(), 32);
        let count = |t: &str| batch.iter().filter(|p| p.source_tag == t).count();
        assert_eq!((count("A"), count("B"), count("C")), (10, 20, 2));
        let mut groups: Vec<usize> = batch
            .iter()
            .filter(|p| p.source_tag == "B")
            .map(|p| p.clean.data()[0] as usize / 2)
            .collect();
        groups.sort();
        assert_eq!(groups, (0..20).collect::<Vec<_>>());
        let empty = PairDataset::new("E", vec![]);
        assert!(matches!(
            compose_batch(&[(&empty, 1)], &policy, &mut rng),
            Err(Error::Dataset(_))
        ));
    }

    #[test]
    fn directory_loader() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("set");
        fs::create_dir_all(root.join("clean")).unwrap();
        fs::create_dir_all(root.join("noisy")).unwrap();
        for (i, f) in ["a.png", "b.png"].iter().enumerate() {
            let t = Tensor::full([1, 3, 4, 4], 10.0 * i as f32);
            image_io::write_png(&root.join("clean").join(f), &t).unwrap();
            image_io::write_png(&root.join("noisy").join(f), &t.map(|v| v + 1.0)).unwrap();
        }
        let ds = load_pair_dir(&root).unwrap();
        assert_eq!(
            (ds.name.as_str(), ds.pairs.len(), ds.groups.is_none()),
            ("set", 2, true)
        );
        fs::write(root.join("groups.txt"), "a.png s1\nb.png s2\n").unwrap();
        let ds = load_pair_dir(&root).unwrap();
        assert_eq!(ds.groups.unwrap(), vec!["s1", "s2"]);
        fs::write(root.join("groups.txt"), "a.png s1\n").unwrap();
        assert!(load_pair_dir(&root).is_err());
    }
}
