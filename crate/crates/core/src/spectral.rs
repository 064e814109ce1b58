//! Frequency analysis of block features: centred 2-D FFT magnitudes, radially
//! averaged power spectra and the low-frequency energy share of each AFDB path.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{shape_err, Error, Result};
use crate::model::{BlockTap, FastShadeModel};
use crate::nn::{Afdb, AfdbTaps};
use crate::tensor::Tensor;

/// FFT magnitude with the zero frequency moved to `(h / 2, w / 2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum2d {
    pub h: usize,
    pub w: usize,
    pub mag: Vec<f64>,
}

impl Spectrum2d {
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.mag[y * self.w + x]
    }
}

/// Unshifted complex 2-D DFT of a row-major `h x w` plane.
pub fn fft2d(plane: &[f32], h: usize, w: usize) -> Result<Vec<Complex<f64>>> {
    if h < 2 || w < 2 || plane.len() != h * w {
        return Err(shape_err!(
            "fft2d needs an h x w plane with h, w >= 2 (h={h}, w={w}, len={})",
            plane.len()
        ));
    }
    let mut planner = FftPlanner::<f64>::new();
    let mut buf: Vec<Complex<f64>> = plane.iter().map(|&v| Complex::new(v as f64, 0.0)).collect();
    let row = planner.plan_fft_forward(w);
    for r in buf.chunks_exact_mut(w) {
        row.process(r);
    }
    let col = planner.plan_fft_forward(h);
    let mut column = vec![Complex::default(); h];
    for x in 0..w {
        for y in 0..h {
            column[y] = buf[y * w + x];
        }
        col.process(&mut column);
        for y in 0..h {
            buf[y * w + x] = column[y];
        }
    }
    Ok(buf)
}

pub fn fft2d_magnitude_plane(plane: &[f32], h: usize, w: usize) -> Result<Spectrum2d> {
    let f = fft2d(plane, h, w)?;
    let mut mag = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            mag[((y + h / 2) % h) * w + (x + w / 2) % w] = f[y * w + x].norm();
        }
    }
    Ok(Spectrum2d { h, w, mag })
}

/// Centred magnitude spectrum of a single-channel `(1, 1, H, W)` tensor.
pub fn fft2d_magnitude(x: &Tensor) -> Result<Spectrum2d> {
    let s = x.shape();
    if s.n != 1 || s.c != 1 {
        return Err(shape_err!("expected a single-channel plane, got {s}"));
    }
    fft2d_magnitude_plane(x.data(), s.h, s.w)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RadialSpectrum {
    /// Mean power for radii `0..floor(min(H, W) / 2)`, divided by the largest
    /// of those values.
    pub bins: Vec<f64>,
    /// Unnormalised mean power for every radius present, corners included.
    pub mean_power: Vec<f64>,
    /// Pixels per radius, parallel to `mean_power`.
    pub counts: Vec<usize>,
}

impl RadialSpectrum {
    pub fn n_bins(&self) -> usize {
        self.bins.len()
    }

    /// Sum of squared magnitudes over the whole spectrum.
    pub fn total_power(&self) -> f64 {
        self.mean_power
            .iter()
            .zip(&self.counts)
            .map(|(p, &c)| p * c as f64)
            .sum()
    }

    /// Energy at radii `1..=n_bins / 4` over energy at radii `1..=n_bins`.
    /// The zero frequency is left out because feature means are arbitrary.
    pub fn low_freq_fraction(&self) -> f64 {
        let energy = |hi: usize| -> f64 {
            (1..=hi.min(self.mean_power.len() - 1))
                .map(|r| self.mean_power[r] * self.counts[r] as f64)
                .sum()
        };
        let all = energy(self.n_bins());
        if all == 0.0 {
            return 0.0;
        }
        energy(self.n_bins() / 4) / all
    }
}

/// Bin `mag²` by `round(distance to centre)` and average within each bin.
pub fn radial_power_spectrum(spec: &Spectrum2d) -> RadialSpectrum {
    let (h, w) = (spec.h, spec.w);
    let (cy, cx) = ((h / 2) as f64, (w / 2) as f64);
    let max_r = (cy
        .max((h - 1) as f64 - cy)
        .hypot(cx.max((w - 1) as f64 - cx)))
    .round() as usize;
    let mut sum = vec![0.0; max_r + 1];
    let mut counts = vec![0usize; max_r + 1];
    for y in 0..h {
        for x in 0..w {
            let r = (y as f64 - cy).hypot(x as f64 - cx).round() as usize;
            sum[r] += spec.at(y, x).powi(2);
            counts[r] += 1;
        }
    }
    let mean_power: Vec<f64> = sum
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
        .collect();
    let n_bins = h.min(w) / 2;
    let peak = mean_power[..n_bins].iter().cloned().fold(0.0, f64::max);
    let bins = mean_power[..n_bins]
        .iter()
        .map(|&p| if peak > 0.0 { p / peak } else { 0.0 })
        .collect();
    RadialSpectrum {
        bins,
        mean_power,
        counts,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BranchSpectrumReport {
    pub lf: RadialSpectrum,
    pub hf: RadialSpectrum,
    pub lf_low_fraction: f64,
    pub hf_low_fraction: f64,
}

impl BranchSpectrumReport {
    /// `radius  lf_power  hf_power` rows of normalised bins.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("radius\tlf_power\thf_power\n");
        for (r, (a, b)) in self.lf.bins.iter().zip(&self.hf.bins).enumerate() {
            out.push_str(&format!("{r}\t{a:.6e}\t{b:.6e}\n"));
        }
        out
    }
}

/// Mean of per-channel magnitude spectra over every channel of every tensor.
fn mean_magnitude(features: &[&Tensor]) -> Result<Spectrum2d> {
    let first = features
        .first()
        .ok_or_else(|| Error::Contract("no feature maps to analyse".into()))?
        .shape();
    let (h, w) = (first.h, first.w);
    let mut acc = vec![0.0; h * w];
    let mut planes = 0usize;
    for t in features {
        let s = t.shape();
        if (s.h, s.w) != (h, w) {
            return Err(shape_err!("feature maps differ in size: {s} vs {first}"));
        }
        for n in 0..s.n {
            for c in 0..s.c {
                let m = fft2d_magnitude_plane(t.plane(n, c), h, w)?;
                acc.iter_mut().zip(&m.mag).for_each(|(a, v)| *a += v);
                planes += 1;
            }
        }
    }
    acc.iter_mut().for_each(|a| *a /= planes as f64);
    Ok(Spectrum2d { h, w, mag: acc })
}

fn report_from_taps(taps: &[AfdbTaps]) -> Result<BranchSpectrumReport> {
    let collect = |lf: bool| -> Result<Vec<&Tensor>> {
        taps.iter()
            .map(|t| {
                if lf { t.lf.as_ref() } else { t.hf.as_ref() }.ok_or_else(|| {
                    Error::Config("the analysed block needs both an LF and an HF path".into())
                })
            })
            .collect()
    };
    let lf = radial_power_spectrum(&mean_magnitude(&collect(true)?)?);
    let hf = radial_power_spectrum(&mean_magnitude(&collect(false)?)?);
    Ok(BranchSpectrumReport {
        lf_low_fraction: lf.low_freq_fraction(),
        hf_low_fraction: hf.low_freq_fraction(),
        lf,
        hf,
    })
}

/// Spectra of one block's post-activation path outputs for the given inputs.
pub fn block_spectrum_report(block: &Afdb, inputs: &[Tensor]) -> Result<BranchSpectrumReport> {
    if inputs.is_empty() {
        return Err(Error::Contract("empty input list".into()));
    }
    let taps = inputs
        .iter()
        .map(|x| block.forward_taps(x))
        .collect::<Result<Vec<_>>>()?;
    report_from_taps(&taps)
}

/// Spectra of the AFDB selected by `tap` while the model runs on `images`.
pub fn branch_spectrum_report(
    model: &FastShadeModel,
    images: &[Tensor],
    tap: BlockTap,
) -> Result<BranchSpectrumReport> {
    if images.is_empty() {
        return Err(Error::Contract("empty image list".into()));
    }
    let taps = images
        .iter()
        .map(|x| model.block_taps(x, tap))
        .collect::<Result<Vec<_>>>()?;
    report_from_taps(&taps)
}
