use std::f64::consts::PI;

use rand::Rng as _;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::{BandSpec, EpochSet, Montage};
use crate::error::{invalid, Result};
use crate::rng;

/// 64-channel 10-20 layout; synthetic sets with K <= 64 take the first K names.
pub(crate) const TEN_TWENTY_64: [&str; 64] = [
    "Fp1", "Fp2", "F7", "F3", "Fz", "F4", "F8", "FC5", "FC1", "FC2", "FC6", "T7", "C3", "Cz", "C4", "T8", "TP9", "CP5", "CP1", "CP2",
    "CP6", "TP10", "P7", "P3", "Pz", "P4", "P8", "PO9", "O1", "Oz", "O2", "PO10", "AF7", "AF3", "AF4", "AF8", "F5", "F1", "F2", "F6",
    "FT9", "FT7", "FC3", "FC4", "FT8", "FT10", "C5", "C1", "C2", "C6", "TP7", "CP3", "CPz", "CP4", "TP8", "P5", "P1", "P2", "P6", "PO7",
    "PO3", "POz", "PO4", "PO8",
];

/// One phase-locked oscillation shared by a channel pair in trials of `class`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coupling {
    pub class: usize,
    pub channels: (usize, usize),
    pub band: BandSpec,
    /// Phase of the first channel minus phase of the second, in `[0, 2pi)`.
    pub phase_offset: f64,
    /// Peak amplitude of the oscillation added to both channels.
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_channels: usize,
    pub n_samples: usize,
    pub fs_hz: f64,
    pub n_per_class: usize,
    pub n_classes: usize,
    pub couplings: Vec<Coupling>,
    /// RMS of the independent 1/f background on every channel.
    pub noise_amplitude: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_channels < 2 {
            return Err(invalid!("synthetic set needs K >= 2"));
        }
        if self.n_samples < 2 {
            return Err(invalid!("synthetic set needs T >= 2"));
        }
        if !(self.fs_hz.is_finite() && self.fs_hz > 0.0) {
            return Err(invalid!("fs_hz must be positive"));
        }
        if self.n_per_class == 0 || self.n_classes == 0 {
            return Err(invalid!("n_per_class and n_classes must be positive"));
        }
        if !(self.noise_amplitude.is_finite() && self.noise_amplitude >= 0.0) {
            return Err(invalid!("noise amplitude must be finite and >= 0"));
        }
        for c in &self.couplings {
            let (a, b) = c.channels;
            if a >= self.n_channels || b >= self.n_channels {
                return Err(invalid!("coupling channel ({a}, {b}) out of range for K={}", self.n_channels));
            }
            if a == b {
                return Err(invalid!("coupling pair must be two distinct channels"));
            }
            if c.class >= self.n_classes {
                return Err(invalid!("coupling class {} >= {}", c.class, self.n_classes));
            }
            if !(0.0..2.0 * PI).contains(&c.phase_offset) {
                return Err(invalid!("phase offset {} outside [0, 2pi)", c.phase_offset));
            }
            if !(c.amplitude.is_finite() && c.amplitude >= 0.0) {
                return Err(invalid!("coupling amplitude must be finite and >= 0"));
            }
            c.band.validate_for(self.fs_hz)?;
        }
        Ok(())
    }

    fn montage(&self) -> Result<Montage> {
        if self.n_channels <= TEN_TWENTY_64.len() {
            Montage::new(TEN_TWENTY_64[..self.n_channels].iter().map(|s| s.to_string()).collect())
        } else {
            Montage::numbered(self.n_channels)
        }
    }
}

/// Generates `n_per_class * n_classes` trials; trial `i` belongs to class `i % C`.
///
/// Each channel carries independent pink noise. For every coupling of the
/// trial's class, both channels receive `A cos(2 pi f t + phi)` and
/// `A cos(2 pi f t + phi - offset)` with a fresh random `phi` per trial and `f`
/// drawn from the DFT bins inside the band, so the pair's phase difference is
/// exactly the offset while the absolute phase varies across trials.
pub fn synth_generate(spec: &SynthSpec) -> Result<EpochSet> {
    spec.validate()?;
    let (k, t) = (spec.n_channels, spec.n_samples);
    let n = spec.n_per_class * spec.n_classes;
    let mut r = rng::seeded(spec.seed);
    let mut planner = FftPlanner::<f64>::new();
    let ifft = planner.plan_fft_inverse(t);
    let mut samples = vec![0f64; n * k * t];
    let mut labels = Vec::with_capacity(n);

    for trial in 0..n {
        let class = trial % spec.n_classes;
        labels.push(class);
        let base = trial * k * t;
        if spec.noise_amplitude > 0.0 {
            for ch in 0..k {
                let row = &mut samples[base + ch * t..base + (ch + 1) * t];
                pink_noise(&mut r, ifft.as_ref(), spec.noise_amplitude, row);
            }
        }
        for c in spec.couplings.iter().filter(|c| c.class == class) {
            let freq = pick_frequency(&mut r, &c.band, spec.fs_hz, t);
            let phi: f64 = r.random::<f64>() * 2.0 * PI;
            let (a, b) = c.channels;
            for i in 0..t {
                let arg = 2.0 * PI * freq * i as f64 / spec.fs_hz + phi;
                samples[base + a * t + i] += c.amplitude * arg.cos();
                samples[base + b * t + i] += c.amplitude * (arg - c.phase_offset).cos();
            }
        }
    }

    let class_names = (0..spec.n_classes).map(|c| format!("class-{}", c + 1)).collect();
    EpochSet::new(
        spec.fs_hz,
        spec.montage()?,
        t,
        samples.into_iter().map(|v| v as f32).collect(),
        labels,
        class_names,
    )
}

/// Frequency on the DFT grid `j*fs/T` inside `[f_lo, f_hi]`, falling back to
/// the band center when the grid is too coarse.
fn pick_frequency(r: &mut rng::Rng, band: &BandSpec, fs: f64, t: usize) -> f64 {
    let df = fs / t as f64;
    let lo = (band.f_lo / df).ceil() as usize;
    let hi = (band.f_hi / df).floor() as usize;
    if hi >= lo && lo > 0 {
        let j = r.random_range(lo..=hi);
        j as f64 * df
    } else {
        band.center()
    }
}

/// 1/sqrt(f) magnitude spectrum with uniform random phases, inverse transformed
/// and rescaled to the requested RMS.
fn pink_noise(r: &mut rng::Rng, ifft: &dyn rustfft::Fft<f64>, rms: f64, out: &mut [f64]) {
    let t = out.len();
    let mut spec = vec![Complex::new(0.0, 0.0); t];
    for f in 1..=t / 2 {
        let mag = 1.0 / (f as f64).sqrt();
        let ph: f64 = r.random::<f64>() * 2.0 * PI;
        if 2 * f == t {
            spec[f] = Complex::new(mag * ph.cos(), 0.0);
        } else {
            spec[f] = Complex::from_polar(mag, ph);
            spec[t - f] = spec[f].conj();
        }
    }
    ifft.process(&mut spec);
    let energy: f64 = spec.iter().map(|c| c.re * c.re).sum::<f64>() / t as f64;
    let scale = if energy > 0.0 { rms / energy.sqrt() } else { 0.0 };
    for (o, c) in out.iter_mut().zip(&spec) {
        *o += c.re * scale;
    }
}
