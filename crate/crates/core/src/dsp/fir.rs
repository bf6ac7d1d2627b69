use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::data::{BandSpec, EpochSet};
use crate::error::{invalid, Result};

/// What a filter was designed to pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FilterDesign {
    BandPass(BandSpec),
    LowPass { cutoff_hz: f64 },
}

/// Linear-phase FIR filter: `order + 1` symmetric taps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FirFilter {
    taps: Vec<f64>,
    design: FilterDesign,
    fs_hz: f64,
}

impl FirFilter {
    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    pub fn order(&self) -> usize {
        self.taps.len() - 1
    }

    pub fn design(&self) -> &FilterDesign {
        &self.design
    }

    pub fn fs_hz(&self) -> f64 {
        self.fs_hz
    }
}

fn hamming(n: usize, order: usize) -> f64 {
    0.54 - 0.46 * (2.0 * PI * n as f64 / order as f64).cos()
}

/// Normalized sinc `sin(pi x) / (pi x)`.
fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Builds taps from the lower half and mirrors them so symmetry is exact.
fn symmetric_taps(order: usize, half: impl Fn(f64) -> f64) -> Vec<f64> {
    let mut taps = vec![0.0; order + 1];
    for n in 0..=order / 2 {
        let m = n as f64 - order as f64 / 2.0;
        let v = half(m) * hamming(n, order);
        taps[n] = v;
        taps[order - n] = v;
    }
    taps
}

fn gain_at(taps: &[f64], f: f64, fs: f64) -> f64 {
    let (mut re, mut im) = (0.0, 0.0);
    for (n, h) in taps.iter().enumerate() {
        let w = 2.0 * PI * f / fs * n as f64;
        re += h * w.cos();
        im -= h * w.sin();
    }
    re.hypot(im)
}

/// Windowed low-pass taps scaled to unit DC gain.
fn unit_lowpass(order: usize, fc: f64) -> Vec<f64> {
    let mut taps = symmetric_taps(order, |m| 2.0 * fc * sinc(2.0 * fc * m));
    let dc: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= dc);
    taps
}

/// Hamming-windowed sinc band-pass of the given order (`order + 1` taps):
/// the difference of two unit-DC low-passes at the band edges, so DC is
/// rejected exactly, then scaled to unit gain at the band center.
pub fn fir_bandpass(fs_hz: f64, band: &BandSpec, order: usize) -> Result<FirFilter> {
    band.validate_for(fs_hz)?;
    if order < 2 {
        return Err(invalid!("filter order must be at least 2, got {order}"));
    }
    let hi = unit_lowpass(order, band.f_hi / fs_hz);
    let lo = unit_lowpass(order, band.f_lo / fs_hz);
    let mut taps: Vec<f64> = hi.iter().zip(&lo).map(|(a, b)| a - b).collect();
    let g = gain_at(&taps, band.center(), fs_hz);
    taps.iter_mut().for_each(|t| *t /= g);
    Ok(FirFilter {
        taps,
        design: FilterDesign::BandPass(band.clone()),
        fs_hz,
    })
}

/// Hamming-windowed sinc low-pass with unit DC gain.
pub fn fir_lowpass(fs_hz: f64, cutoff_hz: f64, order: usize) -> Result<FirFilter> {
    if !(cutoff_hz > 0.0 && cutoff_hz < fs_hz / 2.0) {
        return Err(invalid!("cutoff {cutoff_hz} Hz outside (0, {}) Hz", fs_hz / 2.0));
    }
    if order < 2 {
        return Err(invalid!("filter order must be at least 2, got {order}"));
    }
    Ok(FirFilter {
        taps: unit_lowpass(order, cutoff_hz / fs_hz),
        design: FilterDesign::LowPass { cutoff_hz },
        fs_hz,
    })
}

/// Odd (point-symmetric) extension by `pad` samples on each side.
pub(crate) fn odd_extend(x: &[f64], pad: usize) -> Vec<f64> {
    let n = x.len();
    let pad = pad.min(n.saturating_sub(1));
    let mut out = Vec::with_capacity(n + 2 * pad);
    for i in (1..=pad).rev() {
        out.push(2.0 * x[0] - x[i]);
    }
    out.extend_from_slice(x);
    for i in 1..=pad {
        out.push(2.0 * x[n - 1] - x[n - 1 - i]);
    }
    out
}

/// Forward-backward FIR application on one row. Net response is `|H|^2` with
/// zero phase; edges are handled by odd extension of length `order`.
pub fn filtfilt(taps: &[f64], x: &[f64]) -> Vec<f64> {
    let n = x.len();
    if n == 0 {
        return Vec::new();
    }
    let pad = (taps.len() - 1).min(n - 1);
    let ext = odd_extend(x, pad);
    let len = ext.len();
    let mut fwd = vec![0.0; len];
    for (j, out) in fwd.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (i, h) in taps.iter().enumerate().take(j + 1) {
            acc += h * ext[j - i];
        }
        *out = acc;
    }
    let mut back = vec![0.0; len];
    for (j, out) in back.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (i, h) in taps.iter().enumerate() {
            if j + i >= len {
                break;
            }
            acc += h * fwd[j + i];
        }
        *out = acc;
    }
    back[pad..pad + n].to_vec()
}

/// Zero-phase application of `filter` to every trial and channel.
pub fn filt_zero_phase(set: &EpochSet, filter: &FirFilter) -> Result<EpochSet> {
    if (filter.fs_hz - set.fs_hz()).abs() > 1e-9 * set.fs_hz() {
        return Err(invalid!(
            "filter designed for {} Hz applied to {} Hz data",
            filter.fs_hz,
            set.fs_hz()
        ));
    }
    let mut row = vec![0.0; set.n_samples()];
    set.map_rows(set.fs_hz(), set.n_samples(), |src, dst| {
        row.iter_mut().zip(src).for_each(|(r, s)| *r = *s as f64);
        let y = filtfilt(&filter.taps, &row);
        dst.iter_mut().zip(y).for_each(|(d, v)| *d = v as f32);
    })
}

/// Second-order IIR notch at `f0_hz`, applied forward and backward.
///
/// Line noise is expected to be removed at acquisition; this is provided for
/// raw recordings that still carry it.
pub fn notch(set: &EpochSet, f0_hz: f64, quality: f64) -> Result<EpochSet> {
    let fs = set.fs_hz();
    if !(f0_hz > 0.0 && f0_hz < fs / 2.0) {
        return Err(invalid!("notch frequency {f0_hz} Hz outside (0, {}) Hz", fs / 2.0));
    }
    if quality.is_nan() || quality <= 0.0 {
        return Err(invalid!("notch quality must be positive"));
    }
    let w0 = 2.0 * PI * f0_hz / fs;
    let alpha = w0.sin() / (2.0 * quality);
    let a0 = 1.0 + alpha;
    let b = [1.0 / a0, -2.0 * w0.cos() / a0, 1.0 / a0];
    let a = [1.0, -2.0 * w0.cos() / a0, (1.0 - alpha) / a0];
    let biquad = |x: &[f64]| -> Vec<f64> {
        let mut y = vec![0.0; x.len()];
        for i in 0..x.len() {
            let mut acc = b[0] * x[i];
            if i >= 1 {
                acc += b[1] * x[i - 1] - a[1] * y[i - 1];
            }
            if i >= 2 {
                acc += b[2] * x[i - 2] - a[2] * y[i - 2];
            }
            y[i] = acc;
        }
        y
    };
    let pad_len = ((3.0 * fs / f0_hz).ceil() as usize).max(6);
    let mut row = vec![0.0; set.n_samples()];
    set.map_rows(fs, set.n_samples(), |src, dst| {
        row.iter_mut().zip(src).for_each(|(r, s)| *r = *s as f64);
        let n = row.len();
        let pad = pad_len.min(n - 1);
        let ext = odd_extend(&row, pad);
        let mut y = biquad(&ext);
        y.reverse();
        let mut z = biquad(&y);
        z.reverse();
        dst.iter_mut().zip(&z[pad..pad + n]).for_each(|(d, v)| *d = *v as f32);
    })
}
