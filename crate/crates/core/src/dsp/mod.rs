//! Resampling, zero-phase FIR band extraction, analytic-signal phase and
//! spectral summaries (Welch PSD, baseline-normalized ERSP).

mod fir;
mod phase;
mod spectral;

pub use fir::{filt_zero_phase, filtfilt, fir_bandpass, fir_lowpass, notch, FilterDesign, FirFilter};
pub use phase::{analytic_phase, analytic_signal, instantaneous_phase, wrap_phase, PhaseSeries};
pub use spectral::{ersp, psd, ErspParams, TimeFreqMap};

use crate::data::{BandSpec, EpochSet};
use crate::error::{invalid, Result};

/// Default band-pass order (31 taps).
pub const DEFAULT_FIR_ORDER: usize = 30;

/// Anti-aliased decimation by an integer factor.
///
/// A zero-phase Hamming low-pass at 0.45 x the new Nyquist (order `20*factor`)
/// is applied before keeping every `factor`-th sample.
pub fn downsample(set: &EpochSet, factor: usize) -> Result<EpochSet> {
    if factor == 0 {
        return Err(invalid!("downsample factor must be >= 1"));
    }
    if factor > set.n_samples() {
        return Err(invalid!("factor {factor} exceeds trial length {}", set.n_samples()));
    }
    if factor == 1 {
        return Ok(set.clone());
    }
    let new_fs = set.fs_hz() / factor as f64;
    let out_len = set.n_samples() / factor;
    if out_len < 2 {
        return Err(invalid!("downsampled trials would have fewer than 2 samples"));
    }
    let lp = fir_lowpass(set.fs_hz(), 0.45 * new_fs / 2.0, 20 * factor)?;
    let mut row = vec![0.0; set.n_samples()];
    set.map_rows(new_fs, out_len, |src, dst| {
        row.iter_mut().zip(src).for_each(|(r, s)| *r = *s as f64);
        let y = filtfilt(lp.taps(), &row);
        for (i, d) in dst.iter_mut().enumerate() {
            *d = y[i * factor] as f32;
        }
    })
}

/// One band-passed copy of `set` per band, in the order given.
pub fn extract_bands(set: &EpochSet, bands: &[BandSpec], order: usize) -> Result<Vec<EpochSet>> {
    bands
        .iter()
        .map(|b| {
            let f = fir_bandpass(set.fs_hz(), b, order)?;
            filt_zero_phase(set, &f)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Montage;
    use rustfft::num_complex::Complex;
    use std::f64::consts::PI;

    fn rows_set(fs: f64, rows: &[Vec<f64>]) -> EpochSet {
        let t = rows[0].len();
        let samples: Vec<f32> = rows.iter().flatten().map(|v| *v as f32).collect();
        EpochSet::new(fs, Montage::numbered(rows.len()).unwrap(), t, samples, vec![0], vec!["c".into()]).unwrap()
    }

    /// Single-bin DFT amplitude (independent of the library's FFT use).
    fn tone_amplitude(x: &[f32], f: f64, fs: f64) -> f64 {
        let z: Complex<f64> = x
            .iter()
            .enumerate()
            .map(|(n, v)| Complex::from_polar(*v as f64, -2.0 * PI * f * n as f64 / fs))
            .sum();
        2.0 * z.norm() / x.len() as f64
    }

    #[test]
    fn downsample_1000_to_250() {
        let x: Vec<f64> = (0..2000).map(|i| (2.0 * PI * 10.0 * i as f64 / 1000.0).sin()).collect();
        let s = rows_set(1000.0, &[x.clone(), x]);
        let d = downsample(&s, 4).unwrap();
        assert_eq!(d.fs_hz(), 250.0);
        assert_eq!(d.n_samples(), 500);
        let amp = tone_amplitude(d.channel(0, 0), 10.0, 250.0);
        assert!((amp - 1.0).abs() < 0.01, "amplitude {amp}");
    }

    #[test]
    fn downsample_identity_and_errors() {
        let s = rows_set(100.0, &[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]);
        assert_eq!(downsample(&s, 1).unwrap(), s);
        assert!(downsample(&s, 0).is_err());
        assert!(downsample(&s, 4).is_err());
    }

    #[test]
    fn downsample_suppresses_alias() {
        // 300 Hz folds to 50 Hz at the new 250 Hz rate
        let fs = 1000.0;
        let x: Vec<f64> = (0..4000)
            .map(|i| {
                let t = i as f64 / fs;
                (2.0 * PI * 10.0 * t).sin() + (2.0 * PI * 300.0 * t).sin()
            })
            .collect();
        let d = downsample(&rows_set(fs, &[x.clone(), x]), 4).unwrap();
        let pass = tone_amplitude(d.channel(0, 0), 10.0, 250.0);
        let alias = tone_amplitude(d.channel(0, 0), 50.0, 250.0);
        assert!(20.0 * (alias / pass).log10() < -20.0, "alias {alias} pass {pass}");
    }

    #[test]
    fn extract_bands_shapes() {
        let s = EpochSet::new(
            250.0,
            Montage::numbered(64).unwrap(),
            1000,
            (0..64_000).map(|i| ((i % 97) as f32).sin()).collect(),
            vec![0],
            vec!["c".into()],
        )
        .unwrap();
        let out = extract_bands(&s, &BandSpec::standard(), DEFAULT_FIR_ORDER).unwrap();
        assert_eq!(out.len(), 3);
        for b in &out {
            assert_eq!((b.n_trials(), b.n_channels(), b.n_samples()), (1, 64, 1000));
        }
        assert!(extract_bands(&s, &[], DEFAULT_FIR_ORDER).unwrap().is_empty());
    }

    #[test]
    fn bands_separate_slow_and_fast_tones() {
        // band-power ratio by DFT at the two tone frequencies
        let fs = 100.0;
        let x: Vec<f64> = (0..1000)
            .map(|i| {
                let t = i as f64 / fs;
                (2.0 * PI * 2.0 * t).sin() + (2.0 * PI * 10.0 * t).sin()
            })
            .collect();
        let s = rows_set(fs, &[x.clone(), x]);
        let out = extract_bands(&s, &[BandSpec::delta(), BandSpec::alpha()], DEFAULT_FIR_ORDER).unwrap();
        let p = |set: &EpochSet, f: f64| tone_amplitude(set.channel(0, 0), f, fs).powi(2);
        assert!(p(&out[0], 2.0) / p(&out[0], 10.0) > 10.0);
        assert!(p(&out[1], 10.0) / p(&out[1], 2.0) > 10.0);
    }

    #[test]
    fn filter_is_linear() {
        let fs = 250.0;
        let a: Vec<f64> = (0..300).map(|i| ((i as f64) * 0.31).sin() * 3.0).collect();
        let b: Vec<f64> = (0..300).map(|i| ((i as f64) * 0.07).cos() - 1.0).collect();
        let mix: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 0.5 * x - 2.0 * y).collect();
        let f = fir_bandpass(fs, &BandSpec::alpha(), DEFAULT_FIR_ORDER).unwrap();
        let out = filt_zero_phase(&rows_set(fs, &[a, b, mix]), &f).unwrap();
        let (fa, fb, fm) = (out.channel(0, 0), out.channel(0, 1), out.channel(0, 2));
        let norm = fm.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        let err = (0..300)
            .map(|i| (0.5 * fa[i] as f64 - 2.0 * fb[i] as f64 - fm[i] as f64).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(err / norm < 1e-6, "{}", err / norm);
    }
}
