use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::data::EpochSet;
use crate::error::{invalid, Result};

fn hann(len: usize) -> Vec<f64> {
    if len == 1 {
        return vec![1.0];
    }
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / (len - 1) as f64).cos())
        .collect()
}

/// Squared DFT magnitude of one windowed segment, bins `0..=len/2`.
fn segment_power(seg: &[f32], window: &[f64], fft: &dyn rustfft::Fft<f64>) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = seg.iter().zip(window).map(|(x, w)| Complex::new(*x as f64 * w, 0.0)).collect();
    fft.process(&mut buf);
    buf[..=seg.len() / 2].iter().map(|c| c.norm_sqr()).collect()
}

/// Welch power spectral density of one channel, averaged over trials and
/// 50%-overlapping Hann segments of `min(T, fs)` samples. Returns the bins in
/// `[f_lo, f_hi]` and their one-sided density (units^2 / Hz).
pub fn psd(set: &EpochSet, channel: usize, f_lo: f64, f_hi: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if channel >= set.n_channels() {
        return Err(invalid!("channel {channel} out of range for K={}", set.n_channels()));
    }
    if !(f_lo >= 0.0 && f_lo < f_hi) {
        return Err(invalid!("invalid frequency range [{f_lo}, {f_hi}]"));
    }
    let fs = set.fs_hz();
    let t = set.n_samples();
    let len = t.min(fs.round() as usize).max(2);
    let step = (len / 2).max(1);
    let window = hann(len);
    let norm = fs * window.iter().map(|w| w * w).sum::<f64>();
    let fft = FftPlanner::new().plan_fft_forward(len);
    let mut acc = vec![0.0; len / 2 + 1];
    let mut count = 0usize;
    for n in 0..set.n_trials() {
        let x = set.channel(n, channel);
        let mut start = 0;
        while start + len <= t {
            for (a, p) in acc.iter_mut().zip(segment_power(&x[start..start + len], &window, fft.as_ref())) {
                *a += p;
            }
            count += 1;
            start += step;
        }
    }
    let df = fs / len as f64;
    let mut freqs = Vec::new();
    let mut power = Vec::new();
    for (i, a) in acc.iter().enumerate() {
        let f = i as f64 * df;
        if f < f_lo || f > f_hi {
            continue;
        }
        let one_sided = if i == 0 || (len.is_multiple_of(2) && i == len / 2) {
            1.0
        } else {
            2.0
        };
        freqs.push(f);
        power.push(one_sided * a / (norm * count as f64));
    }
    Ok((freqs, power))
}

/// Time-frequency power in dB relative to a pre-event baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeFreqMap {
    pub freqs: Vec<f64>,
    /// Window centers in seconds relative to the event.
    pub times: Vec<f64>,
    /// `freqs.len() x times.len()`, row-major.
    pub power_db: Vec<f64>,
}

impl TimeFreqMap {
    pub fn at(&self, f: usize, p: usize) -> f64 {
        self.power_db[f * self.times.len() + p]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErspParams {
    /// Baseline interval in milliseconds relative to the event.
    pub baseline_ms: (f64, f64),
    pub f_range: (f64, f64),
    pub n_times: usize,
    /// Time of the first sample relative to the event, in seconds (negative
    /// when the epoch starts before it).
    pub epoch_start_s: f64,
    pub window_s: f64,
}

impl Default for ErspParams {
    fn default() -> Self {
        Self {
            baseline_ms: (-500.0, 0.0),
            f_range: (0.5, 50.0),
            n_times: 400,
            epoch_start_s: -1.0,
            window_s: 1.0,
        }
    }
}

/// Event-related spectral perturbation of one channel.
///
/// Hann-windowed short-time DFT (window `window_s`) evaluated at `n_times`
/// evenly spaced window positions, power averaged over trials, then each
/// frequency expressed in dB against its mean power over the baseline windows:
/// those whose right edge falls inside the baseline interval, so no post-event
/// sample enters the reference.
pub fn ersp(set: &EpochSet, channel: usize, params: &ErspParams) -> Result<TimeFreqMap> {
    if channel >= set.n_channels() {
        return Err(invalid!("channel {channel} out of range for K={}", set.n_channels()));
    }
    let fs = set.fs_hz();
    let (f_lo, f_hi) = params.f_range;
    if !(f_lo >= 0.0 && f_lo < f_hi && f_hi <= fs / 2.0) {
        return Err(invalid!("frequency range [{f_lo}, {f_hi}] outside [0, {}] Hz", fs / 2.0));
    }
    if params.n_times == 0 {
        return Err(invalid!("n_times must be positive"));
    }
    let t = set.n_samples();
    let len = (params.window_s * fs).round() as usize;
    if len < 2 || len > t {
        return Err(invalid!("window of {len} samples does not fit a {t}-sample epoch"));
    }
    let (b0, b1) = (params.baseline_ms.0 / 1000.0, params.baseline_ms.1 / 1000.0);
    let epoch_end = params.epoch_start_s + t as f64 / fs;
    if !(b0 < b1 && b0 >= params.epoch_start_s - 1e-12 && b1 <= epoch_end + 1e-12) {
        return Err(invalid!(
            "baseline [{b0}, {b1}] s outside epoch [{}, {epoch_end}] s",
            params.epoch_start_s
        ));
    }

    let starts: Vec<usize> = if params.n_times == 1 {
        vec![(t - len) / 2]
    } else {
        (0..params.n_times)
            .map(|j| ((j * (t - len)) as f64 / (params.n_times - 1) as f64).round() as usize)
            .collect()
    };
    let times: Vec<f64> = starts
        .iter()
        .map(|&s| params.epoch_start_s + (s as f64 + len as f64 / 2.0) / fs)
        .collect();
    let df = fs / len as f64;
    let bins: Vec<usize> = (0..=len / 2)
        .filter(|&i| {
            let f = i as f64 * df;
            f >= f_lo && f <= f_hi
        })
        .collect();
    if bins.is_empty() {
        return Err(invalid!("no frequency bins in [{f_lo}, {f_hi}] at {df} Hz resolution"));
    }
    let half = len as f64 / 2.0 / fs;
    let tol = 0.5 / fs;
    let base_idx: Vec<usize> = (0..times.len())
        .filter(|&p| times[p] + half >= b0 - tol && times[p] + half <= b1 + tol)
        .collect();
    if base_idx.is_empty() {
        return Err(invalid!("baseline outside epoch: no analysis window ends inside [{b0}, {b1}] s"));
    }

    let window = hann(len);
    let fft = FftPlanner::new().plan_fft_forward(len);
    let mut power = vec![0.0; bins.len() * starts.len()];
    for n in 0..set.n_trials() {
        let x = set.channel(n, channel);
        for (p, &s) in starts.iter().enumerate() {
            let spec = segment_power(&x[s..s + len], &window, fft.as_ref());
            for (fi, &b) in bins.iter().enumerate() {
                power[fi * starts.len() + p] += spec[b];
            }
        }
    }
    let scale = 1.0 / set.n_trials() as f64;
    power.iter_mut().for_each(|v| *v *= scale);

    const FLOOR: f64 = 1e-30;
    let np = starts.len();
    let mut power_db = vec![0.0; power.len()];
    for fi in 0..bins.len() {
        let row = &power[fi * np..(fi + 1) * np];
        let base = base_idx.iter().map(|&p| row[p]).sum::<f64>() / base_idx.len() as f64;
        for p in 0..np {
            power_db[fi * np + p] = 10.0 * ((row[p] + FLOOR) / (base + FLOOR)).log10();
        }
    }
    Ok(TimeFreqMap {
        freqs: bins.iter().map(|&b| b as f64 * df).collect(),
        times,
        power_db,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Montage;
    use rand_distr::{Distribution, StandardNormal};

    fn set(fs: f64, t: usize, rows: Vec<Vec<f64>>) -> EpochSet {
        let n = rows.len();
        let mut samples = Vec::new();
        for r in &rows {
            samples.extend(r.iter().map(|v| *v as f32));
            samples.extend(std::iter::repeat_n(0f32, t));
        }
        EpochSet::new(fs, Montage::numbered(2).unwrap(), t, samples, vec![0; n], vec!["c".into()]).unwrap()
    }

    #[test]
    fn sine_peak_at_its_frequency() {
        let (fs, t) = (250.0, 1000);
        let x: Vec<f64> = (0..t).map(|i| (2.0 * PI * 10.0 * i as f64 / fs).sin()).collect();
        let (freqs, p) = psd(&set(fs, t, vec![x]), 0, 0.1, 60.0).unwrap();
        let df = freqs[1] - freqs[0];
        let imax = (0..p.len()).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap();
        assert!((freqs[imax] - 10.0).abs() <= df);
        assert!(freqs[0] >= 0.1 && *freqs.last().unwrap() <= 60.0);
    }

    #[test]
    fn zero_signal_zero_power() {
        let (_, p) = psd(&set(250.0, 500, vec![vec![0.0; 500]]), 0, 0.1, 60.0).unwrap();
        assert!(p.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn white_noise_is_flat() {
        // worst case over 20 seeds
        for seed in 0..20u64 {
            let mut r = crate::rng::seeded(seed);
            let rows: Vec<Vec<f64>> = (0..20)
                .map(|_| (0..1000).map(|_| StandardNormal.sample(&mut r)).collect())
                .collect();
            let (_, p) = psd(&set(250.0, 1000, rows), 0, 1.0, 60.0).unwrap();
            let mut sorted = p.clone();
            sorted.sort_by(f64::total_cmp);
            let median = sorted[sorted.len() / 2];
            let max = *sorted.last().unwrap();
            assert!(max / median < 5.0, "seed {seed}: {}", max / median);
        }
    }

    #[test]
    fn bad_channel_rejected() {
        assert!(psd(&set(250.0, 100, vec![vec![0.0; 100]]), 2, 0.1, 60.0).is_err());
    }

    #[test]
    fn stationary_noise_stays_near_zero_db() {
        let (fs, t) = (100.0, 300);
        let mut r = crate::rng::seeded(11);
        let rows: Vec<Vec<f64>> = (0..1000).map(|_| (0..t).map(|_| StandardNormal.sample(&mut r)).collect()).collect();
        let params = ErspParams {
            epoch_start_s: -1.5,
            f_range: (0.5, 50.0),
            ..ErspParams::default()
        };
        let map = ersp(&set(fs, t, rows), 0, &params).unwrap();
        assert_eq!(map.times.len(), 400);
        assert!(map.freqs.windows(2).all(|w| w[0] < w[1]));
        let worst = map.power_db.iter().fold(0f64, |m, v| m.max(v.abs()));
        assert!(worst < 1.0, "max |dB| {worst}");
    }

    #[test]
    fn doubled_amplitude_reads_six_db() {
        let (fs, t) = (100.0, 400);
        let start = -1.5;
        let x: Vec<f64> = (0..t)
            .map(|i| {
                let time = start + i as f64 / fs;
                let a = if time >= 0.0 { 2.0 } else { 1.0 };
                a * (2.0 * PI * 10.0 * i as f64 / fs).sin()
            })
            .collect();
        let params = ErspParams {
            epoch_start_s: start,
            n_times: 50,
            ..ErspParams::default()
        };
        let map = ersp(&set(fs, t, vec![x]), 0, &params).unwrap();
        let f10 = map.freqs.iter().position(|&f| (f - 10.0).abs() < 1e-9).unwrap();
        let expected = 20.0 * 2f64.log10();
        for (p, &time) in map.times.iter().enumerate() {
            if time >= 0.5 + 1e-9 {
                assert!((map.at(f10, p) - expected).abs() < 0.1, "t={time}: {}", map.at(f10, p));
            }
        }
    }

    #[test]
    fn range_beyond_nyquist_rejected() {
        let s = set(100.0, 300, vec![vec![0.0; 300]]);
        let params = ErspParams {
            f_range: (0.5, 80.0),
            epoch_start_s: -1.5,
            ..ErspParams::default()
        };
        assert!(ersp(&s, 0, &params).is_err());
    }

    #[test]
    fn baseline_outside_epoch_rejected() {
        let s = set(100.0, 300, vec![vec![0.0; 300]]);
        let params = ErspParams {
            epoch_start_s: 0.0,
            ..ErspParams::default()
        };
        assert!(ersp(&s, 0, &params).is_err());
    }
}
