use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dsp::extract_bands;
use crate::error::{invalid, Result};
use crate::model::FcdnModel;
use crate::{BandSpec, EpochSet};

/// Sliding-window replay settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OnlineSpec {
    pub window_s: f64,
    pub overlap: f64,
    /// Fraction of correct windows a trial needs to count as a success.
    pub success_threshold: f64,
    /// Require strictly more than the threshold instead of at least it.
    pub strict: bool,
}

impl Default for OnlineSpec {
    fn default() -> Self {
        Self {
            window_s: 2.0,
            overlap: 0.5,
            success_threshold: 0.75,
            strict: false,
        }
    }
}

/// Anything that turns a batch of equally long windows into class
/// probabilities, one row per trial.
pub trait WindowClassifier {
    /// `window` is the position of the slice in the schedule, so scripted
    /// classifiers can depend on it; real models ignore it.
    fn classify(&self, windows: &EpochSet, window: usize) -> Result<Vec<Vec<f64>>>;
}

/// A trained model replayed on windows: each window is right-padded with its
/// last value to the model's trial length, band filtered and classified.
pub struct FcdnWindowClassifier<'a> {
    pub model: &'a FcdnModel,
    pub bands: &'a [BandSpec],
    pub fir_order: usize,
}

impl WindowClassifier for FcdnWindowClassifier<'_> {
    fn classify(&self, windows: &EpochSet, _window: usize) -> Result<Vec<Vec<f64>>> {
        let t = self.model.config().n_samples;
        let len = windows.n_samples();
        if len > t {
            return Err(invalid!("window of {len} samples exceeds the model's {t}"));
        }
        let padded = windows.map_rows(windows.fs_hz(), t, |src, dst| {
            dst[..len].copy_from_slice(src);
            dst[len..].fill(src[len - 1]);
        })?;
        let bands = extract_bands(&padded, self.bands, self.fir_order)?;
        let (_, probs) = self.model.predict(&bands)?;
        let c = probs.shape()[1];
        Ok(probs.data().chunks(c).map(<[f64]>::to_vec).collect())
    }
}

/// Outcome of one trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub trial: usize,
    pub label: usize,
    pub window_labels: Vec<usize>,
    pub window_probs: Vec<Vec<f64>>,
    /// Argmax of the mean window probabilities.
    pub fused: usize,
    pub correct_windows: usize,
    pub success: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoOnlineResult {
    pub spec: OnlineSpec,
    /// Start sample of every window.
    pub window_starts: Vec<usize>,
    pub window_len: usize,
    pub trials: Vec<TrialOutcome>,
    pub success_rate: f64,
    pub fused_accuracy: f64,
}

impl PseudoOnlineResult {
    /// Per-trial table: `trial,window1..windowN,fused,correct_windows,success`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("trial");
        for w in 1..=self.window_starts.len() {
            let _ = write!(s, ",window{w}");
        }
        s.push_str(",fused,correct_windows,success\n");
        for t in &self.trials {
            let _ = write!(s, "{}", t.trial);
            for l in &t.window_labels {
                let _ = write!(s, ",{l}");
            }
            let _ = writeln!(s, ",{},{},{}", t.fused, t.correct_windows, u8::from(t.success));
        }
        s
    }
}

/// Window length and start samples for trials of `n_samples` at `fs_hz`.
/// Five-second trials at 250 Hz with two-second windows and half overlap give
/// starts 0, 250, 500 and 750.
pub fn window_schedule(n_samples: usize, fs_hz: f64, spec: &OnlineSpec) -> Result<(usize, Vec<usize>)> {
    if !(spec.window_s.is_finite() && spec.window_s > 0.0) {
        return Err(invalid!("window length must be positive, got {} s", spec.window_s));
    }
    if !(0.0..1.0).contains(&spec.overlap) {
        return Err(invalid!("overlap must lie in [0, 1), got {}", spec.overlap));
    }
    if !(0.0..=1.0).contains(&spec.success_threshold) {
        return Err(invalid!("success threshold must lie in [0, 1], got {}", spec.success_threshold));
    }
    let len = (spec.window_s * fs_hz).round() as usize;
    if len == 0 {
        return Err(invalid!("window of {} s is shorter than one sample", spec.window_s));
    }
    if len > n_samples {
        return Err(invalid!("window of {len} samples is longer than the {n_samples}-sample trial"));
    }
    let step = ((1.0 - spec.overlap) * len as f64).round() as usize;
    if step == 0 {
        return Err(invalid!("overlap {} leaves no hop between windows", spec.overlap));
    }
    let starts = (0..).map(|i| i * step).take_while(|&s| s + len <= n_samples).collect();
    Ok((len, starts))
}

/// Replays every trial through the sliding-window schedule.
pub fn pseudo_online(classifier: &dyn WindowClassifier, set: &EpochSet, spec: &OnlineSpec) -> Result<PseudoOnlineResult> {
    let (len, starts) = window_schedule(set.n_samples(), set.fs_hz(), spec)?;
    let n = set.n_trials();
    let c = set.n_classes();
    let mut probs: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(starts.len()); n];
    for (w, &start) in starts.iter().enumerate() {
        let rows = classifier.classify(&set.slice_time(start, len)?, w)?;
        if rows.len() != n || rows.iter().any(|r| r.len() != c) {
            return Err(invalid!("classifier returned {} rows for {n} trials and {c} classes", rows.len()));
        }
        for (acc, row) in probs.iter_mut().zip(rows) {
            acc.push(row);
        }
    }
    let trials: Vec<TrialOutcome> = probs
        .into_iter()
        .enumerate()
        .map(|(i, window_probs)| {
            let label = set.labels()[i];
            let window_labels: Vec<usize> = window_probs.iter().map(|p| argmax(p)).collect();
            let mean: Vec<f64> = (0..c)
                .map(|k| window_probs.iter().map(|p| p[k]).sum::<f64>() / window_probs.len() as f64)
                .collect();
            let correct_windows = window_labels.iter().filter(|&&l| l == label).count();
            let frac = correct_windows as f64 / window_labels.len() as f64;
            let success = if spec.strict {
                frac > spec.success_threshold
            } else {
                frac >= spec.success_threshold
            };
            TrialOutcome {
                trial: i,
                label,
                window_labels,
                window_probs,
                fused: argmax(&mean),
                correct_windows,
                success,
            }
        })
        .collect();
    let success_rate = trials.iter().filter(|t| t.success).count() as f64 / n as f64;
    let fused_accuracy = trials.iter().filter(|t| t.fused == t.label).count() as f64 / n as f64;
    Ok(PseudoOnlineResult {
        spec: *spec,
        window_starts: starts,
        window_len: len,
        trials,
        success_rate,
        fused_accuracy,
    })
}

/// First index of the largest value.
fn argmax(p: &[f64]) -> usize {
    p.iter().enumerate().fold(0, |best, (i, &v)| if v > p[best] { i } else { best })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_schedule_has_four_windows() {
        let (len, starts) = window_schedule(1250, 250.0, &OnlineSpec::default()).unwrap();
        assert_eq!(len, 500);
        assert_eq!(starts, vec![0, 250, 500, 750]);
        assert!(window_schedule(400, 250.0, &OnlineSpec::default()).is_err());
    }
}
