//! Domain types for epoched multi-channel EEG, the on-disk container and the
//! synthetic phase-coupled generator.

mod io;
mod synth;

pub use io::{load_epochset, save_epochset, Manifest, MANIFEST_MAGIC};
pub use synth::{synth_generate, Coupling, SynthSpec};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Electrode labels (10-20 names) for the channel axis.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Montage {
    channel_names: Vec<String>,
}

impl Montage {
    pub fn new(channel_names: Vec<String>) -> Result<Self> {
        if channel_names.len() < 2 {
            return Err(invalid!("montage needs at least 2 channels, got {}", channel_names.len()));
        }
        let mut seen = std::collections::HashSet::new();
        for name in &channel_names {
            if !seen.insert(name.as_str()) {
                return Err(invalid!("duplicate channel name {name:?}"));
            }
        }
        Ok(Self { channel_names })
    }

    /// `Ch1 .. ChK` placeholder labels.
    pub fn numbered(k: usize) -> Result<Self> {
        Self::new((1..=k).map(|i| format!("Ch{i}")).collect())
    }

    pub fn len(&self) -> usize {
        self.channel_names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channel_names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.channel_names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.channel_names.iter().position(|n| n == name)
    }
}

/// A named frequency band `[f_lo, f_hi]` in Hz.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandSpec {
    pub name: String,
    pub f_lo: f64,
    pub f_hi: f64,
}

impl BandSpec {
    pub fn new(name: impl Into<String>, f_lo: f64, f_hi: f64) -> Self {
        Self {
            name: name.into(),
            f_lo,
            f_hi,
        }
    }

    pub fn delta() -> Self {
        Self::new("delta", 0.5, 4.0)
    }

    pub fn theta() -> Self {
        Self::new("theta", 4.0, 8.0)
    }

    pub fn alpha() -> Self {
        Self::new("alpha", 8.0, 13.0)
    }

    /// delta, theta and alpha, in pathway order.
    pub fn standard() -> Vec<Self> {
        vec![Self::delta(), Self::theta(), Self::alpha()]
    }

    pub fn by_name(name: &str) -> Option<Self> {
        Self::standard().into_iter().find(|b| b.name == name)
    }

    pub fn center(&self) -> f64 {
        0.5 * (self.f_lo + self.f_hi)
    }

    /// Checks `0 < f_lo < f_hi < fs/2`.
    pub fn validate_for(&self, fs_hz: f64) -> Result<()> {
        let ok = self.f_lo.is_finite() && self.f_hi.is_finite() && self.f_lo > 0.0 && self.f_lo < self.f_hi && self.f_hi < fs_hz / 2.0;
        if ok {
            Ok(())
        } else {
            Err(invalid!(
                "band {:?} [{}, {}] Hz is not inside (0, {}) Hz",
                self.name,
                self.f_lo,
                self.f_hi,
                fs_hz / 2.0
            ))
        }
    }
}

/// N trials x K channels x T samples with class labels.
///
/// Samples are stored as `f32` (microvolts), trial-major then channel-major,
/// matching the blob layout of the on-disk container. `origins` records which
/// source trial each row was derived from; augmentation copies share the
/// origin of the trial they were made from so splits can keep them together.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochSet {
    fs_hz: f64,
    n_trials: usize,
    n_samples: usize,
    samples: Vec<f32>,
    labels: Vec<usize>,
    class_names: Vec<String>,
    montage: Montage,
    origins: Vec<usize>,
}

impl EpochSet {
    pub fn new(
        fs_hz: f64,
        montage: Montage,
        n_samples: usize,
        samples: Vec<f32>,
        labels: Vec<usize>,
        class_names: Vec<String>,
    ) -> Result<Self> {
        let origins = (0..labels.len()).collect();
        Self::with_origins(fs_hz, montage, n_samples, samples, labels, class_names, origins)
    }

    pub fn with_origins(
        fs_hz: f64,
        montage: Montage,
        n_samples: usize,
        samples: Vec<f32>,
        labels: Vec<usize>,
        class_names: Vec<String>,
        origins: Vec<usize>,
    ) -> Result<Self> {
        if !(fs_hz.is_finite() && fs_hz > 0.0) {
            return Err(invalid!("sampling rate must be positive, got {fs_hz}"));
        }
        let n_trials = labels.len();
        if n_trials == 0 {
            return Err(invalid!("empty set"));
        }
        if n_samples < 2 {
            return Err(invalid!("need at least 2 samples per trial, got {n_samples}"));
        }
        if class_names.is_empty() {
            return Err(invalid!("at least one class name is required"));
        }
        let k = montage.len();
        if samples.len() != n_trials * k * n_samples {
            return Err(invalid!(
                "sample count {} does not match {}x{}x{}",
                samples.len(),
                n_trials,
                k,
                n_samples
            ));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(invalid!("label out of range: {bad} with {} classes", class_names.len()));
        }
        if origins.len() != n_trials {
            return Err(invalid!("origins length {} != trials {}", origins.len(), n_trials));
        }
        if let Some(pos) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("non-finite sample at flat index {pos}")));
        }
        Ok(Self {
            fs_hz,
            n_trials,
            n_samples,
            samples,
            labels,
            class_names,
            montage,
            origins,
        })
    }

    pub fn fs_hz(&self) -> f64 {
        self.fs_hz
    }

    pub fn n_trials(&self) -> usize {
        self.n_trials
    }

    pub fn n_channels(&self) -> usize {
        self.montage.len()
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn montage(&self) -> &Montage {
        &self.montage
    }

    pub fn origins(&self) -> &[usize] {
        &self.origins
    }

    /// Duration of one trial in seconds.
    pub fn duration_s(&self) -> f64 {
        self.n_samples as f64 / self.fs_hz
    }

    /// All channels of trial `n`, `K*T` values.
    pub fn trial(&self, n: usize) -> &[f32] {
        let len = self.n_channels() * self.n_samples;
        &self.samples[n * len..(n + 1) * len]
    }

    pub fn channel(&self, n: usize, k: usize) -> &[f32] {
        let t = self.n_samples;
        let start = (n * self.n_channels() + k) * t;
        &self.samples[start..start + t]
    }

    /// Same metadata, new sample array (possibly different length / rate).
    pub fn replace_samples(&self, fs_hz: f64, n_samples: usize, samples: Vec<f32>) -> Result<Self> {
        Self::with_origins(
            fs_hz,
            self.montage.clone(),
            n_samples,
            samples,
            self.labels.clone(),
            self.class_names.clone(),
            self.origins.clone(),
        )
    }

    /// Applies `f` to every (trial, channel) row; `f` writes `out_len` values.
    pub fn map_rows<F>(&self, fs_hz: f64, out_len: usize, mut f: F) -> Result<Self>
    where
        F: FnMut(&[f32], &mut [f32]),
    {
        let rows = self.n_trials * self.n_channels();
        let mut out = vec![0f32; rows * out_len];
        for (r, dst) in out.chunks_exact_mut(out_len).enumerate() {
            let src = &self.samples[r * self.n_samples..(r + 1) * self.n_samples];
            f(src, dst);
        }
        self.replace_samples(fs_hz, out_len, out)
    }

    /// Subset (or reordering) of trials.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.n_trials) {
            return Err(invalid!("trial index {bad} out of range for {} trials", self.n_trials));
        }
        let mut samples = Vec::with_capacity(indices.len() * self.n_channels() * self.n_samples);
        for &i in indices {
            samples.extend_from_slice(self.trial(i));
        }
        Self::with_origins(
            self.fs_hz,
            self.montage.clone(),
            self.n_samples,
            samples,
            indices.iter().map(|&i| self.labels[i]).collect(),
            self.class_names.clone(),
            indices.iter().map(|&i| self.origins[i]).collect(),
        )
    }

    /// Time slice `[start, start+len)` of every trial.
    pub fn slice_time(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.n_samples {
            return Err(invalid!("time slice [{start}, {}) exceeds {} samples", start + len, self.n_samples));
        }
        self.map_rows(self.fs_hz, len, |src, dst| dst.copy_from_slice(&src[start..start + len]))
    }

    /// Concatenates trials of compatible sets. Origins are offset so that
    /// distinct sets never share an origin id.
    pub fn concat(sets: &[&EpochSet]) -> Result<Self> {
        let first = sets.first().ok_or_else(|| invalid!("nothing to concatenate"))?;
        let mut samples = Vec::new();
        let mut labels = Vec::new();
        let mut origins = Vec::new();
        let mut origin_offset = 0;
        for s in sets {
            if s.montage != first.montage {
                return Err(invalid!("montage mismatch between concatenated sets"));
            }
            if s.fs_hz != first.fs_hz || s.n_samples != first.n_samples {
                return Err(invalid!("sampling rate or trial length mismatch"));
            }
            if s.class_names != first.class_names {
                return Err(invalid!("class names differ between concatenated sets"));
            }
            samples.extend_from_slice(&s.samples);
            labels.extend_from_slice(&s.labels);
            origins.extend(s.origins.iter().map(|o| o + origin_offset));
            origin_offset += s.origins.iter().max().map_or(0, |m| m + 1);
        }
        Self::with_origins(
            first.fs_hz,
            first.montage.clone(),
            first.n_samples,
            samples,
            labels,
            first.class_names.clone(),
            origins,
        )
    }

    pub fn with_labels(&self, labels: Vec<usize>) -> Result<Self> {
        Self::with_origins(
            self.fs_hz,
            self.montage.clone(),
            self.n_samples,
            self.samples.clone(),
            labels,
            self.class_names.clone(),
            self.origins.clone(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> EpochSet {
        EpochSet::new(
            100.0,
            Montage::numbered(2).unwrap(),
            3,
            (0..12).map(|v| v as f32).collect(),
            vec![0, 1],
            vec!["a".into(), "b".into()],
        )
        .unwrap()
    }

    #[test]
    fn montage_rejects_duplicates_and_tiny() {
        assert!(Montage::new(vec!["Fz".into(), "Fz".into()]).is_err());
        assert!(Montage::new(vec!["Fz".into()]).is_err());
    }

    #[test]
    fn indexing_is_trial_then_channel_major() {
        let s = tiny();
        assert_eq!(s.channel(1, 0), &[6.0, 7.0, 8.0]);
        assert_eq!(s.channel(0, 1), &[3.0, 4.0, 5.0]);
    }

    #[test]
    fn invariants_enforced() {
        let m = Montage::numbered(2).unwrap();
        let names = vec!["a".to_string()];
        assert!(EpochSet::new(100.0, m.clone(), 2, vec![0.0; 4], vec![1], names.clone()).is_err());
        assert!(EpochSet::new(100.0, m.clone(), 2, vec![f32::NAN; 4], vec![0], names.clone()).is_err());
        assert!(EpochSet::new(100.0, m.clone(), 1, vec![0.0; 2], vec![0], names.clone()).is_err());
        assert!(EpochSet::new(100.0, m, 2, vec![], vec![], names).is_err());
    }

    #[test]
    fn select_and_concat_track_origins() {
        let s = tiny();
        let r = s.select(&[1, 1, 0]).unwrap();
        assert_eq!(r.origins(), &[1, 1, 0]);
        assert_eq!(r.labels(), &[1, 1, 0]);
        let c = EpochSet::concat(&[&s, &s]).unwrap();
        assert_eq!(c.origins(), &[0, 1, 2, 3]);
    }

    #[test]
    fn band_validation() {
        assert!(BandSpec::alpha().validate_for(250.0).is_ok());
        assert!(BandSpec::alpha().validate_for(20.0).is_err());
        assert!(BandSpec::new("x", 5.0, 5.0).validate_for(250.0).is_err());
    }
}
