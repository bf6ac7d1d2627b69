//! Phase-locking-value connectivity and the channel weighting derived from it.
//!
//! For every channel pair the PLV is the magnitude of the mean unit phasor of
//! the phase difference over all trials and time bins. The strict upper
//! triangle is filled and added to its transpose, giving a symmetric matrix
//! with zero diagonal. Column sums of that matrix, min-max normalized, become
//! the per-channel weights that rescale the EEG before the network.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{BandSpec, EpochSet, Montage};
use crate::dsp::{extract_bands, instantaneous_phase, PhaseSeries};
use crate::error::{invalid, Error, Result};

/// K x K symmetric PLV matrix with zero diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlvMatrix {
    k: usize,
    values: Vec<f64>,
    band: Option<BandSpec>,
}

impl PlvMatrix {
    /// Builds from a full row-major matrix; checks symmetry, zero diagonal and range.
    pub fn from_full(k: usize, values: Vec<f64>, band: Option<BandSpec>) -> Result<Self> {
        if values.len() != k * k {
            return Err(invalid!("PLV matrix needs {} entries, got {}", k * k, values.len()));
        }
        for i in 0..k {
            if values[i * k + i] != 0.0 {
                return Err(invalid!("PLV diagonal must be zero"));
            }
            for j in 0..k {
                let v = values[i * k + j];
                if !(0.0..=1.0).contains(&v) {
                    return Err(invalid!("PLV entry {v} outside [0, 1]"));
                }
                if v != values[j * k + i] {
                    return Err(invalid!("PLV matrix must be symmetric"));
                }
            }
        }
        Ok(Self { k, values, band })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.k + j]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn band(&self) -> Option<&BandSpec> {
        self.band.as_ref()
    }

    /// Strict upper triangle, row by row.
    pub fn upper_triangle(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.k * (self.k - 1) / 2);
        for i in 0..self.k {
            for j in i + 1..self.k {
                out.push(self.get(i, j));
            }
        }
        out
    }
}

/// Per-channel weights in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelWeights {
    pub w: Vec<f64>,
    pub band: Option<BandSpec>,
}

impl ChannelWeights {
    /// All-ones weights: the connectivity layer becomes the identity.
    pub fn ones(k: usize) -> Self {
        Self {
            w: vec![1.0; k],
            band: None,
        }
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.w).expect("weights serialize")
    }
}

/// Thresholded connectivity edges, sorted by descending score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeList {
    pub edges: Vec<(usize, usize, f64)>,
    pub threshold: f64,
}

impl EdgeList {
    /// `k1_name,k2_name,score` rows with a header line.
    pub fn to_csv(&self, montage: &Montage) -> String {
        let names = montage.names();
        let mut out = String::from("k1_name,k2_name,score\n");
        for (a, b, s) in &self.edges {
            writeln!(out, "{},{},{}", names[*a], names[*b], s).unwrap();
        }
        out
    }

    pub fn to_json(&self, montage: &Montage) -> String {
        let names = montage.names();
        let edges: Vec<_> = self
            .edges
            .iter()
            .map(|(a, b, s)| serde_json::json!({"k1": names[*a], "k2": names[*b], "score": s}))
            .collect();
        serde_json::to_string_pretty(&serde_json::json!({"threshold": self.threshold, "edges": edges})).expect("edges serialize")
    }
}

/// PLV between channels `k1` and `k2` over every trial and time bin.
pub fn plv_pair(phases: &PhaseSeries, k1: usize, k2: usize) -> Result<f64> {
    let k = phases.n_channels();
    if k1 >= k || k2 >= k {
        return Err(invalid!("channel pair ({k1}, {k2}) out of range for K={k}"));
    }
    let (mut re, mut im) = (0.0, 0.0);
    for n in 0..phases.n_trials() {
        for (a, b) in phases.channel(n, k1).iter().zip(phases.channel(n, k2)) {
            let theta = a - b;
            re += theta.cos();
            im += theta.sin();
        }
    }
    let m = (phases.n_trials() * phases.n_samples()) as f64;
    Ok((re.hypot(im) / m).min(1.0))
}

/// Symmetric PLV matrix: strict upper triangle plus its transpose.
pub fn plv_matrix(phases: &PhaseSeries) -> Result<PlvMatrix> {
    let k = phases.n_channels();
    let mut upper = vec![0.0; k * k];
    for i in 0..k {
        for j in i + 1..k {
            upper[i * k + j] = plv_pair(phases, i, j)?;
        }
    }
    let mut s = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            s[i * k + j] = upper[i * k + j] + upper[j * k + i];
        }
    }
    PlvMatrix::from_full(k, s, None)
}

/// Column sums of the PLV matrix, min-max normalized. A constant sum vector
/// (no spread to normalize) maps every channel to 0.5.
pub fn channel_weights(mat: &PlvMatrix) -> ChannelWeights {
    let k = mat.k();
    let sums: Vec<f64> = (0..k).map(|j| (0..k).map(|i| mat.get(i, j)).sum()).collect();
    let lo = sums.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = sums.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w = if hi > lo {
        sums.iter().map(|s| (s - lo) / (hi - lo)).collect()
    } else {
        vec![0.5; k]
    };
    ChannelWeights {
        w,
        band: mat.band().cloned(),
    }
}

/// Scales every channel of every trial by its weight.
pub fn apply_weights(set: &EpochSet, w: &ChannelWeights) -> Result<EpochSet> {
    let k = set.n_channels();
    if w.len() != k {
        return Err(invalid!("weight vector has {} entries for {k} channels", w.len()));
    }
    let t = set.n_samples();
    let mut out = set.samples().to_vec();
    for (row, chunk) in out.chunks_exact_mut(t).enumerate() {
        let g = w.w[row % k];
        chunk.iter_mut().for_each(|v| *v = (*v as f64 * g) as f32);
    }
    set.replace_samples(set.fs_hz(), t, out)
}

/// Pairs `k1 < k2` whose PLV exceeds `threshold`, strongest first.
pub fn strong_edges(mat: &PlvMatrix, threshold: f64) -> Result<EdgeList> {
    if !(0.0..1.0).contains(&threshold) {
        return Err(invalid!("edge threshold must lie in [0, 1), got {threshold}"));
    }
    let k = mat.k();
    let mut edges = Vec::new();
    for i in 0..k {
        for j in i + 1..k {
            let s = mat.get(i, j);
            if s > threshold {
                edges.push((i, j, s));
            }
        }
    }
    edges.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    Ok(EdgeList { edges, threshold })
}

/// Pearson correlation between the strict upper triangles of two matrices.
pub fn plv_similarity(a: &PlvMatrix, b: &PlvMatrix) -> Result<f64> {
    if a.k() != b.k() {
        return Err(invalid!("matrix sizes differ: {} vs {}", a.k(), b.k()));
    }
    let x = a.upper_triangle();
    let y = b.upper_triangle();
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (p, q) in x.iter().zip(&y) {
        sxy += (p - mx) * (q - my);
        sxx += (p - mx) * (p - mx);
        syy += (q - my) * (q - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::InvalidInput("constant vector: correlation undefined".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Band-pass, phase and PLV for one band in a single call.
pub fn band_plv(set: &EpochSet, band: &BandSpec, order: usize) -> Result<PlvMatrix> {
    let filtered = extract_bands(set, std::slice::from_ref(band), order)?.remove(0);
    let phases = instantaneous_phase(&filtered)?;
    let mut m = plv_matrix(&phases)?;
    m.band = Some(band.clone());
    Ok(m)
}

/// Weights for each band computed from `set` (intended to be the training split only).
pub fn band_weights(set: &EpochSet, bands: &[BandSpec], order: usize) -> Result<Vec<ChannelWeights>> {
    bands.iter().map(|b| band_plv(set, b, order).map(|m| channel_weights(&m))).collect()
}
