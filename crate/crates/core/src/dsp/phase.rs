use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::data::EpochSet;
use crate::error::{invalid, Result};

/// Instantaneous phases, N x K x T, wrapped to `(-pi, pi]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseSeries {
    n_trials: usize,
    n_channels: usize,
    n_samples: usize,
    phases: Vec<f64>,
}

impl PhaseSeries {
    pub fn new(n_trials: usize, n_channels: usize, n_samples: usize, phases: Vec<f64>) -> Result<Self> {
        if phases.len() != n_trials * n_channels * n_samples {
            return Err(invalid!("phase array length does not match {n_trials}x{n_channels}x{n_samples}"));
        }
        if let Some(p) = phases.iter().find(|p| !(p.is_finite() && **p > -PI && **p <= PI)) {
            return Err(invalid!("phase {p} outside (-pi, pi]"));
        }
        Ok(Self {
            n_trials,
            n_channels,
            n_samples,
            phases,
        })
    }

    pub fn n_trials(&self) -> usize {
        self.n_trials
    }

    pub fn n_channels(&self) -> usize {
        self.n_channels
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn phases(&self) -> &[f64] {
        &self.phases
    }

    pub fn channel(&self, n: usize, k: usize) -> &[f64] {
        let start = (n * self.n_channels + k) * self.n_samples;
        &self.phases[start..start + self.n_samples]
    }
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_phase(p: f64) -> f64 {
    let mut w = p.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    if w <= -PI {
        w += 2.0 * PI;
    }
    w
}

/// Analytic signal `x + i H{x}` via the one-sided spectrum.
pub fn analytic_signal(x: &[f64], planner: &mut FftPlanner<f64>) -> Vec<Complex<f64>> {
    let n = x.len();
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    planner.plan_fft_forward(n).process(&mut buf);
    for (i, c) in buf.iter_mut().enumerate() {
        let h = if i == 0 || (n.is_multiple_of(2) && i == n / 2) {
            1.0
        } else if i < n.div_ceil(2) {
            2.0
        } else {
            0.0
        };
        *c *= h / n as f64;
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    buf
}

/// Phase angle of the analytic signal of one row.
pub fn analytic_phase(x: &[f64], planner: &mut FftPlanner<f64>) -> Vec<f64> {
    analytic_signal(x, planner)
        .into_iter()
        .map(|c| {
            let p = c.im.atan2(c.re);
            if p <= -PI {
                PI
            } else {
                p
            }
        })
        .collect()
}

/// Per-sample phase of every (trial, channel) row. Input should already be
/// band-limited; the transform is periodic, so samples near either edge are
/// less reliable than the interior.
pub fn instantaneous_phase(set: &EpochSet) -> Result<PhaseSeries> {
    let t = set.n_samples();
    if t < 4 {
        return Err(invalid!("analytic signal needs at least 4 samples, got {t}"));
    }
    let mut planner = FftPlanner::new();
    let mut phases = Vec::with_capacity(set.samples().len());
    let mut row = vec![0.0; t];
    for src in set.samples().chunks_exact(t) {
        row.iter_mut().zip(src).for_each(|(r, s)| *r = *s as f64);
        phases.extend(analytic_phase(&row, &mut planner));
    }
    PhaseSeries::new(set.n_trials(), set.n_channels(), t, phases)
}
