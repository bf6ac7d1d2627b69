//! Central-difference verification of reverse-mode gradients.

use rand::seq::index::sample;

use super::Tensor;
use crate::error::{invalid, Result};
use crate::rng;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub h: f64,
    /// Coordinates checked per parameter; larger tensors are subsampled.
    pub max_coords: usize,
    /// Denominator floor of the relative error.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            max_coords: 24,
            floor: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst: Option<(usize, usize)>,
    pub coords_checked: usize,
}

/// Compares `analytic(params)` against central differences of `f`.
///
/// `f` maps parameter tensors to a scalar; `analytic` returns the gradient
/// of the same computation for every parameter. Relative error per
/// coordinate is `|a - n| / max(|a|, |n|, floor)`.
pub fn grad_check<F, G>(params: &[Tensor], mut f: F, analytic: G, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
    G: FnOnce(&[Tensor]) -> Result<Vec<Vec<f64>>>,
{
    let base = f(params)?;
    if f(params)? != base {
        return Err(invalid!("function is not deterministic"));
    }
    let grads = analytic(params)?;
    if grads.len() != params.len() {
        return Err(invalid!("{} gradients for {} parameters", grads.len(), params.len()));
    }
    let mut r = rng::seeded(opts.seed);
    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        coords_checked: 0,
    };
    for (pi, g) in grads.iter().enumerate() {
        let n = work[pi].numel();
        if g.len() != n {
            return Err(invalid!("gradient {pi} has {} entries for {n} values", g.len()));
        }
        let coords: Vec<usize> = if n <= opts.max_coords {
            (0..n).collect()
        } else {
            let mut c = sample(&mut r, n, opts.max_coords).into_vec();
            c.sort_unstable();
            c
        };
        for c in coords {
            let orig = work[pi].data()[c];
            work[pi].data_mut()[c] = orig + opts.h;
            let up = f(&work)?;
            work[pi].data_mut()[c] = orig - opts.h;
            let down = f(&work)?;
            work[pi].data_mut()[c] = orig;
            let num = (up - down) / (2.0 * opts.h);
            let a = g[c];
            let err = (a - num).abs() / a.abs().max(num.abs()).max(opts.floor);
            report.coords_checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((pi, c));
            }
        }
    }
    Ok(report)
}
