use rand::Rng as _;

use crate::error::{invalid, Result};
use crate::rng::seeded;

/// Largest sample size for which the permutation test enumerates all sign
/// flips instead of sampling them.
pub const EXACT_MAX_N: usize = 12;

/// Fraction of positions where the labels agree.
pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(invalid!("accuracy: {} predictions for {} labels", pred.len(), truth.len()));
    }
    if pred.is_empty() {
        return Err(invalid!("accuracy of an empty set"));
    }
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Two-sided paired sign-flip test on the mean difference `a - b`.
///
/// For `n <= EXACT_MAX_N` every one of the `2^n` flips is enumerated and
/// `p = #{|stat| >= |observed|} / 2^n`. Otherwise `n_perm` random flips give
/// `p = (#{|stat| >= |observed|} + 1) / (n_perm + 1)`. Statistics are compared
/// with a relative slack of `1e-12` so that rounding in the sums cannot split
/// mathematically equal values.
pub fn permutation_test_paired(a: &[f64], b: &[f64], n_perm: usize, seed: u64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(invalid!("paired test: {} vs {} scores", a.len(), b.len()));
    }
    let n = a.len();
    if n < 2 {
        return Err(invalid!("paired test needs at least 2 pairs, got {n}"));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    if d.iter().any(|v| !v.is_finite()) {
        return Err(invalid!("paired test: non-finite scores"));
    }
    let scale: f64 = d.iter().map(|v| v.abs()).sum();
    let observed = d.iter().sum::<f64>().abs();
    let bar = observed - 1e-12 * scale;
    let flipped_sum = |signs: u64| -> f64 { d.iter().enumerate().map(|(i, &v)| if signs >> i & 1 == 1 { -v } else { v }).sum() };
    if n <= EXACT_MAX_N {
        let total = 1u64 << n;
        let hits = (0..total).filter(|&s| flipped_sum(s).abs() >= bar).count();
        return Ok(hits as f64 / total as f64);
    }
    if n_perm == 0 {
        return Err(invalid!("paired test needs at least one permutation"));
    }
    let mut rng = seeded(seed);
    let mut hits = 0usize;
    for _ in 0..n_perm {
        let s: f64 = d.iter().map(|&v| if rng.random::<bool>() { -v } else { v }).sum();
        if s.abs() >= bar {
            hits += 1;
        }
    }
    Ok((hits + 1) as f64 / (n_perm + 1) as f64)
}
