use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Result};
use crate::rng::seeded;
use crate::EpochSet;

/// Returns the originals followed by `factor - 1` rounds of noisy copies. Each
/// copy adds i.i.d. Gaussian noise with standard deviation `sigma_rel` times
/// the (population) standard deviation of that trial's channel, and keeps the
/// label and origin of its source trial.
pub fn augment_gaussian(set: &EpochSet, factor: usize, sigma_rel: f64, seed: u64) -> Result<EpochSet> {
    if factor == 0 {
        return Err(invalid!("augmentation factor must be at least 1"));
    }
    if !(sigma_rel.is_finite() && sigma_rel >= 0.0) {
        return Err(invalid!("sigma_rel must be finite and non-negative, got {sigma_rel}"));
    }
    let n = set.n_trials();
    let t = set.n_samples();
    let k = set.n_channels();
    let mut rng = seeded(seed);
    let mut samples = Vec::with_capacity(factor * set.samples().len());
    samples.extend_from_slice(set.samples());
    let sigmas: Vec<f64> = set
        .samples()
        .chunks(t)
        .map(|row| {
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / t as f64;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / t as f64;
            sigma_rel * var.sqrt()
        })
        .collect();
    for _ in 1..factor {
        for (row, &sigma) in set.samples().chunks(t).zip(&sigmas) {
            samples.extend(row.iter().map(|&v| {
                let z: f64 = StandardNormal.sample(&mut rng);
                (v as f64 + sigma * z) as f32
            }));
        }
    }
    debug_assert_eq!(samples.len(), factor * n * k * t);
    let labels = set.labels().repeat(factor);
    let origins = set.origins().repeat(factor);
    EpochSet::with_origins(
        set.fs_hz(),
        set.montage().clone(),
        t,
        samples,
        labels,
        set.class_names().to_vec(),
        origins,
    )
}
