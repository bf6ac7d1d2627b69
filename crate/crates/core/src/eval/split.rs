use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::rng::seeded;
use crate::EpochSet;

/// Trial indices of one split. Augmented copies always land in the split of
/// the trial they were made from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
    pub stratified: bool,
}

/// Origin groups per class, each group sorted and the groups in order of
/// first appearance. A group's class is the label of its first trial.
fn groups_by_class(set: &EpochSet) -> Result<Vec<Vec<Vec<usize>>>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &o) in set.origins().iter().enumerate() {
        groups.entry(o).or_default().push(i);
    }
    let mut per_class = vec![Vec::new(); set.n_classes()];
    for members in groups.into_values() {
        let label = set.labels()[members[0]];
        if members.iter().any(|&i| set.labels()[i] != label) {
            return Err(invalid!(
                "trials sharing origin {} carry different labels",
                set.origins()[members[0]]
            ));
        }
        per_class[label].push(members);
    }
    Ok(per_class)
}

/// Splits `n` into parts proportional to `fractions` by largest remainder;
/// ties go to the earlier part.
fn largest_remainder(n: usize, fractions: &[f64]) -> Vec<usize> {
    let quotas: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut parts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        (quotas[b] - quotas[b].floor())
            .total_cmp(&(quotas[a] - quotas[a].floor()))
            .then(a.cmp(&b))
    });
    let short = n - parts.iter().sum::<usize>();
    for &i in order.iter().take(short) {
        parts[i] += 1;
    }
    parts
}

fn flatten(groups: &[Vec<usize>]) -> Vec<usize> {
    let mut v: Vec<usize> = groups.iter().flatten().copied().collect();
    v.sort_unstable();
    v
}

/// Stratified 60/20/20 split over origin groups. Per class the group counts
/// follow largest-remainder rounding, so 41 groups give 25/8/8.
pub fn split_62_2(set: &EpochSet, seed: u64) -> Result<SplitPlan> {
    let per_class = groups_by_class(set)?;
    let mut rng = seeded(seed);
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for (c, mut groups) in per_class.into_iter().enumerate() {
        if groups.is_empty() {
            continue;
        }
        if groups.len() < 5 {
            return Err(invalid!(
                "class {c} has {} trials; a stratified split needs at least 5",
                groups.len()
            ));
        }
        groups.shuffle(&mut rng);
        let parts = largest_remainder(groups.len(), &[0.6, 0.2, 0.2]);
        let (a, rest) = groups.split_at(parts[0]);
        let (b, d) = rest.split_at(parts[1]);
        train.extend(flatten(a));
        val.extend(flatten(b));
        test.extend(flatten(d));
    }
    for v in [&mut train, &mut val, &mut test] {
        v.sort_unstable();
    }
    Ok(SplitPlan {
        train,
        val,
        test,
        seed,
        stratified: true,
    })
}

/// Stratified `k`-fold partition over origin groups. Each plan has an empty
/// validation list; every trial is in exactly one test fold.
pub fn kfold(set: &EpochSet, k: usize, seed: u64) -> Result<Vec<SplitPlan>> {
    if k < 2 {
        return Err(invalid!("k-fold needs k >= 2, got {k}"));
    }
    let per_class = groups_by_class(set)?;
    let n_groups: usize = per_class.iter().map(Vec::len).sum();
    if k > n_groups {
        return Err(invalid!("k = {k} exceeds the {n_groups} independent trials"));
    }
    let mut rng = seeded(seed);
    let mut folds = vec![Vec::new(); k];
    // deal groups round robin, continuing across classes so fold sizes differ by at most one
    let mut next = 0;
    for mut groups in per_class {
        groups.shuffle(&mut rng);
        for g in groups {
            folds[next].extend(g);
            next = (next + 1) % k;
        }
    }
    let plans = (0..k)
        .map(|f| {
            let mut test = folds[f].clone();
            test.sort_unstable();
            let mut train: Vec<usize> = folds
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != f)
                .flat_map(|(_, v)| v.iter().copied())
                .collect();
            train.sort_unstable();
            SplitPlan {
                train,
                val: Vec::new(),
                test,
                seed,
                stratified: true,
            }
        })
        .collect();
    Ok(plans)
}

/// Leave-one-subject-out: the target subject is the test set and every other
/// subject, concatenated in order, the training set.
pub fn loso(subjects: &[EpochSet], target: usize) -> Result<(EpochSet, EpochSet)> {
    if subjects.len() < 2 {
        return Err(invalid!("leave-one-subject-out needs at least 2 subjects, got {}", subjects.len()));
    }
    if target >= subjects.len() {
        return Err(invalid!("target subject {target} out of range for {} subjects", subjects.len()));
    }
    let others: Vec<&EpochSet> = subjects.iter().enumerate().filter(|&(i, _)| i != target).map(|(_, s)| s).collect();
    if others.iter().any(|s| s.montage() != subjects[target].montage()) {
        return Err(invalid!("montage mismatch between subjects"));
    }
    Ok((EpochSet::concat(&others)?, subjects[target].clone()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rounding() {
        assert_eq!(largest_remainder(41, &[0.6, 0.2, 0.2]), vec![25, 8, 8]);
        assert_eq!(largest_remainder(100, &[0.6, 0.2, 0.2]), vec![60, 20, 20]);
        assert_eq!(largest_remainder(7, &[0.6, 0.2, 0.2]), vec![4, 2, 1]);
    }
}
