//! Trial-grouped partitions: every segment of a trial lands on the same side.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Segment indices of one outer fold.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Distinct trial ids in ascending order, each with its segment indices.
fn trials_of(trial_ids: &[u64]) -> BTreeMap<u64, Vec<usize>> {
    let mut by_trial: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, &t) in trial_ids.iter().enumerate() {
        by_trial.entry(t).or_default().push(i);
    }
    by_trial
}

/// Shuffles the distinct trials and deals them round-robin into `k` folds, so
/// fold sizes (in trials) differ by at most one.
pub fn grouped_kfold<R: Rng + ?Sized>(trial_ids: &[u64], k: usize, rng: &mut R) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(Error::Split(format!("need at least 2 folds, got {k}")));
    }
    let by_trial = trials_of(trial_ids);
    if by_trial.len() < k {
        return Err(Error::Split(format!("{} distinct trials cannot fill {k} folds", by_trial.len())));
    }
    let mut trials: Vec<u64> = by_trial.keys().copied().collect();
    trials.shuffle(rng);
    let mut fold_of = BTreeMap::new();
    for (i, t) in trials.iter().enumerate() {
        fold_of.insert(*t, i % k);
    }
    let mut folds = vec![Fold { train: Vec::new(), test: Vec::new() }; k];
    for (i, t) in trial_ids.iter().enumerate() {
        let f = fold_of[t];
        for (j, fold) in folds.iter_mut().enumerate() {
            if j == f {
                fold.test.push(i);
            } else {
                fold.train.push(i);
            }
        }
    }
    Ok(folds)
}

/// Splits `indices` into (train, validation) by trial, holding out
/// `round(fraction · trials)` trials (at least one).
pub fn grouped_holdout<R: Rng + ?Sized>(
    indices: &[usize],
    trial_ids: &[u64],
    fraction: f64,
    rng: &mut R,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let subset: Vec<u64> = indices.iter().map(|&i| trial_ids[i]).collect();
    let by_trial = trials_of(&subset);
    let n_val = ((fraction * by_trial.len() as f64).round() as usize).max(1);
    if by_trial.len() < 2 || n_val >= by_trial.len() {
        return Err(Error::Config(format!(
            "cannot hold out {n_val} of {} training trials for validation",
            by_trial.len()
        )));
    }
    let mut trials: Vec<u64> = by_trial.keys().copied().collect();
    trials.shuffle(rng);
    trials.truncate(n_val);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for &i in indices {
        if trials.contains(&trial_ids[i]) {
            val.push(i);
        } else {
            train.push(i);
        }
    }
    Ok((train, val))
}
