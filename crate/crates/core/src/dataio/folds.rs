//! Deterministic k-fold assignment with optional stratification, and the
//! 8:1 train/validation sub-split of the non-test cases.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Assign every case to one of `k` test folds. With strata, the shuffled
/// round-robin assignment runs independently inside each stratum so every
/// fold sees the same per-stratum share.
pub fn split_folds(
    case_ids: &[String],
    k: usize,
    strata: Option<&[String]>,
    seed: u64,
) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(Error::Usage(format!("fold count must be >= 2, got {k}")));
    }
    if let Some(s) = strata {
        if s.len() != case_ids.len() {
            return Err(Error::Usage(format!(
                "{} strata tags for {} cases",
                s.len(),
                case_ids.len()
            )));
        }
    }
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for i in 0..case_ids.len() {
        let tag = strata.map(|s| s[i].as_str()).unwrap_or("");
        groups.entry(tag).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![0usize; case_ids.len()];
    for (tag, mut members) in groups {
        if members.len() < k {
            return Err(Error::Usage(format!(
                "stratum `{tag}` has {} cases, fewer than {k} folds",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        for (pos, idx) in members.into_iter().enumerate() {
            folds[idx] = pos % k;
        }
    }
    Ok(folds)
}

/// Split the remaining (non-test) cases 8:1 into train and validation,
/// deterministically from the seed and fold index.
pub fn train_val_split(ids: &[String], seed: u64, fold: usize) -> (Vec<String>, Vec<String>) {
    let mut order: Vec<usize> = (0..ids.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (fold as u64).wrapping_mul(0x9E3779B97F4A7C15));
    order.shuffle(&mut rng);
    let n_val = if ids.len() < 2 {
        0
    } else {
        ((ids.len() as f64 / 9.0).round() as usize).max(1)
    };
    let val: Vec<String> = order[..n_val].iter().map(|&i| ids[i].clone()).collect();
    let train: Vec<String> = order[n_val..].iter().map(|&i| ids[i].clone()).collect();
    (train, val)
}
