use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ClipRecord, DataError, Dataset, Label};

/// Assignment of every clip id to one of `k` folds.
///
/// Shuffling uses ChaCha8 seeded with the caller's `u64`, so a plan is a
/// pure function of the dataset, `k` and the seed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    k: usize,
    assignment: BTreeMap<u64, usize>,
}

impl FoldPlan {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn fold_of(&self, clip_id: u64) -> Option<usize> {
        self.assignment.get(&clip_id).copied()
    }

    pub fn assignment(&self) -> &BTreeMap<u64, usize> {
        &self.assignment
    }

    /// Training records (every other fold) and evaluation records (`fold`).
    pub fn split<'d>(&self, dataset: &'d Dataset, fold: usize) -> (Vec<&'d ClipRecord>, Vec<&'d ClipRecord>) {
        dataset
            .records()
            .iter()
            .partition(|r| self.fold_of(r.clip_id) != Some(fold))
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in self.assignment.values() {
            sizes[f] += 1;
        }
        sizes
    }

    /// SHA-256 over `k` and the sorted `(clip_id, fold)` pairs, hex encoded.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.k as u64).to_le_bytes());
        for (id, f) in &self.assignment {
            h.update(id.to_le_bytes());
            h.update((*f as u64).to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn check_k(k: usize) -> Result<(), DataError> {
    if k < 2 {
        return Err(DataError::Invalid(format!("need at least 2 folds, got {k}")));
    }
    Ok(())
}

/// Class-stratified k-fold split.
///
/// Each class is shuffled and dealt round-robin, continuing from where the
/// previous class stopped, so per-class fold counts differ by at most one
/// and fold sizes overall do too. Classes with no records are skipped; a
/// class with between 1 and `k − 1` records is an error.
pub fn stratified_kfold(dataset: &Dataset, k: usize, seed: u64) -> Result<FoldPlan, DataError> {
    check_k(k)?;
    let mut by_class: [Vec<u64>; Label::COUNT] = Default::default();
    for r in dataset.records() {
        by_class[r.label.index()].push(r.clip_id);
    }
    for (label, ids) in Label::ALL.iter().zip(&by_class) {
        if !ids.is_empty() && ids.len() < k {
            return Err(DataError::TooFewPerClass { label: *label, count: ids.len(), k });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = BTreeMap::new();
    let mut next = 0;
    for mut ids in by_class {
        ids.shuffle(&mut rng);
        for id in ids {
            assignment.insert(id, next);
            next = (next + 1) % k;
        }
    }
    Ok(FoldPlan { k, assignment })
}

/// Plain shuffled k-fold split, ignoring labels.
pub fn kfold(dataset: &Dataset, k: usize, seed: u64) -> Result<FoldPlan, DataError> {
    check_k(k)?;
    if dataset.len() < k {
        return Err(DataError::Invalid(format!("{} records cannot fill {k} folds", dataset.len())));
    }
    let mut ids: Vec<u64> = dataset.records().iter().map(|r| r.clip_id).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let assignment = ids.into_iter().enumerate().map(|(i, id)| (id, i % k)).collect();
    Ok(FoldPlan { k, assignment })
}
