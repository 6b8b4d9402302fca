use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::io::AnnotationDataset;
use crate::compute::{derive_seed, rng_from_seed};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Texts never shared between splits; annotators may recur.
    #[default]
    TextDisjoint,
    /// Additionally drops test records whose annotator appears in training.
    TextAndUserDisjoint,
}

/// Assignment of every text to one of `k` folds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    pub seed: u64,
    pub text_fold: BTreeMap<String, usize>,
}

/// Record indices for one cross-validation round.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RoundSplit {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
    /// Test records removed by the strict user-disjoint mode.
    pub dropped_test: usize,
}

impl RoundSplit {
    /// Fraction of the round's test records dropped by strict mode.
    pub fn dropped_fraction(&self) -> f64 {
        let total = self.test.len() + self.dropped_test;
        if total == 0 {
            0.0
        } else {
            self.dropped_test as f64 / total as f64
        }
    }
}

/// Shuffle the sorted text ids with `seed` and deal them round-robin into `k` folds.
pub fn split_folds(dataset: &AnnotationDataset, k: usize, seed: u64) -> Result<FoldAssignment> {
    let mut texts = dataset.texts();
    if k < 2 {
        return Err(Error::Config(format!("k must be at least 2, got {k}")));
    }
    if k > texts.len() {
        return Err(Error::Config(format!("k = {k} exceeds the number of texts ({})", texts.len())));
    }
    texts.shuffle(&mut rng_from_seed(derive_seed(seed, "folds")));
    let text_fold = texts.into_iter().enumerate().map(|(i, t)| (t, i % k)).collect();
    Ok(FoldAssignment { k, seed, text_fold })
}

impl FoldAssignment {
    pub fn fold_of(&self, text_id: &str) -> Option<usize> {
        self.text_fold.get(text_id).copied()
    }

    pub fn texts_in(&self, fold: usize) -> Vec<&str> {
        self.text_fold.iter().filter(|(_, f)| **f == fold).map(|(t, _)| t.as_str()).collect()
    }

    /// Round `r`: fold `r` is test, fold `r+1 (mod k)` validation, the rest training.
    /// With `k = 2` validation texts are carved from the training fold instead.
    pub fn round(&self, dataset: &AnnotationDataset, r: usize, mode: SplitMode) -> Result<RoundSplit> {
        if r >= self.k {
            return Err(Error::Config(format!("round {r} out of range for k = {}", self.k)));
        }
        let valid_texts: BTreeSet<&str> = if self.k >= 3 {
            self.texts_in((r + 1) % self.k).into_iter().collect()
        } else {
            let mut pool = self.texts_in(1 - r);
            if pool.len() < 2 {
                return Err(Error::Config("too few training texts to carve a validation set".into()));
            }
            pool.shuffle(&mut rng_from_seed(derive_seed(self.seed, &format!("valid{r}"))));
            let n = (pool.len() / 8).max(1);
            pool.into_iter().take(n).collect()
        };
        let mut split = RoundSplit::default();
        for (i, rec) in dataset.records.iter().enumerate() {
            let fold = self.fold_of(&rec.text_id).ok_or_else(|| Error::Join { text_id: rec.text_id.clone() })?;
            if fold == r {
                split.test.push(i);
            } else if valid_texts.contains(rec.text_id.as_str()) {
                split.valid.push(i);
            } else {
                split.train.push(i);
            }
        }
        if mode == SplitMode::TextAndUserDisjoint {
            let seen: BTreeSet<&str> = split.train.iter().map(|&i| dataset.records[i].annotator_id.as_str()).collect();
            let before = split.test.len();
            split.test.retain(|&i| !seen.contains(dataset.records[i].annotator_id.as_str()));
            split.dropped_test = before - split.test.len();
        }
        Ok(split)
    }
}
