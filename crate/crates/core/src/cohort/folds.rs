use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::stats::FOLDS;

/// Six disjoint lists of pair indices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub folds: Vec<Vec<usize>>,
}

impl FoldSplit {
    /// Index of the fold holding `pair`, if any.
    pub fn fold_of(&self, pair: usize) -> Option<usize> {
        self.folds.iter().position(|f| f.contains(&pair))
    }

    /// Pair indices outside fold `f`, in fold order.
    pub fn training_pairs(&self, f: usize) -> Vec<usize> {
        self.folds
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != f)
            .flat_map(|(_, v)| v.iter().copied())
            .collect()
    }

    /// Checks the split covers `0..n_pairs` exactly once with balanced folds.
    pub fn validate(&self, n_pairs: usize) -> Result<()> {
        if self.folds.len() != FOLDS {
            return Err(Error::invalid(format!("split has {} folds, expected {FOLDS}", self.folds.len())));
        }
        let mut seen = vec![false; n_pairs];
        for &p in self.folds.iter().flatten() {
            if p >= n_pairs || std::mem::replace(&mut seen[p], true) {
                return Err(Error::invalid(format!("pair {p} is out of range or repeated")));
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::invalid("split does not cover every pair"));
        }
        let sizes = self.folds.iter().map(Vec::len);
        if sizes.clone().max().unwrap_or(0) - sizes.min().unwrap_or(0) > 1 {
            return Err(Error::invalid("fold sizes differ by more than one"));
        }
        Ok(())
    }
}

/// Shuffles pair indices with `seed` and deals them round-robin into six
/// folds, so a case and its control always share a fold.
pub fn split_six_folds(n_pairs: usize, seed: u64) -> Result<FoldSplit> {
    if n_pairs < FOLDS {
        return Err(Error::invalid(format!("need at least {FOLDS} pairs to split, got {n_pairs}")));
    }
    let mut order: Vec<usize> = (0..n_pairs).collect();
    SeededRng::new(seed).shuffle(&mut order);
    let mut folds = vec![Vec::new(); FOLDS];
    for (i, p) in order.into_iter().enumerate() {
        folds[i % FOLDS].push(p);
    }
    Ok(FoldSplit { folds })
}
