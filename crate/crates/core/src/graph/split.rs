use rand::seq::SliceRandom;

use crate::rng::rng_from;

/// K-fold assignment: seeded shuffle, then round-robin.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    folds: Vec<usize>,
    k: usize,
    seed: u64,
}

impl DatasetSplit {
    pub fn new(len: usize, k: usize, seed: u64) -> Self {
        assert!(k >= 1, "at least one fold");
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng_from(seed));
        let mut folds = vec![0; len];
        for (pos, &sample) in order.iter().enumerate() {
            folds[sample] = pos % k;
        }
        Self { folds, k, seed }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn fold_of(&self, sample: usize) -> usize {
        self.folds[sample]
    }

    /// Sample indices held out in `fold`, ascending.
    pub fn eval_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.folds.len()).filter(|&i| self.folds[i] == fold).collect()
    }

    /// Sample indices of every other fold, ascending. With a single fold the
    /// training and evaluation sets coincide.
    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        if self.k == 1 {
            return (0..self.folds.len()).collect();
        }
        (0..self.folds.len()).filter(|&i| self.folds[i] != fold).collect()
    }
}
