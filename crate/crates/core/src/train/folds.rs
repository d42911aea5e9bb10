use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use crate::data::Subset;
use crate::rng;

use super::TrainError;

/// Stratified k-fold assignment: `sample_id → fold`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldSplit {
    pub k: usize,
    pub assignment: BTreeMap<String, usize>,
}

impl FoldSplit {
    pub fn fold_of(&self, id: &str) -> Option<usize> {
        self.assignment.get(id).copied()
    }

    pub fn members(&self, fold: usize) -> impl Iterator<Item = &str> {
        self.assignment.iter().filter(move |(_, &f)| f == fold).map(|(id, _)| id.as_str())
    }
}

/// Splits samples into `k` folds, stratified by `(subset, class)`.
///
/// Each cell is shuffled with its own seeded stream and dealt round-robin,
/// starting at a fold offset that rotates with the number of samples already
/// dealt, so per-class fold counts differ by at most one and fold totals stay
/// balanced.
pub fn kfold_split(samples: &[(String, Subset, usize)], k: usize, seed: u64) -> Result<FoldSplit, TrainError> {
    if k < 2 {
        return Err(TrainError::Config(format!("k must be at least 2, got {k}")));
    }
    let mut cells: BTreeMap<(Subset, usize), Vec<&str>> = BTreeMap::new();
    for (id, subset, class) in samples {
        cells.entry((*subset, *class)).or_default().push(id);
    }
    let mut assignment = BTreeMap::new();
    let mut dealt = 0usize;
    for ((subset, class), mut ids) in cells {
        if ids.len() < k {
            return Err(TrainError::CellTooSmall { subset, class, count: ids.len(), k });
        }
        ids.sort_unstable();
        let mut r = rng::stream(seed, &[0x666f_6c64, subset as u64, class as u64]);
        ids.shuffle(&mut r);
        for (i, id) in ids.iter().enumerate() {
            if assignment.insert(id.to_string(), (dealt + i) % k).is_some() {
                return Err(TrainError::Config(format!("duplicate sample id {id:?}")));
            }
        }
        dealt += ids.len();
    }
    Ok(FoldSplit { k, assignment })
}
