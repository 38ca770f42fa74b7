use rand::seq::index;

use super::{DataError, DatasetPair};
use crate::rng::RngStream;

/// One few-shot trial. Indices refer to the splits of the [`DatasetPair`]
/// the episode was drawn from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub shots: usize,
    /// `support[c]` holds `shots` indices into `novel_train_pool` for class `c`.
    pub support: Vec<Vec<usize>>,
    /// Indices into `novel_test`.
    pub novel_queries: Vec<usize>,
    /// Indices into `base_test`.
    pub base_queries: Vec<usize>,
}

impl Episode {
    pub fn support_size(&self) -> usize {
        self.support.iter().map(Vec::len).sum()
    }
}

/// Draws `k` support samples per novel class without replacement. Queries
/// are the whole novel and base test splits.
pub fn sample_episode(pair: &DatasetPair, k: usize, rng: &mut RngStream) -> Result<Episode, DataError> {
    let pool = &pair.novel_train_pool;
    let groups = pool.by_class();
    let mut support = Vec::with_capacity(groups.len());
    for (class, members) in groups.iter().enumerate() {
        if members.len() < k || k == 0 {
            return Err(DataError::InsufficientPool {
                class: pool.label_space[class].clone(),
                needed: k,
                available: members.len(),
            });
        }
        support.push(index::sample(rng, members.len(), k).into_iter().map(|i| members[i]).collect());
    }
    Ok(Episode {
        shots: k,
        support,
        novel_queries: (0..pair.novel_test.len()).collect(),
        base_queries: (0..pair.base_test.len()).collect(),
    })
}
