use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::corpus::{DocId, EntityId};
use crate::error::{Error, Result};
use crate::sparse::SparseVector;

/// Cutoffs reported by default.
pub const DEFAULT_KS: [usize; 3] = [1, 5, 10];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HitsReport {
    pub ks: Vec<usize>,
    /// `hits[i]` is Hits@`ks[i]`.
    pub hits: Vec<f64>,
    pub n: usize,
}

impl HitsReport {
    pub fn at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.hits[i])
    }
}

/// Entities of `z` by decreasing weight, ties to the lower id.
pub fn rank_entities(z: &SparseVector) -> Vec<EntityId> {
    let mut pairs: Vec<(EntityId, f64)> = z.iter().collect();
    pairs.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    pairs.into_iter().map(|(e, _)| e).collect()
}

/// Fraction of questions with any gold entity among the first `k`
/// predictions, for each `k`. An empty prediction list is a miss.
pub fn evaluate_hits(
    predictions: &[Vec<EntityId>],
    gold: &[BTreeSet<EntityId>],
    ks: &[usize],
) -> Result<HitsReport> {
    if predictions.len() != gold.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} questions",
            predictions.len(),
            gold.len()
        )));
    }
    if ks.contains(&0) {
        return Err(Error::Contract("k must be >= 1".into()));
    }
    let n = gold.len();
    let hits = ks
        .iter()
        .map(|&k| {
            let hit = predictions
                .iter()
                .zip(gold)
                .filter(|(p, g)| p.iter().take(k).any(|e| g.contains(e)))
                .count();
            if n == 0 {
                0.0
            } else {
                hit as f64 / n as f64
            }
        })
        .collect();
    Ok(HitsReport {
        ks: ks.to_vec(),
        hits,
        n,
    })
}

/// Passage retrieval accuracy@k: a question counts when all of its required
/// passages are among the first `k` retrieved ones.
pub fn retrieval_accuracy(retrieved: &[Vec<DocId>], required: &[BTreeSet<DocId>], k: usize) -> Result<f64> {
    if retrieved.len() != required.len() {
        return Err(Error::Contract("retrieved and required lists differ in length".into()));
    }
    if retrieved.is_empty() {
        return Ok(0.0);
    }
    let ok = retrieved
        .iter()
        .zip(required)
        .filter(|(r, need)| {
            let top: BTreeSet<DocId> = r.iter().take(k).copied().collect();
            !need.is_empty() && need.is_subset(&top)
        })
        .count();
    Ok(ok as f64 / retrieved.len() as f64)
}
