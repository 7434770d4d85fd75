//! Ranking metrics, the unlearning-effectiveness audit, baselines and the
//! unlearning-cost benchmark.

mod baseline;
mod bench;

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::corpus::{ItemId, SessionDataset};
use crate::error::{Result, SruError};

pub use baseline::{sisa_baseline, Popularity, SisaModel};
pub use bench::{benchmark_unlearn, BenchmarkReport, TimingReport};

/// Cutoffs reported by default for recommendation quality.
pub const RANKING_KS: [usize; 2] = [10, 20];
/// Cutoffs reported by default for the unlearning audit.
pub const HIT_KS: [usize; 4] = [1, 5, 10, 20];

/// Anything that scores every item given a session prefix.
pub trait Recommender: Sync {
    fn num_items(&self) -> usize;

    /// Logits over items `1..=|V|`; entry `i` scores item `i + 1`.
    fn logits(&self, prefix: &[ItemId]) -> Result<Vec<f64>>;

    /// Logits for every proper prefix `items[..t]`, `t` in `1..len`.
    fn prefix_logits(&self, items: &[ItemId]) -> Result<Vec<Vec<f64>>> {
        (1..items.len()).map(|t| self.logits(&items[..t])).collect()
    }
}

/// `1 +` the number of other items scored strictly higher than `target`.
/// Ties are resolved in the target's favour.
pub fn rank_of_target(logits: &[f64], target: ItemId) -> Result<usize> {
    if target == 0 || target as usize > logits.len() {
        return Err(SruError::Index {
            what: "target item",
            index: target as usize,
            bound: logits.len() + 1,
        });
    }
    let t = target as usize - 1;
    let score = logits[t];
    Ok(1 + logits
        .iter()
        .enumerate()
        .filter(|&(i, &v)| i != t && v > score)
        .count())
}

/// `(recall, ndcg)` contribution of a single ranked target.
pub fn metrics_at_k(rank: usize, k: usize) -> (f64, f64) {
    if rank >= 1 && rank <= k {
        (1.0, 1.0 / ((1 + rank) as f64).log2())
    } else {
        (0.0, 0.0)
    }
}

/// Mean Recall@K and NDCG@K over all evaluation points.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RankingReport {
    pub recall: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
    pub evaluation_points: usize,
}

impl RankingReport {
    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.recall.get(&k).copied()
    }

    pub fn ndcg_at(&self, k: usize) -> Option<f64> {
        self.ndcg.get(&k).copied()
    }
}

/// Ranks of the next item at every position of every session, in session
/// order.
pub fn session_ranks<R: Recommender + ?Sized>(
    model: &R,
    dataset: &SessionDataset,
) -> Result<Vec<Vec<usize>>> {
    dataset
        .sessions
        .par_iter()
        .map(|s| {
            let logits = model.prefix_logits(&s.items)?;
            logits
                .iter()
                .enumerate()
                .map(|(t, l)| rank_of_target(l, s.items[t + 1]))
                .collect()
        })
        .collect()
}

/// Feeds each session one interaction at a time and ranks the next item
/// against the whole item set.
pub fn evaluate<R: Recommender + ?Sized>(
    model: &R,
    dataset: &SessionDataset,
    ks: &[usize],
) -> Result<RankingReport> {
    if dataset.is_empty() {
        return Err(SruError::EmptyDataset { stage: "evaluation" });
    }
    if model.num_items() != dataset.num_items() {
        return Err(SruError::contract(format!(
            "model scores {} items but dataset has {}",
            model.num_items(),
            dataset.num_items()
        )));
    }
    let ranks = session_ranks(model, dataset)?;
    let points: usize = ranks.iter().map(Vec::len).sum();
    if points == 0 {
        return Err(SruError::contract("no evaluation points (all sessions shorter than 2)"));
    }
    let mut report = RankingReport {
        evaluation_points: points,
        ..Default::default()
    };
    for &k in ks {
        let (mut recall, mut ndcg) = (0.0, 0.0);
        for &rank in ranks.iter().flatten() {
            let (r, n) = metrics_at_k(rank, k);
            recall += r;
            ndcg += n;
        }
        report.recall.insert(k, recall / points as f64);
        report.ndcg.insert(k, ndcg / points as f64);
    }
    Ok(report)
}

/// One audited unlearning request: the deleted item and the context an
/// attacker gets to see.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AuditCase {
    pub session_id: String,
    pub target_item: ItemId,
    pub context: Vec<ItemId>,
}

/// HIT@K of deleted items under the unlearned model. Lower is better.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EffectivenessReport {
    pub hit: BTreeMap<usize, f64>,
    pub audited_requests: usize,
    pub skipped_empty_prefix: usize,
}

impl EffectivenessReport {
    pub fn hit_at(&self, k: usize) -> Option<f64> {
        self.hit.get(&k).copied()
    }
}

/// Fraction of audited requests whose deleted item ranks within the top K
/// given the surviving context. Cases with an empty context are skipped and
/// counted.
pub fn hit_effectiveness<R: Recommender + ?Sized>(
    model: &R,
    cases: &[AuditCase],
    ks: &[usize],
) -> Result<EffectivenessReport> {
    let audited: Vec<&AuditCase> = cases.iter().filter(|c| !c.context.is_empty()).collect();
    if audited.is_empty() {
        return Err(SruError::contract("no unlearning requests with a non-empty context to audit"));
    }
    let ranks: Vec<usize> = audited
        .par_iter()
        .map(|c| rank_of_target(&model.logits(&c.context)?, c.target_item))
        .collect::<Result<_>>()?;
    let mut report = EffectivenessReport {
        audited_requests: audited.len(),
        skipped_empty_prefix: cases.len() - audited.len(),
        ..Default::default()
    };
    for &k in ks {
        let hits = ranks.iter().filter(|&&r| r <= k).count();
        report.hit.insert(k, hits as f64 / audited.len() as f64);
    }
    Ok(report)
}
