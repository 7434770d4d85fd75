use std::collections::HashSet;

use log::warn;

use crate::corpus::{ItemId, SessionDataset, Split};
use crate::error::{Result, SruError};
use crate::numerics::RngStream;

/// Train/validation/test proportions out of 10.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitRatios(pub usize, pub usize, pub usize);

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios(8, 1, 1)
    }
}

/// Session-level seeded shuffle split. Sessions keep their relative order
/// inside each part.
pub fn split(
    dataset: &SessionDataset,
    ratios: SplitRatios,
    seed: u64,
) -> Result<(SessionDataset, SessionDataset, SessionDataset)> {
    let SplitRatios(a, b, c) = ratios;
    if a + b + c != 10 {
        return Err(SruError::contract(format!(
            "split ratios {a}:{b}:{c} must sum to 10"
        )));
    }
    let n = dataset.len();
    if n == 0 {
        return Err(SruError::EmptyDataset { stage: "split" });
    }
    if n < 10 {
        warn!("splitting only {n} sessions; parts will be tiny");
    }
    let mut order: Vec<usize> = (0..n).collect();
    RngStream::new(seed, "corpus/split").shuffle(&mut order);

    let n_train = ((n * a) as f64 / 10.0).round().max(1.0) as usize;
    let n_train = n_train.min(n);
    let n_val = (((n * b) as f64 / 10.0).round() as usize).min(n - n_train);

    let mut tag = vec![Split::Test; n];
    for (rank, &idx) in order.iter().enumerate() {
        tag[idx] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Validation
        } else {
            Split::Test
        };
    }
    let part = |which: Split| {
        let sessions = dataset
            .sessions
            .iter()
            .zip(&tag)
            .filter(|(_, &t)| t == which)
            .map(|(s, _)| s.clone())
            .collect();
        dataset.derive(sessions, which)
    };
    Ok((part(Split::Train), part(Split::Validation), part(Split::Test)))
}

/// Removes items never seen in `train` from an evaluation split; sessions
/// left with fewer than two items are dropped.
pub fn drop_unseen_items(eval: &SessionDataset, train: &SessionDataset) -> SessionDataset {
    let seen: HashSet<ItemId> = train
        .sessions
        .iter()
        .flat_map(|s| s.items.iter().copied())
        .collect();
    let sessions = eval
        .sessions
        .iter()
        .filter_map(|s| {
            let mut s = s.clone();
            let keep: Vec<bool> = s.items.iter().map(|i| seen.contains(i)).collect();
            let mut k = keep.iter();
            s.items.retain(|_| *k.next().unwrap());
            let mut k = keep.iter();
            s.timestamps.retain(|_| *k.next().unwrap());
            (s.len() >= 2).then_some(s)
        })
        .collect();
    eval.derive(sessions, eval.split)
}
