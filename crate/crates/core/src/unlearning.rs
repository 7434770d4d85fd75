//! Item-level unlearning: choose extra deletions, rewrite the session, and
//! retrain only the affected sub-models and the aggregation layer.
//!
//! The reference model is not retrained; it saw the deleted items and its
//! hidden states shaped the partition and the CED distances.

use std::collections::{BTreeMap, BTreeSet};
use std::io::BufRead;
use std::time::Instant;

use crate::backbone::GruModel;
use crate::corpus::{ItemId, Session, SessionDataset};
use crate::error::{Result, SruError};
use crate::evaluation::{AuditCase, TimingReport};
use crate::aggregation::{compute_centroid, train_aggregation_on, CentroidSource, PrefixStates};
use crate::framework::{concat_shards, train_sub_models, SruState};
use crate::numerics::{Real, RngStream};

/// How extra items are chosen alongside the target.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Strategy {
    /// Items closest to the target in reference embedding space.
    Ced,
    /// Items immediately preceding the target.
    Ned,
    /// Uniformly random other items.
    Red,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Ced, Strategy::Ned, Strategy::Red];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Ced => "CED",
            Strategy::Ned => "NED",
            Strategy::Red => "RED",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_uppercase().as_str() {
            "CED" => Some(Strategy::Ced),
            "NED" => Some(Strategy::Ned),
            "RED" => Some(Strategy::Red),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UnlearnRequest {
    pub session_id: String,
    /// 0-based position of the item to forget in the stored session.
    pub target_position: usize,
    pub strategy: Strategy,
    /// Number of extra items to delete.
    pub n_extra: usize,
}

/// What the audit gets to see of a modified session.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum AuditContext {
    /// Surviving items that preceded the target.
    #[default]
    Prefix,
    /// The whole surviving session.
    Session,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeletionResult {
    pub session_id: String,
    pub target_position: usize,
    pub target_item: ItemId,
    /// Ascending positions, relative to the session before this call.
    pub deleted_positions: Vec<usize>,
    /// The session after every deletion of the call was applied.
    pub modified_session: Session,
    /// Set when fewer than two items survived and the session was removed.
    pub dropped: bool,
    /// Surviving items before the target's original position.
    pub surviving_prefix: Vec<ItemId>,
}

impl DeletionResult {
    pub fn audit_case(&self, context: AuditContext) -> AuditCase {
        let context = match context {
            AuditContext::Prefix => self.surviving_prefix.clone(),
            AuditContext::Session => self.modified_session.items.clone(),
        };
        AuditCase {
            session_id: self.session_id.clone(),
            target_item: self.target_item,
            context,
        }
    }
}

fn check_target(items: &[ItemId], target: usize) -> Result<()> {
    if target >= items.len() {
        return Err(SruError::Index {
            what: "target position",
            index: target,
            bound: items.len(),
        });
    }
    Ok(())
}

fn with_target(mut extra: Vec<usize>, target: usize) -> Vec<usize> {
    extra.push(target);
    extra.sort_unstable();
    extra
}

/// Target plus the `n` other positions whose reference embeddings are
/// nearest (Euclidean) to the target's; ties go to the earlier position.
pub fn ced_select<T: Real>(
    items: &[ItemId],
    target: usize,
    n: usize,
    reference: &GruModel<T>,
) -> Result<Vec<usize>> {
    check_target(items, target)?;
    let e = reference.embedding();
    let bound = reference.num_items();
    for &i in items {
        if i == 0 || i as usize > bound {
            return Err(SruError::Index { what: "item", index: i as usize, bound });
        }
    }
    let anchor = e.row(items[target] as usize);
    let mut cands: Vec<(f64, usize)> = (0..items.len())
        .filter(|&p| p != target)
        .map(|p| {
            let d2: f64 = e
                .row(items[p] as usize)
                .iter()
                .zip(anchor)
                .map(|(&a, &b)| (a.as_f64() - b.as_f64()).powi(2))
                .sum();
            (d2, p)
        })
        .collect();
    cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(with_target(cands.into_iter().take(n).map(|c| c.1).collect(), target))
}

/// Target plus the `n` positions immediately before it.
pub fn ned_select(items: &[ItemId], target: usize, n: usize) -> Result<Vec<usize>> {
    check_target(items, target)?;
    Ok((target.saturating_sub(n)..=target).collect())
}

/// Target plus `n` other positions drawn uniformly without replacement.
pub fn red_select(items: &[ItemId], target: usize, n: usize, rng: &mut RngStream) -> Result<Vec<usize>> {
    check_target(items, target)?;
    let others: Vec<usize> = (0..items.len()).filter(|&p| p != target).collect();
    let picked = rng
        .sample_distinct(others.len(), n.min(others.len()))
        .into_iter()
        .map(|j| others[j])
        .collect();
    Ok(with_target(picked, target))
}

/// Dispatches to the request's selector. RED draws from the
/// `(seed, "unlearn/red/{session}/{position}")` stream.
pub fn select_positions<T: Real>(
    items: &[ItemId],
    request: &UnlearnRequest,
    reference: &GruModel<T>,
    seed: u64,
) -> Result<Vec<usize>> {
    let (t, n) = (request.target_position, request.n_extra);
    match request.strategy {
        Strategy::Ced => ced_select(items, t, n, reference),
        Strategy::Ned => ned_select(items, t, n),
        Strategy::Red => {
            let name = format!("unlearn/red/{}/{}", request.session_id, t);
            red_select(items, t, n, &mut RngStream::new(seed, &name))
        }
    }
}

/// Removes `positions` from the request's session in `shard`. Sessions left
/// with fewer than two items are dropped.
pub fn apply_deletion(
    shard: &SessionDataset,
    request: &UnlearnRequest,
    positions: &[usize],
) -> Result<(SessionDataset, DeletionResult)> {
    let idx = shard
        .sessions
        .iter()
        .position(|s| s.id == request.session_id)
        .ok_or_else(|| SruError::Lookup {
            what: "session",
            key: request.session_id.clone(),
        })?;
    let original = &shard.sessions[idx];
    check_target(&original.items, request.target_position)?;
    if let Some(&p) = positions.iter().find(|&&p| p >= original.len()) {
        return Err(SruError::Index { what: "deleted position", index: p, bound: original.len() });
    }
    let deleted: BTreeSet<usize> = positions.iter().copied().collect();
    let keep = |p: &usize| !deleted.contains(p);
    let survivors: Vec<usize> = (0..original.len()).filter(keep).collect();
    let modified = Session {
        id: original.id.clone(),
        items: survivors.iter().map(|&p| original.items[p]).collect(),
        timestamps: survivors.iter().map(|&p| original.timestamps[p]).collect(),
        label: original.label,
    };
    let surviving_prefix = (0..request.target_position)
        .filter(keep)
        .map(|p| original.items[p])
        .collect();
    let dropped = modified.len() < 2;
    let mut sessions = shard.sessions.clone();
    if dropped {
        sessions.remove(idx);
    } else {
        sessions[idx] = modified.clone();
    }
    let result = DeletionResult {
        session_id: original.id.clone(),
        target_position: request.target_position,
        target_item: original.items[request.target_position],
        deleted_positions: deleted.into_iter().collect(),
        modified_session: modified,
        dropped,
        surviving_prefix,
    };
    Ok((shard.derive(sessions, shard.split), result))
}

/// Result of one [`execute_unlearn`] call.
#[derive(Clone, Debug, Default)]
pub struct UnlearnOutcome {
    /// One entry per executed request, in request order.
    pub results: Vec<DeletionResult>,
    /// Requests whose target had already been selected by an earlier
    /// request of the same call.
    pub skipped: Vec<UnlearnRequest>,
    pub timing: TimingReport,
}

/// Applies all requests, then retrains each affected sub-model from
/// scratch with its original seed, refreshes centroids, and retrains the
/// aggregation layer once.
///
/// Positions of every request refer to the sessions as stored before the
/// call; requests on the same session are merged.
pub fn execute_unlearn<T: Real>(state: &mut SruState<T>, requests: &[UnlearnRequest]) -> Result<UnlearnOutcome> {
    if requests.is_empty() {
        return Ok(UnlearnOutcome::default());
    }
    let start = Instant::now();

    // group by session, keeping first-appearance order
    let mut by_session: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    let mut located: BTreeMap<&str, usize> = BTreeMap::new();
    for (r, req) in requests.iter().enumerate() {
        if !located.contains_key(req.session_id.as_str()) {
            let (k, _) = state.locate(&req.session_id).ok_or_else(|| SruError::Lookup {
                what: "session",
                key: req.session_id.clone(),
            })?;
            located.insert(&req.session_id, k);
        }
        by_session.entry(&req.session_id).or_default().push(r);
    }

    let seed = state.config.partition.seed;
    let mut shards = state.shards.clone();
    let mut results: Vec<(usize, DeletionResult)> = Vec::new();
    let mut skipped = Vec::new();
    let mut affected = BTreeSet::new();
    for (&sid, reqs) in &by_session {
        let k = located[sid];
        let before = shards[k]
            .sessions
            .iter()
            .find(|s| s.id == sid)
            .expect("located session")
            .clone();
        let mut union = BTreeSet::new();
        let mut executed = Vec::new();
        for &r in reqs {
            let req = &requests[r];
            check_target(&before.items, req.target_position)?;
            if union.contains(&req.target_position) {
                log::warn!(
                    "session {sid}: position {} already deleted in this batch, skipping",
                    req.target_position
                );
                skipped.push(req.clone());
                continue;
            }
            let own = select_positions(&before.items, req, &state.reference, seed)?;
            union.extend(own.iter().copied());
            executed.push((r, own));
        }
        let positions: Vec<usize> = union.into_iter().collect();
        let single = shards[k].derive(vec![before.clone()], shards[k].split);
        for (r, own) in executed {
            let (_, mut res) = apply_deletion(&single, &requests[r], &positions)?;
            res.deleted_positions = own;
            results.push((r, res));
        }
        let first = &requests[reqs[0]];
        let (updated, _) = apply_deletion(&shards[k], first, &positions)?;
        shards[k] = updated;
        affected.insert(k);
    }
    results.sort_by_key(|(r, _)| *r);
    let deletion = start.elapsed();

    let t = Instant::now();
    let which: Vec<usize> = affected.into_iter().collect();
    let retrained = train_sub_models::<T>(&shards, &which, &state.config, false)?;
    let sub_model_retrain = t.elapsed();

    let mut sub_models = state.model.sub_models.clone();
    for (&k, m) in which.iter().zip(retrained) {
        sub_models[k] = m;
    }
    let t = Instant::now();
    let mut centroids = state.model.centroids.clone();
    if state.config.aggregation.centroid_source == CentroidSource::SubModel {
        for &k in &which {
            centroids.vectors[k] = compute_centroid(&sub_models[k], &shards[k])?;
        }
    }
    let centroid_refresh = t.elapsed();

    let t = Instant::now();
    let train = concat_shards(&shards);
    let states = match &state.prefix_states {
        Some(cache) => cache.refresh(&sub_models, &which, &train)?,
        None => PrefixStates::compute(&sub_models, &train)?,
    };
    let aggregation =
        train_aggregation_on(&states, &sub_models, &centroids, &train, &state.config.aggregation)?.model;
    let aggregation_retrain = t.elapsed();

    state.shards = shards;
    state.model.sub_models = sub_models;
    state.model.centroids = centroids;
    state.model.aggregation = aggregation;
    state.prefix_states = Some(states);
    Ok(UnlearnOutcome {
        results: results.into_iter().map(|(_, r)| r).collect(),
        skipped,
        timing: TimingReport {
            deletion,
            sub_model_retrain,
            centroid_refresh,
            aggregation_retrain,
            total: start.elapsed(),
            full_retrain_reference: None,
            retrained_shards: which,
        },
    })
}

/// Draws `count` requests from distinct sessions of the listed shards with
/// targets at positions `>= min_position`.
pub fn sample_requests<T: Real>(
    state: &SruState<T>,
    shards: &[usize],
    count: usize,
    min_position: usize,
    strategy: Strategy,
    n_extra: usize,
    rng: &mut RngStream,
) -> Vec<UnlearnRequest> {
    let mut pool: Vec<&Session> = shards
        .iter()
        .filter_map(|&k| state.shards.get(k))
        .flat_map(|s| s.sessions.iter())
        .filter(|s| s.len() > min_position)
        .collect();
    rng.shuffle(&mut pool);
    pool.into_iter()
        .take(count)
        .map(|s| UnlearnRequest {
            session_id: s.id.clone(),
            target_position: min_position + rng.below(s.len() - min_position),
            strategy,
            n_extra,
        })
        .collect()
}

/// Reads `session_id,target_position,strategy,N` rows; a header row is
/// accepted.
pub fn parse_requests<R: BufRead>(reader: R) -> Result<Vec<UnlearnRequest>> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || (n == 0 && line.starts_with("session_id")) {
            continue;
        }
        let err = |message: String| SruError::Parse { line: n + 1, message };
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 4 {
            return Err(err(format!("expected 4 fields, found {}", f.len())));
        }
        out.push(UnlearnRequest {
            session_id: f[0].to_string(),
            target_position: f[1].parse().map_err(|e| err(format!("target_position: {e}")))?,
            strategy: Strategy::parse(f[2]).ok_or_else(|| err(format!("unknown strategy {:?}", f[2])))?,
            n_extra: f[3].parse().map_err(|e| err(format!("N: {e}")))?,
        });
    }
    Ok(out)
}

pub fn format_requests(requests: &[UnlearnRequest]) -> String {
    let mut s = String::from("session_id,target_position,strategy,N\n");
    for r in requests {
        s.push_str(&format!("{},{},{},{}\n", r.session_id, r.target_position, r.strategy.as_str(), r.n_extra));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregation::AggregationConfig;
    use crate::backbone::{train_backbone, BackboneConfig};
    use crate::corpus::{generate_synthetic, Split, SyntheticConfig};
    use crate::framework::{build_sru, SruConfig};
    use crate::numerics::Tensor;
    use crate::partition::PartitionConfig;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};

    fn ned(items: usize, t: usize, n: usize) -> Vec<usize> {
        ned_select(&vec![1; items], t, n).unwrap()
    }

    #[test]
    fn ned_examples() {
        assert_eq!(ned(5, 3, 2), vec![1, 2, 3]);
        assert_eq!(ned(5, 0, 4), vec![0]);
        assert_eq!(ned(5, 3, 5), vec![0, 1, 2, 3]);
        assert!(ned_select(&[1, 2], 2, 0).is_err());
    }

    /// Items 1..=4 embedded on a line at 0, 3, 10, 1 (one dimension).
    fn line_model() -> GruModel<f64> {
        let mut m = GruModel::<f64>::zeroed(4, 1, 10);
        let id = m.params().id("embedding").unwrap();
        let e = Tensor::matrix(5, 1, vec![0.0, 0.0, 3.0, 10.0, 1.0]).unwrap();
        m.params_mut().set_value(id, e).unwrap();
        m
    }

    #[test]
    fn ced_picks_nearest_by_hand_distance() {
        // session [a, b, c, x] = items [2, 4, 3, 1]; |b-x| = 1 < |a-x| = 3 < |c-x| = 10
        let m = line_model();
        let items = [2, 4, 3, 1];
        assert_eq!(ced_select(&items, 3, 0, &m).unwrap(), vec![3]);
        assert_eq!(ced_select(&items, 3, 1, &m).unwrap(), vec![1, 3]);
        assert_eq!(ced_select(&items, 3, 2, &m).unwrap(), vec![0, 1, 3]);
        assert_eq!(ced_select(&items, 3, 9, &m).unwrap(), vec![0, 1, 2, 3]);
        // tie between the two copies of item 2 goes to the earlier one
        assert_eq!(ced_select(&[2, 1, 2], 1, 1, &m).unwrap(), vec![0, 1]);
        assert!(ced_select(&items, 4, 1, &m).is_err());
    }

    #[test]
    fn red_is_seeded_and_saturates() {
        let items = [1, 2, 3, 4, 5, 6];
        let a = red_select(&items, 2, 2, &mut RngStream::new(1, "r")).unwrap();
        let b = red_select(&items, 2, 2, &mut RngStream::new(1, "r")).unwrap();
        assert_eq!(a, b);
        assert_eq!(red_select(&items, 2, 0, &mut RngStream::new(1, "r")).unwrap(), vec![2]);
        assert_eq!(red_select(&items[..4], 1, 3, &mut RngStream::new(1, "r")).unwrap(), vec![0, 1, 2, 3]);
    }

    fn toy_shard() -> SessionDataset {
        let vocab = std::sync::Arc::new(
            crate::corpus::ItemVocab::from_tokens((0..6).map(|i| format!("t{i}")).collect()).unwrap(),
        );
        let sessions = vec![
            Session::new("s0", vec![1, 2, 3, 4, 5]),
            Session::new("s1", vec![2, 3, 4]),
            Session::new("s2", vec![6, 5, 4]),
        ];
        SessionDataset::new(sessions, vocab, Split::Train, 10).unwrap()
    }

    fn req(id: &str, t: usize, strategy: Strategy, n: usize) -> UnlearnRequest {
        UnlearnRequest { session_id: id.into(), target_position: t, strategy, n_extra: n }
    }

    #[test]
    fn apply_deletion_rewrites_or_drops() {
        let shard = toy_shard();
        let r = req("s0", 3, Strategy::Ned, 2);
        let (updated, res) = apply_deletion(&shard, &r, &[1, 2, 3]).unwrap();
        assert_eq!(updated.sessions[0].items, vec![1, 5]);
        assert_eq!(res.target_item, 4);
        assert_eq!(res.surviving_prefix, vec![1]);
        assert!(!res.dropped);
        assert_eq!(updated.sessions[1..], shard.sessions[1..]);

        let (updated, res) = apply_deletion(&shard, &req("s1", 0, Strategy::Ced, 1), &[0, 1]).unwrap();
        assert!(res.dropped);
        assert_eq!(updated.len(), 2);
        assert!(updated.sessions.iter().all(|s| s.id != "s1"));

        assert!(matches!(
            apply_deletion(&shard, &req("zz", 0, Strategy::Ced, 0), &[0]),
            Err(SruError::Lookup { .. })
        ));
    }

    #[test]
    fn request_csv_round_trip() {
        let reqs = vec![req("a", 3, Strategy::Ced, 2), req("b", 0, Strategy::Red, 0)];
        let text = format_requests(&reqs);
        assert_eq!(parse_requests(text.as_bytes()).unwrap(), reqs);
        assert!(matches!(
            parse_requests("x,1,ZED,0\n".as_bytes()),
            Err(SruError::Parse { line: 1, .. })
        ));
    }

    fn small_state() -> SruState<f32> {
        let ds = generate_synthetic(&SyntheticConfig {
            num_sessions: 120,
            vocab_size: 30,
            num_clusters: 3,
            seed: 4,
            ..Default::default()
        })
        .unwrap();
        let train = ds.derive(ds.sessions.clone(), Split::Train);
        let cfg = SruConfig {
            backbone: BackboneConfig { dim: 8, epochs: 2, batch_size: 16, lr: 1e-2, ..Default::default() },
            partition: PartitionConfig { k: 3, ..Default::default() },
            aggregation: AggregationConfig { attention_dim: 4, epochs: 1, batch_size: 64, ..Default::default() },
            ..Default::default()
        }
        .with_seed(8);
        build_sru(&train, &cfg, false).unwrap()
    }

    #[test]
    fn zero_requests_change_nothing() {
        let mut state = small_state();
        let before = state.model.clone();
        let out = execute_unlearn(&mut state, &[]).unwrap();
        assert_eq!(state.model, before);
        assert_eq!(out.timing, TimingReport::default());
    }

    #[test]
    fn one_shard_requests_retrain_exactly_that_shard() {
        let mut state = small_state();
        let before = state.clone();
        let mut rng = RngStream::new(0, "test");
        let reqs = sample_requests(&state, &[1], 4, 2, Strategy::Ned, 1, &mut rng);
        assert_eq!(reqs.len(), 4);
        let out = execute_unlearn(&mut state, &reqs).unwrap();
        assert_eq!(out.timing.retrained_shards, vec![1]);
        assert_eq!(out.results.len(), 4);
        assert!(out.timing.total >= out.timing.phase_sum());
        for k in [0, 2] {
            assert!(state.model.sub_models[k].params().bitwise_eq(before.model.sub_models[k].params()));
            assert_eq!(state.shards[k], before.shards[k]);
        }
        let fresh: GruModel<f32> = train_backbone(&state.shards[1], &state.config.shard_config(1)).unwrap();
        assert!(state.model.sub_models[1].params().bitwise_eq(fresh.params()));
        for res in &out.results {
            let deleted: Vec<_> = state.shards[1]
                .sessions
                .iter()
                .filter(|s| s.id == res.session_id)
                .collect();
            assert!(res.dropped || deleted[0].items == res.modified_session.items);
        }
    }

    #[test]
    fn overlapping_requests_merge_and_skip() {
        let mut state = small_state();
        let s = state.shards[0].sessions.iter().find(|s| s.len() >= 6).unwrap().clone();
        let reqs = vec![
            req(&s.id, 4, Strategy::Ned, 2),
            req(&s.id, 3, Strategy::Ned, 0),
            req(&s.id, 5, Strategy::Ned, 0),
        ];
        let out = execute_unlearn(&mut state, &reqs).unwrap();
        assert_eq!(out.skipped, vec![reqs[1].clone()]);
        assert_eq!(out.results.len(), 2);
        let merged: Vec<ItemId> = s
            .items
            .iter()
            .enumerate()
            .filter(|(p, _)| !(2..=5).contains(p))
            .map(|(_, &i)| i)
            .collect();
        assert_eq!(out.results[0].modified_session.items, merged);
        assert_eq!(out.results[1].surviving_prefix, vec![s.items[0], s.items[1]]);
        assert!(execute_unlearn(&mut state, &[req("missing", 0, Strategy::Ced, 0)]).is_err());
    }

    proptest! {
        #[test]
        fn selectors_saturate_and_keep_target(len in 1usize..12, t_frac in 0.0f64..1.0, n in 0usize..15, seed: u64) {
            let m = line_model();
            let t = ((len as f64) * t_frac) as usize;
            let items: Vec<ItemId> = (0..len).map(|p| (p % 4) as ItemId + 1).collect();
            let picks = [
                (ced_select(&items, t, n, &m).unwrap(), len - 1),
                (ned_select(&items, t, n).unwrap(), t),
                (red_select(&items, t, n, &mut RngStream::new(seed, "p")).unwrap(), len - 1),
            ];
            for (sel, candidates) in picks {
                prop_assert_eq!(sel.len(), 1 + n.min(candidates));
                prop_assert!(sel.contains(&t));
                prop_assert!(sel.windows(2).all(|w| w[0] < w[1]));
            }
        }
    }
}
