use std::collections::HashMap;

use rayon::prelude::*;

use crate::aggregation::model::{AggregationModel, AggregationShape, ShardCentroids};
use crate::backbone::GruModel;
use crate::corpus::{ItemId, SessionDataset};
use crate::error::{Result, SruError};
use crate::numerics::{adam_step, cross_entropy_with_grad, AdamConfig, AdamState, Real, RngStream};
use crate::partition::ShardAssignment;

/// Which space the shard centroids live in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum CentroidSource {
    /// Mean hidden state of the shard under its own sub-model.
    #[default]
    SubModel,
    /// The partition centroid in the reference model's space.
    Partition,
}

impl CentroidSource {
    pub fn as_str(self) -> &'static str {
        match self {
            CentroidSource::SubModel => "submodel",
            CentroidSource::Partition => "partition",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "submodel" => Some(CentroidSource::SubModel),
            "partition" => Some(CentroidSource::Partition),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AggregationConfig {
    /// Attention width `f`.
    pub attention_dim: usize,
    /// Output network hidden width; `None` uses the sub-model dimension.
    pub hidden_dim: Option<usize>,
    pub lr: f64,
    pub epochs: usize,
    /// (prefix, target) pairs per optimizer step.
    pub batch_size: usize,
    pub seed: u64,
    pub centroid_source: CentroidSource,
    /// Amplitude of the uniform noise added to the identity projections.
    pub init_noise: f64,
}

impl Default for AggregationConfig {
    fn default() -> Self {
        AggregationConfig {
            attention_dim: 64,
            hidden_dim: None,
            lr: 5e-3,
            epochs: 5,
            batch_size: 256,
            seed: 0,
            centroid_source: CentroidSource::SubModel,
            init_noise: 0.01,
        }
    }
}

impl AggregationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.attention_dim == 0 || self.batch_size == 0 || self.hidden_dim == Some(0) {
            return Err(SruError::contract(
                "aggregation needs attention_dim, hidden_dim and batch_size >= 1",
            ));
        }
        if !(self.lr > 0.0) || !(self.init_noise >= 0.0) {
            return Err(SruError::contract("aggregation lr must be positive and init_noise non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct AggregationFit<T> {
    pub model: AggregationModel<T>,
    /// Mean training cross-entropy per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Mean hidden state of the shard's full sessions under `sub_model`.
pub fn compute_centroid<T: Real>(sub_model: &GruModel<T>, shard: &SessionDataset) -> Result<Vec<T>> {
    if shard.is_empty() {
        return Err(SruError::contract("centroid of an empty shard"));
    }
    let states = shard
        .sessions
        .par_iter()
        .map(|s| sub_model.encode(&s.items))
        .collect::<Result<Vec<_>>>()?;
    let mut c = vec![T::zero(); sub_model.dim()];
    for h in &states {
        for (ci, &hi) in c.iter_mut().zip(h) {
            *ci += hi;
        }
    }
    let n = T::of(shard.len() as f64);
    c.iter_mut().for_each(|x| *x = *x / n);
    Ok(c)
}

/// Centroids for every shard from the configured source.
pub fn shard_centroids<T: Real>(
    source: CentroidSource,
    sub_models: &[GruModel<T>],
    shards: &[SessionDataset],
    assignment: &ShardAssignment,
) -> Result<ShardCentroids<T>> {
    if sub_models.len() != shards.len() {
        return Err(SruError::dim("centroids", &[shards.len()], &[sub_models.len()]));
    }
    let vectors = match source {
        CentroidSource::SubModel => sub_models
            .iter()
            .zip(shards)
            .map(|(m, s)| compute_centroid(m, s))
            .collect::<Result<Vec<_>>>()?,
        CentroidSource::Partition => {
            if assignment.centroids.len() != shards.len() {
                return Err(SruError::contract(
                    "partition centroids unavailable or inconsistent with shards",
                ));
            }
            let d = sub_models.first().map_or(0, |m| m.dim());
            if let Some(c) = assignment.centroids.iter().find(|c| c.len() != d) {
                return Err(SruError::dim("partition centroid", &[d], &[c.len()]));
            }
            assignment
                .centroids
                .iter()
                .map(|c| c.iter().map(|&x| T::of(x)).collect())
                .collect()
        }
    };
    Ok(ShardCentroids { vectors })
}

/// Hidden state of every sub-model after each input position of every
/// training session, computed once per aggregation fit.
#[derive(Clone, Debug, PartialEq)]
pub struct PrefixStates<T> {
    ids: Vec<String>,
    items: Vec<Vec<ItemId>>,
    /// `per_model[k][s][t]`: sub-model `k`'s state after input `t` of session `s`.
    per_model: Vec<Vec<Vec<Vec<T>>>>,
}

fn window(items: &[ItemId], max_len: usize) -> &[ItemId] {
    &items[items.len().saturating_sub(max_len)..]
}

fn session_states<T: Real>(model: &GruModel<T>, items: &[ItemId]) -> Result<Vec<Vec<T>>> {
    let items = window(items, model.max_len());
    model.encode_steps(&items[..items.len().saturating_sub(1)])
}

impl<T: Real> PrefixStates<T> {
    pub fn compute(sub_models: &[GruModel<T>], train: &SessionDataset) -> Result<Self> {
        let per_model = sub_models
            .iter()
            .map(|m| {
                train
                    .sessions
                    .par_iter()
                    .map(|s| session_states(m, &s.items))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PrefixStates {
            ids: train.sessions.iter().map(|s| s.id.clone()).collect(),
            items: train.sessions.iter().map(|s| s.items.clone()).collect(),
            per_model,
        })
    }

    /// States for `train` under `sub_models`, reusing cached rows for
    /// sub-models not listed in `changed` on sessions whose items are
    /// unchanged. Equal to [`PrefixStates::compute`] bit for bit.
    pub fn refresh(&self, sub_models: &[GruModel<T>], changed: &[usize], train: &SessionDataset) -> Result<Self> {
        if sub_models.len() != self.per_model.len() {
            return Err(SruError::dim("prefix state cache", &[self.per_model.len()], &[sub_models.len()]));
        }
        let index: HashMap<&str, usize> = self.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
        let per_model = sub_models
            .iter()
            .enumerate()
            .map(|(k, m)| {
                let stale = changed.contains(&k);
                train
                    .sessions
                    .par_iter()
                    .map(|s| match index.get(s.id.as_str()) {
                        Some(&i) if !stale && self.items[i] == s.items => Ok(self.per_model[k][i].clone()),
                        _ => session_states(m, &s.items),
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PrefixStates {
            ids: train.sessions.iter().map(|s| s.id.clone()).collect(),
            items: train.sessions.iter().map(|s| s.items.clone()).collect(),
            per_model,
        })
    }

    pub fn num_models(&self) -> usize {
        self.per_model.len()
    }
}

/// Trains a fresh aggregation model on every (prefix, target) pair of
/// `train`, with the sub-models frozen.
pub fn train_aggregation<T: Real>(
    sub_models: &[GruModel<T>],
    centroids: &ShardCentroids<T>,
    train: &SessionDataset,
    cfg: &AggregationConfig,
) -> Result<AggregationFit<T>> {
    check_sub_models(sub_models, centroids, train)?;
    let states = PrefixStates::compute(sub_models, train)?;
    train_aggregation_on(&states, sub_models, centroids, train, cfg)
}

fn check_sub_models<T: Real>(
    sub_models: &[GruModel<T>],
    centroids: &ShardCentroids<T>,
    train: &SessionDataset,
) -> Result<()> {
    let k = sub_models.len();
    if k == 0 {
        return Err(SruError::contract("aggregation needs at least one sub-model"));
    }
    if centroids.len() != k {
        return Err(SruError::dim("aggregation centroids", &[k], &[centroids.len()]));
    }
    let dim = sub_models[0].dim();
    let num_items = sub_models[0].num_items();
    let max_len = sub_models[0].max_len();
    if sub_models
        .iter()
        .any(|m| m.dim() != dim || m.num_items() != num_items || m.max_len() != max_len)
    {
        return Err(SruError::contract("sub-models disagree on shape or vocabulary"));
    }
    if train.num_items() != num_items {
        return Err(SruError::dim("aggregation vocabulary", &[num_items], &[train.num_items()]));
    }
    Ok(())
}

/// [`train_aggregation`] from precomputed prefix states of `sub_models` on
/// `train`. Pairs are reshuffled every epoch from the
/// `(seed, "aggregation/shuffle")` stream.
pub fn train_aggregation_on<T: Real>(
    states: &PrefixStates<T>,
    sub_models: &[GruModel<T>],
    centroids: &ShardCentroids<T>,
    train: &SessionDataset,
    cfg: &AggregationConfig,
) -> Result<AggregationFit<T>> {
    cfg.validate()?;
    check_sub_models(sub_models, centroids, train)?;
    let k = sub_models.len();
    if states.num_models() != k || states.ids.len() != train.len() {
        return Err(SruError::contract("prefix states do not match the training set"));
    }
    let dim = sub_models[0].dim();
    let max_len = sub_models[0].max_len();
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for (s, per_step) in states.per_model[0].iter().enumerate() {
        pairs.extend((0..per_step.len()).map(|t| (s, t)));
    }
    if pairs.is_empty() {
        return Err(SruError::contract("aggregation training set has no pairs"));
    }

    let shape = AggregationShape {
        shards: k,
        dim,
        attention_dim: cfg.attention_dim,
        hidden_dim: cfg.hidden_dim.unwrap_or(dim),
        num_items: sub_models[0].num_items(),
    };
    let mut init = RngStream::new(cfg.seed, "aggregation/init");
    let mut model = AggregationModel::<T>::new(shape, cfg.init_noise, &mut init);
    let mut adam = AdamState::new(model.params());
    let adam_cfg = AdamConfig::new(cfg.lr);
    let mut shuffle = RngStream::new(cfg.seed, "aggregation/shuffle");

    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut inputs = vec![Vec::new(); k];
    for _ in 0..cfg.epochs {
        shuffle.shuffle(&mut pairs);
        let mut total = 0.0f64;
        for batch in pairs.chunks(cfg.batch_size) {
            model.params_mut().zero_grads();
            let cp = model.project_centroids(centroids)?;
            let mut dcp = vec![vec![T::zero(); dim]; k];
            for &(s, t) in batch {
                for (slot, per_model) in inputs.iter_mut().zip(&states.per_model) {
                    slot.clone_from(&per_model[s][t]);
                }
                let target = window(&train.sessions[s].items, max_len)[t + 1];
                let fwd = model.forward(&inputs, &cp)?;
                let (loss, dl) = cross_entropy_with_grad(fwd.logits(), target as usize - 1)?;
                total += loss.as_f64();
                model.backward(&inputs, &cp, &fwd, &dl, &mut dcp);
            }
            model.apply_centroid_grads(centroids, &dcp);
            model.params_mut().scale_grads(T::one() / T::of(batch.len() as f64));
            adam_step(model.params_mut(), &mut adam, &adam_cfg)?;
        }
        epoch_losses.push(total / pairs.len() as f64);
    }
    Ok(AggregationFit { model, epoch_losses })
}
