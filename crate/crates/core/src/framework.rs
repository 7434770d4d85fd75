//! End-to-end assembly of the sharded recommender: reference model,
//! partition, per-shard sub-models and the aggregation layer.

use rayon::prelude::*;

use crate::aggregation::{
    shard_centroids, train_aggregation_on, AggregationConfig, AggregationModel, PrefixStates,
    ShardCentroids,
};
use crate::backbone::{train_backbone, BackboneConfig, GruModel};
use crate::corpus::{ItemId, SessionDataset, Split};
use crate::error::{Result, SruError};
use crate::evaluation::Recommender;
use crate::numerics::{Real, RngStream};
use crate::partition::{
    balanced_kmeans, embed_all, make_shards, random_partition, PartitionConfig, ShardAssignment,
};

/// How training sessions are dealt into shards.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PartitionMethod {
    /// Balanced k-means over reference-model hidden states.
    #[default]
    Similarity,
    /// Seeded shuffle into equal shards.
    Random,
}

impl PartitionMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            PartitionMethod::Similarity => "similarity",
            PartitionMethod::Random => "random",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "similarity" => Some(PartitionMethod::Similarity),
            "random" => Some(PartitionMethod::Random),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SruConfig {
    /// Shared by the reference model and every sub-model; each derives its
    /// own seed from `backbone.seed`.
    pub backbone: BackboneConfig,
    pub partition: PartitionConfig,
    pub method: PartitionMethod,
    pub aggregation: AggregationConfig,
}

impl SruConfig {
    /// Derives every component seed from one global seed.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut cfg = self.clone();
        cfg.backbone.seed = RngStream::derive_seed(seed, "backbone");
        cfg.partition.seed = RngStream::derive_seed(seed, "partition");
        cfg.aggregation.seed = RngStream::derive_seed(seed, "aggregation");
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.aggregation.validate()?;
        if self.partition.k == 0 {
            return Err(SruError::contract("partition needs at least one shard"));
        }
        Ok(())
    }

    pub fn reference_config(&self) -> BackboneConfig {
        self.backbone
            .with_seed(RngStream::derive_seed(self.backbone.seed, "reference"))
    }

    /// Config of shard `i`'s sub-model; unchanged across unlearning so
    /// retraining reproduces fresh training exactly.
    pub fn shard_config(&self, i: usize) -> BackboneConfig {
        self.backbone
            .with_seed(RngStream::derive_seed(self.backbone.seed, &format!("shard/{i}")))
    }
}

/// Sub-models, their centroids and the trained aggregation layer.
#[derive(Clone, Debug, PartialEq)]
pub struct SruModel<T = f32> {
    pub sub_models: Vec<GruModel<T>>,
    pub centroids: ShardCentroids<T>,
    pub aggregation: AggregationModel<T>,
}

impl<T: Real> SruModel<T> {
    fn aggregate(&self, states: &[Vec<T>], projected: &[Vec<T>]) -> Result<Vec<f64>> {
        let fwd = self.aggregation.forward(states, projected)?;
        Ok(fwd.logits().iter().map(|x| x.as_f64()).collect())
    }
}

impl<T: Real> Recommender for SruModel<T> {
    fn num_items(&self) -> usize {
        self.aggregation.shape().num_items
    }

    fn logits(&self, prefix: &[ItemId]) -> Result<Vec<f64>> {
        let states = self
            .sub_models
            .iter()
            .map(|m| m.encode(prefix))
            .collect::<Result<Vec<_>>>()?;
        let projected = self.aggregation.project_centroids(&self.centroids)?;
        self.aggregate(&states, &projected)
    }

    fn prefix_logits(&self, items: &[ItemId]) -> Result<Vec<Vec<f64>>> {
        if items.len() < 2 {
            return Ok(Vec::new());
        }
        let inputs = &items[..items.len() - 1];
        if self.sub_models.iter().any(|m| inputs.len() > m.max_len()) {
            return (1..items.len()).map(|t| self.logits(&items[..t])).collect();
        }
        let steps = self
            .sub_models
            .iter()
            .map(|m| m.encode_steps(inputs))
            .collect::<Result<Vec<_>>>()?;
        let projected = self.aggregation.project_centroids(&self.centroids)?;
        (0..inputs.len())
            .map(|t| {
                let states: Vec<Vec<T>> = steps.iter().map(|s| s[t].clone()).collect();
                self.aggregate(&states, &projected)
            })
            .collect()
    }
}

/// Everything needed to serve predictions and answer unlearning requests.
#[derive(Clone, Debug)]
pub struct SruState<T = f32> {
    pub config: SruConfig,
    /// Pretrained reference model; used for partitioning and CED distances
    /// and never retrained.
    pub reference: GruModel<T>,
    /// Partition of the original training sessions.
    pub assignment: ShardAssignment,
    /// Current shard contents, after any deletions.
    pub shards: Vec<SessionDataset>,
    pub model: SruModel<T>,
    /// Sub-model prefix states on the current training set, reused when
    /// the aggregation layer is retrained. Rebuilt on demand when absent.
    pub prefix_states: Option<PrefixStates<T>>,
}

impl<T: Real> SruState<T> {
    /// Union of the current shards in shard order; the aggregation layer's
    /// training set.
    pub fn train_set(&self) -> SessionDataset {
        concat_shards(&self.shards)
    }

    /// Shard and in-shard index of every session id.
    pub fn locate(&self, session_id: &str) -> Option<(usize, usize)> {
        self.shards.iter().enumerate().find_map(|(k, s)| {
            s.sessions
                .iter()
                .position(|x| x.id == session_id)
                .map(|i| (k, i))
        })
    }
}

pub fn concat_shards(shards: &[SessionDataset]) -> SessionDataset {
    let sessions = shards.iter().flat_map(|s| s.sessions.iter().cloned()).collect();
    shards[0].derive(sessions, Split::Train)
}

pub fn pretrain_reference<T: Real>(train: &SessionDataset, cfg: &SruConfig) -> Result<GruModel<T>> {
    train_backbone(train, &cfg.reference_config())
}

pub fn partition_sessions<T: Real>(
    reference: &GruModel<T>,
    train: &SessionDataset,
    cfg: &SruConfig,
) -> Result<ShardAssignment> {
    match cfg.method {
        PartitionMethod::Similarity => balanced_kmeans(&embed_all(reference, train)?, &cfg.partition),
        PartitionMethod::Random => random_partition(train.len(), cfg.partition.k, cfg.partition.seed),
    }
}

/// Trains the sub-models of the listed shards from scratch, in parallel
/// when `parallel` is set. Results do not depend on the degree of
/// parallelism.
pub fn train_sub_models<T: Real>(
    shards: &[SessionDataset],
    which: &[usize],
    cfg: &SruConfig,
    parallel: bool,
) -> Result<Vec<GruModel<T>>> {
    let train_one = |&i: &usize| -> Result<GruModel<T>> {
        let shard = shards.get(i).ok_or(SruError::Index {
            what: "shard",
            index: i,
            bound: shards.len(),
        })?;
        if shard.num_pairs() == 0 {
            return Err(SruError::contract(format!(
                "shard {i} has no training pairs left"
            )));
        }
        log::debug!("training sub-model {i} on {} sessions", shard.len());
        train_backbone(shard, &cfg.shard_config(i))
    };
    if parallel {
        which.par_iter().map(train_one).collect()
    } else {
        which.iter().map(train_one).collect()
    }
}

/// A trained aggregation layer with the centroids and prefix states it
/// was fitted on.
#[derive(Clone, Debug)]
pub struct AggregationStage<T> {
    pub centroids: ShardCentroids<T>,
    pub model: AggregationModel<T>,
    pub prefix_states: PrefixStates<T>,
}

/// Centroids plus a freshly trained aggregation layer over all shards.
pub fn fit_aggregation<T: Real>(
    sub_models: &[GruModel<T>],
    shards: &[SessionDataset],
    assignment: &ShardAssignment,
    cfg: &AggregationConfig,
) -> Result<AggregationStage<T>> {
    let centroids = shard_centroids(cfg.centroid_source, sub_models, shards, assignment)?;
    let train = concat_shards(shards);
    let prefix_states = PrefixStates::compute(sub_models, &train)?;
    let model = train_aggregation_on(&prefix_states, sub_models, &centroids, &train, cfg)?.model;
    Ok(AggregationStage { centroids, model, prefix_states })
}

/// Runs every training stage on `train`.
pub fn build_sru<T: Real>(train: &SessionDataset, cfg: &SruConfig, parallel: bool) -> Result<SruState<T>> {
    cfg.validate()?;
    if train.split != Split::Train {
        return Err(SruError::contract("SRU must be built from a train split"));
    }
    let reference = pretrain_reference::<T>(train, cfg)?;
    let assignment = partition_sessions(&reference, train, cfg)?;
    let shards = make_shards(train, &assignment)?;
    let all: Vec<usize> = (0..shards.len()).collect();
    let sub_models = train_sub_models(&shards, &all, cfg, parallel)?;
    let agg = fit_aggregation(&sub_models, &shards, &assignment, &cfg.aggregation)?;
    Ok(SruState {
        config: cfg.clone(),
        reference,
        assignment,
        shards,
        model: SruModel {
            sub_models,
            centroids: agg.centroids,
            aggregation: agg.model,
        },
        prefix_states: Some(agg.prefix_states),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, SyntheticConfig};
    use crate::evaluation::evaluate;

    pub(crate) fn tiny_config() -> SruConfig {
        SruConfig {
            backbone: BackboneConfig { dim: 8, epochs: 2, batch_size: 16, lr: 1e-2, ..Default::default() },
            partition: PartitionConfig { k: 3, ..Default::default() },
            aggregation: AggregationConfig { attention_dim: 4, epochs: 1, batch_size: 32, ..Default::default() },
            ..Default::default()
        }
        .with_seed(5)
    }

    fn tiny_train() -> SessionDataset {
        let ds = generate_synthetic(&SyntheticConfig {
            num_sessions: 90,
            vocab_size: 30,
            num_clusters: 3,
            seed: 2,
            ..Default::default()
        })
        .unwrap();
        ds.derive(ds.sessions.clone(), Split::Train)
    }

    #[test]
    fn build_is_deterministic_and_prefix_logits_agree() {
        let train = tiny_train();
        let a = build_sru::<f32>(&train, &tiny_config(), false).unwrap();
        let b = build_sru::<f32>(&train, &tiny_config(), true).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.shards.iter().map(|s| s.len()).sum::<usize>(), train.len());

        let items = &train.sessions[0].items;
        let steps = a.model.prefix_logits(items).unwrap();
        for t in 1..items.len() {
            assert_eq!(steps[t - 1], a.model.logits(&items[..t]).unwrap());
        }
        let test = train.derive(train.sessions[..10].to_vec(), Split::Test);
        let report = evaluate(&a.model, &test, &[10, 20]).unwrap();
        assert!(report.recall_at(20).unwrap() >= report.recall_at(10).unwrap());
    }

    #[test]
    fn locate_finds_sessions() {
        let train = tiny_train();
        let state = build_sru::<f32>(&train, &tiny_config(), false).unwrap();
        let (k, i) = state.locate(&train.sessions[7].id).unwrap();
        assert_eq!(state.shards[k].sessions[i], train.sessions[7]);
        assert!(state.locate("nope").is_none());
    }
}
