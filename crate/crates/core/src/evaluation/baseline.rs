use rayon::prelude::*;

use crate::backbone::{fit_backbone, BackboneConfig, GruModel};
use crate::corpus::{ItemId, SessionDataset};
use crate::error::{Result, SruError};
use crate::evaluation::Recommender;
use crate::numerics::{Real, RngStream};
use crate::partition::{make_shards, random_partition};

/// Ranks items by training frequency, ignoring the prefix.
#[derive(Clone, Debug)]
pub struct Popularity {
    scores: Vec<f64>,
}

impl Popularity {
    pub fn fit(train: &SessionDataset) -> Self {
        let mut scores = vec![0.0; train.num_items()];
        for s in &train.sessions {
            for &i in &s.items {
                scores[i as usize - 1] += 1.0;
            }
        }
        Popularity { scores }
    }
}

impl Recommender for Popularity {
    fn num_items(&self) -> usize {
        self.scores.len()
    }

    fn logits(&self, _prefix: &[ItemId]) -> Result<Vec<f64>> {
        Ok(self.scores.clone())
    }
}

/// Random equal shards with one sub-model each; predictions are the
/// unweighted mean of sub-model logits.
#[derive(Clone, Debug)]
pub struct SisaModel<T = f32> {
    pub sub_models: Vec<GruModel<T>>,
    pub members: Vec<Vec<usize>>,
}

/// Trains the SISA baseline with `k` shards. Shard `i` trains with seed
/// derived from `(cfg.seed, "shard/i")`.
pub fn sisa_baseline<T: Real>(
    train: &SessionDataset,
    validation: Option<&SessionDataset>,
    k: usize,
    cfg: &BackboneConfig,
    partition_seed: u64,
) -> Result<SisaModel<T>> {
    if k == 0 {
        return Err(SruError::contract("SISA needs at least one shard"));
    }
    let assignment = random_partition(train.len(), k, partition_seed)?;
    let shards = make_shards(train, &assignment)?;
    let sub_models = shards
        .par_iter()
        .enumerate()
        .map(|(i, shard)| {
            let seed = RngStream::derive_seed(cfg.seed, &format!("shard/{i}"));
            fit_backbone(shard, validation, &cfg.with_seed(seed)).map(|f| f.model)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SisaModel {
        sub_models,
        members: assignment.members,
    })
}

impl<T: Real> SisaModel<T> {
    fn mean(&self, per_shard: Vec<Vec<f64>>) -> Vec<f64> {
        let k = per_shard.len() as f64;
        let mut out = vec![0.0; per_shard[0].len()];
        for logits in &per_shard {
            for (o, l) in out.iter_mut().zip(logits) {
                *o += l;
            }
        }
        out.iter_mut().for_each(|o| *o /= k);
        out
    }
}

impl<T: Real> Recommender for SisaModel<T> {
    fn num_items(&self) -> usize {
        self.sub_models[0].num_items()
    }

    fn logits(&self, prefix: &[ItemId]) -> Result<Vec<f64>> {
        let per_shard = self
            .sub_models
            .iter()
            .map(|m| m.logits(prefix))
            .collect::<Result<Vec<_>>>()?;
        Ok(self.mean(per_shard))
    }

    fn prefix_logits(&self, items: &[ItemId]) -> Result<Vec<Vec<f64>>> {
        let per_shard = self
            .sub_models
            .iter()
            .map(|m| m.prefix_logits(items))
            .collect::<Result<Vec<_>>>()?;
        let steps = items.len().saturating_sub(1);
        Ok((0..steps)
            .map(|t| self.mean(per_shard.iter().map(|p| p[t].clone()).collect()))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, split, SplitRatios, SyntheticConfig};

    fn data() -> SessionDataset {
        let full = generate_synthetic(&SyntheticConfig {
            num_sessions: 90,
            vocab_size: 40,
            num_clusters: 2,
            seed: 4,
            ..Default::default()
        })
        .unwrap();
        split(&full, SplitRatios::default(), 4).unwrap().0
    }

    fn cfg() -> BackboneConfig {
        BackboneConfig { dim: 8, epochs: 2, batch_size: 8, lr: 1e-2, seed: 5, ..Default::default() }
    }

    #[test]
    fn single_shard_equals_plain_backbone() {
        let train = data();
        let sisa = sisa_baseline::<f32>(&train, None, 1, &cfg(), 0).unwrap();
        let seed = RngStream::derive_seed(cfg().seed, "shard/0");
        let plain = crate::backbone::train_backbone::<f32>(&train, &cfg().with_seed(seed)).unwrap();
        let prefix = &train.sessions[0].items[..3];
        assert_eq!(sisa.logits(prefix).unwrap(), plain.logits(prefix).unwrap());
    }

    #[test]
    fn shards_are_balanced_and_mean_is_exact() {
        let train = data();
        let sisa = sisa_baseline::<f32>(&train, None, 3, &cfg(), 7).unwrap();
        let sizes: Vec<usize> = sisa.members.iter().map(Vec::len).collect();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        let prefix = &train.sessions[1].items[..2];
        let got = sisa.logits(prefix).unwrap();
        for v in 0..got.len() {
            let brute: f64 = sisa
                .sub_models
                .iter()
                .map(|m| m.logits(prefix).unwrap()[v])
                .sum::<f64>()
                / 3.0;
            assert!((got[v] - brute).abs() < 1e-6);
        }
        let items = &train.sessions[2].items;
        let all = sisa.prefix_logits(items).unwrap();
        assert_eq!(all[0], sisa.logits(&items[..1]).unwrap());
    }
}
