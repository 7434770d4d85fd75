//! Conversions between pipeline objects and checkpoints.

use std::sync::Arc;

use crate::aggregation::{AggregationModel, ShardCentroids};
use crate::backbone::GruModel;
use crate::corpus::{ItemVocab, Session, SessionDataset, Split};
use crate::error::{Result, SruError};
use crate::harness::checkpoint::{Checkpoint, NamedTensor, TensorData};
use crate::numerics::{Real, Tensor};
use crate::partition::{Reseed, ShardAssignment};

fn check_kind(ck: &Checkpoint, kind: &str) -> Result<()> {
    let found = ck.meta("kind")?;
    if found != kind {
        return Err(SruError::contract(format!("checkpoint holds {found}, expected {kind}")));
    }
    Ok(())
}

fn parse_meta<N: std::str::FromStr>(ck: &Checkpoint, key: &str) -> Result<N> {
    ck.meta(key)?
        .parse()
        .map_err(|_| SruError::contract(format!("checkpoint metadata {key} is malformed")))
}

pub fn gru_checkpoint<T: Real>(model: &GruModel<T>) -> Checkpoint {
    let mut ck = Checkpoint::default();
    ck.set_meta("kind", "gru");
    ck.set_meta("max_len", model.max_len());
    ck.push_params("", model.params());
    ck
}

pub fn gru_from_checkpoint<T: Real>(ck: &Checkpoint) -> Result<GruModel<T>> {
    check_kind(ck, "gru")?;
    GruModel::from_params(ck.params("")?, parse_meta(ck, "max_len")?)
}

pub fn aggregation_checkpoint<T: Real>(model: &AggregationModel<T>, centroids: &ShardCentroids<T>) -> Result<Checkpoint> {
    let mut ck = Checkpoint::default();
    ck.set_meta("kind", "aggregation");
    ck.push_params("agg.", model.params());
    let d = model.shape().dim;
    let flat: Vec<T> = centroids.vectors.iter().flatten().copied().collect();
    ck.push(NamedTensor::real("centroids", &Tensor::matrix(centroids.len(), d, flat)?));
    Ok(ck)
}

pub fn aggregation_from_checkpoint<T: Real>(ck: &Checkpoint) -> Result<(AggregationModel<T>, ShardCentroids<T>)> {
    check_kind(ck, "aggregation")?;
    let model = AggregationModel::from_params(ck.params("agg.")?)?;
    let c = ck.tensor("centroids")?.to_real::<T>()?;
    if c.rows() != model.shape().shards || c.cols() != model.shape().dim {
        return Err(SruError::dim("stored centroids", &[model.shape().shards, model.shape().dim], c.shape()));
    }
    let vectors = (0..c.rows()).map(|k| c.row(k).to_vec()).collect();
    Ok((model, ShardCentroids { vectors }))
}

fn join_lines(what: &str, items: impl Iterator<Item = String>) -> Result<String> {
    let items: Vec<String> = items.collect();
    if items.iter().any(|s| s.contains('\n')) {
        return Err(SruError::contract(format!("{what} may not contain newlines")));
    }
    Ok(items.join("\n"))
}

fn split_lines(s: &str) -> Vec<String> {
    if s.is_empty() {
        Vec::new()
    } else {
        s.split('\n').map(str::to_string).collect()
    }
}

/// Stores named datasets sharing one vocabulary in one checkpoint.
pub fn datasets_checkpoint(sets: &[(&str, &SessionDataset)]) -> Result<Checkpoint> {
    let mut ck = Checkpoint::default();
    ck.set_meta("kind", "datasets");
    let vocab = sets.first().map(|s| s.1.vocab.clone()).ok_or_else(|| SruError::contract("no datasets to store"))?;
    if sets.iter().any(|(_, d)| !d.same_vocab(sets[0].1)) {
        return Err(SruError::contract("stored datasets must share a vocabulary"));
    }
    ck.set_meta("vocab", join_lines("item tokens", vocab.tokens().iter().cloned())?);
    ck.set_meta("names", join_lines("dataset names", sets.iter().map(|s| s.0.to_string()))?);
    for (name, ds) in sets {
        let p = |field: &str| format!("{name}.{field}");
        ck.set_meta(&p("split"), ds.split.as_str());
        ck.set_meta(&p("max_len"), ds.max_len);
        ck.set_meta(&p("ids"), join_lines("session ids", ds.sessions.iter().map(|s| s.id.clone()))?);
        let mut offsets = vec![0i64];
        let mut items = Vec::new();
        let mut times = Vec::new();
        for s in &ds.sessions {
            items.extend_from_slice(&s.items);
            times.extend_from_slice(&s.timestamps);
            offsets.push(items.len() as i64);
        }
        let labels: Vec<i64> = ds.sessions.iter().map(|s| s.label.map_or(-1, i64::from)).collect();
        let n = ds.len();
        ck.push(NamedTensor::new(p("offsets"), vec![n + 1], TensorData::I64(offsets))?);
        ck.push(NamedTensor::new(p("items"), vec![items.len()], TensorData::U32(items))?);
        ck.push(NamedTensor::new(p("timestamps"), vec![times.len()], TensorData::I64(times))?);
        ck.push(NamedTensor::new(p("labels"), vec![n], TensorData::I64(labels))?);
    }
    Ok(ck)
}

pub fn datasets_from_checkpoint(ck: &Checkpoint) -> Result<Vec<(String, SessionDataset)>> {
    check_kind(ck, "datasets")?;
    let vocab = Arc::new(ItemVocab::from_tokens(split_lines(ck.meta("vocab")?))?);
    let bad = |what: &str| SruError::contract(format!("stored dataset field {what} is inconsistent"));
    let mut out = Vec::new();
    for name in split_lines(ck.meta("names")?) {
        let p = |field: &str| format!("{name}.{field}");
        let split = Split::parse(ck.meta(&p("split"))?).ok_or_else(|| bad("split"))?;
        let max_len: usize = parse_meta(ck, &p("max_len"))?;
        let ids = split_lines(ck.meta(&p("ids"))?);
        let (TensorData::I64(offsets), TensorData::U32(items), TensorData::I64(times), TensorData::I64(labels)) = (
            &ck.tensor(&p("offsets"))?.data,
            &ck.tensor(&p("items"))?.data,
            &ck.tensor(&p("timestamps"))?.data,
            &ck.tensor(&p("labels"))?.data,
        ) else {
            return Err(bad("precision"));
        };
        if offsets.len() != ids.len() + 1 || labels.len() != ids.len() || times.len() != items.len() {
            return Err(bad("lengths"));
        }
        let mut sessions = Vec::with_capacity(ids.len());
        for (i, id) in ids.into_iter().enumerate() {
            let (a, b) = (offsets[i], offsets[i + 1]);
            if a < 0 || b < a || b as usize > items.len() {
                return Err(bad("offsets"));
            }
            let (a, b) = (a as usize, b as usize);
            sessions.push(Session {
                id,
                items: items[a..b].to_vec(),
                timestamps: times[a..b].to_vec(),
                label: u32::try_from(labels[i]).ok(),
            });
        }
        out.push((name, SessionDataset::new(sessions, Arc::clone(&vocab), split, max_len)?));
    }
    Ok(out)
}

pub fn assignment_checkpoint(a: &ShardAssignment) -> Result<Checkpoint> {
    let mut ck = Checkpoint::default();
    ck.set_meta("kind", "partition");
    ck.set_meta("k", a.num_shards());
    ck.set_meta("iterations", a.iterations_run);
    ck.set_meta("converged", a.converged);
    let reseeds: Vec<String> = a
        .reseeds
        .iter()
        .map(|r| format!("{}:{}:{}", r.iteration, r.shard, r.session))
        .collect();
    ck.set_meta("reseeds", reseeds.join(";"));
    let shard_of: Vec<u32> = a.shard_of.iter().map(|&s| s as u32).collect();
    ck.push(NamedTensor::new("shard_of", vec![shard_of.len()], TensorData::U32(shard_of))?);
    let d = a.centroids.first().map_or(0, Vec::len);
    let flat: Vec<f64> = a.centroids.iter().flatten().copied().collect();
    ck.push(NamedTensor::new("centroids", vec![a.centroids.len(), d], TensorData::F64(flat))?);
    Ok(ck)
}

pub fn assignment_from_checkpoint(ck: &Checkpoint) -> Result<ShardAssignment> {
    check_kind(ck, "partition")?;
    let k: usize = parse_meta(ck, "k")?;
    let TensorData::U32(shard_of) = &ck.tensor("shard_of")?.data else {
        return Err(SruError::contract("shard_of must be u32"));
    };
    let mut a = ShardAssignment::from_shard_ids(shard_of.iter().map(|&s| s as usize).collect(), k)?;
    let c = ck.tensor("centroids")?;
    let TensorData::F64(flat) = &c.data else {
        return Err(SruError::contract("partition centroids must be f64"));
    };
    let d = c.shape.get(1).copied().unwrap_or(0);
    a.centroids = if d == 0 { Vec::new() } else { flat.chunks(d).map(<[f64]>::to_vec).collect() };
    a.iterations_run = parse_meta(ck, "iterations")?;
    a.converged = parse_meta(ck, "converged")?;
    let reseeds = ck.meta("reseeds")?;
    if !reseeds.is_empty() {
        for r in reseeds.split(';') {
            let f: Vec<usize> = r
                .split(':')
                .map(|x| x.parse().map_err(|_| SruError::contract("malformed reseed record")))
                .collect::<Result<_>>()?;
            if f.len() != 3 {
                return Err(SruError::contract("malformed reseed record"));
            }
            a.reseeds.push(Reseed { iteration: f[0], shard: f[1], session: f[2] });
        }
    }
    Ok(a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregation::AggregationShape;
    use crate::corpus::{generate_synthetic, SyntheticConfig};
    use crate::numerics::RngStream;
    use crate::partition::random_partition;

    #[test]
    fn models_round_trip() {
        let mut rng = RngStream::new(1, "t");
        let gru = GruModel::<f32>::new(9, 4, 6, &mut rng);
        let back: GruModel<f32> = gru_from_checkpoint(&Checkpoint::from_bytes(&gru_checkpoint(&gru).to_bytes()).unwrap()).unwrap();
        assert!(back.params().bitwise_eq(gru.params()));
        assert_eq!(back.max_len(), 6);
        assert!(gru_from_checkpoint::<f64>(&gru_checkpoint(&gru)).is_err());

        let shape = AggregationShape { shards: 2, dim: 4, attention_dim: 3, hidden_dim: 5, num_items: 9 };
        let agg = AggregationModel::<f64>::new(shape, 0.1, &mut rng);
        let cents = ShardCentroids { vectors: vec![vec![0.5; 4], vec![-1.0; 4]] };
        let ck = aggregation_checkpoint(&agg, &cents).unwrap();
        let (m, c) = aggregation_from_checkpoint::<f64>(&Checkpoint::from_bytes(&ck.to_bytes()).unwrap()).unwrap();
        assert!(m.params().bitwise_eq(agg.params()));
        assert_eq!(c, cents);
    }

    #[test]
    fn datasets_and_partition_round_trip() {
        let ds = generate_synthetic(&SyntheticConfig { num_sessions: 30, vocab_size: 20, num_clusters: 2, seed: 3, ..Default::default() }).unwrap();
        let small = ds.derive(ds.sessions[..5].to_vec(), Split::Test);
        let ck = datasets_checkpoint(&[("full", &ds), ("test", &small)]).unwrap();
        let back = datasets_from_checkpoint(&Checkpoint::from_bytes(&ck.to_bytes()).unwrap()).unwrap();
        assert_eq!(back[0], ("full".to_string(), ds.clone()));
        assert_eq!(back[1].1, small);
        assert!(Arc::ptr_eq(&back[0].1.vocab, &back[1].1.vocab));

        let mut a = random_partition(30, 3, 1).unwrap();
        a.centroids = vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]];
        a.reseeds = vec![Reseed { iteration: 1, shard: 2, session: 7 }];
        let back = assignment_from_checkpoint(&Checkpoint::from_bytes(&assignment_checkpoint(&a).unwrap().to_bytes()).unwrap()).unwrap();
        assert_eq!(back, a);
    }
}
