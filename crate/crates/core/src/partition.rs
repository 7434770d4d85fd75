//! Capacity-bounded balanced k-means over session hidden states.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::backbone::GruModel;
use crate::corpus::SessionDataset;
use crate::error::{Result, SruError};
use crate::numerics::{Real, RngStream, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct PartitionConfig {
    /// Number of shards.
    pub k: usize,
    /// Maximum sessions per shard; `None` means `ceil(|D| / k)`.
    pub delta: Option<usize>,
    pub max_iters: usize,
    pub centroid_tol: f64,
    pub seed: u64,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        PartitionConfig {
            k: 8,
            delta: None,
            max_iters: 50,
            centroid_tol: 1e-6,
            seed: 0,
        }
    }
}

impl PartitionConfig {
    pub fn capacity(&self, n: usize) -> usize {
        self.delta.unwrap_or_else(|| n.div_ceil(self.k.max(1)))
    }
}

/// A centroid that was re-seeded because its shard came out empty.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Reseed {
    pub iteration: usize,
    pub shard: usize,
    pub session: usize,
}

/// Disjoint cover of the sessions by `k` shards.
#[derive(Clone, Debug, PartialEq)]
pub struct ShardAssignment {
    pub shard_of: Vec<usize>,
    /// Session indices per shard, ascending.
    pub members: Vec<Vec<usize>>,
    /// Mean hidden state of each shard; empty for random partitions.
    pub centroids: Vec<Vec<f64>>,
    pub iterations_run: usize,
    pub converged: bool,
    pub reseeds: Vec<Reseed>,
}

impl ShardAssignment {
    pub fn num_shards(&self) -> usize {
        self.members.len()
    }

    /// Rebuilds an assignment from per-session shard ids.
    pub fn from_shard_ids(shard_of: Vec<usize>, k: usize) -> Result<Self> {
        let mut members = vec![Vec::new(); k];
        for (i, &s) in shard_of.iter().enumerate() {
            if s >= k {
                return Err(SruError::Index {
                    what: "shard",
                    index: s,
                    bound: k,
                });
            }
            members[s].push(i);
        }
        Ok(ShardAssignment {
            shard_of,
            members,
            centroids: Vec::new(),
            iterations_run: 0,
            converged: true,
            reseeds: Vec::new(),
        })
    }

    /// Checks disjointness, full coverage of `0..n` and the capacity bound.
    pub fn check(&self, n: usize, delta: usize) -> Result<()> {
        if self.shard_of.len() != n {
            return Err(SruError::contract(format!(
                "assignment covers {} sessions, expected {n}",
                self.shard_of.len()
            )));
        }
        let mut seen = vec![false; n];
        for (k, m) in self.members.iter().enumerate() {
            if m.len() > delta {
                return Err(SruError::contract(format!(
                    "shard {k} holds {} sessions, capacity {delta}",
                    m.len()
                )));
            }
            for &i in m {
                if i >= n || seen[i] || self.shard_of[i] != k {
                    return Err(SruError::contract(format!(
                        "session {i} is not assigned exactly once"
                    )));
                }
                seen[i] = true;
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(SruError::contract("assignment leaves sessions uncovered"));
        }
        Ok(())
    }
}

/// Hidden state of every session under the reference model, one row each.
pub fn embed_all<T: Real>(model: &GruModel<T>, dataset: &SessionDataset) -> Result<Tensor<T>> {
    if model.num_items() != dataset.num_items() {
        return Err(SruError::contract(format!(
            "reference model has {} items, dataset vocabulary {}",
            model.num_items(),
            dataset.num_items()
        )));
    }
    let rows = dataset
        .sessions
        .par_iter()
        .map(|s| model.encode(&s.items))
        .collect::<Result<Vec<_>>>()?;
    let d = model.dim();
    Tensor::matrix(rows.len(), d, rows.into_iter().flatten().collect())
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Scans all (session, shard) pairs by ascending distance and places each
/// session at its nearest shard that still has room.
fn assign(points: &[Vec<f64>], centroids: &[Vec<f64>], delta: usize) -> Vec<usize> {
    let k = centroids.len();
    let dist: Vec<Vec<f64>> = points
        .par_iter()
        .map(|p| centroids.iter().map(|c| euclidean(p, c)).collect())
        .collect();
    let mut pairs: Vec<(f64, u32, u32)> = Vec::with_capacity(points.len() * k);
    for (i, row) in dist.iter().enumerate() {
        for (j, &d) in row.iter().enumerate() {
            pairs.push((d, i as u32, j as u32));
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut shard_of = vec![usize::MAX; points.len()];
    let mut load = vec![0usize; k];
    let mut left = points.len();
    for (_, i, j) in pairs {
        let (i, j) = (i as usize, j as usize);
        if shard_of[i] == usize::MAX && load[j] < delta {
            shard_of[i] = j;
            load[j] += 1;
            left -= 1;
            if left == 0 {
                break;
            }
        }
    }
    shard_of
}

fn to_points<T: Real>(h: &Tensor<T>) -> Vec<Vec<f64>> {
    (0..h.rows())
        .map(|i| h.row(i).iter().map(|x| x.as_f64()).collect())
        .collect()
}

/// Balanced k-means with `k` distinct sessions drawn as initial centroids
/// from the `(seed, "partition/init")` stream.
pub fn balanced_kmeans<T: Real>(h: &Tensor<T>, cfg: &PartitionConfig) -> Result<ShardAssignment> {
    let n = h.rows();
    if cfg.k == 0 || cfg.k > n {
        return Err(SruError::contract(format!(
            "cannot build {} shards from {n} sessions",
            cfg.k
        )));
    }
    let points = to_points(h);
    let mut rng = RngStream::new(cfg.seed, "partition/init");
    let init = rng
        .sample_distinct(n, cfg.k)
        .into_iter()
        .map(|i| points[i].clone())
        .collect();
    run_kmeans(&points, cfg, init)
}

/// Balanced k-means from explicit initial centroids.
pub fn balanced_kmeans_from<T: Real>(
    h: &Tensor<T>,
    cfg: &PartitionConfig,
    centroids: Vec<Vec<f64>>,
) -> Result<ShardAssignment> {
    if centroids.len() != cfg.k || centroids.iter().any(|c| c.len() != h.cols()) {
        return Err(SruError::dim(
            "initial centroids",
            &[cfg.k, h.cols()],
            &[centroids.len(), centroids.first().map_or(0, Vec::len)],
        ));
    }
    if cfg.k == 0 || cfg.k > h.rows() {
        return Err(SruError::contract("k must lie in 1..=|D|"));
    }
    run_kmeans(&to_points(h), cfg, centroids)
}

fn run_kmeans(
    points: &[Vec<f64>],
    cfg: &PartitionConfig,
    mut centroids: Vec<Vec<f64>>,
) -> Result<ShardAssignment> {
    let n = points.len();
    let k = cfg.k;
    let d = points[0].len();
    let delta = cfg.capacity(n);
    if k * delta < n {
        return Err(SruError::contract(format!(
            "capacity {delta} x {k} shards cannot hold {n} sessions"
        )));
    }
    let mut reseeds = Vec::new();
    let mut shard_of;
    let mut iterations = 0;
    let mut converged = false;
    let mut extra = 0;
    loop {
        iterations += 1;
        shard_of = assign(points, &centroids, delta);
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (i, &s) in shard_of.iter().enumerate() {
            counts[s] += 1;
            for (acc, x) in sums[s].iter_mut().zip(&points[i]) {
                *acc += x;
            }
        }
        let mut next: Vec<Vec<f64>> = sums
            .into_iter()
            .zip(&counts)
            .map(|(s, &c)| {
                if c == 0 {
                    s
                } else {
                    s.into_iter().map(|x| x / c as f64).collect()
                }
            })
            .collect();
        let empty: Vec<usize> = (0..k).filter(|&j| counts[j] == 0).collect();
        for &j in &empty {
            let taken: Vec<usize> = reseeds
                .iter()
                .filter(|r: &&Reseed| r.iteration == iterations)
                .map(|r| r.session)
                .collect();
            let far = (0..n)
                .filter(|i| !taken.contains(i))
                .map(|i| (euclidean(&points[i], &next[shard_of[i]]), i))
                .max_by(|a, b| a.0.total_cmp(&b.0).then(b.1.cmp(&a.1)))
                .map(|(_, i)| i)
                .expect("n >= k");
            next[j] = points[far].clone();
            reseeds.push(Reseed {
                iteration: iterations,
                shard: j,
                session: far,
            });
        }
        let moved = centroids
            .iter()
            .zip(&next)
            .map(|(a, b)| euclidean(a, b))
            .fold(0.0, f64::max);
        centroids = next;
        if empty.is_empty() && moved < cfg.centroid_tol {
            converged = true;
            break;
        }
        if iterations >= cfg.max_iters {
            if empty.is_empty() {
                break;
            }
            extra += 1;
            if extra > k {
                return Err(SruError::contract(
                    "balanced k-means keeps producing an empty shard",
                ));
            }
        }
    }
    let mut assignment = ShardAssignment::from_shard_ids(shard_of, k)?;
    assignment.centroids = centroids;
    assignment.iterations_run = iterations;
    assignment.converged = converged;
    assignment.reseeds = reseeds;
    Ok(assignment)
}

/// Seeded shuffle dealt round-robin into `k` shards whose sizes differ by at
/// most one.
pub fn random_partition(n: usize, k: usize, seed: u64) -> Result<ShardAssignment> {
    if k == 0 || k > n {
        return Err(SruError::contract(format!(
            "cannot build {k} shards from {n} sessions"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    RngStream::new(seed, "partition/random").shuffle(&mut order);
    let mut shard_of = vec![0; n];
    for (rank, &i) in order.iter().enumerate() {
        shard_of[i] = rank % k;
    }
    ShardAssignment::from_shard_ids(shard_of, k)
}

/// Splits `dataset` along `assignment`; sessions keep their original order.
pub fn make_shards(
    dataset: &SessionDataset,
    assignment: &ShardAssignment,
) -> Result<Vec<SessionDataset>> {
    assignment.check(dataset.len(), usize::MAX)?;
    Ok(assignment
        .members
        .iter()
        .map(|m| {
            let sessions = m.iter().map(|&i| dataset.sessions[i].clone()).collect();
            dataset.derive(sessions, dataset.split)
        })
        .collect())
}

/// Majority-label fraction of each non-empty shard, averaged over shards.
pub fn cluster_purity(assignment: &ShardAssignment, labels: &[u32]) -> f64 {
    let mut total = 0.0;
    let mut shards = 0;
    for m in assignment.members.iter().filter(|m| !m.is_empty()) {
        let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
        for &i in m {
            *counts.entry(labels[i]).or_default() += 1;
        }
        total += *counts.values().max().unwrap() as f64 / m.len() as f64;
        shards += 1;
    }
    if shards == 0 {
        0.0
    } else {
        total / shards as f64
    }
}
