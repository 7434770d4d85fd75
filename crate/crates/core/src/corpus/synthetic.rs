use std::sync::Arc;

use crate::corpus::{ItemId, ItemVocab, Session, SessionDataset, Split};
use crate::error::{Result, SruError};
use crate::numerics::RngStream;

/// Parameters of the clustered Markov-chain session generator.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub num_sessions: usize,
    pub vocab_size: usize,
    pub num_clusters: usize,
    /// Probability that a step emits a uniformly random item instead of the
    /// chain state.
    pub noise_rate: f64,
    pub min_len: usize,
    pub max_len: usize,
    /// Successors per item in each cluster's transition table.
    pub branching: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_sessions: 2000,
            vocab_size: 200,
            num_clusters: 8,
            noise_rate: 0.1,
            min_len: 5,
            max_len: 10,
            branching: 3,
            seed: 0,
        }
    }
}

struct Chain {
    items: Vec<ItemId>,
    /// Per local item: successor local indices with cumulative weights.
    successors: Vec<Vec<(usize, f64)>>,
}

impl Chain {
    fn build(items: Vec<ItemId>, branching: usize, rng: &mut RngStream) -> Self {
        let n = items.len();
        let branching = branching.clamp(1, n);
        let raw: Vec<f64> = (0..branching).map(|j| 0.5f64.powi(j as i32)).collect();
        let total: f64 = raw.iter().sum();
        let successors = (0..n)
            .map(|_| {
                let picks = rng.sample_distinct(n, branching);
                let mut acc = 0.0;
                picks
                    .into_iter()
                    .zip(&raw)
                    .map(|(p, w)| {
                        acc += w / total;
                        (p, acc)
                    })
                    .collect()
            })
            .collect();
        Chain { items, successors }
    }

    fn next(&self, state: usize, rng: &mut RngStream) -> usize {
        let u = rng.next_f64();
        let row = &self.successors[state];
        row.iter()
            .find(|(_, c)| u < *c)
            .map(|(p, _)| *p)
            .unwrap_or(row[row.len() - 1].0)
    }
}

/// Generates sessions from `num_clusters` first-order Markov chains over
/// disjoint item blocks. Block `c` holds items `c*b+1 ..= (c+1)*b` with
/// `b = vocab_size / num_clusters`.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<SessionDataset> {
    if cfg.num_clusters == 0 || cfg.vocab_size < cfg.num_clusters * 10 {
        return Err(SruError::contract(format!(
            "vocab_size {} must be at least 10 x num_clusters {}",
            cfg.vocab_size, cfg.num_clusters
        )));
    }
    if !(0.0..=1.0).contains(&cfg.noise_rate) {
        return Err(SruError::contract("noise_rate must lie in [0, 1]"));
    }
    if cfg.min_len < 2 || cfg.max_len < cfg.min_len {
        return Err(SruError::contract("need 2 <= min_len <= max_len"));
    }
    let block = cfg.vocab_size / cfg.num_clusters;
    let mut chain_rng = RngStream::new(cfg.seed, "synthetic/chains");
    let chains: Vec<Chain> = (0..cfg.num_clusters)
        .map(|c| {
            let items = (c * block + 1..=(c + 1) * block)
                .map(|i| i as ItemId)
                .collect();
            Chain::build(items, cfg.branching, &mut chain_rng)
        })
        .collect();

    let mut rng = RngStream::new(cfg.seed, "synthetic/sessions");
    let sessions = (0..cfg.num_sessions)
        .map(|i| {
            let cluster = rng.below(cfg.num_clusters);
            let chain = &chains[cluster];
            let len = cfg.min_len + rng.below(cfg.max_len - cfg.min_len + 1);
            let mut state = rng.below(chain.items.len());
            let mut items = Vec::with_capacity(len);
            for t in 0..len {
                if t > 0 {
                    state = chain.next(state, &mut rng);
                }
                let item = if cfg.noise_rate > 0.0 && rng.next_f64() < cfg.noise_rate {
                    (rng.below(cfg.vocab_size) + 1) as ItemId
                } else {
                    chain.items[state]
                };
                items.push(item);
            }
            let mut s = Session::new(format!("s{i}"), items);
            s.label = Some(cluster as u32);
            s
        })
        .collect();

    let tokens = (1..=cfg.vocab_size).map(|i| format!("i{i}")).collect();
    let vocab = Arc::new(ItemVocab::from_tokens(tokens)?);
    SessionDataset::new(sessions, vocab, Split::Full, cfg.max_len)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pure_noise_is_uniform() {
        let cfg = SyntheticConfig {
            num_sessions: 1000,
            vocab_size: 50,
            num_clusters: 2,
            noise_rate: 1.0,
            min_len: 10,
            max_len: 10,
            seed: 5,
            ..Default::default()
        };
        let ds = generate_synthetic(&cfg).unwrap();
        let mut counts = vec![0usize; cfg.vocab_size + 1];
        for s in &ds.sessions {
            for &i in &s.items {
                counts[i as usize] += 1;
            }
        }
        let draws = ds.num_interactions() as f64;
        assert_eq!(draws, 10_000.0);
        let expected = draws / cfg.vocab_size as f64;
        let chi2: f64 = counts[1..]
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        let df = (cfg.vocab_size - 1) as f64;
        assert!(chi2 < df + 3.0 * (2.0 * df).sqrt(), "chi2 {chi2}");
    }

    #[test]
    fn noise_free_sessions_stay_in_one_block() {
        let cfg = SyntheticConfig {
            num_sessions: 300,
            vocab_size: 40,
            num_clusters: 2,
            noise_rate: 0.0,
            seed: 1,
            ..Default::default()
        };
        let ds = generate_synthetic(&cfg).unwrap();
        for s in &ds.sessions {
            let c = s.label.unwrap();
            for &i in &s.items {
                assert_eq!((i as usize - 1) / 20, c as usize);
            }
        }
    }

    #[test]
    fn same_seed_same_dataset() {
        let cfg = SyntheticConfig::default();
        assert_eq!(
            generate_synthetic(&cfg).unwrap(),
            generate_synthetic(&cfg).unwrap()
        );
        let other = SyntheticConfig { seed: 1, ..cfg };
        assert_ne!(
            generate_synthetic(&SyntheticConfig::default()).unwrap().sessions,
            generate_synthetic(&other).unwrap().sessions
        );
    }

    #[test]
    fn rejects_small_vocab() {
        let cfg = SyntheticConfig {
            vocab_size: 30,
            num_clusters: 4,
            ..Default::default()
        };
        assert!(generate_synthetic(&cfg).is_err());
    }
}
