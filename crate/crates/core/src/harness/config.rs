//! Flat `key = value` experiment configuration with typed validation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::aggregation::{AggregationConfig, CentroidSource};
use crate::backbone::BackboneConfig;
use crate::corpus::{FilterMode, PreprocessConfig, SplitRatios, SyntheticConfig};
use crate::error::{Result, SruError};
use crate::framework::{PartitionMethod, SruConfig};
use crate::numerics::RngStream;
use crate::partition::PartitionConfig;
use crate::unlearning::{AuditContext, Strategy};

/// Environment variable that replaces the configured global seed.
pub const SEED_ENV: &str = "SRU_SEED";

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic(SyntheticConfig),
    /// Interaction log with `session_id,item_id,timestamp` rows.
    File(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnlearnSettings {
    pub strategy: Strategy,
    pub n_extra: usize,
    /// Requests sampled by `effectiveness`, `bench` and the ablations.
    pub requests: usize,
    /// Smallest target position of sampled requests.
    pub min_position: usize,
    pub audit_context: AuditContext,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub source: DataSource,
    pub preprocess: PreprocessConfig,
    pub split: SplitRatios,
    pub backbone: BackboneConfig,
    pub partition: PartitionConfig,
    pub method: PartitionMethod,
    pub aggregation: AggregationConfig,
    pub unlearn: UnlearnSettings,
    pub eval_ks: Vec<usize>,
    pub hit_ks: Vec<usize>,
    pub ablate_shards: Vec<usize>,
    pub ablate_deletion: Vec<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            source: DataSource::Synthetic(SyntheticConfig::default()),
            preprocess: PreprocessConfig::default(),
            split: SplitRatios::default(),
            backbone: BackboneConfig::default(),
            partition: PartitionConfig::default(),
            method: PartitionMethod::default(),
            aggregation: AggregationConfig::default(),
            unlearn: UnlearnSettings {
                strategy: Strategy::Ced,
                n_extra: 2,
                requests: 200,
                min_position: 5,
                audit_context: AuditContext::Prefix,
            },
            eval_ks: vec![10, 20],
            hit_ks: vec![1, 5, 10, 20],
            ablate_shards: vec![2, 4, 8, 16],
            ablate_deletion: vec![0, 1, 2, 3, 4, 5],
        }
    }
}

/// Pipeline stages, in dependency order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Preprocess,
    Pretrain,
    Partition,
    TrainShards,
    TrainAgg,
    Eval,
    Unlearn,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Preprocess => "preprocess",
            Stage::Pretrain => "pretrain",
            Stage::Partition => "partition",
            Stage::TrainShards => "train-shards",
            Stage::TrainAgg => "train-agg",
            Stage::Eval => "eval",
            Stage::Unlearn => "unlearn",
        }
    }

    /// Config key prefixes whose values determine this stage's outputs.
    fn prefixes(self) -> &'static [&'static str] {
        const P: &[&str] = &["seed", "data.", "synthetic.", "preprocess.", "split."];
        match self {
            Stage::Preprocess => P,
            Stage::Pretrain => &["seed", "data.", "synthetic.", "preprocess.", "split.", "backbone."],
            Stage::Partition | Stage::TrainShards => &[
                "seed", "data.", "synthetic.", "preprocess.", "split.", "backbone.", "partition.",
            ],
            Stage::TrainAgg => &[
                "seed", "data.", "synthetic.", "preprocess.", "split.", "backbone.", "partition.",
                "aggregation.",
            ],
            Stage::Eval => &[
                "seed", "data.", "synthetic.", "preprocess.", "split.", "backbone.", "partition.",
                "aggregation.", "eval.",
            ],
            Stage::Unlearn => &[
                "seed", "data.", "synthetic.", "preprocess.", "split.", "backbone.", "partition.",
                "aggregation.", "unlearn.",
            ],
        }
    }
}

fn cfg_err(key: &str, message: impl Into<String>) -> SruError {
    SruError::Config {
        key: key.to_string(),
        message: message.into(),
    }
}

fn parse_num<N: std::str::FromStr>(key: &str, v: &str) -> Result<N>
where
    N::Err: std::fmt::Display,
{
    v.parse().map_err(|e| cfg_err(key, format!("{v:?}: {e}")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|x| parse_num(key, x.trim())).collect()
}

fn list(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    /// Reads a config file; see [`ExperimentConfig::parse`].
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::parse(&text)?;
        if let DataSource::File(p) = &mut cfg.source {
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    /// Unknown or repeated keys are errors. The result is validated.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut seen = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| SruError::Parse {
                line: n + 1,
                message: format!("expected key = value, got {line:?}"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if seen.insert(key.to_string(), n + 1).is_some() {
                return Err(cfg_err(key, "set more than once"));
            }
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `SRU_SEED` when set.
    pub fn with_env_seed(mut self) -> Result<Self> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = parse_num(SEED_ENV, v.trim())?;
        }
        Ok(self)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        fn synthetic<'a>(cfg: &'a mut ExperimentConfig, key: &str) -> Result<&'a mut SyntheticConfig> {
            match &mut cfg.source {
                DataSource::Synthetic(s) => Ok(s),
                DataSource::File(_) => Err(cfg_err(key, "synthetic settings require data.source = synthetic")),
            }
        }
        match key {
            "seed" => self.seed = parse_num(key, v)?,
            "data.source" => match v {
                "synthetic" => {
                    if !matches!(self.source, DataSource::Synthetic(_)) {
                        self.source = DataSource::Synthetic(SyntheticConfig::default());
                    }
                }
                "file" => {
                    if !matches!(self.source, DataSource::File(_)) {
                        self.source = DataSource::File(PathBuf::new());
                    }
                }
                _ => return Err(cfg_err(key, format!("expected synthetic or file, got {v:?}"))),
            },
            "data.path" => match &mut self.source {
                DataSource::File(p) => *p = PathBuf::from(v),
                DataSource::Synthetic(_) => return Err(cfg_err(key, "data.path requires data.source = file")),
            },
            "synthetic.sessions" => synthetic(self, key)?.num_sessions = parse_num(key, v)?,
            "synthetic.items" => synthetic(self, key)?.vocab_size = parse_num(key, v)?,
            "synthetic.clusters" => synthetic(self, key)?.num_clusters = parse_num(key, v)?,
            "synthetic.noise" => synthetic(self, key)?.noise_rate = parse_num(key, v)?,
            "synthetic.min_len" => synthetic(self, key)?.min_len = parse_num(key, v)?,
            "synthetic.max_len" => synthetic(self, key)?.max_len = parse_num(key, v)?,
            "synthetic.branching" => synthetic(self, key)?.branching = parse_num(key, v)?,
            "preprocess.min_count" => self.preprocess.min_count = parse_num(key, v)?,
            "preprocess.max_len" => self.preprocess.max_len = parse_num(key, v)?,
            "preprocess.mode" => {
                self.preprocess.mode = match v {
                    "single" => FilterMode::SinglePass,
                    "iterative" => FilterMode::Iterative,
                    _ => return Err(cfg_err(key, format!("expected single or iterative, got {v:?}"))),
                }
            }
            "split.ratios" => {
                let r = parse_list(key, v)?;
                if r.len() != 3 {
                    return Err(cfg_err(key, "expected three comma-separated parts"));
                }
                self.split = SplitRatios(r[0], r[1], r[2]);
            }
            "backbone.dim" => self.backbone.dim = parse_num(key, v)?,
            "backbone.epochs" => self.backbone.epochs = parse_num(key, v)?,
            "backbone.batch_size" => self.backbone.batch_size = parse_num(key, v)?,
            "backbone.lr" => self.backbone.lr = parse_num(key, v)?,
            "partition.k" => self.partition.k = parse_num(key, v)?,
            "partition.delta" => {
                self.partition.delta = if v == "auto" { None } else { Some(parse_num(key, v)?) }
            }
            "partition.max_iters" => self.partition.max_iters = parse_num(key, v)?,
            "partition.tol" => self.partition.centroid_tol = parse_num(key, v)?,
            "partition.method" => {
                self.method = PartitionMethod::parse(v)
                    .ok_or_else(|| cfg_err(key, format!("expected similarity or random, got {v:?}")))?
            }
            "aggregation.attention_dim" => self.aggregation.attention_dim = parse_num(key, v)?,
            "aggregation.hidden_dim" => {
                self.aggregation.hidden_dim = if v == "auto" { None } else { Some(parse_num(key, v)?) }
            }
            "aggregation.lr" => self.aggregation.lr = parse_num(key, v)?,
            "aggregation.epochs" => self.aggregation.epochs = parse_num(key, v)?,
            "aggregation.batch_size" => self.aggregation.batch_size = parse_num(key, v)?,
            "aggregation.init_noise" => self.aggregation.init_noise = parse_num(key, v)?,
            "aggregation.centroid_source" => {
                self.aggregation.centroid_source = CentroidSource::parse(v)
                    .ok_or_else(|| cfg_err(key, format!("expected submodel or partition, got {v:?}")))?
            }
            "unlearn.strategy" => {
                self.unlearn.strategy =
                    Strategy::parse(v).ok_or_else(|| cfg_err(key, format!("expected CED, NED or RED, got {v:?}")))?
            }
            "unlearn.n" => self.unlearn.n_extra = parse_num(key, v)?,
            "unlearn.requests" => self.unlearn.requests = parse_num(key, v)?,
            "unlearn.min_position" => self.unlearn.min_position = parse_num(key, v)?,
            "unlearn.audit_context" => {
                self.unlearn.audit_context = match v {
                    "prefix" => AuditContext::Prefix,
                    "session" => AuditContext::Session,
                    _ => return Err(cfg_err(key, format!("expected prefix or session, got {v:?}"))),
                }
            }
            "eval.ks" => self.eval_ks = parse_list(key, v)?,
            "eval.hit_ks" => self.hit_ks = parse_list(key, v)?,
            "ablate.shards" => self.ablate_shards = parse_list(key, v)?,
            "ablate.deletion" => self.ablate_deletion = parse_list(key, v)?,
            _ => return Err(cfg_err(key, "unknown key")),
        }
        Ok(())
    }

    /// Every setting as resolved `(key, value)` pairs in a fixed order.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut out: Vec<(&str, String)> = vec![("seed", self.seed.to_string())];
        match &self.source {
            DataSource::Synthetic(s) => {
                out.push(("data.source", "synthetic".into()));
                out.extend([
                    ("synthetic.sessions", s.num_sessions.to_string()),
                    ("synthetic.items", s.vocab_size.to_string()),
                    ("synthetic.clusters", s.num_clusters.to_string()),
                    ("synthetic.noise", s.noise_rate.to_string()),
                    ("synthetic.min_len", s.min_len.to_string()),
                    ("synthetic.max_len", s.max_len.to_string()),
                    ("synthetic.branching", s.branching.to_string()),
                ]);
            }
            DataSource::File(p) => {
                out.push(("data.source", "file".into()));
                out.push(("data.path", p.display().to_string()));
            }
        }
        let mode = match self.preprocess.mode {
            FilterMode::SinglePass => "single",
            FilterMode::Iterative => "iterative",
        };
        let SplitRatios(a, b, c) = self.split;
        let opt = |o: Option<usize>| o.map_or("auto".to_string(), |x| x.to_string());
        let audit = match self.unlearn.audit_context {
            AuditContext::Prefix => "prefix",
            AuditContext::Session => "session",
        };
        out.extend([
            ("preprocess.min_count", self.preprocess.min_count.to_string()),
            ("preprocess.max_len", self.preprocess.max_len.to_string()),
            ("preprocess.mode", mode.to_string()),
            ("split.ratios", format!("{a},{b},{c}")),
            ("backbone.dim", self.backbone.dim.to_string()),
            ("backbone.epochs", self.backbone.epochs.to_string()),
            ("backbone.batch_size", self.backbone.batch_size.to_string()),
            ("backbone.lr", self.backbone.lr.to_string()),
            ("partition.k", self.partition.k.to_string()),
            ("partition.delta", opt(self.partition.delta)),
            ("partition.max_iters", self.partition.max_iters.to_string()),
            ("partition.tol", self.partition.centroid_tol.to_string()),
            ("partition.method", self.method.as_str().to_string()),
            ("aggregation.attention_dim", self.aggregation.attention_dim.to_string()),
            ("aggregation.hidden_dim", opt(self.aggregation.hidden_dim)),
            ("aggregation.lr", self.aggregation.lr.to_string()),
            ("aggregation.epochs", self.aggregation.epochs.to_string()),
            ("aggregation.batch_size", self.aggregation.batch_size.to_string()),
            ("aggregation.init_noise", self.aggregation.init_noise.to_string()),
            ("aggregation.centroid_source", self.aggregation.centroid_source.as_str().to_string()),
            ("unlearn.strategy", self.unlearn.strategy.as_str().to_string()),
            ("unlearn.n", self.unlearn.n_extra.to_string()),
            ("unlearn.requests", self.unlearn.requests.to_string()),
            ("unlearn.min_position", self.unlearn.min_position.to_string()),
            ("unlearn.audit_context", audit.to_string()),
            ("eval.ks", list(&self.eval_ks)),
            ("eval.hit_ks", list(&self.hit_ks)),
            ("ablate.shards", list(&self.ablate_shards)),
            ("ablate.deletion", list(&self.ablate_deletion)),
        ]);
        out.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    /// Renders the resolved config in the file format.
    pub fn render(&self) -> String {
        self.to_pairs()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Hex SHA-256 of the settings that `stage` depends on.
    pub fn stage_hash(&self, stage: Stage) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.to_pairs() {
            if stage.prefixes().iter().any(|p| k == *p || (p.ends_with('.') && k.starts_with(p))) {
                h.update(format!("{k}={v}\n").as_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if let DataSource::Synthetic(s) = &self.source {
            if s.max_len > self.preprocess.max_len {
                return Err(cfg_err(
                    "synthetic.max_len",
                    format!("exceeds preprocess.max_len = {}", self.preprocess.max_len),
                ));
            }
            if s.num_clusters == 0 || s.vocab_size < s.num_clusters {
                return Err(cfg_err("synthetic.clusters", "need 1 <= clusters <= items"));
            }
        }
        if let DataSource::File(p) = &self.source {
            if p.as_os_str().is_empty() {
                return Err(cfg_err("data.path", "required when data.source = file"));
            }
        }
        let SplitRatios(a, b, c) = self.split;
        if a + b + c != 10 || a == 0 || c == 0 {
            return Err(cfg_err("split.ratios", "parts must sum to 10 with non-empty train and test"));
        }
        for (key, ks) in [
            ("eval.ks", &self.eval_ks),
            ("eval.hit_ks", &self.hit_ks),
            ("ablate.shards", &self.ablate_shards),
        ] {
            if ks.is_empty() || ks.contains(&0) {
                return Err(cfg_err(key, "needs at least one positive value"));
            }
        }
        self.sru().validate().map_err(|e| cfg_err("backbone/partition/aggregation", e.to_string()))
    }

    /// Model config with every component seed derived from `seed`.
    pub fn sru(&self) -> SruConfig {
        SruConfig {
            backbone: BackboneConfig {
                max_len: self.preprocess.max_len,
                patience: 0,
                ..self.backbone.clone()
            },
            partition: self.partition.clone(),
            method: self.method,
            aggregation: self.aggregation.clone(),
        }
        .with_seed(self.seed)
    }

    pub fn split_seed(&self) -> u64 {
        RngStream::derive_seed(self.seed, "split")
    }

    pub fn synthetic_seed(&self) -> u64 {
        RngStream::derive_seed(self.seed, "synthetic")
    }

    pub fn request_seed(&self) -> u64 {
        RngStream::derive_seed(self.seed, "requests")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_parse_round_trip() {
        let cfg = ExperimentConfig::parse("partition.k = 4\naggregation.hidden_dim = 16 # wide\n").unwrap();
        assert_eq!(cfg.partition.k, 4);
        assert_eq!(cfg.aggregation.hidden_dim, Some(16));
        assert_eq!(ExperimentConfig::parse(&cfg.render()).unwrap(), cfg);
    }

    #[test]
    fn bad_keys_and_values_are_named() {
        for (text, key) in [
            ("nope = 1", "nope"),
            ("backbone.dim = x", "backbone.dim"),
            ("partition.k = 0", "backbone/partition/aggregation"),
            ("seed = 1\nseed = 2", "seed"),
            ("data.path = a.csv", "data.path"),
            ("synthetic.max_len = 20", "synthetic.max_len"),
        ] {
            match ExperimentConfig::parse(text) {
                Err(SruError::Config { key: k, .. }) => assert_eq!(k, key, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
        assert!(matches!(ExperimentConfig::parse("just words"), Err(SruError::Parse { line: 1, .. })));
    }

    #[test]
    fn stage_hashes_track_only_upstream_keys() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig::parse("aggregation.epochs = 9").unwrap();
        assert_eq!(a.stage_hash(Stage::Partition), b.stage_hash(Stage::Partition));
        assert_ne!(a.stage_hash(Stage::TrainAgg), b.stage_hash(Stage::TrainAgg));
        let c = ExperimentConfig { seed: 3, ..a.clone() };
        assert_ne!(a.stage_hash(Stage::Preprocess), c.stage_hash(Stage::Preprocess));
    }
}
