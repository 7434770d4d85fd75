//! Stage orchestration over a work directory.
//!
//! ```text
//! data.ckpt               preprocess     train / validation / test splits
//! reference.ckpt          pretrain       reference model
//! partition.ckpt, .csv    partition      shard assignment
//! shards/data_NNN.ckpt    train-shards   current shard contents
//! shards/model_NNN.ckpt   train-shards   sub-models
//! aggregation.ckpt        train-agg      aggregation layer and centroids
//! unlearn.ckpt            unlearn        deletions of the last unlearn run
//! reports/                eval, unlearn, effectiveness, bench, ablate
//! ```
//!
//! Every checkpoint records the hash of the config keys its stage depends
//! on; consumers refuse artifacts whose hash differs from the current
//! config unless forced.

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use crate::backbone::GruModel;
use crate::corpus::{
    drop_unseen_items, generate_synthetic, ingest_log, preprocess, split, ItemId, SessionDataset,
};
use crate::error::{Result, SruError};
use crate::evaluation::{
    benchmark_unlearn, evaluate, hit_effectiveness, sisa_baseline, AuditCase, Recommender, TimingReport,
};
use crate::framework::{
    fit_aggregation, partition_sessions, pretrain_reference, train_sub_models, PartitionMethod, SruConfig,
    SruModel, SruState,
};
use crate::harness::checkpoint::{digest_hex, Checkpoint, NamedTensor, TensorData};
use crate::harness::config::{DataSource, ExperimentConfig, Stage};
use crate::harness::persist::*;
use crate::harness::report::{write_atomic, Cell, Report};
use crate::numerics::RngStream;
use crate::partition::{cluster_purity, make_shards};
use crate::unlearning::{execute_unlearn, sample_requests, DeletionResult, Strategy, UnlearnRequest};

/// Which ablation to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    Shards,
    Partition,
    Deletion,
}

impl Ablation {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "shards" => Some(Ablation::Shards),
            "partition" => Some(Ablation::Partition),
            "deletion" => Some(Ablation::Deletion),
            _ => None,
        }
    }
}

pub struct Pipeline {
    pub cfg: ExperimentConfig,
    pub work: PathBuf,
    /// Accept artifacts whose recorded config hash differs.
    pub force: bool,
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

fn timing_rows(report: &mut Report, label: &str, t: &TimingReport) {
    let phases = [
        ("deletion", t.deletion),
        ("sub_model_retrain", t.sub_model_retrain),
        ("centroid_refresh", t.centroid_refresh),
        ("aggregation_retrain", t.aggregation_retrain),
        ("total", t.total),
    ];
    for (phase, d) in phases {
        report.push(vec![label.into(), phase.into(), ms(d).into()]);
    }
    if let Some(d) = t.full_retrain_reference {
        report.push(vec![label.into(), "full_retrain".into(), ms(d).into()]);
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

impl Pipeline {
    pub fn new(cfg: ExperimentConfig, work: impl Into<PathBuf>) -> Self {
        Pipeline { cfg, work: work.into(), force: false }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.work.join(rel)
    }

    fn shard_data_path(&self, k: usize) -> PathBuf {
        self.work.join("shards").join(format!("data_{k:03}.ckpt"))
    }

    fn shard_model_path(&self, k: usize) -> PathBuf {
        self.work.join("shards").join(format!("model_{k:03}.ckpt"))
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.work.join("reports")
    }

    fn save(&self, mut ck: Checkpoint, stage: Stage, path: &Path) -> Result<String> {
        ck.set_meta("config_hash", self.cfg.stage_hash(stage));
        ck.set_meta("stage", stage.name());
        ck.set_meta("seed", self.cfg.seed);
        let bytes = ck.to_bytes();
        write_atomic(path, &bytes)?;
        log::info!("wrote {} ({} bytes)", path.display(), bytes.len());
        Ok(digest_hex(&bytes))
    }

    fn load(&self, consumer: Stage, producer: Stage, path: &Path) -> Result<Checkpoint> {
        if !path.exists() {
            return Err(SruError::StageDependency {
                stage: consumer.name(),
                missing_stage: producer.name(),
                path: path.to_path_buf(),
            });
        }
        Checkpoint::load_checked(path, &self.cfg.stage_hash(producer), self.force)
    }

    fn sru_config(&self) -> SruConfig {
        self.cfg.sru()
    }

    // ---- stage: preprocess ----

    fn build_corpus(&self) -> Result<SessionDataset> {
        match &self.cfg.source {
            DataSource::Synthetic(s) => {
                let mut s = s.clone();
                s.seed = self.cfg.synthetic_seed();
                let ds = generate_synthetic(&s)?;
                Ok(SessionDataset { max_len: self.cfg.preprocess.max_len, ..ds })
            }
            DataSource::File(p) => {
                let raw = ingest_log(BufReader::new(File::open(p)?))?;
                preprocess(&raw, &self.cfg.preprocess)
            }
        }
    }

    pub fn preprocess(&self) -> Result<()> {
        let full = self.build_corpus()?;
        let (train, validation, test) = split(&full, self.cfg.split, self.cfg.split_seed())?;
        let validation = drop_unseen_items(&validation, &train);
        let test = drop_unseen_items(&test, &train);
        let ck = datasets_checkpoint(&[("train", &train), ("validation", &validation), ("test", &test)])?;
        self.save(ck, Stage::Preprocess, &self.path("data.ckpt"))?;
        let mut report = Report::new("preprocess", &["split", "sessions", "interactions", "pairs", "items"]);
        for (name, ds) in [("train", &train), ("validation", &validation), ("test", &test)] {
            report.push(vec![
                name.into(),
                ds.len().into(),
                ds.num_interactions().into(),
                ds.num_pairs().into(),
                ds.num_items().into(),
            ]);
        }
        report.emit_both(&self.reports_dir())
    }

    fn load_data(&self, consumer: Stage) -> Result<(SessionDataset, SessionDataset, SessionDataset)> {
        let ck = self.load(consumer, Stage::Preprocess, &self.path("data.ckpt"))?;
        let mut sets = datasets_from_checkpoint(&ck)?.into_iter();
        let mut next = |want: &str| -> Result<SessionDataset> {
            match sets.next() {
                Some((name, ds)) if name == want => Ok(ds),
                _ => Err(SruError::contract(format!("data checkpoint lacks the {want} split"))),
            }
        };
        Ok((next("train")?, next("validation")?, next("test")?))
    }

    // ---- stage: pretrain ----

    pub fn pretrain(&self) -> Result<()> {
        let (train, _, _) = self.load_data(Stage::Pretrain)?;
        let reference = pretrain_reference::<f32>(&train, &self.sru_config())?;
        self.save(gru_checkpoint(&reference), Stage::Pretrain, &self.path("reference.ckpt"))?;
        Ok(())
    }

    fn load_reference(&self, consumer: Stage) -> Result<GruModel<f32>> {
        gru_from_checkpoint(&self.load(consumer, Stage::Pretrain, &self.path("reference.ckpt"))?)
    }

    // ---- stage: partition ----

    pub fn partition(&self) -> Result<()> {
        let (train, _, _) = self.load_data(Stage::Partition)?;
        let reference = self.load_reference(Stage::Partition)?;
        let assignment = partition_sessions(&reference, &train, &self.sru_config())?;
        self.save(assignment_checkpoint(&assignment)?, Stage::Partition, &self.path("partition.ckpt"))?;

        let mut csv = String::from("session_index,shard_id\n");
        for (i, s) in assignment.shard_of.iter().enumerate() {
            csv.push_str(&format!("{i},{s}\n"));
        }
        write_atomic(&self.path("partition.csv"), csv.as_bytes())?;

        let mut report = Report::new("partition", &["shard", "sessions"]);
        for (k, m) in assignment.members.iter().enumerate() {
            report.push(vec![k.into(), m.len().into()]);
        }
        let labels: Option<Vec<u32>> = train.sessions.iter().map(|s| s.label).collect();
        log::info!(
            "partition: {} iterations, converged {}, {} reseeds{}",
            assignment.iterations_run,
            assignment.converged,
            assignment.reseeds.len(),
            labels.map_or(String::new(), |l| format!(", purity {:.4}", cluster_purity(&assignment, &l)))
        );
        report.emit_both(&self.reports_dir())
    }

    // ---- stage: train-shards ----

    pub fn train_shards(&self, parallel: bool) -> Result<()> {
        let (train, _, _) = self.load_data(Stage::TrainShards)?;
        let ck = self.load(Stage::TrainShards, Stage::Partition, &self.path("partition.ckpt"))?;
        let assignment = assignment_from_checkpoint(&ck)?;
        let shards = make_shards(&train, &assignment)?;
        let all: Vec<usize> = (0..shards.len()).collect();
        let models = train_sub_models::<f32>(&shards, &all, &self.sru_config(), parallel)?;
        for (k, (shard, model)) in shards.iter().zip(&models).enumerate() {
            self.save(datasets_checkpoint(&[("shard", shard)])?, Stage::TrainShards, &self.shard_data_path(k))?;
            let mut mck = gru_checkpoint(model);
            mck.set_meta("shard", k);
            self.save(mck, Stage::TrainShards, &self.shard_model_path(k))?;
        }
        Ok(())
    }

    /// Current shard contents and sub-models, plus each model file's digest.
    fn load_shards(&self, consumer: Stage, k: usize) -> Result<(Vec<SessionDataset>, Vec<GruModel<f32>>, Vec<String>)> {
        let mut shards = Vec::with_capacity(k);
        let mut models = Vec::with_capacity(k);
        let mut digests = Vec::with_capacity(k);
        for i in 0..k {
            let ck = self.load(consumer, Stage::TrainShards, &self.shard_data_path(i))?;
            let (_, ds) = datasets_from_checkpoint(&ck)?.into_iter().next().ok_or_else(|| SruError::contract("empty shard checkpoint"))?;
            shards.push(ds);
            let path = self.shard_model_path(i);
            let mck = self.load(consumer, Stage::TrainShards, &path)?;
            models.push(gru_from_checkpoint(&mck)?);
            digests.push(digest_hex(&std::fs::read(&path)?));
        }
        Ok((shards, models, digests))
    }

    // ---- stage: train-agg ----

    pub fn train_agg(&self) -> Result<()> {
        let ck = self.load(Stage::TrainAgg, Stage::Partition, &self.path("partition.ckpt"))?;
        let assignment = assignment_from_checkpoint(&ck)?;
        let (shards, models, digests) = self.load_shards(Stage::TrainAgg, assignment.num_shards())?;
        let stage = fit_aggregation(&models, &shards, &assignment, &self.sru_config().aggregation)?;
        self.save_aggregation(&stage.model, &stage.centroids, &digests)
    }

    fn save_aggregation(
        &self,
        model: &crate::aggregation::AggregationModel<f32>,
        centroids: &crate::aggregation::ShardCentroids<f32>,
        digests: &[String],
    ) -> Result<()> {
        let mut ck = aggregation_checkpoint(model, centroids)?;
        ck.set_meta("sub_model_digests", digests.join(","));
        self.save(ck, Stage::TrainAgg, &self.path("aggregation.ckpt"))?;
        Ok(())
    }

    /// Reassembles the trained state from disk, checking that the
    /// aggregation layer was fitted on the current sub-models.
    pub fn load_state(&self, consumer: Stage) -> Result<(SruState<f32>, SessionDataset, SessionDataset)> {
        let (_, validation, test) = self.load_data(consumer)?;
        let reference = self.load_reference(consumer)?;
        let assignment = assignment_from_checkpoint(&self.load(consumer, Stage::Partition, &self.path("partition.ckpt"))?)?;
        let (shards, sub_models, digests) = self.load_shards(consumer, assignment.num_shards())?;
        let agg_path = self.path("aggregation.ckpt");
        let ck = self.load(consumer, Stage::TrainAgg, &agg_path)?;
        let recorded = ck.meta("sub_model_digests")?;
        let current = digests.join(",");
        if recorded != current && !self.force {
            return Err(SruError::StaleArtifact {
                path: agg_path,
                recorded: recorded.to_string(),
                current,
            });
        }
        let (aggregation, centroids) = aggregation_from_checkpoint(&ck)?;
        let state = SruState {
            config: self.sru_config(),
            reference,
            assignment,
            shards,
            model: SruModel { sub_models, centroids, aggregation },
            prefix_states: None,
        };
        Ok((state, validation, test))
    }

    // ---- stage: eval ----

    pub fn eval(&self) -> Result<()> {
        let (state, validation, test) = self.load_state(Stage::Eval)?;
        let mut report = Report::new("eval", &["split", "metric", "k", "value"]);
        for (name, ds) in [("validation", &validation), ("test", &test)] {
            if ds.num_pairs() == 0 {
                log::warn!("{name} split has no evaluation points");
                continue;
            }
            let r = evaluate(&state.model, ds, &self.cfg.eval_ks)?;
            for (&k, &v) in &r.recall {
                report.push(vec![name.into(), "recall".into(), k.into(), v.into()]);
            }
            for (&k, &v) in &r.ndcg {
                report.push(vec![name.into(), "ndcg".into(), k.into(), v.into()]);
            }
            report.push(vec![name.into(), "points".into(), 0usize.into(), (r.evaluation_points as f64).into()]);
        }
        report.emit_both(&self.reports_dir())
    }

    // ---- stage: unlearn ----

    /// Samples `unlearn.requests` requests with the configured strategy.
    pub fn sample_requests(&self) -> Result<Vec<UnlearnRequest>> {
        let (state, _, _) = self.load_state(Stage::Unlearn)?;
        let all: Vec<usize> = (0..state.shards.len()).collect();
        let mut rng = RngStream::new(self.cfg.request_seed(), "harness/requests");
        let u = &self.cfg.unlearn;
        Ok(sample_requests(&state, &all, u.requests, u.min_position, u.strategy, u.n_extra, &mut rng))
    }

    pub fn unlearn(&self, requests_path: &Path) -> Result<()> {
        let requests = crate::unlearning::parse_requests(BufReader::new(File::open(requests_path)?))?;
        let (mut state, _, _) = self.load_state(Stage::Unlearn)?;
        let outcome = execute_unlearn(&mut state, &requests)?;
        for &k in &outcome.timing.retrained_shards {
            self.save(datasets_checkpoint(&[("shard", &state.shards[k])])?, Stage::TrainShards, &self.shard_data_path(k))?;
            let mut mck = gru_checkpoint(&state.model.sub_models[k]);
            mck.set_meta("shard", k);
            self.save(mck, Stage::TrainShards, &self.shard_model_path(k))?;
        }
        if !requests.is_empty() {
            let digests = (0..state.shards.len())
                .map(|k| std::fs::read(self.shard_model_path(k)).map(|b| digest_hex(&b)))
                .collect::<std::io::Result<Vec<_>>>()?;
            self.save_aggregation(&state.model.aggregation, &state.model.centroids, &digests)?;
        }
        let agg_digest = digest_hex(&std::fs::read(self.path("aggregation.ckpt"))?);
        let mut ck = deletions_checkpoint(&outcome.results)?;
        ck.set_meta("aggregation_digest", agg_digest);
        self.save(ck, Stage::Unlearn, &self.path("unlearn.ckpt"))?;

        let mut timing = Report::new("unlearn_timing", &["run", "phase", "ms"]);
        timing_rows(&mut timing, "unlearn", &outcome.timing);
        timing.emit_both(&self.reports_dir())?;
        let mut del = Report::new("deletions", &["session_id", "target_position", "target_item", "deleted_positions", "dropped"]);
        for r in &outcome.results {
            let pos: Vec<String> = r.deleted_positions.iter().map(|p| p.to_string()).collect();
            del.push(vec![
                r.session_id.clone().into(),
                r.target_position.into(),
                (r.target_item as usize).into(),
                pos.join(" ").into(),
                (r.dropped as usize).into(),
            ]);
        }
        log::info!(
            "unlearned {} requests ({} skipped), retrained shards {:?}",
            outcome.results.len(),
            outcome.skipped.len(),
            outcome.timing.retrained_shards
        );
        del.emit_both(&self.reports_dir())
    }

    // ---- stage: effectiveness ----

    pub fn effectiveness(&self) -> Result<()> {
        let path = self.path("unlearn.ckpt");
        let ck = self.load(Stage::Unlearn, Stage::Unlearn, &path)
            .map_err(|e| match e {
                SruError::StageDependency { path, .. } => SruError::StageDependency { stage: "effectiveness", missing_stage: "unlearn", path },
                e => e,
            })?;
        let agg_digest = digest_hex(&std::fs::read(self.path("aggregation.ckpt"))?);
        let recorded = ck.meta("aggregation_digest")?;
        if recorded != agg_digest && !self.force {
            return Err(SruError::StaleArtifact { path, recorded: recorded.to_string(), current: agg_digest });
        }
        let (state, _, _) = self.load_state(Stage::Unlearn)?;
        let cases = audit_cases_from_checkpoint(&ck, self.cfg.unlearn.audit_context == crate::unlearning::AuditContext::Session)?;
        let report = hit_effectiveness(&state.model, &cases, &self.cfg.hit_ks)?;
        let mut out = Report::new("effectiveness", &["metric", "k", "value"]);
        for (&k, &v) in &report.hit {
            out.push(vec!["hit".into(), k.into(), v.into()]);
        }
        out.push(vec!["audited_requests".into(), 0usize.into(), (report.audited_requests as f64).into()]);
        out.push(vec!["skipped_empty_prefix".into(), 0usize.into(), (report.skipped_empty_prefix as f64).into()]);
        out.emit_both(&self.reports_dir())
    }

    // ---- stage: bench ----

    /// Requests confined to shard 0, timed against a full retrain `runs`
    /// times from the same starting state.
    pub fn bench(&self, runs: usize) -> Result<()> {
        let (state, _, _) = self.load_state(Stage::Unlearn)?;
        let u = &self.cfg.unlearn;
        let mut rng = RngStream::new(self.cfg.request_seed(), "harness/bench");
        let requests = sample_requests(&state, &[0], u.requests, u.min_position.min(1), u.strategy, u.n_extra, &mut rng);
        let mut report = Report::new("bench", &["run", "phase", "ms"]);
        let mut ratios = Vec::new();
        for run in 0..runs.max(1) {
            let mut s = state.clone();
            let b = benchmark_unlearn(&mut s, &requests)?;
            timing_rows(&mut report, &format!("run{run}"), &b.sru);
            report.push(vec![format!("run{run}").into(), "ratio".into(), b.ratio.into()]);
            ratios.push(b.ratio);
        }
        report.push(vec!["median".into(), "ratio".into(), median(ratios).into()]);
        report.emit_both(&self.reports_dir())
    }

    // ---- stage: ablate ----

    pub fn ablate(&self, which: Ablation) -> Result<()> {
        let (train, _, test) = self.load_data(Stage::Partition)?;
        let reference = self.load_reference(Stage::Partition)?;
        match which {
            Ablation::Shards => self.ablate_shards(&train, &test, &reference),
            Ablation::Partition => self.ablate_partition(&train, &test, &reference),
            Ablation::Deletion => self.ablate_deletion(&train, &reference),
        }
    }

    fn build_from(&self, train: &SessionDataset, reference: &GruModel<f32>, cfg: &SruConfig) -> Result<SruState<f32>> {
        let assignment = partition_sessions(reference, train, cfg)?;
        let shards = make_shards(train, &assignment)?;
        let all: Vec<usize> = (0..shards.len()).collect();
        let sub_models = train_sub_models(&shards, &all, cfg, true)?;
        let agg = fit_aggregation(&sub_models, &shards, &assignment, &cfg.aggregation)?;
        Ok(SruState {
            config: cfg.clone(),
            reference: reference.clone(),
            assignment,
            shards,
            model: SruModel { sub_models, centroids: agg.centroids, aggregation: agg.model },
            prefix_states: Some(agg.prefix_states),
        })
    }

    fn ranking_cells(&self, model: &dyn Recommender, test: &SessionDataset) -> Result<Vec<Cell>> {
        let r = evaluate(model, test, &self.cfg.eval_ks)?;
        let mut cells: Vec<Cell> = r.recall.values().map(|&v| v.into()).collect();
        cells.extend(r.ndcg.values().map(|&v| Cell::from(v)));
        Ok(cells)
    }

    fn ranking_columns(&self) -> Vec<String> {
        let mut cols: Vec<String> = self.cfg.eval_ks.iter().map(|k| format!("recall@{k}")).collect();
        cols.extend(self.cfg.eval_ks.iter().map(|k| format!("ndcg@{k}")));
        cols
    }

    fn ablate_shards(&self, train: &SessionDataset, test: &SessionDataset, reference: &GruModel<f32>) -> Result<()> {
        let mut cols = vec!["k".to_string()];
        cols.extend(self.ranking_columns());
        cols.push("unlearn_ms".into());
        let mut report = Report { name: "ablate_shards".into(), columns: cols, rows: Vec::new() };
        let u = &self.cfg.unlearn;
        for &k in &self.cfg.ablate_shards {
            let mut cfg = self.sru_config();
            cfg.partition.k = k;
            let mut state = self.build_from(train, reference, &cfg)?;
            let mut row = vec![Cell::from(k)];
            row.extend(self.ranking_cells(&state.model, test)?);
            let mut rng = RngStream::new(self.cfg.request_seed(), "harness/ablate-shards");
            let requests = sample_requests(&state, &[0], u.requests, 1, u.strategy, u.n_extra, &mut rng);
            let outcome = execute_unlearn(&mut state, &requests)?;
            row.push(ms(outcome.timing.total).into());
            report.rows.push(row);
        }
        report.emit_both(&self.reports_dir())
    }

    fn ablate_partition(&self, train: &SessionDataset, test: &SessionDataset, reference: &GruModel<f32>) -> Result<()> {
        let mut cols = vec!["partition".to_string(), "aggregation".to_string()];
        cols.extend(self.ranking_columns());
        let mut report = Report { name: "ablate_partition".into(), columns: cols, rows: Vec::new() };
        for method in [PartitionMethod::Similarity, PartitionMethod::Random] {
            let cfg = SruConfig { method, ..self.sru_config() };
            let state = self.build_from(train, reference, &cfg)?;
            let mut row = vec![Cell::from(method.as_str()), "attention".into()];
            row.extend(self.ranking_cells(&state.model, test)?);
            report.rows.push(row);
        }
        let cfg = self.sru_config();
        let sisa = sisa_baseline::<f32>(train, None, cfg.partition.k, &cfg.backbone, cfg.partition.seed)?;
        let mut row = vec![Cell::from("random"), "mean".into()];
        row.extend(self.ranking_cells(&sisa, test)?);
        report.rows.push(row);
        report.emit_both(&self.reports_dir())
    }

    fn ablate_deletion(&self, train: &SessionDataset, reference: &GruModel<f32>) -> Result<()> {
        let state = self.build_from(train, reference, &self.sru_config())?;
        let mut cols = vec!["strategy".to_string(), "n".to_string()];
        cols.extend(self.cfg.hit_ks.iter().map(|k| format!("hit@{k}")));
        cols.extend(["audited".to_string(), "skipped".to_string()]);
        let mut report = Report { name: "ablate_deletion".into(), columns: cols, rows: Vec::new() };
        let u = &self.cfg.unlearn;
        let all: Vec<usize> = (0..state.shards.len()).collect();
        let mut rng = RngStream::new(self.cfg.request_seed(), "harness/ablate-deletion");
        let base = sample_requests(&state, &all, u.requests, u.min_position, Strategy::Ced, 0, &mut rng);
        for strategy in Strategy::ALL {
            for &n in &self.cfg.ablate_deletion {
                let requests: Vec<UnlearnRequest> = base
                    .iter()
                    .map(|r| UnlearnRequest { strategy, n_extra: n, ..r.clone() })
                    .collect();
                let mut s = state.clone();
                let outcome = execute_unlearn(&mut s, &requests)?;
                let cases: Vec<AuditCase> = outcome.results.iter().map(|r| r.audit_case(u.audit_context)).collect();
                let hit = hit_effectiveness(&s.model, &cases, &self.cfg.hit_ks)?;
                let mut row = vec![Cell::from(strategy.as_str()), n.into()];
                row.extend(hit.hit.values().map(|&v| Cell::from(v)));
                row.extend([hit.audited_requests.into(), hit.skipped_empty_prefix.into()]);
                report.rows.push(row);
            }
        }
        report.emit_both(&self.reports_dir())
    }
}

fn flat_lists(name: &str, lists: &[Vec<ItemId>]) -> Result<[NamedTensor; 2]> {
    let mut offsets = vec![0i64];
    let mut flat = Vec::new();
    for l in lists {
        flat.extend_from_slice(l);
        offsets.push(flat.len() as i64);
    }
    Ok([
        NamedTensor::new(format!("{name}.offsets"), vec![offsets.len()], TensorData::I64(offsets))?,
        NamedTensor::new(format!("{name}.items"), vec![flat.len()], TensorData::U32(flat))?,
    ])
}

fn read_lists(ck: &Checkpoint, name: &str) -> Result<Vec<Vec<ItemId>>> {
    let (TensorData::I64(offsets), TensorData::U32(flat)) =
        (&ck.tensor(&format!("{name}.offsets"))?.data, &ck.tensor(&format!("{name}.items"))?.data)
    else {
        return Err(SruError::contract(format!("{name} lists have the wrong precision")));
    };
    offsets
        .windows(2)
        .map(|w| {
            let (a, b) = (w[0] as usize, w[1] as usize);
            flat.get(a..b).map(<[ItemId]>::to_vec).ok_or_else(|| SruError::contract(format!("{name} offsets out of range")))
        })
        .collect()
}

/// Audit inputs of each executed request.
fn deletions_checkpoint(results: &[DeletionResult]) -> Result<Checkpoint> {
    let mut ck = Checkpoint::default();
    ck.set_meta("kind", "deletions");
    let ids: Vec<String> = results.iter().map(|r| r.session_id.clone()).collect();
    if ids.iter().any(|s| s.contains('\n')) {
        return Err(SruError::contract("session ids may not contain newlines"));
    }
    ck.set_meta("session_ids", ids.join("\n"));
    let targets: Vec<u32> = results.iter().map(|r| r.target_item).collect();
    ck.push(NamedTensor::new("target_item", vec![targets.len()], TensorData::U32(targets))?);
    let prefixes: Vec<Vec<ItemId>> = results.iter().map(|r| r.surviving_prefix.clone()).collect();
    let sessions: Vec<Vec<ItemId>> = results.iter().map(|r| r.modified_session.items.clone()).collect();
    for t in flat_lists("prefix", &prefixes)? {
        ck.push(t);
    }
    for t in flat_lists("session", &sessions)? {
        ck.push(t);
    }
    Ok(ck)
}

fn audit_cases_from_checkpoint(ck: &Checkpoint, whole_session: bool) -> Result<Vec<AuditCase>> {
    let ids: Vec<&str> = match ck.meta("session_ids")? {
        "" => Vec::new(),
        s => s.split('\n').collect(),
    };
    let TensorData::U32(targets) = &ck.tensor("target_item")?.data else {
        return Err(SruError::contract("target_item must be u32"));
    };
    let contexts = read_lists(ck, if whole_session { "session" } else { "prefix" })?;
    if targets.len() != ids.len() || contexts.len() != ids.len() {
        return Err(SruError::contract("deletion record lengths disagree"));
    }
    Ok(ids
        .into_iter()
        .zip(targets)
        .zip(contexts)
        .map(|((id, &target_item), context)| AuditCase { session_id: id.to_string(), target_item, context })
        .collect())
}

/// Runs every training stage and `eval` in order.
pub fn run_all(p: &Pipeline, parallel: bool) -> Result<()> {
    let start = Instant::now();
    p.preprocess()?;
    p.pretrain()?;
    p.partition()?;
    p.train_shards(parallel)?;
    p.train_agg()?;
    p.eval()?;
    log::info!("pipeline finished in {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
