//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Criterion numbers given as arguments restrict the run, e.g.
//! `cargo test --test acceptance -- 2 7`.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use sru::aggregation::{
    attention_backward, attention_scores, fuse, fuse_backward, predict_backward, predict_cached,
    project, project_backward, AggregationConfig, AggregationModel, AggregationShape, AttentionGrads,
    AttentionParams, OutputGrads, OutputParams, ShardCentroids,
};
use sru::backbone::{gru_cell, gru_cell_backward, train_backbone, BackboneConfig, GruModel};
use sru::corpus::{drop_unseen_items, generate_synthetic, split, ItemId, SessionDataset, Split, SplitRatios, SyntheticConfig};
use sru::evaluation::{
    benchmark_unlearn, evaluate, hit_effectiveness, metrics_at_k, rank_of_target, sisa_baseline, AuditCase,
    Recommender,
};
use sru::framework::{build_sru, fit_aggregation, SruConfig};
use sru::harness::persist::{aggregation_checkpoint, aggregation_from_checkpoint, gru_checkpoint, gru_from_checkpoint};
use sru::harness::Checkpoint;
use sru::numerics::{finite_difference_check, ParamStore, RngStream, Tensor};
use sru::partition::{balanced_kmeans, cluster_purity, embed_all, PartitionConfig};
use sru::unlearning::{execute_unlearn, sample_requests, AuditContext, Strategy, UnlearnRequest};

type Outcome = Result<String, String>;

const FD_EPS: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;
/// Denominator floor of the relative error; differences below what central
/// differences resolve at `FD_EPS` are not counted.
const FD_FLOOR: f64 = 1e-6;
const METRIC_TOL: f64 = 1e-9;
const SEEDS: [u64; 3] = [0, 1, 2];

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn ok<T>(r: sru::Result<T>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

// ---------------------------------------------------------------------------
// Shared workload

struct Workload {
    train: SessionDataset,
    test: SessionDataset,
    cfg: SruConfig,
}

/// 2,000 sessions over 200 items in 4 clusters, K = 8 shards.
fn workload(seed: u64, backbone_epochs: usize) -> Result<Workload, String> {
    let data = ok(generate_synthetic(&SyntheticConfig {
        num_sessions: 2000,
        vocab_size: 200,
        num_clusters: 4,
        branching: 3,
        seed: RngStream::derive_seed(seed, "synthetic"),
        ..Default::default()
    }))?;
    let (train, _, test) = ok(split(&data, SplitRatios(8, 1, 1), RngStream::derive_seed(seed, "split")))?;
    let test = drop_unseen_items(&test, &train);
    let cfg = SruConfig {
        backbone: BackboneConfig {
            dim: 32,
            max_len: 10,
            epochs: backbone_epochs,
            batch_size: 64,
            lr: 5e-3,
            patience: 0,
            ..Default::default()
        },
        partition: PartitionConfig { k: 8, ..Default::default() },
        aggregation: AggregationConfig {
            attention_dim: 16,
            epochs: 3,
            batch_size: 64,
            lr: 1e-2,
            ..Default::default()
        },
        ..Default::default()
    }
    .with_seed(seed);
    Ok(Workload { train, test, cfg })
}

// ---------------------------------------------------------------------------
// 1. Exact unlearning

fn exact_unlearning() -> Outcome {
    let w = workload(11, 5)?;
    let mut state = ok(build_sru::<f32>(&w.train, &w.cfg, true))?;
    let mut rng = RngStream::new(11, "acceptance/requests");
    let (mut retrains, mut unchanged, mut requests_total) = (0, 0, 0);
    for batch in 0..20 {
        let k = state.shards.len();
        let touched: Vec<usize> = {
            let n = 1 + rng.below(3);
            let mut s = rng.sample_distinct(k, n);
            s.sort_unstable();
            s
        };
        let count = 1 + rng.below(6);
        let mut requests = sample_requests(&state, &touched, count, 1, Strategy::Ced, 0, &mut rng);
        for r in &mut requests {
            r.strategy = Strategy::ALL[rng.below(3)];
            r.n_extra = rng.below(4);
        }
        requests_total += requests.len();
        let expected: BTreeSet<usize> =
            requests.iter().filter_map(|r| state.locate(&r.session_id).map(|(s, _)| s)).collect();
        let before = state.model.sub_models.clone();
        let outcome = ok(execute_unlearn(&mut state, &requests))?;
        let retrained: BTreeSet<usize> = outcome.timing.retrained_shards.iter().copied().collect();
        ensure(retrained == expected, || {
            format!("batch {batch}: retrained {retrained:?}, requests live in {expected:?}")
        })?;
        for i in 0..k {
            if retrained.contains(&i) {
                let fresh = ok(train_backbone::<f32>(&state.shards[i], &state.config.shard_config(i)))?;
                ensure(fresh.params().bitwise_eq(state.model.sub_models[i].params()), || {
                    format!("batch {batch}: shard {i} differs from fresh training")
                })?;
                retrains += 1;
            } else {
                ensure(before[i].params().bitwise_eq(state.model.sub_models[i].params()), || {
                    format!("batch {batch}: untouched shard {i} changed")
                })?;
                unchanged += 1;
            }
        }
        let fresh = ok(fit_aggregation(&state.model.sub_models, &state.shards, &state.assignment, &state.config.aggregation))?;
        ensure(fresh.model.params().bitwise_eq(state.model.aggregation.params()), || {
            format!("batch {batch}: aggregation differs from fresh training")
        })?;
    }
    Ok(format!(
        "20 batches, {requests_total} requests: {retrains} retrained sub-models bitwise equal to fresh training, {unchanged} untouched sub-models unchanged"
    ))
}

// ---------------------------------------------------------------------------
// 2. Gradient fidelity

/// Central-difference check of `analytic` against `f` over flat input blocks.
fn fd_blocks(blocks: &[Vec<f64>], analytic: &[Vec<f64>], f: impl Fn(&[Vec<f64>]) -> f64) -> f64 {
    let mut probe = blocks.to_vec();
    let mut worst = 0.0f64;
    for (b, grads) in analytic.iter().enumerate() {
        for i in 0..blocks[b].len() {
            let base = blocks[b][i];
            probe[b][i] = base + FD_EPS;
            let plus = f(&probe);
            probe[b][i] = base - FD_EPS;
            let minus = f(&probe);
            probe[b][i] = base;
            let numeric = (plus - minus) / (2.0 * FD_EPS);
            let a = grads[i];
            worst = worst.max((a - numeric).abs() / (a.abs() + numeric.abs()).max(FD_FLOOR));
        }
    }
    worst
}

fn uniform_vec(rng: &mut RngStream, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.uniform(-scale, scale)).collect()
}

fn weighted(out: &[f64], r: &[f64]) -> f64 {
    out.iter().zip(r).map(|(a, b)| a * b).sum()
}

fn mat(rows: usize, cols: usize, data: &[f64]) -> Tensor<f64> {
    Tensor::matrix(rows, cols, data.to_vec()).unwrap()
}

fn check_gru(seed: u64) -> f64 {
    let mut rng = RngStream::new(seed, "acceptance/gradcheck/gru");
    let d = 1 + rng.below(8);
    let mut model = GruModel::<f64>::new(3 + rng.below(5), d, 10, &mut rng);
    // non-zero biases
    let ids: Vec<_> = model.params().ids().collect();
    for id in ids {
        if model.params().value(id).shape().len() == 1 {
            let v = uniform_vec(&mut rng, model.params().value(id).len(), 0.5);
            model.params_mut().set_value(id, Tensor::vector(v)).unwrap();
        }
    }
    let x = uniform_vec(&mut rng, d, 1.0);
    let h = uniform_vec(&mut rng, d, 1.0);
    let r = uniform_vec(&mut rng, d, 1.0);
    model.params_mut().zero_grads();
    let cache = gru_cell(&model, &x, &h).unwrap();
    let (dx, dh) = gru_cell_backward(&mut model, &cache, &r).unwrap();
    let inputs = fd_blocks(&[x.clone(), h.clone()], &[dx, dh], |b| {
        weighted(&gru_cell(&model, &b[0], &b[1]).unwrap().h, &r)
    });
    let max_len = model.max_len();
    let params = finite_difference_check(
        |p: &ParamStore<f64>| {
            let m = GruModel::from_params(p.clone(), max_len).unwrap();
            weighted(&gru_cell(&m, &x, &h).unwrap().h, &r)
        },
        model.params(),
        FD_EPS,
    )
    .unwrap();
    inputs.max(params)
}

fn check_projection(seed: u64) -> f64 {
    let mut rng = RngStream::new(seed, "acceptance/gradcheck/projection");
    let d = 1 + rng.below(8);
    let blocks = vec![
        uniform_vec(&mut rng, d, 1.0),
        uniform_vec(&mut rng, d, 1.0),
        uniform_vec(&mut rng, d * d, 1.0),
        uniform_vec(&mut rng, d, 0.5),
    ];
    let (rh, rc) = (uniform_vec(&mut rng, d, 1.0), uniform_vec(&mut rng, d, 1.0));
    let w = mat(d, d, &blocks[2]);
    let (mut dw, mut db) = (Tensor::zeros(&[d, d]), Tensor::zeros(&[d]));
    let (dh, dc) = project_backward(&blocks[0], &blocks[1], &w, &rh, &rc, &mut dw, &mut db);
    fd_blocks(&blocks, &[dh, dc, dw.into_data(), db.into_data()], |b| {
        let (hp, cp) = project(&b[0], &b[1], &mat(d, d, &b[2]), &Tensor::vector(b[3].clone())).unwrap();
        weighted(&hp, &rh) + weighted(&cp, &rc)
    })
}

fn check_attention(seed: u64) -> f64 {
    let mut rng = RngStream::new(seed, "acceptance/gradcheck/attention");
    let (k, d, f) = (1 + rng.below(3), 1 + rng.below(8), 1 + rng.below(8));
    let mut blocks: Vec<Vec<f64>> = (0..2 * k).map(|_| uniform_vec(&mut rng, d, 1.0)).collect();
    blocks.push(uniform_vec(&mut rng, d * f, 1.0));
    blocks.push(uniform_vec(&mut rng, f, 0.5));
    blocks.push(uniform_vec(&mut rng, f, 1.0));
    let r = uniform_vec(&mut rng, k, 1.0);
    let unpack = |b: &[Vec<f64>]| -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Tensor<f64>, Tensor<f64>, Tensor<f64>) {
        (
            b[..k].to_vec(),
            b[k..2 * k].to_vec(),
            mat(d, f, &b[2 * k]),
            Tensor::vector(b[2 * k + 1].clone()),
            Tensor::vector(b[2 * k + 2].clone()),
        )
    };
    let (hp, cp, w, bias, g) = unpack(&blocks);
    let p = AttentionParams { w: &w, b: &bias, g: &g };
    let a = attention_scores(&hp, &cp, &p).unwrap();
    let (mut dw, mut db, mut dg) = (Tensor::zeros(&[d, f]), Tensor::zeros(&[f]), Tensor::zeros(&[f]));
    let (dhp, dcp) = attention_backward(&hp, &cp, &p, &a, &r, &mut AttentionGrads { w: &mut dw, b: &mut db, g: &mut dg });
    let mut analytic: Vec<Vec<f64>> = dhp.into_iter().chain(dcp).collect();
    analytic.extend([dw.into_data(), db.into_data(), dg.into_data()]);
    fd_blocks(&blocks, &analytic, |b| {
        let (hp, cp, w, bias, g) = unpack(b);
        weighted(&attention_scores(&hp, &cp, &AttentionParams { w: &w, b: &bias, g: &g }).unwrap(), &r)
    })
}

fn check_fusion(seed: u64) -> f64 {
    let mut rng = RngStream::new(seed, "acceptance/gradcheck/fusion");
    let (k, d) = (1 + rng.below(3), 1 + rng.below(8));
    let mut blocks = vec![uniform_vec(&mut rng, k, 1.0)];
    blocks.extend((0..k).map(|_| uniform_vec(&mut rng, d, 1.0)));
    let r = uniform_vec(&mut rng, d, 1.0);
    let (da, dhp) = fuse_backward(&blocks[0], &blocks[1..], &r);
    let mut analytic = vec![da];
    analytic.extend(dhp);
    fd_blocks(&blocks, &analytic, |b| weighted(&fuse(&b[0], &b[1..]).unwrap(), &r))
}

fn check_output(seed: u64) -> f64 {
    let mut rng = RngStream::new(seed, "acceptance/gradcheck/output");
    let (d, ff, v) = (1 + rng.below(8), 1 + rng.below(8), 2 + rng.below(6));
    let blocks = vec![
        uniform_vec(&mut rng, d, 1.0),
        uniform_vec(&mut rng, d * ff, 1.0),
        uniform_vec(&mut rng, ff, 0.5),
        uniform_vec(&mut rng, ff * v, 1.0),
        uniform_vec(&mut rng, v, 0.5),
    ];
    let r = uniform_vec(&mut rng, v, 1.0);
    let (w1, b1, w2, b2) = (mat(d, ff, &blocks[1]), Tensor::vector(blocks[2].clone()), mat(ff, v, &blocks[3]), Tensor::vector(blocks[4].clone()));
    let p = OutputParams { w1: &w1, b1: &b1, w2: &w2, b2: &b2 };
    let cache = predict_cached(&blocks[0], &p).unwrap();
    let (mut g1, mut gb1, mut g2, mut gb2) = (Tensor::zeros(&[d, ff]), Tensor::zeros(&[ff]), Tensor::zeros(&[ff, v]), Tensor::zeros(&[v]));
    let dhf = predict_backward(&blocks[0], &cache, &p, &r, &mut OutputGrads { w1: &mut g1, b1: &mut gb1, w2: &mut g2, b2: &mut gb2 });
    fd_blocks(&blocks, &[dhf, g1.into_data(), gb1.into_data(), g2.into_data(), gb2.into_data()], |b| {
        let (w1, b1, w2, b2) = (mat(d, ff, &b[1]), Tensor::vector(b[2].clone()), mat(ff, v, &b[3]), Tensor::vector(b[4].clone()));
        weighted(&predict_cached(&b[0], &OutputParams { w1: &w1, b1: &b1, w2: &w2, b2: &b2 }).unwrap().logits, &r)
    })
}

fn gradient_fidelity() -> Outcome {
    let checks: [(&str, fn(u64) -> f64); 5] = [
        ("gru cell", check_gru),
        ("projection", check_projection),
        ("attention", check_attention),
        ("fusion", check_fusion),
        ("output", check_output),
    ];
    let mut parts = Vec::new();
    for (name, check) in checks {
        let worst = (0..12u64).map(check).fold(0.0f64, f64::max);
        ensure(worst < FD_TOL, || format!("{name}: max relative error {worst:.3e}"))?;
        parts.push(format!("{name} {worst:.1e}"));
    }
    Ok(format!("12 configs each, max relative error: {}", parts.join(", ")))
}

// ---------------------------------------------------------------------------
// 3. Partition invariants

fn partition_invariants() -> Outcome {
    let mut rng = RngStream::new(3, "acceptance/partition");
    for case in 0..100 {
        let n = 1 + rng.below(200);
        let d = 1 + rng.below(8);
        let k = 1 + rng.below(n.min(10));
        let base = n.div_ceil(k);
        let delta = if rng.below(2) == 0 { None } else { Some(base + rng.below(base + 1)) };
        let h = Tensor::matrix(n, d, uniform_vec(&mut rng, n * d, 1.0)).unwrap();
        let cfg = PartitionConfig { k, delta, seed: case, ..Default::default() };
        let a = ok(balanced_kmeans(&h, &cfg))?;
        let cap = cfg.capacity(n);
        let mut seen = vec![0usize; n];
        for (s, m) in a.members.iter().enumerate() {
            ensure(m.len() <= cap, || format!("case {case}: shard {s} holds {} > {cap}", m.len()))?;
            for &i in m {
                seen[i] += 1;
                ensure(a.shard_of[i] == s, || format!("case {case}: shard_of disagrees with members"))?;
            }
        }
        ensure(seen.iter().all(|&c| c == 1), || format!("case {case}: not a disjoint cover"))?;
        ensure(a.members.len() == k, || format!("case {case}: {} shards, want {k}", a.members.len()))?;
        let again = ok(balanced_kmeans(&h, &cfg))?;
        ensure(again == a, || format!("case {case}: not deterministic"))?;
    }

    let data = ok(generate_synthetic(&SyntheticConfig {
        num_sessions: 600,
        vocab_size: 60,
        num_clusters: 2,
        noise_rate: 0.0,
        seed: 3,
        ..Default::default()
    }))?;
    let data = data.derive(data.sessions.clone(), Split::Train);
    let reference = ok(train_backbone::<f32>(
        &data,
        &BackboneConfig { dim: 16, epochs: 10, batch_size: 64, lr: 5e-3, patience: 0, seed: 3, ..Default::default() },
    ))?;
    let h = ok(embed_all(&reference, &data))?;
    let a = ok(balanced_kmeans(&h, &PartitionConfig { k: 2, seed: 3, ..Default::default() }))?;
    let labels: Vec<u32> = data.sessions.iter().map(|s| s.label.expect("synthetic sessions are labelled")).collect();
    let purity = cluster_purity(&a, &labels);
    ensure(purity >= 0.9, || format!("purity {purity:.4} < 0.9"))?;
    Ok(format!("100 instances disjoint, covering, capacity-bounded, deterministic; 2-cluster purity {purity:.4}"))
}

// ---------------------------------------------------------------------------
// 4. Partition benefit

fn partition_benefit() -> Outcome {
    let (mut sru_sum, mut sisa_sum) = (0.0, 0.0);
    let mut per_seed = Vec::new();
    for seed in SEEDS {
        let w = workload(seed, 20)?;
        let state = ok(build_sru::<f32>(&w.train, &w.cfg, true))?;
        let sru = ok(evaluate(&state.model, &w.test, &[20]))?.recall_at(20).unwrap();
        let sisa_model = ok(sisa_baseline::<f32>(&w.train, None, w.cfg.partition.k, &w.cfg.backbone, w.cfg.partition.seed))?;
        let sisa = ok(evaluate(&sisa_model, &w.test, &[20]))?.recall_at(20).unwrap();
        per_seed.push(format!("{sru:.4}/{sisa:.4}"));
        sru_sum += sru;
        sisa_sum += sisa;
    }
    let (sru, sisa) = (sru_sum / 3.0, sisa_sum / 3.0);
    ensure(sru > sisa, || format!("mean Recall@20 SRU {sru:.4} <= SISA {sisa:.4}"))?;
    Ok(format!("mean Recall@20 SRU {sru:.4} > SISA {sisa:.4} (per seed {})", per_seed.join(", ")))
}

// ---------------------------------------------------------------------------
// 5. Deletion monotonicity

fn deletion_monotonicity() -> Outcome {
    const KS: [usize; 4] = [1, 5, 10, 20];
    let mut means = Vec::new();
    for strategy in [Strategy::Ced, Strategy::Ned] {
        means.push((strategy, [0.0f64; 2], usize::MAX));
    }
    for seed in SEEDS {
        let w = workload(seed, 20)?;
        let state = ok(build_sru::<f32>(&w.train, &w.cfg, true))?;
        let all: Vec<usize> = (0..state.shards.len()).collect();
        let mut rng = RngStream::new(seed, "acceptance/audit");
        // six or more earlier items keep the prefix non-empty after five extra deletions
        let base = sample_requests(&state, &all, 250, 6, Strategy::Ced, 0, &mut rng);
        for (strategy, sums, min_audited) in &mut means {
            for (slot, n) in [0usize, 5].into_iter().enumerate() {
                let requests: Vec<UnlearnRequest> =
                    base.iter().map(|r| UnlearnRequest { strategy: *strategy, n_extra: n, ..r.clone() }).collect();
                let mut s = state.clone();
                let outcome = ok(execute_unlearn(&mut s, &requests))?;
                let cases: Vec<AuditCase> = outcome.results.iter().map(|r| r.audit_case(AuditContext::Prefix)).collect();
                let report = ok(hit_effectiveness(&s.model, &cases, &KS))?;
                let hits: Vec<f64> = KS.iter().map(|&k| report.hit_at(k).unwrap()).collect();
                ensure(hits.windows(2).all(|p| p[0] <= p[1]), || {
                    format!("{} N={n} seed {seed}: HIT@K not monotone in K: {hits:?}", strategy.as_str())
                })?;
                sums[slot] += report.hit_at(10).unwrap() / SEEDS.len() as f64;
                *min_audited = (*min_audited).min(report.audited_requests);
            }
        }
    }
    let mut parts = Vec::new();
    for (strategy, [n0, n5], audited) in means {
        ensure(audited >= 200, || format!("{}: only {audited} audited requests", strategy.as_str()))?;
        ensure(n5 <= n0, || format!("{}: HIT@10 N=5 {n5:.4} > N=0 {n0:.4}", strategy.as_str()))?;
        parts.push(format!("{} HIT@10 N=0 {n0:.4} >= N=5 {n5:.4} (>= {audited} audited)", strategy.as_str()));
    }
    Ok(format!("{}; HIT@K monotone in K", parts.join("; ")))
}

// ---------------------------------------------------------------------------
// 6. Efficiency

fn efficiency() -> Outcome {
    let w = workload(6, 20)?;
    let state = ok(build_sru::<f32>(&w.train, &w.cfg, true))?;
    let mut rng = RngStream::new(6, "acceptance/bench");
    let requests = sample_requests(&state, &[0], 10, 1, Strategy::Ced, 2, &mut rng);
    ensure(!requests.is_empty(), || "no requests in shard 0".into())?;
    let mut ratios = Vec::new();
    let mut detail = Vec::new();
    for _ in 0..3 {
        let mut s = state.clone();
        let b = ok(benchmark_unlearn(&mut s, &requests))?;
        ensure(b.sru.retrained_shards == [0], || format!("retrained {:?}", b.sru.retrained_shards))?;
        detail.push(format!("{:.2}s/{:.2}s", b.retrain.as_secs_f64(), b.sru.total.as_secs_f64()));
        ratios.push(b.ratio);
    }
    ratios.sort_by(f64::total_cmp);
    let median = ratios[1];
    ensure(median >= 2.0, || format!("median ratio {median:.2} < 2 ({})", detail.join(", ")))?;
    Ok(format!("median Retrain/SRU ratio {median:.2} over 3 runs (retrain/unlearn {})", detail.join(", ")))
}

// ---------------------------------------------------------------------------
// 7. Metric oracles

struct TableModel {
    n: usize,
    salt: u64,
}

impl Recommender for TableModel {
    fn num_items(&self) -> usize {
        self.n
    }

    fn logits(&self, prefix: &[ItemId]) -> sru::Result<Vec<f64>> {
        let mut rng = RngStream::new(self.salt, &format!("{prefix:?}"));
        Ok((0..self.n).map(|_| rng.below(6) as f64).collect())
    }
}

fn oracle_rank(logits: &[f64], target: ItemId) -> usize {
    let t = target as usize - 1;
    let mut order: Vec<usize> = (0..logits.len()).collect();
    // descending score, target first among ties
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then((b == t).cmp(&(a == t))));
    order.iter().position(|&i| i == t).unwrap() + 1
}

fn metric_oracles() -> Outcome {
    let mut rng = RngStream::new(7, "acceptance/metrics");
    for case in 0..1000u64 {
        let n = 1 + rng.below(40);
        let levels = 1 + rng.below(8);
        let logits: Vec<f64> = (0..n).map(|_| rng.below(levels) as f64).collect();
        let target = 1 + rng.below(n) as ItemId;
        let rank = ok(rank_of_target(&logits, target))?;
        let want = oracle_rank(&logits, target);
        ensure(rank == want, || format!("case {case}: rank {rank}, oracle {want}"))?;

        let k = 1 + rng.below(n + 2);
        let ranks: Vec<usize> = (0..1 + rng.below(30)).map(|_| 1 + rng.below(n)).collect();
        let (mut recall, mut ndcg) = (0.0, 0.0);
        for &r in &ranks {
            let (a, b) = metrics_at_k(r, k);
            recall += a;
            ndcg += b;
        }
        let m = ranks.len() as f64;
        let want_recall = ranks.iter().filter(|&&r| r <= k).count() as f64 / m;
        let want_ndcg = ranks.iter().filter(|&&r| r <= k).map(|&r| 1.0 / (r as f64 + 1.0).log2()).sum::<f64>() / m;
        ensure((recall / m - want_recall).abs() <= METRIC_TOL && (ndcg / m - want_ndcg).abs() <= METRIC_TOL, || {
            format!("case {case}: metrics disagree with the oracle")
        })?;

        let model = TableModel { n, salt: case };
        let cases: Vec<AuditCase> = (0..1 + rng.below(20))
            .map(|i| AuditCase {
                session_id: format!("s{i}"),
                target_item: 1 + rng.below(n) as ItemId,
                context: (0..rng.below(4)).map(|_| 1 + rng.below(n) as ItemId).collect(),
            })
            .collect();
        let audited: Vec<&AuditCase> = cases.iter().filter(|c| !c.context.is_empty()).collect();
        let ks = [1, 5, 10, 20];
        match hit_effectiveness(&model, &cases, &ks) {
            Err(_) => ensure(audited.is_empty(), || format!("case {case}: hit_effectiveness failed"))?,
            Ok(report) => {
                ensure(report.audited_requests == audited.len(), || format!("case {case}: audited count"))?;
                ensure(report.skipped_empty_prefix == cases.len() - audited.len(), || format!("case {case}: skipped count"))?;
                for k in ks {
                    let hits = audited
                        .iter()
                        .filter(|c| oracle_rank(&model.logits(&c.context).unwrap(), c.target_item) <= k)
                        .count();
                    let want = hits as f64 / audited.len() as f64;
                    let got = report.hit_at(k).unwrap();
                    ensure((got - want).abs() <= METRIC_TOL, || format!("case {case}: HIT@{k} {got} vs oracle {want}"))?;
                }
            }
        }
    }
    Ok("1000 instances: ranks exact, Recall/NDCG and HIT@K within 1e-9".into())
}

// ---------------------------------------------------------------------------
// 8. Persistence

fn persistence() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = RngStream::new(8, "acceptance/persistence");
    let mut corrupt_rejections = 0;
    for case in 0..50 {
        let items = 2 + rng.below(50);
        let d = 1 + rng.below(16);
        let gru = GruModel::<f32>::new(items, d, 2 + rng.below(20), &mut rng);
        let path = dir.path().join(format!("gru_{case}.ckpt"));
        ok(gru_checkpoint(&gru).save(&path))?;
        let bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
        let back = ok(gru_from_checkpoint(&ok(Checkpoint::load(&path))?))?;
        ensure(back.params().bitwise_eq(gru.params()) && back.max_len() == gru.max_len(), || {
            format!("case {case}: GRU round trip differs")
        })?;

        let k = 1 + rng.below(4);
        let shape = AggregationShape {
            shards: k,
            dim: d,
            attention_dim: 1 + rng.below(8),
            hidden_dim: 1 + rng.below(8),
            num_items: items,
        };
        let agg = AggregationModel::<f32>::new(shape, 0.01, &mut rng);
        let centroids = ShardCentroids {
            vectors: (0..k).map(|_| (0..d).map(|_| rng.uniform(-1.0, 1.0) as f32).collect()).collect(),
        };
        let apath = dir.path().join(format!("agg_{case}.ckpt"));
        ok(ok(aggregation_checkpoint(&agg, &centroids))?.save(&apath))?;
        let (agg_back, c_back) = ok(aggregation_from_checkpoint(&ok(Checkpoint::load(&apath))?))?;
        ensure(agg_back.params().bitwise_eq(agg.params()), || format!("case {case}: aggregation round trip differs"))?;
        ensure(
            c_back.vectors.iter().flatten().map(|x| x.to_bits()).eq(centroids.vectors.iter().flatten().map(|x| x.to_bits())),
            || format!("case {case}: centroid round trip differs"),
        )?;

        let mut flipped = bytes.clone();
        let at = rng.below(flipped.len());
        flipped[at] ^= 1 << rng.below(8);
        let cut = rng.below(bytes.len());
        for (what, damaged) in [("bit flip", flipped), ("truncation", bytes[..cut].to_vec())] {
            let bad = dir.path().join(format!("bad_{case}.ckpt"));
            std::fs::write(&bad, &damaged).map_err(|e| e.to_string())?;
            ensure(Checkpoint::load(&bad).is_err(), || format!("case {case}: {what} at {at}/{cut} accepted"))?;
            corrupt_rejections += 1;
        }
    }
    Ok(format!("50 GRU and 50 aggregation models round-trip bitwise; {corrupt_rejections} corrupted files rejected"))
}

// ---------------------------------------------------------------------------

fn main() {
    let only: BTreeSet<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(usize, &str, fn() -> Outcome, Option<Duration>); 8] = [
        (1, "exact unlearning", exact_unlearning, Some(Duration::from_secs(600))),
        (2, "gradient fidelity", gradient_fidelity, None),
        (3, "partition invariants", partition_invariants, None),
        (4, "partition benefit", partition_benefit, Some(Duration::from_secs(1800))),
        (5, "deletion monotonicity", deletion_monotonicity, None),
        (6, "efficiency ratio", efficiency, None),
        (7, "metric oracles", metric_oracles, None),
        (8, "persistence", persistence, None),
    ];
    let mut failed = 0;
    for (id, name, run, limit) in criteria {
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let mut result = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|_| Err("panicked".into()));
        let elapsed = start.elapsed();
        if let (Ok(_), Some(limit)) = (&result, limit) {
            if elapsed > limit {
                result = Err(format!("took {:.0}s, limit {:.0}s", elapsed.as_secs_f64(), limit.as_secs_f64()));
            }
        }
        match result {
            Ok(detail) => println!("PASS  criterion {id} ({name}): {detail} [{:.1}s]", elapsed.as_secs_f64()),
            Err(detail) => {
                failed += 1;
                println!("FAIL  criterion {id} ({name}): {detail} [{:.1}s]", elapsed.as_secs_f64());
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
