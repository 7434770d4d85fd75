use std::time::{Duration, Instant};

use crate::backbone::train_backbone;
use crate::error::Result;
use crate::framework::SruState;
use crate::numerics::Real;
use crate::unlearning::{execute_unlearn, UnlearnRequest};

/// Wall-clock time of each unlearning phase.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TimingReport {
    pub deletion: Duration,
    pub sub_model_retrain: Duration,
    pub centroid_refresh: Duration,
    pub aggregation_retrain: Duration,
    pub total: Duration,
    /// Full retraining of a single backbone on the post-deletion data.
    pub full_retrain_reference: Option<Duration>,
    pub retrained_shards: Vec<usize>,
}

impl TimingReport {
    pub fn phase_sum(&self) -> Duration {
        self.deletion + self.sub_model_retrain + self.centroid_refresh + self.aggregation_retrain
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkReport {
    /// Training one backbone from scratch on all post-deletion sessions.
    pub retrain: Duration,
    pub sru: TimingReport,
    /// `retrain / sru.total`.
    pub ratio: f64,
}

/// Times a full retrain against partial retraining for the same requests.
///
/// `state` is advanced by the unlearning run; the retrain arm trains on the
/// resulting training set with the reference config.
pub fn benchmark_unlearn<T: Real>(
    state: &mut SruState<T>,
    requests: &[UnlearnRequest],
) -> Result<BenchmarkReport> {
    let outcome = execute_unlearn(state, requests)?;
    let train = state.train_set();
    let start = Instant::now();
    let _full = train_backbone::<T>(&train, &state.config.reference_config())?;
    let retrain = start.elapsed();
    let mut sru = outcome.timing;
    sru.full_retrain_reference = Some(retrain);
    let ratio = retrain.as_secs_f64() / sru.total.as_secs_f64().max(1e-9);
    Ok(BenchmarkReport { retrain, sru, ratio })
}
