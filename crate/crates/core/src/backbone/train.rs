use crate::backbone::GruModel;
use crate::corpus::{SessionDataset, Split};
use crate::error::{Result, SruError};
use crate::evaluation::evaluate;
use crate::numerics::{adam_step, AdamConfig, AdamState, Real, RngStream};

/// Hyperparameters of backbone training.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    /// Embedding and hidden dimension.
    pub dim: usize,
    pub max_len: usize,
    pub epochs: usize,
    /// Sessions per optimizer step.
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Epochs without validation NDCG@20 improvement before stopping.
    /// Only used when a validation set is supplied; 0 disables.
    pub patience: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            dim: 32,
            max_len: 10,
            epochs: 20,
            batch_size: 256,
            lr: 1e-3,
            seed: 0,
            patience: 3,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.batch_size == 0 || self.max_len < 2 {
            return Err(SruError::contract(
                "backbone needs dim >= 1, batch_size >= 1, max_len >= 2",
            ));
        }
        if !(self.lr > 0.0) {
            return Err(SruError::contract("backbone lr must be positive"));
        }
        Ok(())
    }

    /// Same hyperparameters with a different seed.
    pub fn with_seed(&self, seed: u64) -> Self {
        BackboneConfig {
            seed,
            ..self.clone()
        }
    }
}

/// Outcome of a training run.
#[derive(Clone, Debug)]
pub struct BackboneFit<T> {
    pub model: GruModel<T>,
    /// Mean per-position training loss of each completed epoch.
    pub epoch_losses: Vec<f64>,
    /// Validation NDCG@20 per epoch, when a validation set was supplied.
    pub validation_ndcg: Vec<f64>,
    /// Epoch (0-based) whose parameters were returned.
    pub best_epoch: usize,
}

/// Trains a GRU on every (prefix, next item) pair of `dataset` with
/// full-softmax cross-entropy.
pub fn train_backbone<T: Real>(dataset: &SessionDataset, cfg: &BackboneConfig) -> Result<GruModel<T>> {
    fit_backbone(dataset, None, cfg).map(|f| f.model)
}

/// [`train_backbone`] with optional early stopping on validation NDCG@20.
///
/// Sessions are visited in an order reshuffled every epoch from the
/// `(seed, "backbone/shuffle")` stream; gradients are summed over the
/// positions of each session and averaged over the sessions of a batch.
pub fn fit_backbone<T: Real>(
    dataset: &SessionDataset,
    validation: Option<&SessionDataset>,
    cfg: &BackboneConfig,
) -> Result<BackboneFit<T>> {
    cfg.validate()?;
    if dataset.split != Split::Train {
        return Err(SruError::contract(format!(
            "backbone must be trained on a train split, got {}",
            dataset.split.as_str()
        )));
    }
    if dataset.num_pairs() == 0 {
        return Err(SruError::contract(
            "backbone training set has no (prefix, target) pairs",
        ));
    }
    let mut init = RngStream::new(cfg.seed, "backbone/init");
    let mut model = GruModel::<T>::new(dataset.num_items(), cfg.dim, cfg.max_len, &mut init);
    let mut adam = AdamState::new(model.params());
    let adam_cfg = AdamConfig::new(cfg.lr);
    let mut shuffle = RngStream::new(cfg.seed, "backbone/shuffle");
    let mut order: Vec<usize> = (0..dataset.len()).collect();

    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut validation_ndcg = Vec::new();
    let mut best: Option<(f64, usize, GruModel<T>)> = None;

    for epoch in 0..cfg.epochs {
        shuffle.shuffle(&mut order);
        let mut total = 0.0f64;
        let mut pairs = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            model.params_mut().zero_grads();
            let mut counted = 0usize;
            for &idx in batch {
                let items = &dataset.sessions[idx].items;
                let items = &items[items.len().saturating_sub(cfg.max_len)..];
                if items.len() < 2 {
                    continue;
                }
                total += model.sequence_loss_and_grad(items)?.as_f64();
                pairs += items.len() - 1;
                counted += 1;
            }
            if counted == 0 {
                continue;
            }
            model.params_mut().scale_grads(T::one() / T::of(counted as f64));
            adam_step(model.params_mut(), &mut adam, &adam_cfg)?;
        }
        epoch_losses.push(total / pairs as f64);

        if let (Some(val), true) = (validation, cfg.patience > 0) {
            let ndcg = evaluate(&model, val, &[20])?.ndcg_at(20).unwrap_or(0.0);
            validation_ndcg.push(ndcg);
            let improved = best.as_ref().map_or(true, |(b, _, _)| ndcg > *b);
            if improved {
                best = Some((ndcg, epoch, model.clone()));
            } else if epoch - best.as_ref().map_or(0, |b| b.1) >= cfg.patience {
                break;
            }
        }
    }

    let (model, best_epoch) = match best {
        Some((_, epoch, m)) => (m, epoch),
        None => (model, epoch_losses.len().saturating_sub(1)),
    };
    Ok(BackboneFit {
        model,
        epoch_losses,
        validation_ndcg,
        best_epoch,
    })
}
