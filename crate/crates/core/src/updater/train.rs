use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::orientation::FlatResidual;
use crate::patching::{Modality, PatchVolume};

use super::{adam_step, init_params, volume_input, AdamState, Regressor, RegressorConfig, RegressorParams};

/// Base learning rate for a pretrained ResNet-sized backbone.
pub const FULL_SCALE_BASE_LR: f64 = 1e-5;
/// Base learning rate for the small from-scratch regressor.
pub const DESK_BASE_LR: f64 = 1e-3;
/// Relative validation improvement below which an epoch counts as a plateau.
pub const PLATEAU_THRESHOLD: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub base_lr: f64,
    pub lr_decay_factor: f64,
    pub plateau_patience: usize,
    pub max_epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub shuffle: bool,
    pub modality: Modality,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            base_lr: FULL_SCALE_BASE_LR,
            lr_decay_factor: 10.0,
            plateau_patience: 2,
            max_epochs: 20,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            shuffle: true,
            modality: Modality::Fused,
        }
    }
}

impl TrainingConfig {
    /// Defaults with learning rate [`DESK_BASE_LR`], for a small network
    /// trained from scratch.
    pub fn desk_scale() -> Self {
        Self {
            base_lr: DESK_BASE_LR,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Invalid("batch_size must be >= 1".into()));
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return Err(Error::Invalid(format!("base_lr must be > 0, got {}", self.base_lr)));
        }
        if !(self.lr_decay_factor.is_finite() && self.lr_decay_factor >= 1.0) {
            return Err(Error::Invalid("lr_decay_factor must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.epsilon <= 0.0 {
            return Err(Error::Invalid("invalid Adam hyper-parameters".into()));
        }
        Ok(())
    }
}

/// One supervised pair: patch volume and its residual orientation target.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub volume: PatchVolume,
    pub target: FlatResidual,
}

impl AsRef<TrainExample> for TrainExample {
    fn as_ref(&self) -> &TrainExample {
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation loss.
    pub params: RegressorParams,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

/// Mean loss and mean gradient over `batch`. Per-sample gradients are
/// computed in parallel and summed in batch order.
pub fn batch_gradient(
    net: &Regressor,
    params: &[f64],
    batch: &[&TrainExample],
    modality: Modality,
) -> Result<(f64, Vec<f64>)> {
    let per_sample: Vec<(f64, Vec<f64>)> = batch
        .par_iter()
        .map(|ex| net.loss_and_grad(params, &volume_input(&ex.volume, modality), ex.target.as_slice()))
        .collect::<Result<_>>()?;
    let inv = 1.0 / batch.len() as f64;
    let mut grad = vec![0.0; params.len()];
    let mut total = 0.0;
    for (l, g) in &per_sample {
        total += l;
        for (acc, v) in grad.iter_mut().zip(g) {
            *acc += v;
        }
    }
    grad.iter_mut().for_each(|g| *g *= inv);
    Ok((total * inv, grad))
}

fn mean_loss<T: AsRef<TrainExample> + Sync>(
    net: &Regressor,
    params: &[f64],
    set: &[T],
    modality: Modality,
) -> Result<f64> {
    let losses: Vec<f64> = set
        .par_iter()
        .map(|ex| {
            let ex = ex.as_ref();
            let out = net.run(params, &volume_input(&ex.volume, modality))?;
            Ok(out
                .iter()
                .zip(ex.target.as_slice())
                .map(|(p, t)| (p - t) * (p - t))
                .sum::<f64>())
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / set.len() as f64)
}

/// Mini-batch Adam on the residual targets.
///
/// After `plateau_patience` consecutive epochs whose validation loss fails to
/// improve on the best so far by at least [`PLATEAU_THRESHOLD`] (relative),
/// the learning rate is divided by `lr_decay_factor`, once.
pub fn train<T: AsRef<TrainExample> + Sync>(
    train_set: &[T],
    val_set: &[T],
    reg_cfg: &RegressorConfig,
    cfg: &TrainingConfig,
) -> Result<TrainOutcome> {
    train_with_progress(train_set, val_set, reg_cfg, cfg, |_| {})
}

pub fn train_with_progress<T: AsRef<TrainExample> + Sync>(
    train_set: &[T],
    val_set: &[T],
    reg_cfg: &RegressorConfig,
    cfg: &TrainingConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Empty("training split"));
    }
    if val_set.is_empty() {
        return Err(Error::Empty("validation split"));
    }
    let net = Regressor::new(reg_cfg)?;
    let mut params = init_params(reg_cfg)?;
    let mut state = AdamState::new(params.values.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    let mut lr = cfg.base_lr;
    let mut decayed = false;
    let mut stale = 0usize;
    let mut best_val = f64::INFINITY;
    let mut best = (params.clone(), 0usize);
    let mut history = Vec::with_capacity(cfg.max_epochs);

    for epoch in 0..cfg.max_epochs {
        if cfg.shuffle {
            order.shuffle(&mut rng);
        }
        let mut epoch_loss = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&TrainExample> = chunk.iter().map(|&i| train_set[i].as_ref()).collect();
            let (l, grad) = batch_gradient(&net, &params.values, &batch, cfg.modality)?;
            if !l.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite loss or gradient at epoch {epoch}, batch {b} (loss {l})"
                )));
            }
            epoch_loss += l * chunk.len() as f64;
            adam_step(&mut params.values, &grad, &mut state, lr, cfg)?;
        }
        let train_loss = epoch_loss / train_set.len() as f64;
        let val_loss = mean_loss(&net, &params.values, val_set, cfg.modality)?;
        if !val_loss.is_finite() {
            return Err(Error::Numerical(format!("non-finite validation loss at epoch {epoch}")));
        }

        let record = EpochRecord {
            epoch,
            lr,
            train_loss,
            val_loss,
        };
        on_epoch(&record);
        history.push(record);

        if val_loss < best_val * (1.0 - PLATEAU_THRESHOLD) {
            stale = 0;
        } else {
            stale += 1;
        }
        if val_loss < best_val {
            best_val = val_loss;
            best = (params.clone(), epoch);
        }
        if !decayed && cfg.plateau_patience > 0 && stale >= cfg.plateau_patience {
            lr /= cfg.lr_decay_factor;
            decayed = true;
            stale = 0;
        }
    }

    Ok(TrainOutcome {
        params: best.0,
        history,
        best_epoch: best.1,
    })
}
