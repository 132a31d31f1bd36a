//! Minibatch training: inverted dropout, batch-mean gradients, L2, element-wise
//! clipping and RMSprop updates, plus the epoch loop with best-dev retention.

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::grad::{self, Gradients};
use crate::model::{self, init_params, DropoutMasks, ModelConfig, ModelParams};
use crate::seed::{derive_seed, TAG_DROPOUT, TAG_INIT, TAG_SHUFFLE};
use crate::tensor::Vector;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub rms_decay: f64,
    pub rms_eps: f64,
    pub clip_bound: f64,
    pub l2_coeff: f64,
    pub dropout_p: f64,
    /// Drop word vectors `x(t)`.
    pub dropout_embedding: bool,
    /// Drop the projected image.
    pub dropout_image: bool,
    pub lr_decay_per_epoch: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 100,
            epochs: 50,
            learning_rate: 1e-3,
            rms_decay: 0.99,
            rms_eps: 1e-8,
            clip_bound: 5.0,
            l2_coeff: 1e-4,
            dropout_p: 0.5,
            dropout_embedding: true,
            dropout_image: true,
            lr_decay_per_epoch: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!("dropout_p must be in [0, 1), got {}", self.dropout_p));
        }
        if !(self.rms_decay > 0.0 && self.rms_decay < 1.0) {
            return bad(format!("rms_decay must be in (0, 1), got {}", self.rms_decay));
        }
        if !(self.clip_bound > 0.0) {
            return bad(format!("clip_bound must be positive, got {}", self.clip_bound));
        }
        if !(self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.rms_eps >= 0.0) || !(self.l2_coeff >= 0.0) {
            return bad("rms_eps and l2_coeff must be non-negative".into());
        }
        if !(self.lr_decay_per_epoch > 0.0) {
            return bad("lr_decay_per_epoch must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        Ok(())
    }

    fn dropout_active(&self) -> bool {
        self.dropout_p > 0.0 && (self.dropout_embedding || self.dropout_image)
    }
}

/// Per-coordinate running mean of squared gradients, plus the current step size.
#[derive(Debug, Clone, PartialEq)]
pub struct RmsPropState {
    pub cache: ModelParams,
    pub learning_rate: f64,
}

impl RmsPropState {
    pub fn new(config: &ModelConfig, learning_rate: f64) -> Self {
        Self {
            cache: ModelParams::zeros(config),
            learning_rate,
        }
    }

    /// Applies the per-epoch learning-rate decay.
    pub fn end_epoch(&mut self, train_cfg: &TrainConfig) {
        self.learning_rate *= train_cfg.lr_decay_per_epoch;
    }
}

/// Inverted-dropout masks for one sequence of `timesteps` steps: entries are
/// `0` or `1 / (1 - p)`.
pub fn dropout_masks(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    seed: u64,
    timesteps: usize,
) -> DropoutMasks {
    let p = train_cfg.dropout_p;
    let keep_scale = 1.0 / (1.0 - p);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask = |n: usize| -> Vector {
        (0..n)
            .map(|_| if rng.random::<f64>() >= p { keep_scale } else { 0.0 })
            .collect::<Vec<_>>()
            .into()
    };
    let input = train_cfg
        .dropout_embedding
        .then(|| (0..timesteps).map(|_| mask(model_cfg.embed_dim)).collect());
    let image = train_cfg
        .dropout_image
        .then(|| mask(model_cfg.hidden_dim));
    DropoutMasks { input, image }
}

/// `cache ← ρ·cache + (1-ρ)·g²;  θ ← θ - η·g / (√cache + ε)`.
pub fn rmsprop_update(
    params: &mut ModelParams,
    grads: &Gradients,
    state: &mut RmsPropState,
    train_cfg: &TrainConfig,
) -> Result<()> {
    if let Some(t) = grads
        .tensors()
        .into_iter()
        .find(|t| t.data.iter().any(|g| !g.is_finite()))
    {
        return Err(Error::NonFinite { tensor: t.name });
    }
    let rho = train_cfg.rms_decay;
    let eps = train_cfg.rms_eps;
    let lr = state.learning_rate;
    let grad_views = grads.tensors();
    for ((p, c), g) in params
        .tensors_mut()
        .into_iter()
        .zip(state.cache.tensors_mut())
        .zip(&grad_views)
    {
        for ((pv, cv), &gv) in p.data.iter_mut().zip(c.data.iter_mut()).zip(g.data) {
            *cv = rho * *cv + (1.0 - rho) * gv * gv;
            if gv != 0.0 {
                *pv -= lr * gv / (cv.sqrt() + eps);
            }
        }
    }
    Ok(())
}

/// One training sample with the seed of its dropout masks.
#[derive(Debug, Clone, Copy)]
pub struct TrainPair<'a> {
    pub tokens: &'a [usize],
    pub feature: &'a Vector,
    pub dropout_seed: u64,
}

/// Fixed number of reduction groups, so the summation order depends only on
/// the batch, never on thread count or scheduling.
const REDUCTION_GROUPS: usize = 8;

/// Mean data loss and mean data gradient over `batch`.
pub fn batch_gradient(
    params: &ModelParams,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    batch: &[TrainPair<'_>],
) -> Result<(f64, Gradients)> {
    if batch.is_empty() {
        return Err(Error::Data("empty minibatch".into()));
    }
    let group = batch.len().div_ceil(REDUCTION_GROUPS);
    let partials = batch
        .par_chunks(group)
        .map(|chunk| -> Result<(f64, Gradients)> {
            let mut grads = Gradients::zeros(model_cfg);
            let mut loss = 0.0;
            for pair in chunk {
                let masks = train_cfg.dropout_active().then(|| {
                    dropout_masks(model_cfg, train_cfg, pair.dropout_seed, pair.tokens.len() - 1)
                });
                let trace =
                    model::forward_sequence(params, model_cfg, pair.tokens, pair.feature, masks.as_ref())?;
                let targets = &pair.tokens[1..];
                loss += model::cross_entropy_loss(&trace, targets)?;
                grad::accumulate_sequence_grad(params, model_cfg, &trace, targets, 1.0, &mut grads)?;
            }
            Ok((loss, grads))
        })
        .collect::<Vec<_>>();

    let mut iter = partials.into_iter();
    let (mut loss, mut grads) = iter.next().expect("non-empty batch")?;
    for part in iter {
        let (l, g) = part?;
        loss += l;
        grads.add_assign(&g);
    }
    let n = batch.len() as f64;
    grads.scale(1.0 / n);
    Ok((loss / n, grads))
}

/// Mean data loss and the gradient actually applied: batch mean, plus L2,
/// then clipped element-wise.
pub fn update_gradient(
    params: &ModelParams,
    batch: &[TrainPair<'_>],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<(f64, Gradients)> {
    let (loss, mut grads) = batch_gradient(params, model_cfg, train_cfg, batch)?;
    grad::add_l2(&mut grads, params, train_cfg.l2_coeff);
    if let Some(t) = grads
        .tensors()
        .into_iter()
        .find(|t| t.data.iter().any(|g| !g.is_finite()))
    {
        return Err(Error::NonFinite { tensor: t.name });
    }
    grad::clip_gradients(&mut grads, train_cfg.clip_bound)?;
    Ok((loss, grads))
}

/// One RMSprop step on [`update_gradient`]. Returns the mean data loss
/// measured before the update.
pub fn train_minibatch(
    params: &mut ModelParams,
    state: &mut RmsPropState,
    batch: &[TrainPair<'_>],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<f64> {
    let (loss, grads) = update_gradient(params, batch, model_cfg, train_cfg)?;
    rmsprop_update(params, &grads, state, train_cfg)?;
    Ok(loss)
}

/// Mean per-sequence cross-entropy without dropout.
pub fn mean_loss(
    params: &ModelParams,
    model_cfg: &ModelConfig,
    pairs: &[(&[usize], &Vector)],
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Data("cannot evaluate loss on an empty split".into()));
    }
    let losses = pairs
        .par_iter()
        .map(|(tokens, feature)| model::sequence_loss(params, model_cfg, tokens, feature))
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_loss: f64,
    /// Step size used during this epoch.
    pub learning_rate: f64,
}

impl fmt::Display for EpochRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch {} train_loss {:.6} dev_loss {:.6} lr {:.6e}",
            self.epoch, self.train_loss, self.dev_loss, self.learning_rate
        )
    }
}

/// Contents of a history file: one [`EpochRecord`] line per epoch.
pub fn format_history(history: &[EpochRecord]) -> String {
    history.iter().map(|r| format!("{r}\n")).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Parameters with the lowest dev loss seen (initial parameters if no epoch ran).
    pub params: ModelParams,
    pub history: Vec<EpochRecord>,
}

/// Resumable training state.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSession {
    pub model_cfg: ModelConfig,
    pub train_cfg: TrainConfig,
    pub params: ModelParams,
    pub state: RmsPropState,
    pub best: ModelParams,
    pub best_dev: f64,
    pub history: Vec<EpochRecord>,
}

impl TrainSession {
    pub fn new(model_cfg: ModelConfig, train_cfg: TrainConfig) -> Result<Self> {
        let params = init_params(&model_cfg, derive_seed(train_cfg.seed, &[TAG_INIT]));
        Self::with_params(model_cfg, train_cfg, params)
    }

    pub fn with_params(model_cfg: ModelConfig, train_cfg: TrainConfig, params: ModelParams) -> Result<Self> {
        model_cfg.validate()?;
        train_cfg.validate()?;
        if !params.matches(&model_cfg) {
            return Err(Error::Config("parameter shapes do not match the model config".into()));
        }
        Ok(Self {
            state: RmsPropState::new(&model_cfg, train_cfg.learning_rate),
            best: params.clone(),
            best_dev: f64::INFINITY,
            history: Vec::new(),
            params,
            model_cfg,
            train_cfg,
        })
    }

    pub fn epochs_done(&self) -> usize {
        self.history.len()
    }

    pub fn is_finished(&self) -> bool {
        self.epochs_done() >= self.train_cfg.epochs
    }

    /// Runs the next epoch: seeded shuffle, minibatch updates, dev loss,
    /// best-dev bookkeeping and learning-rate decay.
    pub fn run_epoch(&mut self, dataset: &Dataset) -> Result<EpochRecord> {
        let train = dataset.pairs(Split::Train);
        let dev = dataset.pairs(Split::Dev);
        if train.is_empty() {
            return Err(Error::Data("training split is empty".into()));
        }
        if dev.is_empty() {
            return Err(Error::Data("dev split is empty".into()));
        }
        let epoch = self.epochs_done() as u64;
        let seed = self.train_cfg.seed;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[TAG_SHUFFLE, epoch])));

        let lr = self.state.learning_rate;
        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(self.train_cfg.batch_size).enumerate() {
            let batch: Vec<TrainPair<'_>> = chunk
                .iter()
                .enumerate()
                .map(|(i, &idx)| TrainPair {
                    tokens: train[idx].0,
                    feature: train[idx].1,
                    dropout_seed: derive_seed(seed, &[TAG_DROPOUT, epoch, b as u64, i as u64]),
                })
                .collect();
            let loss = train_minibatch(
                &mut self.params,
                &mut self.state,
                &batch,
                &self.model_cfg,
                &self.train_cfg,
            )
            .map_err(|e| match e {
                Error::NonFinite { tensor } => Error::NonFinite {
                    tensor: format!("{tensor} (epoch {}, batch {b})", epoch + 1),
                },
                other => other,
            })?;
            loss_sum += loss * batch.len() as f64;
        }

        let dev_loss = mean_loss(&self.params, &self.model_cfg, &dev)?;
        if dev_loss < self.best_dev {
            self.best_dev = dev_loss;
            self.best = self.params.clone();
        }
        let record = EpochRecord {
            epoch: self.epochs_done() + 1,
            train_loss: loss_sum / train.len() as f64,
            dev_loss,
            learning_rate: lr,
        };
        self.history.push(record);
        self.state.end_epoch(&self.train_cfg);
        Ok(record)
    }

    pub fn run(&mut self, dataset: &Dataset, mut on_epoch: impl FnMut(&EpochRecord)) -> Result<()> {
        while !self.is_finished() {
            let rec = self.run_epoch(dataset)?;
            on_epoch(&rec);
        }
        Ok(())
    }

    pub fn into_outcome(self) -> TrainOutcome {
        TrainOutcome {
            params: self.best,
            history: self.history,
        }
    }
}

pub fn train(dataset: &Dataset, model_cfg: &ModelConfig, train_cfg: &TrainConfig) -> Result<TrainOutcome> {
    if dataset.train.is_empty() || dataset.dev.is_empty() {
        return Err(Error::Data("training needs non-empty train and dev splits".into()));
    }
    let mut session = TrainSession::new(model_cfg.clone(), train_cfg.clone())?;
    session.run(dataset, |_| {})?;
    Ok(session.into_outcome())
}
