//! Weighted cross-entropy, Nesterov SGD and the early-stopped training loop.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_sample, AugmentConfig, AugmentError, ClassWeights};
use crate::image::{normalize, ImageTensor, PixelData, CHANNELS};
use crate::metrics::{accuracy, predict_labels};
use crate::model::{
    load_checkpoint, save_checkpoint, Gradients, Mode, ModelError, Network, Scalar, TrainingMeta,
};
use crate::seed::{derive_seed, rng_from_seed};

/// Lower clamp applied to probabilities before taking the log.
pub const LOG_EPSILON: f64 = 1e-12;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("validation set is empty")]
    EmptyValidation,
    #[error("training set is empty")]
    EmptyTraining,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub nesterov: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.0006,
            momentum: 0.9,
            nesterov: true,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::InvalidConfig("learning_rate must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TrainError::InvalidConfig("momentum must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Monitor {
    #[default]
    ValidationAccuracy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub resume_epochs: usize,
    pub monitor: Monitor,
    pub early_stopping: bool,
    pub resume_early_stopping: bool,
    /// Parameterized layers left trainable, counted from the output; `None`
    /// trains the whole network.
    pub fine_tune_last_n: Option<usize>,
    pub eval_batch_size: usize,
    /// Shuffle and dropout seed. Not part of the serialized config; callers
    /// derive it from their own seeds.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 10,
            patience: 15,
            resume_epochs: 20,
            monitor: Monitor::ValidationAccuracy,
            early_stopping: true,
            resume_early_stopping: true,
            fine_tune_last_n: Some(40),
            eval_batch_size: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 || self.eval_batch_size == 0 || self.patience == 0 {
            return Err(TrainError::InvalidConfig(
                "batch sizes and patience must be positive".into(),
            ));
        }
        if self.fine_tune_last_n == Some(0) {
            return Err(TrainError::InvalidConfig("fine_tune_last_n must be positive".into()));
        }
        Ok(())
    }
}

fn check_batch(probs_len: usize, k: usize, targets: &[usize], weights: &ClassWeights) -> Result<(), TrainError> {
    if k == 0 || probs_len != targets.len() * k || weights.len() != k || targets.is_empty() {
        return Err(TrainError::ShapeMismatch(format!(
            "{probs_len} probabilities, {} targets, {} class weights",
            targets.len(),
            weights.len()
        )));
    }
    if let Some(t) = targets.iter().find(|&&t| t >= k) {
        return Err(TrainError::ShapeMismatch(format!("target {t} outside 0..{k}")));
    }
    Ok(())
}

/// `-(1/B) * sum_i w[y_i] * ln(max(p[i, y_i], 1e-12))`.
pub fn weighted_cce<T: Scalar>(
    probs: &[T],
    targets: &[usize],
    weights: &ClassWeights,
) -> Result<f64, TrainError> {
    let k = weights.len();
    check_batch(probs.len(), k, targets, weights)?;
    let total: f64 = targets
        .iter()
        .enumerate()
        .map(|(i, &y)| -weights.get(y) * probs[i * k + y].f64().max(LOG_EPSILON).ln())
        .sum();
    Ok(total / targets.len() as f64)
}

/// Gradient of [`weighted_cce`] with respect to the softmax input:
/// `w[y_i] / B * (p_i - onehot(y_i))`, zero for rows whose true-class
/// probability sits under the log clamp.
pub(crate) fn weighted_cce_grad<T: Scalar>(probs: &[T], targets: &[usize], weights: &ClassWeights) -> Vec<f64> {
    let k = weights.len();
    let scale = 1.0 / targets.len() as f64;
    let mut out = Vec::with_capacity(probs.len());
    for (row, &y) in probs.chunks_exact(k).zip(targets) {
        let w = weights.get(y) * scale;
        let live = row[y].f64() >= LOG_EPSILON;
        out.extend(row.iter().enumerate().map(|(j, p)| {
            if live {
                w * (p.f64() - if j == y { 1.0 } else { 0.0 })
            } else {
                0.0
            }
        }));
    }
    out
}

/// One momentum update: `v = mu*v - lr*g`, then `theta += mu*v - lr*g` with
/// Nesterov or `theta += v` without.
pub fn sgd_step<T: Scalar>(
    params: &mut [T],
    grads: &[T],
    velocity: &mut [T],
    cfg: &OptimizerConfig,
) -> Result<(), TrainError> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(TrainError::ShapeMismatch(format!(
            "{} parameters, {} gradients, {} velocities",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    let (mu, lr) = (T::of(cfg.momentum), T::of(cfg.learning_rate));
    for ((theta, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        let step = lr * g;
        *v = mu * *v - step;
        *theta = if cfg.nesterov {
            *theta + mu * *v - step
        } else {
            *theta + *v
        };
    }
    Ok(())
}

/// Momentum SGD over a whole network. Velocities start at zero.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub config: OptimizerConfig,
    velocity: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            velocity: Vec::new(),
        }
    }

    /// Updates every trainable parameter that has a gradient.
    pub fn step(&mut self, net: &mut Network<T>, grads: &Gradients<T>) -> Result<(), TrainError> {
        self.velocity.resize(net.params.len(), None);
        for (i, g) in grads.grads.iter().enumerate() {
            let Some(g) = g else { continue };
            if !net.graph.param_trainable(i) {
                continue;
            }
            let v = self.velocity[i].get_or_insert_with(|| vec![T::zero(); g.len()]);
            sgd_step(&mut net.params[i], g, v, &self.config)?;
        }
        Ok(())
    }

    pub fn velocity(&self, param: usize) -> Option<&[T]> {
        self.velocity.get(param).and_then(|v| v.as_deref())
    }
}

/// Per-epoch history row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

pub const HISTORY_HEADER: &str = "epoch,train_loss,train_accuracy,val_loss,val_accuracy";

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.epoch, self.train_loss, self.train_accuracy, self.val_loss, self.val_accuracy
        )
    }
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = format!("{HISTORY_HEADER}\n");
    for r in history {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Early-stopping bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epoch: usize,
    pub best_metric: f64,
    pub best_epoch: usize,
    pub epochs_since_improvement: usize,
    pub history: Vec<EpochRecord>,
}

impl TrainState {
    pub fn fresh() -> Self {
        Self::resumed(0, f64::NEG_INFINITY)
    }

    /// State rolled back to a best checkpoint saved at `epoch`.
    pub fn resumed(epoch: usize, best_metric: f64) -> Self {
        Self {
            epoch,
            best_metric,
            best_epoch: epoch,
            epochs_since_improvement: 0,
            history: Vec::new(),
        }
    }

    /// Records an epoch; returns whether it strictly improved the monitored
    /// metric.
    pub fn observe(&mut self, record: EpochRecord) -> bool {
        self.epoch = record.epoch;
        let improved = record.val_accuracy > self.best_metric;
        if improved {
            self.best_metric = record.val_accuracy;
            self.best_epoch = record.epoch;
        }
        self.epochs_since_improvement = self.epoch - self.best_epoch;
        self.history.push(record);
        improved
    }
}

/// What the training loop drives: one epoch of work and a way to persist the
/// current weights.
pub trait EpochRunner {
    fn run_epoch(&mut self, epoch: usize) -> Result<EpochRecord, TrainError>;

    fn save_checkpoint(&mut self, path: &Path, meta: TrainingMeta) -> Result<(), TrainError>;

    fn trainable_layers(&self) -> Vec<String> {
        Vec::new()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseOutcome {
    pub state: TrainState,
    /// Where this phase saved its best weights, if it ever improved.
    pub best_checkpoint: Option<PathBuf>,
    /// Epoch at which patience ran out, if it did.
    pub stopped_early: Option<usize>,
}

/// Runs up to `epochs` epochs after `state.epoch`, saving to `checkpoint`
/// whenever validation accuracy strictly improves and stopping once
/// `patience` epochs pass without improvement (when `early_stopping`).
pub fn train_phase<R: EpochRunner>(
    runner: &mut R,
    mut state: TrainState,
    epochs: usize,
    patience: usize,
    early_stopping: bool,
    phase: u32,
    checkpoint: &Path,
) -> Result<PhaseOutcome, TrainError> {
    let mut best_checkpoint = None;
    let mut stopped_early = None;
    let first = state.epoch + 1;
    for epoch in first..first + epochs {
        let record = runner.run_epoch(epoch)?;
        debug_assert_eq!(record.epoch, epoch);
        if state.observe(record) {
            let meta = TrainingMeta {
                epoch,
                best_val_accuracy: state.best_metric,
                phase,
                trainable_layers: runner.trainable_layers(),
            };
            runner.save_checkpoint(checkpoint, meta)?;
            best_checkpoint = Some(checkpoint.to_path_buf());
        }
        if early_stopping && state.epochs_since_improvement >= patience {
            stopped_early = Some(epoch);
            break;
        }
    }
    Ok(PhaseOutcome {
        state,
        best_checkpoint,
        stopped_early,
    })
}

pub const PHASE1_CHECKPOINT: &str = "best_phase1.ckpt";
pub const PHASE2_CHECKPOINT: &str = "best_phase2.ckpt";

/// First training round from scratch state.
pub fn fit<R: EpochRunner>(
    runner: &mut R,
    cfg: &TrainConfig,
    checkpoint_dir: &Path,
) -> Result<PhaseOutcome, TrainError> {
    cfg.validate()?;
    train_phase(
        runner,
        TrainState::fresh(),
        cfg.epochs,
        cfg.patience,
        cfg.early_stopping,
        1,
        &checkpoint_dir.join(PHASE1_CHECKPOINT),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResumeOutcome {
    pub phase: PhaseOutcome,
    /// Best of the restored checkpoint and anything the second round saved.
    pub final_checkpoint: PathBuf,
    pub final_best_metric: f64,
}

/// Second round continuing from a restored best checkpoint described by
/// `meta`. Epoch numbering and the patience counter continue from it.
pub fn resume_phase<R: EpochRunner>(
    runner: &mut R,
    restored: &Path,
    meta: &TrainingMeta,
    cfg: &TrainConfig,
    extra_epochs: usize,
    checkpoint_dir: &Path,
) -> Result<ResumeOutcome, TrainError> {
    let state = TrainState::resumed(meta.epoch, meta.best_val_accuracy);
    let phase = train_phase(
        runner,
        state,
        extra_epochs,
        cfg.patience,
        cfg.resume_early_stopping,
        meta.phase + 1,
        &checkpoint_dir.join(PHASE2_CHECKPOINT),
    )?;
    let final_checkpoint = phase
        .best_checkpoint
        .clone()
        .unwrap_or_else(|| restored.to_path_buf());
    Ok(ResumeOutcome {
        final_best_metric: phase.state.best_metric,
        final_checkpoint,
        phase,
    })
}

/// Images with label codes, in network input resolution.
#[derive(Debug, Clone, Default)]
pub struct LabeledImages {
    pub images: Vec<ImageTensor>,
    pub labels: Vec<usize>,
}

impl LabeledImages {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Converts an `h x w x 3` image into the network's `[3][h][w]` layout with
/// values in `[0, 1]`.
pub fn image_to_input<T: Scalar>(img: &ImageTensor, out: &mut Vec<T>) {
    let (h, w) = (img.height(), img.width());
    let plane = h * w;
    let start = out.len();
    out.resize(start + plane * CHANNELS, T::zero());
    let dst = &mut out[start..];
    match img.data() {
        PixelData::Integer(v) => {
            for (i, px) in v.chunks_exact(CHANNELS).enumerate() {
                for c in 0..CHANNELS {
                    dst[c * plane + i] = T::of(px[c] as f64 / 255.0);
                }
            }
        }
        PixelData::Normalized(v) => {
            for (i, px) in v.chunks_exact(CHANNELS).enumerate() {
                for c in 0..CHANNELS {
                    dst[c * plane + i] = T::of(px[c] as f64);
                }
            }
        }
    }
}

fn batch_input<'a, T: Scalar>(
    net: &Network<T>,
    images: impl Iterator<Item = &'a ImageTensor>,
) -> Result<(Vec<T>, usize), TrainError> {
    let s = net.graph.input_shape();
    let mut input = Vec::new();
    let mut n = 0;
    for img in images {
        if img.height() != s.h || img.width() != s.w {
            return Err(TrainError::ShapeMismatch(format!(
                "image {}x{} for network input {}x{}",
                img.height(),
                img.width(),
                s.h,
                s.w
            )));
        }
        image_to_input(img, &mut input);
        n += 1;
    }
    Ok((input, n))
}

/// Inference-mode results over a labeled set.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub probabilities: Vec<f32>,
    pub predictions: Vec<usize>,
    pub loss: f64,
    pub accuracy: f64,
}

pub fn evaluate(net: &Network<f32>, data: &LabeledImages, batch_size: usize) -> Result<Evaluation, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyValidation);
    }
    let k = net.num_classes();
    if let Some(&l) = data.labels.iter().find(|&&l| l >= k) {
        return Err(TrainError::ShapeMismatch(format!("label {l} outside 0..{k}")));
    }
    let uniform = ClassWeights::uniform(k);
    let mut probabilities = Vec::with_capacity(data.len() * k);
    let mut loss_sum = 0.0;
    for (imgs, labels) in data.images.chunks(batch_size).zip(data.labels.chunks(batch_size)) {
        let (input, n) = batch_input(net, imgs.iter())?;
        let probs = net.predict(&input, n)?;
        loss_sum += weighted_cce(&probs, labels, &uniform)? * n as f64;
        probabilities.extend_from_slice(&probs);
    }
    let predictions = predict_labels(&probabilities, k);
    let accuracy = accuracy(&predictions, &data.labels).expect("non-empty, equal lengths");
    Ok(Evaluation {
        probabilities,
        predictions,
        loss: loss_sum / data.len() as f64,
        accuracy,
    })
}

/// The real epoch runner: augmented mini-batch SGD over a network.
pub struct Trainer<'a> {
    pub net: Network<f32>,
    pub optimizer: Sgd<f32>,
    pub train: &'a LabeledImages,
    pub validation: &'a LabeledImages,
    pub augment: AugmentConfig,
    pub weights: ClassWeights,
    pub config: TrainConfig,
}

impl<'a> Trainer<'a> {
    pub fn new(
        net: Network<f32>,
        opt: OptimizerConfig,
        train: &'a LabeledImages,
        validation: &'a LabeledImages,
        augment: AugmentConfig,
        weights: ClassWeights,
        config: TrainConfig,
    ) -> Result<Self, TrainError> {
        opt.validate()?;
        config.validate()?;
        augment.validate()?;
        if weights.len() != net.num_classes() {
            return Err(TrainError::ShapeMismatch(format!(
                "{} class weights for {} classes",
                weights.len(),
                net.num_classes()
            )));
        }
        if train.is_empty() {
            return Err(TrainError::EmptyTraining);
        }
        Ok(Self {
            net,
            optimizer: Sgd::new(opt),
            train,
            validation,
            augment,
            weights,
            config,
        })
    }

    /// One pass over the shuffled training set followed by validation.
    pub fn run_epoch_inner(&mut self, epoch: usize) -> Result<EpochRecord, TrainError> {
        if self.validation.is_empty() {
            return Err(TrainError::EmptyValidation);
        }
        let n = self.train.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng_from_seed(derive_seed(&[self.config.seed, epoch as u64])));

        let k = self.net.num_classes();
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (b, chunk) in order.chunks(self.config.batch_size).enumerate() {
            let augment = &self.augment;
            let train = self.train;
            let samples = crate::model::map_samples(chunk.len(), |j| {
                let i = chunk[j];
                let img = match train.images[i].form() {
                    crate::image::PixelForm::Integer => normalize(&train.images[i]).expect("integer form"),
                    crate::image::PixelForm::Normalized => train.images[i].clone(),
                };
                augment_sample(&img, augment, epoch as u64, i).map(|(out, _)| out)
            });
            let samples = samples.into_iter().collect::<Result<Vec<_>, _>>()?;
            let targets: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            let (input, bs) = batch_input(&self.net, samples.iter())?;

            let seed = derive_seed(&[self.config.seed, epoch as u64, b as u64]);
            let pass = self.net.forward(&input, bs, Mode::Training { seed })?;
            loss_sum += weighted_cce(pass.probabilities(), &targets, &self.weights)? * bs as f64;
            correct += predict_labels(pass.probabilities(), k)
                .iter()
                .zip(&targets)
                .filter(|(p, t)| p == t)
                .count();
            let grads = self.net.backward(&pass, &targets, &self.weights)?;
            self.net.update_moving_stats(&pass);
            self.optimizer.step(&mut self.net, &grads)?;
        }
        let eval = evaluate(&self.net, self.validation, self.config.eval_batch_size)?;
        Ok(EpochRecord {
            epoch,
            train_loss: loss_sum / n as f64,
            train_accuracy: correct as f64 / n as f64,
            val_loss: eval.loss,
            val_accuracy: eval.accuracy,
        })
    }
}

impl EpochRunner for Trainer<'_> {
    fn run_epoch(&mut self, epoch: usize) -> Result<EpochRecord, TrainError> {
        self.run_epoch_inner(epoch)
    }

    fn save_checkpoint(&mut self, path: &Path, meta: TrainingMeta) -> Result<(), TrainError> {
        save_checkpoint(&self.net, meta, path)?;
        Ok(())
    }

    fn trainable_layers(&self) -> Vec<String> {
        self.net.graph.trainable_layer_names()
    }
}

/// Restores the best checkpoint (parameters and freeze mask, fresh zero
/// velocity) and trains it for up to `extra_epochs` more epochs.
#[allow(clippy::too_many_arguments)]
pub fn resume_from_best(
    checkpoint: &Path,
    train: &LabeledImages,
    validation: &LabeledImages,
    augment: AugmentConfig,
    weights: ClassWeights,
    opt: OptimizerConfig,
    cfg: &TrainConfig,
    extra_epochs: usize,
    checkpoint_dir: &Path,
) -> Result<(ResumeOutcome, Network<f32>), TrainError> {
    let (ckpt, net) = load_checkpoint(checkpoint)?;
    let mut trainer = Trainer::new(net, opt, train, validation, augment, weights, cfg.clone())?;
    let outcome = resume_phase(&mut trainer, checkpoint, &ckpt.metadata, cfg, extra_epochs, checkpoint_dir)?;
    Ok((outcome, trainer.net))
}
