//! Epoch loop: patch batches, masked-RMSE loss, full-domain validation,
//! learning-rate plateau control and early stopping.

use std::path::Path;

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::convnet::{Mode, UNet, UNetConfig};
use crate::error::{Error, Result};
use crate::inference::{infer, InferenceConfig};
use crate::metrics::{masked_rmse, masked_rmse_loss_backward, write_csv, MetricReport};
use crate::optim::{adam_step, AdamState, EarlyStopper, PlateauScheduler, StopSignal, DEFAULT_LR};
use crate::patches::{augment, fit_norm_stats, sample_valid_patch, AugmentConfig, DomainImage, NormStats, SamplerConfig};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: UNetConfig,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub lr: f64,
    pub scheduler_factor: f64,
    pub scheduler_patience: usize,
    pub sampler: SamplerConfig,
    pub augment: AugmentConfig,
    pub validation: InferenceConfig,
    pub target_norm: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: UNetConfig::default(),
            batch_size: 32,
            max_epochs: 750,
            patience: 75,
            lr: DEFAULT_LR,
            scheduler_factor: 0.1,
            scheduler_patience: 10,
            sampler: SamplerConfig::default(),
            augment: AugmentConfig::default(),
            validation: InferenceConfig::default(),
            target_norm: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn steps_per_epoch(&self, n_train_images: usize) -> usize {
        (n_train_images * self.sampler.patches_per_image).div_ceil(self.batch_size).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.sampler.validate()?;
        self.augment.validate()?;
        self.validation.validate()?;
        if self.batch_size == 0 || self.max_epochs == 0 || self.sampler.patches_per_image == 0 {
            return Err(Error::Config("batch_size, max_epochs and patches_per_image must be positive".into()));
        }
        if !(self.lr >= 0.0) {
            return Err(Error::Config(format!("learning rate {} must be non-negative", self.lr)));
        }
        let m = self.model.side_multiple();
        if self.sampler.patch_size % m != 0 {
            return Err(Error::Config(format!(
                "patch size {} is not divisible by 2^depth = {m}",
                self.sampler.patch_size
            )));
        }
        if self.validation.patch_size % m != 0 {
            return Err(Error::Config(format!(
                "validation tile {} is not divisible by 2^depth = {m}",
                self.validation.patch_size
            )));
        }
        Ok(())
    }
}

/// Full-domain images per split, in original units.
#[derive(Debug, Clone, Default)]
pub struct Datasets {
    pub train: Vec<DomainImage>,
    pub val: Vec<DomainImage>,
    pub test: Vec<DomainImage>,
}

impl Datasets {
    /// Rejects a discharge that appears in more than one split.
    pub fn check_disjoint(&self) -> Result<()> {
        let qs = |v: &[DomainImage]| v.iter().map(|i| i.discharge()).collect::<Vec<_>>();
        let (tr, va, te) = (qs(&self.train), qs(&self.val), qs(&self.test));
        for (a, b, name) in [(&tr, &va, "train/val"), (&tr, &te, "train/test"), (&va, &te, "val/test")] {
            if let Some(q) = a.iter().find(|q| b.contains(q)) {
                return Err(Error::Config(format!("discharge {q} appears in both {name} splits")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean batch loss, in meters.
    pub train_rmse: f64,
    pub val_rmse: f64,
    /// Learning rate used during the epoch.
    pub lr: f64,
    pub stopped: bool,
}

pub struct RunState {
    pub epoch: usize,
    pub model: UNet<f32>,
    pub optimizer: AdamState<f32>,
    pub scheduler: PlateauScheduler,
    pub stopper: EarlyStopper<Vec<Tensor<f32>>>,
    pub history: Vec<EpochRecord>,
}

impl RunState {
    pub fn new(model: UNet<f32>, cfg: &TrainConfig) -> Self {
        Self {
            epoch: 0,
            model,
            optimizer: AdamState::new(cfg.lr),
            scheduler: PlateauScheduler::new(cfg.scheduler_factor, cfg.scheduler_patience),
            stopper: EarlyStopper::new(cfg.patience),
            history: Vec::new(),
        }
    }
}

/// Stacked patch batch ready for the network.
pub struct Batch {
    pub input: Tensor<f32>,
    pub target: Tensor<f32>,
    pub mask: Vec<bool>,
}

/// Draws `count` patches round-robin over `images`, starting at image `start`.
pub fn assemble_batch(
    images: &[DomainImage],
    start: usize,
    count: usize,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Batch> {
    let p = cfg.sampler.patch_size;
    let mut input = Vec::with_capacity(count * 3 * p * p);
    let mut target = Vec::with_capacity(count * p * p);
    let mut mask = Vec::with_capacity(count * p * p);
    for i in 0..count {
        let img = &images[(start + i) % images.len()];
        let pair = sample_valid_patch(img, &cfg.sampler, rng)?;
        let pair = augment(&pair, &cfg.augment, rng)?;
        input.extend_from_slice(&pair.input);
        target.extend_from_slice(&pair.target);
        mask.extend_from_slice(&pair.mask);
    }
    Ok(Batch {
        input: Tensor::from_vec(&[count, 3, p, p], input)?,
        target: Tensor::from_vec(&[count, 1, p, p], target)?,
        mask,
    })
}

/// One forward/backward/Adam step; returns the batch loss in training units.
pub fn train_step(model: &mut UNet<f32>, optimizer: &mut AdamState<f32>, batch: &Batch) -> Result<f64> {
    model.zero_grad();
    let pred = model.forward(&batch.input)?;
    let g = masked_rmse_loss_backward(pred.data(), batch.target.data(), &batch.mask)?;
    let grad = Tensor::from_vec(pred.shape(), g.grad)?;
    model.backward(&grad)?;
    adam_step(&mut model.params_mut(), optimizer)?;
    Ok(g.loss)
}

/// Runs one epoch over normalized training images. Returns the mean batch
/// loss in training units.
pub fn train_epoch(state: &mut RunState, train: &[DomainImage], cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<f64> {
    if train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    state.model.set_mode(Mode::Training);
    let steps = cfg.steps_per_epoch(train.len());
    let mut total = 0.0;
    for step in 0..steps {
        let batch = assemble_batch(train, step * cfg.batch_size, cfg.batch_size, cfg, rng)?;
        total += train_step(&mut state.model, &mut state.optimizer, &batch)?;
    }
    Ok(total / steps as f64)
}

/// Predicts a full domain and returns it in original units.
pub fn predict_image(model: &UNet<f32>, img: &DomainImage, norm: &NormStats, cfg: &InferenceConfig) -> Result<Vec<f32>> {
    let mut input = img.input.clone();
    norm.normalize_input(&mut input);
    let mut pred = infer(model, &input, cfg)?.into_data();
    norm.denormalize_target(&mut pred);
    Ok(pred)
}

/// Mean over images of the per-image masked RMSE in original units.
pub fn validate(model: &mut UNet<f32>, val: &[DomainImage], norm: &NormStats, cfg: &InferenceConfig) -> Result<f64> {
    if val.is_empty() {
        return Err(Error::Config("validation split is empty".into()));
    }
    model.set_mode(Mode::Evaluation);
    let mut sum = 0.0;
    for img in val {
        let pred = predict_image(model, img, norm, cfg)?;
        sum += masked_rmse(&pred, &img.target, &img.mask)?;
    }
    Ok(sum / val.len() as f64)
}

pub struct FitOutcome {
    /// Loaded with the parameters of the best validation epoch.
    pub model: UNet<f32>,
    pub optimizer: AdamState<f32>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_rmse: f64,
    pub norm: NormStats,
}

pub fn fit(cfg: &TrainConfig, data: &Datasets, history_path: Option<&Path>) -> Result<FitOutcome> {
    cfg.validate()?;
    let model = UNet::new(cfg.model, cfg.seed)?;
    fit_with_model(cfg, model, data, history_path)
}

/// Trains a given initial model. When `history_path` is set the history CSV
/// is rewritten after every epoch, so a failed run leaves its partial history.
pub fn fit_with_model(cfg: &TrainConfig, model: UNet<f32>, data: &Datasets, history_path: Option<&Path>) -> Result<FitOutcome> {
    cfg.validate()?;
    if model.config() != &cfg.model {
        return Err(Error::Config("model topology differs from the configuration".into()));
    }
    data.check_disjoint()?;
    let norm = fit_norm_stats(&data.train, cfg.target_norm)?;
    let train: Vec<DomainImage> = data.train.iter().map(|i| norm.normalized_image(i)).collect();
    let target_scale = if norm.target_norm_enabled {
        norm.target_max - norm.target_min
    } else {
        1.0
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut state = RunState::new(model, cfg);
    info!(
        "training {} images, {} steps/epoch, up to {} epochs",
        train.len(),
        cfg.steps_per_epoch(train.len()),
        cfg.max_epochs
    );

    for epoch in 1..=cfg.max_epochs {
        state.epoch = epoch;
        let lr = state.optimizer.lr;
        let result = (|| -> Result<(f64, f64)> {
            let train_loss = train_epoch(&mut state, &train, cfg, &mut rng)?;
            let val = validate(&mut state.model, &data.val, &norm, &cfg.validation)?;
            Ok((train_loss * target_scale, val))
        })();
        let (train_rmse, val_rmse) = match result {
            Ok(v) => v,
            Err(e) => {
                if let Some(p) = history_path {
                    write_csv(p, &state.history)?;
                }
                return Err(Error::Epoch {
                    epoch,
                    source: Box::new(e),
                });
            }
        };
        state.optimizer.lr = state.scheduler.observe(val_rmse, lr);
        let model = &state.model;
        let signal = state.stopper.observe(val_rmse, || model.state());
        let stopped = signal == StopSignal::Stop;
        state.history.push(EpochRecord {
            epoch,
            train_rmse,
            val_rmse,
            lr,
            stopped,
        });
        if let Some(p) = history_path {
            write_csv(p, &state.history)?;
        }
        info!("epoch {epoch}: train {train_rmse:.5} m, val {val_rmse:.5} m, lr {lr:e}");
        if stopped {
            break;
        }
    }

    let best = state.stopper.best_parameters.take().expect("at least one epoch ran");
    state.model.load_state(&best)?;
    state.model.set_mode(Mode::Evaluation);
    Ok(FitOutcome {
        model: state.model,
        optimizer: state.optimizer,
        history: state.history,
        best_epoch: state.stopper.best_epoch.unwrap_or(1),
        best_val_rmse: state.stopper.best_loss,
        norm,
    })
}

/// Pooled and per-image metrics plus the predictions themselves.
pub struct Evaluation {
    pub pooled: MetricReport,
    pub per_image: Vec<MetricReport>,
    pub predictions: Vec<Vec<f32>>,
}

pub fn evaluate(model: &mut UNet<f32>, images: &[DomainImage], norm: &NormStats, cfg: &InferenceConfig) -> Result<Evaluation> {
    if images.is_empty() {
        return Err(Error::Config("no images to evaluate".into()));
    }
    model.set_mode(Mode::Evaluation);
    let mut predictions = Vec::with_capacity(images.len());
    let mut per_image = Vec::with_capacity(images.len());
    for img in images {
        let pred = predict_image(model, img, norm, cfg)?;
        per_image.push(MetricReport::compute(&pred, &img.target, &img.mask)?);
        predictions.push(pred);
    }
    let parts: Vec<(&[f32], &[f32], &[bool])> = predictions
        .iter()
        .zip(images)
        .map(|(p, i)| (p.as_slice(), i.target.as_slice(), i.mask.as_slice()))
        .collect();
    Ok(Evaluation {
        pooled: MetricReport::pooled(&parts)?,
        per_image,
        predictions,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldRow {
    pub fold: usize,
    pub held_out_q: f64,
    pub epochs: usize,
    pub rmse_m: f64,
    pub nse: f64,
    pub n_valid: usize,
    pub max_abs_error_m: f64,
}

/// Leave-one-discharge-out: each fold trains on the other images and uses
/// the held-out one for both validation and evaluation.
pub fn cross_validate(cfg: &TrainConfig, images: &[DomainImage]) -> Result<Vec<FoldRow>> {
    if images.len() < 3 {
        return Err(Error::Config(format!("cross-validation needs >= 3 discharges, got {}", images.len())));
    }
    let mut rows = Vec::with_capacity(images.len());
    for (fold, held) in images.iter().enumerate() {
        let data = Datasets {
            train: images.iter().enumerate().filter(|(i, _)| *i != fold).map(|(_, im)| im.clone()).collect(),
            val: vec![held.clone()],
            test: Vec::new(),
        };
        let mut out = fit(cfg, &data, None)?;
        let ev = evaluate(&mut out.model, std::slice::from_ref(held), &out.norm, &cfg.validation)?;
        info!("fold {fold} (q = {}): rmse {:.4} m", held.discharge(), ev.pooled.rmse);
        rows.push(FoldRow {
            fold,
            held_out_q: held.discharge() as f64,
            epochs: out.history.len(),
            rmse_m: ev.pooled.rmse,
            nse: ev.pooled.nse,
            n_valid: ev.pooled.n_valid,
            max_abs_error_m: ev.pooled.max_abs_error,
        });
    }
    Ok(rows)
}

/// Evaluates a trained model on another domain using the source statistics.
pub fn zero_shot_eval(
    model: &mut UNet<f32>,
    norm: Option<&NormStats>,
    foreign: &[DomainImage],
    cfg: &InferenceConfig,
) -> Result<Evaluation> {
    let norm = norm.ok_or_else(|| Error::Config("zero-shot evaluation needs the source normalization statistics".into()))?;
    if foreign.iter().any(|img| norm.extrapolates(img)) {
        warn!("foreign inputs fall outside the source normalization range; normalized values leave [0, 1]");
    }
    evaluate(model, foreign, norm, cfg)
}
