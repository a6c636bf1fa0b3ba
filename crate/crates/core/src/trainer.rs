//! The training loop: augmentation, forward/backward, running-average
//! stores, mining, validation, checkpoints and resume.

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::augment::{apply_to_image, sample_transform, AugmentationTransform, CropParams};
use crate::consistency::{HeatmapStore, ScoreStore, StoragePrecision};
use crate::container::{ArrayData, ArrayFile, NamedArray};
use crate::data::{to_single_positive, DatasetRecord};
use crate::error::{Error, Result};
use crate::losses::{
    cl_loss, combined_loss, gamma_schedule, scl_loss_with_target, AnnotationVector, ConsistencyLoss, ConsistencyTerm,
    PrimaryLoss,
};
use crate::metrics::{append_metrics_csv, evaluate, ApVariant, EvaluationReport, Predictions};
use crate::miner::MinerState;
use crate::model::{GlobalPool, Model, ModelConfig, Params};
use crate::numerics::{bilinear_resize, mix_seed, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "f32" => Some(Precision::F32),
            "f64" => Some(Precision::F64),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Coupled L2 penalty added to the gradient.
    pub weight_decay: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub input_size: usize,
    pub channels: Vec<usize>,
    pub global_pool: GlobalPool,
    pub crop: CropParams,
    pub primary: PrimaryLoss,
    pub consistency: ConsistencyLoss,
    pub gamma_warmup_epochs: u32,
    /// Consistency weight reached at the end of the warmup ramp.
    pub gamma_max: f64,
    /// Expected positives per image.
    pub k: f64,
    /// Divide the consistency norms by the square root of their size.
    pub normalized_l2: bool,
    pub score_momentum: f64,
    pub heatmap_momentum: f64,
    /// Heatmap side as a multiple of the score-map side.
    pub heatmap_scale: usize,
    pub heatmap_precision: StoragePrecision,
    /// Keep heatmaps for only this many classes per image after warmup.
    pub topk: Option<usize>,
    pub epochs: u32,
    /// Length of the warmup stage: backbone freezing (if enabled) lasts this
    /// long and top-k retention happens at its end.
    pub warmup_epochs: u32,
    pub freeze_backbone: bool,
    pub lr: f64,
    pub adam: AdamParams,
    pub batch_size: usize,
    pub seed: u64,
    /// Worker threads for per-sample work; results do not depend on it.
    pub threads: usize,
    pub precision: Precision,
    pub ap_variant: ApVariant,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            channels: vec![16, 32, 64],
            global_pool: GlobalPool::LogitMean,
            crop: CropParams::default(),
            primary: PrimaryLoss::An,
            consistency: ConsistencyLoss::None,
            gamma_warmup_epochs: 5,
            gamma_max: 1.0,
            k: 2.5,
            normalized_l2: false,
            score_momentum: 0.8,
            heatmap_momentum: 0.8,
            heatmap_scale: 2,
            heatmap_precision: StoragePrecision::F32,
            topk: None,
            epochs: 20,
            warmup_epochs: 0,
            freeze_backbone: false,
            lr: 1e-3,
            adam: AdamParams::default(),
            batch_size: 8,
            seed: 0,
            threads: 1,
            precision: Precision::F32,
            ap_variant: ApVariant::PrecisionAtHits,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(Error::config(key, msg));
        if self.epochs > 0 && !(self.lr > 0.0) {
            return bad("train.lr", format!("learning rate must be positive, got {}", self.lr));
        }
        for (key, mu) in [("ema.score_momentum", self.score_momentum), ("ema.heatmap_momentum", self.heatmap_momentum)] {
            if !(0.0..=1.0).contains(&mu) {
                return bad(key, format!("momentum {mu} outside [0, 1]"));
            }
        }
        if self.batch_size == 0 {
            return bad("train.batch_size", "batch size must be positive".into());
        }
        if self.threads == 0 {
            return bad("train.threads", "thread count must be positive".into());
        }
        if self.gamma_warmup_epochs == 0 {
            return bad("loss.gamma_warmup_epochs", "warmup must be at least one epoch".into());
        }
        if !(self.gamma_max >= 0.0 && self.gamma_max.is_finite()) {
            return bad("loss.gamma", format!("gamma must be finite and >= 0, got {}", self.gamma_max));
        }
        if !(self.k > 0.0) {
            return bad("loss.k", format!("K must be positive, got {}", self.k));
        }
        if self.heatmap_scale == 0 {
            return bad("ema.heatmap_scale", "heatmap scale must be positive".into());
        }
        if self.topk == Some(0) {
            return bad("ema.topk", "top-k retention needs k >= 1".into());
        }
        if self.primary.uses_mining() && self.consistency == ConsistencyLoss::None {
            return bad(
                "loss.primary",
                format!(
                    "`{}` mines expected positives from the running score estimates, which only exist with \
                     loss.consistency = cl or scl",
                    self.primary.name()
                ),
            );
        }
        let b = &self.adam;
        if !(0.0..1.0).contains(&b.beta1) || !(0.0..1.0).contains(&b.beta2) || !(b.eps > 0.0) || b.weight_decay < 0.0 {
            return bad("train.beta1", "invalid optimizer hyperparameters".into());
        }
        self.crop.validate().map_err(|e| Error::config("aug.area_min", e.to_string()))?;
        Ok(())
    }

    pub fn model_config(&self, num_classes: usize) -> ModelConfig {
        ModelConfig {
            input_size: self.input_size,
            in_channels: 3,
            channels: self.channels.clone(),
            num_classes,
            global_pool: self.global_pool,
        }
    }

    /// Side of the canonical frame training crops are taken from.
    pub fn canonical_side(&self) -> usize {
        (3 * self.input_size).div_ceil(2)
    }
}

/// `base_lr · (1 + cos(π · epoch / total)) / 2`.
pub fn cosine_lr(epoch: u32, total_epochs: u32, base_lr: f64) -> Result<f64> {
    if epoch >= total_epochs {
        return Err(Error::InvalidArgument(format!("epoch {epoch} outside [0, {total_epochs})")));
    }
    Ok(base_lr * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / total_epochs as f64).cos()))
}

/// One bias-corrected adaptive-moment update of a flat array; `step` counts
/// from 1.
#[allow(clippy::too_many_arguments)]
pub fn adam_update<T: Real>(x: &mut [T], g: &[T], m: &mut [T], v: &mut [T], step: u64, lr: f64, p: &AdamParams) {
    let (b1, b2) = (T::from_f64(p.beta1), T::from_f64(p.beta2));
    let one = T::one();
    let c1 = T::from_f64(1.0 - p.beta1.powf(step as f64));
    let c2 = T::from_f64(1.0 - p.beta2.powf(step as f64));
    let (lr, eps, wd) = (T::from_f64(lr), T::from_f64(p.eps), T::from_f64(p.weight_decay));
    for i in 0..x.len() {
        let gi = g[i] + wd * x[i];
        m[i] = b1 * m[i] + (one - b1) * gi;
        v[i] = b2 * v[i] + (one - b2) * gi * gi;
        let mhat = m[i] / c1;
        let vhat = v[i] / c2;
        x[i] = x[i] - lr * mhat / (vhat.sqrt() + eps);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Params<T>,
    pub v: Params<T>,
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &Params<T>) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    /// Updates the tensors whose `trainable` flag is set.
    pub fn step(&mut self, params: &mut Params<T>, grads: &Params<T>, trainable: &[bool], lr: f64, hp: &AdamParams) {
        self.step += 1;
        for (i, p) in params.tensors.iter_mut().enumerate() {
            if trainable[i] {
                adam_update(&mut p.data, &grads.tensors[i].data, &mut self.m.tensors[i].data, &mut self.v.tensors[i].data, self.step, lr, hp);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BestSnapshot<T> {
    pub epoch: u32,
    pub map: f64,
    pub params: Params<T>,
}

/// Everything needed to continue training.
#[derive(Debug, Clone)]
pub struct TrainState<T> {
    pub model: Model<T>,
    pub adam: AdamState<T>,
    /// Number of completed epochs.
    pub epoch: u32,
    pub scores: ScoreStore,
    pub heatmaps: Option<HeatmapStore>,
    pub miner: Option<MinerState>,
    pub best: Option<BestSnapshot<T>>,
}

#[derive(Debug, Clone)]
pub struct EpochLog {
    pub epoch: u32,
    pub lr: f64,
    pub gamma: f64,
    pub train_loss: f64,
    pub val: EvaluationReport,
}

#[derive(Debug, Default, Clone)]
pub struct RunOptions {
    /// Where `metrics.csv`, `checkpoints/`, `heatmaps/` and `masks/` go.
    pub run_dir: Option<PathBuf>,
    /// Continue from `checkpoints/last.bin` in the run directory.
    pub resume: bool,
    /// Stop after this many completed epochs (the schedule still spans all).
    pub stop_after: Option<u32>,
    /// Text stored in checkpoints and compared on resume.
    pub config_text: String,
}

pub struct TrainOutcome<T> {
    pub state: TrainState<T>,
    pub history: Vec<EpochLog>,
}

fn annotations(records: &[DatasetRecord]) -> Vec<AnnotationVector> {
    records.iter().map(|r| r.annotation.clone()).collect()
}

fn num_classes(train: &[DatasetRecord], val: &[DatasetRecord]) -> Result<usize> {
    let l = train
        .first()
        .or(val.first())
        .map(|r| r.annotation.num_classes())
        .ok_or_else(|| Error::InvalidArgument("no training records".into()))?;
    if train.iter().chain(val).any(|r| r.annotation.num_classes() != l) {
        return Err(Error::Shape("records disagree on the number of classes".into()));
    }
    Ok(l)
}

/// Fresh state: initialized model, zero moments, stores at their initial
/// values.
pub fn init_state<T: Real>(config: &TrainConfig, train: &[DatasetRecord], num_classes: usize) -> Result<TrainState<T>> {
    config.validate()?;
    let mc = config.model_config(num_classes);
    mc.validate()?;
    let prior = config.k / num_classes as f64;
    if prior >= 1.0 {
        return Err(Error::config("loss.k", format!("K = {} is not below the class count {num_classes}", config.k)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[config.seed, 1]));
    let model = Model::<T>::init(mc.clone(), prior, &mut rng)?;
    let ann = annotations(train);
    let heatmaps = match config.consistency {
        ConsistencyLoss::Scl => Some(HeatmapStore::new(
            &ann,
            num_classes,
            config.heatmap_scale * mc.grid_size(),
            config.heatmap_momentum,
            config.heatmap_precision,
        )?),
        _ => None,
    };
    let miner = if config.primary.uses_mining() {
        Some(MinerState::new(&ann, num_classes, config.k)?)
    } else {
        None
    };
    Ok(TrainState {
        adam: AdamState::new(&model.params),
        model,
        epoch: 0,
        scores: ScoreStore::new(&ann, num_classes, config.score_momentum)?,
        heatmaps,
        miner,
        best: None,
    })
}

/// Model inputs for evaluation: each image resized straight to the input
/// size.
pub fn eval_inputs<T: Real>(records: &[DatasetRecord], input_size: usize) -> Result<Vec<Tensor<T>>> {
    records
        .iter()
        .map(|r| bilinear_resize(&r.image.to_tensor::<T>(), input_size, input_size))
        .collect()
}

/// Image-level probabilities, row-major `N×L`.
pub fn predict_all<T: Real>(model: &Model<T>, inputs: &[Tensor<T>]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(inputs.len() * model.config.num_classes);
    for x in inputs {
        out.extend(model.predict(x)?.probs.iter().map(|&v| Real::to_f64(v)));
    }
    Ok(out)
}

/// The annotated class used for plain top-1: the single-positive pick for
/// each record.
pub fn top1_targets(records: &[DatasetRecord], seed: u64) -> Result<Vec<usize>> {
    Ok(to_single_positive(records, seed)?
        .iter()
        .map(|r| r.annotation.positives().next().unwrap_or(0))
        .collect())
}

/// Top-1 targets for validation records, as used during training.
pub fn val_top1_targets(records: &[DatasetRecord], config: &TrainConfig) -> Result<Vec<usize>> {
    top1_targets(records, mix_seed(&[config.seed, 4]))
}

pub fn evaluate_records<T: Real>(
    model: &Model<T>,
    inputs: &[Tensor<T>],
    records: &[DatasetRecord],
    targets: &[usize],
    variant: ApVariant,
) -> Result<(EvaluationReport, Vec<f64>)> {
    let scores = predict_all(model, inputs)?;
    let labels: Vec<bool> = records.iter().flat_map(|r| r.labels().to_vec()).collect();
    let p = Predictions::new(&scores, &labels, model.config.num_classes)?;
    Ok((evaluate(&p, targets, variant)?, scores))
}

/// The crop and flip applied to training sample `n` in `epoch`.
pub fn epoch_transform(config: &TrainConfig, epoch: u32, n: usize) -> Result<AugmentationTransform> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[config.seed, 3, epoch as u64, n as u64]));
    sample_transform(&mut rng, &config.crop)
}

struct EpochContext<'a, T> {
    config: &'a TrainConfig,
    model: &'a Model<T>,
    canonical: &'a [Tensor<T>],
    annotations: &'a [AnnotationVector],
    scores: &'a ScoreStore,
    heatmaps: Option<&'a HeatmapStore>,
    miner: Option<&'a MinerState>,
    epoch: u32,
    gamma: f64,
    batch_scale: f64,
}

struct SampleStep<T> {
    n: usize,
    loss: f64,
    grads: Params<T>,
    probs: Vec<f64>,
    prob_map: Tensor<f64>,
    transform: AugmentationTransform,
}

fn sample_step<T: Real>(ctx: &EpochContext<T>, n: usize) -> Result<SampleStep<T>> {
    let cfg = ctx.config;
    let transform = epoch_transform(cfg, ctx.epoch, n)?;
    let input = apply_to_image(&ctx.canonical[n], &transform, cfg.input_size)?;
    let (out, cache) = ctx.model.forward(&input)?;
    let probs: Vec<f64> = out.probs.iter().map(|&v| Real::to_f64(v)).collect();
    let prob_map = out.prob_map.map(|v| Real::to_f64(v));

    let ann = &ctx.annotations[n];
    let l = probs.len();
    let no_mask = vec![false; l];
    let expected = ctx.miner.map_or(&no_mask[..], |m| m.masks.row(n));
    let primary = cfg.primary.evaluate(&probs, &ann.z, expected, cfg.k)?;
    let term = match cfg.consistency {
        ConsistencyLoss::None => None,
        ConsistencyLoss::Cl => {
            let s = ctx.scores.get_f64(n);
            let mut v = cl_loss(&probs, &s)?;
            if cfg.normalized_l2 {
                let k = (l as f64).sqrt();
                v.value /= k;
                v.grad.iter_mut().for_each(|g| *g /= k);
            }
            Some(ConsistencyTerm::Global(v))
        }
        ConsistencyLoss::Scl => {
            let store = ctx.heatmaps.ok_or_else(|| Error::State("spatial consistency without a heatmap store".into()))?;
            let target = store.read_target(n, &transform, ctx.model.config.grid_size())?;
            Some(ConsistencyTerm::Spatial(scl_loss_with_target(&prob_map, &target, cfg.normalized_l2)?))
        }
    };
    let combined = combined_loss(primary, term, ctx.gamma)?;
    let scale = ctx.batch_scale;
    let grad_probs: Vec<T> = combined.grad_probs.iter().map(|&g| T::from_f64(g * scale)).collect();
    let grad_map = match &combined.grad_prob_map {
        Some(gm) => Some(Tensor::new(
            out.prob_map.shape().to_vec(),
            gm.iter().map(|&g| T::from_f64(g * scale)).collect(),
        )?),
        None => None,
    };
    let og = ctx.model.logit_gradients(&out, grad_map.as_ref(), &grad_probs)?;
    let grads = ctx.model.backward(&cache, &og)?;
    Ok(SampleStep {
        n,
        loss: combined.value,
        grads,
        probs,
        prob_map,
        transform,
    })
}

fn trainable_mask<T>(model: &Model<T>, freeze_backbone: bool) -> Vec<bool> {
    model
        .params
        .tensors
        .iter()
        .map(|p| !freeze_backbone || p.name.starts_with("head."))
        .collect()
}

/// Runs the remaining epochs of `state`. Store updates and gradient sums are
/// applied in sample order, so results are identical for any thread count.
fn run_epochs<T: Real>(
    config: &TrainConfig,
    train: &[DatasetRecord],
    val: &[DatasetRecord],
    state: &mut TrainState<T>,
    opts: &RunOptions,
) -> Result<Vec<EpochLog>> {
    let ann = annotations(train);
    let canonical_side = config.canonical_side();
    let canonical: Vec<Tensor<T>> = train
        .iter()
        .map(|r| bilinear_resize(&r.image.to_tensor::<T>(), canonical_side, canonical_side))
        .collect::<Result<_>>()?;
    let val_inputs = eval_inputs::<T>(val, config.input_size)?;
    let val_targets = val_top1_targets(val, config)?;
    let pool = if config.threads > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(config.threads)
                .build()
                .map_err(|e| Error::State(format!("cannot start worker threads: {e}")))?,
        )
    } else {
        None
    };
    let last = opts.stop_after.map_or(config.epochs, |s| s.min(config.epochs));
    let mut history = Vec::new();

    while state.epoch < last {
        let epoch = state.epoch;
        let lr = cosine_lr(epoch, config.epochs, config.lr)?;
        let gamma = config.gamma_max * gamma_schedule(epoch, config.gamma_warmup_epochs)?;
        let frozen = config.freeze_backbone && epoch < config.warmup_epochs;
        let trainable = trainable_mask(&state.model, frozen);

        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[config.seed, 2, epoch as u64])));
        let mut loss_sum = 0.0;

        for batch in order.chunks(config.batch_size) {
            let steps: Vec<Result<SampleStep<T>>> = {
                let ctx = EpochContext {
                    config,
                    model: &state.model,
                    canonical: &canonical,
                    annotations: &ann,
                    scores: &state.scores,
                    heatmaps: state.heatmaps.as_ref(),
                    miner: state.miner.as_ref(),
                    epoch,
                    gamma,
                    batch_scale: 1.0 / batch.len() as f64,
                };
                match &pool {
                    Some(pool) => pool.install(|| batch.par_iter().map(|&n| sample_step(&ctx, n)).collect()),
                    None => batch.iter().map(|&n| sample_step(&ctx, n)).collect(),
                }
            };
            let mut total = state.model.params.zeros_like();
            for step in steps {
                let step = step?;
                if !step.loss.is_finite() || !step.grads.is_finite() {
                    return Err(Error::NonFinite {
                        epoch,
                        sample: train[step.n].id as usize,
                    });
                }
                loss_sum += step.loss;
                total.add_assign(&step.grads);
                state.scores.update(step.n, &step.probs, epoch)?;
                if let Some(h) = state.heatmaps.as_mut() {
                    h.update(step.n, &step.prob_map, &step.transform)?;
                }
            }
            state.adam.step(&mut state.model.params, &total, &trainable, lr, &config.adam);
        }

        if let Some(miner) = state.miner.as_mut() {
            miner.refresh(&state.scores, &ann)?;
        }
        if let (Some(k), Some(h)) = (config.topk, state.heatmaps.as_mut()) {
            if epoch + 1 == config.warmup_epochs.max(1) {
                for n in 0..train.len() {
                    h.retain_topk(n, k, state.scores.get(n))?;
                }
            }
        }

        let (report, _) = evaluate_records(&state.model, &val_inputs, val, &val_targets, config.ap_variant)?;
        let train_loss = loss_sum / train.len().max(1) as f64;
        info!(
            "epoch {epoch}, lr {lr:.6e}, gamma {gamma:.3}, train_loss {train_loss:.6}, val_mAP {:.4}",
            report.map
        );
        if state.best.as_ref().is_none_or(|b| report.map > b.map) {
            state.best = Some(BestSnapshot {
                epoch,
                map: report.map,
                params: state.model.params.clone(),
            });
        }
        state.epoch += 1;

        if let Some(dir) = &opts.run_dir {
            save_checkpoint(&dir.join("checkpoints").join("last.bin"), &opts.config_text, state)?;
            if let Some(best) = state.best.as_ref().filter(|b| b.epoch == epoch) {
                save_model(&dir.join("checkpoints").join("best.bin"), &opts.config_text, &state.model.config, best)?;
            }
            if let Some(miner) = &state.miner {
                miner.dump_csv(&dir.join("masks").join("masks.csv"), epoch, &ann)?;
            }
            let metrics = dir.join("metrics.csv");
            let train_rows = vec![
                ("lr".to_string(), lr),
                ("gamma".to_string(), gamma),
                ("loss".to_string(), train_loss),
            ];
            append_metrics_csv(&metrics, epoch, "train", &train_rows)?;
            append_metrics_csv(&metrics, epoch, "val", &report.rows())?;
        }
        history.push(EpochLog {
            epoch,
            lr,
            gamma,
            train_loss,
            val: report,
        });
    }
    if let (Some(dir), Some(h)) = (&opts.run_dir, &state.heatmaps) {
        h.save(&dir.join("heatmaps").join("store.bin"))?;
    }
    Ok(history)
}

/// Drops `metrics.csv` rows from epochs at or after `epoch`, so a resumed
/// run appends onto exactly the epochs its checkpoint covers.
fn truncate_metrics(path: &Path, epoch: u32) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let kept: String = text
        .lines()
        .enumerate()
        .filter(|(i, line)| *i == 0 || line.split(',').next().and_then(|e| e.parse::<u32>().ok()).is_some_and(|e| e < epoch))
        .map(|(_, line)| format!("{line}\n"))
        .collect();
    fs::write(path, kept).map_err(|e| Error::io(path, e))
}

/// Trains on `train`, validating on `val` after every epoch.
pub fn train<T: Real>(
    config: &TrainConfig,
    train: &[DatasetRecord],
    val: &[DatasetRecord],
    opts: &RunOptions,
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::InvalidArgument("training and validation sets must be non-empty".into()));
    }
    let l = num_classes(train, val)?;
    if val.iter().any(|r| r.annotation.y.is_none()) {
        return Err(Error::InvalidArgument("validation records need full labels".into()));
    }
    let mut state = match (&opts.run_dir, opts.resume) {
        (Some(dir), true) => {
            let path = dir.join("checkpoints").join("last.bin");
            let (text, state) = load_checkpoint::<T>(&path)?;
            if text != opts.config_text {
                return Err(Error::format(&path, "checkpoint was written with a different configuration"));
            }
            if state.scores.len() != train.len() || state.model.config.num_classes != l {
                return Err(Error::format(&path, "checkpoint does not match the training set"));
            }
            truncate_metrics(&dir.join("metrics.csv"), state.epoch)?;
            state
        }
        (Some(dir), false) => {
            let metrics = dir.join("metrics.csv");
            if metrics.exists() {
                fs::remove_file(&metrics).map_err(|e| Error::io(&metrics, e))?;
            }
            let masks = dir.join("masks").join("masks.csv");
            if masks.exists() {
                fs::remove_file(&masks).map_err(|e| Error::io(&masks, e))?;
            }
            init_state(config, train, l)?
        }
        (None, _) => init_state(config, train, l)?,
    };
    if let Some(dir) = &opts.run_dir {
        fs::create_dir_all(dir.join("checkpoints")).map_err(|e| Error::io(dir, e))?;
        if state.epoch == 0 {
            if let Some(h) = &state.heatmaps {
                h.save(&dir.join("heatmaps").join("store.bin"))?;
            }
        }
    }
    let history = run_epochs(config, train, val, &mut state, opts)?;
    Ok(TrainOutcome { state, history })
}

fn push_params<T: Real>(file: &mut ArrayFile, prefix: &str, params: &Params<T>) {
    for p in &params.tensors {
        file.push(NamedArray {
            name: format!("{prefix}.{}", p.name),
            shape: p.shape.clone(),
            data: ArrayData::F64(p.data.iter().map(|&v| Real::to_f64(v)).collect()),
        });
    }
}

fn read_params<T: Real>(file: &ArrayFile, prefix: &str, config: &ModelConfig) -> std::result::Result<Params<T>, String> {
    let mut params = Params::<T>::zeros(config);
    for p in &mut params.tensors {
        let name = format!("{prefix}.{}", p.name);
        let (shape, values) = file.f64s(&name)?;
        if shape != p.shape.as_slice() {
            return Err(format!("`{name}` has shape {shape:?}, expected {:?}", p.shape));
        }
        p.data = values.iter().map(|&v| T::from_f64(v)).collect();
    }
    Ok(params)
}

fn push_model_config(file: &mut ArrayFile, config: &ModelConfig) {
    let mut dims = vec![config.input_size as u32, config.in_channels as u32, config.num_classes as u32];
    dims.extend(config.channels.iter().map(|&c| c as u32));
    file.push(NamedArray {
        name: "model.dims".into(),
        shape: vec![dims.len()],
        data: ArrayData::U32(dims),
    });
    file.push_text("model.global_pool", config.global_pool.name());
}

fn read_model_config(file: &ArrayFile) -> std::result::Result<ModelConfig, String> {
    let (_, dims) = file.u32s("model.dims")?;
    if dims.len() < 4 {
        return Err("`model.dims` is truncated".into());
    }
    let pool = file.text("model.global_pool")?;
    Ok(ModelConfig {
        input_size: dims[0] as usize,
        in_channels: dims[1] as usize,
        num_classes: dims[2] as usize,
        channels: dims[3..].iter().map(|&c| c as usize).collect(),
        global_pool: GlobalPool::parse(&pool).ok_or(format!("unknown global pool `{pool}`"))?,
    })
}

fn write_atomic(path: &Path, file: &ArrayFile) -> Result<()> {
    let tmp = path.with_extension("tmp");
    file.write(&tmp)?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Full training state, for resume.
pub fn save_checkpoint<T: Real>(path: &Path, config_text: &str, state: &TrainState<T>) -> Result<()> {
    let mut file = ArrayFile::default();
    file.push_text("config", config_text);
    push_model_config(&mut file, &state.model.config);
    push_params(&mut file, "params", &state.model.params);
    push_params(&mut file, "adam.m", &state.adam.m);
    push_params(&mut file, "adam.v", &state.adam.v);
    file.push(NamedArray {
        name: "counters".into(),
        shape: vec![2],
        data: ArrayData::I64(vec![state.adam.step as i64, state.epoch as i64]),
    });
    state.scores.to_arrays("scores", &mut file);
    if let Some(h) = &state.heatmaps {
        h.to_arrays("heatmaps", &mut file);
    }
    if let Some(m) = &state.miner {
        m.to_arrays("miner", &mut file);
    }
    if let Some(b) = &state.best {
        push_params(&mut file, "best", &b.params);
        file.push(NamedArray {
            name: "best.meta".into(),
            shape: vec![2],
            data: ArrayData::F64(vec![b.epoch as f64, b.map]),
        });
    }
    write_atomic(path, &file)
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<(String, TrainState<T>)> {
    let file = ArrayFile::read(path)?;
    let parse = || -> std::result::Result<(String, TrainState<T>), String> {
        let text = file.text("config")?;
        let mc = read_model_config(&file)?;
        let params = read_params::<T>(&file, "params", &mc)?;
        let (_, counters) = file.i64s("counters")?;
        if counters.len() != 2 {
            return Err("`counters` must hold two values".into());
        }
        let heatmaps = file.get("heatmaps.meta").map(|_| HeatmapStore::from_arrays("heatmaps", &file)).transpose()?;
        let miner = file.get("miner.k").map(|_| MinerState::from_arrays("miner", &file)).transpose()?;
        let best = match file.get("best.meta") {
            Some(_) => {
                let (_, meta) = file.f64s("best.meta")?;
                Some(BestSnapshot {
                    epoch: meta[0] as u32,
                    map: meta[1],
                    params: read_params::<T>(&file, "best", &mc)?,
                })
            }
            None => None,
        };
        let state = TrainState {
            adam: AdamState {
                m: read_params::<T>(&file, "adam.m", &mc)?,
                v: read_params::<T>(&file, "adam.v", &mc)?,
                step: counters[0] as u64,
            },
            model: Model::new(mc, params).map_err(|e| e.to_string())?,
            epoch: counters[1] as u32,
            scores: ScoreStore::from_arrays("scores", &file)?,
            heatmaps,
            miner,
            best,
        };
        Ok((text, state))
    };
    parse().map_err(|m| Error::format(path, m))
}

/// Model weights with the epoch and validation mAP they were selected at.
pub fn save_model<T: Real>(path: &Path, config_text: &str, config: &ModelConfig, best: &BestSnapshot<T>) -> Result<()> {
    let mut file = ArrayFile::default();
    file.push_text("config", config_text);
    push_model_config(&mut file, config);
    push_params(&mut file, "params", &best.params);
    file.push(NamedArray {
        name: "best.meta".into(),
        shape: vec![2],
        data: ArrayData::F64(vec![best.epoch as f64, best.map]),
    });
    write_atomic(path, &file)
}

pub struct SavedModel<T> {
    pub config_text: String,
    pub model: Model<T>,
    pub epoch: u32,
    pub map: f64,
}

pub fn load_model<T: Real>(path: &Path) -> Result<SavedModel<T>> {
    let file = ArrayFile::read(path)?;
    let parse = || -> std::result::Result<SavedModel<T>, String> {
        let mc = read_model_config(&file)?;
        let params = read_params::<T>(&file, "params", &mc)?;
        let (_, meta) = file.f64s("best.meta")?;
        if meta.len() != 2 {
            return Err("`best.meta` must hold two values".into());
        }
        Ok(SavedModel {
            config_text: file.text("config")?,
            model: Model::new(mc, params).map_err(|e| e.to_string())?,
            epoch: meta[0] as u32,
            map: meta[1],
        })
    };
    parse().map_err(|m| Error::format(path, m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, split, ObjectCount, SplitSpec, SyntheticSpec};

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_lr(0, 10, 0.1).unwrap(), 0.1);
        assert!((cosine_lr(5, 10, 0.1).unwrap() - 0.05).abs() < 1e-15);
        let v = cosine_lr(99, 100, 1.0).unwrap();
        assert!((v - 0.5 * (1.0 + (0.99 * std::f64::consts::PI).cos())).abs() < 1e-15);
        assert!((v - 2.467e-4).abs() < 1e-6);
        assert!(cosine_lr(10, 10, 0.1).is_err());
    }

    #[test]
    fn adam_examples() {
        let hp = AdamParams::default();
        let (mut x, mut m, mut v) = ([0.5f64], [0.0], [0.0]);
        adam_update(&mut x, &[0.0], &mut m, &mut v, 1, 0.1, &hp);
        assert_eq!(x, [0.5]);

        let (mut x, mut m, mut v) = ([1.0f64], [0.0], [0.0]);
        let g = 2.0 * x[0];
        adam_update(&mut x, &[g], &mut m, &mut v, 1, 0.1, &hp);
        assert!((x[0] - 0.9).abs() < 1e-6);

        let (mut x, mut m, mut v) = ([3.0f64, -2.0], [0.0; 2], [0.0; 2]);
        for t in 1..=500 {
            let g = [2.0 * x[0], 4.0 * x[1]];
            adam_update(&mut x, &g, &mut m, &mut v, t, cosine_lr(t as u32 - 1, 500, 0.1).unwrap(), &hp);
        }
        assert!(x.iter().all(|v| v.abs() < 1e-3), "{x:?}");
    }

    #[test]
    fn en_without_consistency_is_rejected() {
        let cfg = TrainConfig {
            primary: PrimaryLoss::En,
            consistency: ConsistencyLoss::None,
            ..TrainConfig::default()
        };
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("loss.primary"), "{err}");
    }

    fn tiny_data() -> (Vec<DatasetRecord>, Vec<DatasetRecord>) {
        let recs = generate_synthetic(&SyntheticSpec {
            num_images: 40,
            num_classes: 4,
            image_size: 16,
            objects: ObjectCount::Fixed(2),
            object_scale: (0.3, 0.4),
            ..SyntheticSpec::default()
        })
        .unwrap();
        let recs = to_single_positive(&recs, 0).unwrap();
        split(&recs, &SplitSpec::default()).unwrap()
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            input_size: 16,
            channels: vec![4, 4, 8],
            epochs: 3,
            k: 2.0,
            primary: PrimaryLoss::En,
            consistency: ConsistencyLoss::Scl,
            topk: Some(2),
            warmup_epochs: 1,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_epochs_returns_initial_state() {
        let (train_set, val_set) = tiny_data();
        let cfg = TrainConfig { epochs: 0, ..tiny_config() };
        let out = train::<f32>(&cfg, &train_set, &val_set, &RunOptions::default()).unwrap();
        let fresh = init_state::<f32>(&cfg, &train_set, 4).unwrap();
        assert!(out.history.is_empty());
        assert_eq!(out.state.model.params, fresh.model.params);
        assert_eq!(out.state.scores, fresh.scores);
        assert_eq!(out.state.heatmaps, fresh.heatmaps);
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let (train_set, val_set) = tiny_data();
        let a = train::<f32>(&tiny_config(), &train_set, &val_set, &RunOptions::default()).unwrap();
        let cfg = TrainConfig { threads: 3, ..tiny_config() };
        let b = train::<f32>(&cfg, &train_set, &val_set, &RunOptions::default()).unwrap();
        assert_eq!(a.state.model.params, b.state.model.params);
        assert_eq!(a.state.scores, b.state.scores);
        assert_eq!(a.state.heatmaps, b.state.heatmaps);
        assert!(a.state.heatmaps.as_ref().unwrap().retained(0).len() <= 2);
        for n in 0..train_set.len() {
            assert_eq!(a.state.scores.last_updated(n), Some(2));
        }
    }

    #[test]
    fn frozen_backbone_keeps_conv_weights() {
        let (train_set, val_set) = tiny_data();
        let cfg = TrainConfig {
            freeze_backbone: true,
            warmup_epochs: 5,
            epochs: 2,
            ..tiny_config()
        };
        let fresh = init_state::<f32>(&cfg, &train_set, 4).unwrap();
        let out = train::<f32>(&cfg, &train_set, &val_set, &RunOptions::default()).unwrap();
        for (a, b) in fresh.model.params.tensors.iter().zip(&out.state.model.params.tensors) {
            assert_eq!(a.data == b.data, a.name.starts_with("conv"), "{}", a.name);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (train_set, val_set) = tiny_data();
        let opts = RunOptions {
            run_dir: Some(dir.path().to_path_buf()),
            config_text: "x = 1\n".into(),
            ..RunOptions::default()
        };
        let out = train::<f32>(&tiny_config(), &train_set, &val_set, &opts).unwrap();
        let (text, loaded) = load_checkpoint::<f32>(&dir.path().join("checkpoints/last.bin")).unwrap();
        assert_eq!(text, "x = 1\n");
        assert_eq!(loaded.model.params, out.state.model.params);
        assert_eq!(loaded.adam, out.state.adam);
        assert_eq!(loaded.scores, out.state.scores);
        assert_eq!(loaded.heatmaps, out.state.heatmaps);
        assert_eq!(loaded.miner, out.state.miner);
        assert_eq!(loaded.best, out.state.best);
        let best = load_model::<f32>(&dir.path().join("checkpoints/best.bin")).unwrap();
        assert_eq!(Some(best.model.params), out.state.best.as_ref().map(|b| b.params.clone()));
    }

    #[test]
    fn resume_with_other_config_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (train_set, val_set) = tiny_data();
        let mut opts = RunOptions {
            run_dir: Some(dir.path().to_path_buf()),
            config_text: "a".into(),
            stop_after: Some(1),
            ..RunOptions::default()
        };
        train::<f32>(&tiny_config(), &train_set, &val_set, &opts).unwrap();
        opts.resume = true;
        opts.config_text = "b".into();
        assert!(train::<f32>(&tiny_config(), &train_set, &val_set, &opts).is_err());
    }
}
