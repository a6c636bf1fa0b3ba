//! Plain-text run configuration: one `key = value` per line, `#` comments.
//! Every key has a default; unknown keys are rejected.

use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::augment::CropParams;
use crate::consistency::StoragePrecision;
use crate::data::{load_dataset, split, to_single_positive, DatasetRecord, SplitSpec};
use crate::error::{Error, Result};
use crate::losses::{AnnotationVector, ConsistencyLoss, PrimaryLoss};
use crate::metrics::ApVariant;
use crate::model::GlobalPool;
use crate::trainer::{Precision, TrainConfig};

/// How training annotations are derived from a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnnotationMode {
    /// Use `annotations.csv` as stored.
    Stored,
    /// Redraw one positive per image from the full labels.
    SinglePositive,
    /// Train on the full labels.
    Full,
}

impl AnnotationMode {
    pub fn name(self) -> &'static str {
        match self {
            AnnotationMode::Stored => "stored",
            AnnotationMode::SinglePositive => "single_positive",
            AnnotationMode::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "stored" => Some(AnnotationMode::Stored),
            "single_positive" => Some(AnnotationMode::SinglePositive),
            "full" => Some(AnnotationMode::Full),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    /// Dataset directory; empty when unset.
    pub dir: String,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub split_seed: u64,
    pub annotation: AnnotationMode,
    pub label_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: String::new(),
            train_fraction: 0.8,
            val_fraction: 0.2,
            split_seed: 0,
            annotation: AnnotationMode::Stored,
            label_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub train: TrainConfig,
}

pub const KEYS: &[&str] = &[
    "aug.area_max",
    "aug.area_min",
    "aug.hflip_prob",
    "aug.square",
    "data.annotation",
    "data.dir",
    "data.label_seed",
    "data.split_seed",
    "data.train_fraction",
    "data.val_fraction",
    "ema.heatmap_momentum",
    "ema.heatmap_precision",
    "ema.heatmap_scale",
    "ema.score_momentum",
    "ema.topk",
    "eval.ap_variant",
    "loss.consistency",
    "loss.gamma",
    "loss.gamma_warmup_epochs",
    "loss.k",
    "loss.normalized",
    "loss.primary",
    "model.channels",
    "model.global_pool",
    "model.input_size",
    "train.batch_size",
    "train.beta1",
    "train.beta2",
    "train.epochs",
    "train.eps",
    "train.freeze_backbone",
    "train.lr",
    "train.precision",
    "train.seed",
    "train.threads",
    "train.warmup_epochs",
    "train.weight_decay",
];

fn num<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value.parse().map_err(|e: T::Err| Error::config(key, format!("cannot parse `{value}`: {e}")))
}

fn flag(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::config(key, format!("expected true or false, got `{value}`"))),
    }
}

fn choice<T>(key: &str, value: &str, parse: fn(&str) -> Option<T>, options: &str) -> Result<T> {
    parse(value).ok_or_else(|| Error::config(key, format!("expected one of {options}, got `{value}`")))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let t = &mut self.train;
        let d = &mut self.data;
        match key {
            "aug.area_max" => t.crop.area_max = num(key, value)?,
            "aug.area_min" => t.crop.area_min = num(key, value)?,
            "aug.hflip_prob" => t.crop.hflip_prob = num(key, value)?,
            "aug.square" => t.crop.square = flag(key, value)?,
            "data.annotation" => d.annotation = choice(key, value, AnnotationMode::parse, "stored, single_positive, full")?,
            "data.dir" => d.dir = value.to_string(),
            "data.label_seed" => d.label_seed = num(key, value)?,
            "data.split_seed" => d.split_seed = num(key, value)?,
            "data.train_fraction" => d.train_fraction = num(key, value)?,
            "data.val_fraction" => d.val_fraction = num(key, value)?,
            "ema.heatmap_momentum" => t.heatmap_momentum = num(key, value)?,
            "ema.heatmap_precision" => t.heatmap_precision = choice(key, value, StoragePrecision::parse, "f32, f16")?,
            "ema.heatmap_scale" => t.heatmap_scale = num(key, value)?,
            "ema.score_momentum" => t.score_momentum = num(key, value)?,
            "ema.topk" => {
                let k: usize = num(key, value)?;
                t.topk = (k > 0).then_some(k);
            }
            "eval.ap_variant" => t.ap_variant = choice(key, value, ApVariant::parse, "hits, 11point")?,
            "loss.consistency" => t.consistency = choice(key, value, ConsistencyLoss::parse, "none, cl, scl")?,
            "loss.gamma" => t.gamma_max = num(key, value)?,
            "loss.gamma_warmup_epochs" => t.gamma_warmup_epochs = num(key, value)?,
            "loss.k" => t.k = num(key, value)?,
            "loss.normalized" => t.normalized_l2 = flag(key, value)?,
            "loss.primary" => t.primary = choice(key, value, PrimaryLoss::parse, "bce, an, en, ep, epr")?,
            "model.channels" => {
                t.channels = value
                    .split(',')
                    .map(|c| num(key, c.trim()))
                    .collect::<Result<Vec<usize>>>()?;
            }
            "model.global_pool" => t.global_pool = choice(key, value, GlobalPool::parse, "logit_mean, probability_mean")?,
            "model.input_size" => t.input_size = num(key, value)?,
            "train.batch_size" => t.batch_size = num(key, value)?,
            "train.beta1" => t.adam.beta1 = num(key, value)?,
            "train.beta2" => t.adam.beta2 = num(key, value)?,
            "train.epochs" => t.epochs = num(key, value)?,
            "train.eps" => t.adam.eps = num(key, value)?,
            "train.freeze_backbone" => t.freeze_backbone = flag(key, value)?,
            "train.lr" => t.lr = num(key, value)?,
            "train.precision" => t.precision = choice(key, value, Precision::parse, "f32, f64")?,
            "train.seed" => t.seed = num(key, value)?,
            "train.threads" => t.threads = num(key, value)?,
            "train.warmup_epochs" => t.warmup_epochs = num(key, value)?,
            "train.weight_decay" => t.adam.weight_decay = num(key, value)?,
            _ => return Err(Error::config(key, "unknown configuration key")),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let t = &self.train;
        let d = &self.data;
        let c: &CropParams = &t.crop;
        Some(match key {
            "aug.area_max" => c.area_max.to_string(),
            "aug.area_min" => c.area_min.to_string(),
            "aug.hflip_prob" => c.hflip_prob.to_string(),
            "aug.square" => c.square.to_string(),
            "data.annotation" => d.annotation.name().to_string(),
            "data.dir" => d.dir.clone(),
            "data.label_seed" => d.label_seed.to_string(),
            "data.split_seed" => d.split_seed.to_string(),
            "data.train_fraction" => d.train_fraction.to_string(),
            "data.val_fraction" => d.val_fraction.to_string(),
            "ema.heatmap_momentum" => t.heatmap_momentum.to_string(),
            "ema.heatmap_precision" => t.heatmap_precision.name().to_string(),
            "ema.heatmap_scale" => t.heatmap_scale.to_string(),
            "ema.score_momentum" => t.score_momentum.to_string(),
            "ema.topk" => t.topk.unwrap_or(0).to_string(),
            "eval.ap_variant" => t.ap_variant.name().to_string(),
            "loss.consistency" => t.consistency.name().to_string(),
            "loss.gamma" => t.gamma_max.to_string(),
            "loss.gamma_warmup_epochs" => t.gamma_warmup_epochs.to_string(),
            "loss.k" => t.k.to_string(),
            "loss.normalized" => t.normalized_l2.to_string(),
            "loss.primary" => t.primary.name().to_string(),
            "model.channels" => t.channels.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(","),
            "model.global_pool" => t.global_pool.name().to_string(),
            "model.input_size" => t.input_size.to_string(),
            "train.batch_size" => t.batch_size.to_string(),
            "train.beta1" => t.adam.beta1.to_string(),
            "train.beta2" => t.adam.beta2.to_string(),
            "train.epochs" => t.epochs.to_string(),
            "train.eps" => t.adam.eps.to_string(),
            "train.freeze_backbone" => t.freeze_backbone.to_string(),
            "train.lr" => t.lr.to_string(),
            "train.precision" => t.precision.name().to_string(),
            "train.seed" => t.seed.to_string(),
            "train.threads" => t.threads.to_string(),
            "train.warmup_epochs" => t.warmup_epochs.to_string(),
            "train.weight_decay" => t.adam.weight_decay.to_string(),
            _ => return None,
        })
    }

    /// Applies `key = value` lines on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(line, format!("line {}: expected `key = value`", i + 1)))?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// Every key with its effective value, sorted by key.
    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k} = {}\n", self.get(k).unwrap_or_default()))
            .collect()
    }

    /// Loads `data.dir`, derives the training annotations and splits.
    pub fn load_splits(&self) -> Result<(Vec<DatasetRecord>, Vec<DatasetRecord>)> {
        let d = &self.data;
        if d.dir.is_empty() {
            return Err(Error::config("data.dir", "no dataset directory given"));
        }
        let records = load_dataset(Path::new(&d.dir))?;
        let records = match d.annotation {
            AnnotationMode::Stored => records,
            AnnotationMode::SinglePositive => to_single_positive(&records, d.label_seed)?,
            AnnotationMode::Full => records
                .into_iter()
                .map(|mut r| {
                    let y = r.annotation.y.clone().ok_or_else(|| {
                        Error::config("data.annotation", format!("record {} has no full labels", r.id))
                    })?;
                    r.annotation = AnnotationVector::full(&y);
                    Ok(r)
                })
                .collect::<Result<_>>()?,
        };
        split(
            &records,
            &SplitSpec {
                train: d.train_fraction,
                val: d.val_fraction,
                seed: d.split_seed,
            },
        )
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if !(d.train_fraction > 0.0 && d.val_fraction > 0.0 && d.train_fraction + d.val_fraction <= 1.0 + 1e-12) {
            return Err(Error::config(
                "data.train_fraction",
                "split fractions must be positive and sum to at most 1",
            ));
        }
        self.train.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("loss.primary = en\nloss.consistency = scl # full method\nmodel.channels = 4, 8\nema.topk = 3\n").unwrap();
        assert_eq!(cfg.train.primary, PrimaryLoss::En);
        assert_eq!(cfg.train.channels, vec![4, 8]);
        let text = cfg.to_text();
        assert_eq!(RunConfig::from_text(&text).unwrap(), cfg);
        assert_eq!(text.lines().count(), KEYS.len());
    }

    #[test]
    fn every_key_is_readable_and_writable() {
        let mut cfg = RunConfig::default();
        for k in KEYS {
            let v = cfg.get(k).unwrap_or_else(|| panic!("{k} has no getter"));
            cfg.set(k, &v).unwrap();
        }
        assert_eq!(cfg, RunConfig::default());
        let mut sorted = KEYS.to_vec();
        sorted.sort_unstable();
        assert_eq!(sorted, KEYS);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::from_text("loss.gama = 1\n").unwrap_err().to_string();
        assert!(err.contains("loss.gama"), "{err}");
    }

    #[test]
    fn bad_values_are_rejected() {
        assert!(RunConfig::from_text("loss.primary = xyz").is_err());
        assert!(RunConfig::from_text("train.epochs = -1").is_err());
        assert!(RunConfig::from_text("aug.square = maybe").is_err());
        assert!(RunConfig::from_text("just words").is_err());
        let cfg = RunConfig::from_text("loss.primary = en").unwrap();
        assert!(cfg.validate().is_err());
    }
}
