//! Supervision terms and their analytic gradients.
//!
//! Every loss returns its value together with the gradient with respect to
//! the probabilities it was evaluated on. Probabilities are clamped to
//! `[PROB_CLAMP, 1 - PROB_CLAMP]` before taking logarithms; the gradient of a
//! log term is zero where the clamp is active.

use crate::augment::{extract_region, region_on_heatmap, AugmentationTransform};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const PROB_CLAMP: f64 = 1e-7;

/// One entry of a partial annotation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    Positive,
    Negative,
    Unknown,
}

/// Partial training annotation `z`, optionally with the full labels `y`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotationVector {
    pub z: Vec<Label>,
    pub y: Option<Vec<bool>>,
}

impl AnnotationVector {
    pub fn new(z: Vec<Label>, y: Option<Vec<bool>>) -> Result<Self> {
        let a = Self { z, y };
        a.validate()?;
        Ok(a)
    }

    /// Fully annotated vector: every class is either positive or negative.
    pub fn full(y: &[bool]) -> Self {
        Self {
            z: y.iter()
                .map(|&p| if p { Label::Positive } else { Label::Negative })
                .collect(),
            y: Some(y.to_vec()),
        }
    }

    pub fn single_positive(num_classes: usize, class: usize, y: Option<Vec<bool>>) -> Result<Self> {
        if class >= num_classes {
            return Err(Error::InvalidArgument(format!(
                "class {class} out of range for {num_classes} classes"
            )));
        }
        let mut z = vec![Label::Unknown; num_classes];
        z[class] = Label::Positive;
        Self::new(z, y)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(y) = &self.y {
            if y.len() != self.z.len() {
                return Err(Error::Shape(format!(
                    "full labels have {} classes, annotation has {}",
                    y.len(),
                    self.z.len()
                )));
            }
            for (i, (&zi, &yi)) in self.z.iter().zip(y).enumerate() {
                if (zi == Label::Positive && !yi) || (zi == Label::Negative && yi) {
                    return Err(Error::InvalidArgument(format!(
                        "annotation of class {i} contradicts the full labels"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.z.len()
    }

    pub fn positives(&self) -> impl Iterator<Item = usize> + '_ {
        self.z
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == Label::Positive)
            .map(|(i, _)| i)
    }

    /// Exactly one positive and no negatives.
    pub fn is_single_positive(&self) -> bool {
        self.positives().count() == 1 && !self.z.contains(&Label::Negative)
    }
}

/// Loss value with its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad: Vec<f64>,
}

fn check_len(f: &[f64], n: usize, what: &str) -> Result<()> {
    if f.len() != n {
        return Err(Error::Shape(format!(
            "{what} has {n} entries, predictions have {}",
            f.len()
        )));
    }
    Ok(())
}

/// `-(1/L) Σ [pos_i] log f_i + [neg_i] log(1 - f_i)`.
fn masked_bce(f: &[f64], pos: impl Fn(usize) -> bool, neg: impl Fn(usize) -> bool) -> LossValue {
    let l = f.len() as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; f.len()];
    for (i, &fi) in f.iter().enumerate() {
        let fc = fi.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        let active = fi == fc;
        if pos(i) {
            value -= fc.ln();
            if active {
                grad[i] -= 1.0 / fc;
            }
        }
        if neg(i) {
            value -= (1.0 - fc).ln();
            if active {
                grad[i] += 1.0 / (1.0 - fc);
            }
        }
    }
    grad.iter_mut().for_each(|g| *g /= l);
    LossValue { value: value / l, grad }
}

/// Binary cross-entropy over annotated entries; unknown entries are ignored.
pub fn bce_loss(f: &[f64], z: &[Label]) -> Result<LossValue> {
    check_len(f, z.len(), "annotation")?;
    Ok(masked_bce(f, |i| z[i] == Label::Positive, |i| z[i] == Label::Negative))
}

/// Assume-negative: unknown entries are treated as negatives.
pub fn an_loss(f: &[f64], z: &[Label]) -> Result<LossValue> {
    check_len(f, z.len(), "annotation")?;
    Ok(masked_bce(f, |i| z[i] == Label::Positive, |i| z[i] != Label::Positive))
}

/// Expected-negative: only entries outside the expected-positive mask are
/// supervised as negatives.
pub fn en_loss(f: &[f64], z: &[Label], expected: &[bool]) -> Result<LossValue> {
    check_len(f, z.len(), "annotation")?;
    check_len(f, expected.len(), "expected-positive mask")?;
    Ok(masked_bce(f, |i| z[i] == Label::Positive, |i| !expected[i]))
}

/// Expected-positive: mined entries are supervised as positives.
pub fn ep_loss(f: &[f64], z: &[Label], expected: &[bool]) -> Result<LossValue> {
    check_len(f, z.len(), "annotation")?;
    check_len(f, expected.len(), "expected-positive mask")?;
    Ok(masked_bce(
        f,
        |i| z[i] == Label::Positive || expected[i],
        |i| !expected[i],
    ))
}

/// Positive log-likelihood plus `((Σ f - k) / L)²`, pulling the predicted
/// positive count towards `k`.
pub fn epr_loss(f: &[f64], z: &[Label], k: f64) -> Result<LossValue> {
    check_len(f, z.len(), "annotation")?;
    if k.is_nan() || k <= 0.0 {
        return Err(Error::InvalidArgument(format!("expected positive count must be > 0, got {k}")));
    }
    let mut out = masked_bce(f, |i| z[i] == Label::Positive, |_| false);
    let l = f.len() as f64;
    let excess = (f.iter().sum::<f64>() - k) / l;
    out.value += excess * excess;
    let d = 2.0 * excess / l;
    out.grad.iter_mut().for_each(|g| *g += d);
    Ok(out)
}

/// Euclidean distance `‖a - target‖₂` (divided by `sqrt(n)` when
/// `normalized`), with gradient `(a - target) / ‖a - target‖₂`, zero at
/// coincidence.
pub fn l2_distance(a: &[f64], target: &[f64], normalized: bool) -> Result<LossValue> {
    check_len(a, target.len(), "target")?;
    let sq: f64 = a.iter().zip(target).map(|(x, t)| (x - t) * (x - t)).sum();
    let norm = sq.sqrt();
    let scale = if normalized { (a.len() as f64).sqrt() } else { 1.0 };
    let grad = if norm > 0.0 {
        a.iter()
            .zip(target)
            .map(|(x, t)| (x - t) / (norm * scale))
            .collect()
    } else {
        vec![0.0; a.len()]
    };
    Ok(LossValue {
        value: norm / scale,
        grad,
    })
}

/// Consistency between image-level predictions and their running estimates.
pub fn cl_loss(f: &[f64], estimates: &[f64]) -> Result<LossValue> {
    l2_distance(f, estimates, false)
}

/// Spatial consistency against an already aligned `G×G×L` target.
pub fn scl_loss_with_target(score_map: &Tensor<f64>, target: &Tensor<f64>, normalized: bool) -> Result<LossValue> {
    if score_map.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "score map {:?} vs target {:?}",
            score_map.shape(),
            target.shape()
        )));
    }
    l2_distance(score_map.data(), target.data(), normalized)
}

/// Spatial consistency between a `G×G×L` score map and the part of the
/// `W×W×L` heatmap visible through `t`, resized to `G×G`.
pub fn scl_loss(score_map: &Tensor<f64>, heatmap: &Tensor<f64>, t: &AugmentationTransform) -> Result<LossValue> {
    let (g, gw, l) = score_map.dims3()?;
    let (w, ww, hl) = heatmap.dims3()?;
    if g != gw || w != ww || l != hl {
        return Err(Error::Shape(format!(
            "score map {:?} and heatmap {:?} are incompatible",
            score_map.shape(),
            heatmap.shape()
        )));
    }
    if w % g != 0 {
        return Err(Error::InvalidArgument(format!(
            "heatmap side {w} is not a multiple of the score-map side {g}"
        )));
    }
    t.validate()?;
    let region = region_on_heatmap(t, w)?;
    let target = extract_region(heatmap, &region, g, g)?;
    scl_loss_with_target(score_map, &target, false)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrimaryLoss {
    Bce,
    An,
    En,
    Ep,
    Epr,
}

impl PrimaryLoss {
    pub fn name(self) -> &'static str {
        match self {
            PrimaryLoss::Bce => "bce",
            PrimaryLoss::An => "an",
            PrimaryLoss::En => "en",
            PrimaryLoss::Ep => "ep",
            PrimaryLoss::Epr => "epr",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "bce" => PrimaryLoss::Bce,
            "an" => PrimaryLoss::An,
            "en" => PrimaryLoss::En,
            "ep" => PrimaryLoss::Ep,
            "epr" => PrimaryLoss::Epr,
            _ => return None,
        })
    }

    /// Whether the loss consumes mined expected-positive masks.
    pub fn uses_mining(self) -> bool {
        matches!(self, PrimaryLoss::En | PrimaryLoss::Ep)
    }

    pub fn evaluate(self, f: &[f64], z: &[Label], expected: &[bool], k: f64) -> Result<LossValue> {
        match self {
            PrimaryLoss::Bce => bce_loss(f, z),
            PrimaryLoss::An => an_loss(f, z),
            PrimaryLoss::En => en_loss(f, z, expected),
            PrimaryLoss::Ep => ep_loss(f, z, expected),
            PrimaryLoss::Epr => epr_loss(f, z, k),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConsistencyLoss {
    None,
    Cl,
    Scl,
}

impl ConsistencyLoss {
    pub fn name(self) -> &'static str {
        match self {
            ConsistencyLoss::None => "none",
            ConsistencyLoss::Cl => "cl",
            ConsistencyLoss::Scl => "scl",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "none" => ConsistencyLoss::None,
            "cl" => ConsistencyLoss::Cl,
            "scl" => ConsistencyLoss::Scl,
            _ => return None,
        })
    }
}

/// A consistency term, on the image-level scores or on the spatial map.
#[derive(Debug, Clone)]
pub enum ConsistencyTerm {
    Global(LossValue),
    Spatial(LossValue),
}

/// `primary + gamma * consistency` with the gradients split by where they
/// enter the model.
#[derive(Debug, Clone, PartialEq)]
pub struct CombinedLoss {
    pub value: f64,
    pub primary: f64,
    pub consistency: f64,
    /// Gradient with respect to the image-level probabilities.
    pub grad_probs: Vec<f64>,
    /// Gradient with respect to the spatial probabilities, flattened
    /// `G×G×L`, present only for a spatial term.
    pub grad_prob_map: Option<Vec<f64>>,
}

pub fn combined_loss(primary: LossValue, consistency: Option<ConsistencyTerm>, gamma: f64) -> Result<CombinedLoss> {
    if gamma.is_nan() || gamma < 0.0 {
        return Err(Error::InvalidArgument(format!("gamma must be >= 0, got {gamma}")));
    }
    let LossValue { value: pv, grad: mut grad_probs } = primary;
    let (cv, grad_prob_map) = match consistency {
        None => (0.0, None),
        Some(ConsistencyTerm::Global(c)) => {
            check_len(&grad_probs, c.grad.len(), "consistency gradient")?;
            for (g, &d) in grad_probs.iter_mut().zip(&c.grad) {
                *g += gamma * d;
            }
            (c.value, None)
        }
        Some(ConsistencyTerm::Spatial(c)) => {
            let map = c.grad.iter().map(|&d| gamma * d).collect();
            (c.value, Some(map))
        }
    };
    Ok(CombinedLoss {
        value: pv + gamma * cv,
        primary: pv,
        consistency: cv,
        grad_probs,
        grad_prob_map,
    })
}

/// Linear ramp of the consistency weight from 0 at epoch 0 to 1 at
/// `warmup_epochs`.
pub fn gamma_schedule(epoch: u32, warmup_epochs: u32) -> Result<f64> {
    if warmup_epochs == 0 {
        return Err(Error::InvalidArgument("warmup must span at least one epoch".into()));
    }
    Ok((epoch as f64 / warmup_epochs as f64).min(1.0))
}
