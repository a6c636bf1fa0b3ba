//! Ranking metrics: average precision, mAP, top-1 variants, label-count
//! breakdowns and top-k score histograms.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ApVariant {
    /// Mean precision at the rank of each positive.
    #[default]
    PrecisionAtHits,
    /// Mean of the interpolated precision at recall 0, 0.1, ..., 1.
    ElevenPoint,
}

impl ApVariant {
    pub fn name(self) -> &'static str {
        match self {
            ApVariant::PrecisionAtHits => "hits",
            ApVariant::ElevenPoint => "11point",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "hits" => Some(ApVariant::PrecisionAtHits),
            "11point" => Some(ApVariant::ElevenPoint),
            _ => None,
        }
    }
}

/// Indices by descending score; ties keep the lower index first.
fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Average precision of one class, `None` without positives.
pub fn average_precision(scores: &[f64], labels: &[bool], variant: ApVariant) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "scores and labels differ in length");
    let positives = labels.iter().filter(|&&b| b).count();
    if positives == 0 {
        return None;
    }
    let order = ranking(scores);
    let mut hits = 0usize;
    let mut curve = Vec::with_capacity(positives);
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] {
            hits += 1;
            curve.push((hits as f64 / positives as f64, hits as f64 / (rank + 1) as f64));
        }
    }
    Some(match variant {
        ApVariant::PrecisionAtHits => curve.iter().map(|&(_, p)| p).sum::<f64>() / positives as f64,
        ApVariant::ElevenPoint => {
            (0..=10)
                .map(|t| {
                    let r = t as f64 / 10.0;
                    curve
                        .iter()
                        .filter(|&&(rec, _)| rec >= r - 1e-12)
                        .map(|&(_, p)| p)
                        .fold(0.0, f64::max)
                })
                .sum::<f64>()
                / 11.0
        }
    })
}

/// Row-major `N×L` predictions with matching labels.
#[derive(Debug, Clone, Copy)]
pub struct Predictions<'a> {
    pub scores: &'a [f64],
    pub labels: &'a [bool],
    pub num_classes: usize,
}

impl<'a> Predictions<'a> {
    pub fn new(scores: &'a [f64], labels: &'a [bool], num_classes: usize) -> Result<Self> {
        if num_classes == 0 || scores.len() != labels.len() || scores.len() % num_classes != 0 {
            return Err(Error::Shape(format!(
                "{} scores and {} labels do not form rows of {num_classes} classes",
                scores.len(),
                labels.len()
            )));
        }
        Ok(Self {
            scores,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.scores.len() / self.num_classes
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn row(&self, n: usize) -> (&[f64], &[bool]) {
        let l = self.num_classes;
        (&self.scores[n * l..][..l], &self.labels[n * l..][..l])
    }
}

/// Per-class AP restricted to `rows`; `None` for classes without positives.
fn per_class_ap(p: &Predictions, rows: &[usize], variant: ApVariant) -> Vec<Option<f64>> {
    (0..p.num_classes)
        .map(|c| {
            let s: Vec<f64> = rows.iter().map(|&n| p.row(n).0[c]).collect();
            let y: Vec<bool> = rows.iter().map(|&n| p.row(n).1[c]).collect();
            average_precision(&s, &y, variant)
        })
        .collect()
}

fn mean_defined(aps: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = aps.iter().flatten().copied().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

/// Mean AP over classes with at least one positive.
pub fn mean_average_precision(p: &Predictions, variant: ApVariant) -> Option<f64> {
    let rows: Vec<usize> = (0..p.len()).collect();
    mean_defined(&per_class_ap(p, &rows, variant))
}

/// Highest-scoring class, lower index on ties.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Fraction of images whose top class is any of their positives.
pub fn real_top1(p: &Predictions) -> f64 {
    if p.is_empty() {
        return 0.0;
    }
    let hits = (0..p.len())
        .filter(|&n| {
            let (s, y) = p.row(n);
            y[argmax(s)]
        })
        .count();
    hits as f64 / p.len() as f64
}

/// Fraction of images whose top class equals a reference class.
pub fn top1(p: &Predictions, targets: &[usize]) -> f64 {
    if p.is_empty() {
        return 0.0;
    }
    let hits = (0..p.len()).filter(|&n| argmax(p.row(n).0) == targets[n]).count();
    hits as f64 / p.len() as f64
}

pub const HISTOGRAM_BINS: usize = 20;

/// For each rank `r < k_max`, the per-image `r`-th highest scores binned into
/// 20 equal-width bins on `[0, 1]` (the last bin is closed).
pub fn topk_score_distribution(p: &Predictions, k_max: usize) -> Result<Vec<[usize; HISTOGRAM_BINS]>> {
    if k_max > p.num_classes {
        return Err(Error::InvalidArgument(format!("k_max {k_max} exceeds {} classes", p.num_classes)));
    }
    let mut hist = vec![[0usize; HISTOGRAM_BINS]; k_max];
    for n in 0..p.len() {
        let mut s = p.row(n).0.to_vec();
        s.sort_by(|a, b| b.total_cmp(a));
        for (r, h) in hist.iter_mut().enumerate() {
            let bin = ((s[r].clamp(0.0, 1.0) * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
            h[bin] += 1;
        }
    }
    Ok(hist)
}

/// Per-image `r`-th highest score (0-based rank).
pub fn ranked_scores(p: &Predictions, rank: usize) -> Vec<f64> {
    (0..p.len())
        .map(|n| {
            let mut s = p.row(n).0.to_vec();
            s.sort_by(|a, b| b.total_cmp(a));
            s[rank]
        })
        .collect()
}

/// Label-count buckets: 1, 2, 3 and 4+ positives.
pub const BUCKETS: [&str; 4] = ["1", "2", "3", "4+"];

fn bucket_of(count: usize) -> Option<usize> {
    match count {
        0 => None,
        1..=3 => Some(count - 1),
        _ => Some(3),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BucketReport {
    pub size: usize,
    /// `None` when no class in the bucket has a positive.
    pub map: Option<f64>,
}

/// mAP within each label-count bucket; empty buckets are `None`.
pub fn breakdown_by_label_count(p: &Predictions, variant: ApVariant) -> [Option<BucketReport>; 4] {
    let mut rows: [Vec<usize>; 4] = Default::default();
    for n in 0..p.len() {
        let count = p.row(n).1.iter().filter(|&&b| b).count();
        if let Some(b) = bucket_of(count) {
            rows[b].push(n);
        }
    }
    rows.map(|r| {
        (!r.is_empty()).then(|| BucketReport {
            size: r.len(),
            map: mean_defined(&per_class_ap(p, &r, variant)),
        })
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationReport {
    pub per_class_ap: Vec<Option<f64>>,
    pub map: f64,
    pub top1: f64,
    pub real_top1: f64,
    pub by_label_count: [Option<BucketReport>; 4],
    pub score_histograms: Vec<[usize; HISTOGRAM_BINS]>,
    /// Median of the per-image second-highest score.
    pub median_second_score: f64,
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Full report. `targets` are the annotated classes used for plain top-1.
pub fn evaluate(p: &Predictions, targets: &[usize], variant: ApVariant) -> Result<EvaluationReport> {
    if targets.len() != p.len() {
        return Err(Error::Shape(format!("{} targets for {} images", targets.len(), p.len())));
    }
    let rows: Vec<usize> = (0..p.len()).collect();
    let per_class_ap = per_class_ap(p, &rows, variant);
    let k_max = p.num_classes.min(4);
    Ok(EvaluationReport {
        map: mean_defined(&per_class_ap).unwrap_or(0.0),
        per_class_ap,
        top1: top1(p, targets),
        real_top1: real_top1(p),
        by_label_count: breakdown_by_label_count(p, variant),
        score_histograms: topk_score_distribution(p, k_max)?,
        median_second_score: if p.num_classes >= 2 { median(&ranked_scores(p, 1)) } else { 0.0 },
    })
}

impl EvaluationReport {
    /// `(metric, value)` pairs in a fixed order.
    pub fn rows(&self) -> Vec<(String, f64)> {
        let mut out = vec![
            ("mAP".to_string(), self.map),
            ("top1".to_string(), self.top1),
            ("real_top1".to_string(), self.real_top1),
            ("median_second_score".to_string(), self.median_second_score),
        ];
        for (c, ap) in self.per_class_ap.iter().enumerate() {
            if let Some(ap) = ap {
                out.push((format!("AP_class{c}"), *ap));
            }
        }
        for (name, b) in BUCKETS.iter().zip(&self.by_label_count) {
            if let Some(BucketReport { map: Some(m), .. }) = b {
                out.push((format!("mAP_k{name}"), *m));
            }
        }
        for (r, h) in self.score_histograms.iter().enumerate() {
            for (bin, &count) in h.iter().enumerate() {
                out.push((format!("hist_rank{}_bin{bin:02}", r + 1), count as f64));
            }
        }
        out
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "mAP        {:.4}", self.map);
        let _ = writeln!(s, "top-1      {:.4}", self.top1);
        let _ = writeln!(s, "ReaL top-1 {:.4}", self.real_top1);
        for (name, b) in BUCKETS.iter().zip(&self.by_label_count) {
            match b {
                Some(BucketReport { size, map: Some(m) }) => {
                    let _ = writeln!(s, "mAP k={name:<3} {m:.4} ({size} images)");
                }
                _ => {
                    let _ = writeln!(s, "mAP k={name:<3} n/a");
                }
            }
        }
        s
    }
}

/// Appends `epoch,split,metric,value` rows, writing the header for a new file.
pub fn append_metrics_csv(path: &Path, epoch: u32, split: &str, rows: &[(String, f64)]) -> Result<()> {
    let mut out = String::new();
    if !path.exists() {
        out.push_str("epoch,split,metric,value\n");
    }
    for (metric, value) in rows {
        let _ = writeln!(out, "{epoch},{split},{metric},{value}");
    }
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Precision recomputed from scratch at every rank holding a positive.
    fn ap_oracle(scores: &[f64], labels: &[bool]) -> f64 {
        let n = scores.len();
        let beats = |a: usize, b: usize| scores[a] > scores[b] || (scores[a] == scores[b] && a < b);
        let mut total = 0.0;
        let mut pos = 0;
        for i in 0..n {
            if !labels[i] {
                continue;
            }
            pos += 1;
            let rank = (0..n).filter(|&j| j == i || beats(j, i)).count();
            let hits = (0..n).filter(|&j| labels[j] && (j == i || beats(j, i))).count();
            total += hits as f64 / rank as f64;
        }
        total / pos as f64
    }

    #[test]
    fn ap_examples() {
        let v = ApVariant::PrecisionAtHits;
        assert_eq!(average_precision(&[0.9, 0.8, 0.1], &[true, true, false], v), Some(1.0));
        let ap = average_precision(&[0.9, 0.8, 0.7, 0.1], &[true, false, true, false], v).unwrap();
        assert!((ap - 0.8333).abs() < 1e-4);
        assert_eq!(average_precision(&[0.3, 0.2], &[false, false], v), None);
        // Ties rank the lower index first.
        assert_eq!(average_precision(&[0.5, 0.5], &[false, true], v), Some(0.5));
    }

    #[test]
    fn eleven_point_variant() {
        let v = ApVariant::ElevenPoint;
        assert_eq!(average_precision(&[0.9, 0.1], &[true, false], v), Some(1.0));
        let ap = average_precision(&[0.9, 0.8, 0.7, 0.1], &[true, false, true, false], v).unwrap();
        // Recall 0..0.5 has precision 1, recall 0.6..1 has 2/3.
        assert!((ap - (6.0 + 5.0 * 2.0 / 3.0) / 11.0).abs() < 1e-12);
    }

    #[test]
    fn ap_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let n = rng.random_range(1..=50);
            let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(0..10) as f64) / 10.0).collect();
            let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
            labels[rng.random_range(0..n)] = true;
            let ap = average_precision(&scores, &labels, ApVariant::PrecisionAtHits).unwrap();
            assert!((ap - ap_oracle(&scores, &labels)).abs() <= 1e-9);
        }
    }

    #[test]
    fn real_top1_examples() {
        let s = [0.1, 0.9, 0.3];
        let y = [false, true, true];
        assert_eq!(real_top1(&Predictions::new(&s, &y, 3).unwrap()), 1.0);
        let y = [true, false, false];
        assert_eq!(real_top1(&Predictions::new(&s, &y, 3).unwrap()), 0.0);
        let s = [0.9, 0.1, 0.9, 0.1, 0.1, 0.9, 0.5, 0.5];
        let y = [true, false, true, true, false, true, false, true];
        // Image 3 ties and picks class 0, a miss.
        assert_eq!(real_top1(&Predictions::new(&s, &y, 2).unwrap()), 0.75);
        assert_eq!(top1(&Predictions::new(&s, &y, 2).unwrap(), &[0, 1, 1, 0]), 0.75);
    }

    #[test]
    fn histograms() {
        let s: Vec<f64> = [0.9, 0.6, 0.3, 0.05].repeat(5);
        let y = vec![true; 20];
        let p = Predictions::new(&s, &y, 4).unwrap();
        let h = topk_score_distribution(&p, 4).unwrap();
        for (r, bin) in [(0, 18), (1, 12), (2, 6), (3, 1)] {
            assert_eq!(h[r][bin], 5);
            assert_eq!(h[r].iter().sum::<usize>(), 5);
        }
        assert!(topk_score_distribution(&p, 5).is_err());
        let one = [1.0, 0.0];
        let p = Predictions::new(&one, &[true, false], 2).unwrap();
        assert_eq!(topk_score_distribution(&p, 2).unwrap()[0][19], 1);
    }

    #[test]
    fn buckets() {
        let s = [0.9, 0.1, 0.2, 0.8, 0.3, 0.7];
        let y = [true, false, false, true, true, false];
        let p = Predictions::new(&s, &y, 2).unwrap();
        let b = breakdown_by_label_count(&p, ApVariant::PrecisionAtHits);
        assert_eq!(b[0].as_ref().unwrap().size, 3);
        assert!(b[1].is_none() && b[2].is_none() && b[3].is_none());
        assert_eq!(b[0].as_ref().unwrap().map, mean_average_precision(&p, ApVariant::PrecisionAtHits));
    }

    #[test]
    fn report_and_csv() {
        let dir = tempfile::tempdir().unwrap();
        let s = [0.9, 0.2, 0.3, 0.8, 0.6, 0.7];
        let y = [true, false, false, true, true, true];
        let p = Predictions::new(&s, &y, 2).unwrap();
        let r = evaluate(&p, &[0, 1, 1], ApVariant::PrecisionAtHits).unwrap();
        assert!(r.rows().iter().all(|(_, v)| v.is_finite()));
        assert!(r.summary().contains("mAP"));
        let path = dir.path().join("metrics.csv");
        append_metrics_csv(&path, 0, "val", &r.rows()).unwrap();
        append_metrics_csv(&path, 1, "val", &r.rows()).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next(), Some("epoch,split,metric,value"));
        assert_eq!(text.lines().count(), 1 + 2 * r.rows().len());
    }

    proptest! {
        #[test]
        fn ap_is_rank_invariant(seed in any::<u64>(), n in 1usize..40) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let scores: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
            labels[0] = true;
            let a = average_precision(&scores, &labels, ApVariant::PrecisionAtHits).unwrap();
            let warped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
            let b = average_precision(&warped, &labels, ApVariant::PrecisionAtHits).unwrap();
            prop_assert_eq!(a, b);
            prop_assert!((0.0..=1.0).contains(&a));
        }

        #[test]
        fn ranked_scores_are_ordered(seed in any::<u64>(), n in 1usize..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s: Vec<f64> = (0..n * 4).map(|_| rng.random::<f64>()).collect();
            let y = vec![true; n * 4];
            let p = Predictions::new(&s, &y, 4).unwrap();
            let (r1, r2) = (ranked_scores(&p, 0), ranked_scores(&p, 1));
            prop_assert!(r1.iter().zip(&r2).all(|(a, b)| a >= b));
        }
    }
}
