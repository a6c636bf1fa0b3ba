//! Expected-positive mining from running score estimates.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::consistency::ScoreStore;
use crate::container::{ArrayData, ArrayFile, NamedArray};
use crate::error::{Error, Result};
use crate::losses::AnnotationVector;

/// Annotated positive count per class.
pub fn annotated_counts(annotations: &[AnnotationVector], num_classes: usize) -> Result<Vec<usize>> {
    let mut counts = vec![0usize; num_classes];
    for (n, a) in annotations.iter().enumerate() {
        if a.num_classes() != num_classes {
            return Err(Error::Shape(format!("sample {n} has {} classes, expected {num_classes}", a.num_classes())));
        }
        for c in a.positives() {
            counts[c] += 1;
        }
    }
    Ok(counts)
}

/// Per-class budgets `p_i = round(K · count_i)`, rounding half up and never
/// below the annotated count.
pub fn class_budgets(annotations: &[AnnotationVector], num_classes: usize, k: f64) -> Result<Vec<usize>> {
    if !(k > 0.0 && k.is_finite()) {
        return Err(Error::InvalidArgument(format!("K must be positive, got {k}")));
    }
    Ok(annotated_counts(annotations, num_classes)?
        .into_iter()
        .map(|count| {
            // Absorbs representation error: 2.3 · 25 evaluates to 57.4999….
            let p = (k * count as f64 + 0.5 + 1e-9).floor() as usize;
            p.max(count)
        })
        .collect())
}

/// Expected-positive masks `ẑ`, row-major `N×L`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Masks {
    num_samples: usize,
    num_classes: usize,
    bits: Vec<bool>,
}

impl Masks {
    /// The epoch-0 masks: annotated positives only.
    pub fn annotated(annotations: &[AnnotationVector], num_classes: usize) -> Self {
        let mut bits = vec![false; annotations.len() * num_classes];
        for (n, a) in annotations.iter().enumerate() {
            for c in a.positives() {
                bits[n * num_classes + c] = true;
            }
        }
        Self {
            num_samples: annotations.len(),
            num_classes,
            bits,
        }
    }

    pub fn row(&self, n: usize) -> &[bool] {
        &self.bits[n * self.num_classes..][..self.num_classes]
    }

    pub fn get(&self, n: usize, class: usize) -> bool {
        self.bits[n * self.num_classes + class]
    }

    pub fn num_samples(&self) -> usize {
        self.num_samples
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn class_count(&self, class: usize) -> usize {
        (0..self.num_samples).filter(|&n| self.get(n, class)).count()
    }

    fn to_array(&self, name: &str) -> NamedArray {
        NamedArray {
            name: name.to_string(),
            shape: vec![self.num_samples, self.num_classes],
            data: ArrayData::U8(self.bits.iter().map(|&b| b as u8).collect()),
        }
    }

    fn from_array(file: &ArrayFile, name: &str) -> std::result::Result<Self, String> {
        let (shape, values) = file.u8s(name)?;
        if shape.len() != 2 {
            return Err(format!("`{name}` must be two-dimensional"));
        }
        Ok(Self {
            num_samples: shape[0],
            num_classes: shape[1],
            bits: values.iter().map(|&v| v != 0).collect(),
        })
    }
}

/// Per class: annotated positives first, then the highest-scoring remaining
/// samples until the budget (clamped to `N`) is spent. Ties go to the lower
/// sample index.
pub fn mine(scores: &ScoreStore, annotations: &[AnnotationVector], budgets: &[usize]) -> Result<Masks> {
    let l = scores.num_classes();
    let n = scores.len();
    if annotations.len() != n || budgets.len() != l {
        return Err(Error::Shape(format!(
            "{} scores, {} annotations, {} budgets for {l} classes",
            n,
            annotations.len(),
            budgets.len()
        )));
    }
    let mut masks = Masks::annotated(annotations, l);
    let mut order: Vec<usize> = Vec::with_capacity(n);
    for (c, &budget) in budgets.iter().enumerate() {
        let budget = budget.min(n);
        let taken = masks.class_count(c);
        if taken >= budget {
            continue;
        }
        order.clear();
        order.extend((0..n).filter(|&i| !masks.get(i, c)));
        order.sort_by(|&a, &b| scores.get(b)[c].total_cmp(&scores.get(a)[c]).then(a.cmp(&b)));
        for &i in order.iter().take(budget - taken) {
            masks.bits[i * l + c] = true;
        }
    }
    Ok(masks)
}

/// Budgets and the current masks.
#[derive(Debug, Clone, PartialEq)]
pub struct MinerState {
    pub k: f64,
    pub budgets: Vec<usize>,
    pub masks: Masks,
}

impl MinerState {
    pub fn new(annotations: &[AnnotationVector], num_classes: usize, k: f64) -> Result<Self> {
        Ok(Self {
            k,
            budgets: class_budgets(annotations, num_classes, k)?,
            masks: Masks::annotated(annotations, num_classes),
        })
    }

    pub fn refresh(&mut self, scores: &ScoreStore, annotations: &[AnnotationVector]) -> Result<()> {
        self.masks = mine(scores, annotations, &self.budgets)?;
        Ok(())
    }

    pub fn to_arrays(&self, prefix: &str, file: &mut ArrayFile) {
        file.push(NamedArray {
            name: format!("{prefix}.k"),
            shape: vec![1],
            data: ArrayData::F64(vec![self.k]),
        });
        file.push(NamedArray {
            name: format!("{prefix}.budgets"),
            shape: vec![self.budgets.len()],
            data: ArrayData::I64(self.budgets.iter().map(|&b| b as i64).collect()),
        });
        file.push(self.masks.to_array(&format!("{prefix}.masks")));
    }

    pub fn from_arrays(prefix: &str, file: &ArrayFile) -> std::result::Result<Self, String> {
        let (_, k) = file.f64s(&format!("{prefix}.k"))?;
        let (_, budgets) = file.i64s(&format!("{prefix}.budgets"))?;
        let masks = Masks::from_array(file, &format!("{prefix}.masks"))?;
        if k.len() != 1 || budgets.len() != masks.num_classes {
            return Err(format!("inconsistent `{prefix}` arrays"));
        }
        Ok(Self {
            k: k[0],
            budgets: budgets.iter().map(|&b| b.max(0) as usize).collect(),
            masks,
        })
    }

    /// Appends `epoch,sample,class` rows for mined entries that are not
    /// annotated positives. Writes the header when the file is new.
    pub fn dump_csv(&self, path: &Path, epoch: u32, annotations: &[AnnotationVector]) -> Result<()> {
        let mut out = String::new();
        if !path.exists() {
            out.push_str("epoch,sample,class\n");
        }
        for (n, a) in annotations.iter().enumerate() {
            let annotated: Vec<usize> = a.positives().collect();
            for c in 0..self.masks.num_classes {
                if self.masks.get(n, c) && !annotated.contains(&c) {
                    let _ = writeln!(out, "{epoch},{n},{c}");
                }
            }
        }
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        use std::io::Write;
        let mut f = fs::OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn store_with(scores: &[Vec<f64>], annotations: &[AnnotationVector]) -> ScoreStore {
        let l = scores[0].len();
        let mut s = ScoreStore::new(annotations, l, 0.0).unwrap();
        for (n, row) in scores.iter().enumerate() {
            s.update(n, row, 0).unwrap();
        }
        s
    }

    fn single(l: usize, c: usize) -> AnnotationVector {
        AnnotationVector::single_positive(l, c, None).unwrap()
    }

    #[test]
    fn budget_examples() {
        let ann: Vec<_> = (0..100).map(|_| single(2, 0)).collect();
        assert_eq!(class_budgets(&ann, 2, 2.9).unwrap(), vec![290, 0]);
        assert_eq!(class_budgets(&ann, 2, 1.0).unwrap(), vec![100, 0]);
        let three: Vec<_> = (0..3).map(|_| single(2, 1)).collect();
        assert_eq!(class_budgets(&three, 2, 1.5).unwrap(), vec![0, 5]);
        assert_eq!(class_budgets(&three, 2, 0.5).unwrap(), vec![0, 3]);
        let many: Vec<_> = (0..25).map(|_| single(2, 0)).collect();
        assert_eq!(class_budgets(&many, 2, 2.3).unwrap(), vec![58, 0]);
        assert!(class_budgets(&three, 2, 0.0).is_err());
    }

    #[test]
    fn zero_slack_keeps_annotations() {
        let ann = vec![single(3, 0), single(3, 1), single(3, 2)];
        let s = store_with(&vec![vec![0.9, 0.9, 0.9]; 3], &ann);
        let m = mine(&s, &ann, &[1, 1, 1]).unwrap();
        assert_eq!(m, Masks::annotated(&ann, 3));
    }

    #[test]
    fn tie_broken_by_index() {
        let ann = vec![single(2, 0), single(2, 1), single(2, 1), single(2, 1)];
        let s = store_with(
            &[vec![0.9, 0.0], vec![0.7, 1.0], vec![0.7, 1.0], vec![0.2, 1.0]],
            &ann,
        );
        let m = mine(&s, &ann, &[3, 3]).unwrap();
        let picked: Vec<usize> = (0..4).filter(|&n| m.get(n, 0)).collect();
        assert_eq!(picked, vec![0, 1, 2]);
    }

    #[test]
    fn budget_clamped_to_n() {
        let ann = vec![single(2, 0), single(2, 1)];
        let s = store_with(&[vec![0.5, 0.5], vec![0.5, 0.5]], &ann);
        let m = mine(&s, &ann, &[10, 10]).unwrap();
        assert_eq!(m.class_count(0), 2);
        assert_eq!(m.class_count(1), 2);
    }

    #[test]
    fn annotated_positive_survives_low_score() {
        let ann = vec![single(2, 0), single(2, 1), single(2, 1)];
        let s = store_with(&[vec![0.0, 1.0], vec![0.9, 1.0], vec![0.8, 1.0]], &ann);
        let m = mine(&s, &ann, &[2, 2]).unwrap();
        assert!(m.get(0, 0) && m.get(1, 0) && !m.get(2, 0));
    }

    #[test]
    fn persistence_and_dump() {
        let dir = tempfile::tempdir().unwrap();
        let ann = vec![single(2, 0), single(2, 1)];
        let s = store_with(&[vec![0.5, 0.6], vec![0.7, 0.5]], &ann);
        let mut state = MinerState::new(&ann, 2, 2.0).unwrap();
        state.refresh(&s, &ann).unwrap();
        let mut file = ArrayFile::default();
        state.to_arrays("miner", &mut file);
        assert_eq!(MinerState::from_arrays("miner", &file).unwrap(), state);
        let path = dir.path().join("masks/masks.csv");
        state.dump_csv(&path, 3, &ann).unwrap();
        state.dump_csv(&path, 4, &ann).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text, "epoch,sample,class\n3,0,1\n3,1,0\n4,0,1\n4,1,0\n");
    }

    proptest! {
        #[test]
        fn budgets_met_exactly(seed in any::<u64>(), n in 1usize..30, l in 2usize..6, k in 0.5f64..4.0) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let ann: Vec<_> = (0..n).map(|_| single(l, rng.random_range(0..l))).collect();
            let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..l).map(|_| (rng.random_range(0..5) as f64) / 4.0).collect()).collect();
            let s = store_with(&rows, &ann);
            let budgets = class_budgets(&ann, l, k).unwrap();
            let m = mine(&s, &ann, &budgets).unwrap();
            for c in 0..l {
                prop_assert_eq!(m.class_count(c), budgets[c].min(n));
            }
            for (i, a) in ann.iter().enumerate() {
                for c in a.positives() {
                    prop_assert!(m.get(i, c));
                }
            }
            prop_assert_eq!(mine(&s, &ann, &budgets).unwrap(), m);
        }
    }
}
