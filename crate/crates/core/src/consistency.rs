//! Per-sample running averages: image-level score estimates and spatial
//! heatmaps in the canonical frame.

use std::fs;
use std::io::Write;
use std::path::Path;

use half::f16;

use crate::augment::{extract_region, region_on_heatmap, AugmentationTransform};
use crate::container::{ArrayData, ArrayFile, NamedArray};
use crate::error::{Error, Result};
use crate::losses::AnnotationVector;
use crate::numerics::{bilinear_resize, hflip, Tensor};

fn check_momentum(momentum: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&momentum) {
        return Err(Error::InvalidArgument(format!("momentum {momentum} outside [0, 1]")));
    }
    Ok(())
}

/// Running estimates `s_n` of the image-level scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreStore {
    num_classes: usize,
    momentum: f32,
    scores: Vec<f32>,
    last_epoch: Vec<Option<u32>>,
}

impl ScoreStore {
    /// Starts at 1 for annotated positives and 0 everywhere else.
    pub fn new(annotations: &[AnnotationVector], num_classes: usize, momentum: f64) -> Result<Self> {
        check_momentum(momentum)?;
        let mut scores = vec![0.0f32; annotations.len() * num_classes];
        for (n, a) in annotations.iter().enumerate() {
            if a.num_classes() != num_classes {
                return Err(Error::Shape(format!(
                    "sample {n} has {} classes, expected {num_classes}",
                    a.num_classes()
                )));
            }
            for c in a.positives() {
                scores[n * num_classes + c] = 1.0;
            }
        }
        Ok(Self {
            num_classes,
            momentum: momentum as f32,
            scores,
            last_epoch: vec![None; annotations.len()],
        })
    }

    pub fn len(&self) -> usize {
        self.last_epoch.len()
    }

    pub fn is_empty(&self) -> bool {
        self.last_epoch.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn momentum(&self) -> f32 {
        self.momentum
    }

    pub fn get(&self, n: usize) -> &[f32] {
        &self.scores[n * self.num_classes..][..self.num_classes]
    }

    pub fn get_f64(&self, n: usize) -> Vec<f64> {
        self.get(n).iter().map(|&v| v as f64).collect()
    }

    pub fn all(&self) -> &[f32] {
        &self.scores
    }

    pub fn last_updated(&self, n: usize) -> Option<u32> {
        self.last_epoch[n]
    }

    /// `s_n ← μ s_n + (1 - μ) f`; at most once per sample per epoch.
    pub fn update(&mut self, n: usize, f: &[f64], epoch: u32) -> Result<&[f32]> {
        if n >= self.len() {
            return Err(Error::InvalidArgument(format!("sample {n} out of range")));
        }
        if f.len() != self.num_classes {
            return Err(Error::Shape(format!(
                "expected {} scores, got {}",
                self.num_classes,
                f.len()
            )));
        }
        if self.last_epoch[n] == Some(epoch) {
            return Err(Error::DoubleUpdate { sample: n, epoch });
        }
        let mu = self.momentum;
        for (s, &v) in self.scores[n * self.num_classes..][..self.num_classes].iter_mut().zip(f) {
            *s = mu * *s + (1.0 - mu) * v as f32;
        }
        self.last_epoch[n] = Some(epoch);
        Ok(self.get(n))
    }

    pub fn to_arrays(&self, prefix: &str, file: &mut ArrayFile) {
        let n = self.len();
        file.push(NamedArray {
            name: format!("{prefix}.values"),
            shape: vec![n, self.num_classes],
            data: ArrayData::F32(self.scores.clone()),
        });
        file.push(NamedArray {
            name: format!("{prefix}.momentum"),
            shape: vec![1],
            data: ArrayData::F32(vec![self.momentum]),
        });
        file.push(NamedArray {
            name: format!("{prefix}.last_epoch"),
            shape: vec![n],
            data: ArrayData::I64(self.last_epoch.iter().map(|e| e.map_or(-1, |v| v as i64)).collect()),
        });
    }

    pub fn from_arrays(prefix: &str, file: &ArrayFile) -> std::result::Result<Self, String> {
        let (shape, values) = file.f32s(&format!("{prefix}.values"))?;
        let (_, mu) = file.f32s(&format!("{prefix}.momentum"))?;
        let (_, last) = file.i64s(&format!("{prefix}.last_epoch"))?;
        if shape.len() != 2 || last.len() != shape[0] || mu.len() != 1 {
            return Err(format!("inconsistent `{prefix}` arrays"));
        }
        Ok(Self {
            num_classes: shape[1],
            momentum: mu[0],
            scores: values.to_vec(),
            last_epoch: last.iter().map(|&e| (e >= 0).then_some(e as u32)).collect(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StoragePrecision {
    F32,
    F16,
}

impl StoragePrecision {
    pub fn bytes_per_value(self) -> u64 {
        match self {
            StoragePrecision::F32 => 4,
            StoragePrecision::F16 => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            StoragePrecision::F32 => "f32",
            StoragePrecision::F16 => "f16",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "f32" | "32" => Some(StoragePrecision::F32),
            "f16" | "16" => Some(StoragePrecision::F16),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Buffer {
    F32(Vec<f32>),
    F16(Vec<f16>),
}

impl Buffer {
    fn filled(precision: StoragePrecision, len: usize, value: f64) -> Self {
        match precision {
            StoragePrecision::F32 => Buffer::F32(vec![value as f32; len]),
            StoragePrecision::F16 => Buffer::F16(vec![f16::from_f64(value); len]),
        }
    }

    fn get(&self, i: usize) -> f64 {
        match self {
            Buffer::F32(v) => v[i] as f64,
            Buffer::F16(v) => v[i].to_f64(),
        }
    }

    fn set(&mut self, i: usize, value: f64) {
        match self {
            Buffer::F32(v) => v[i] = value as f32,
            Buffer::F16(v) => v[i] = f16::from_f64(value),
        }
    }
}

/// Heatmaps of one sample: `W×W` planes for the retained classes, stored
/// height-width-channel over `classes`.
#[derive(Debug, Clone, PartialEq)]
struct SampleMaps {
    classes: Vec<usize>,
    data: Buffer,
}

/// Running-average heatmaps `H_n`, `W×W×L` per sample, optionally keeping
/// only a top-k subset of class planes per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapStore {
    side: usize,
    num_classes: usize,
    momentum: f64,
    precision: StoragePrecision,
    samples: Vec<SampleMaps>,
    annotated: Vec<Vec<usize>>,
}

impl HeatmapStore {
    /// Every plane starts at 1 for annotated positives and 0 otherwise.
    pub fn new(
        annotations: &[AnnotationVector],
        num_classes: usize,
        side: usize,
        momentum: f64,
        precision: StoragePrecision,
    ) -> Result<Self> {
        check_momentum(momentum)?;
        if side == 0 {
            return Err(Error::InvalidArgument("heatmap side must be positive".into()));
        }
        let plane = side * side;
        let mut samples = Vec::with_capacity(annotations.len());
        let mut annotated = Vec::with_capacity(annotations.len());
        for (n, a) in annotations.iter().enumerate() {
            if a.num_classes() != num_classes {
                return Err(Error::Shape(format!(
                    "sample {n} has {} classes, expected {num_classes}",
                    a.num_classes()
                )));
            }
            let pos: Vec<usize> = a.positives().collect();
            let mut data = Buffer::filled(precision, plane * num_classes, 0.0);
            for p in 0..plane {
                for &c in &pos {
                    data.set(p * num_classes + c, 1.0);
                }
            }
            samples.push(SampleMaps {
                classes: (0..num_classes).collect(),
                data,
            });
            annotated.push(pos);
        }
        Ok(Self {
            side,
            num_classes,
            momentum,
            precision,
            samples,
            annotated,
        })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn precision(&self) -> StoragePrecision {
        self.precision
    }

    /// Class planes currently kept for sample `n`, ascending.
    pub fn retained(&self, n: usize) -> &[usize] {
        &self.samples[n].classes
    }

    fn check_sample(&self, n: usize) -> Result<()> {
        if n >= self.samples.len() {
            return Err(Error::InvalidArgument(format!(
                "sample {n} out of range ({} stored)",
                self.samples.len()
            )));
        }
        Ok(())
    }

    /// Dense `W×W×L` view; pruned class planes read as zero.
    pub fn dense(&self, n: usize) -> Result<Tensor<f64>> {
        self.check_sample(n)?;
        let s = &self.samples[n];
        let k = s.classes.len();
        let l = self.num_classes;
        let plane = self.side * self.side;
        let mut out = vec![0.0; plane * l];
        for p in 0..plane {
            for (j, &c) in s.classes.iter().enumerate() {
                out[p * l + c] = s.data.get(p * k + j);
            }
        }
        Tensor::new(vec![self.side, self.side, l], out)
    }

    /// Blends a `G×G×L` score map into the part of `H_n` visible through `t`:
    /// the map is un-flipped, resized to the region and averaged in with the
    /// store's momentum. Pixels outside the region are not touched.
    pub fn update(&mut self, n: usize, score_map: &Tensor<f64>, t: &AugmentationTransform) -> Result<()> {
        self.check_sample(n)?;
        let (g, gw, l) = score_map.dims3()?;
        if g != gw || l != self.num_classes {
            return Err(Error::Shape(format!(
                "score map {:?} incompatible with {} classes",
                score_map.shape(),
                self.num_classes
            )));
        }
        let region = region_on_heatmap(t, self.side)?;
        let aligned = if t.hflip { hflip(score_map)? } else { score_map.clone() };
        let patch = bilinear_resize(&aligned, region.height(), region.width())?;
        let mu = self.momentum;
        let side = self.side;
        let s = &mut self.samples[n];
        let k = s.classes.len();
        for y in region.y0..region.y1 {
            for x in region.x0..region.x1 {
                let src = ((y - region.y0) * region.width() + (x - region.x0)) * l;
                let dst = (y * side + x) * k;
                for (j, &c) in s.classes.iter().enumerate() {
                    let old = s.data.get(dst + j);
                    s.data.set(dst + j, mu * old + (1.0 - mu) * patch.data()[src + c]);
                }
            }
        }
        Ok(())
    }

    /// The supervision target for a `G×G` score map under transform `t`.
    pub fn read_target(&self, n: usize, t: &AugmentationTransform, grid: usize) -> Result<Tensor<f64>> {
        if grid == 0 {
            return Err(Error::InvalidArgument("grid size must be positive".into()));
        }
        let region = region_on_heatmap(t, self.side)?;
        extract_region(&self.dense(n)?, &region, grid, grid)
    }

    /// Keeps only the `k` highest-scoring class planes of sample `n`
    /// (annotated positives always kept) and returns the retained classes.
    /// Ties go to the lower class index. `k` is clamped to `L`.
    pub fn retain_topk(&mut self, n: usize, k: usize, scores: &[f32]) -> Result<Vec<usize>> {
        self.check_sample(n)?;
        if k == 0 {
            return Err(Error::InvalidArgument("top-k retention needs k >= 1".into()));
        }
        if scores.len() != self.num_classes {
            return Err(Error::Shape(format!("expected {} scores", self.num_classes)));
        }
        let k = k.min(self.num_classes);
        let mut keep: Vec<usize> = self.annotated[n].clone();
        let mut order: Vec<usize> = (0..self.num_classes).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        for c in order {
            if keep.len() >= k.max(self.annotated[n].len()) {
                break;
            }
            if !keep.contains(&c) {
                keep.push(c);
            }
        }
        keep.sort_unstable();
        let s = &self.samples[n];
        let plane = self.side * self.side;
        let old_k = s.classes.len();
        let mut data = Buffer::filled(self.precision, plane * keep.len(), 0.0);
        for p in 0..plane {
            for (j, &c) in keep.iter().enumerate() {
                if let Some(old_j) = s.classes.iter().position(|&oc| oc == c) {
                    data.set(p * keep.len() + j, s.data.get(p * old_k + old_j));
                }
            }
        }
        self.samples[n] = SampleMaps {
            classes: keep.clone(),
            data,
        };
        Ok(keep)
    }

    /// Bytes currently held by the heatmap planes.
    pub fn stored_bytes(&self) -> u64 {
        let plane = (self.side * self.side) as u64;
        self.samples
            .iter()
            .map(|s| s.classes.len() as u64 * plane * self.precision.bytes_per_value())
            .sum()
    }

    pub fn to_arrays(&self, prefix: &str, file: &mut ArrayFile) {
        let meta = vec![
            self.side as u32,
            self.num_classes as u32,
            self.samples.len() as u32,
            match self.precision {
                StoragePrecision::F32 => 32,
                StoragePrecision::F16 => 16,
            },
        ];
        file.push(NamedArray {
            name: format!("{prefix}.meta"),
            shape: vec![4],
            data: ArrayData::U32(meta),
        });
        file.push(NamedArray {
            name: format!("{prefix}.momentum"),
            shape: vec![1],
            data: ArrayData::F64(vec![self.momentum]),
        });
        let counts: Vec<u32> = self.samples.iter().map(|s| s.classes.len() as u32).collect();
        let classes: Vec<u32> = self.samples.iter().flat_map(|s| s.classes.iter().map(|&c| c as u32)).collect();
        let annotated_counts: Vec<u32> = self.annotated.iter().map(|a| a.len() as u32).collect();
        let annotated: Vec<u32> = self.annotated.iter().flat_map(|a| a.iter().map(|&c| c as u32)).collect();
        file.push(NamedArray {
            name: format!("{prefix}.retained_counts"),
            shape: vec![counts.len()],
            data: ArrayData::U32(counts),
        });
        file.push(NamedArray {
            name: format!("{prefix}.retained_classes"),
            shape: vec![classes.len()],
            data: ArrayData::U32(classes),
        });
        file.push(NamedArray {
            name: format!("{prefix}.annotated_counts"),
            shape: vec![annotated_counts.len()],
            data: ArrayData::U32(annotated_counts),
        });
        file.push(NamedArray {
            name: format!("{prefix}.annotated_classes"),
            shape: vec![annotated.len()],
            data: ArrayData::U32(annotated),
        });
        let values = match self.precision {
            StoragePrecision::F32 => ArrayData::F32(
                self.samples
                    .iter()
                    .flat_map(|s| match &s.data {
                        Buffer::F32(v) => v.clone(),
                        Buffer::F16(_) => unreachable!("precision is uniform"),
                    })
                    .collect(),
            ),
            StoragePrecision::F16 => ArrayData::F16(
                self.samples
                    .iter()
                    .flat_map(|s| match &s.data {
                        Buffer::F16(v) => v.clone(),
                        Buffer::F32(_) => unreachable!("precision is uniform"),
                    })
                    .collect(),
            ),
        };
        file.push(NamedArray {
            name: format!("{prefix}.values"),
            shape: vec![values.len()],
            data: values,
        });
    }

    pub fn from_arrays(prefix: &str, file: &ArrayFile) -> std::result::Result<Self, String> {
        let (_, meta) = file.u32s(&format!("{prefix}.meta"))?;
        let (_, mu) = file.f64s(&format!("{prefix}.momentum"))?;
        let (_, counts) = file.u32s(&format!("{prefix}.retained_counts"))?;
        let (_, classes) = file.u32s(&format!("{prefix}.retained_classes"))?;
        let (_, acounts) = file.u32s(&format!("{prefix}.annotated_counts"))?;
        let (_, aclasses) = file.u32s(&format!("{prefix}.annotated_classes"))?;
        if meta.len() != 4 || mu.len() != 1 {
            return Err(format!("malformed `{prefix}` header"));
        }
        let (side, num_classes, n) = (meta[0] as usize, meta[1] as usize, meta[2] as usize);
        let precision = match meta[3] {
            32 => StoragePrecision::F32,
            16 => StoragePrecision::F16,
            other => return Err(format!("unknown heatmap precision {other}")),
        };
        if counts.len() != n || acounts.len() != n {
            return Err(format!("`{prefix}` sample counts disagree"));
        }
        let values = file.get(&format!("{prefix}.values")).ok_or(format!("missing `{prefix}.values`"))?;
        let plane = side * side;
        let mut samples = Vec::with_capacity(n);
        let mut annotated = Vec::with_capacity(n);
        let (mut ci, mut ai, mut vi) = (0usize, 0usize, 0usize);
        for s in 0..n {
            let k = counts[s] as usize;
            let cls: Vec<usize> = classes.get(ci..ci + k).ok_or("retained classes truncated")?.iter().map(|&c| c as usize).collect();
            ci += k;
            let a = acounts[s] as usize;
            annotated.push(aclasses.get(ai..ai + a).ok_or("annotated classes truncated")?.iter().map(|&c| c as usize).collect());
            ai += a;
            if cls.iter().any(|&c| c >= num_classes) {
                return Err(format!("sample {s} retains an unknown class"));
            }
            let len = plane * k;
            let data = match (&values.data, precision) {
                (ArrayData::F32(v), StoragePrecision::F32) => Buffer::F32(v.get(vi..vi + len).ok_or("values truncated")?.to_vec()),
                (ArrayData::F16(v), StoragePrecision::F16) => Buffer::F16(v.get(vi..vi + len).ok_or("values truncated")?.to_vec()),
                _ => return Err("heatmap value type does not match its header".into()),
            };
            vi += len;
            samples.push(SampleMaps { classes: cls, data });
        }
        if vi != values.data.len() {
            return Err("heatmap values have trailing entries".into());
        }
        Ok(Self {
            side,
            num_classes,
            momentum: mu[0],
            precision,
            samples,
            annotated,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = ArrayFile::default();
        self.to_arrays("heatmaps", &mut file);
        file.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = ArrayFile::read(path)?;
        Self::from_arrays("heatmaps", &file).map_err(|m| Error::format(path, m))
    }

    /// Writes one 8-bit grayscale PNG per requested (sample, class) into
    /// `dir`, mapping `[0, 1]` to `[0, 255]` with rounding, and appends a row
    /// `sample,class,min,max` per image to `manifest.csv`. Returns the pairs
    /// whose class plane had been pruned (exported as all-zero images).
    pub fn export_png(&self, dir: &Path, samples: &[usize], classes: &[usize]) -> Result<Vec<(usize, usize)>> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest_path = dir.join("manifest.csv");
        let mut manifest = String::from("sample,class,min,max\n");
        let mut pruned = Vec::new();
        for &n in samples {
            let dense = self.dense(n)?;
            for &c in classes {
                if c >= self.num_classes {
                    return Err(Error::InvalidArgument(format!(
                        "class {c} out of range for {} classes",
                        self.num_classes
                    )));
                }
                if !self.samples[n].classes.contains(&c) {
                    pruned.push((n, c));
                }
                let plane: Vec<f64> = (0..self.side * self.side).map(|p| dense.data()[p * self.num_classes + c]).collect();
                let (lo, hi) = plane.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
                let pixels: Vec<u8> = plane.iter().map(|&v| to_gray(v)).collect();
                let path = dir.join(format!("sample{n}_class{c}.png"));
                image::save_buffer(&path, &pixels, self.side as u32, self.side as u32, image::ExtendedColorType::L8)
                    .map_err(|e| Error::format(&path, e.to_string()))?;
                manifest.push_str(&format!("{n},{c},{lo},{hi}\n"));
            }
        }
        let mut f = fs::File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        f.write_all(manifest.as_bytes()).map_err(|e| Error::io(&manifest_path, e))?;
        Ok(pruned)
    }
}

/// `[0, 1] → [0, 255]`, rounded to nearest.
pub fn to_gray(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Bytes needed for dense heatmaps: `N · L · W² · bytes_per_value`.
pub fn memory_bytes(num_images: u64, num_classes: u64, side: u64, bytes_per_value: u64) -> u64 {
    num_images * num_classes * side * side * bytes_per_value
}
