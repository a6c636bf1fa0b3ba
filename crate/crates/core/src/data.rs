//! Synthetic multi-object images, the single-positive annotation protocol,
//! train/validation splits and the on-disk dataset layout.
//!
//! A dataset directory holds:
//!
//! * `dataset.cfg`: `key = value` lines with `num_classes` and `image_size`;
//! * `manifest.csv`: `id,image`, one row per record, image paths relative to
//!   the directory (`images/<id>.png`, 8-bit RGB);
//! * `labels.csv`: `id,class,value` with `value` 1 or 0, the full labels;
//! * `annotations.csv`: `id,class,value` for the training annotation, 1 for
//!   positive and 0 for negative; absent pairs are unknown;
//! * `objects.csv` (optional): `id,class,cx,cy,half` object placements in
//!   normalized frame coordinates.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};

use crate::error::{Error, Result};
use crate::losses::{AnnotationVector, Label};
use crate::numerics::{mix_seed, Real, Tensor};

/// Square 8-bit RGB image, row-major height-width-channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub side: usize,
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn new(side: usize, pixels: Vec<u8>) -> Result<Self> {
        if side == 0 || pixels.len() != side * side * 3 {
            return Err(Error::Shape(format!("{} bytes do not form a {side}×{side} RGB image", pixels.len())));
        }
        Ok(Self { side, pixels })
    }

    /// Pixel values scaled to `[0, 1]`.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let scale = T::from_f64(1.0 / 255.0);
        Tensor::from_fn(&[self.side, self.side, 3], |i| T::from_f64(self.pixels[i] as f64) * scale)
    }
}

/// Where one object was drawn, in normalized frame coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectPlacement {
    pub class: usize,
    pub cx: f64,
    pub cy: f64,
    /// Half the side of the object's bounding box.
    pub half: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecord {
    pub id: u64,
    pub image: Image,
    /// Training annotation; its `y` carries the full labels.
    pub annotation: AnnotationVector,
    pub objects: Vec<ObjectPlacement>,
}

impl DatasetRecord {
    pub fn labels(&self) -> &[bool] {
        self.annotation.y.as_deref().unwrap_or(&[])
    }

    pub fn num_positives(&self) -> usize {
        self.labels().iter().filter(|&&b| b).count()
    }
}

/// Distribution of the number of objects per image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ObjectCount {
    Fixed(usize),
    /// `1 + Poisson(lambda)`, clamped to `max`.
    ClampedPoisson { lambda: f64, max: usize },
}

impl ObjectCount {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ObjectCount::Fixed(0) => Err(Error::InvalidArgument("images need at least one object".into())),
            ObjectCount::ClampedPoisson { lambda, max } if !(lambda > 0.0) || max == 0 => {
                Err(Error::InvalidArgument(format!("invalid object count law 1 + Poisson({lambda}) clamped to {max}")))
            }
            _ => Ok(()),
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> usize {
        match *self {
            ObjectCount::Fixed(n) => n,
            ObjectCount::ClampedPoisson { lambda, max } => {
                let k = Poisson::new(lambda).expect("validated lambda").sample(rng) as usize;
                (1 + k).min(max)
            }
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            ObjectCount::Fixed(n) => n as f64,
            ObjectCount::ClampedPoisson { lambda, max } => {
                let mut p = (-lambda).exp();
                let mut mean = 0.0;
                let mut mass = 0.0;
                for k in 0..max.saturating_sub(1) {
                    mean += p * (1 + k) as f64;
                    mass += p;
                    p *= lambda / (k + 1) as f64;
                }
                mean + (1.0 - mass) * max as f64
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub num_images: usize,
    pub num_classes: usize,
    pub image_size: usize,
    pub objects: ObjectCount,
    /// Object bounding-box side as a fraction of the image side.
    pub object_scale: (f64, f64),
    /// Amplitude of uniform per-pixel noise, in 8-bit levels.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_images: 2000,
            num_classes: 8,
            image_size: 64,
            objects: ObjectCount::ClampedPoisson { lambda: 1.5, max: 5 },
            object_scale: (0.2, 0.3),
            noise: 40.0,
            seed: 0,
        }
    }
}

const PALETTE: [[u8; 3]; 8] = [
    [220, 40, 40],
    [40, 180, 40],
    [50, 80, 230],
    [230, 210, 40],
    [200, 50, 200],
    [40, 200, 210],
    [240, 140, 30],
    [245, 245, 245],
];

const NUM_SHAPES: usize = 4;

/// Shape and color of a class. Classes cycle through the shapes and the
/// palette so neighbours differ in both.
fn archetype(class: usize) -> (usize, [u8; 3]) {
    (class % NUM_SHAPES, PALETTE[(class + class / PALETTE.len()) % PALETTE.len()])
}

/// `dx, dy` in `[-1, 1]` relative to the object's box.
fn inside(shape: usize, dx: f64, dy: f64) -> bool {
    match shape {
        0 => dx.abs() <= 0.8 && dy.abs() <= 0.8,
        1 => dx * dx + dy * dy <= 1.0,
        2 => dy >= -0.9 && dx.abs() <= (dy + 0.9) * 0.55,
        _ => dx.abs() <= 0.3 || dy.abs() <= 0.3,
    }
}

fn boxes_overlap(a: &ObjectPlacement, b: &ObjectPlacement, gap: f64) -> bool {
    (a.cx - b.cx).abs() < a.half + b.half + gap && (a.cy - b.cy).abs() < a.half + b.half + gap
}

const PLACEMENT_ATTEMPTS: usize = 200;
const LAYOUT_RESTARTS: usize = 50;

/// Rejection-samples a layout, restarting from scratch when an object no
/// longer fits.
fn place_objects(rng: &mut impl Rng, classes: &[usize], scale: (f64, f64), gap: f64) -> Option<Vec<ObjectPlacement>> {
    'layout: for _ in 0..LAYOUT_RESTARTS {
        let mut objects: Vec<ObjectPlacement> = Vec::with_capacity(classes.len());
        for &class in classes {
            let fits = (0..PLACEMENT_ATTEMPTS).find_map(|_| {
                let half = rng.random_range(scale.0..=scale.1) / 2.0;
                let candidate = ObjectPlacement {
                    class,
                    cx: rng.random_range(half..=1.0 - half),
                    cy: rng.random_range(half..=1.0 - half),
                    half,
                };
                objects.iter().all(|o| !boxes_overlap(o, &candidate, gap)).then_some(candidate)
            });
            match fits {
                Some(o) => objects.push(o),
                None => continue 'layout,
            }
        }
        return Some(objects);
    }
    None
}

fn generate_one(spec: &SyntheticSpec, index: usize) -> Result<DatasetRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[spec.seed, index as u64]));
    let side = spec.image_size;
    let count = spec.objects.sample(&mut rng).min(spec.num_classes);
    let mut classes: Vec<usize> = (0..spec.num_classes).collect();
    classes.shuffle(&mut rng);
    classes.truncate(count);

    let gap = 1.0 / side as f64;
    let objects = place_objects(&mut rng, &classes, spec.object_scale, gap).ok_or_else(|| {
        Error::InvalidArgument(format!(
            "could not place {count} non-overlapping objects in a {side}×{side} image (image {index})"
        ))
    })?;

    let base: f64 = rng.random_range(40.0..100.0);
    let mut pixels = vec![0u8; side * side * 3];
    for (i, px) in pixels.iter_mut().enumerate() {
        let v = base + (i % 3) as f64 * 5.0 + rng.random_range(-spec.noise..=spec.noise);
        *px = v.clamp(0.0, 255.0).round() as u8;
    }
    for o in &objects {
        let (shape, color) = archetype(o.class);
        let shade: f64 = rng.random_range(0.75..=1.0);
        let lo = |c: f64| ((c - o.half) * side as f64).floor().max(0.0) as usize;
        let hi = |c: f64| (((c + o.half) * side as f64).ceil() as usize).min(side);
        for y in lo(o.cy)..hi(o.cy) {
            for x in lo(o.cx)..hi(o.cx) {
                let dx = ((x as f64 + 0.5) / side as f64 - o.cx) / o.half;
                let dy = ((y as f64 + 0.5) / side as f64 - o.cy) / o.half;
                if inside(shape, dx, dy) {
                    for ch in 0..3 {
                        let v = color[ch] as f64 * shade + rng.random_range(-spec.noise..=spec.noise) * 0.5;
                        pixels[(y * side + x) * 3 + ch] = v.clamp(0.0, 255.0).round() as u8;
                    }
                }
            }
        }
    }
    let mut y = vec![false; spec.num_classes];
    for o in &objects {
        y[o.class] = true;
    }
    Ok(DatasetRecord {
        id: index as u64,
        image: Image::new(side, pixels)?,
        annotation: AnnotationVector::full(&y),
        objects,
    })
}

/// Images with non-overlapping shapes placed uniformly in the frame, one
/// archetype per class, fully annotated. Deterministic in `spec.seed`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<DatasetRecord>> {
    if spec.num_classes < 2 {
        return Err(Error::InvalidArgument("at least two classes are required".into()));
    }
    if spec.image_size < 4 {
        return Err(Error::InvalidArgument(format!("image size {} too small", spec.image_size)));
    }
    let (lo, hi) = spec.object_scale;
    if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
        return Err(Error::InvalidArgument(format!("object scale [{lo}, {hi}] outside (0, 1]")));
    }
    spec.objects.validate()?;
    (0..spec.num_images).map(|i| generate_one(spec, i)).collect()
}

/// Replaces each annotation with one positive drawn uniformly from the full
/// labels, everything else unknown.
pub fn to_single_positive(records: &[DatasetRecord], seed: u64) -> Result<Vec<DatasetRecord>> {
    records
        .iter()
        .map(|r| {
            let y = r.annotation.y.clone().ok_or_else(|| {
                Error::InvalidArgument(format!("record {} has no full labels", r.id))
            })?;
            let positives: Vec<usize> = (0..y.len()).filter(|&i| y[i]).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, r.id]));
            let &class = positives
                .choose(&mut rng)
                .ok_or_else(|| Error::InvalidArgument(format!("record {} has no positive label", r.id)))?;
            let mut out = r.clone();
            out.annotation = AnnotationVector::single_positive(y.len(), class, Some(y))?;
            Ok(out)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.2,
            seed: 0,
        }
    }
}

/// Shuffles the records by id and cuts off `round(train·N)` training and
/// `round(val·N)` validation records. Validation records get full
/// annotations.
pub fn split(records: &[DatasetRecord], spec: &SplitSpec) -> Result<(Vec<DatasetRecord>, Vec<DatasetRecord>)> {
    if !(spec.train > 0.0 && spec.val > 0.0 && spec.train + spec.val <= 1.0 + 1e-12) {
        return Err(Error::InvalidArgument(format!(
            "split fractions ({}, {}) must be positive and sum to at most 1",
            spec.train, spec.val
        )));
    }
    let n = records.len();
    let n_train = (spec.train * n as f64).round() as usize;
    let n_val = ((spec.val * n as f64).round() as usize).min(n - n_train.min(n));
    if n_train == 0 || n_val == 0 {
        return Err(Error::InvalidArgument(format!(
            "split of {n} records leaves {n_train} training and {n_val} validation records"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| records[i].id);
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let train = order[..n_train].iter().map(|&i| records[i].clone()).collect();
    let val = order[n_train..n_train + n_val]
        .iter()
        .map(|&i| {
            let mut r = records[i].clone();
            if let Some(y) = &r.annotation.y {
                r.annotation = AnnotationVector::full(y);
            }
            r
        })
        .collect();
    Ok((train, val))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `records` in the directory layout described at module level.
pub fn save_dataset(dir: &Path, records: &[DatasetRecord]) -> Result<()> {
    let first = records
        .first()
        .ok_or_else(|| Error::InvalidArgument("refusing to save an empty dataset".into()))?;
    let num_classes = first.annotation.num_classes();
    let side = first.image.side;
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;

    let mut manifest = String::from("id,image\n");
    let mut labels = String::from("id,class,value\n");
    let mut annotations = String::from("id,class,value\n");
    let mut objects = String::from("id,class,cx,cy,half\n");
    for r in records {
        if r.annotation.num_classes() != num_classes || r.image.side != side {
            return Err(Error::Shape(format!("record {} differs in class count or image size", r.id)));
        }
        let rel = format!("images/{}.png", r.id);
        let path = dir.join(&rel);
        image::save_buffer(&path, &r.image.pixels, side as u32, side as u32, image::ExtendedColorType::Rgb8)
            .map_err(|e| Error::format(&path, e.to_string()))?;
        manifest.push_str(&format!("{},{rel}\n", r.id));
        for (c, &v) in r.labels().iter().enumerate() {
            labels.push_str(&format!("{},{c},{}\n", r.id, v as u8));
        }
        for (c, l) in r.annotation.z.iter().enumerate() {
            match l {
                Label::Positive => annotations.push_str(&format!("{},{c},1\n", r.id)),
                Label::Negative => annotations.push_str(&format!("{},{c},0\n", r.id)),
                Label::Unknown => {}
            }
        }
        for o in &r.objects {
            objects.push_str(&format!("{},{},{},{},{}\n", r.id, o.class, o.cx, o.cy, o.half));
        }
    }
    write_file(&dir.join("dataset.cfg"), &format!("num_classes = {num_classes}\nimage_size = {side}\n"))?;
    write_file(&dir.join("manifest.csv"), &manifest)?;
    write_file(&dir.join("labels.csv"), &labels)?;
    write_file(&dir.join("annotations.csv"), &annotations)?;
    write_file(&dir.join("objects.csv"), &objects)
}

fn read_rows(path: &Path, header: &[&str]) -> Result<Vec<csv::StringRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::format(path, e.to_string()))?;
    let found = reader.headers().map_err(|e| Error::format(path, e.to_string()))?.clone();
    if found.iter().collect::<Vec<_>>() != header {
        return Err(Error::format(path, format!("expected header `{}`", header.join(","))));
    }
    reader
        .records()
        .map(|r| r.map_err(|e| Error::format(path, e.to_string())))
        .collect()
}

fn field<T: std::str::FromStr>(path: &Path, row: &csv::StringRecord, i: usize, what: &str) -> Result<T> {
    let line = row.position().map_or(0, |p| p.line());
    row.get(i)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::format(path, format!("line {line}: invalid {what}")))
}

fn read_cfg(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format(path, format!("line {}: expected `key = value`", i + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

struct LabelTable {
    path: PathBuf,
    rows: HashMap<u64, Vec<(usize, bool)>>,
}

fn read_label_table(path: &Path, ids: &HashMap<u64, usize>, num_classes: usize) -> Result<LabelTable> {
    let mut rows: HashMap<u64, Vec<(usize, bool)>> = HashMap::new();
    for row in read_rows(path, &["id", "class", "value"])? {
        let id: u64 = field(path, &row, 0, "id")?;
        let class: usize = field(path, &row, 1, "class id")?;
        let value: u8 = field(path, &row, 2, "value")?;
        let line = row.position().map_or(0, |p| p.line());
        if !ids.contains_key(&id) {
            return Err(Error::format(path, format!("line {line}: id {id} is not in the manifest")));
        }
        if class >= num_classes {
            return Err(Error::format(path, format!("line {line}: class {class} out of range for {num_classes} classes")));
        }
        if value > 1 {
            return Err(Error::format(path, format!("line {line}: value must be 0 or 1")));
        }
        rows.entry(id).or_default().push((class, value == 1));
    }
    Ok(LabelTable {
        path: path.to_path_buf(),
        rows,
    })
}

/// Reads a directory written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Vec<DatasetRecord>> {
    let cfg_path = dir.join("dataset.cfg");
    let cfg = read_cfg(&cfg_path)?;
    let get = |key: &str| -> Result<usize> {
        cfg.get(key)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::format(&cfg_path, format!("missing or invalid `{key}`")))
    };
    let num_classes = get("num_classes")?;
    let side = get("image_size")?;

    let manifest_path = dir.join("manifest.csv");
    let mut entries = Vec::new();
    let mut ids = HashMap::new();
    for row in read_rows(&manifest_path, &["id", "image"])? {
        let id: u64 = field(&manifest_path, &row, 0, "id")?;
        if ids.insert(id, entries.len()).is_some() {
            return Err(Error::format(&manifest_path, format!("duplicate id {id}")));
        }
        entries.push((id, row.get(1).unwrap_or_default().to_string()));
    }

    let labels = read_label_table(&dir.join("labels.csv"), &ids, num_classes)?;
    let annotations = read_label_table(&dir.join("annotations.csv"), &ids, num_classes)?;
    let objects_path = dir.join("objects.csv");
    let mut objects: HashMap<u64, Vec<ObjectPlacement>> = HashMap::new();
    if objects_path.exists() {
        for row in read_rows(&objects_path, &["id", "class", "cx", "cy", "half"])? {
            let id: u64 = field(&objects_path, &row, 0, "id")?;
            let class: usize = field(&objects_path, &row, 1, "class id")?;
            if class >= num_classes {
                return Err(Error::format(&objects_path, format!("class {class} out of range")));
            }
            objects.entry(id).or_default().push(ObjectPlacement {
                class,
                cx: field(&objects_path, &row, 2, "cx")?,
                cy: field(&objects_path, &row, 3, "cy")?,
                half: field(&objects_path, &row, 4, "half")?,
            });
        }
    }

    let mut out = Vec::with_capacity(entries.len());
    for (id, rel) in entries {
        let path = dir.join(&rel);
        if !path.is_file() {
            return Err(Error::format(&manifest_path, format!("image file {} is missing", path.display())));
        }
        let img = image::open(&path).map_err(|e| Error::format(&path, e.to_string()))?.to_rgb8();
        if img.width() as usize != side || img.height() as usize != side {
            return Err(Error::format(
                &path,
                format!("image is {}×{}, expected {side}×{side}", img.width(), img.height()),
            ));
        }
        let mut y = vec![false; num_classes];
        let full = labels.rows.get(&id).ok_or_else(|| Error::format(&labels.path, format!("no labels for id {id}")))?;
        for &(c, v) in full {
            y[c] = v;
        }
        let mut z = vec![Label::Unknown; num_classes];
        for &(c, v) in annotations.rows.get(&id).map(Vec::as_slice).unwrap_or(&[]) {
            z[c] = if v { Label::Positive } else { Label::Negative };
        }
        let annotation = AnnotationVector::new(z, Some(y))
            .map_err(|e| Error::format(&annotations.path, format!("id {id}: {e}")))?;
        out.push(DatasetRecord {
            id,
            image: Image::new(side, img.into_raw())?,
            annotation,
            objects: objects.remove(&id).unwrap_or_default(),
        });
    }
    Ok(out)
}
