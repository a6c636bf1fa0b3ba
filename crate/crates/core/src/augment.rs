//! Crop and flip augmentation, recorded so the same geometry can be replayed
//! on per-image heatmaps.
//!
//! Transforms are expressed in normalized coordinates of the canonical square
//! frame. [`pixel_region`] is the only place where a transform is snapped to
//! a pixel grid; images and heatmaps both go through it.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{bilinear_resize, crop, hflip, Real, Tensor};

/// A crop rectangle in the canonical frame plus a horizontal flip flag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentationTransform {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub hflip: bool,
}

impl AugmentationTransform {
    pub const IDENTITY: Self = Self {
        x: 0.0,
        y: 0.0,
        w: 1.0,
        h: 1.0,
        hflip: false,
    };

    pub fn new(x: f64, y: f64, w: f64, h: f64, hflip: bool) -> Result<Self> {
        let t = Self { x, y, w, h, hflip };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        const SLACK: f64 = 1e-12;
        let ok = self.x >= 0.0
            && self.y >= 0.0
            && self.w > 0.0
            && self.h > 0.0
            && self.x + self.w <= 1.0 + SLACK
            && self.y + self.h <= 1.0 + SLACK;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("crop rectangle out of frame: {self:?}")))
        }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Whether a normalized point of the canonical frame is inside the crop.
    pub fn contains(&self, px: f64, py: f64) -> bool {
        px >= self.x && px < self.x + self.w && py >= self.y && py < self.y + self.h
    }
}

/// Parameters of the random crop.
#[derive(Debug, Clone, PartialEq)]
pub struct CropParams {
    pub area_min: f64,
    pub area_max: f64,
    /// Square crops; when false the aspect ratio is jittered log-uniformly
    /// in `[3/4, 4/3]`.
    pub square: bool,
    pub hflip_prob: f64,
}

impl Default for CropParams {
    fn default() -> Self {
        Self {
            area_min: 0.25,
            area_max: 1.0,
            square: true,
            hflip_prob: 0.5,
        }
    }
}

impl CropParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.area_min > 0.0 && self.area_min <= self.area_max && self.area_max <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "crop area bounds must satisfy 0 < min <= max <= 1, got [{}, {}]",
                self.area_min, self.area_max
            )));
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(Error::InvalidArgument(format!(
                "flip probability {} outside [0, 1]",
                self.hflip_prob
            )));
        }
        Ok(())
    }
}

pub fn sample_transform(rng: &mut impl Rng, params: &CropParams) -> Result<AugmentationTransform> {
    params.validate()?;
    let area = if params.area_min == params.area_max {
        params.area_min
    } else {
        rng.random_range(params.area_min..=params.area_max)
    };
    let (w, h) = if params.square {
        (area.sqrt(), area.sqrt())
    } else {
        let log_lo = (3.0f64 / 4.0).ln();
        let log_hi = (4.0f64 / 3.0).ln();
        let mut dims = None;
        for _ in 0..10 {
            let ratio = rng.random_range(log_lo..log_hi).exp();
            let (w, h) = ((area * ratio).sqrt(), (area / ratio).sqrt());
            if w <= 1.0 && h <= 1.0 {
                dims = Some((w, h));
                break;
            }
        }
        dims.unwrap_or((area.sqrt(), area.sqrt()))
    };
    let x = if w < 1.0 { rng.random_range(0.0..=1.0 - w) } else { 0.0 };
    let y = if h < 1.0 { rng.random_range(0.0..=1.0 - h) } else { 0.0 };
    let hflip = rng.random_bool(params.hflip_prob);
    Ok(AugmentationTransform { x, y, w, h, hflip })
}

/// Integer pixel rectangle `[x0, x1) × [y0, y1)` on a square grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeatmapRegion {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
    pub hflip: bool,
}

impl HeatmapRegion {
    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }
}

fn snap(lo: f64, len: f64, side: usize) -> (usize, usize) {
    let round = |v: f64| ((v * side as f64) + 0.5).floor().clamp(0.0, side as f64) as usize;
    let mut a = round(lo);
    let mut b = round(lo + len);
    if a >= side {
        a = side - 1;
    }
    if b <= a {
        b = a + 1;
    }
    if b > side {
        b = side;
        a = a.min(side - 1);
    }
    (a, b)
}

/// Snaps a transform to a `side×side` pixel grid: corners are rounded half-up
/// to the nearest pixel boundary and clamped to at least one pixel.
pub fn pixel_region(t: &AugmentationTransform, side: usize) -> Result<HeatmapRegion> {
    if side == 0 {
        return Err(Error::InvalidArgument("grid side must be at least 1".into()));
    }
    let (x0, x1) = snap(t.x, t.w, side);
    let (y0, y1) = snap(t.y, t.h, side);
    Ok(HeatmapRegion {
        x0,
        y0,
        x1,
        y1,
        hflip: t.hflip,
    })
}

/// The region of a `heatmap_side×heatmap_side` heatmap visible through `t`.
pub fn region_on_heatmap(t: &AugmentationTransform, heatmap_side: usize) -> Result<HeatmapRegion> {
    pixel_region(t, heatmap_side)
}

/// Cuts `region` out of a square `h×w×c` map, mirrors it if the region is
/// flipped, and resizes it to `out_h×out_w`.
pub fn extract_region<T: Real>(map: &Tensor<T>, region: &HeatmapRegion, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let cut = crop(map, region.y0, region.y1, region.x0, region.x1)?;
    let cut = if region.hflip { hflip(&cut)? } else { cut };
    bilinear_resize(&cut, out_h, out_w)
}

/// Crops a canonical-frame image, flips it if requested and resizes the
/// result to `out_size×out_size`.
pub fn apply_to_image<T: Real>(image: &Tensor<T>, t: &AugmentationTransform, out_size: usize) -> Result<Tensor<T>> {
    let (h, w, _) = image.dims3()?;
    if h != w {
        return Err(Error::Shape(format!("canonical frame must be square, got {h}×{w}")));
    }
    let region = pixel_region(t, h)?;
    extract_region(image, &region, out_size, out_size)
}
