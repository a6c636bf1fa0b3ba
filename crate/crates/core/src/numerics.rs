//! Dense row-major tensors and the handful of kernels the rest of the crate
//! builds on.
//!
//! Spatial maps use height-width-channel layout: element `(y, x, c)` of an
//! `h×w×c` tensor lives at `(y * w + x) * c + c`.

use std::fmt::Debug;

use num_traits::Float;

use crate::error::{Error, Result};

/// Floating-point element type usable by the model and the kernels.
pub trait Real: Float + Debug + Default + Send + Sync + 'static {
    /// `c = alpha * a·b + beta * c` on strided row-major views.
    ///
    /// `a` is `m×k`, `b` is `k×n`, `c` is `m×n`; strides are in elements.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
        c_strides: (isize, isize),
    );

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

macro_rules! check_extent {
    ($buf:expr, $rows:expr, $cols:expr, $strides:expr) => {
        if $rows > 0 && $cols > 0 {
            let last = ($rows as isize - 1) * $strides.0 + ($cols as isize - 1) * $strides.1;
            assert!(
                $strides.0 >= 0 && $strides.1 >= 0 && (last as usize) < $buf.len(),
                "gemm operand out of bounds"
            );
        }
    };
}

impl Real for f32 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: &[f32],
        a_strides: (isize, isize),
        b: &[f32],
        b_strides: (isize, isize),
        beta: f32,
        c: &mut [f32],
        c_strides: (isize, isize),
    ) {
        check_extent!(a, m, k, a_strides);
        check_extent!(b, k, n, b_strides);
        check_extent!(c, m, n, c_strides);
        // SAFETY: every operand extent was bounds-checked above.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                a_strides.0,
                a_strides.1,
                b.as_ptr(),
                b_strides.0,
                b_strides.1,
                beta,
                c.as_mut_ptr(),
                c_strides.0,
                c_strides.1,
            );
        }
    }

    fn from_f64(v: f64) -> f32 {
        v as f32
    }

    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: &[f64],
        a_strides: (isize, isize),
        b: &[f64],
        b_strides: (isize, isize),
        beta: f64,
        c: &mut [f64],
        c_strides: (isize, isize),
    ) {
        check_extent!(a, m, k, a_strides);
        check_extent!(b, k, n, b_strides);
        check_extent!(c, m, n, c_strides);
        // SAFETY: every operand extent was bounds-checked above.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                a_strides.0,
                a_strides.1,
                b.as_ptr(),
                b_strides.0,
                b_strides.1,
                beta,
                c.as_mut_ptr(),
                c_strides.0,
                c_strides.1,
            );
        }
    }

    fn from_f64(v: f64) -> f64 {
        v
    }

    fn to_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Copy + Default> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero dimension in shape {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    /// Panics on a zero dimension; use [`Tensor::new`] for checked construction.
    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, T::default())
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero dimension in {shape:?}");
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero dimension in {shape:?}");
        let len: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..len).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn map<U: Copy + Default>(&self, f: impl Fn(T) -> U) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Unpacks a rank-3 shape as `(h, w, c)`.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [h, w, c] => Ok((h, w, c)),
            _ => Err(Error::Shape(format!(
                "expected a rank-3 tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn at3(&self, y: usize, x: usize, c: usize) -> T {
        let (w, ch) = (self.shape[1], self.shape[2]);
        self.data[(y * w + x) * ch + c]
    }
}

impl<T: Real> Tensor<T> {
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        self.map(|v| U::from_f64(v.to_f64()))
    }
}

pub fn sigmoid_scalar<T: Real>(x: T) -> T {
    let one = T::one();
    if x >= T::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    }
}

pub fn sigmoid<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    t.map(sigmoid_scalar)
}

/// Per-channel arithmetic mean over the spatial locations of an `h×w×c` map.
pub fn spatial_mean<T: Real>(t: &Tensor<T>) -> Result<Vec<T>> {
    let (h, w, c) = t.dims3()?;
    let mut acc = vec![T::zero(); c];
    for px in t.data().chunks_exact(c) {
        for (a, &v) in acc.iter_mut().zip(px) {
            *a = *a + v;
        }
    }
    let n = T::from_f64((h * w) as f64);
    Ok(acc.into_iter().map(|a| a / n).collect())
}

/// Source coordinate and blend weight for each output index along one axis,
/// using half-pixel centers: output `i` samples input position
/// `(i + 0.5) * in / out - 0.5`, clamped to the valid range.
fn axis_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(input - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Bilinear resize of an `h×w×c` map with half-pixel-center alignment.
pub fn bilinear_resize<T: Real>(t: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (h, w, c) = t.dims3()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument(format!(
            "resize target {out_h}×{out_w} has a zero side"
        )));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(t.clone());
    }
    let ys = axis_taps(h, out_h);
    let xs = axis_taps(w, out_w);
    let src = t.data();
    let mut out = Vec::with_capacity(out_h * out_w * c);
    for &(y0, y1, fy) in &ys {
        let fy = T::from_f64(fy);
        for &(x0, x1, fx) in &xs {
            let fx = T::from_f64(fx);
            let p00 = &src[(y0 * w + x0) * c..][..c];
            let p01 = &src[(y0 * w + x1) * c..][..c];
            let p10 = &src[(y1 * w + x0) * c..][..c];
            let p11 = &src[(y1 * w + x1) * c..][..c];
            for ch in 0..c {
                let top = p00[ch] + (p01[ch] - p00[ch]) * fx;
                let bottom = p10[ch] + (p11[ch] - p10[ch]) * fx;
                out.push(top + (bottom - top) * fy);
            }
        }
    }
    Tensor::new(vec![out_h, out_w, c], out)
}

/// Mirrors an `h×w×c` map left to right.
pub fn hflip<T: Real>(t: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w, c) = t.dims3()?;
    let src = t.data();
    let mut out = Vec::with_capacity(src.len());
    for y in 0..h {
        for x in (0..w).rev() {
            out.extend_from_slice(&src[(y * w + x) * c..][..c]);
        }
    }
    Tensor::new(vec![h, w, c], out)
}

/// Copies the rows `y0..y1` and columns `x0..x1` of an `h×w×c` map.
pub fn crop<T: Real>(t: &Tensor<T>, y0: usize, y1: usize, x0: usize, x1: usize) -> Result<Tensor<T>> {
    let (h, w, c) = t.dims3()?;
    if !(y0 < y1 && y1 <= h && x0 < x1 && x1 <= w) {
        return Err(Error::Shape(format!(
            "crop rows {y0}..{y1} cols {x0}..{x1} outside {h}×{w}"
        )));
    }
    let src = t.data();
    let mut out = Vec::with_capacity((y1 - y0) * (x1 - x0) * c);
    for y in y0..y1 {
        out.extend_from_slice(&src[(y * w + x0) * c..(y * w + x1) * c]);
    }
    Tensor::new(vec![y1 - y0, x1 - x0, c], out)
}

/// Derives an independent 64-bit seed from a tuple of integers with the
/// splitmix64 finalizer.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        h ^= p;
        h = h.wrapping_add(0x9E37_79B9_7F4A_7C15);
        h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 31;
    }
    h
}

/// Central-difference gradient of a scalar function, one coordinate at a time.
pub fn finite_difference_gradient<F>(f: F, t: &Tensor<f64>, eps: f64) -> Result<Tensor<f64>>
where
    F: Fn(&Tensor<f64>) -> f64,
{
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    let mut probe = t.clone();
    let mut grad = Vec::with_capacity(t.len());
    for i in 0..t.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + eps;
        let up = f(&probe);
        probe.data[i] = orig - eps;
        let down = f(&probe);
        probe.data[i] = orig;
        grad.push((up - down) / (2.0 * eps));
    }
    Tensor::new(t.shape.clone(), grad)
}
