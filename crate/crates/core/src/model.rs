//! Small convolutional multi-label classifier.
//!
//! The backbone is a stack of `3×3 conv → ReLU → 2×2 average pool` stages.
//! The classification head is a per-location linear map (a 1×1 convolution)
//! applied *before* global pooling, so every forward pass yields a spatial
//! score map alongside the image-level prediction. Because pooling and the
//! head are both linear, pooled logits equal the logits a conventional
//! pool-then-classify network would produce from the same weights.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{sigmoid_scalar, Real, Tensor};

/// How the image-level probability is derived from the spatial logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GlobalPool {
    /// `f = sigmoid(mean(U))`; identical to a pool-then-head classifier.
    LogitMean,
    /// `f = mean(sigmoid(U))`.
    ProbabilityMean,
}

impl GlobalPool {
    pub fn name(self) -> &'static str {
        match self {
            GlobalPool::LogitMean => "logit_mean",
            GlobalPool::ProbabilityMean => "probability_mean",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "logit_mean" => Some(GlobalPool::LogitMean),
            "probability_mean" => Some(GlobalPool::ProbabilityMean),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Square input side in pixels.
    pub input_size: usize,
    pub in_channels: usize,
    /// Output channels of each conv stage.
    pub channels: Vec<usize>,
    pub num_classes: usize,
    pub global_pool: GlobalPool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.channels.is_empty() || self.channels.contains(&0) || self.in_channels == 0 {
            return Err(Error::InvalidArgument(format!(
                "invalid channel layout {:?} (input {})",
                self.channels, self.in_channels
            )));
        }
        let stride = self.stride();
        if self.input_size == 0 || self.input_size % stride != 0 {
            return Err(Error::InvalidArgument(format!(
                "input size {} is not a positive multiple of the total stride {stride}",
                self.input_size
            )));
        }
        Ok(())
    }

    pub fn stride(&self) -> usize {
        1 << self.channels.len()
    }

    /// Side `G` of the spatial score map.
    pub fn grid_size(&self) -> usize {
        self.input_size / self.stride()
    }

    pub fn feature_channels(&self) -> usize {
        *self.channels.last().expect("validated non-empty")
    }

    /// `(name, shape)` of every parameter array, in canonical order.
    pub fn param_layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut layout = Vec::new();
        let mut cin = self.in_channels;
        for (i, &cout) in self.channels.iter().enumerate() {
            layout.push((format!("conv{i}.weight"), vec![9 * cin, cout]));
            layout.push((format!("conv{i}.bias"), vec![cout]));
            cin = cout;
        }
        layout.push(("head.weight".into(), vec![cin, self.num_classes]));
        layout.push(("head.bias".into(), vec![self.num_classes]));
        layout
    }
}

/// One named parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

/// All trainable arrays of a model, or gradients with the same layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub tensors: Vec<Param<T>>,
}

impl<T: Real> Params<T> {
    pub fn zeros(config: &ModelConfig) -> Self {
        Self {
            tensors: config
                .param_layout()
                .into_iter()
                .map(|(name, shape)| {
                    let len = shape.iter().product();
                    Param {
                        name,
                        shape,
                        data: vec![T::zero(); len],
                    }
                })
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: vec![T::zero(); p.data.len()],
                })
                .collect(),
        }
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(|p| p.data.len()).sum()
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, &y) in a.data.iter_mut().zip(&b.data) {
                *x = *x + y;
            }
        }
    }

    pub fn scale(&mut self, factor: T) {
        for p in &mut self.tensors {
            for x in &mut p.data {
                *x = *x * factor;
            }
        }
    }

    /// Flat coordinate access across all arrays, in canonical order.
    pub fn get_flat(&self, mut index: usize) -> T {
        for p in &self.tensors {
            if index < p.data.len() {
                return p.data[index];
            }
            index -= p.data.len();
        }
        panic!("flat parameter index out of range");
    }

    pub fn set_flat(&mut self, mut index: usize, value: T) {
        for p in &mut self.tensors {
            if index < p.data.len() {
                p.data[index] = value;
                return;
            }
            index -= p.data.len();
        }
        panic!("flat parameter index out of range");
    }

    pub fn cast<U: Real>(&self) -> Params<U> {
        Params {
            tensors: self
                .tensors
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: p.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
                })
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors
            .iter()
            .all(|p| p.data.iter().all(|v| v.is_finite()))
    }
}

/// Result of a forward pass on one image.
#[derive(Debug, Clone)]
pub struct Output<T> {
    /// Spatial logits `U`, `G×G×L`.
    pub logit_map: Tensor<T>,
    /// Spatial probabilities `F = sigmoid(U)`, `G×G×L`.
    pub prob_map: Tensor<T>,
    /// Pooled logits `u = mean(U)`.
    pub logits: Vec<T>,
    /// Image-level probabilities `f`.
    pub probs: Vec<T>,
}

/// Upstream gradient at the model outputs.
#[derive(Debug, Clone)]
pub struct OutputGrad<T> {
    /// `dL/dU`, `G×G×L`.
    pub logit_map: Tensor<T>,
    /// `dL/du`, length `L`.
    pub logits: Vec<T>,
}

struct StageCache<T> {
    side: usize,
    cin: usize,
    cols: Vec<T>,
    preact: Vec<T>,
}

/// Activations retained by [`Model::forward`] for the backward pass.
pub struct ForwardCache<T> {
    stages: Vec<StageCache<T>>,
    features: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: Params<T>,
}

fn im2col<T: Real>(input: &[T], side: usize, cin: usize) -> Vec<T> {
    let k = 9 * cin;
    let mut cols = vec![T::zero(); side * side * k];
    for y in 0..side {
        for x in 0..side {
            let row = &mut cols[(y * side + x) * k..][..k];
            for ky in 0..3 {
                let sy = y as isize + ky as isize - 1;
                if sy < 0 || sy >= side as isize {
                    continue;
                }
                for kx in 0..3 {
                    let sx = x as isize + kx as isize - 1;
                    if sx < 0 || sx >= side as isize {
                        continue;
                    }
                    let src = (sy as usize * side + sx as usize) * cin;
                    let dst = (ky * 3 + kx) * cin;
                    row[dst..dst + cin].copy_from_slice(&input[src..src + cin]);
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(cols: &[T], side: usize, cin: usize) -> Vec<T> {
    let k = 9 * cin;
    let mut out = vec![T::zero(); side * side * cin];
    for y in 0..side {
        for x in 0..side {
            let row = &cols[(y * side + x) * k..][..k];
            for ky in 0..3 {
                let sy = y as isize + ky as isize - 1;
                if sy < 0 || sy >= side as isize {
                    continue;
                }
                for kx in 0..3 {
                    let sx = x as isize + kx as isize - 1;
                    if sx < 0 || sx >= side as isize {
                        continue;
                    }
                    let dst = (sy as usize * side + sx as usize) * cin;
                    let src = (ky * 3 + kx) * cin;
                    for c in 0..cin {
                        out[dst + c] = out[dst + c] + row[src + c];
                    }
                }
            }
        }
    }
    out
}

fn avg_pool2<T: Real>(input: &[T], side: usize, c: usize) -> Vec<T> {
    let half = side / 2;
    let quarter = T::from_f64(0.25);
    let mut out = vec![T::zero(); half * half * c];
    for y in 0..half {
        for x in 0..half {
            let dst = &mut out[(y * half + x) * c..][..c];
            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let src = &input[((2 * y + dy) * side + 2 * x + dx) * c..][..c];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = *d + s;
                }
            }
            for d in dst.iter_mut() {
                *d = *d * quarter;
            }
        }
    }
    out
}

fn avg_pool2_backward<T: Real>(grad: &[T], side: usize, c: usize) -> Vec<T> {
    let half = side / 2;
    let quarter = T::from_f64(0.25);
    let mut out = vec![T::zero(); side * side * c];
    for y in 0..side {
        for x in 0..side {
            let src = &grad[((y / 2) * half + x / 2) * c..][..c];
            let dst = &mut out[(y * side + x) * c..][..c];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s * quarter;
            }
        }
    }
    out
}

/// Adds a bias row to every row of an `rows×cols` matrix.
fn add_bias<T: Real>(m: &mut [T], bias: &[T]) {
    for row in m.chunks_exact_mut(bias.len()) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v = *v + b;
        }
    }
}

fn column_sums<T: Real>(m: &[T], cols: usize) -> Vec<T> {
    let mut acc = vec![T::zero(); cols];
    for row in m.chunks_exact(cols) {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a = *a + v;
        }
    }
    acc
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig, params: Params<T>) -> Result<Self> {
        config.validate()?;
        let layout = config.param_layout();
        if layout.len() != params.tensors.len()
            || layout
                .iter()
                .zip(&params.tensors)
                .any(|((name, shape), p)| *name != p.name || *shape != p.shape)
        {
            return Err(Error::Shape(
                "parameter arrays do not match the model configuration".into(),
            ));
        }
        Ok(Self { config, params })
    }

    /// Uniform Glorot initialization; the head bias starts at the logit of
    /// `prior` so initial probabilities match the expected positive rate.
    pub fn init(config: ModelConfig, prior: f64, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        if !(prior > 0.0 && prior < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "prior positive rate must lie in (0, 1), got {prior}"
            )));
        }
        let mut params = Params::zeros(&config);
        let stages = config.channels.len();
        let mut cin = config.in_channels;
        for (i, &cout) in config.channels.iter().enumerate() {
            let bound = (6.0 / (9 * cin + 9 * cout) as f64).sqrt();
            for w in &mut params.tensors[2 * i].data {
                *w = T::from_f64(rng.random_range(-bound..bound));
            }
            cin = cout;
        }
        let bound = (6.0 / (cin + config.num_classes) as f64).sqrt();
        for w in &mut params.tensors[2 * stages].data {
            *w = T::from_f64(rng.random_range(-bound..bound));
        }
        let logit = (prior / (1.0 - prior)).ln();
        for b in &mut params.tensors[2 * stages + 1].data {
            *b = T::from_f64(logit);
        }
        Ok(Self { config, params })
    }

    fn check_image(&self, image: &Tensor<T>) -> Result<()> {
        let s = self.config.input_size;
        if image.shape() != [s, s, self.config.in_channels] {
            return Err(Error::Shape(format!(
                "model expects a {s}×{s}×{} image, got {:?}",
                self.config.in_channels,
                image.shape()
            )));
        }
        Ok(())
    }

    fn run_backbone(&self, image: &Tensor<T>, keep: bool) -> (Vec<T>, Vec<StageCache<T>>) {
        let mut act = image.data().to_vec();
        let mut side = self.config.input_size;
        let mut cin = self.config.in_channels;
        let mut caches = Vec::new();
        for (i, &cout) in self.config.channels.iter().enumerate() {
            let cols = im2col(&act, side, cin);
            let w = &self.params.tensors[2 * i].data;
            let b = &self.params.tensors[2 * i + 1].data;
            let p = side * side;
            let k = 9 * cin;
            let mut z = vec![T::zero(); p * cout];
            T::gemm(p, k, cout, T::one(), &cols, (k as isize, 1), w, (cout as isize, 1), T::zero(), &mut z, (cout as isize, 1));
            add_bias(&mut z, b);
            let relu: Vec<T> = z.iter().map(|&v| v.max(T::zero())).collect();
            act = avg_pool2(&relu, side, cout);
            if keep {
                caches.push(StageCache {
                    side,
                    cin,
                    cols,
                    preact: z,
                });
            }
            side /= 2;
            cin = cout;
        }
        (act, caches)
    }

    /// Backbone feature map, `G×G×C`.
    pub fn features(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_image(image)?;
        let (feats, _) = self.run_backbone(image, false);
        let g = self.config.grid_size();
        Tensor::new(vec![g, g, self.config.feature_channels()], feats)
    }

    /// Applies the linear head to one feature vector (or to each row of a
    /// `rows×C` matrix).
    pub fn head(&self, features: &[T]) -> Vec<T> {
        let stages = self.config.channels.len();
        let c = self.config.feature_channels();
        let l = self.config.num_classes;
        let rows = features.len() / c;
        let mut out = vec![T::zero(); rows * l];
        T::gemm(rows, c, l, T::one(), features, (c as isize, 1), &self.params.tensors[2 * stages].data, (l as isize, 1), T::zero(), &mut out, (l as isize, 1));
        add_bias(&mut out, &self.params.tensors[2 * stages + 1].data);
        out
    }

    /// Logits of the conventional architecture: pool the features first,
    /// then apply the head once.
    pub fn pooled_logits(&self, image: &Tensor<T>) -> Result<Vec<T>> {
        let feats = self.features(image)?;
        let pooled = crate::numerics::spatial_mean(&feats)?;
        Ok(self.head(&pooled))
    }

    fn outputs(&self, features: &[T]) -> Output<T> {
        let g = self.config.grid_size();
        let l = self.config.num_classes;
        let logit_map = Tensor::new(vec![g, g, l], self.head(features)).expect("head output shape");
        let prob_map = logit_map.map(sigmoid_scalar);
        let logits = crate::numerics::spatial_mean(&logit_map).expect("rank 3");
        let probs = match self.config.global_pool {
            GlobalPool::LogitMean => logits.iter().map(|&u| sigmoid_scalar(u)).collect(),
            GlobalPool::ProbabilityMean => crate::numerics::spatial_mean(&prob_map).expect("rank 3"),
        };
        Output {
            logit_map,
            prob_map,
            logits,
            probs,
        }
    }

    /// Inference-only forward pass.
    pub fn predict(&self, image: &Tensor<T>) -> Result<Output<T>> {
        self.check_image(image)?;
        let (feats, _) = self.run_backbone(image, false);
        Ok(self.outputs(&feats))
    }

    pub fn forward(&self, image: &Tensor<T>) -> Result<(Output<T>, ForwardCache<T>)> {
        self.check_image(image)?;
        let (features, stages) = self.run_backbone(image, true);
        let out = self.outputs(&features);
        Ok((out, ForwardCache { stages, features }))
    }

    /// Converts probability-space gradients (`dL/dF`, `dL/df`) into the
    /// logit-space gradient consumed by [`Model::backward`].
    pub fn logit_gradients(&self, out: &Output<T>, grad_prob_map: Option<&Tensor<T>>, grad_probs: &[T]) -> Result<OutputGrad<T>> {
        let l = self.config.num_classes;
        if grad_probs.len() != l {
            return Err(Error::Shape(format!("expected {l} probability gradients, got {}", grad_probs.len())));
        }
        if let Some(gm) = grad_prob_map {
            if gm.shape() != out.prob_map.shape() {
                return Err(Error::Shape(format!(
                    "score-map gradient shape {:?} does not match {:?}",
                    gm.shape(),
                    out.prob_map.shape()
                )));
            }
        }
        let g2 = T::from_f64((self.config.grid_size() * self.config.grid_size()) as f64);
        let one = T::one();
        let mut map = match grad_prob_map {
            Some(gm) => Tensor::new(
                out.prob_map.shape().to_vec(),
                gm.data()
                    .iter()
                    .zip(out.prob_map.data())
                    .map(|(&d, &p)| d * p * (one - p))
                    .collect(),
            )?,
            None => Tensor::zeros(out.prob_map.shape()),
        };
        let logits = match self.config.global_pool {
            GlobalPool::LogitMean => grad_probs
                .iter()
                .zip(&out.probs)
                .map(|(&d, &p)| d * p * (one - p))
                .collect(),
            GlobalPool::ProbabilityMean => {
                let probs = out.prob_map.data();
                for (i, v) in map.data_mut().iter_mut().enumerate() {
                    let p = probs[i];
                    *v = *v + grad_probs[i % l] / g2 * p * (one - p);
                }
                vec![T::zero(); l]
            }
        };
        Ok(OutputGrad {
            logit_map: map,
            logits,
        })
    }

    /// Parameter gradients by the chain rule, given `dL/dU` and `dL/du`.
    pub fn backward(&self, cache: &ForwardCache<T>, grad: &OutputGrad<T>) -> Result<Params<T>> {
        let g = self.config.grid_size();
        let l = self.config.num_classes;
        let c = self.config.feature_channels();
        let stages = self.config.channels.len();
        if grad.logit_map.shape() != [g, g, l] || grad.logits.len() != l {
            return Err(Error::Shape(format!(
                "upstream gradient shapes {:?}/{} do not match {g}×{g}×{l}",
                grad.logit_map.shape(),
                grad.logits.len()
            )));
        }
        if cache.stages.len() != stages {
            return Err(Error::State("forward cache does not belong to this model".into()));
        }
        let p = g * g;
        let inv_p = T::one() / T::from_f64(p as f64);
        let mut du: Vec<T> = grad.logit_map.data().to_vec();
        for row in du.chunks_exact_mut(l) {
            for (v, &gu) in row.iter_mut().zip(&grad.logits) {
                *v = *v + gu * inv_p;
            }
        }

        let mut grads = self.params.zeros_like();
        T::gemm(c, p, l, T::one(), &cache.features, (1, c as isize), &du, (l as isize, 1), T::zero(), &mut grads.tensors[2 * stages].data, (l as isize, 1));
        grads.tensors[2 * stages + 1].data = column_sums(&du, l);

        let mut upstream = vec![T::zero(); p * c];
        T::gemm(p, l, c, T::one(), &du, (l as isize, 1), &self.params.tensors[2 * stages].data, (1, l as isize), T::zero(), &mut upstream, (c as isize, 1));

        for i in (0..stages).rev() {
            let st = &cache.stages[i];
            let cout = self.config.channels[i];
            let k = 9 * st.cin;
            let pixels = st.side * st.side;
            let mut dz = avg_pool2_backward(&upstream, st.side, cout);
            for (d, &z) in dz.iter_mut().zip(&st.preact) {
                if z <= T::zero() {
                    *d = T::zero();
                }
            }
            T::gemm(k, pixels, cout, T::one(), &st.cols, (1, k as isize), &dz, (cout as isize, 1), T::zero(), &mut grads.tensors[2 * i].data, (cout as isize, 1));
            grads.tensors[2 * i + 1].data = column_sums(&dz, cout);
            if i > 0 {
                let mut dcols = vec![T::zero(); pixels * k];
                T::gemm(pixels, cout, k, T::one(), &dz, (cout as isize, 1), &self.params.tensors[2 * i].data, (1, cout as isize), T::zero(), &mut dcols, (k as isize, 1));
                upstream = col2im(&dcols, st.side, st.cin);
            }
        }
        Ok(grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            input_size: 8,
            in_channels: 2,
            channels: vec![3, 4],
            num_classes: 3,
            global_pool: GlobalPool::LogitMean,
        }
    }

    fn random_image(rng: &mut impl Rng, cfg: &ModelConfig) -> Tensor<f64> {
        Tensor::from_fn(&[cfg.input_size, cfg.input_size, cfg.in_channels], |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn config_validation() {
        let mut cfg = tiny_config();
        assert_eq!(cfg.grid_size(), 2);
        cfg.input_size = 10;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_config();
        cfg.num_classes = 1;
        assert!(cfg.validate().is_err());
        let cfg = ModelConfig {
            input_size: 64,
            in_channels: 3,
            channels: vec![8, 16, 32],
            num_classes: 8,
            global_pool: GlobalPool::LogitMean,
        };
        assert_eq!(cfg.grid_size(), 8);
    }

    #[test]
    fn zero_head_gives_constant_bias_map() {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut model = Model::<f64>::init(cfg.clone(), 0.25, &mut rng).unwrap();
        let stages = cfg.channels.len();
        model.params.tensors[2 * stages].data.iter_mut().for_each(|w| *w = 0.0);
        model.params.tensors[2 * stages + 1].data = vec![0.5, -1.0, 2.0];
        let out = model.predict(&random_image(&mut rng, &cfg)).unwrap();
        for px in out.logit_map.data().chunks(3) {
            assert_eq!(px, &[0.5, -1.0, 2.0]);
        }
        let f0 = out.prob_map.data()[0];
        assert!(out.prob_map.data().iter().step_by(3).all(|&v| v == f0));
    }

    #[test]
    fn global_probability_is_sigmoid_of_mean_logit() {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = Model::<f64>::init(cfg.clone(), 0.3, &mut rng).unwrap();
        let out = model.predict(&random_image(&mut rng, &cfg)).unwrap();
        let mean = crate::numerics::spatial_mean(&out.logit_map).unwrap();
        for i in 0..3 {
            assert!((out.probs[i] - sigmoid_scalar(mean[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = Model::<f64>::init(cfg, 0.3, &mut rng).unwrap();
        assert!(model.forward(&Tensor::zeros(&[4, 4, 2])).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = Model::<f64>::init(cfg.clone(), 0.3, &mut rng).unwrap();
        let (out, cache) = model.forward(&random_image(&mut rng, &cfg)).unwrap();
        let grad = OutputGrad {
            logit_map: Tensor::zeros(out.logit_map.shape()),
            logits: vec![0.0; 3],
        };
        let g = model.backward(&cache, &grad).unwrap();
        assert!(g.tensors.iter().all(|p| p.data.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn head_gradient_on_single_location_is_outer_product() {
        // Input 2×2 with one stage gives G = 1; dL/dW_head = feature ⊗ upstream.
        let cfg = ModelConfig {
            input_size: 2,
            in_channels: 1,
            channels: vec![2],
            num_classes: 2,
            global_pool: GlobalPool::LogitMean,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = Model::<f64>::init(cfg.clone(), 0.5, &mut rng).unwrap();
        let image = Tensor::new(vec![2, 2, 1], vec![0.3, -0.2, 0.9, 0.4]).unwrap();
        let feats = model.features(&image).unwrap();
        let (_, cache) = model.forward(&image).unwrap();
        let upstream = [0.7, -1.3];
        let grad = OutputGrad {
            logit_map: Tensor::new(vec![1, 1, 2], upstream.to_vec()).unwrap(),
            logits: vec![0.0, 0.0],
        };
        let g = model.backward(&cache, &grad).unwrap();
        let hw = &g.tensors[2].data;
        for c in 0..2 {
            for l in 0..2 {
                assert!((hw[c * 2 + l] - feats.data()[c] * upstream[l]).abs() < 1e-12);
            }
        }
        assert_eq!(g.tensors[3].data, upstream.to_vec());
    }

    #[test]
    fn backward_rejects_mismatched_gradient() {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let model = Model::<f64>::init(cfg.clone(), 0.3, &mut rng).unwrap();
        let (_, cache) = model.forward(&random_image(&mut rng, &cfg)).unwrap();
        let grad = OutputGrad {
            logit_map: Tensor::zeros(&[3, 3, 3]),
            logits: vec![0.0; 3],
        };
        assert!(model.backward(&cache, &grad).is_err());
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let model = Model::<f32>::init(cfg.clone(), 0.3, &mut rng).unwrap();
        let img = random_image(&mut rng, &cfg).cast::<f32>();
        let a = model.predict(&img).unwrap();
        let b = model.predict(&img).unwrap();
        assert_eq!(a.logit_map, b.logit_map);
    }

    #[test]
    fn new_checks_parameter_layout() {
        let cfg = tiny_config();
        let mut params = Params::<f64>::zeros(&cfg);
        assert!(Model::new(cfg.clone(), params.clone()).is_ok());
        params.tensors.pop();
        assert!(Model::new(cfg, params).is_err());
    }
}
