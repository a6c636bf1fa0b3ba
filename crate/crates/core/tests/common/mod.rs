//! Finite-difference gradient checks shared by the gradient and acceptance
//! suites. Each check runs `DRAWS` random configurations in f64 and returns
//! the worst relative error it saw.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spml_core::augment::{sample_transform, AugmentationTransform, CropParams};
use spml_core::losses::{
    an_loss, bce_loss, cl_loss, combined_loss, en_loss, ep_loss, epr_loss, scl_loss, ConsistencyTerm, Label,
    LossValue, PrimaryLoss,
};
use spml_core::model::{GlobalPool, Model, ModelConfig, Output};
use spml_core::numerics::{finite_difference_gradient, Tensor};

pub const DRAWS: usize = 100;
pub const TOL: f64 = 1e-4;
const EPS: f64 = 1e-5;
/// Gradients smaller than this are compared absolutely.
const FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Check {
    Bce,
    An,
    En,
    Ep,
    Epr,
    Cl,
    Scl,
    Combined,
    ModelParams,
}

pub const ALL: [Check; 9] = [
    Check::Bce,
    Check::An,
    Check::En,
    Check::Ep,
    Check::Epr,
    Check::Cl,
    Check::Scl,
    Check::Combined,
    Check::ModelParams,
];

pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(FLOOR))
        .fold(0.0, f64::max)
}

fn probs(rng: &mut impl Rng, l: usize) -> Vec<f64> {
    (0..l).map(|_| rng.random_range(0.02..0.98)).collect()
}

fn labels(rng: &mut impl Rng, l: usize) -> Vec<Label> {
    (0..l)
        .map(|_| match rng.random_range(0..3) {
            0 => Label::Positive,
            1 => Label::Negative,
            _ => Label::Unknown,
        })
        .collect()
}

fn mask(rng: &mut impl Rng, l: usize) -> Vec<bool> {
    (0..l).map(|_| rng.random_bool(0.4)).collect()
}

type VectorLoss = Box<dyn Fn(&[f64]) -> LossValue>;

fn vector_loss(seed: u64, make: impl Fn(&mut ChaCha8Rng, usize) -> VectorLoss) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..DRAWS {
        let l = rng.random_range(2..12);
        let f = probs(&mut rng, l);
        let eval = make(&mut rng, l);
        let analytic = eval(&f).grad;
        let t = Tensor::new(vec![l], f).unwrap();
        let numeric = finite_difference_gradient(|p| eval(p.data()).value, &t, EPS).unwrap();
        worst = worst.max(rel_err(&analytic, numeric.data()));
    }
    worst
}

fn random_transform(rng: &mut impl Rng) -> AugmentationTransform {
    let params = CropParams {
        area_min: 0.25,
        area_max: 1.0,
        square: rng.random_bool(0.5),
        hflip_prob: 0.5,
    };
    sample_transform(rng, &params).unwrap()
}

fn scl() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for _ in 0..DRAWS {
        let g = rng.random_range(1..5);
        let w = g * rng.random_range(1..4);
        let l = rng.random_range(2..5);
        let map = Tensor::from_fn(&[g, g, l], |_| rng.random_range(0.0..1.0));
        let heat = Tensor::from_fn(&[w, w, l], |_| rng.random_range(0.0..1.0));
        let t = random_transform(&mut rng);
        let analytic = scl_loss(&map, &heat, &t).unwrap().grad;
        let numeric = finite_difference_gradient(|m| scl_loss(m, &heat, &t).unwrap().value, &map, EPS).unwrap();
        worst = worst.max(rel_err(&analytic, numeric.data()));
    }
    worst
}

/// A random small model, image, loss selection and consistency target.
struct Setup {
    model: Model<f64>,
    image: Tensor<f64>,
    primary: PrimaryLoss,
    z: Vec<Label>,
    expected: Vec<bool>,
    k: f64,
    consistency: usize,
    estimates: Vec<f64>,
    heatmap: Tensor<f64>,
    transform: AugmentationTransform,
    gamma: f64,
}

impl Setup {
    fn draw(rng: &mut ChaCha8Rng) -> Self {
        let stages = rng.random_range(1..4);
        let g = rng.random_range(1..3);
        let input = g << stages;
        let l = rng.random_range(2..5);
        let config = ModelConfig {
            input_size: input,
            in_channels: 3,
            channels: (0..stages).map(|_| rng.random_range(1..4)).collect(),
            num_classes: l,
            global_pool: if rng.random_bool(0.5) {
                GlobalPool::LogitMean
            } else {
                GlobalPool::ProbabilityMean
            },
        };
        let mut model = Model::init(config, 0.3, rng).unwrap();
        for p in &mut model.params.tensors {
            p.data.iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
        }
        let primary = [PrimaryLoss::Bce, PrimaryLoss::An, PrimaryLoss::En, PrimaryLoss::Ep, PrimaryLoss::Epr]
            [rng.random_range(0..5)];
        let w = g * rng.random_range(1..3);
        Setup {
            image: Tensor::from_fn(&[input, input, 3], |_| rng.random_range(0.0..1.0)),
            primary,
            z: labels(rng, l),
            expected: mask(rng, l),
            k: rng.random_range(0.5..l as f64),
            consistency: rng.random_range(0..3),
            estimates: (0..l).map(|_| rng.random_range(0.0..1.0)).collect(),
            heatmap: Tensor::from_fn(&[w, w, l], |_| rng.random_range(0.0..1.0)),
            transform: random_transform(rng),
            gamma: rng.random_range(0.0..2.0),
            model,
        }
    }

    fn value(&self, f: &[f64], map: &Tensor<f64>) -> (f64, Vec<f64>, Option<Vec<f64>>) {
        let primary = self.primary.evaluate(f, &self.z, &self.expected, self.k).unwrap();
        let term = match self.consistency {
            0 => None,
            1 => Some(ConsistencyTerm::Global(cl_loss(f, &self.estimates).unwrap())),
            _ => Some(ConsistencyTerm::Spatial(scl_loss(map, &self.heatmap, &self.transform).unwrap())),
        };
        let c = combined_loss(primary, term, self.gamma).unwrap();
        (c.value, c.grad_probs, c.grad_prob_map)
    }

    fn output(&self, model: &Model<f64>) -> Output<f64> {
        model.predict(&self.image).unwrap()
    }

    fn loss(&self, model: &Model<f64>) -> f64 {
        let out = self.output(model);
        self.value(&out.probs, &out.prob_map).0
    }

    fn analytic_params(&self) -> Vec<f64> {
        let (out, cache) = self.model.forward(&self.image).unwrap();
        let (_, grad_probs, grad_map) = self.value(&out.probs, &out.prob_map);
        let gm = grad_map.map(|d| Tensor::new(out.prob_map.shape().to_vec(), d).unwrap());
        let og = self.model.logit_gradients(&out, gm.as_ref(), &grad_probs).unwrap();
        let grads = self.model.backward(&cache, &og).unwrap();
        (0..grads.num_values()).map(|i| grads.get_flat(i)).collect()
    }

    fn numeric_params(&self) -> Vec<f64> {
        let mut probe = self.model.clone();
        (0..probe.params.num_values())
            .map(|i| {
                let orig = probe.params.get_flat(i);
                probe.params.set_flat(i, orig + EPS);
                let up = self.loss(&probe);
                probe.params.set_flat(i, orig - EPS);
                let down = self.loss(&probe);
                probe.params.set_flat(i, orig);
                (up - down) / (2.0 * EPS)
            })
            .collect()
    }
}

/// The combined objective against its inputs: image-level and spatial
/// probabilities.
fn combined() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst: f64 = 0.0;
    for _ in 0..DRAWS {
        let s = Setup::draw(&mut rng);
        let out = s.output(&s.model);
        let (_, grad_probs, grad_map) = s.value(&out.probs, &out.prob_map);
        let f = Tensor::new(vec![out.probs.len()], out.probs.clone()).unwrap();
        let numeric = finite_difference_gradient(|p| s.value(p.data(), &out.prob_map).0, &f, EPS).unwrap();
        worst = worst.max(rel_err(&grad_probs, numeric.data()));
        let numeric = finite_difference_gradient(|m| s.value(&out.probs, m).0, &out.prob_map, EPS).unwrap();
        let analytic = grad_map.unwrap_or_else(|| vec![0.0; out.prob_map.len()]);
        worst = worst.max(rel_err(&analytic, numeric.data()));
    }
    worst
}

/// Every parameter of random small models under random objectives.
fn model_params() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst: f64 = 0.0;
    for _ in 0..DRAWS {
        let s = Setup::draw(&mut rng);
        worst = worst.max(rel_err(&s.analytic_params(), &s.numeric_params()));
    }
    worst
}

pub fn max_error(check: Check) -> f64 {
    match check {
        Check::Bce => vector_loss(1, |rng, l| {
            let z = labels(rng, l);
            Box::new(move |f| bce_loss(f, &z).unwrap())
        }),
        Check::An => vector_loss(2, |rng, l| {
            let z = labels(rng, l);
            Box::new(move |f| an_loss(f, &z).unwrap())
        }),
        Check::En => vector_loss(3, |rng, l| {
            let (z, m) = (labels(rng, l), mask(rng, l));
            Box::new(move |f| en_loss(f, &z, &m).unwrap())
        }),
        Check::Ep => vector_loss(4, |rng, l| {
            let (z, m) = (labels(rng, l), mask(rng, l));
            Box::new(move |f| ep_loss(f, &z, &m).unwrap())
        }),
        Check::Epr => vector_loss(5, |rng, l| {
            let z = labels(rng, l);
            let k = rng.random_range(0.5..l as f64);
            Box::new(move |f| epr_loss(f, &z, k).unwrap())
        }),
        Check::Cl => vector_loss(6, |rng, l| {
            let s: Vec<f64> = (0..l).map(|_| rng.random_range(0.0..1.0)).collect();
            Box::new(move |f| cl_loss(f, &s).unwrap())
        }),
        Check::Scl => scl(),
        Check::Combined => combined(),
        Check::ModelParams => model_params(),
    }
}
