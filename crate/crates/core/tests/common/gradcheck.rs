//! Analytic gradients vs. central finite differences evaluated in f64 with
//! Richardson extrapolation. Stencils that would cross a ReLU kink are
//! shrunk until the activation pattern is constant across them.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use surgeon::harness::model::Cache;
use surgeon::harness::{Activation, AttentionConfig, Batch, Kd, KdConfig, ModelConfig, ToyModel};
use surgeon::{Mask, Scalar};

pub struct Case {
    pub name: &'static str,
    pub config: ModelConfig,
    pub kd: Option<KdConfig>,
}

pub fn cases() -> Vec<Case> {
    let mlp = |activation| ModelConfig { inputs: 6, hidden: vec![7, 5], classes: 4, activation, attention: None };
    vec![
        Case { name: "dense-identity", config: mlp(Activation::Identity), kd: None },
        Case { name: "dense-relu", config: mlp(Activation::Relu), kd: None },
        Case { name: "dense-gelu", config: mlp(Activation::Gelu), kd: None },
        Case {
            name: "attention",
            config: ModelConfig { attention: Some(AttentionConfig { tokens: 3 }), ..mlp(Activation::Gelu) },
            kd: None,
        },
        Case { name: "kd-mixture", config: mlp(Activation::Gelu), kd: Some(KdConfig::UPSTREAM) },
        Case { name: "kd-pure", config: mlp(Activation::Relu), kd: Some(KdConfig::DOWNSTREAM) },
    ]
}

pub fn batch<T: Scalar>(rng: &mut ChaCha8Rng, n: usize, inputs: usize, classes: usize) -> Batch<T> {
    Batch {
        id: 0,
        x: (0..n * inputs).map(|_| T::lit(rng.gen_range(-1.5..1.5))).collect(),
        y: (0..n).map(|_| rng.gen_range(0..classes)).collect(),
    }
}

pub fn relu_pattern(model: &ToyModel<f64>, params: &[f64], b: &Batch<f64>) -> Vec<bool> {
    let mut caches = Vec::new();
    model.forward_with(params, &b.x, b.len(), Some(&mut caches)).unwrap();
    caches
        .iter()
        .flat_map(|c| match c {
            Cache::Dense { pre, .. } => pre.iter().map(|&z| z > 0.0).collect::<Vec<_>>(),
            Cache::Attention { .. } => Vec::new(),
        })
        .collect()
}

/// `None` when the coordinate sits on a kink (no stencil avoids it), where
/// the loss is not differentiable.
pub fn finite_difference(model: &ToyModel<f64>, b: &Batch<f64>, kd: Option<&Kd<f64>>, coord: usize) -> Option<f64> {
    let base = model.params().to_vec();
    let loss_at = |delta: f64| {
        let mut p = base.clone();
        p[coord] += delta;
        let (l, _) = model.loss_and_grad_with(&p, b, kd, None).unwrap();
        l
    };
    let pattern_at = |delta: f64| {
        let mut p = base.clone();
        p[coord] += delta;
        relu_pattern(model, &p, b)
    };
    let reference = relu_pattern(model, &base, b);
    let mut h = 1e-3;
    while [-h, h].iter().any(|&d| pattern_at(d) != reference) {
        h *= 0.1;
        if h < 1e-10 {
            return None;
        }
    }
    let central = |h: f64| (loss_at(h) - loss_at(-h)) / (2.0 * h);
    Some((4.0 * central(h / 2.0) - central(h)) / 3.0)
}

pub fn relative(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Worst relative error over `coords` random coordinates (plus every
/// coordinate of the first tensor) for one case at precision `T`.
pub fn worst_error<T: Scalar>(case: &Case, seed: u64, coords: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let student = ToyModel::<T>::new(&case.config, seed).unwrap();
    let teacher = ToyModel::<T>::new(&case.config, seed + 1000).unwrap();
    let b: Batch<T> = batch(&mut rng, 5, case.config.inputs, case.config.classes);
    let kd = case.kd.map(|config| Kd { config, teacher: &teacher });
    let mask = Mask::dense(student.layout().clone());
    let (_, analytic) = student.loss_and_grad(&b, kd.as_ref(), Some(&mask)).unwrap();

    let s64 = student.cast::<f64>();
    let t64 = teacher.cast::<f64>();
    let b64 = Batch { id: 0, x: surgeon::scalar::to_vec(&b.x), y: b.y.clone() };
    let kd64 = case.kd.map(|config| Kd { config, teacher: &t64 });
    let n = s64.params().len();
    let mut picks: Vec<usize> = (0..coords).map(|_| rng.gen_range(0..n)).collect();
    picks.extend(s64.tensors()[0].range().take(8));
    picks
        .into_iter()
        .filter_map(|c| finite_difference(&s64, &b64, kd64.as_ref(), c).map(|fd| relative(analytic[c].to_f64_lossy(), fd)))
        .fold(0.0, f64::max)
}
