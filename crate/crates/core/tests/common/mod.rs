#![allow(dead_code)]

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use ragtta::conditioning::ConditioningConfig;
use ragtta::flow_matching::{
    fm_loss, sample, sample_training_batch, FlowConfig, Integrator, MaskPolicy, VectorFieldConfig, VectorFieldModel,
};
use ragtta::nn::ParamStore;
use ragtta::optim::{Adam, AdamConfig};

/// One checked coordinate.
#[derive(Debug)]
pub struct GradPoint {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradPoint {
    pub fn rel_err(&self) -> f64 {
        let scale = self.analytic.abs().max(self.numeric.abs());
        if scale < 1e-7 {
            return (self.analytic - self.numeric).abs();
        }
        (self.analytic - self.numeric).abs() / scale
    }
}

fn set_entry(var: &Var, index: usize, value: f64) {
    let shape = var.dims().to_vec();
    let mut v = var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
    v[index] = value;
    var.set(&Tensor::from_vec(v, shape, &Device::Cpu).unwrap()).unwrap();
}

fn get_entry(var: &Var, index: usize) -> f64 {
    var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap()[index]
}

/// Central differences (h = 1e-5) against backprop on `n` random coordinates of
/// the parameters whose names start with one of `prefixes`. The store must be f64.
pub fn grad_check(
    store: &ParamStore,
    prefixes: &[&str],
    n: usize,
    seed: u64,
    loss: impl Fn() -> Tensor,
) -> Vec<GradPoint> {
    let vars: Vec<(String, Var)> = store
        .vars()
        .iter()
        .filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p)))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    assert!(!vars.is_empty(), "no parameters match {prefixes:?}");
    let total: usize = vars.iter().map(|(_, v)| v.elem_count()).sum();
    assert!(total >= n, "only {total} parameters");
    let value = loss();
    assert_eq!(value.dtype(), DType::F64);
    let grads = value.backward().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    while out.len() < n {
        let (name, var) = &vars[rng.random_range(0..vars.len())];
        let index = rng.random_range(0..var.elem_count());
        if !seen.insert((name.clone(), index)) {
            continue;
        }
        let analytic = grads
            .get(var.as_tensor())
            .map(|g| g.flatten_all().unwrap().to_vec1::<f64>().unwrap()[index])
            .unwrap_or(0.0);
        let h = 1e-5;
        let x = get_entry(var, index);
        set_entry(var, index, x + h);
        let up = loss().to_scalar::<f64>().unwrap();
        set_entry(var, index, x - h);
        let down = loss().to_scalar::<f64>().unwrap();
        set_entry(var, index, x);
        out.push(GradPoint {
            name: name.clone(),
            index,
            analytic,
            numeric: (up - down) / (2.0 * h),
        });
    }
    out
}

pub fn assert_grads(points: &[GradPoint], tol: f64) {
    for p in points {
        assert!(p.rel_err() < tol, "{p:?} rel err {}", p.rel_err());
    }
}

pub fn randn(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n)
        .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
        .collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

pub fn small_conditioning() -> ConditioningConfig {
    ConditioningConfig {
        feature_dim: 6,
        d_model: 8,
        n_heads: 2,
        ff_dim: 16,
        text_layers: 1,
        retrieval_layers: 2,
        k_max: 4,
        max_frames: 300,
    }
}

/// Scalar probe loss `sum(x * w)` with fixed random weights.
pub fn probe(x: &Tensor, seed: u64) -> Tensor {
    let w = randn(x.dims(), seed);
    (x * w).unwrap().sum_all().unwrap()
}

/// Trains a small field on one fixed datapoint, then returns the sample MSE
/// against that point for each Euler step count.
pub fn single_point_overfit_errors(step_counts: &[usize]) -> Vec<f64> {
    let (frames, dim) = (4, 3);
    let mut store = ParamStore::new(11, DType::F32);
    let model = VectorFieldModel::new(
        &mut store,
        &VectorFieldConfig {
            feature_dim: dim,
            d_model: 32,
            n_heads: 2,
            ff_dim: 64,
            layers: 2,
            max_frames: frames,
        },
    )
    .unwrap();
    let flow = FlowConfig {
        mask: MaskPolicy {
            p_full: 1.0,
            ..MaskPolicy::default()
        },
        ..FlowConfig::default()
    };
    let batch_size = 32;
    let target = randn(&[1, frames, dim], 77).to_dtype(DType::F32).unwrap();
    let x1 = target.repeat((batch_size, 1, 1)).unwrap();
    let cond = Tensor::zeros((batch_size, 1, 32), DType::F32, &Device::Cpu).unwrap();
    let vars: Vec<_> = store.vars().iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    let mut opt = Adam::new(vars, AdamConfig::default()).unwrap();
    let steps = 1500;
    for step in 0..steps {
        let batch = sample_training_batch(&x1, &flow, step as u64).unwrap();
        let loss = fm_loss(&model, &batch, &cond).unwrap();
        let lr = 3e-3 * (1.0 - step as f64 / steps as f64) + 1e-5;
        opt.step(&loss.backward().unwrap(), lr).unwrap();
    }
    let n_eval = 64;
    let eval_cond = Tensor::zeros((n_eval, 1, 32), DType::F32, &Device::Cpu).unwrap();
    let t = target.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
    step_counts
        .iter()
        .map(|&n| {
            let flow = FlowConfig {
                ode_steps: n,
                integrator: Integrator::Euler,
                ..FlowConfig::default()
            };
            let out = sample(&model, &eval_cond, frames, dim, 30.0, &flow, 999).unwrap();
            out.iter()
                .map(|f| f.as_slice().iter().zip(&t).map(|(a, b)| (*a as f64 - b).powi(2)).sum::<f64>())
                .sum::<f64>()
                / (n_eval * frames * dim) as f64
        })
        .collect()
}
