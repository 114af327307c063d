//! Adam with global-norm gradient clipping and a warmup + polynomial-decay schedule.

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear warmup to `peak_lr`, then polynomial decay to `end_lr` at `total_steps`.
/// Full scale: peak 1e-4, 5k warmup steps, 150k steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LrSchedule {
    pub peak_lr: f64,
    pub end_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub power: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            peak_lr: 1e-3,
            end_lr: 1e-5,
            warmup_steps: 250,
            total_steps: 5000,
            power: 1.0,
        }
    }
}

impl LrSchedule {
    /// Learning rate used for the update at 0-based `step`.
    pub fn lr(&self, step: usize) -> f64 {
        let s = step + 1;
        if s <= self.warmup_steps {
            return self.peak_lr * s as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1) as f64;
        let frac = ((s - self.warmup_steps) as f64 / span).min(1.0);
        self.end_lr + (self.peak_lr - self.end_lr) * (1.0 - frac).powf(self.power)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            clip_norm: 1.0,
        }
    }
}

/// Adam state over an ordered list of named variables.
pub struct Adam {
    cfg: AdamConfig,
    vars: Vec<(String, Var)>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: usize,
}

impl Adam {
    pub fn new(vars: Vec<(String, Var)>, cfg: AdamConfig) -> Result<Self> {
        let m = vars
            .iter()
            .map(|(_, v)| Ok(v.as_tensor().zeros_like()?))
            .collect::<Result<Vec<_>>>()?;
        let v = m.clone();
        Ok(Self {
            cfg,
            vars,
            m,
            v,
            step: 0,
        })
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn vars(&self) -> &[(String, Var)] {
        &self.vars
    }

    /// First and second moments in variable order.
    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    pub fn restore(&mut self, step: usize, m: Vec<Tensor>, v: Vec<Tensor>) -> Result<()> {
        if m.len() != self.vars.len() || v.len() != self.vars.len() {
            return Err(Error::Invalid("optimizer state does not match parameters".into()));
        }
        for ((name, var), (a, b)) in self.vars.iter().zip(m.iter().zip(&v)) {
            if a.dims() != var.dims() || b.dims() != var.dims() {
                return Err(Error::Invalid(format!("optimizer state shape for {name}")));
            }
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }

    /// Clips, applies one update at `lr`, and returns the pre-clip gradient norm.
    pub fn step(&mut self, grads: &GradStore, lr: f64) -> Result<f64> {
        let grads: Vec<Tensor> = self
            .vars
            .iter()
            .map(|(_, var)| match grads.get(var.as_tensor()) {
                Some(g) => Ok(g.clone()),
                None => Ok(var.as_tensor().zeros_like()?),
            })
            .collect::<Result<_>>()?;
        let mut sq = 0.0;
        for g in &grads {
            sq += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        }
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(Error::TrainingDivergence(format!("gradient norm {norm}")));
        }
        let scale = if self.cfg.clip_norm > 0.0 && norm > self.cfg.clip_norm {
            self.cfg.clip_norm / norm
        } else {
            1.0
        };
        self.step += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        for (i, (_, var)) in self.vars.iter().enumerate() {
            let g = (&grads[i] * scale)?;
            self.m[i] = ((&self.m[i] * b1)? + (&g * (1.0 - b1))?)?;
            self.v[i] = ((&self.v[i] * b2)? + (g.sqr()? * (1.0 - b2))?)?;
            let mhat = (&self.m[i] / bc1)?;
            let vhat = (&self.v[i] / bc2)?;
            let mut update = (mhat / (vhat.sqrt()? + self.cfg.eps)?)?;
            if self.cfg.weight_decay > 0.0 {
                update = (update + (var.as_tensor() * self.cfg.weight_decay)?)?;
            }
            var.set(&(var.as_tensor() - (update * lr)?)?)?;
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn schedule_shape() {
        let s = LrSchedule {
            peak_lr: 1e-3,
            end_lr: 0.0,
            warmup_steps: 10,
            total_steps: 110,
            power: 1.0,
        };
        assert!((s.lr(0) - 1e-4).abs() < 1e-15);
        assert!((s.lr(9) - 1e-3).abs() < 1e-15);
        assert!((s.lr(59) - 5e-4).abs() < 1e-12);
        assert!(s.lr(109).abs() < 1e-15);
        assert!(s.lr(500).abs() < 1e-15);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let x = Var::new(&[3.0f64, -2.0], &Device::Cpu).unwrap();
        let mut opt = Adam::new(vec![("x".into(), x.clone())], AdamConfig::default()).unwrap();
        for _ in 0..500 {
            let loss = x.as_tensor().sqr().unwrap().sum_all().unwrap();
            let grads = loss.backward().unwrap();
            opt.step(&grads, 0.05).unwrap();
        }
        let v = x.as_tensor().to_vec1::<f64>().unwrap();
        assert!(v.iter().all(|a| a.abs() < 1e-2), "{v:?}");
    }

    #[test]
    fn first_step_is_lr_sized() {
        let x = Var::new(&[1.0f64], &Device::Cpu).unwrap();
        let mut opt = Adam::new(vec![("x".into(), x.clone())], AdamConfig::default()).unwrap();
        let grads = (x.as_tensor() * 0.3).unwrap().sum_all().unwrap().backward().unwrap();
        opt.step(&grads, 0.1).unwrap();
        assert!((x.as_tensor().to_vec1::<f64>().unwrap()[0] - 0.9).abs() < 1e-6);
    }
}
