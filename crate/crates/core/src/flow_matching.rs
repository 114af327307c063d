//! Conditional flow matching on the optimal-transport path.
//!
//! `x_t = (1 - (1 - σ) t) x0 + t x1`, `v_t = x1 - (1 - σ) x0`. The vector field
//! sees `x_t` channel-concatenated with a partially or fully masked copy of
//! `x1` and a mask channel. At inference the context is fully masked.

use candle_core::{DType, Device, Tensor, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::codec_features::LatentFeature;
use crate::error::{Error, Result};
use crate::nn::{sinusoidal_table, time_features, LayerNorm, Linear, ParamStore, TransformerBlock};
use crate::seeding::derive_seed;

pub const DEFAULT_SIGMA_MIN: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskPolicy {
    /// Probability that every frame is masked.
    pub p_full: f64,
    /// Otherwise one contiguous span of `U[span_lo, span_hi]` of the frames is masked.
    pub span_lo: f64,
    pub span_hi: f64,
}

impl Default for MaskPolicy {
    fn default() -> Self {
        Self {
            p_full: 0.3,
            span_lo: 0.7,
            span_hi: 1.0,
        }
    }
}

impl MaskPolicy {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.p_full)
            && 0.0 < self.span_lo
            && self.span_lo <= self.span_hi
            && self.span_hi <= 1.0;
        if !ok {
            return Err(Error::InvalidConfig(format!("bad mask policy {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Integrator {
    Euler,
    Midpoint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowConfig {
    pub sigma_min: f64,
    pub ode_steps: usize,
    pub integrator: Integrator,
    pub mask: MaskPolicy,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            sigma_min: DEFAULT_SIGMA_MIN,
            ode_steps: 32,
            integrator: Integrator::Euler,
            mask: MaskPolicy::default(),
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min > 0.0 && self.sigma_min < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "sigma_min {} outside (0, 1)",
                self.sigma_min
            )));
        }
        if self.ode_steps == 0 {
            return Err(Error::InvalidConfig("ode_steps must be at least 1".into()));
        }
        self.mask.validate()
    }
}

fn check_same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::DimensionMismatch(format!(
            "{:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// `(x_t, v_t)` for a single time shared by every element.
pub fn ot_path(x0: &Tensor, x1: &Tensor, t: f64, sigma_min: f64) -> Result<(Tensor, Tensor)> {
    check_same_shape(x0, x1)?;
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Invalid(format!("t = {t} outside [0, 1]")));
    }
    let xt = ((x0 * (1.0 - (1.0 - sigma_min) * t))? + (x1 * t)?)?;
    let vt = (x1 - (x0 * (1.0 - sigma_min))?)?;
    Ok((xt, vt))
}

/// Batched path with one time per leading-axis item. `t` has shape `[batch]`.
pub fn ot_path_batch(x0: &Tensor, x1: &Tensor, t: &Tensor, sigma_min: f64) -> Result<(Tensor, Tensor)> {
    check_same_shape(x0, x1)?;
    let b = x0.dims()[0];
    let times = t.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    if times.len() != b {
        return Err(Error::DimensionMismatch(format!("{} times for batch {b}", times.len())));
    }
    if let Some(bad) = times.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::Invalid(format!("t = {bad} outside [0, 1]")));
    }
    let mut shape = vec![b];
    shape.extend(std::iter::repeat_n(1, x0.rank() - 1));
    let t = t.to_dtype(x0.dtype())?.reshape(shape)?;
    let keep = (t.affine(-(1.0 - sigma_min), 1.0))?;
    let xt = (x0.broadcast_mul(&keep)? + x1.broadcast_mul(&t)?)?;
    let vt = (x1 - (x0 * (1.0 - sigma_min))?)?;
    Ok((xt, vt))
}

/// Context for one clip: `x1` with masked rows zeroed.
#[derive(Clone, Debug)]
pub struct MaskedContext {
    /// `[T, D]`.
    pub masked_x1: Tensor,
    /// `true` = masked (to be generated).
    pub mask: Vec<bool>,
}

impl MaskedContext {
    pub fn from_mask(x1: &Tensor, mask: Vec<bool>) -> Result<Self> {
        let (t, _) = x1.dims2()?;
        if mask.len() != t {
            return Err(Error::DimensionMismatch(format!("{} mask rows for {t} frames", mask.len())));
        }
        let keep: Vec<f64> = mask.iter().map(|&m| if m { 0.0 } else { 1.0 }).collect();
        let keep = Tensor::from_vec(keep, (t, 1), x1.device())?.to_dtype(x1.dtype())?;
        Ok(Self {
            masked_x1: x1.broadcast_mul(&keep)?,
            mask,
        })
    }

    pub fn n_masked(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Draws a mask for `n_frames` rows under `policy`.
pub fn draw_mask<R: Rng>(n_frames: usize, policy: &MaskPolicy, rng: &mut R) -> Result<Vec<bool>> {
    policy.validate()?;
    if n_frames == 0 {
        return Err(Error::Invalid("cannot mask an empty feature".into()));
    }
    if rng.random::<f64>() < policy.p_full {
        return Ok(vec![true; n_frames]);
    }
    let frac = if policy.span_hi > policy.span_lo {
        rng.random_range(policy.span_lo..policy.span_hi)
    } else {
        policy.span_lo
    };
    let len = ((frac * n_frames as f64).round() as usize).clamp(1, n_frames);
    let start = rng.random_range(0..=n_frames - len);
    Ok((0..n_frames).map(|i| i >= start && i < start + len).collect())
}

/// `x1`: `[T, D]`.
pub fn mask_features<R: Rng>(x1: &Tensor, policy: &MaskPolicy, rng: &mut R) -> Result<MaskedContext> {
    let (t, _) = x1.dims2()?;
    let mask = draw_mask(t, policy, rng)?;
    MaskedContext::from_mask(x1, mask)
}

/// Batched `FlowSample`s: every tensor is `[batch, T, D]` except `t` (`[batch]`).
#[derive(Clone, Debug)]
pub struct FlowSample {
    pub x0: Tensor,
    pub x1: Tensor,
    pub t: Tensor,
    pub xt: Tensor,
    pub vt: Tensor,
}

/// One training batch: path samples plus masked contexts.
#[derive(Clone, Debug)]
pub struct TrainingBatch {
    pub sample: FlowSample,
    /// `[batch, T, D]`.
    pub context: Tensor,
    /// `[batch, T]`, 1 where masked.
    pub mask: Tensor,
}

/// Standard normal prior draw `[T, D]` from a seed.
pub fn prior_noise(n_frames: usize, dim: usize, seed: u64, dtype: DType) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values: Vec<f64> = (0..n_frames * dim)
        .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
        .collect();
    Ok(Tensor::from_vec(values, (n_frames, dim), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Per item `i`, draws `t`, `x0` and the mask from a stream seeded by
/// `derive_seed(seed, [i])`, so items are independent of batch composition.
pub fn sample_training_batch(x1: &Tensor, cfg: &FlowConfig, seed: u64) -> Result<TrainingBatch> {
    cfg.validate()?;
    let (b, t_len, d) = x1.dims3()?;
    if b == 0 {
        return Err(Error::Invalid("empty training batch".into()));
    }
    let dtype = x1.dtype();
    let mut times = Vec::with_capacity(b);
    let mut noise = Vec::with_capacity(b);
    let mut contexts = Vec::with_capacity(b);
    let mut masks = Vec::with_capacity(b);
    for i in 0..b {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[i as u64]));
        times.push(rng.random::<f64>());
        noise.push(prior_noise(t_len, d, rng.random(), dtype)?);
        let ctx = mask_features(&x1.get(i)?, &cfg.mask, &mut rng)?;
        masks.push(Tensor::from_vec(
            ctx.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect::<Vec<f64>>(),
            t_len,
            &Device::Cpu,
        )?);
        contexts.push(ctx.masked_x1);
    }
    let t = Tensor::from_vec(times, b, &Device::Cpu)?.to_dtype(dtype)?;
    let x0 = Tensor::stack(&noise, 0)?;
    let (xt, vt) = ot_path_batch(&x0, x1, &t, cfg.sigma_min)?;
    Ok(TrainingBatch {
        sample: FlowSample {
            x0,
            x1: x1.clone(),
            t,
            xt,
            vt,
        },
        context: Tensor::stack(&contexts, 0)?,
        mask: Tensor::stack(&masks, 0)?.to_dtype(dtype)?,
    })
}

/// A learned or analytic velocity `u(x_t, context, mask, t | cond)`.
pub trait VelocityField {
    /// `xt`, `context`: `[B, T, D]`; `mask`: `[B, T]`; `t`: `[B]`; `cond`: `[B, L, Dm]`.
    fn velocity(&self, xt: &Tensor, context: &Tensor, mask: &Tensor, t: &Tensor, cond: &Tensor)
        -> Result<Tensor>;
}

/// Mean squared error against `v_t` over masked frames only.
pub fn fm_loss(
    model: &dyn VelocityField,
    batch: &TrainingBatch,
    cond: &Tensor,
) -> Result<Tensor> {
    let s = &batch.sample;
    let u = model.velocity(&s.xt, &batch.context, &batch.mask, &s.t, cond)?;
    masked_mse(&u, &s.vt, &batch.mask)
}

/// `sum(mask * (u - v)^2) / (n_masked * D)`.
pub fn masked_mse(u: &Tensor, v: &Tensor, mask: &Tensor) -> Result<Tensor> {
    check_same_shape(u, v)?;
    let d = u.dim(D::Minus1)?;
    let count = mask.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if count <= 0.0 {
        return Err(Error::Invalid("no masked frames to supervise".into()));
    }
    let sq = (u - v)?.sqr()?.sum(D::Minus1)?;
    let loss = ((sq * mask)?.sum_all()? / (count * d as f64))?;
    let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !value.is_finite() {
        return Err(Error::TrainingDivergence(format!("loss = {value}")));
    }
    Ok(loss)
}

/// Integrates `dx/dt = u` from `x0` (`[B, T, D]`) to `t = 1` with a blank context.
pub fn sample_from(
    model: &dyn VelocityField,
    cond: &Tensor,
    x0: &Tensor,
    cfg: &FlowConfig,
) -> Result<Tensor> {
    cfg.validate()?;
    let (b, t_len, _) = x0.dims3()?;
    let dtype = x0.dtype();
    let context = x0.zeros_like()?;
    let mask = Tensor::ones((b, t_len), dtype, x0.device())?;
    let dt = 1.0 / cfg.ode_steps as f64;
    let times = |t: f64| -> Result<Tensor> {
        Ok(Tensor::full(t, b, x0.device())?.to_dtype(dtype)?)
    };
    let mut x = x0.clone();
    for step in 0..cfg.ode_steps {
        let t = step as f64 * dt;
        let u = model.velocity(&x, &context, &mask, &times(t)?, cond)?;
        x = match cfg.integrator {
            Integrator::Euler => (&x + (u * dt)?)?,
            Integrator::Midpoint => {
                let mid = (&x + (u * (0.5 * dt))?)?;
                let um = model.velocity(&mid, &context, &mask, &times(t + 0.5 * dt)?, cond)?;
                (&x + (um * dt)?)?
            }
        };
        let check = x.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !check.is_finite() {
            return Err(Error::SamplerDivergence { t: t + dt });
        }
    }
    Ok(x)
}

/// Samples one feature of `n_frames` rows per conditioning item; item `i` uses
/// prior noise seeded by `derive_seed(seed, [i])`.
pub fn sample(
    model: &dyn VelocityField,
    cond: &Tensor,
    n_frames: usize,
    dim: usize,
    frame_rate: f32,
    cfg: &FlowConfig,
    seed: u64,
) -> Result<Vec<LatentFeature>> {
    let b = cond.dims()[0];
    let noise = (0..b)
        .map(|i| prior_noise(n_frames, dim, derive_seed(seed, &[i as u64]), cond.dtype()))
        .collect::<Result<Vec<_>>>()?;
    let x = sample_from(model, cond, &Tensor::stack(&noise, 0)?, cfg)?;
    (0..b)
        .map(|i| {
            let v = x.get(i)?.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
            LatentFeature::new(v, n_frames, dim, frame_rate)
        })
        .collect()
}

/// Frame transformer dims. Full scale uses a large pretrained audio model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VectorFieldConfig {
    pub feature_dim: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub ff_dim: usize,
    pub layers: usize,
    pub max_frames: usize,
}

impl Default for VectorFieldConfig {
    fn default() -> Self {
        Self {
            feature_dim: 64,
            d_model: 128,
            n_heads: 4,
            ff_dim: 256,
            layers: 3,
            max_frames: 512,
        }
    }
}

/// Transformer over frames: input projection of `[x_t, context, mask]`, frame
/// positions and a time embedding added per frame, blocks with self-attention
/// and cross-attention to the conditioning sequence.
pub struct VectorFieldModel {
    input: Linear,
    time_mlp: (Linear, Linear),
    pos: Tensor,
    blocks: Vec<TransformerBlock>,
    norm: LayerNorm,
    output: Linear,
    cfg: VectorFieldConfig,
}

impl VectorFieldModel {
    pub fn new(store: &mut ParamStore, cfg: &VectorFieldConfig) -> Result<Self> {
        let dm = cfg.d_model;
        let blocks = (0..cfg.layers)
            .map(|i| TransformerBlock::new(store, &format!("flow.block{i}"), dm, cfg.n_heads, cfg.ff_dim, true))
            .collect::<Result<_>>()?;
        Ok(Self {
            input: store.linear("flow.input", 2 * cfg.feature_dim + 1, dm)?,
            time_mlp: (store.linear("flow.time1", dm, dm)?, store.linear("flow.time2", dm, dm)?),
            pos: Tensor::from_vec(sinusoidal_table(cfg.max_frames, dm), (cfg.max_frames, dm), &Device::Cpu)?
                .to_dtype(store.dtype())?,
            blocks,
            norm: store.layer_norm("flow.norm", dm)?,
            output: store.linear("flow.output", dm, cfg.feature_dim)?,
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &VectorFieldConfig {
        &self.cfg
    }
}

impl VelocityField for VectorFieldModel {
    fn velocity(
        &self,
        xt: &Tensor,
        context: &Tensor,
        mask: &Tensor,
        t: &Tensor,
        cond: &Tensor,
    ) -> Result<Tensor> {
        check_same_shape(xt, context)?;
        let (b, n, d) = xt.dims3()?;
        if d != self.cfg.feature_dim {
            return Err(Error::DimensionMismatch(format!(
                "feature dim {d}, model expects {}",
                self.cfg.feature_dim
            )));
        }
        if n > self.cfg.max_frames {
            return Err(Error::Invalid(format!("{n} frames exceed the positional table")));
        }
        if mask.dims() != [b, n] {
            return Err(Error::DimensionMismatch(format!("mask {:?}", mask.dims())));
        }
        let times = t.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        let temb = time_features(&times, self.cfg.d_model, xt.dtype())?;
        let temb = self.time_mlp.1.forward(&self.time_mlp.0.forward(&temb)?.silu()?)?;
        let input = Tensor::cat(&[xt, context, &mask.unsqueeze(2)?], 2)?;
        let mut h = self
            .input
            .forward(&input)?
            .broadcast_add(&self.pos.narrow(0, 0, n)?)?
            .broadcast_add(&temb.unsqueeze(1)?)?;
        for block in &self.blocks {
            h = block.forward(&h, Some(cond))?;
        }
        self.output.forward(&self.norm.forward(&h)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Zero;
    impl VelocityField for Zero {
        fn velocity(&self, xt: &Tensor, _: &Tensor, _: &Tensor, _: &Tensor, _: &Tensor) -> Result<Tensor> {
            Ok(xt.zeros_like()?)
        }
    }

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        let n: usize = shape.iter().product();
        prior_noise(n, 1, seed, DType::F64).unwrap().reshape(shape).unwrap()
    }

    #[test]
    fn path_endpoints() {
        let x0 = randn(&[3, 4], 1);
        let x1 = randn(&[3, 4], 2);
        let (xt, _) = ot_path(&x0, &x1, 0.0, 1e-5).unwrap();
        assert_eq!(xt.to_vec2::<f64>().unwrap(), x0.to_vec2::<f64>().unwrap());
        assert!(ot_path(&x0, &x1, 1.5, 1e-5).is_err());
        assert!(ot_path(&x0, &randn(&[4, 3], 3), 0.5, 1e-5).is_err());
    }

    #[test]
    fn mask_policy_edges() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let full = MaskPolicy { p_full: 1.0, ..Default::default() };
        assert!(draw_mask(7, &full, &mut rng).unwrap().iter().all(|&m| m));
        let span_one = MaskPolicy { p_full: 0.0, span_lo: 1.0, span_hi: 1.0 };
        assert!(draw_mask(7, &span_one, &mut rng).unwrap().iter().all(|&m| m));
        let bad = MaskPolicy { p_full: 0.0, span_lo: 0.9, span_hi: 0.5 };
        assert!(draw_mask(7, &bad, &mut rng).is_err());
        assert!(draw_mask(0, &MaskPolicy::default(), &mut rng).is_err());
    }

    #[test]
    fn partial_masks_are_one_contiguous_span() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let policy = MaskPolicy { p_full: 0.0, span_lo: 0.7, span_hi: 0.9 };
        for _ in 0..200 {
            let m = draw_mask(20, &policy, &mut rng).unwrap();
            let n = m.iter().filter(|&&x| x).count();
            assert!((14..=18).contains(&n), "{n}");
            let first = m.iter().position(|&x| x).unwrap();
            assert!(m[first..first + n].iter().all(|&x| x));
        }
    }

    #[test]
    fn masked_rows_are_zero() {
        let x1 = randn(&[6, 3], 4);
        let mask = vec![false, true, true, false, false, true];
        let ctx = MaskedContext::from_mask(&x1, mask.clone()).unwrap();
        let rows = ctx.masked_x1.to_vec2::<f64>().unwrap();
        let orig = x1.to_vec2::<f64>().unwrap();
        for (i, m) in mask.iter().enumerate() {
            if *m {
                assert!(rows[i].iter().all(|&v| v == 0.0));
            } else {
                assert_eq!(rows[i], orig[i]);
            }
        }
    }

    #[test]
    fn zero_model_loss_is_mean_square_velocity() {
        let x1 = randn(&[4, 5, 3], 5);
        let batch = sample_training_batch(&x1, &FlowConfig::default(), 77).unwrap();
        let cond = randn(&[4, 2, 8], 6);
        let loss = fm_loss(&Zero, &batch, &cond).unwrap().to_scalar::<f64>().unwrap();
        let vt = batch.sample.vt.to_vec3::<f64>().unwrap();
        let mask = batch.mask.to_vec2::<f64>().unwrap();
        let (mut sum, mut count) = (0.0, 0.0);
        for b in 0..4 {
            for t in 0..5 {
                if mask[b][t] == 1.0 {
                    sum += vt[b][t].iter().map(|v| v * v).sum::<f64>();
                    count += 3.0;
                }
            }
        }
        assert!((loss - sum / count).abs() < 1e-12);
    }

    #[test]
    fn non_finite_loss_is_divergence() {
        let u = Tensor::new(&[[[f64::NAN]]], &Device::Cpu).unwrap();
        let v = Tensor::new(&[[[0.0f64]]], &Device::Cpu).unwrap();
        let m = Tensor::new(&[[1.0f64]], &Device::Cpu).unwrap();
        assert!(matches!(masked_mse(&u, &v, &m), Err(Error::TrainingDivergence(_))));
    }

    #[test]
    fn batch_is_seed_deterministic_and_per_item() {
        let x1 = randn(&[3, 4, 2], 8);
        let a = sample_training_batch(&x1, &FlowConfig::default(), 5).unwrap();
        let b = sample_training_batch(&x1, &FlowConfig::default(), 5).unwrap();
        assert_eq!(a.sample.xt.to_vec3::<f64>().unwrap(), b.sample.xt.to_vec3::<f64>().unwrap());
        let first = sample_training_batch(&x1.narrow(0, 0, 1).unwrap(), &FlowConfig::default(), 5).unwrap();
        assert_eq!(
            first.sample.x0.get(0).unwrap().to_vec2::<f64>().unwrap(),
            a.sample.x0.get(0).unwrap().to_vec2::<f64>().unwrap()
        );
    }

    #[test]
    fn sampler_divergence_detected() {
        struct Blowup;
        impl VelocityField for Blowup {
            fn velocity(&self, xt: &Tensor, _: &Tensor, _: &Tensor, _: &Tensor, _: &Tensor) -> Result<Tensor> {
                Ok((xt.ones_like()? * f64::INFINITY)?)
            }
        }
        let x0 = randn(&[1, 2, 2], 1);
        let cond = randn(&[1, 1, 2], 2);
        let err = sample_from(&Blowup, &cond, &x0, &FlowConfig::default()).unwrap_err();
        assert!(matches!(err, Error::SamplerDivergence { .. }));
    }

    #[test]
    fn vector_field_shapes() {
        let cfg = VectorFieldConfig { feature_dim: 3, d_model: 8, n_heads: 2, ff_dim: 16, layers: 2, max_frames: 16 };
        let mut store = ParamStore::new(1, DType::F64);
        let model = VectorFieldModel::new(&mut store, &cfg).unwrap();
        let xt = randn(&[2, 5, 3], 1);
        let mask = Tensor::ones((2, 5), DType::F64, &Device::Cpu).unwrap();
        let t = Tensor::new(&[0.2f64, 0.9], &Device::Cpu).unwrap();
        let cond = randn(&[2, 4, 8], 2);
        let u = model.velocity(&xt, &xt.zeros_like().unwrap(), &mask, &t, &cond).unwrap();
        assert_eq!(u.dims(), &[2, 5, 3]);
        assert!(model.velocity(&randn(&[2, 5, 4], 1), &randn(&[2, 5, 4], 1), &mask, &t, &cond).is_err());
    }
}
