//! Small transformer building blocks over candle tensors shaped `[batch, len, dim]`.
//!
//! Parameters live in a [`ParamStore`] keyed by name and are initialized from a
//! seeded ChaCha stream, so a model is a pure function of its config and seed.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    FanIn(usize),
}

/// Named trainable tensors.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::Invalid(format!("parameter {name} registered twice")));
        }
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => (0..n)
                .map(|_| std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut self.rng))
                .collect(),
            Init::FanIn(fan_in) => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| self.rng.random_range(-bound..bound)).collect()
            }
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    pub fn linear(&mut self, name: &str, in_dim: usize, out_dim: usize) -> Result<Linear> {
        Ok(Linear {
            weight: self.param(&format!("{name}.weight"), &[out_dim, in_dim], Init::FanIn(in_dim))?,
            bias: self.param(&format!("{name}.bias"), &[out_dim], Init::FanIn(in_dim))?,
        })
    }

    pub fn layer_norm(&mut self, name: &str, dim: usize) -> Result<LayerNorm> {
        Ok(LayerNorm {
            gamma: self.param(&format!("{name}.gamma"), &[dim], Init::Ones)?,
            beta: self.param(&format!("{name}.beta"), &[dim], Init::Zeros)?,
        })
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    pub fn var(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn num_parameters(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.broadcast_matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
}

impl LayerNorm {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    n_heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, n_heads: usize) -> Result<Self> {
        if n_heads == 0 || dim % n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "model dim {dim} not divisible by {n_heads} heads"
            )));
        }
        Ok(Self {
            q: store.linear(&format!("{name}.q"), dim, dim)?,
            k: store.linear(&format!("{name}.k"), dim, dim)?,
            v: store.linear(&format!("{name}.v"), dim, dim)?,
            o: store.linear(&format!("{name}.o"), dim, dim)?,
            n_heads,
        })
    }

    /// Queries from `x`, keys and values from `context`. No positional bias: any
    /// order information must already be in the inputs.
    pub fn forward(&self, x: &Tensor, context: &Tensor) -> Result<Tensor> {
        let (b, lq, dim) = x.dims3()?;
        let (bc, lk, dc) = context.dims3()?;
        if b != bc || dim != dc {
            return Err(Error::DimensionMismatch(format!(
                "attention query {:?} vs context {:?}",
                x.dims(),
                context.dims()
            )));
        }
        let h = self.n_heads;
        let dh = dim / h;
        let split = |t: Tensor, l: usize| -> Result<Tensor> {
            Ok(t.reshape((b, l, h, dh))?.transpose(1, 2)?.contiguous()?)
        };
        let q = split(self.q.forward(x)?, lq)?;
        let k = split(self.k.forward(context)?, lk)?;
        let v = split(self.v.forward(context)?, lk)?;
        let scores = (q.matmul(&k.t()?.contiguous()?)? / (dh as f64).sqrt())?;
        let weights = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let out = weights
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, lq, dim))?;
        self.o.forward(&out)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            up: store.linear(&format!("{name}.up"), dim, hidden)?,
            down: store.linear(&format!("{name}.down"), hidden, dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.down.forward(&self.up.forward(x)?.gelu()?)
    }
}

/// Pre-norm block: self-attention, optional cross-attention, feed-forward.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    self_norm: LayerNorm,
    self_attn: MultiHeadAttention,
    cross: Option<(LayerNorm, MultiHeadAttention)>,
    ff_norm: LayerNorm,
    ff: FeedForward,
}

impl TransformerBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        n_heads: usize,
        ff_dim: usize,
        with_cross: bool,
    ) -> Result<Self> {
        let cross = if with_cross {
            Some((
                store.layer_norm(&format!("{name}.cross_norm"), dim)?,
                MultiHeadAttention::new(store, &format!("{name}.cross_attn"), dim, n_heads)?,
            ))
        } else {
            None
        };
        Ok(Self {
            self_norm: store.layer_norm(&format!("{name}.self_norm"), dim)?,
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), dim, n_heads)?,
            cross,
            ff_norm: store.layer_norm(&format!("{name}.ff_norm"), dim)?,
            ff: FeedForward::new(store, &format!("{name}.ff"), dim, ff_dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor, context: Option<&Tensor>) -> Result<Tensor> {
        let h = self.self_norm.forward(x)?;
        let mut x = (x + self.self_attn.forward(&h, &h)?)?;
        if let Some((norm, attn)) = &self.cross {
            let ctx = context.ok_or_else(|| {
                Error::Invalid("cross-attention block called without context".into())
            })?;
            x = (&x + attn.forward(&norm.forward(&x)?, ctx)?)?;
        }
        let ff = self.ff.forward(&self.ff_norm.forward(&x)?)?;
        Ok((x + ff)?)
    }
}

/// Transformer sinusoidal table, `n` rows of `dim` values.
pub fn sinusoidal_table(n: usize, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; n * dim];
    for pos in 0..n {
        for i in 0..dim {
            let exponent = (2 * (i / 2)) as f64 / dim as f64;
            let angle = pos as f64 / 10000f64.powf(exponent);
            out[pos * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    out
}

/// Sinusoidal features of scalar times in `[0, 1]`, shape `[batch, dim]`.
pub fn time_features(t: &[f64], dim: usize, dtype: DType) -> Result<Tensor> {
    let half = dim / 2;
    let mut out = vec![0.0f64; t.len() * dim];
    for (b, &tv) in t.iter().enumerate() {
        for i in 0..half {
            let freq = 1000.0 / 10000f64.powf(i as f64 / half.max(1) as f64);
            out[b * dim + i] = (tv * freq).sin();
            out[b * dim + half + i] = (tv * freq).cos();
        }
    }
    Ok(Tensor::from_vec(out, (t.len(), dim), &Device::Cpu)?.to_dtype(dtype)?)
}
