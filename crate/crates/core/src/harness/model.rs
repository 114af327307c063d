//! The trainable model bundle and its checkpoint container.
//!
//! Checkpoint layout, little-endian:
//! `"RTCK" | version u32 | header_len u64 | header JSON | f32 payload`.
//! The header lists every tensor (`name`, `role`, `shape`, element `offset`) and
//! carries the config snapshot, step and seed. Training randomness is keyed by
//! `(seed, step)`, so those two values are the whole RNG state.

use std::io::{Read, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::conditioning::{ConditioningInputs, ConditioningModel, ConditioningSequence, Vocabulary};
use crate::error::{Error, Result};
use crate::flow_matching::VectorFieldModel;
use crate::harness::config::ExperimentConfig;
use crate::nn::ParamStore;
use crate::optim::{Adam, AdamConfig};
use crate::seeding::derive_seed;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RTCK";
pub const CHECKPOINT_VERSION: u32 = 1;

const INIT_STREAM: u64 = 0x1417;

/// Conditioning encoders and vector field sharing one parameter store.
pub struct RagModel {
    pub store: ParamStore,
    pub conditioning: ConditioningModel,
    pub field: VectorFieldModel,
    pub vocab: Vocabulary,
}

impl RagModel {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        Self::with_dtype(cfg, DType::F32)
    }

    pub fn with_dtype(cfg: &ExperimentConfig, dtype: DType) -> Result<Self> {
        let vocab = Vocabulary::template();
        let mut store = ParamStore::new(derive_seed(cfg.seed, &[INIT_STREAM]), dtype);
        let conditioning = ConditioningModel::new(
            &mut store,
            &cfg.conditioning_config(),
            vocab.len(),
            cfg.retrieval.conditioning(),
        )?;
        let field = VectorFieldModel::new(&mut store, &cfg.vector_field_config())?;
        Ok(Self {
            store,
            conditioning,
            field,
            vocab,
        })
    }

    pub fn condition(&self, inputs: &ConditioningInputs) -> Result<ConditioningSequence> {
        self.conditioning.forward(inputs)
    }

    pub fn named_vars(&self) -> Vec<(String, Var)> {
        self.store
            .vars()
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn optimizer(&self, cfg: AdamConfig) -> Result<Adam> {
        Adam::new(self.named_vars(), cfg)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    role: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    crate_version: String,
    config: ExperimentConfig,
    step: usize,
    seed: u64,
    tensors: Vec<TensorRecord>,
}

/// A loaded checkpoint: model with restored parameters plus optimizer state.
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub step: usize,
    pub model: RagModel,
    pub optimizer: Adam,
}

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

pub fn save_checkpoint(path: &Path, cfg: &ExperimentConfig, step: usize, opt: &Adam) -> Result<()> {
    let (m, v) = opt.moments();
    let mut tensors = Vec::new();
    let mut payload: Vec<f32> = Vec::new();
    let groups: [(&str, Vec<&Tensor>); 3] = [
        ("param", opt.vars().iter().map(|(_, var)| var.as_tensor()).collect()),
        ("adam_m", m.iter().collect()),
        ("adam_v", v.iter().collect()),
    ];
    for (role, list) in groups {
        for ((name, _), t) in opt.vars().iter().zip(list) {
            tensors.push(TensorRecord {
                name: name.clone(),
                role: role.to_string(),
                shape: t.dims().to_vec(),
                offset: payload.len(),
            });
            payload.extend(t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?);
        }
    }
    let header = serde_json::to_vec(&CheckpointHeader {
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
        config: cfg.clone(),
        step,
        seed: cfg.seed,
        tensors,
    })?;
    let tmp = path.with_extension("tmp");
    {
        let mut w = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        for x in &payload {
            w.write_all(&x.to_le_bytes())?;
        }
        w.flush()?;
    }
    std::fs::rename(tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(format_err(path, "not a checkpoint"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(format_err(path, format!("unsupported version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes
        .get(16..16 + header_len)
        .ok_or_else(|| format_err(path, "truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(body)?;
    let data = &bytes[16 + header_len..];
    if data.len() % 4 != 0 {
        return Err(format_err(path, "payload is not f32-aligned"));
    }
    let floats: Vec<f32> = data
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();

    let model = RagModel::new(&header.config)?;
    let mut optimizer = model.optimizer(header.config.training.adam.clone())?;
    let n = optimizer.vars().len();
    if header.tensors.len() != 3 * n {
        return Err(format_err(path, "tensor count does not match the model"));
    }
    let mut moments: [Vec<Tensor>; 2] = [Vec::new(), Vec::new()];
    for (i, rec) in header.tensors.iter().enumerate() {
        let (name, var) = &optimizer.vars()[i % n];
        if &rec.name != name || rec.shape != var.dims() {
            return Err(format_err(path, format!("unexpected tensor {}", rec.name)));
        }
        let len: usize = rec.shape.iter().product();
        let values = floats
            .get(rec.offset..rec.offset + len)
            .ok_or_else(|| format_err(path, "truncated payload"))?;
        let t = Tensor::from_slice(values, rec.shape.as_slice(), &Device::Cpu)?.to_dtype(var.dtype())?;
        match i / n {
            0 => var.set(&t)?,
            r => moments[r - 1].push(t),
        }
    }
    let [m, v] = moments;
    optimizer.restore(header.step, m, v)?;
    Ok(Checkpoint {
        config: header.config,
        step: header.step,
        model,
        optimizer,
    })
}
