//! Experiment configuration: one TOML document with nested sections. Every
//! field has a default, and the resolved config is written into each run dir.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec_features::FeatureConfig;
use crate::conditioning::{ConditioningConfig, RetrievalConditioning};
use crate::curation::CorpusConfig;
use crate::embedder::{DEFAULT_EMBED_DIM, DEFAULT_PROJECTION_SEED};
use crate::error::{Error, Result};
use crate::flow_matching::{FlowConfig, VectorFieldConfig};
use crate::metrics::DEFAULT_TEMPERATURE;
use crate::optim::{AdamConfig, LrSchedule};

/// How training targets query the retrieval pool.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainRetrieval {
    A2a,
    T2a,
    None,
}

/// How inference captions query the retrieval pool.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InferRetrieval {
    T2a,
    /// Caption-to-caption similarity through text prototypes; pairs with the
    /// interleaved caption+audio conditioning.
    T2tProxy,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoolName {
    Train,
    Pool,
}

macro_rules! cli_enum {
    ($ty:ty, $($name:literal => $variant:expr),+) => {
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($variant),)+
                    _ => Err(Error::InvalidConfig(format!("unknown value {s:?}"))),
                }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                let name = match self {
                    $(v if *v == $variant => $name,)+
                    _ => unreachable!(),
                };
                f.write_str(name)
            }
        }
    };
}

cli_enum!(TrainRetrieval, "a2a" => TrainRetrieval::A2a, "t2a" => TrainRetrieval::T2a, "none" => TrainRetrieval::None);
cli_enum!(InferRetrieval, "t2a" => InferRetrieval::T2a, "t2t-proxy" => InferRetrieval::T2tProxy, "none" => InferRetrieval::None);
cli_enum!(PoolName, "train" => PoolName::Train, "pool" => PoolName::Pool);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalSettings {
    pub train_mode: TrainRetrieval,
    pub infer_mode: InferRetrieval,
    /// Pool searched during training.
    pub pool: PoolName,
    /// Pool searched at inference.
    pub infer_pool: PoolName,
    pub k: usize,
}

impl Default for RetrievalSettings {
    fn default() -> Self {
        Self {
            train_mode: TrainRetrieval::A2a,
            infer_mode: InferRetrieval::T2a,
            pool: PoolName::Pool,
            infer_pool: PoolName::Pool,
            k: 3,
        }
    }
}

impl RetrievalSettings {
    pub fn conditioning(&self) -> RetrievalConditioning {
        match (self.train_mode, self.infer_mode) {
            (TrainRetrieval::None, _) => RetrievalConditioning::None,
            (_, InferRetrieval::T2tProxy) => RetrievalConditioning::Interleaved,
            _ => RetrievalConditioning::Audio,
        }
    }

    pub fn uses_retrieval(&self) -> bool {
        self.train_mode != TrainRetrieval::None
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedderSettings {
    pub dim: usize,
    pub projection_seed: u64,
}

impl Default for EmbedderSettings {
    fn default() -> Self {
        Self {
            dim: DEFAULT_EMBED_DIM,
            projection_seed: DEFAULT_PROJECTION_SEED,
        }
    }
}

/// Transformer sizes shared by the conditioning encoders and the vector field.
/// Full-scale retrieval encoder: 3 layers, 16 heads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSettings {
    pub d_model: usize,
    pub n_heads: usize,
    pub ff_dim: usize,
    pub text_layers: usize,
    pub retrieval_layers: usize,
    pub flow_layers: usize,
    pub k_max: usize,
    pub max_frames: usize,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self {
            d_model: 128,
            n_heads: 4,
            ff_dim: 256,
            text_layers: 1,
            retrieval_layers: 2,
            flow_layers: 3,
            k_max: 10,
            max_frames: 512,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingSettings {
    /// Full scale: 150k steps.
    pub steps: usize,
    pub batch_size: usize,
    /// Full scale: peak 1e-4 after 5k warmup steps.
    pub peak_lr: f64,
    pub end_lr: f64,
    pub warmup_steps: usize,
    pub decay_power: f64,
    pub adam: AdamConfig,
    pub checkpoint_every: usize,
    pub log_every: usize,
}

impl Default for TrainingSettings {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch_size: 16,
            peak_lr: 1e-3,
            end_lr: 1e-5,
            warmup_steps: 250,
            decay_power: 1.0,
            adam: AdamConfig::default(),
            checkpoint_every: 1000,
            log_every: 100,
        }
    }
}

impl TrainingSettings {
    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            peak_lr: self.peak_lr,
            end_lr: self.end_lr,
            warmup_steps: self.warmup_steps,
            total_steps: self.steps,
            power: self.decay_power,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSettings {
    pub temperature: f64,
    /// Manifest split generated and evaluated.
    pub split: String,
    /// Output length in frames; 0 = mean length of the manifest.
    pub frames: usize,
    pub generation_batch: usize,
    pub write_wavs: bool,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            temperature: DEFAULT_TEMPERATURE,
            split: "zero_shot".into(),
            frames: 0,
            generation_batch: 16,
            write_wavs: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub features: FeatureConfig,
    pub embedder: EmbedderSettings,
    pub model: ModelSettings,
    pub flow: FlowConfig,
    pub retrieval: RetrievalSettings,
    pub training: TrainingSettings,
    pub eval: EvalSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            corpus: CorpusConfig::default(),
            features: FeatureConfig::default(),
            embedder: EmbedderSettings::default(),
            model: ModelSettings::default(),
            flow: FlowConfig::default(),
            retrieval: RetrievalSettings::default(),
            training: TrainingSettings::default(),
            eval: EvalSettings::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.features.validate()?;
        self.flow.validate()?;
        if self.corpus.sample_rate != self.features.sample_rate {
            return Err(Error::InvalidConfig(format!(
                "corpus at {} Hz, features expect {} Hz",
                self.corpus.sample_rate, self.features.sample_rate
            )));
        }
        let r = &self.retrieval;
        if r.k == 0 || r.k > self.model.k_max {
            return Err(Error::InvalidConfig(format!(
                "k = {} must be in 1..={}",
                r.k, self.model.k_max
            )));
        }
        match (r.train_mode, r.infer_mode) {
            (TrainRetrieval::None, InferRetrieval::None) => {}
            (TrainRetrieval::None, _) | (_, InferRetrieval::None) => {
                return Err(Error::InvalidConfig(
                    "retrieval must be enabled for both training and inference, or neither".into(),
                ))
            }
            _ => {}
        }
        if self.training.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if self.eval.temperature <= 0.0 {
            return Err(Error::InvalidConfig("temperature must be positive".into()));
        }
        Ok(())
    }

    pub fn conditioning_config(&self) -> ConditioningConfig {
        let m = &self.model;
        ConditioningConfig {
            feature_dim: self.features.n_bands,
            d_model: m.d_model,
            n_heads: m.n_heads,
            ff_dim: m.ff_dim,
            text_layers: m.text_layers,
            retrieval_layers: m.retrieval_layers,
            k_max: m.k_max,
            max_frames: m.max_frames,
        }
    }

    pub fn vector_field_config(&self) -> VectorFieldConfig {
        let m = &self.model;
        VectorFieldConfig {
            feature_dim: self.features.n_bands,
            d_model: m.d_model,
            n_heads: m.n_heads,
            ff_dim: m.ff_dim,
            layers: m.flow_layers,
            max_frames: m.max_frames,
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// Hash of the sections that determine the prepared data directory.
    pub fn data_hash(&self) -> String {
        let json = serde_json::to_string(&(&self.seed, &self.corpus, &self.features, &self.embedder))
            .expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}
