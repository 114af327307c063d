//! Training loop: per-step batch draw, retrieval-conditioned FM loss, Adam.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec_features::LatentFeature;
use crate::conditioning::{ConditioningInputs, RetrievalConditioning, Vocabulary};
use crate::curation::ClipManifestEntry;
use crate::embedder::{embed_text, AudioEmbedder, PrototypeTable};
use crate::error::{Error, Result};
use crate::flow_matching::{fm_loss, sample_training_batch};
use crate::harness::config::{ExperimentConfig, TrainRetrieval};
use crate::harness::data::{embedder, DataDir};
use crate::harness::model::{load_checkpoint, save_checkpoint, RagModel};
use crate::retrieval_index::{retrieve_for_training, Index, Retrieval};
use crate::seeding::derive_seed;

const BATCH_STREAM: u64 = 0xb47c;
const FLOW_STREAM: u64 = 0xf10e;

/// `k` ids from a retrieval, repeating the last result when it came back short.
pub fn padded_ids(r: &Retrieval, k: usize) -> Result<Vec<String>> {
    let last = r
        .results
        .last()
        .ok_or_else(|| Error::Invalid("retrieval returned nothing".into()))?;
    let mut ids: Vec<String> = r.results.iter().take(k).map(|x| x.clip_id.clone()).collect();
    while ids.len() < k {
        ids.push(last.clip_id.clone());
    }
    Ok(ids)
}

/// `[N, T, D]` from features, each cropped to `frames` rows.
pub fn stack_features(list: &[&LatentFeature], frames: usize) -> Result<Tensor> {
    let d = list.first().map(|f| f.dim()).unwrap_or(0);
    let mut data = Vec::with_capacity(list.len() * frames * d);
    for f in list {
        if f.n_frames() < frames || f.dim() != d {
            return Err(Error::DimensionMismatch(format!(
                "clip of {}x{} where {frames}x{d} is needed",
                f.n_frames(),
                f.dim()
            )));
        }
        data.extend_from_slice(&f.as_slice()[..frames * d]);
    }
    Ok(Tensor::from_vec(data, (list.len(), frames, d), &Device::Cpu)?)
}

/// `[N, L]` token ids, right-padded with `<unk>` to the longest caption.
pub fn stack_tokens(vocab: &Vocabulary, captions: &[&str]) -> Result<Tensor> {
    let toks = captions
        .iter()
        .map(|c| vocab.tokenize(c))
        .collect::<Result<Vec<_>>>()?;
    let len = toks.iter().map(|t| t.len()).max().unwrap_or(0);
    let mut data = Vec::with_capacity(toks.len() * len);
    for t in &toks {
        data.extend_from_slice(t.ids());
        data.extend(std::iter::repeat_n(0u32, len - t.len()));
    }
    Ok(Tensor::from_vec(data, (toks.len(), len), &Device::Cpu)?)
}

/// Retrieved clips for each item, as ids of length `k`.
pub struct RetrievalSet {
    pub retrievals: Vec<Retrieval>,
    pub ids: Vec<Vec<String>>,
}

/// Conditioning tensors for a set of items, aligned by position.
pub struct ConditioningData {
    pub tokens: Tensor,
    pub retrieved: Option<Tensor>,
    pub retrieved_tokens: Option<Tensor>,
}

impl ConditioningData {
    pub fn build(
        model_mode: RetrievalConditioning,
        vocab: &Vocabulary,
        captions: &[&str],
        retrieval: Option<&RetrievalSet>,
        pool_features: &HashMap<String, LatentFeature>,
        pool_captions: &HashMap<String, String>,
        frames: usize,
        dtype: DType,
    ) -> Result<Self> {
        let tokens = stack_tokens(vocab, captions)?;
        let (mut retrieved, mut retrieved_tokens) = (None, None);
        if model_mode != RetrievalConditioning::None {
            let set = retrieval.ok_or_else(|| Error::Invalid("retrieval results required".into()))?;
            let k = set.ids.first().map(Vec::len).unwrap_or(0);
            let flat: Vec<&String> = set.ids.iter().flatten().collect();
            let feats = flat
                .iter()
                .map(|id| {
                    pool_features
                        .get(*id)
                        .ok_or_else(|| Error::Invalid(format!("no features for retrieved clip {id}")))
                })
                .collect::<Result<Vec<_>>>()?;
            let stacked = stack_features(&feats, frames)?;
            let (_, t, d) = stacked.dims3()?;
            retrieved = Some(stacked.reshape((captions.len(), k, t, d))?.to_dtype(dtype)?);
            if model_mode == RetrievalConditioning::Interleaved {
                let caps = flat
                    .iter()
                    .map(|id| {
                        pool_captions
                            .get(*id)
                            .map(String::as_str)
                            .ok_or_else(|| Error::Invalid(format!("no caption for clip {id}")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let toks = stack_tokens(vocab, &caps)?;
                let l = toks.dims()[1];
                retrieved_tokens = Some(toks.reshape((captions.len(), k, l))?);
            }
        }
        Ok(Self {
            tokens,
            retrieved,
            retrieved_tokens,
        })
    }

    pub fn select(&self, idx: &Tensor) -> Result<ConditioningInputs> {
        Ok(ConditioningInputs {
            tokens: self.tokens.index_select(idx, 0)?,
            retrieved: self.retrieved.as_ref().map(|t| t.index_select(idx, 0)).transpose()?,
            retrieved_tokens: self
                .retrieved_tokens
                .as_ref()
                .map(|t| t.index_select(idx, 0))
                .transpose()?,
        })
    }
}

/// Training-time retrieval, target excluded: A2A queries with the target audio,
/// T2A with its caption.
pub fn training_retrieval(
    mode: TrainRetrieval,
    entries: &[ClipManifestEntry],
    features: &HashMap<String, LatentFeature>,
    index: &Index,
    table: &PrototypeTable,
    emb: &dyn AudioEmbedder,
    k: usize,
) -> Result<RetrievalSet> {
    let retrievals = entries
        .iter()
        .map(|e| match mode {
            TrainRetrieval::A2a => retrieve_for_training(index, emb, &e.id, &features[&e.id], k),
            TrainRetrieval::T2a => index.retrieve(&embed_text(&e.caption, table)?, k, Some(&e.id)),
            TrainRetrieval::None => Err(Error::Invalid("retrieval disabled".into())),
        })
        .collect::<Result<Vec<_>>>()?;
    let ids = retrievals
        .iter()
        .map(|r| padded_ids(r, k))
        .collect::<Result<Vec<_>>>()?;
    Ok(RetrievalSet { retrievals, ids })
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainOptions {
    /// Continue from this checkpoint instead of a fresh initialization.
    pub resume: Option<PathBuf>,
    pub force: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub start_step: usize,
    pub steps: usize,
    /// `(step, loss)` for every step run in this call.
    pub losses: Vec<(usize, f64)>,
    pub final_loss: f64,
    pub wall_secs: f64,
    pub checkpoint: PathBuf,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunInfo {
    pub kind: String,
    pub config_hash: String,
    pub data_hash: String,
    pub crate_version: String,
    pub model: String,
    pub train_retrieval: String,
    pub infer_retrieval: String,
    pub pool: String,
    pub k: usize,
    #[serde(default)]
    pub split: Option<String>,
}

impl RunInfo {
    pub fn new(kind: &str, cfg: &ExperimentConfig) -> Self {
        let r = &cfg.retrieval;
        Self {
            kind: kind.to_string(),
            config_hash: cfg.hash(),
            data_hash: cfg.data_hash(),
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            model: if r.uses_retrieval() { "tta-rag" } else { "baseline" }.to_string(),
            train_retrieval: r.train_mode.to_string(),
            infer_retrieval: r.infer_mode.to_string(),
            pool: r.infer_pool.to_string(),
            k: if r.uses_retrieval() { r.k } else { 0 },
            split: None,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::write(dir.join("run.json"), serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(dir.join("run.json"))?)?)
    }
}

pub fn checkpoint_path(out: &Path) -> PathBuf {
    out.join("checkpoint.ckpt")
}

/// Trains `cfg` on the prepared data in `data`, writing the run to `out`.
pub fn train(cfg: &ExperimentConfig, data: &DataDir, out: &Path, opts: &TrainOptions) -> Result<TrainSummary> {
    cfg.validate()?;
    let data_cfg = data.config()?;
    if data_cfg.data_hash() != cfg.data_hash() {
        return Err(Error::InvalidConfig(
            "corpus/feature settings differ from the prepared data directory".into(),
        ));
    }
    if checkpoint_path(out).exists() && !opts.force && opts.resume.is_none() {
        return Err(Error::Invalid(format!(
            "{} already holds a trained run (use --force or --resume)",
            out.display()
        )));
    }
    std::fs::create_dir_all(out.join("checkpoints"))?;
    cfg.save(&out.join("config.toml"))?;
    RunInfo::new("train", cfg).save(out)?;

    let (model, mut opt, start) = match &opts.resume {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            let mut resumed = ck.config.clone();
            resumed.training.steps = cfg.training.steps;
            if resumed.hash() != cfg.hash() {
                return Err(Error::InvalidConfig("checkpoint was trained with a different config".into()));
            }
            (ck.model, ck.optimizer, ck.step)
        }
        None => {
            let model = RagModel::new(cfg)?;
            let opt = model.optimizer(cfg.training.adam.clone())?;
            (model, opt, 0)
        }
    };

    let train_entries = data.manifest("train")?;
    if train_entries.is_empty() {
        return Err(Error::Invalid("training manifest is empty".into()));
    }
    let extractor = data.extractor(cfg)?;
    let features = data.features(&extractor, &train_entries)?;
    let mode = model.conditioning.mode();
    let r = &cfg.retrieval;
    let (pool_features, pool_captions, retrieval) = if mode != RetrievalConditioning::None {
        let pool_entries = data.pool_manifest(r.pool)?;
        let pool_features = data.features(&extractor, &pool_entries)?;
        let index = data.audio_index(r.pool)?;
        let table = data.prototypes()?;
        let emb = embedder(cfg)?;
        let set = training_retrieval(r.train_mode, &train_entries, &features, &index, &table, &emb, r.k)?;
        let captions = pool_entries.iter().map(|e| (e.id.clone(), e.caption.clone())).collect();
        (pool_features, captions, Some(set))
    } else {
        (HashMap::new(), HashMap::new(), None)
    };

    let frames = features
        .values()
        .chain(pool_features.values())
        .map(|f| f.n_frames())
        .min()
        .unwrap_or(0)
        .min(cfg.model.max_frames);
    let dtype = model.store.dtype();
    let ordered: Vec<&LatentFeature> = train_entries.iter().map(|e| &features[&e.id]).collect();
    let x1_all = stack_features(&ordered, frames)?.to_dtype(dtype)?;
    let captions: Vec<&str> = train_entries.iter().map(|e| e.caption.as_str()).collect();
    let cond_data = ConditioningData::build(
        mode,
        &model.vocab,
        &captions,
        retrieval.as_ref(),
        &pool_features,
        &pool_captions,
        frames,
        dtype,
    )?;

    let schedule = cfg.training.schedule();
    let n = train_entries.len();
    // Keep logged rows from before the resume point, drop anything after it.
    let log_path = out.join("loss.csv");
    let previous = std::fs::read_to_string(&log_path).unwrap_or_default();
    let mut log = std::io::BufWriter::new(std::fs::File::create(&log_path)?);
    writeln!(log, "step,loss")?;
    for line in previous.lines().skip(1) {
        match line.split(',').next().and_then(|s| s.parse::<usize>().ok()) {
            Some(s) if s < start => writeln!(log, "{line}")?,
            _ => {}
        }
    }
    let timer = Instant::now();
    let mut losses = Vec::new();
    for step in start..cfg.training.steps {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[BATCH_STREAM, step as u64]));
        let idx: Vec<u32> = (0..cfg.training.batch_size)
            .map(|_| rng.random_range(0..n as u32))
            .collect();
        let idx = Tensor::from_vec(idx, cfg.training.batch_size, &Device::Cpu)?;
        let cond = model.condition(&cond_data.select(&idx)?)?;
        let x1 = x1_all.index_select(&idx, 0)?;
        let batch = sample_training_batch(&x1, &cfg.flow, derive_seed(cfg.seed, &[FLOW_STREAM, step as u64]))?;
        let loss = fm_loss(&model.field, &batch, &cond.tensor)?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        let grads = loss.backward()?;
        opt.step(&grads, schedule.lr(step))
            .map_err(|e| Error::TrainingDivergence(format!("step {step}: {e}")))?;
        writeln!(log, "{step},{value}")?;
        losses.push((step, value));
        let done = step + 1;
        if cfg.training.log_every > 0 && done % cfg.training.log_every == 0 {
            info!("step {done}/{} loss {value:.4} lr {:.2e}", cfg.training.steps, schedule.lr(step));
        }
        if cfg.training.checkpoint_every > 0 && done % cfg.training.checkpoint_every == 0 {
            let path = out.join("checkpoints").join(format!("step-{done:06}.ckpt"));
            save_checkpoint(&path, cfg, done, &opt)?;
        }
    }
    log.flush()?;
    let ckpt = checkpoint_path(out);
    save_checkpoint(&ckpt, cfg, cfg.training.steps.max(start), &opt)?;
    let final_loss = losses.last().map(|l| l.1).unwrap_or(f64::NAN);
    Ok(TrainSummary {
        start_step: start,
        steps: cfg.training.steps,
        losses,
        final_loss,
        wall_secs: timer.elapsed().as_secs_f64(),
        checkpoint: ckpt,
    })
}
