//! Generation from a checkpoint with inference-time retrieval.
//!
//! Outputs: `generated.feat` (binary features), `retrieval_log.jsonl` (one line
//! per generated item), `skipped.jsonl` and optional `wavs/`.

use std::collections::HashMap;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use candle_core::Tensor;
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::codec_features::{write_wav, LatentFeature};
use crate::conditioning::{ConditioningInputs, RetrievalConditioning};
use crate::curation::ClipManifestEntry;
use crate::embedder::embed_text;
use crate::error::{Error, Result};
use crate::flow_matching::{prior_noise, sample_from, FlowConfig};
use crate::harness::config::{ExperimentConfig, InferRetrieval, PoolName};
use crate::harness::data::DataDir;
use crate::harness::model::Checkpoint;
use crate::harness::train::{padded_ids, ConditioningData, RetrievalSet, RunInfo};
use crate::retrieval_index::Retrieval;
use crate::seeding::derive_seed;

pub const FEATURES_MAGIC: &[u8; 4] = b"GENF";
pub const FEATURES_VERSION: u32 = 1;
const NOISE_STREAM: u64 = 0x9e7e;
const WAV_STREAM: u64 = 0x3a7e;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationSettings {
    pub infer_mode: InferRetrieval,
    pub infer_pool: PoolName,
    pub k: usize,
    pub flow: FlowConfig,
    pub split: String,
    /// 0 = mean frame count of the manifest.
    pub frames: usize,
    pub seed: u64,
    pub batch: usize,
    pub write_wavs: bool,
}

impl GenerationSettings {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        Self {
            infer_mode: cfg.retrieval.infer_mode,
            infer_pool: cfg.retrieval.infer_pool,
            k: cfg.retrieval.k,
            flow: cfg.flow.clone(),
            split: cfg.eval.split.clone(),
            frames: cfg.eval.frames,
            seed: cfg.seed,
            batch: cfg.eval.generation_batch.max(1),
            write_wavs: cfg.eval.write_wavs,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RetrievalLogEntry {
    pub id: String,
    pub caption: String,
    pub mode: String,
    pub pool: String,
    #[serde(flatten)]
    pub retrieval: Retrieval,
    /// Ids fed to the model after padding to `k`.
    pub conditioned_on: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SkippedItem {
    pub id: String,
    pub reason: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GenerateSummary {
    pub generated: usize,
    pub skipped: Vec<SkippedItem>,
    pub out_dir: PathBuf,
}

/// Writes `(id, feature)` pairs:
/// `"GENF" | version u32 | count u64 | (id_len u16 | id | frames u32 | dim u32 | rate f32 | f32*)*`.
pub fn write_features(path: &Path, items: &[(String, LatentFeature)]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(FEATURES_MAGIC)?;
    w.write_all(&FEATURES_VERSION.to_le_bytes())?;
    w.write_all(&(items.len() as u64).to_le_bytes())?;
    for (id, f) in items {
        let id = id.as_bytes();
        w.write_all(&(id.len() as u16).to_le_bytes())?;
        w.write_all(id)?;
        w.write_all(&(f.n_frames() as u32).to_le_bytes())?;
        w.write_all(&(f.dim() as u32).to_le_bytes())?;
        w.write_all(&f.frame_rate().to_le_bytes())?;
        for v in f.as_slice() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<Vec<(String, LatentFeature)>> {
    let bad = |reason: &str| Error::Format {
        path: path.display().to_string(),
        reason: reason.to_string(),
    };
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated"))?;
        pos += n;
        Ok(s)
    };
    if take(4)? != FEATURES_MAGIC {
        return Err(bad("bad magic"));
    }
    if u32::from_le_bytes(take(4)?.try_into().unwrap()) != FEATURES_VERSION {
        return Err(bad("unsupported version"));
    }
    let count = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
        let id = String::from_utf8(take(len)?.to_vec()).map_err(|_| bad("id is not utf-8"))?;
        let frames = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let rate = f32::from_le_bytes(take(4)?.try_into().unwrap());
        let values = take(frames * dim * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((id, LatentFeature::new(values, frames, dim, rate)?));
    }
    if pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(out)
}

/// Inference retrieval for one caption; `exclude` keeps a reference clip that
/// also sits in the pool out of its own conditioning.
fn infer_retrieval(
    mode: InferRetrieval,
    caption: &str,
    exclude: &str,
    audio: Option<&crate::retrieval_index::Index>,
    captions: Option<&crate::retrieval_index::Index>,
    table: &crate::embedder::PrototypeTable,
    k: usize,
) -> Result<Retrieval> {
    let query = embed_text(caption, table)?;
    let index = match mode {
        InferRetrieval::T2a => audio,
        InferRetrieval::T2tProxy => captions,
        InferRetrieval::None => None,
    }
    .ok_or_else(|| Error::Invalid("no index for inference retrieval".into()))?;
    index.retrieve(&query, k, Some(exclude))
}

/// Generates one feature per caption in `settings.split`.
pub fn generate(
    ck: &Checkpoint,
    settings: &GenerationSettings,
    data: &DataDir,
    out: &Path,
) -> Result<GenerateSummary> {
    let cfg = &ck.config;
    let model = &ck.model;
    let mode = model.conditioning.mode();
    let wants_retrieval = mode != RetrievalConditioning::None;
    if wants_retrieval == (settings.infer_mode == InferRetrieval::None) {
        return Err(Error::InvalidConfig(format!(
            "inference retrieval {} does not fit a model trained with {}",
            settings.infer_mode, cfg.retrieval.train_mode
        )));
    }
    if settings.k == 0 || settings.k > cfg.model.k_max {
        return Err(Error::InvalidConfig(format!("k = {} outside 1..={}", settings.k, cfg.model.k_max)));
    }
    settings.flow.validate()?;
    std::fs::create_dir_all(out)?;

    let entries = data.manifest(&settings.split)?;
    let extractor = data.extractor(cfg)?;
    let table = data.prototypes()?;
    let frames = if settings.frames > 0 {
        settings.frames
    } else {
        let refs = data.features(&extractor, &entries)?;
        let total: usize = refs.values().map(|f| f.n_frames()).sum();
        (total as f64 / refs.len().max(1) as f64).round() as usize
    }
    .min(cfg.model.max_frames);
    if frames == 0 {
        return Err(Error::Invalid(format!("split {} has no clips", settings.split)));
    }

    let mut skipped = Vec::new();
    let mut kept: Vec<&ClipManifestEntry> = Vec::new();
    let mut logs = Vec::new();
    let mut ids = Vec::new();
    let (mut pool_features, mut pool_captions) = (HashMap::new(), HashMap::new());
    if wants_retrieval {
        let pool_entries = data.pool_manifest(settings.infer_pool)?;
        let audio = data.audio_index(settings.infer_pool).ok();
        let caption_index = data.caption_index(settings.infer_pool).ok();
        for e in &entries {
            match infer_retrieval(
                settings.infer_mode,
                &e.caption,
                &e.id,
                audio.as_ref(),
                caption_index.as_ref(),
                &table,
                settings.k,
            ) {
                Ok(r) => {
                    let padded = padded_ids(&r, settings.k)?;
                    logs.push(RetrievalLogEntry {
                        id: e.id.clone(),
                        caption: e.caption.clone(),
                        mode: settings.infer_mode.to_string(),
                        pool: settings.infer_pool.to_string(),
                        retrieval: r,
                        conditioned_on: padded.clone(),
                    });
                    ids.push(padded);
                    kept.push(e);
                }
                Err(err @ Error::UnembeddableCaption(_)) => {
                    warn!("skipping {}: {err}", e.id);
                    skipped.push(SkippedItem {
                        id: e.id.clone(),
                        reason: err.to_string(),
                    });
                }
                Err(err) => return Err(err),
            }
        }
        let needed: std::collections::HashSet<&String> = ids.iter().flatten().collect();
        let needed_entries: Vec<ClipManifestEntry> =
            pool_entries.iter().filter(|e| needed.contains(&e.id)).cloned().collect();
        pool_features = data.features(&extractor, &needed_entries)?;
        pool_captions = pool_entries.iter().map(|e| (e.id.clone(), e.caption.clone())).collect();
    } else {
        kept = entries.iter().collect();
    }

    let captions: Vec<&str> = kept.iter().map(|e| e.caption.as_str()).collect();
    let dtype = model.store.dtype();
    let set = RetrievalSet {
        retrievals: logs.iter().map(|l| l.retrieval.clone()).collect(),
        ids,
    };
    let cond_data = ConditioningData::build(
        mode,
        &model.vocab,
        &captions,
        wants_retrieval.then_some(&set),
        &pool_features,
        &pool_captions,
        frames,
        dtype,
    )?;

    let dim = cfg.features.n_bands;
    let rate = cfg.features.frame_rate();
    let mut generated: Vec<(String, LatentFeature)> = Vec::with_capacity(kept.len());
    for start in (0..kept.len()).step_by(settings.batch) {
        let end = (start + settings.batch).min(kept.len());
        let idx = Tensor::arange(start as u32, end as u32, &candle_core::Device::Cpu)?;
        let inputs: ConditioningInputs = cond_data.select(&idx)?;
        let cond = model.condition(&inputs)?;
        let noise = (start..end)
            .map(|i| prior_noise(frames, dim, derive_seed(settings.seed, &[NOISE_STREAM, i as u64]), dtype))
            .collect::<Result<Vec<_>>>()?;
        let x = sample_from(&model.field, &cond.tensor, &Tensor::stack(&noise, 0)?, &settings.flow)?;
        for (j, i) in (start..end).enumerate() {
            let v = x.get(j)?.flatten_all()?.to_dtype(candle_core::DType::F32)?.to_vec1::<f32>()?;
            generated.push((kept[i].id.clone(), LatentFeature::new(v, frames, dim, rate)?));
        }
    }

    write_features(&out.join("generated.feat"), &generated)?;
    let mut log = BufWriter::new(std::fs::File::create(out.join("retrieval_log.jsonl"))?);
    for l in &logs {
        writeln!(log, "{}", serde_json::to_string(l)?)?;
    }
    log.flush()?;
    let mut skip_log = BufWriter::new(std::fs::File::create(out.join("skipped.jsonl"))?);
    for s in &skipped {
        writeln!(skip_log, "{}", serde_json::to_string(s)?)?;
    }
    skip_log.flush()?;
    if settings.write_wavs {
        std::fs::create_dir_all(out.join("wavs"))?;
        for (i, (id, f)) in generated.iter().enumerate() {
            let wave = extractor.invert(f, derive_seed(settings.seed, &[WAV_STREAM, i as u64]))?;
            write_wav(&out.join("wavs").join(format!("{id}.wav")), &wave)?;
        }
    }

    let mut run_cfg = cfg.clone();
    run_cfg.retrieval.infer_mode = settings.infer_mode;
    run_cfg.retrieval.infer_pool = settings.infer_pool;
    run_cfg.retrieval.k = settings.k;
    run_cfg.flow = settings.flow.clone();
    run_cfg.eval.split = settings.split.clone();
    run_cfg.save(&out.join("config.toml"))?;
    let mut info_row = RunInfo::new("generate", &run_cfg);
    info_row.split = Some(settings.split.clone());
    info_row.save(out)?;
    info!(
        "generated {} items into {} ({} skipped)",
        generated.len(),
        out.display(),
        skipped.len()
    );
    Ok(GenerateSummary {
        generated: generated.len(),
        skipped,
        out_dir: out.to_path_buf(),
    })
}
