//! Prepared data directory: corpus WAVs, split manifests, feature normalization,
//! prototype tables and embedding caches.
//!
//! ```text
//! <data>/config.toml          resolved config snapshot
//! <data>/data.json            hashes and split sizes
//! <data>/wavs/<id>.wav
//! <data>/manifests/<split>.jsonl
//! <data>/band_norm.json
//! <data>/prototypes_train.json  train leaves only
//! <data>/prototypes.json        train + pool leaves
//! <data>/index/<pool>.embc      audio embeddings
//! <data>/index/<pool>_captions.embc  caption embeddings
//! ```

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use crate::codec_features::{read_wav, write_wav, BandNorm, FeatureExtractor, LatentFeature};
use crate::curation::{
    count_leaf_tags, curate_splits, generate_toy_corpus, read_manifest, write_manifest,
    ClipManifestEntry, Split, FEW_SHOT_THRESHOLD,
};
use crate::embedder::{embed_text, fit_text_prototypes, AudioEmbedder, EmbeddingVector, ProjectionEmbedder, PrototypeTable};
use crate::error::{Error, Result};
use crate::harness::config::{ExperimentConfig, PoolName};
use crate::retrieval_index::{read_cache, write_cache, Index, IndexEntry};

pub const DATA_ENV: &str = "RAGTTA_DATA_DIR";

#[derive(Clone, Debug)]
pub struct DataDir {
    root: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSummary {
    pub data_hash: String,
    pub crate_version: String,
    pub split_sizes: BTreeMap<String, usize>,
    pub manifest_sha256: BTreeMap<String, String>,
}

impl DataDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn manifest_path(&self, split: &str) -> PathBuf {
        self.root.join("manifests").join(format!("{split}.jsonl"))
    }

    pub fn wav_path(&self, e: &ClipManifestEntry) -> PathBuf {
        self.root.join(&e.wav_path)
    }

    pub fn band_norm_path(&self) -> PathBuf {
        self.root.join("band_norm.json")
    }

    pub fn train_prototypes_path(&self) -> PathBuf {
        self.root.join("prototypes_train.json")
    }

    pub fn prototypes_path(&self) -> PathBuf {
        self.root.join("prototypes.json")
    }

    pub fn index_path(&self, pool: PoolName) -> PathBuf {
        self.root.join("index").join(format!("{pool}.embc"))
    }

    pub fn caption_index_path(&self, pool: PoolName) -> PathBuf {
        self.root.join("index").join(format!("{pool}_captions.embc"))
    }

    pub fn manifest(&self, split: &str) -> Result<Vec<ClipManifestEntry>> {
        let path = self.manifest_path(split);
        if !path.exists() {
            return Err(Error::Invalid(format!(
                "missing manifest {} (run prepare-data first)",
                path.display()
            )));
        }
        read_manifest(&path)
    }

    pub fn pool_manifest(&self, pool: PoolName) -> Result<Vec<ClipManifestEntry>> {
        self.manifest(match pool {
            PoolName::Train => "train",
            PoolName::Pool => "pool",
        })
    }

    pub fn config(&self) -> Result<ExperimentConfig> {
        ExperimentConfig::load(&self.config_path())
    }

    pub fn extractor(&self, cfg: &ExperimentConfig) -> Result<FeatureExtractor> {
        let norm: BandNorm = serde_json::from_slice(&std::fs::read(self.band_norm_path())?)?;
        FeatureExtractor::new(cfg.features.clone(), Some(norm))
    }

    pub fn prototypes(&self) -> Result<PrototypeTable> {
        PrototypeTable::load(&self.prototypes_path())
    }

    /// Normalized features for `entries`, keyed by clip id.
    pub fn features(
        &self,
        extractor: &FeatureExtractor,
        entries: &[ClipManifestEntry],
    ) -> Result<HashMap<String, LatentFeature>> {
        entries
            .iter()
            .map(|e| Ok((e.id.clone(), extractor.extract(&read_wav(&self.wav_path(e))?)?)))
            .collect()
    }

    /// Audio index over a pool, read from its cache.
    pub fn audio_index(&self, pool: PoolName) -> Result<Index> {
        load_index(&self.index_path(pool), pool)
    }

    pub fn caption_index(&self, pool: PoolName) -> Result<Index> {
        load_index(&self.caption_index_path(pool), pool)
    }
}

fn load_index(path: &Path, pool: PoolName) -> Result<Index> {
    if !path.exists() {
        return Err(Error::Invalid(format!(
            "missing index cache {} (run build-index first)",
            path.display()
        )));
    }
    Index::build(
        read_cache(path)?
            .into_iter()
            .map(|(clip_id, embedding)| IndexEntry {
                clip_id,
                embedding,
                source_pool: pool.to_string(),
            })
            .collect(),
    )
}

pub fn embedder(cfg: &ExperimentConfig) -> Result<ProjectionEmbedder> {
    ProjectionEmbedder::new(cfg.features.n_bands, cfg.embedder.dim, cfg.embedder.projection_seed)
}

fn sha256_file(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

/// Generates the corpus, curates splits and writes everything but the indexes.
pub fn prepare_data(cfg: &ExperimentConfig, dir: &DataDir, force: bool) -> Result<DataSummary> {
    cfg.validate()?;
    if dir.manifest_path("train").exists() && !force {
        return Err(Error::Invalid(format!(
            "{} already holds prepared data (use --force to overwrite)",
            dir.root().display()
        )));
    }
    std::fs::create_dir_all(dir.root().join("wavs"))?;
    std::fs::create_dir_all(dir.root().join("manifests"))?;

    let corpus = generate_toy_corpus(&cfg.corpus, cfg.seed)?;
    for (e, w) in corpus.entries.iter().zip(&corpus.waveforms) {
        write_wav(&dir.wav_path(e), w)?;
    }
    let train = corpus.entries_in(Split::Train);
    let pool = corpus.entries_in(Split::Pool);
    let curated = curate_splits(&corpus.entries_in(Split::Test), &train, FEW_SHOT_THRESHOLD)?;

    let train_leaves = count_leaf_tags(&train);
    if let Some(e) = curated.zero_shot.iter().find(|e| train_leaves.contains_key(e.leaf())) {
        return Err(Error::Leakage(format!("zero-shot leaf {} is in training", e.leaf())));
    }
    let train_ids: HashSet<&str> = train.iter().map(|e| e.id.as_str()).collect();
    let held_out = curated.zero_shot.iter().chain(&curated.few_shot).chain(&curated.in_domain);
    if let Some(e) = held_out.clone().find(|e| train_ids.contains(e.id.as_str())) {
        return Err(Error::Leakage(e.id.clone()));
    }

    let splits: [(&str, &[ClipManifestEntry]); 5] = [
        ("train", &train),
        ("pool", &pool),
        ("zero_shot", &curated.zero_shot),
        ("few_shot", &curated.few_shot),
        ("test", &curated.in_domain),
    ];
    let mut summary = DataSummary {
        data_hash: cfg.data_hash(),
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
        split_sizes: BTreeMap::new(),
        manifest_sha256: BTreeMap::new(),
    };
    for (name, entries) in splits {
        let path = dir.manifest_path(name);
        write_manifest(&path, entries)?;
        summary.split_sizes.insert(name.to_string(), entries.len());
        summary.manifest_sha256.insert(name.to_string(), sha256_file(&path)?);
    }

    let raw = FeatureExtractor::new(cfg.features.clone(), None)?;
    let train_raw = train
        .iter()
        .map(|e| raw.extract_raw(&read_wav(&dir.wav_path(e))?))
        .collect::<Result<Vec<_>>>()?;
    let norm = BandNorm::fit(&train_raw)?;
    std::fs::write(dir.band_norm_path(), serde_json::to_vec_pretty(&norm)?)?;

    let extractor = FeatureExtractor::new(cfg.features.clone(), Some(norm))?;
    let emb = embedder(cfg)?;
    let corpus_id = format!("toy-{}", &summary.data_hash[..12]);
    let mut both = train.clone();
    both.extend(pool.iter().cloned());
    let feats = dir.features(&extractor, &both)?;
    fit_text_prototypes(&corpus_id, &train, &feats, &emb)?.save(&dir.train_prototypes_path())?;
    fit_text_prototypes(&corpus_id, &both, &feats, &emb)?.save(&dir.prototypes_path())?;

    cfg.save(&dir.config_path())?;
    std::fs::write(dir.root().join("data.json"), serde_json::to_vec_pretty(&summary)?)?;
    info!(
        "prepared {} clips in {}: {:?}",
        corpus.entries.len(),
        dir.root().display(),
        summary.split_sizes
    );
    Ok(summary)
}

/// Writes audio and caption embedding caches for both pools.
pub fn build_index(dir: &DataDir) -> Result<()> {
    let cfg = dir.config()?;
    let extractor = dir.extractor(&cfg)?;
    let emb = embedder(&cfg)?;
    let table = dir.prototypes()?;
    std::fs::create_dir_all(dir.root().join("index"))?;
    for pool in [PoolName::Train, PoolName::Pool] {
        let entries = dir.pool_manifest(pool)?;
        if entries.is_empty() {
            return Err(Error::EmptyIndex);
        }
        let feats = dir.features(&extractor, &entries)?;
        let audio = entries
            .iter()
            .map(|e| Ok((e.id.clone(), emb.embed_audio(&feats[&e.id])?)))
            .collect::<Result<Vec<(String, EmbeddingVector)>>>()?;
        write_cache(&dir.index_path(pool), &audio)?;
        let captions: Vec<(String, EmbeddingVector)> = entries
            .iter()
            .filter_map(|e| embed_text(&e.caption, &table).ok().map(|v| (e.id.clone(), v)))
            .collect();
        write_cache(&dir.caption_index_path(pool), &captions)?;
        info!("indexed {} clips of pool {pool}", audio.len());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.corpus.clips_per_variant = 8;
        cfg.corpus.clip_seconds = 0.25;
        cfg
    }

    #[test]
    fn prepare_refuses_existing_dir() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = DataDir::new(tmp.path());
        prepare_data(&tiny(), &dir, false).unwrap();
        assert!(prepare_data(&tiny(), &dir, false).is_err());
        prepare_data(&tiny(), &dir, true).unwrap();
    }

    #[test]
    fn missing_manifests_reported() {
        let tmp = tempfile::tempdir().unwrap();
        assert!(build_index(&DataDir::new(tmp.path())).is_err());
    }
}
