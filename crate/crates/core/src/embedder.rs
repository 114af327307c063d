//! Joint audio/text embeddings used for retrieval and for the CLAP-style score.
//!
//! Audio: a frozen, seeded random projection of per-band mean and variance of a
//! [`LatentFeature`], unit-normalized. Text: the normalized mean of the audio
//! prototypes of every event keyword found in the caption. Both live in the same
//! space, so text-to-audio cosine similarity is meaningful. Anything implementing
//! [`AudioEmbedder`] / [`TextEmbedder`] can replace them.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::codec_features::LatentFeature;
use crate::curation::ClipManifestEntry;
use crate::error::{Error, Result};

pub const DEFAULT_EMBED_DIM: usize = 32;
pub const DEFAULT_PROJECTION_SEED: u64 = 0x5eed_c1a9;

/// Unit-norm embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingVector(Vec<f32>);

impl EmbeddingVector {
    /// Scales `values` to unit norm.
    pub fn normalize(values: &[f64]) -> Result<Self> {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() || norm < 1e-12 {
            return Err(Error::Invalid(format!("cannot normalize vector of norm {norm}")));
        }
        Ok(Self(values.iter().map(|v| (v / norm) as f32).collect()))
    }

    /// Accepts `values` as-is if their norm is within `tol` of one.
    pub fn from_unit(values: Vec<f32>, tol: f64) -> Result<Self> {
        let norm = norm_f32(&values);
        if values.iter().any(|v| !v.is_finite()) || (norm - 1.0).abs() > tol {
            return Err(Error::NotUnitNorm {
                id: String::new(),
                norm,
            });
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        norm_f32(&self.0)
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&v| v as f64).collect()
    }

    /// Cosine similarity (dot product of unit vectors), accumulated in f64.
    pub fn dot(&self, other: &EmbeddingVector) -> f64 {
        dot_f32(&self.0, &other.0)
    }
}

pub(crate) fn dot_f32(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

fn norm_f32(v: &[f32]) -> f64 {
    dot_f32(v, v).sqrt()
}

pub trait AudioEmbedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed_audio(&self, f: &LatentFeature) -> Result<EmbeddingVector>;
}

pub trait TextEmbedder: Send + Sync {
    fn embed_text(&self, caption: &str) -> Result<EmbeddingVector>;
}

/// Seeded Gaussian projection of `[band means, band variances]` to `dim`.
#[derive(Clone, Debug)]
pub struct ProjectionEmbedder {
    feature_dim: usize,
    dim: usize,
    /// `dim` rows of `2 * feature_dim`.
    projection: Vec<f64>,
}

impl ProjectionEmbedder {
    pub fn new(feature_dim: usize, dim: usize, seed: u64) -> Result<Self> {
        if feature_dim == 0 || dim == 0 {
            return Err(Error::InvalidConfig("embedder dimensions must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (dim as f64).sqrt();
        let projection = (0..dim * 2 * feature_dim)
            .map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
            .collect();
        Ok(Self {
            feature_dim,
            dim,
            projection,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    fn stats(&self, f: &LatentFeature) -> Vec<f64> {
        let d = f.dim();
        let n = f.n_frames() as f64;
        let mut stats = vec![0.0; 2 * d];
        for row in f.rows() {
            for (b, &v) in row.iter().enumerate() {
                stats[b] += v as f64;
            }
        }
        for s in &mut stats[..d] {
            *s /= n;
        }
        for row in f.rows() {
            for (b, &v) in row.iter().enumerate() {
                let dv = v as f64 - stats[b];
                stats[d + b] += dv * dv;
            }
        }
        for s in &mut stats[d..] {
            *s /= n;
        }
        stats
    }
}

impl AudioEmbedder for ProjectionEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_audio(&self, f: &LatentFeature) -> Result<EmbeddingVector> {
        if f.n_frames() == 0 {
            return Err(Error::DimensionMismatch("feature has no frames".into()));
        }
        if f.dim() != self.feature_dim {
            return Err(Error::DimensionMismatch(format!(
                "feature dim {} vs embedder {}",
                f.dim(),
                self.feature_dim
            )));
        }
        let stats = self.stats(f);
        let projected: Vec<f64> = self
            .projection
            .chunks_exact(stats.len())
            .map(|row| row.iter().zip(&stats).map(|(a, b)| a * b).sum())
            .collect();
        // A feature with all-zero statistics has no direction; map it to the first axis.
        EmbeddingVector::normalize(&projected).or_else(|_| {
            let mut axis = vec![0.0; self.dim];
            axis[0] = 1.0;
            EmbeddingVector::normalize(&axis)
        })
    }
}

/// Leaf tag -> prototype embedding, immutable once built.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeTable {
    pub corpus_id: String,
    pub built_at: String,
    #[serde(with = "prototype_serde")]
    prototypes: BTreeMap<String, EmbeddingVector>,
}

mod prototype_serde {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(
        m: &BTreeMap<String, EmbeddingVector>,
        s: S,
    ) -> std::result::Result<S::Ok, S::Error> {
        let plain: BTreeMap<&String, &Vec<f32>> = m.iter().map(|(k, v)| (k, &v.0)).collect();
        plain.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> std::result::Result<BTreeMap<String, EmbeddingVector>, D::Error> {
        let plain = BTreeMap::<String, Vec<f32>>::deserialize(d)?;
        plain
            .into_iter()
            .map(|(k, v)| {
                EmbeddingVector::from_unit(v, 1e-4)
                    .map(|e| (k.clone(), e))
                    .map_err(|_| serde::de::Error::custom(format!("prototype {k} is not unit norm")))
            })
            .collect()
    }
}

impl PrototypeTable {
    /// Re-normalized mean of each group. Fails on an empty group.
    pub fn from_groups(
        corpus_id: &str,
        groups: BTreeMap<String, Vec<EmbeddingVector>>,
    ) -> Result<Self> {
        let mut prototypes = BTreeMap::new();
        for (tag, members) in groups {
            let first = members.first().ok_or_else(|| Error::EmptyTag(tag.clone()))?;
            let mut sum = vec![0.0f64; first.dim()];
            for m in &members {
                if m.dim() != sum.len() {
                    return Err(Error::DimensionMismatch(format!("mixed dims in tag {tag}")));
                }
                for (s, &v) in sum.iter_mut().zip(m.values()) {
                    *s += v as f64;
                }
            }
            let proto = EmbeddingVector::normalize(&sum).map_err(|_| {
                Error::Invalid(format!("prototype for {tag} has zero mean direction"))
            })?;
            prototypes.insert(tag, proto);
        }
        Ok(Self {
            corpus_id: corpus_id.to_string(),
            built_at: build_timestamp(),
            prototypes,
        })
    }

    pub fn get(&self, tag: &str) -> Option<&EmbeddingVector> {
        self.prototypes.get(tag)
    }

    pub fn tags(&self) -> impl Iterator<Item = &String> {
        self.prototypes.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &EmbeddingVector)> {
        self.prototypes.iter()
    }

    pub fn len(&self) -> usize {
        self.prototypes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.display().to_string(),
            reason: e.to_string(),
        })
    }

    /// Tags whose words occur contiguously in `caption`, in table order.
    pub fn matched_tags(&self, caption: &str) -> Vec<&str> {
        let words = caption_words(caption);
        self.prototypes
            .keys()
            .filter(|tag| {
                let tw = caption_words(tag);
                !tw.is_empty() && words.windows(tw.len()).any(|w| w == tw.as_slice())
            })
            .map(String::as_str)
            .collect()
    }
}

impl TextEmbedder for PrototypeTable {
    fn embed_text(&self, caption: &str) -> Result<EmbeddingVector> {
        embed_text(caption, self)
    }
}

/// Honors `SOURCE_DATE_EPOCH` so byte-reproducible builds stay possible.
fn build_timestamp() -> String {
    if let Some(secs) = std::env::var("SOURCE_DATE_EPOCH").ok().and_then(|v| v.parse::<u64>().ok()) {
        return format!("unix:{secs}");
    }
    let secs = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    format!("unix:{secs}")
}

fn caption_words(text: &str) -> Vec<String> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '-'))
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Prototype per leaf tag: normalized mean audio embedding of that tag's clips.
pub fn fit_text_prototypes(
    corpus_id: &str,
    manifest: &[ClipManifestEntry],
    features: &HashMap<String, LatentFeature>,
    embedder: &dyn AudioEmbedder,
) -> Result<PrototypeTable> {
    let mut groups: BTreeMap<String, Vec<EmbeddingVector>> = BTreeMap::new();
    for e in manifest {
        let f = features
            .get(&e.id)
            .ok_or_else(|| Error::Invalid(format!("no features for clip {}", e.id)))?;
        groups
            .entry(e.leaf().to_string())
            .or_default()
            .push(embedder.embed_audio(f)?);
    }
    PrototypeTable::from_groups(corpus_id, groups)
}

/// Text embedding of a template caption via the prototypes of its event keywords.
pub fn embed_text(caption: &str, table: &PrototypeTable) -> Result<EmbeddingVector> {
    if caption.trim().is_empty() {
        return Err(Error::UnembeddableCaption(caption.to_string()));
    }
    let tags = table.matched_tags(caption);
    if tags.is_empty() {
        return Err(Error::UnembeddableCaption(caption.to_string()));
    }
    let mut sum = vec![0.0f64; table.get(tags[0]).map(|p| p.dim()).unwrap_or(0)];
    for tag in &tags {
        for (s, &v) in sum.iter_mut().zip(table.prototypes[*tag].values()) {
            *s += v as f64;
        }
    }
    EmbeddingVector::normalize(&sum).map_err(|_| Error::UnembeddableCaption(caption.to_string()))
}
