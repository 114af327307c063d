//! Exact top-k cosine retrieval over an immutable pool of embeddings.
//!
//! Training uses audio-to-audio queries with the target excluded; inference uses
//! text-to-audio queries. Ties are broken by ascending clip id so every query is
//! reproducible.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec_features::LatentFeature;
use crate::embedder::{dot_f32, embed_text, AudioEmbedder, EmbeddingVector, PrototypeTable};
use crate::error::{Error, Result};

pub const CACHE_MAGIC: &[u8; 4] = b"EMBC";
pub const CACHE_VERSION: u32 = 1;
const UNIT_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct IndexEntry {
    pub clip_id: String,
    pub embedding: EmbeddingVector,
    pub source_pool: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub clip_id: String,
    pub similarity: f64,
    pub rank: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Retrieval {
    pub results: Vec<RetrievalResult>,
    /// Fewer than `k` candidates were available after exclusion.
    pub short: bool,
}

impl Retrieval {
    pub fn ids(&self) -> Vec<&str> {
        self.results.iter().map(|r| r.clip_id.as_str()).collect()
    }
}

/// Row-major embedding matrix with parallel id and pool columns.
#[derive(Clone, Debug)]
pub struct Index {
    ids: Vec<String>,
    pools: Vec<String>,
    matrix: Vec<f32>,
    dim: usize,
}

impl Index {
    pub fn build(entries: Vec<IndexEntry>) -> Result<Self> {
        let dim = entries.first().ok_or(Error::EmptyIndex)?.embedding.dim();
        let mut seen = HashSet::with_capacity(entries.len());
        let mut ids = Vec::with_capacity(entries.len());
        let mut pools = Vec::with_capacity(entries.len());
        let mut matrix = Vec::with_capacity(entries.len() * dim);
        for e in entries {
            if !seen.insert(e.clip_id.clone()) {
                return Err(Error::DuplicateId(e.clip_id));
            }
            if e.embedding.dim() != dim {
                return Err(Error::DimensionMismatch(format!(
                    "{} has dim {}, index dim {dim}",
                    e.clip_id,
                    e.embedding.dim()
                )));
            }
            let norm = e.embedding.norm();
            if (norm - 1.0).abs() > UNIT_TOLERANCE {
                return Err(Error::NotUnitNorm {
                    id: e.clip_id,
                    norm,
                });
            }
            matrix.extend_from_slice(e.embedding.values());
            ids.push(e.clip_id);
            pools.push(e.source_pool);
        }
        Ok(Self {
            ids,
            pools,
            matrix,
            dim,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn contains(&self, id: &str) -> bool {
        self.ids.iter().any(|i| i == id)
    }

    pub fn entries(&self) -> impl Iterator<Item = IndexEntry> + '_ {
        (0..self.len()).map(move |i| IndexEntry {
            clip_id: self.ids[i].clone(),
            embedding: EmbeddingVector::from_unit(self.row(i).to_vec(), 1.0)
                .expect("rows are finite"),
            source_pool: self.pools[i].clone(),
        })
    }

    fn row(&self, i: usize) -> &[f32] {
        &self.matrix[i * self.dim..(i + 1) * self.dim]
    }

    /// Top-`k` by cosine similarity, descending; `exclude_id` never appears.
    pub fn retrieve(
        &self,
        query: &EmbeddingVector,
        k: usize,
        exclude_id: Option<&str>,
    ) -> Result<Retrieval> {
        if k == 0 {
            return Err(Error::Invalid("k must be at least 1".into()));
        }
        if query.dim() != self.dim {
            return Err(Error::DimensionMismatch(format!(
                "query dim {} vs index dim {}",
                query.dim(),
                self.dim
            )));
        }
        let mut scored: Vec<(f64, usize)> = (0..self.len())
            .filter(|&i| exclude_id != Some(self.ids[i].as_str()))
            .map(|i| (dot_f32(self.row(i), query.values()), i))
            .collect();
        let order = |a: &(f64, usize), b: &(f64, usize)| -> Ordering {
            b.0.total_cmp(&a.0).then_with(|| self.ids[a.1].cmp(&self.ids[b.1]))
        };
        let short = scored.len() < k;
        if !short && scored.len() > k {
            scored.select_nth_unstable_by(k - 1, order);
            scored.truncate(k);
        }
        scored.sort_by(order);
        let results = scored
            .into_iter()
            .enumerate()
            .map(|(r, (sim, i))| RetrievalResult {
                clip_id: self.ids[i].clone(),
                similarity: sim,
                rank: r + 1,
            })
            .collect();
        Ok(Retrieval { results, short })
    }
}

/// Audio-to-audio retrieval for a training target; the target is always excluded.
pub fn retrieve_for_training(
    index: &Index,
    embedder: &dyn AudioEmbedder,
    target_id: &str,
    target: &LatentFeature,
    k: usize,
) -> Result<Retrieval> {
    let query = embedder.embed_audio(target)?;
    index.retrieve(&query, k, Some(target_id))
}

/// Text-to-audio retrieval for a caption. Pass `exclude_id` when the pool holds
/// the reference clip being evaluated.
pub fn retrieve_for_inference(
    index: &Index,
    caption: &str,
    table: &PrototypeTable,
    k: usize,
    exclude_id: Option<&str>,
) -> Result<Retrieval> {
    let query = embed_text(caption, table)?;
    index.retrieve(&query, k, exclude_id)
}

/// Writes the binary embedding cache:
/// `"EMBC" | version u32 | count u64 | dim u32 | (id_len u16 | id utf8 | dim x f32)*`,
/// all little-endian.
pub fn write_cache(path: &Path, entries: &[(String, EmbeddingVector)]) -> Result<()> {
    let dim = entries.first().map(|e| e.1.dim()).unwrap_or(0);
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    out.write_all(CACHE_MAGIC)?;
    out.write_all(&CACHE_VERSION.to_le_bytes())?;
    out.write_all(&(entries.len() as u64).to_le_bytes())?;
    out.write_all(&(dim as u32).to_le_bytes())?;
    for (id, e) in entries {
        if e.dim() != dim {
            return Err(Error::DimensionMismatch(format!("{id} has dim {}", e.dim())));
        }
        let bytes = id.as_bytes();
        let len = u16::try_from(bytes.len())
            .map_err(|_| Error::Invalid(format!("id too long: {id}")))?;
        out.write_all(&len.to_le_bytes())?;
        out.write_all(bytes)?;
        for v in e.values() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_cache(path: &Path) -> Result<Vec<(String, EmbeddingVector)>> {
    let bad = |reason: &str| Error::Format {
        path: path.display().to_string(),
        reason: reason.to_string(),
    };
    let mut input = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != CACHE_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = read_u32(&mut input)?;
    if version != CACHE_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let count = read_u64(&mut input)? as usize;
    let dim = read_u32(&mut input)? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 20));
    let mut buf4 = [0u8; 4];
    for _ in 0..count {
        let mut len = [0u8; 2];
        input.read_exact(&mut len)?;
        let mut id = vec![0u8; u16::from_le_bytes(len) as usize];
        input.read_exact(&mut id)?;
        let id = String::from_utf8(id).map_err(|_| bad("id is not UTF-8"))?;
        let mut values = Vec::with_capacity(dim);
        for _ in 0..dim {
            input.read_exact(&mut buf4)?;
            values.push(f32::from_le_bytes(buf4));
        }
        let e = EmbeddingVector::from_unit(values, UNIT_TOLERANCE).map_err(|e| match e {
            Error::NotUnitNorm { norm, .. } => Error::NotUnitNorm { id: id.clone(), norm },
            other => other,
        })?;
        entries.push((id, e));
    }
    let mut trailing = [0u8; 1];
    if input.read(&mut trailing)? != 0 {
        return Err(bad("trailing bytes"));
    }
    Ok(entries)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit(v: &[f64]) -> EmbeddingVector {
        EmbeddingVector::normalize(v).unwrap()
    }

    fn entry(id: &str, v: &[f64]) -> IndexEntry {
        IndexEntry {
            clip_id: id.into(),
            embedding: unit(v),
            source_pool: "pool".into(),
        }
    }

    #[test]
    fn build_errors() {
        assert!(matches!(Index::build(vec![]), Err(Error::EmptyIndex)));
        let dup = vec![entry("a", &[1.0, 0.0]), entry("a", &[0.0, 1.0])];
        assert!(matches!(Index::build(dup), Err(Error::DuplicateId(_))));
        let raw = IndexEntry {
            clip_id: "x".into(),
            embedding: EmbeddingVector::from_unit(vec![1.0, 0.0], 1e-6).unwrap(),
            source_pool: "p".into(),
        };
        assert_eq!(Index::build(vec![raw]).unwrap().len(), 1);
        let idx = Index::build(vec![
            entry("a", &[1.0, 0.0]),
            entry("b", &[0.0, 1.0]),
            entry("c", &[1.0, 1.0]),
        ])
        .unwrap();
        assert_eq!(idx.len(), 3);
    }

    #[test]
    fn basic_queries_and_exclusion() {
        let idx = Index::build(vec![entry("e1", &[1.0, 0.0]), entry("e2", &[0.0, 1.0])]).unwrap();
        let q = unit(&[1.0, 0.0]);
        let r = idx.retrieve(&q, 1, None).unwrap();
        assert_eq!(r.ids(), vec!["e1"]);
        assert!((r.results[0].similarity - 1.0).abs() < 1e-12);
        let r = idx.retrieve(&q, 1, Some("e1")).unwrap();
        assert_eq!(r.ids(), vec!["e2"]);
        assert!(r.results[0].similarity.abs() < 1e-12);
        let r = idx.retrieve(&q, 5, Some("e1")).unwrap();
        assert!(r.short);
        assert_eq!(r.results.len(), 1);
        assert!(idx.retrieve(&q, 0, None).is_err());
    }

    #[test]
    fn ties_break_by_id() {
        let idx = Index::build(vec![
            entry("c", &[1.0, 0.0]),
            entry("a", &[1.0, 0.0]),
            entry("b", &[1.0, 0.0]),
        ])
        .unwrap();
        let r = idx.retrieve(&unit(&[1.0, 0.0]), 2, None).unwrap();
        assert_eq!(r.ids(), vec!["a", "b"]);
        assert_eq!(r.results[1].rank, 2);
    }

    #[test]
    fn cache_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.embc");
        let entries = vec![
            ("α-1".to_string(), unit(&[0.1, 0.2, 0.3])),
            ("b".to_string(), unit(&[-1.0, 0.5, 2.0])),
        ];
        write_cache(&path, &entries).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"EMBC");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 3);
        assert_eq!(bytes.len(), 20 + (2 + 4 + 12) + (2 + 1 + 12));
        assert_eq!(read_cache(&path).unwrap(), entries);
        write_cache(&path, &read_cache(&path).unwrap()).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), bytes);
    }

    #[test]
    fn cache_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.embc");
        std::fs::write(&path, b"NOPE\x01\0\0\0").unwrap();
        assert!(matches!(read_cache(&path), Err(Error::Format { .. })));
    }

    proptest! {
        #[test]
        fn results_sorted_unique_and_exclusive(
            vecs in proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, 4), 2..40),
            q in proptest::collection::vec(-1.0f64..1.0, 4),
            k in 1usize..10,
            ex in 0usize..40,
        ) {
            prop_assume!(q.iter().any(|v| v.abs() > 1e-3));
            let entries: Vec<_> = vecs.iter().enumerate()
                .filter(|(_, v)| v.iter().any(|x| x.abs() > 1e-3))
                .map(|(i, v)| entry(&format!("id{i:03}"), v))
                .collect();
            prop_assume!(!entries.is_empty());
            let excluded = format!("id{ex:03}");
            let idx = Index::build(entries).unwrap();
            let r = idx.retrieve(&unit(&q), k, Some(&excluded)).unwrap();
            prop_assert!(r.results.iter().all(|x| x.clip_id != excluded));
            let ids: HashSet<_> = r.results.iter().map(|x| &x.clip_id).collect();
            prop_assert_eq!(ids.len(), r.results.len());
            for (i, w) in r.results.windows(2).enumerate() {
                prop_assert!(w[0].similarity >= w[1].similarity);
                prop_assert_eq!(w[0].rank, i + 1);
            }
        }
    }
}
