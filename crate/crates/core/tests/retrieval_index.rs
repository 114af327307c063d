use std::cmp::Ordering;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use ragtta::embedder::EmbeddingVector;
use ragtta::retrieval_index::{read_cache, write_cache, Index, IndexEntry};
use ragtta::Error;

fn random_unit(dim: usize, rng: &mut ChaCha8Rng) -> EmbeddingVector {
    let v: Vec<f64> = (0..dim)
        .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect();
    EmbeddingVector::normalize(&v).unwrap()
}

fn entries(n: usize, dim: usize, seed: u64) -> Vec<IndexEntry> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| IndexEntry {
            clip_id: format!("clip{i:05}"),
            embedding: random_unit(dim, &mut rng),
            source_pool: "pool".into(),
        })
        .collect()
}

/// Full sort by (similarity desc, id asc) in f64.
fn brute_force(entries: &[IndexEntry], q: &EmbeddingVector, k: usize, exclude: Option<&str>) -> Vec<(String, f64)> {
    let mut scored: Vec<(String, f64)> = entries
        .iter()
        .filter(|e| Some(e.clip_id.as_str()) != exclude)
        .map(|e| {
            let s: f64 = e.embedding.values().iter().zip(q.values()).map(|(a, b)| *a as f64 * *b as f64).sum();
            (e.clip_id.clone(), s)
        })
        .collect();
    scored.sort_by(|a, b| match b.1.partial_cmp(&a.1).unwrap() {
        Ordering::Equal => a.0.cmp(&b.0),
        o => o,
    });
    scored.truncate(k);
    scored
}

#[test]
fn top_k_matches_brute_force() {
    let e = entries(100, 16, 1);
    let index = Index::build(e.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..1000 {
        let q = random_unit(16, &mut rng);
        let k = rng.random_range(1..=12);
        let got = index.retrieve(&q, k, None).unwrap();
        let want = brute_force(&e, &q, k, None);
        assert!(!got.short);
        assert_eq!(got.results.len(), k);
        for (r, (rank, (id, sim))) in got.results.iter().zip(want.iter().enumerate()) {
            assert_eq!(&r.clip_id, id);
            assert_eq!(r.rank, rank + 1);
            assert!((r.similarity - sim).abs() < 1e-6);
        }
    }
}

#[test]
fn exclusion_never_returns_the_query_clip() {
    let e = entries(200, 8, 3);
    let index = Index::build(e.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..10_000 {
        let i = rng.random_range(0..e.len());
        let id = e[i].clip_id.as_str();
        let with = index.retrieve(&e[i].embedding, 3, None).unwrap();
        assert_eq!(with.results[0].clip_id, id);
        let without = index.retrieve(&e[i].embedding, 3, Some(id)).unwrap();
        assert!(without.results.iter().all(|r| r.clip_id != id));
        assert_eq!(without.results.len(), 3);
    }
}

#[test]
fn ties_break_by_id() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let v = random_unit(4, &mut rng);
    let e: Vec<IndexEntry> = ["c", "a", "b"]
        .iter()
        .map(|id| IndexEntry {
            clip_id: id.to_string(),
            embedding: v.clone(),
            source_pool: "train".into(),
        })
        .collect();
    let index = Index::build(e).unwrap();
    let r = index.retrieve(&v, 3, None).unwrap();
    assert_eq!(r.ids(), ["a", "b", "c"]);
}

#[test]
fn short_pools_are_flagged() {
    let index = Index::build(entries(3, 4, 6)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let q = random_unit(4, &mut rng);
    let r = index.retrieve(&q, 5, None).unwrap();
    assert!(r.short);
    assert_eq!(r.results.len(), 3);
    let r = index.retrieve(&q, 3, Some("clip00001")).unwrap();
    assert!(r.short);
    assert_eq!(r.results.len(), 2);
    assert!(index.retrieve(&q, 0, None).is_err());
}

#[test]
fn build_validates_entries() {
    assert!(matches!(Index::build(vec![]), Err(Error::EmptyIndex)));
    let mut e = entries(3, 4, 8);
    e[2].clip_id = e[0].clip_id.clone();
    assert!(matches!(Index::build(e), Err(Error::DuplicateId(_))));
    let mut e = entries(2, 4, 9);
    e[1].embedding = EmbeddingVector::from_unit(vec![0.5, 0.5, 0.5, 0.6], 1.0).unwrap();
    assert!(matches!(Index::build(e), Err(Error::NotUnitNorm { .. })));
    let mut e = entries(2, 4, 10);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    e[1].embedding = random_unit(5, &mut rng);
    assert!(matches!(Index::build(e), Err(Error::DimensionMismatch(_))));
    let index = Index::build(entries(2, 4, 11)).unwrap();
    assert!(index.retrieve(&random_unit(3, &mut rng), 1, None).is_err());
}

#[test]
fn ten_thousand_entries() {
    let e = entries(10_000, 32, 12);
    let index = Index::build(e.clone()).unwrap();
    assert_eq!(index.len(), 10_000);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..20 {
        let q = random_unit(32, &mut rng);
        let got: Vec<String> = index.retrieve(&q, 10, None).unwrap().ids().iter().map(|s| s.to_string()).collect();
        let want: Vec<String> = brute_force(&e, &q, 10, None).into_iter().map(|p| p.0).collect();
        assert_eq!(got, want);
    }
}

#[test]
fn cache_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pool.embc");
    let e: Vec<(String, EmbeddingVector)> = entries(50, 16, 14).into_iter().map(|e| (e.clip_id, e.embedding)).collect();
    write_cache(&path, &e).unwrap();
    let back = read_cache(&path).unwrap();
    assert_eq!(back.len(), e.len());
    for ((a, va), (b, vb)) in e.iter().zip(&back) {
        assert_eq!(a, b);
        let bits_a: Vec<u32> = va.values().iter().map(|v| v.to_bits()).collect();
        let bits_b: Vec<u32> = vb.values().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits_a, bits_b);
    }
    let bytes = std::fs::read(&path).unwrap();
    let mut trailing = bytes.clone();
    trailing.push(0);
    std::fs::write(&path, &trailing).unwrap();
    assert!(read_cache(&path).is_err());
    let mut magic = bytes.clone();
    magic[0] = b'X';
    std::fs::write(&path, &magic).unwrap();
    assert!(matches!(read_cache(&path), Err(Error::Format { .. })));
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(read_cache(&path).is_err());
}

proptest! {
    #[test]
    fn results_are_sorted_and_ranked(seed in any::<u64>(), n in 1usize..60, k in 1usize..20) {
        let index = Index::build(entries(n, 6, seed)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        let r = index.retrieve(&random_unit(6, &mut rng), k, None).unwrap();
        prop_assert_eq!(r.results.len(), k.min(n));
        prop_assert_eq!(r.short, k > n);
        for (i, w) in r.results.iter().enumerate() {
            prop_assert_eq!(w.rank, i + 1);
            prop_assert!(w.similarity <= 1.0 + 1e-6 && w.similarity >= -1.0 - 1e-6);
        }
        for w in r.results.windows(2) {
            prop_assert!(w[0].similarity >= w[1].similarity);
        }
    }
}
