use nnaug_core::index::{normalize, rank_order, EmbeddingIndex};
use nnaug_testkit::{exhaustive_knn, random_catalog, random_unit, rng};
use proptest::prelude::*;

#[test]
fn thousand_vectors_top_ten_matches_brute_force() {
    let records = random_catalog(11, 1000, 32);
    let idx = EmbeddingIndex::build(records.clone()).unwrap();
    let mut r = rng(99);
    for _ in 0..20 {
        let q = random_unit(&mut r, 32);
        assert_eq!(idx.query_knn(&q, 10).unwrap(), exhaustive_knn(&records, &q, 10));
    }
}

#[test]
fn ties_on_duplicate_embeddings_break_by_id() {
    let records = random_catalog(5, 5000, 8);
    let idx = EmbeddingIndex::build(records.clone()).unwrap();
    // query with a catalog vector: at least one exact tie at the top
    for probe in [0usize, 17, 4000] {
        let q = records[probe].embedding.clone();
        let got = idx.query_knn(&q, 50).unwrap();
        assert_eq!(got, exhaustive_knn(&records, &q, 50));
        assert!(got.windows(2).all(|w| rank_order(&w[0], &w[1]).is_lt()));
    }
}

#[test]
fn save_load_query_is_identical() {
    let records = random_catalog(3, 3000, 64);
    let idx = EmbeddingIndex::build(records).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("catalog.crix");
    idx.save(&path).unwrap();
    let loaded = EmbeddingIndex::load(&path).unwrap();
    assert_eq!(loaded, idx);
    let mut again = Vec::new();
    loaded.write_to(&mut again).unwrap();
    assert_eq!(again, std::fs::read(&path).unwrap());
    let q = random_unit(&mut rng(1), 64);
    let a = idx.query_knn(&q, 25).unwrap();
    let b = loaded.query_knn(&q, 25).unwrap();
    assert_eq!(
        a.iter().map(|n| (n.record_id, n.similarity.to_bits())).collect::<Vec<_>>(),
        b.iter().map(|n| (n.record_id, n.similarity.to_bits())).collect::<Vec<_>>()
    );
}

#[test]
fn double_precision_index_agrees_with_oracle() {
    let records: Vec<_> = random_catalog(8, 800, 16)
        .into_iter()
        .map(|r| nnaug_core::index::CatalogRecord {
            record_id: r.record_id,
            url: r.url,
            caption: r.caption,
            aesthetics_score: r.aesthetics_score,
            nsfw: r.nsfw,
            embedding: normalize(&r.embedding.values().iter().map(|&x| x as f64).collect::<Vec<_>>()).unwrap(),
        })
        .collect();
    let idx = EmbeddingIndex::build(records.clone()).unwrap();
    let q = records[3].embedding.clone();
    assert_eq!(idx.query_knn(&q, 40).unwrap(), exhaustive_knn(&records, &q, 40));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn knn_equals_exhaustive_scan(seed in any::<u64>(), n in 0usize..3000, dim in 1usize..24, k in 1usize..200) {
        let records = random_catalog(seed, n, dim);
        let idx = EmbeddingIndex::build(records.clone()).unwrap();
        let q = random_unit(&mut rng(seed ^ 0xabc), dim);
        let got = idx.query_knn(&q, k).unwrap();
        prop_assert_eq!(got.len(), k.min(n));
        prop_assert!(got.windows(2).all(|w| rank_order(&w[0], &w[1]).is_lt()));
        prop_assert_eq!(got, exhaustive_knn(&records, &q, k));
    }

    #[test]
    fn normalized_vectors_have_unit_norm(v in prop::collection::vec(-1e3f32..1e3, 1..300)) {
        if let Ok(e) = normalize(&v) {
            let norm: f64 = e.values().iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
            prop_assert!((norm - 1.0).abs() < 1e-5);
        } else {
            prop_assert!(v.iter().all(|&x| x == 0.0));
        }
    }
}
