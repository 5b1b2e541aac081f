//! Brute-force reference implementations and synthetic fixtures.
//!
//! Everything here is deliberately naive: full sorts, nested loops and
//! exhaustive enumeration, so it can be trusted as an oracle for the
//! optimized paths in `nnaug-core`.

use std::collections::HashSet;
use std::io::Cursor;

use image::codecs::jpeg::JpegEncoder;
use image::{DynamicImage, ImageFormat, Rgb, RgbImage};
use nnaug_core::dedup::{hamming, HashedImage, PHash};
use nnaug_core::index::{cosine_similarity, normalize, CatalogRecord, Embedding, Neighbor};
use nnaug_core::Scalar;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Scores every record, sorts the whole list, and takes the first `k`.
pub fn exhaustive_knn<T: Scalar>(records: &[CatalogRecord<T>], q: &Embedding<T>, k: usize) -> Vec<Neighbor<T>> {
    let mut all: Vec<Neighbor<T>> = records
        .iter()
        .map(|r| Neighbor {
            record_id: r.record_id,
            similarity: cosine_similarity(q, &r.embedding).unwrap(),
        })
        .collect();
    // two stable sorts leave equal similarities in ascending id order
    all.sort_by_key(|n| n.record_id);
    all.sort_by(|a, b| b.similarity.as_f64().partial_cmp(&a.similarity.as_f64()).unwrap());
    all.truncate(k);
    all
}

pub fn random_unit(rng: &mut impl Rng, dim: usize) -> Embedding<f32> {
    loop {
        let v: Vec<f32> = (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        if let Ok(e) = normalize(&v) {
            return e;
        }
    }
}

/// Random catalog where roughly one record in ten copies an earlier
/// record's embedding, so exact similarity ties are common.
pub fn random_catalog(seed: u64, n: usize, dim: usize) -> Vec<CatalogRecord<f32>> {
    let mut r = rng(seed);
    let mut ids: Vec<u64> = (0..n as u64).map(|i| i * 7 + 3).collect();
    // shuffle ids so record order and id order disagree
    for i in (1..ids.len()).rev() {
        let j = r.gen_range(0..=i);
        ids.swap(i, j);
    }
    let mut out: Vec<CatalogRecord<f32>> = Vec::with_capacity(n);
    for (i, id) in ids.into_iter().enumerate() {
        let embedding = if i > 0 && r.gen_bool(0.1) {
            out[r.gen_range(0..i)].embedding.clone()
        } else {
            random_unit(&mut r, dim)
        };
        out.push(CatalogRecord {
            record_id: id,
            url: format!("https://cdn.example/{id}.jpg"),
            caption: format!("image {id}"),
            aesthetics_score: r.gen_range(0.0..10.0),
            nsfw: r.gen_bool(0.05),
            embedding,
        });
    }
    out
}

/// All cross pairs strictly within `radius`, as `(left index, right index, distance)`.
pub fn brute_force_pairs(left: &[HashedImage], right: &[HashedImage], radius: u32) -> Vec<(String, String, u32)> {
    let mut out = Vec::new();
    for a in left {
        for b in right {
            let d = (a.hash.0 ^ b.hash.0).count_ones();
            if d < radius {
                out.push((a.image_id.clone(), b.image_id.clone(), d));
            }
        }
    }
    out.sort();
    out
}

/// Hash corpus with planted near neighbors: mutants of a fixed set of base
/// hashes, shared by every corpus so that two corpora have cross pairs at
/// all distances, plus uniform noise.
pub fn clustered_hashes(seed: u64, n: usize, prefix: &str) -> Vec<HashedImage> {
    let mut shared = rng(0x5eed);
    let bases: Vec<u64> = (0..64).map(|_| shared.gen()).collect();
    let mut r = rng(seed);
    (0..n)
        .map(|i| {
            let h = if r.gen_bool(0.5) {
                let mut h = bases[r.gen_range(0..bases.len())];
                for _ in 0..r.gen_range(0..14) {
                    h ^= 1u64 << r.gen_range(0..64);
                }
                h
            } else {
                r.gen()
            };
            HashedImage::new(format!("{prefix}{i:05}"), PHash(h))
        })
        .collect()
}

/// Sequential re-statement of the retrieval procedure used as an oracle:
/// rank the whole catalog, walk the fixed schedule, and count acceptable
/// unique-URL records inside each prefix.
pub struct RetrievalSim {
    pub complete: bool,
    pub accepted: Vec<u64>,
    pub rounds: usize,
}

pub fn simulate_retrieval(
    records: &[CatalogRecord<f32>],
    q: &Embedding<f32>,
    schedule: &[usize],
    target: usize,
    aesthetics_min: f32,
) -> RetrievalSim {
    let ranked = exhaustive_knn(records, q, records.len());
    let by_id: std::collections::HashMap<u64, &CatalogRecord<f32>> =
        records.iter().map(|r| (r.record_id, r)).collect();
    for (round, &k) in schedule.iter().enumerate() {
        let mut urls = HashSet::new();
        let mut accepted = Vec::new();
        for n in ranked.iter().take(k) {
            let r = by_id[&n.record_id];
            if r.nsfw || r.aesthetics_score < aesthetics_min {
                continue;
            }
            if !urls.insert(r.url.clone()) {
                continue;
            }
            accepted.push(r.record_id);
        }
        let last = round + 1 == schedule.len() || k > ranked.len();
        if accepted.len() >= target || last {
            accepted.truncate(target);
            return RetrievalSim {
                complete: accepted.len() == target,
                accepted,
                rounds: round + 1,
            };
        }
    }
    unreachable!()
}

/// Sum of squared distances of a labelled partition to its cluster means.
pub fn partition_sse(points: &[Vec<f64>], labels: &[usize], k: usize) -> f64 {
    let dim = points[0].len();
    let mut total = 0.0;
    for c in 0..k {
        let members: Vec<&Vec<f64>> = points.iter().zip(labels).filter(|(_, &l)| l == c).map(|(p, _)| p).collect();
        if members.is_empty() {
            continue;
        }
        let mean: Vec<f64> = (0..dim)
            .map(|j| members.iter().map(|p| p[j]).sum::<f64>() / members.len() as f64)
            .collect();
        total += members
            .iter()
            .map(|p| p.iter().zip(&mean).map(|(x, m)| (x - m) * (x - m)).sum::<f64>())
            .sum::<f64>();
    }
    total
}

/// Minimum-SSE 2-partition by enumerating every bipartition (n <= 20).
pub fn best_two_partition(points: &[Vec<f64>]) -> Vec<usize> {
    let n = points.len();
    assert!(n <= 20);
    let mut best = (f64::INFINITY, vec![0; n]);
    // fix point 0 in cluster 0 to skip mirrored labelings
    for mask in 0u32..(1 << (n - 1)) {
        let labels: Vec<usize> = (0..n).map(|i| if i == 0 { 0 } else { ((mask >> (i - 1)) & 1) as usize }).collect();
        if labels.iter().all(|&l| l == 0) {
            continue;
        }
        let sse = partition_sse(points, &labels, 2);
        if sse < best.0 {
            best = (sse, labels);
        }
    }
    best.1
}

/// Gaussian-ish blobs (sum of uniforms) around well separated centers.
pub fn blobs(seed: u64, centers: &[Vec<f64>], per_blob: usize, spread: f64) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut r = rng(seed);
    let mut pts = Vec::new();
    let mut labels = Vec::new();
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..per_blob {
            pts.push(
                center
                    .iter()
                    .map(|x| x + spread * ((0..4).map(|_| r.gen_range(-1.0..1.0)).sum::<f64>() / 2.0))
                    .collect(),
            );
            labels.push(c);
        }
    }
    (pts, labels)
}

/// Same partition up to relabeling.
pub fn same_partition(a: &[usize], b: &[usize]) -> bool {
    if a.len() != b.len() {
        return false;
    }
    let mut map = std::collections::HashMap::new();
    let mut back = std::collections::HashMap::new();
    a.iter().zip(b).all(|(x, y)| *map.entry(x).or_insert(y) == y && *back.entry(y).or_insert(x) == x)
}

/// A synthetic "photo": smooth background gradient, low-frequency waves,
/// a handful of filled shapes and mild pixel noise.
pub fn synthetic_photo(seed: u64) -> RgbImage {
    let mut r = rng(seed);
    let w = r.gen_range(96..=256u32);
    let h = r.gen_range(96..=256u32);
    let base: [f64; 3] = [r.gen_range(0.0..255.0), r.gen_range(0.0..255.0), r.gen_range(0.0..255.0)];
    let grad: [f64; 3] = [r.gen_range(-120.0..120.0), r.gen_range(-120.0..120.0), r.gen_range(-120.0..120.0)];
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                r.gen_range(0.5..3.0),
                r.gen_range(0.5..3.0),
                r.gen_range(0.0..std::f64::consts::TAU),
                r.gen_range(10.0..50.0),
            )
        })
        .collect();
    struct Shape {
        cx: f64,
        cy: f64,
        rx: f64,
        ry: f64,
        disc: bool,
        color: [f64; 3],
    }
    let shapes: Vec<Shape> = (0..r.gen_range(2..6))
        .map(|_| Shape {
            cx: r.gen_range(0.0..1.0),
            cy: r.gen_range(0.0..1.0),
            rx: r.gen_range(0.08..0.35),
            ry: r.gen_range(0.08..0.35),
            disc: r.gen_bool(0.5),
            color: [r.gen_range(0.0..255.0), r.gen_range(0.0..255.0), r.gen_range(0.0..255.0)],
        })
        .collect();
    let mut img = RgbImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let u = x as f64 / w as f64;
            let v = y as f64 / h as f64;
            let mut px = [0.0f64; 3];
            for c in 0..3 {
                px[c] = base[c] + grad[c] * (u - v) * 0.5;
            }
            for &(fu, fv, ph, amp) in &waves {
                let s = amp * (std::f64::consts::TAU * (fu * u + fv * v) + ph).sin();
                px.iter_mut().for_each(|p| *p += s);
            }
            for s in &shapes {
                let du = (u - s.cx) / s.rx;
                let dv = (v - s.cy) / s.ry;
                let inside = if s.disc { du * du + dv * dv <= 1.0 } else { du.abs() <= 1.0 && dv.abs() <= 1.0 };
                if inside {
                    px = s.color;
                }
            }
            let noise = r.gen_range(-6.0..6.0);
            img.put_pixel(x, y, Rgb(px.map(|p| (p + noise).clamp(0.0, 255.0) as u8)));
        }
    }
    img
}

pub fn encode_png(img: &RgbImage) -> Vec<u8> {
    let mut buf = Cursor::new(Vec::new());
    DynamicImage::ImageRgb8(img.clone()).write_to(&mut buf, ImageFormat::Png).unwrap();
    buf.into_inner()
}

pub fn encode_jpeg(img: &RgbImage, quality: u8) -> Vec<u8> {
    let mut buf = Vec::new();
    JpegEncoder::new_with_quality(&mut buf, quality)
        .encode_image(&DynamicImage::ImageRgb8(img.clone()))
        .unwrap();
    buf
}

/// Share of corpus images whose JPEG re-encode stays strictly within
/// `radius` of the original's hash.
pub fn jpeg_robustness(corpus_size: u64, quality: u8, radius: u32) -> (usize, usize) {
    let mut within = 0;
    for seed in 0..corpus_size {
        let img = synthetic_photo(seed);
        let a = nnaug_core::dedup::phash_bytes(&encode_png(&img)).unwrap();
        let b = nnaug_core::dedup::phash_bytes(&encode_jpeg(&img, quality)).unwrap();
        if hamming(a, b) < radius {
            within += 1;
        }
    }
    (within, corpus_size as usize)
}

/// One class of a [`programmed_catalog`]: its query vector and the share
/// of its records that pass the default filters.
pub struct ProgrammedClass {
    pub wnid: String,
    pub query: Embedding<f32>,
    pub acceptance_rate: f64,
}

/// Catalog of `classes` tight clusters of `per_class` records each. Class
/// `c` gets its own acceptance rate spread over `rate_range`; rejected
/// records are a mix of NSFW and low-aesthetics ones, and about 5% of
/// records reuse a URL from earlier in the same class.
pub fn programmed_catalog(
    seed: u64,
    classes: usize,
    per_class: usize,
    dim: usize,
    rate_range: (f64, f64),
) -> (Vec<CatalogRecord<f32>>, Vec<ProgrammedClass>) {
    let mut r = rng(seed);
    let mut records = Vec::with_capacity(classes * per_class);
    let mut meta = Vec::with_capacity(classes);
    for c in 0..classes {
        let center = random_unit(&mut r, dim);
        let rate = rate_range.0 + (rate_range.1 - rate_range.0) * c as f64 / (classes.max(2) - 1) as f64;
        let mut urls: Vec<String> = Vec::with_capacity(per_class);
        for i in 0..per_class {
            let noise = random_unit(&mut r, dim);
            let v: Vec<f32> = center
                .values()
                .iter()
                .zip(noise.values())
                .map(|(a, b)| a + 0.05 * b)
                .collect();
            let ok = r.gen_bool(rate);
            let (aesthetics_score, nsfw) = if ok {
                (r.gen_range(5.0f32..10.0), false)
            } else if r.gen_bool(0.3) {
                (r.gen_range(0.0f32..10.0), true)
            } else {
                (r.gen_range(0.0f32..4.99), false)
            };
            let record_id = (c * per_class + i) as u64;
            let url = if i > 0 && r.gen_bool(0.05) {
                urls[r.gen_range(0..i)].clone()
            } else {
                format!("https://img.example/{c}/{i}.jpg")
            };
            urls.push(url.clone());
            records.push(CatalogRecord {
                record_id,
                url,
                caption: format!("class {c} item {i}"),
                aesthetics_score,
                nsfw,
                embedding: normalize(&v).unwrap(),
            });
        }
        meta.push(ProgrammedClass {
            wnid: format!("n{c:08}"),
            query: center,
            acceptance_rate: rate,
        });
    }
    (records, meta)
}

/// Acceptable unique-URL records among the first `cap` exhaustive neighbors.
pub fn acceptable_within_cap(records: &[CatalogRecord<f32>], q: &Embedding<f32>, cap: usize, aesthetics_min: f32) -> usize {
    let by_id: std::collections::HashMap<u64, &CatalogRecord<f32>> = records.iter().map(|r| (r.record_id, r)).collect();
    let mut urls = HashSet::new();
    exhaustive_knn(records, q, cap)
        .iter()
        .map(|n| by_id[&n.record_id])
        .filter(|r| !r.nsfw && r.aesthetics_score >= aesthetics_min && urls.insert(r.url.clone()))
        .count()
}

/// Manifest with `n` records per `(class, n)` entry; ids are `{name}:{class}:{i}`.
pub fn synthetic_manifest(
    name: &str,
    split: nnaug_core::dataset::Split,
    source: nnaug_core::dataset::Source,
    sizes: &[(String, usize)],
) -> nnaug_core::dataset::DatasetManifest {
    let records = sizes
        .iter()
        .flat_map(|(c, n)| {
            (0..*n).map(move |i| nnaug_core::dataset::ManifestRecord {
                image_id: format!("{name}:{c}:{i:05}"),
                class_wnid: c.clone(),
                source,
                path: format!("{c}/{name}-{i}.jpg"),
                provenance: String::new(),
            })
        })
        .collect();
    nnaug_core::dataset::DatasetManifest::new(name, split, records)
}

/// Class sizes spread evenly over `lo..=hi`, in a shuffled order.
pub fn class_sizes(seed: u64, classes: usize, lo: usize, hi: usize) -> Vec<(String, usize)> {
    let mut r = rng(seed);
    let mut sizes: Vec<(String, usize)> = (0..classes)
        .map(|c| {
            let n = if classes == 1 { lo } else { lo + (hi - lo) * c / (classes - 1) };
            (format!("n{c:08}"), n)
        })
        .collect();
    for i in (1..sizes.len()).rev() {
        let j = r.gen_range(0..=i);
        sizes.swap(i, j);
    }
    sizes
}
