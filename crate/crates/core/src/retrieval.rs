//! Per-class nearest-neighbor retrieval with adaptive over-fetch, catalog
//! filters and duplicate screening.

use std::collections::{HashMap, HashSet};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dedup::{BkTree, PHash, DEFAULT_RADIUS};
use crate::index::{rank_order, CatalogRecord, Embedding, EmbeddingIndex, IndexError, Neighbor};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("invalid retrieval policy: {0}")]
    InvalidPolicy(String),
    #[error(transparent)]
    Index(#[from] IndexError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalPolicy {
    pub target_per_class: usize,
    pub overfetch_factor: f64,
    pub max_multiplier: u32,
    pub aesthetics_min: f32,
    pub exclude_nsfw: bool,
}

impl Default for RetrievalPolicy {
    fn default() -> Self {
        Self {
            target_per_class: 130,
            overfetch_factor: 1.4,
            max_multiplier: 10,
            aesthetics_min: 5.0,
            exclude_nsfw: true,
        }
    }
}

impl RetrievalPolicy {
    pub fn validate(&self) -> Result<(), RetrievalError> {
        if self.target_per_class < 1 {
            return Err(RetrievalError::InvalidPolicy("target_per_class must be >= 1".into()));
        }
        if !(self.overfetch_factor >= 1.0 && self.overfetch_factor.is_finite()) {
            return Err(RetrievalError::InvalidPolicy("overfetch_factor must be >= 1".into()));
        }
        if self.max_multiplier < 1 {
            return Err(RetrievalError::InvalidPolicy("max_multiplier must be >= 1".into()));
        }
        if !self.aesthetics_min.is_finite() {
            return Err(RetrievalError::InvalidPolicy("aesthetics_min must be finite".into()));
        }
        Ok(())
    }
}

/// `ceil` that ignores representation error just above an integer,
/// so that `1.4 * 130` (which is not exact in binary) yields 182.
fn ceil_count(x: f64) -> usize {
    let r = x.round();
    if (x - r).abs() < 1e-9 {
        r as usize
    } else {
        x.ceil() as usize
    }
}

/// Neighbor counts requested per round: starts at `ceil(factor * target)`,
/// doubles, and ends exactly at `ceil(max_multiplier * factor * target)`.
pub fn plan_fetch_sizes(policy: &RetrievalPolicy) -> Vec<usize> {
    let target = policy.target_per_class as f64;
    let start = ceil_count(policy.overfetch_factor * target).max(1);
    let cap = ceil_count(f64::from(policy.max_multiplier) * policy.overfetch_factor * target).max(start);
    let mut sizes = vec![start];
    let mut k = start;
    while k < cap {
        k = (k * 2).min(cap);
        sizes.push(k);
    }
    sizes
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    Nsfw,
    LowAesthetics,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterDecision {
    Accept,
    Reject(RejectReason),
}

pub fn filter_record<T>(r: &CatalogRecord<T>, policy: &RetrievalPolicy) -> FilterDecision {
    if policy.exclude_nsfw && r.nsfw {
        FilterDecision::Reject(RejectReason::Nsfw)
    } else if r.aesthetics_score < policy.aesthetics_min {
        FilterDecision::Reject(RejectReason::LowAesthetics)
    } else {
        FilterDecision::Accept
    }
}

#[derive(Default)]
struct Admitted {
    urls: HashSet<String>,
    hashes: BkTree,
}

/// Shared membership of images already taken, by exact URL and, where a
/// record's perceptual hash is known, by hash distance below `radius`.
pub struct DedupChecker {
    known_hashes: HashMap<u64, PHash>,
    radius: u32,
    admitted: Mutex<Admitted>,
}

impl Default for DedupChecker {
    fn default() -> Self {
        Self::url_only()
    }
}

impl DedupChecker {
    pub fn url_only() -> Self {
        Self::with_hashes(HashMap::new(), DEFAULT_RADIUS)
    }

    pub fn with_hashes(known_hashes: HashMap<u64, PHash>, radius: u32) -> Self {
        Self {
            known_hashes,
            radius: radius.clamp(1, 64),
            admitted: Mutex::new(Admitted::default()),
        }
    }

    pub fn admitted_urls(&self) -> usize {
        self.admitted.lock().expect("dedup state poisoned").urls.len()
    }

    /// Walks `ranked` in order and picks up to `limit` entries that collide
    /// with neither committed images nor earlier picks. The picks are
    /// committed when the limit is reached or `commit_partial` is set.
    /// Screening and commit happen under one lock.
    fn admit<T>(&self, ranked: &[&CatalogRecord<T>], limit: usize, commit_partial: bool) -> Vec<usize> {
        let max_distance = self.radius - 1;
        let mut state = self.admitted.lock().expect("dedup state poisoned");
        let mut local_urls: HashSet<&str> = HashSet::new();
        let mut local_hashes = BkTree::new();
        let mut picked = Vec::new();
        for (i, r) in ranked.iter().enumerate() {
            if picked.len() == limit {
                break;
            }
            if state.urls.contains(&r.url) || local_urls.contains(r.url.as_str()) {
                continue;
            }
            let hash = self.known_hashes.get(&r.record_id).copied();
            if let Some(h) = hash {
                if state.hashes.any_within(h, max_distance) || local_hashes.any_within(h, max_distance) {
                    continue;
                }
                local_hashes.insert(h, i);
            }
            local_urls.insert(&r.url);
            picked.push(i);
        }
        if picked.len() >= limit || commit_partial {
            for &i in &picked {
                let r = ranked[i];
                state.urls.insert(r.url.clone());
                if let Some(&h) = self.known_hashes.get(&r.record_id) {
                    let n = state.hashes.len();
                    state.hashes.insert(h, n);
                }
            }
        }
        picked
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalStatus {
    Complete,
    Insufficient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcceptedRecord<T> {
    pub record_id: u64,
    pub similarity: T,
    /// 1-based round in which the record first entered the fetched set.
    pub fetch_round: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRetrievalResult<T> {
    pub class_wnid: String,
    pub accepted: Vec<AcceptedRecord<T>>,
    pub status: RetrievalStatus,
    pub fetch_rounds: usize,
}

/// Retrieves up to `target_per_class` records for one class query.
///
/// Each round fetches the next size from [`plan_fetch_sizes`], filters,
/// and screens for duplicates; the first round with enough survivors wins
/// and the most similar `target_per_class` are kept. Rounds stop early once
/// the index has nothing more to return.
pub fn retrieve_class<T: Scalar>(
    index: &EmbeddingIndex<T>,
    class_wnid: &str,
    query: &Embedding<T>,
    policy: &RetrievalPolicy,
    dedup: &DedupChecker,
) -> Result<ClassRetrievalResult<T>, RetrievalError> {
    policy.validate()?;
    if !index.is_empty() && query.dim() != index.dim() {
        return Err(IndexError::DimensionMismatch {
            expected: index.dim(),
            found: query.dim(),
        }
        .into());
    }
    let sizes = plan_fetch_sizes(policy);
    let first_round = |rank: usize| sizes.iter().position(|&s| rank < s).map_or(sizes.len(), |r| r + 1);
    let target = policy.target_per_class;
    for (round, &k) in sizes.iter().enumerate() {
        let neighbors = index.query_knn(query, k)?;
        let exhausted = neighbors.len() < k;
        let last = round + 1 == sizes.len() || exhausted;
        let passing: Vec<(usize, Neighbor<T>, &CatalogRecord<T>)> = neighbors
            .iter()
            .enumerate()
            .filter_map(|(rank, n)| {
                let r = index.get(n.record_id).expect("neighbor ids come from the index");
                (filter_record(r, policy) == FilterDecision::Accept).then_some((rank, *n, r))
            })
            .collect();
        let ranked: Vec<&CatalogRecord<T>> = passing.iter().map(|(_, _, r)| *r).collect();
        let picked = dedup.admit(&ranked, target, last);
        if picked.len() >= target || last {
            let accepted = picked
                .into_iter()
                .map(|i| {
                    let (rank, n, _) = passing[i];
                    AcceptedRecord {
                        record_id: n.record_id,
                        similarity: n.similarity,
                        fetch_round: first_round(rank),
                    }
                })
                .collect::<Vec<_>>();
            let status = if accepted.len() >= target {
                RetrievalStatus::Complete
            } else {
                RetrievalStatus::Insufficient
            };
            return Ok(ClassRetrievalResult {
                class_wnid: class_wnid.to_string(),
                accepted,
                status,
                fetch_rounds: round + 1,
            });
        }
    }
    unreachable!("the final round always returns")
}

/// Top-`m` of `pool` by similarity, ties by ascending record id.
pub fn select_most_similar<T: Scalar>(pool: &[Neighbor<T>], m: usize) -> Vec<Neighbor<T>> {
    let mut sorted = pool.to_vec();
    sorted.sort_by(rank_order);
    sorted.truncate(m);
    sorted
}

/// One line of the per-class retrieval output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedLine {
    pub class_wnid: String,
    pub record_id: u64,
    pub url: String,
    pub caption: String,
    pub similarity: f64,
    pub fetch_round: usize,
}

impl<T: Scalar> ClassRetrievalResult<T> {
    pub fn lines(&self, index: &EmbeddingIndex<T>) -> Vec<RetrievedLine> {
        self.accepted
            .iter()
            .map(|a| {
                let r = index.get(a.record_id).expect("accepted ids come from the index");
                RetrievedLine {
                    class_wnid: self.class_wnid.clone(),
                    record_id: a.record_id,
                    url: r.url.clone(),
                    caption: r.caption.clone(),
                    similarity: a.similarity.as_f64(),
                    fetch_round: a.fetch_round,
                }
            })
            .collect()
    }
}
