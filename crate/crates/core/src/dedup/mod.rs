//! Near-duplicate detection between image sets and leakage reporting.

pub mod bktree;
pub mod phash;

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use bktree::BkTree;
pub use phash::{hamming, phash64, phash_bytes, phash_file, HashError, PHash};

use crate::jsonl;

/// Pairs strictly closer than this are duplicate candidates.
pub const DEFAULT_RADIUS: u32 = 10;

#[derive(Debug, Error)]
pub enum DedupError {
    #[error("radius must be in 1..=64, got {0}")]
    InvalidRadius(u32),
    #[error("invalid review sample: candidates {candidates}, reviewed {reviewed}, confirmed {confirmed}")]
    InvalidSample {
        candidates: u64,
        reviewed: u64,
        confirmed: u64,
    },
    #[error("pair references unknown split {0:?}")]
    UnknownSplit(String),
    #[error("split {0:?} has zero size")]
    EmptySplit(String),
    #[error(transparent)]
    Hash(#[from] HashError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashedImage {
    pub image_id: String,
    pub hash: PHash,
}

impl HashedImage {
    pub fn new(image_id: impl Into<String>, hash: PHash) -> Self {
        Self { image_id: image_id.into(), hash }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    #[default]
    Pending,
    TrueDuplicate,
    NotDuplicate,
}

/// A hash-flagged potential duplicate awaiting (or carrying) a human verdict.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidatePair {
    pub pair_key: String,
    /// Split of the right-hand (target) image.
    pub split: String,
    pub left_id: String,
    pub right_id: String,
    pub left_hash: PHash,
    pub right_hash: PHash,
    pub distance: u32,
    #[serde(default)]
    pub verdict: Verdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reviewer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reviewed_at: Option<String>,
}

/// Content-addressed key: derived from the split and both image hashes, so
/// a re-scan maps onto verdicts already given.
pub fn pair_key(split: &str, left: PHash, right: PHash) -> String {
    let mut h = Sha256::new();
    h.update(split.as_bytes());
    h.update([0u8]);
    h.update(left.0.to_be_bytes());
    h.update(right.0.to_be_bytes());
    let digest = h.finalize();
    digest[..16].iter().map(|b| format!("{b:02x}")).collect()
}

impl CandidatePair {
    pub fn new(split: &str, left: &HashedImage, right: &HashedImage, distance: u32) -> Self {
        Self {
            pair_key: pair_key(split, left.hash, right.hash),
            split: split.to_string(),
            left_id: left.image_id.clone(),
            right_id: right.image_id.clone(),
            left_hash: left.hash,
            right_hash: right.hash,
            distance,
            verdict: Verdict::Pending,
            reviewer: None,
            reviewed_at: None,
        }
    }
}

fn check_radius(radius: u32) -> Result<(), DedupError> {
    if (1..=64).contains(&radius) {
        Ok(())
    } else {
        Err(DedupError::InvalidRadius(radius))
    }
}

/// All cross pairs `(augmentation, target)` with Hamming distance strictly
/// below `radius`, each once, ordered by `(left_id, right_id)`.
pub fn scan(
    augmentation: &[HashedImage],
    target: &[HashedImage],
    radius: u32,
    split: &str,
) -> Result<Vec<CandidatePair>, DedupError> {
    check_radius(radius)?;
    let tree = BkTree::from_hashes(target.iter().map(|t| t.hash));
    let mut pairs: Vec<CandidatePair> = augmentation
        .par_iter()
        .flat_map_iter(|a| {
            tree.within(a.hash, radius - 1)
                .into_iter()
                .map(move |(j, d)| CandidatePair::new(split, a, &target[j], d))
        })
        .collect();
    pairs.sort_by(|x, y| (&x.left_id, &x.right_id).cmp(&(&y.left_id, &y.right_id)));
    Ok(pairs)
}

/// Candidate pairs inside one set, canonically oriented `left_id < right_id`.
pub fn scan_within(set: &[HashedImage], radius: u32, split: &str) -> Result<Vec<CandidatePair>, DedupError> {
    check_radius(radius)?;
    let tree = BkTree::from_hashes(set.iter().map(|t| t.hash));
    let mut pairs = Vec::new();
    for (i, a) in set.iter().enumerate() {
        for (j, d) in tree.within(a.hash, radius - 1) {
            let b = &set[j];
            if j != i && a.image_id < b.image_id {
                pairs.push(CandidatePair::new(split, a, b, d));
            }
        }
    }
    pairs.sort_by(|x, y| (&x.left_id, &x.right_id).cmp(&(&y.left_id, &y.right_id)));
    Ok(pairs)
}

/// Extrapolates confirmed duplicates in a reviewed sample to all candidates:
/// `round(candidates * confirmed / reviewed)`, halves rounded away from zero.
pub fn estimate_true_duplicates(candidates: u64, reviewed: u64, confirmed: u64) -> Result<u64, DedupError> {
    if reviewed == 0 || confirmed > reviewed || reviewed > candidates {
        return Err(DedupError::InvalidSample {
            candidates,
            reviewed,
            confirmed,
        });
    }
    let num = u128::from(candidates) * u128::from(confirmed);
    let den = u128::from(reviewed);
    Ok(((2 * num + den) / (2 * den)) as u64)
}

/// Renders a fraction as a percentage rounded to one significant digit,
/// e.g. `11 / 126_861` as `"0.009%"`. Zero renders as `"0.000%"`.
pub fn render_percent(fraction: f64) -> String {
    let pct = fraction * 100.0;
    if pct <= 0.0 || !pct.is_finite() {
        return "0.000%".to_string();
    }
    let mut exp = pct.log10().floor() as i32;
    let mut rounded = (pct / 10f64.powi(exp)).round() * 10f64.powi(exp);
    if rounded >= 10f64.powi(exp + 1) {
        exp += 1;
        rounded = 10f64.powi(exp);
    }
    let decimals = (-exp).max(0) as usize;
    format!("{rounded:.decimals$}%")
}

/// A dataset split that augmentation data is audited against.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub name: String,
    pub size: u64,
    /// Confirmed duplicates against this split are flagged for exclusion.
    #[serde(default)]
    pub exclude_confirmed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitLeakage {
    pub split: String,
    pub split_size: u64,
    pub candidates: u64,
    pub reviewed: u64,
    pub confirmed: u64,
    /// Extrapolated true duplicates; `None` while nothing has been reviewed.
    pub estimated: Option<u64>,
    pub confirmed_rate: f64,
    pub confirmed_percent: String,
    pub estimated_rate: Option<f64>,
    pub estimated_percent: Option<String>,
    /// Estimated duplicates as a share of the augmentation set.
    pub augmentation_rate: Option<f64>,
    pub augmentation_percent: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeakageReport {
    pub augmentation_size: Option<u64>,
    pub splits: Vec<SplitLeakage>,
    /// Augmentation image ids confirmed as duplicates of an excluded split.
    pub exclusions: Vec<String>,
}

impl LeakageReport {
    pub fn split(&self, name: &str) -> Option<&SplitLeakage> {
        self.splits.iter().find(|s| s.split == name)
    }
}

/// Summarizes candidate pairs (with their current verdicts) per split.
pub fn leakage_report(
    pairs: &[CandidatePair],
    splits: &[SplitSpec],
    augmentation_size: Option<u64>,
) -> Result<LeakageReport, DedupError> {
    let mut tallies: BTreeMap<&str, (u64, u64, u64)> = BTreeMap::new();
    for s in splits {
        if s.size == 0 {
            return Err(DedupError::EmptySplit(s.name.clone()));
        }
        tallies.insert(&s.name, (0, 0, 0));
    }
    let excluded: HashMap<&str, bool> = splits.iter().map(|s| (s.name.as_str(), s.exclude_confirmed)).collect();
    let mut exclusions = Vec::new();
    for p in pairs {
        let t = tallies
            .get_mut(p.split.as_str())
            .ok_or_else(|| DedupError::UnknownSplit(p.split.clone()))?;
        t.0 += 1;
        match p.verdict {
            Verdict::Pending => {}
            Verdict::NotDuplicate => t.1 += 1,
            Verdict::TrueDuplicate => {
                t.1 += 1;
                t.2 += 1;
                if excluded[p.split.as_str()] {
                    exclusions.push(p.left_id.clone());
                }
            }
        }
    }
    exclusions.sort();
    exclusions.dedup();

    let per_aug = |n: u64| augmentation_size.filter(|&a| a > 0).map(|a| n as f64 / a as f64);
    let out = splits
        .iter()
        .map(|s| {
            let (candidates, reviewed, confirmed) = tallies[s.name.as_str()];
            let estimated = if candidates == 0 {
                Some(0)
            } else if reviewed == 0 {
                None
            } else {
                Some(estimate_true_duplicates(candidates, reviewed, confirmed).expect("tallies are consistent"))
            };
            let confirmed_rate = confirmed as f64 / s.size as f64;
            let estimated_rate = estimated.map(|e| e as f64 / s.size as f64);
            let augmentation_rate = estimated.and_then(per_aug);
            SplitLeakage {
                split: s.name.clone(),
                split_size: s.size,
                candidates,
                reviewed,
                confirmed,
                estimated,
                confirmed_rate,
                confirmed_percent: render_percent(confirmed_rate),
                estimated_rate,
                estimated_percent: estimated_rate.map(render_percent),
                augmentation_rate,
                augmentation_percent: augmentation_rate.map(render_percent),
            }
        })
        .collect();
    Ok(LeakageReport {
        augmentation_size,
        splits: out,
        exclusions,
    })
}

/// Cache line of the hash cache file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct CacheLine {
    image_id: String,
    hash: PHash,
}

pub fn read_hash_cache(path: impl AsRef<Path>) -> io::Result<Vec<HashedImage>> {
    let lines: Vec<CacheLine> = jsonl::read(path)?;
    Ok(lines.into_iter().map(|l| HashedImage::new(l.image_id, l.hash)).collect())
}

pub fn write_hash_cache(path: impl AsRef<Path>, images: &[HashedImage]) -> io::Result<()> {
    let lines: Vec<CacheLine> = images
        .iter()
        .map(|i| CacheLine { image_id: i.image_id.clone(), hash: i.hash })
        .collect();
    jsonl::write(path, &lines)
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(&path, out)?;
        } else if path.file_name().and_then(|n| n.to_str()).is_some_and(|n| !n.starts_with('.')) {
            out.push(path);
        }
    }
    Ok(())
}

/// Image id for a file under `root`: the relative path without extension,
/// with `/` separators.
pub fn image_id_for(root: &Path, path: &Path) -> String {
    let rel = path.strip_prefix(root).unwrap_or(path).with_extension("");
    rel.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

/// Image ids that could not be hashed, with the reason.
pub type HashFailures = Vec<(String, HashError)>;

/// Hashes every image below `dir`. Entries already in `cache` (by image id)
/// are reused; files that fail to decode or are too small are returned
/// separately rather than aborting the scan.
pub fn hash_dir(
    dir: impl AsRef<Path>,
    cache: &[HashedImage],
) -> Result<(Vec<HashedImage>, HashFailures), DedupError> {
    let dir = dir.as_ref();
    let mut files = Vec::new();
    collect_files(dir, &mut files)?;
    files.sort();
    let known: HashMap<&str, PHash> = cache.iter().map(|c| (c.image_id.as_str(), c.hash)).collect();
    let results: Vec<(String, Result<PHash, HashError>)> = files
        .par_iter()
        .map(|f| {
            let id = image_id_for(dir, f);
            match known.get(id.as_str()) {
                Some(&h) => (id, Ok(h)),
                None => {
                    let h = phash_file(f);
                    (id, h)
                }
            }
        })
        .collect();
    let mut ok = Vec::new();
    let mut failed = Vec::new();
    for (id, r) in results {
        match r {
            Ok(h) => ok.push(HashedImage::new(id, h)),
            Err(e) => failed.push((id, e)),
        }
    }
    Ok((ok, failed))
}
