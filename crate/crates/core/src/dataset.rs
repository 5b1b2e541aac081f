//! Dataset manifests and the sampling protocol: stratified subsamples,
//! disjoint validation splits, augmentation pools, replicas and merges.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::retrieval::RetrievalStatus;
use crate::seed::derived_rng;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("fraction must be in (0, 1], got {0}")]
    InvalidFraction(f64),
    #[error("duplicate image id {0:?} in manifest")]
    DuplicateImage(String),
    #[error("class {0:?} is not in the class table")]
    UnknownClass(String),
    #[error("training subset contains {0:?}, which is not in the source manifest")]
    NotSubset(String),
    #[error("class {class}: need {needed} images outside the training subset, only {available} remain")]
    InsufficientRemainder {
        class: String,
        needed: usize,
        available: usize,
    },
    #[error("pool too small for classes {0:?}")]
    PoolTooSmall(Vec<String>),
    #[error("image id {0:?} appears in both manifests")]
    IdCollision(String),
    #[error("multiplier must be at least 1")]
    InvalidMultiplier,
    #[error("bad manifest file: {0}")]
    BadFile(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
    Pool,
    Replica,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Original,
    Retrieved,
    Generated,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub image_id: String,
    pub class_wnid: String,
    pub source: Source,
    pub path: String,
    #[serde(default)]
    pub provenance: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub split: Split,
    pub records: Vec<ManifestRecord>,
}

/// Per-class image counts.
pub type ClassCountTable = BTreeMap<String, usize>;

#[derive(Serialize, Deserialize)]
struct Header {
    manifest: String,
    split: Split,
}

impl DatasetManifest {
    pub fn new(name: impl Into<String>, split: Split, records: Vec<ManifestRecord>) -> Self {
        Self {
            name: name.into(),
            split,
            records,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Checks id uniqueness and, if given, membership of every class in
    /// the class table.
    pub fn validate(&self, classes: Option<&BTreeSet<String>>) -> Result<(), DatasetError> {
        let mut seen = HashSet::with_capacity(self.records.len());
        for r in &self.records {
            if !seen.insert(r.image_id.as_str()) {
                return Err(DatasetError::DuplicateImage(r.image_id.clone()));
            }
            if let Some(c) = classes {
                if !c.contains(&r.class_wnid) {
                    return Err(DatasetError::UnknownClass(r.class_wnid.clone()));
                }
            }
        }
        Ok(())
    }

    pub fn class_counts(&self) -> ClassCountTable {
        let mut t = ClassCountTable::new();
        for r in &self.records {
            *t.entry(r.class_wnid.clone()).or_default() += 1;
        }
        t
    }

    pub fn ids(&self) -> HashSet<&str> {
        self.records.iter().map(|r| r.image_id.as_str()).collect()
    }

    fn by_class(&self) -> BTreeMap<&str, Vec<&ManifestRecord>> {
        let mut m: BTreeMap<&str, Vec<&ManifestRecord>> = BTreeMap::new();
        for r in &self.records {
            m.entry(r.class_wnid.as_str()).or_default().push(r);
        }
        m
    }

    /// JSON-lines: a header line `{"manifest": .., "split": ..}` then one
    /// record per line.
    pub fn write_to(&self, w: &mut impl Write) -> io::Result<()> {
        serde_json::to_writer(
            &mut *w,
            &Header {
                manifest: self.name.clone(),
                split: self.split,
            },
        )?;
        w.write_all(b"\n")?;
        crate::jsonl::write_to(w, &self.records)
    }

    pub fn read_from(r: impl BufRead) -> Result<Self, DatasetError> {
        let mut lines = r.lines();
        let header = loop {
            match lines.next() {
                Some(line) => {
                    let line = line?;
                    if !line.trim().is_empty() {
                        break line;
                    }
                }
                None => return Err(DatasetError::BadFile("empty manifest".into())),
            }
        };
        let header: Header =
            serde_json::from_str(&header).map_err(|e| DatasetError::BadFile(format!("header: {e}")))?;
        let mut records = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(
                serde_json::from_str(&line).map_err(|e| DatasetError::BadFile(format!("line {}: {e}", i + 2)))?,
            );
        }
        Ok(Self {
            name: header.manifest,
            split: header.split,
            records,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DatasetError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DatasetError> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

/// Picks `count` of `members` uniformly without replacement using a
/// generator derived from `(seed, labels)`. Members are ordered by image id
/// first, so the draw does not depend on manifest order.
fn draw<'a>(
    members: &[&'a ManifestRecord],
    count: usize,
    seed: u64,
    labels: &[&str],
) -> Vec<&'a ManifestRecord> {
    let mut sorted = members.to_vec();
    sorted.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    let mut rng = derived_rng(seed, labels);
    let mut picks: Vec<usize> = sample(&mut rng, sorted.len(), count).into_vec();
    picks.sort_unstable();
    picks.into_iter().map(|i| sorted[i]).collect()
}

/// Keeps records whose ids are in `chosen`, preserving manifest order.
fn retain_chosen(m: &DatasetManifest, chosen: &HashSet<&str>) -> Vec<ManifestRecord> {
    m.records
        .iter()
        .filter(|r| chosen.contains(r.image_id.as_str()))
        .cloned()
        .collect()
}

/// Per-class sample size for [`stratified_subsample`]: `round(fraction * n)`,
/// at least 1.
pub fn stratum_size(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64).round() as usize).clamp(1, n.max(1))
}

/// Samples `round(fraction * n_c)` records (at least one) from every class,
/// preserving the class imbalance.
pub fn stratified_subsample(m: &DatasetManifest, fraction: f64, seed: u64) -> Result<DatasetManifest, DatasetError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(DatasetError::InvalidFraction(fraction));
    }
    m.validate(None)?;
    let mut chosen = HashSet::new();
    for (class, members) in m.by_class() {
        let n = stratum_size(members.len(), fraction);
        chosen.extend(draw(&members, n, seed, &["subsample", class]).into_iter().map(|r| r.image_id.as_str()));
    }
    Ok(DatasetManifest::new(
        format!("{}-sub", m.name),
        Split::Train,
        retain_chosen(m, &chosen),
    ))
}

/// Draws, from `m` minus `train_sub`, a split with exactly the per-class
/// counts of `train_sub`.
pub fn disjoint_validation_split(
    m: &DatasetManifest,
    train_sub: &DatasetManifest,
    seed: u64,
) -> Result<DatasetManifest, DatasetError> {
    let all = m.ids();
    let taken = train_sub.ids();
    if let Some(missing) = train_sub.records.iter().find(|r| !all.contains(r.image_id.as_str())) {
        return Err(DatasetError::NotSubset(missing.image_id.clone()));
    }
    let remainder: BTreeMap<&str, Vec<&ManifestRecord>> = {
        let mut rem: BTreeMap<&str, Vec<&ManifestRecord>> = BTreeMap::new();
        for r in m.records.iter().filter(|r| !taken.contains(r.image_id.as_str())) {
            rem.entry(r.class_wnid.as_str()).or_default().push(r);
        }
        rem
    };
    let mut chosen = HashSet::new();
    for (class, needed) in train_sub.class_counts() {
        let pool = remainder.get(class.as_str()).map(Vec::as_slice).unwrap_or(&[]);
        if pool.len() < needed {
            return Err(DatasetError::InsufficientRemainder {
                class,
                needed,
                available: pool.len(),
            });
        }
        chosen.extend(draw(pool, needed, seed, &["validation", &class]).into_iter().map(|r| r.image_id.as_str()));
    }
    Ok(DatasetManifest::new(
        format!("{}-val", m.name),
        Split::Validation,
        retain_chosen(m, &chosen),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolMode {
    /// Every class gets `multiplier * max_c n_c`.
    Uniform,
    /// Each class gets `multiplier * n_c`.
    PerClass,
}

pub fn pool_target(counts: &ClassCountTable, multiplier: usize, mode: PoolMode) -> Result<ClassCountTable, DatasetError> {
    if multiplier < 1 {
        return Err(DatasetError::InvalidMultiplier);
    }
    let max = counts.values().copied().max().unwrap_or(0);
    Ok(counts
        .iter()
        .map(|(c, &n)| {
            let target = match mode {
                PoolMode::Uniform => multiplier * max,
                PoolMode::PerClass => multiplier * n,
            };
            (c.clone(), target)
        })
        .collect())
}

/// Resamples `pool` into `n_replicas` manifests with exactly
/// `target_counts` per class. Sampling is without replacement inside a
/// replica; replicas are drawn independently and may overlap.
pub fn make_replicas(
    pool: &DatasetManifest,
    target_counts: &ClassCountTable,
    n_replicas: usize,
    seed: u64,
) -> Result<Vec<DatasetManifest>, DatasetError> {
    pool.validate(None)?;
    let by_class = pool.by_class();
    let short: Vec<String> = target_counts
        .iter()
        .filter(|(c, &n)| by_class.get(c.as_str()).map_or(0, Vec::len) < n)
        .map(|(c, _)| c.clone())
        .collect();
    if !short.is_empty() {
        return Err(DatasetError::PoolTooSmall(short));
    }
    Ok((0..n_replicas)
        .map(|r| {
            let tag = r.to_string();
            let mut chosen = HashSet::new();
            for (class, &n) in target_counts {
                let members = by_class.get(class.as_str()).map(Vec::as_slice).unwrap_or(&[]);
                chosen.extend(draw(members, n, seed, &["replica", &tag, class]).into_iter().map(|x| x.image_id.as_str()));
            }
            DatasetManifest::new(
                format!("{}-replica-{r}", pool.name),
                Split::Replica,
                retain_chosen(pool, &chosen),
            )
        })
        .collect())
}

/// Concatenates `original` and `replica`, dropping any id in `exclusions`.
pub fn merge(
    original: &DatasetManifest,
    replica: &DatasetManifest,
    exclusions: &HashSet<String>,
) -> Result<DatasetManifest, DatasetError> {
    let ids = original.ids();
    if let Some(r) = replica.records.iter().find(|r| ids.contains(r.image_id.as_str())) {
        return Err(DatasetError::IdCollision(r.image_id.clone()));
    }
    let records = original
        .records
        .iter()
        .chain(&replica.records)
        .filter(|r| !exclusions.contains(&r.image_id))
        .cloned()
        .collect();
    Ok(DatasetManifest::new(
        format!("{}+{}", original.name, replica.name),
        original.split,
        records,
    ))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExcludedClass {
    pub class_wnid: String,
    /// Records removed, keyed by manifest name.
    pub removed: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExclusionLog {
    pub classes: Vec<ExcludedClass>,
}

impl ExclusionLog {
    pub fn total_removed(&self) -> usize {
        self.classes.iter().flat_map(|c| c.removed.values()).sum()
    }
}

/// Removes every class whose retrieval came back insufficient from all
/// given manifests. Classes without a status are kept.
pub fn exclude_insufficient_classes(
    manifests: &[DatasetManifest],
    statuses: &HashMap<String, RetrievalStatus>,
) -> (Vec<DatasetManifest>, ExclusionLog) {
    let dropped: BTreeSet<&str> = statuses
        .iter()
        .filter(|(_, s)| **s == RetrievalStatus::Insufficient)
        .map(|(c, _)| c.as_str())
        .collect();
    let mut log: BTreeMap<&str, BTreeMap<String, usize>> =
        dropped.iter().map(|&c| (c, BTreeMap::new())).collect();
    let out = manifests
        .iter()
        .map(|m| {
            let mut kept = Vec::with_capacity(m.records.len());
            for r in &m.records {
                if dropped.contains(r.class_wnid.as_str()) {
                    *log.get_mut(r.class_wnid.as_str())
                        .expect("dropped class has a log entry")
                        .entry(m.name.clone())
                        .or_default() += 1;
                } else {
                    kept.push(r.clone());
                }
            }
            DatasetManifest::new(m.name.clone(), m.split, kept)
        })
        .collect();
    let log = ExclusionLog {
        classes: log
            .into_iter()
            .map(|(c, removed)| ExcludedClass {
                class_wnid: c.to_string(),
                removed,
            })
            .collect(),
    };
    (out, log)
}
