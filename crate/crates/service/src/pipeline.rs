//! The batch steps behind both the CLI and the service's job runner.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Duration;

use nnaug_core::dataset::{exclude_insufficient_classes, make_replicas, merge, DatasetError, DatasetManifest};
use nnaug_core::dedup::{hash_dir, read_hash_cache, scan, write_hash_cache, CandidatePair, DedupError, PHash, DEFAULT_RADIUS};
use nnaug_core::index::{normalize, IndexError};
use nnaug_core::jsonl;
use nnaug_core::matrix::Matrix;
use nnaug_core::prompts::PromptSpec;
use nnaug_core::retrieval::{retrieve_class, DedupChecker, RetrievalError, RetrievalPolicy, RetrievalStatus};
use nnaug_core::Index;
use nnaug_fetch::{fetch_all, FetchError, FetchOutcome, FetchStatus, FetchTask, RetryConfig};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{0}")]
    BadInput(String),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Dedup(#[from] DedupError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Fetch(#[from] FetchError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

fn io_at(path: &Path) -> impl FnOnce(io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.to_path_buf(), source }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), PipelineError> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text + "\n").map_err(io_at(path))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, PipelineError> {
    let text = fs::read_to_string(path).map_err(io_at(path))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::BadInput(format!("{}: {e}", path.display())))
}

fn default_radius() -> u32 {
    DEFAULT_RADIUS
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrieveParams {
    pub index: PathBuf,
    pub prompts: PathBuf,
    /// Prompt embeddings, one row per line of `prompts`.
    pub queries: PathBuf,
    pub out: PathBuf,
    #[serde(default)]
    pub policy: RetrievalPolicy,
    /// Hash cache keyed by record id; enables perceptual screening.
    #[serde(default)]
    pub hashes: Option<PathBuf>,
    #[serde(default = "default_radius")]
    pub radius: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrieveSummary {
    pub classes: usize,
    pub complete: usize,
    pub insufficient: usize,
    pub accepted: usize,
}

pub const STATUS_FILE: &str = "status.json";

/// One query per class: the renormalized mean of that class's prompt
/// embeddings, in wnid order.
pub fn class_queries(prompts: &[PromptSpec], queries: &Matrix) -> Result<Vec<(String, nnaug_core::Embedding)>, PipelineError> {
    if prompts.len() != queries.rows() {
        return Err(PipelineError::BadInput(format!(
            "{} prompts but {} query rows",
            prompts.len(),
            queries.rows()
        )));
    }
    let mut sums: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for (p, row) in prompts.iter().zip(queries.iter_rows()) {
        let acc = sums.entry(p.class_wnid.as_str()).or_insert_with(|| vec![0.0; row.len()]);
        acc.iter_mut().zip(row).for_each(|(a, &x)| *a += x as f64);
    }
    sums.into_iter()
        .map(|(wnid, sum)| {
            let v: Vec<f32> = sum.iter().map(|&x| x as f32).collect();
            Ok((wnid.to_string(), normalize(&v)?))
        })
        .collect()
}

pub fn run_retrieve(p: &RetrieveParams, progress: &dyn Fn(f64)) -> Result<RetrieveSummary, PipelineError> {
    p.policy.validate()?;
    let index = Index::load(&p.index)?;
    let prompts: Vec<PromptSpec> = jsonl::read(&p.prompts).map_err(io_at(&p.prompts))?;
    let queries = Matrix::load(&p.queries).map_err(io_at(&p.queries))?;
    let classes = class_queries(&prompts, &queries)?;
    let checker = match &p.hashes {
        Some(path) => {
            let cache = read_hash_cache(path).map_err(io_at(path))?;
            let mut known: HashMap<u64, PHash> = HashMap::with_capacity(cache.len());
            for h in cache {
                let id = h
                    .image_id
                    .parse()
                    .map_err(|_| PipelineError::BadInput(format!("hash cache id {:?} is not a record id", h.image_id)))?;
                known.insert(id, h.hash);
            }
            DedupChecker::with_hashes(known, p.radius)
        }
        None => DedupChecker::url_only(),
    };
    fs::create_dir_all(&p.out).map_err(io_at(&p.out))?;
    let mut statuses = BTreeMap::new();
    let mut summary = RetrieveSummary {
        classes: classes.len(),
        complete: 0,
        insufficient: 0,
        accepted: 0,
    };
    for (i, (wnid, query)) in classes.iter().enumerate() {
        let result = retrieve_class(&index, wnid, query, &p.policy, &checker)?;
        let path = p.out.join(format!("{wnid}.jsonl"));
        jsonl::write(&path, &result.lines(&index)).map_err(io_at(&path))?;
        match result.status {
            RetrievalStatus::Complete => summary.complete += 1,
            RetrievalStatus::Insufficient => summary.insufficient += 1,
        }
        summary.accepted += result.accepted.len();
        statuses.insert(wnid.clone(), result.status);
        progress((i + 1) as f64 / classes.len() as f64);
    }
    write_json(&p.out.join(STATUS_FILE), &statuses)?;
    Ok(summary)
}

pub fn read_statuses(path: &Path) -> Result<HashMap<String, RetrievalStatus>, PipelineError> {
    read_json(path)
}

fn default_concurrency() -> usize {
    16
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DownloadParams {
    /// A retrieval output file, or a directory of them.
    pub manifest: PathBuf,
    pub out: PathBuf,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    #[serde(default)]
    pub max_attempts: Option<u32>,
    #[serde(default)]
    pub base_backoff_ms: Option<u64>,
    #[serde(default)]
    pub timeout_secs: Option<u64>,
}

#[derive(Debug, Clone, Deserialize)]
struct DownloadLine {
    record_id: u64,
    url: String,
    #[serde(default)]
    class_wnid: Option<String>,
}

pub const OUTCOME_LOG: &str = "outcomes.jsonl";

fn manifest_files(path: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    if !path.is_dir() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(path)
        .map_err(io_at(path))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "jsonl"))
        .collect();
    files.sort();
    Ok(files)
}

fn extension_for(url: &str) -> &'static str {
    let path = url.split(['?', '#']).next().unwrap_or_default().to_ascii_lowercase();
    match path.rsplit_once('.').map(|(_, e)| e) {
        Some("png") => "png",
        Some("webp") => "webp",
        _ => "jpg",
    }
}

pub fn download_tasks(p: &DownloadParams) -> Result<Vec<FetchTask>, PipelineError> {
    let mut seen = HashSet::new();
    let mut tasks = Vec::new();
    for file in manifest_files(&p.manifest)? {
        let lines: Vec<DownloadLine> = jsonl::read(&file).map_err(io_at(&file))?;
        for l in lines {
            if !seen.insert(l.record_id) {
                continue;
            }
            let dir = match &l.class_wnid {
                Some(c) => p.out.join(c),
                None => p.out.clone(),
            };
            tasks.push(FetchTask {
                record_id: l.record_id,
                dest_path: dir.join(format!("{}.{}", l.record_id, extension_for(&l.url))),
                url: l.url,
                attempts: 0,
            });
        }
    }
    Ok(tasks)
}

pub async fn run_download(p: &DownloadParams) -> Result<BTreeMap<FetchStatus, usize>, PipelineError> {
    let tasks = download_tasks(p)?;
    let defaults = RetryConfig::default();
    let retry = RetryConfig {
        max_attempts: p.max_attempts.unwrap_or(defaults.max_attempts),
        base_backoff: p.base_backoff_ms.map_or(defaults.base_backoff, Duration::from_millis),
        request_timeout: p.timeout_secs.map_or(defaults.request_timeout, Duration::from_secs),
    };
    let outcomes: Vec<FetchOutcome> = fetch_all(tasks, p.concurrency, retry).await?;
    fs::create_dir_all(&p.out).map_err(io_at(&p.out))?;
    let log = p.out.join(OUTCOME_LOG);
    jsonl::write(&log, &outcomes).map_err(io_at(&log))?;
    let mut counts = BTreeMap::new();
    for o in &outcomes {
        *counts.entry(o.status).or_insert(0) += 1;
    }
    Ok(counts)
}

fn default_split() -> String {
    "test".into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DedupScanParams {
    /// Augmentation images.
    pub left: PathBuf,
    /// Images of the split being audited.
    pub right: PathBuf,
    #[serde(default = "default_split")]
    pub split: String,
    #[serde(default = "default_radius")]
    pub radius: u32,
    #[serde(default)]
    pub left_cache: Option<PathBuf>,
    #[serde(default)]
    pub right_cache: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct ScanResult {
    pub pairs: Vec<CandidatePair>,
    pub left_images: usize,
    pub right_images: usize,
    pub unreadable: Vec<String>,
}

fn hash_with_cache(dir: &Path, cache: Option<&Path>) -> Result<(Vec<nnaug_core::dedup::HashedImage>, Vec<String>), PipelineError> {
    let known = match cache {
        Some(c) if c.exists() => read_hash_cache(c).map_err(io_at(c))?,
        _ => Vec::new(),
    };
    let (ok, failed) = hash_dir(dir, &known)?;
    if let Some(c) = cache {
        write_hash_cache(c, &ok).map_err(io_at(c))?;
    }
    Ok((ok, failed.into_iter().map(|(id, _)| id).collect()))
}

pub fn run_dedup_scan(p: &DedupScanParams) -> Result<ScanResult, PipelineError> {
    let (left, mut unreadable) = hash_with_cache(&p.left, p.left_cache.as_deref())?;
    let (right, failed) = hash_with_cache(&p.right, p.right_cache.as_deref())?;
    unreadable.extend(failed);
    let pairs = scan(&left, &right, p.radius, &p.split)?;
    Ok(ScanResult {
        pairs,
        left_images: left.len(),
        right_images: right.len(),
        unreadable,
    })
}

fn default_replicas() -> usize {
    5
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssembleParams {
    /// Training manifest the replicas are merged into.
    pub original: PathBuf,
    pub pool: PathBuf,
    /// Manifest whose per-class counts each replica must match; defaults to `original`.
    #[serde(default)]
    pub targets: Option<PathBuf>,
    #[serde(default = "default_replicas")]
    pub replicas: usize,
    #[serde(default)]
    pub seed: u64,
    /// Prefix for the emitted dataset ids.
    pub name: String,
    /// Retrieval status file; insufficient classes are dropped everywhere.
    #[serde(default)]
    pub statuses: Option<PathBuf>,
    #[serde(default)]
    pub exclusions: Vec<String>,
}

/// Builds the replicas followed by their merges into `original`, with
/// insufficient classes removed when a status file is given.
pub fn assemble(p: &AssembleParams) -> Result<(Vec<DatasetManifest>, nnaug_core::dataset::ExclusionLog), PipelineError> {
    if !valid_dataset_id(&p.name) {
        return Err(PipelineError::BadInput(format!("invalid dataset name {:?}", p.name)));
    }
    let original = DatasetManifest::load(&p.original)?;
    let pool = DatasetManifest::load(&p.pool)?;
    let targets = match &p.targets {
        Some(t) => DatasetManifest::load(t)?.class_counts(),
        None => original.class_counts(),
    };
    let exclusions: HashSet<String> = p.exclusions.iter().cloned().collect();
    let mut out = Vec::with_capacity(2 * p.replicas);
    let mut merged = Vec::with_capacity(p.replicas);
    for (r, mut replica) in make_replicas(&pool, &targets, p.replicas, p.seed)?.into_iter().enumerate() {
        replica.name = format!("{}-replica-{r}", p.name);
        let mut m = merge(&original, &replica, &exclusions)?;
        m.name = format!("{}-merged-{r}", p.name);
        out.push(replica);
        merged.push(m);
    }
    out.extend(merged);
    match &p.statuses {
        Some(path) => {
            let (kept, log) = exclude_insufficient_classes(&out, &read_statuses(path)?);
            Ok((kept, log))
        }
        None => Ok((out, Default::default())),
    }
}

pub fn valid_dataset_id(id: &str) -> bool {
    !id.is_empty()
        && !id.starts_with('.')
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.' | '+'))
}

pub fn write_datasets(dir: &Path, manifests: &[DatasetManifest]) -> Result<Vec<String>, PipelineError> {
    fs::create_dir_all(dir).map_err(io_at(dir))?;
    manifests
        .iter()
        .map(|m| {
            m.save(dir.join(format!("{}.jsonl", m.name)))?;
            Ok(m.name.clone())
        })
        .collect()
}
