//! Background jobs: submitted over HTTP, run on a bounded pool, and
//! recorded in an append-only state log.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;
use tokio::sync::Semaphore;

use crate::pipeline::{self, AssembleParams, DedupScanParams, DownloadParams, RetrieveParams};
use crate::store::VerdictStore;

pub const JOBS_LOG: &str = "jobs.jsonl";
pub const DATASETS_DIR: &str = "datasets";

#[derive(Debug, Error)]
pub enum JobError {
    #[error("bad params: {0}")]
    BadParams(String),
    #[error("unknown job {0}")]
    UnknownJob(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobKind {
    Retrieve,
    Download,
    DedupScan,
    AssembleReplicas,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub job_id: String,
    pub kind: JobKind,
    pub state: JobState,
    pub progress: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub idempotency_key: Option<String>,
    pub params: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<Value>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobRequest {
    pub kind: JobKind,
    #[serde(default)]
    pub params: Value,
    #[serde(default)]
    pub idempotency_key: Option<String>,
}

enum Params {
    Retrieve(RetrieveParams),
    Download(DownloadParams),
    DedupScan(DedupScanParams),
    Assemble(AssembleParams),
}

fn parse_params(kind: JobKind, params: &Value) -> Result<Params, JobError> {
    let bad = |e: serde_json::Error| JobError::BadParams(e.to_string());
    let v = params.clone();
    Ok(match kind {
        JobKind::Retrieve => Params::Retrieve(serde_json::from_value(v).map_err(bad)?),
        JobKind::Download => {
            let p: DownloadParams = serde_json::from_value(v).map_err(bad)?;
            if p.concurrency == 0 {
                return Err(JobError::BadParams("concurrency must be positive".into()));
            }
            Params::Download(p)
        }
        JobKind::DedupScan => {
            let p: DedupScanParams = serde_json::from_value(v).map_err(bad)?;
            if !(1..=64).contains(&p.radius) {
                return Err(JobError::BadParams("radius must be in 1..=64".into()));
            }
            Params::DedupScan(p)
        }
        JobKind::AssembleReplicas => {
            let p: AssembleParams = serde_json::from_value(v).map_err(bad)?;
            if !pipeline::valid_dataset_id(&p.name) {
                return Err(JobError::BadParams(format!("invalid dataset name {:?}", p.name)));
            }
            Params::Assemble(p)
        }
    })
}

struct Registry {
    jobs: HashMap<String, Job>,
    by_key: HashMap<String, String>,
    log: File,
}

impl Registry {
    fn record(&mut self, job: &Job) -> std::io::Result<()> {
        let mut line = serde_json::to_vec(job).expect("serializable");
        line.push(b'\n');
        self.log.write_all(&line)?;
        self.log.sync_data()
    }
}

#[derive(Clone)]
pub struct JobManager {
    registry: Arc<Mutex<Registry>>,
    workers: Arc<Semaphore>,
    store: Arc<RwLock<VerdictStore>>,
    datasets: PathBuf,
}

impl JobManager {
    /// Loads the job log. Jobs that were queued or running when the
    /// process stopped are marked failed rather than run again.
    pub fn open(dir: &Path, workers: usize, store: Arc<RwLock<VerdictStore>>) -> Result<Self, JobError> {
        let path = dir.join(JOBS_LOG);
        let mut jobs: HashMap<String, Job> = HashMap::new();
        if path.exists() {
            for line in BufReader::new(File::open(&path)?).lines() {
                let line = line?;
                match serde_json::from_str::<Job>(&line) {
                    Ok(job) => {
                        jobs.insert(job.job_id.clone(), job);
                    }
                    Err(e) => tracing::warn!(error = %e, "skipping unreadable job record"),
                }
            }
        }
        let log = OpenOptions::new().create(true).append(true).open(&path)?;
        let by_key = jobs
            .values()
            .filter_map(|j| j.idempotency_key.clone().map(|k| (k, j.job_id.clone())))
            .collect();
        let mut registry = Registry { jobs, by_key, log };
        let interrupted: Vec<Job> = registry
            .jobs
            .values_mut()
            .filter(|j| matches!(j.state, JobState::Queued | JobState::Running))
            .map(|j| {
                j.state = JobState::Failed;
                j.error = Some("interrupted by restart".into());
                j.clone()
            })
            .collect();
        for j in &interrupted {
            registry.record(j)?;
        }
        Ok(Self {
            registry: Arc::new(Mutex::new(registry)),
            workers: Arc::new(Semaphore::new(workers.max(1))),
            store,
            datasets: dir.join(DATASETS_DIR),
        })
    }

    pub fn get(&self, id: &str) -> Result<Job, JobError> {
        self.registry
            .lock()
            .unwrap()
            .jobs
            .get(id)
            .cloned()
            .ok_or_else(|| JobError::UnknownJob(id.to_string()))
    }

    pub fn list(&self) -> Vec<Job> {
        let mut jobs: Vec<Job> = self.registry.lock().unwrap().jobs.values().cloned().collect();
        jobs.sort_by(|a, b| a.job_id.cmp(&b.job_id));
        jobs
    }

    /// Enqueues a job, or returns the existing one for a repeated
    /// idempotency key. The flag is true for a newly created job.
    pub fn submit(&self, req: JobRequest) -> Result<(Job, bool), JobError> {
        let params = parse_params(req.kind, &req.params)?;
        let job = {
            let mut reg = self.registry.lock().unwrap();
            if let Some(key) = &req.idempotency_key {
                if let Some(id) = reg.by_key.get(key) {
                    let existing = reg.jobs[id].clone();
                    if existing.kind != req.kind {
                        return Err(JobError::BadParams(format!("idempotency key {key:?} belongs to a {:?} job", existing.kind)));
                    }
                    return Ok((existing, false));
                }
            }
            let job = Job {
                job_id: uuid::Uuid::new_v4().to_string(),
                kind: req.kind,
                state: JobState::Queued,
                progress: 0.0,
                error: None,
                idempotency_key: req.idempotency_key.clone(),
                params: req.params,
                result: None,
            };
            reg.record(&job)?;
            if let Some(key) = &job.idempotency_key {
                reg.by_key.insert(key.clone(), job.job_id.clone());
            }
            reg.jobs.insert(job.job_id.clone(), job.clone());
            job
        };
        let me = self.clone();
        let id = job.job_id.clone();
        tokio::spawn(async move { me.run(id, params).await });
        Ok((job, true))
    }

    fn update(&self, id: &str, f: impl FnOnce(&mut Job), persist: bool) {
        let mut reg = self.registry.lock().unwrap();
        let Some(job) = reg.jobs.get_mut(id) else { return };
        f(job);
        let snapshot = job.clone();
        if persist {
            if let Err(e) = reg.record(&snapshot) {
                tracing::error!(job = id, error = %e, "could not persist job state");
            }
        }
    }

    async fn run(self, id: String, params: Params) {
        let _permit = self.workers.clone().acquire_owned().await.expect("semaphore closed");
        self.update(&id, |j| j.state = JobState::Running, true);
        let result = self.execute(&id, params).await;
        self.update(
            &id,
            |j| match result {
                Ok(v) => {
                    j.state = JobState::Done;
                    j.progress = 1.0;
                    j.result = Some(v);
                }
                Err(e) => {
                    j.state = JobState::Failed;
                    j.error = Some(e);
                }
            },
            true,
        );
    }

    async fn execute(&self, id: &str, params: Params) -> Result<Value, String> {
        match params {
            Params::Retrieve(p) => {
                let me = self.clone();
                let id = id.to_string();
                blocking(move || {
                    let progress = |f: f64| me.update(&id, |j| j.progress = f, false);
                    pipeline::run_retrieve(&p, &progress).map(|s| json!(s))
                })
                .await
            }
            Params::Download(p) => pipeline::run_download(&p)
                .await
                .map(|counts| json!({ "outcomes": counts }))
                .map_err(|e| e.to_string()),
            Params::DedupScan(p) => {
                let store = self.store.clone();
                blocking(move || {
                    let scan = pipeline::run_dedup_scan(&p)?;
                    let found = scan.pairs.len();
                    let added = store
                        .write()
                        .unwrap()
                        .add_pairs(scan.pairs)
                        .map_err(|e| pipeline::PipelineError::BadInput(e.to_string()))?;
                    Ok(json!({
                        "pairs_found": found,
                        "pairs_added": added,
                        "left_images": scan.left_images,
                        "right_images": scan.right_images,
                        "unreadable": scan.unreadable,
                    }))
                })
                .await
            }
            Params::Assemble(mut p) => {
                let exclusions = self
                    .store
                    .read()
                    .unwrap()
                    .report()
                    .map(|r| r.exclusions)
                    .unwrap_or_default();
                p.exclusions.extend(exclusions);
                let dir = self.datasets.clone();
                blocking(move || {
                    let (manifests, log) = pipeline::assemble(&p)?;
                    let ids = pipeline::write_datasets(&dir, &manifests)?;
                    Ok(json!({ "datasets": ids, "excluded_classes": log.classes, "excluded_images": p.exclusions.len() }))
                })
                .await
            }
        }
    }
}

async fn blocking(f: impl FnOnce() -> Result<Value, pipeline::PipelineError> + Send + 'static) -> Result<Value, String> {
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => r.map_err(|e| e.to_string()),
        Err(e) => Err(format!("job panicked: {e}")),
    }
}
