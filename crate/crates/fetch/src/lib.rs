//! Downloads catalog images to disk with bounded concurrency, a per-host
//! request cap, retries with exponential backoff, and format validation.

use std::collections::HashMap;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use image::ImageFormat;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::io::AsyncWriteExt;
use tokio::sync::{Mutex, Semaphore};
use tracing::{debug, warn};

/// Shortest accepted image side, in pixels.
pub const MIN_SIDE: u32 = 64;
pub const PER_HOST_LIMIT: usize = 4;

#[derive(Debug, Error)]
pub enum FetchError {
    #[error("invalid fetch configuration: {0}")]
    Config(String),
    #[error("could not build HTTP client: {0}")]
    Client(#[from] reqwest::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ValidationError {
    #[error("not a supported image: {0}")]
    Decode(String),
    #[error("image is {width}x{height}, below the {MIN_SIDE}px minimum side")]
    TooSmall { width: u32, height: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FetchTask {
    pub record_id: u64,
    pub url: String,
    pub dest_path: PathBuf,
    /// Attempts already spent on this task in earlier runs.
    #[serde(default)]
    pub attempts: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FetchStatus {
    Ok,
    DeadUrl,
    DecodeError,
    Timeout,
    TooSmall,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FetchOutcome {
    pub record_id: u64,
    pub status: FetchStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub width: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub height: Option<u32>,
    pub bytes_written: u64,
    /// Total attempts including earlier runs; unchanged when the file was already present.
    pub attempts: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryConfig {
    pub max_attempts: u32,
    pub base_backoff: Duration,
    pub request_timeout: Duration,
}

impl Default for RetryConfig {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_backoff: Duration::from_millis(500),
            request_timeout: Duration::from_secs(30),
        }
    }
}

/// Decodes `bytes` as JPEG, PNG or WebP and checks the minimum side.
pub fn validate_image(bytes: &[u8]) -> Result<(u32, u32), ValidationError> {
    let format = image::guess_format(bytes).map_err(|e| ValidationError::Decode(e.to_string()))?;
    if !matches!(format, ImageFormat::Jpeg | ImageFormat::Png | ImageFormat::WebP) {
        return Err(ValidationError::Decode(format!("unsupported format {format:?}")));
    }
    let img = image::load_from_memory_with_format(bytes, format).map_err(|e| ValidationError::Decode(e.to_string()))?;
    let (width, height) = (img.width(), img.height());
    if width.min(height) < MIN_SIDE {
        return Err(ValidationError::TooSmall { width, height });
    }
    Ok((width, height))
}

/// Downloads every task and returns one outcome per task, in input order.
///
/// At most `max_concurrency` requests are in flight overall and at most
/// [`PER_HOST_LIMIT`] per host. Server errors, timeouts and connection
/// failures are retried with exponential backoff; client errors are final.
/// Tasks whose destination already holds a valid image are not fetched.
pub async fn fetch_all(
    tasks: Vec<FetchTask>,
    max_concurrency: usize,
    retry: RetryConfig,
) -> Result<Vec<FetchOutcome>, FetchError> {
    if max_concurrency == 0 {
        return Err(FetchError::Config("max_concurrency must be positive".into()));
    }
    if retry.max_attempts == 0 {
        return Err(FetchError::Config("max_attempts must be positive".into()));
    }
    let client = reqwest::Client::builder().timeout(retry.request_timeout).build()?;
    let global = Arc::new(Semaphore::new(max_concurrency));
    let hosts: Arc<Mutex<HashMap<String, Arc<Semaphore>>>> = Arc::default();
    let handles: Vec<_> = tasks
        .into_iter()
        .map(|task| {
            let client = client.clone();
            let global = global.clone();
            let hosts = hosts.clone();
            tokio::spawn(async move { fetch_one(task, &client, &global, &hosts, retry).await })
        })
        .collect();
    let mut out = Vec::with_capacity(handles.len());
    for h in handles {
        out.push(h.await.expect("fetch task panicked"));
    }
    Ok(out)
}

enum Attempt {
    Body(Vec<u8>),
    Permanent(String),
    Retryable(FetchStatus, String),
}

async fn fetch_one(
    task: FetchTask,
    client: &reqwest::Client,
    global: &Semaphore,
    hosts: &Mutex<HashMap<String, Arc<Semaphore>>>,
    retry: RetryConfig,
) -> FetchOutcome {
    let mut outcome = FetchOutcome {
        record_id: task.record_id,
        status: FetchStatus::DeadUrl,
        width: None,
        height: None,
        bytes_written: 0,
        attempts: task.attempts,
        detail: None,
    };
    if let Some((w, h)) = existing_valid(&task.dest_path).await {
        outcome.status = FetchStatus::Ok;
        outcome.width = Some(w);
        outcome.height = Some(h);
        return outcome;
    }
    let host = match url::Url::parse(&task.url) {
        Ok(u) if matches!(u.scheme(), "http" | "https") => u.host_str().unwrap_or_default().to_string(),
        Ok(u) => return fail(outcome, FetchStatus::DeadUrl, format!("unsupported scheme {}", u.scheme())),
        Err(e) => return fail(outcome, FetchStatus::DeadUrl, format!("bad url: {e}")),
    };
    let host_limit = hosts
        .lock()
        .await
        .entry(host)
        .or_insert_with(|| Arc::new(Semaphore::new(PER_HOST_LIMIT)))
        .clone();

    let mut last = (FetchStatus::DeadUrl, String::from("attempt budget exhausted"));
    while outcome.attempts < retry.max_attempts {
        if outcome.attempts > task.attempts {
            let shift = (outcome.attempts - task.attempts - 1).min(16);
            tokio::time::sleep(retry.base_backoff * (1u32 << shift)).await;
        }
        outcome.attempts += 1;
        let result = {
            let _host = host_limit.acquire().await.expect("semaphore closed");
            let _slot = global.acquire().await.expect("semaphore closed");
            attempt(client, &task.url).await
        };
        match result {
            Attempt::Body(bytes) => return store(outcome, &task.dest_path, bytes).await,
            Attempt::Permanent(why) => return fail(outcome, FetchStatus::DeadUrl, why),
            Attempt::Retryable(status, why) => {
                debug!(url = %task.url, attempt = outcome.attempts, %why, "retrying");
                last = (status, why);
            }
        }
    }
    fail(outcome, last.0, last.1)
}

async fn attempt(client: &reqwest::Client, url: &str) -> Attempt {
    let resp = match client.get(url).send().await {
        Ok(r) => r,
        Err(e) if e.is_timeout() => return Attempt::Retryable(FetchStatus::Timeout, e.to_string()),
        Err(e) if e.is_builder() => return Attempt::Permanent(e.to_string()),
        Err(e) => return Attempt::Retryable(FetchStatus::DeadUrl, e.to_string()),
    };
    let status = resp.status();
    if status.is_client_error() {
        return Attempt::Permanent(format!("HTTP {status}"));
    }
    if !status.is_success() {
        return Attempt::Retryable(FetchStatus::DeadUrl, format!("HTTP {status}"));
    }
    match resp.bytes().await {
        Ok(b) => Attempt::Body(b.to_vec()),
        Err(e) if e.is_timeout() => Attempt::Retryable(FetchStatus::Timeout, e.to_string()),
        Err(e) => Attempt::Retryable(FetchStatus::DeadUrl, e.to_string()),
    }
}

fn fail(mut outcome: FetchOutcome, status: FetchStatus, detail: String) -> FetchOutcome {
    outcome.status = status;
    outcome.detail = Some(detail);
    outcome
}

async fn store(mut outcome: FetchOutcome, dest: &Path, bytes: Vec<u8>) -> FetchOutcome {
    let (bytes, checked) = tokio::task::spawn_blocking(move || {
        let r = validate_image(&bytes);
        (bytes, r)
    })
    .await
    .expect("validation panicked");
    let (w, h) = match checked {
        Ok(dims) => dims,
        Err(e @ ValidationError::TooSmall { .. }) => return fail(outcome, FetchStatus::TooSmall, e.to_string()),
        Err(e) => return fail(outcome, FetchStatus::DecodeError, e.to_string()),
    };
    if let Err(e) = write_atomic(dest, &bytes).await {
        warn!(path = %dest.display(), error = %e, "write failed");
        return fail(outcome, FetchStatus::DeadUrl, format!("write failed: {e}"));
    }
    outcome.status = FetchStatus::Ok;
    outcome.width = Some(w);
    outcome.height = Some(h);
    outcome.bytes_written = bytes.len() as u64;
    outcome
}

async fn write_atomic(dest: &Path, bytes: &[u8]) -> io::Result<()> {
    if let Some(parent) = dest.parent() {
        tokio::fs::create_dir_all(parent).await?;
    }
    let mut tmp = dest.as_os_str().to_owned();
    tmp.push(format!(".part{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    let mut f = tokio::fs::File::create(&tmp).await?;
    f.write_all(bytes).await?;
    f.sync_all().await?;
    drop(f);
    if let Err(e) = tokio::fs::rename(&tmp, dest).await {
        let _ = tokio::fs::remove_file(&tmp).await;
        return Err(e);
    }
    Ok(())
}

async fn existing_valid(path: &Path) -> Option<(u32, u32)> {
    let bytes = tokio::fs::read(path).await.ok()?;
    tokio::task::spawn_blocking(move || validate_image(&bytes).ok()).await.ok()?
}
