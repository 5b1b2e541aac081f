//! Review state: candidate pairs plus an append-only verdict log with
//! periodic snapshots.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use nnaug_core::dedup::{leakage_report, CandidatePair, DedupError, LeakageReport, SplitSpec, Verdict};
use nnaug_core::jsonl;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PAIRS_FILE: &str = "pairs.jsonl";
pub const SPLITS_FILE: &str = "splits.json";
pub const VERDICT_LOG: &str = "verdicts.jsonl";
pub const SNAPSHOT_FILE: &str = "snapshot.json";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("unknown pair {0}")]
    UnknownPair(String),
    #[error("verdict must be true_duplicate or not_duplicate")]
    InvalidVerdict,
    #[error("verdict log is corrupt at line {line}: {reason}")]
    CorruptLog { line: usize, reason: String },
    #[error("{path}: {reason}")]
    BadFile { path: PathBuf, reason: String },
    #[error(transparent)]
    Report(#[from] DedupError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictEvent {
    pub seq: u64,
    pub pair_key: String,
    pub verdict: Verdict,
    pub reviewer: String,
    pub timestamp: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitsFile {
    #[serde(default)]
    pub augmentation_size: Option<u64>,
    pub splits: Vec<SplitSpec>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Snapshot {
    seq: u64,
    verdicts: Vec<VerdictEvent>,
}

pub struct VerdictStore {
    dir: PathBuf,
    pairs: Vec<CandidatePair>,
    by_key: HashMap<String, usize>,
    splits: SplitsFile,
    latest: HashMap<String, VerdictEvent>,
    seq: u64,
    log: File,
    snapshot_every: u64,
    since_snapshot: u64,
}

fn bad_file(path: &Path, reason: impl ToString) -> StoreError {
    StoreError::BadFile {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

impl VerdictStore {
    /// Opens the store under `dir`, replaying the snapshot and the verdict
    /// log. A final log line cut short by a crash is discarded.
    pub fn open(dir: impl AsRef<Path>, snapshot_every: u64) -> Result<Self, StoreError> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        let pairs_path = dir.join(PAIRS_FILE);
        let raw: Vec<CandidatePair> = if pairs_path.exists() {
            jsonl::read(&pairs_path).map_err(|e| bad_file(&pairs_path, e))?
        } else {
            Vec::new()
        };
        let splits_path = dir.join(SPLITS_FILE);
        let splits = if splits_path.exists() {
            let text = fs::read_to_string(&splits_path)?;
            serde_json::from_str(&text).map_err(|e| bad_file(&splits_path, e))?
        } else {
            SplitsFile::default()
        };

        let mut store = Self {
            log: open_log(&dir.join(VERDICT_LOG))?,
            dir,
            pairs: Vec::new(),
            by_key: HashMap::new(),
            splits,
            latest: HashMap::new(),
            seq: 0,
            snapshot_every: snapshot_every.max(1),
            since_snapshot: 0,
        };
        store.add_pairs_in_memory(raw);

        let snap_path = store.dir.join(SNAPSHOT_FILE);
        if snap_path.exists() {
            let text = fs::read_to_string(&snap_path)?;
            let snap: Snapshot = serde_json::from_str(&text).map_err(|e| bad_file(&snap_path, e))?;
            store.seq = snap.seq;
            for ev in snap.verdicts {
                store.latest.insert(ev.pair_key.clone(), ev);
            }
        }
        for ev in replay_log(&store.dir.join(VERDICT_LOG))? {
            if ev.seq <= store.seq {
                continue;
            }
            store.seq = ev.seq;
            store.since_snapshot += 1;
            store.latest.insert(ev.pair_key.clone(), ev);
        }
        Ok(store)
    }

    fn add_pairs_in_memory(&mut self, pairs: Vec<CandidatePair>) -> usize {
        let mut added = 0;
        for mut p in pairs {
            if self.by_key.contains_key(&p.pair_key) {
                continue;
            }
            p.verdict = Verdict::Pending;
            p.reviewer = None;
            p.reviewed_at = None;
            self.by_key.insert(p.pair_key.clone(), self.pairs.len());
            self.pairs.push(p);
            added += 1;
        }
        added
    }

    /// Adds scan results; pairs whose key is already known keep their verdicts.
    pub fn add_pairs(&mut self, pairs: Vec<CandidatePair>) -> Result<usize, StoreError> {
        let added = self.add_pairs_in_memory(pairs);
        if added > 0 {
            let path = self.dir.join(PAIRS_FILE);
            let tmp = path.with_extension("jsonl.tmp");
            jsonl::write(&tmp, &self.pairs)?;
            File::open(&tmp)?.sync_all()?;
            fs::rename(&tmp, &path)?;
        }
        Ok(added)
    }

    pub fn set_splits(&mut self, splits: SplitsFile) -> Result<(), StoreError> {
        let path = self.dir.join(SPLITS_FILE);
        write_atomic(&path, serde_json::to_string_pretty(&splits).expect("serializable").as_bytes())?;
        self.splits = splits;
        Ok(())
    }

    pub fn seq(&self) -> u64 {
        self.seq
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    fn with_verdict(&self, p: &CandidatePair) -> CandidatePair {
        let mut p = p.clone();
        if let Some(ev) = self.latest.get(&p.pair_key) {
            p.verdict = ev.verdict;
            p.reviewer = Some(ev.reviewer.clone());
            p.reviewed_at = Some(ev.timestamp.clone());
        }
        p
    }

    pub fn pair(&self, key: &str) -> Option<CandidatePair> {
        self.by_key.get(key).map(|&i| self.with_verdict(&self.pairs[i]))
    }

    /// Up to `limit` pairs currently carrying `status`, in scan order.
    pub fn pairs_with(&self, status: Verdict, limit: usize) -> Vec<CandidatePair> {
        self.pairs
            .iter()
            .map(|p| self.with_verdict(p))
            .filter(|p| p.verdict == status)
            .take(limit)
            .collect()
    }

    pub fn all_pairs(&self) -> Vec<CandidatePair> {
        self.pairs.iter().map(|p| self.with_verdict(p)).collect()
    }

    /// Records a verdict. The event is on disk before this returns; posting
    /// the verdict a pair already has from the same reviewer changes nothing.
    pub fn post(&mut self, key: &str, verdict: Verdict, reviewer: &str, timestamp: String) -> Result<CandidatePair, StoreError> {
        if verdict == Verdict::Pending {
            return Err(StoreError::InvalidVerdict);
        }
        let &i = self.by_key.get(key).ok_or_else(|| StoreError::UnknownPair(key.to_string()))?;
        if let Some(ev) = self.latest.get(key) {
            if ev.verdict == verdict && ev.reviewer == reviewer {
                return Ok(self.with_verdict(&self.pairs[i]));
            }
        }
        let ev = VerdictEvent {
            seq: self.seq + 1,
            pair_key: key.to_string(),
            verdict,
            reviewer: reviewer.to_string(),
            timestamp,
        };
        let mut line = serde_json::to_vec(&ev).expect("serializable");
        line.push(b'\n');
        self.log.write_all(&line)?;
        self.log.sync_data()?;
        self.seq = ev.seq;
        self.latest.insert(key.to_string(), ev);
        self.since_snapshot += 1;
        if self.since_snapshot >= self.snapshot_every {
            self.snapshot()?;
        }
        Ok(self.with_verdict(&self.pairs[i]))
    }

    pub fn snapshot(&mut self) -> Result<(), StoreError> {
        let mut verdicts: Vec<VerdictEvent> = self.latest.values().cloned().collect();
        verdicts.sort_by_key(|e| e.seq);
        let snap = Snapshot { seq: self.seq, verdicts };
        write_atomic(&self.dir.join(SNAPSHOT_FILE), &serde_json::to_vec(&snap).expect("serializable"))?;
        self.since_snapshot = 0;
        Ok(())
    }

    pub fn splits(&self) -> &SplitsFile {
        &self.splits
    }

    pub fn report(&self) -> Result<LeakageReport, StoreError> {
        Ok(leakage_report(&self.all_pairs(), &self.splits.splits, self.splits.augmentation_size)?)
    }
}

fn open_log(path: &Path) -> io::Result<File> {
    OpenOptions::new().create(true).append(true).read(true).open(path)
}

/// Reads every complete event. An unparsable final line without a trailing
/// newline is a torn write and is cut off; anything else malformed is fatal.
fn replay_log(path: &Path) -> Result<Vec<VerdictEvent>, StoreError> {
    let mut file = OpenOptions::new().read(true).write(true).open(path)?;
    let mut reader = BufReader::new(&mut file);
    let mut events = Vec::new();
    let mut good_len = 0u64;
    let mut buf = Vec::new();
    let mut line_no = 0;
    loop {
        buf.clear();
        let n = reader.read_until(b'\n', &mut buf)?;
        if n == 0 {
            break;
        }
        line_no += 1;
        let complete = buf.ends_with(b"\n");
        let text = String::from_utf8_lossy(&buf);
        if text.trim().is_empty() {
            good_len += n as u64;
            continue;
        }
        if !complete {
            tracing::warn!(line = line_no, "dropping torn final verdict line");
            drop(reader);
            file.set_len(good_len)?;
            file.sync_data()?;
            return Ok(events);
        }
        let ev = serde_json::from_str::<VerdictEvent>(text.trim_end()).map_err(|e| StoreError::CorruptLog {
            line: line_no,
            reason: e.to_string(),
        })?;
        events.push(ev);
        good_len += n as u64;
    }
    Ok(events)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let mut f = File::create(&tmp)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    drop(f);
    fs::rename(&tmp, path)?;
    if let Some(parent) = path.parent() {
        if let Ok(d) = File::open(parent) {
            let _ = d.sync_all();
        }
    }
    Ok(())
}
