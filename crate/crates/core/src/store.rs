//! Revision-keyed record storage.
//!
//! Layout: `<data_dir>/revisions/<revision_label>/<created_at>.record`, one
//! pretty-printed JSON document per record. Records are written to a hidden
//! temporary file and renamed into place, so readers never observe a partial
//! record; leftover temporaries are ignored.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::experiment::{ExperimentConfig, TestExecutionResult, TestSummary};
use crate::harness::TestId;
use crate::probe::ProbeDescriptor;
use crate::sampler::BaselineProfile;

pub const FORMAT_VERSION: u32 = 1;
pub const DEFAULT_DATA_DIR: &str = ".manai";
pub const DATA_DIR_ENV: &str = "MANAI_DATA_DIR";
const RECORD_EXT: &str = "record";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RevisionRecord {
    pub format_version: u32,
    pub revision_label: String,
    pub created_at: DateTime<Utc>,
    /// SHA-256 over the experiment configuration, excluding the revision label.
    pub config_digest: String,
    pub config: ExperimentConfig,
    pub probe: ProbeDescriptor,
    pub baseline: Option<BaselineProfile>,
    pub summaries: BTreeMap<TestId, TestSummary>,
    pub results: BTreeMap<TestId, Vec<TestExecutionResult>>,
}

impl RevisionRecord {
    pub fn validate(&self) -> Result<(), StoreError> {
        validate_label(&self.revision_label)?;
        if self.format_version != FORMAT_VERSION {
            return Err(StoreError::Invalid(format!(
                "format_version {} (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        if !self.summaries.keys().eq(self.results.keys()) {
            return Err(StoreError::Invalid("summaries and results cover different tests".into()));
        }
        let finite = |x: f64| x.is_finite();
        for summary in self.summaries.values() {
            let all = summary.domains.values().flat_map(|d| {
                [d.energy_j, d.power_w]
                    .into_iter()
                    .flat_map(|s| [s.mean, s.median, s.min, s.max, s.stddev])
            });
            if !all.chain([summary.mean_duration_ns]).all(finite) {
                return Err(StoreError::Invalid(format!("non-finite statistic for {}", summary.test)));
            }
        }
        for r in self.results.values().flatten() {
            let values = r.energy_j.values().chain(r.mean_power_w.values());
            let samples = r.samples.iter().flat_map(|s| s.domains.values()).flat_map(|d| [d.joules, d.watts]);
            if !values.copied().chain(samples).all(finite) {
                return Err(StoreError::Invalid(format!("non-finite measurement for {}", r.test)));
            }
        }
        Ok(())
    }

    /// The on-disk (and machine export) form: pretty JSON with a trailing newline.
    pub fn to_document(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("record serializes");
        s.push('\n');
        s
    }

    pub fn from_document(text: &str) -> Result<Self, String> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| e.to_string())?;
        match value.get("format_version").and_then(|v| v.as_u64()) {
            Some(v) if v == u64::from(FORMAT_VERSION) => {}
            Some(v) => return Err(format!("unsupported format_version {v}")),
            None => return Err("missing format_version".into()),
        }
        serde_json::from_value(value).map_err(|e| e.to_string())
    }

    pub fn file_name(&self) -> String {
        format!("{}.{RECORD_EXT}", self.created_at.format("%Y%m%dT%H%M%S%.9fZ"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryPoint {
    pub revision_label: String,
    pub created_at: DateTime<Utc>,
    pub summary: TestSummary,
}

/// One test's summaries across stored records, oldest first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistorySeries {
    pub test: TestId,
    pub points: Vec<HistoryPoint>,
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("unknown revision `{0}`")]
    UnknownRevision(String),
    #[error("invalid revision label `{0}`")]
    InvalidLabel(String),
    #[error("invalid record: {0}")]
    Invalid(String),
    #[error("record {} already exists", .0.display())]
    AlreadyExists(PathBuf),
    #[error("corrupt record {}: {message}", path.display())]
    Corrupt { path: PathBuf, message: String },
    #[error("data directory is locked by process {pid} ({})", path.display())]
    Locked { pid: String, path: PathBuf },
    #[error("permission denied: {}", .0.display())]
    PermissionDenied(PathBuf),
    #[error("storage full writing {}", .0.display())]
    StorageFull(PathBuf),
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

fn io_err(path: &Path, source: io::Error) -> StoreError {
    match source.kind() {
        io::ErrorKind::PermissionDenied => StoreError::PermissionDenied(path.to_owned()),
        io::ErrorKind::StorageFull => StoreError::StorageFull(path.to_owned()),
        _ => StoreError::Io {
            path: path.to_owned(),
            source,
        },
    }
}

/// Labels become directory names: no separators, no leading dot, no whitespace.
pub fn validate_label(label: &str) -> Result<(), StoreError> {
    let bad = label.is_empty()
        || label.starts_with('.')
        || label.chars().any(|c| c == '/' || c == '\\' || c.is_whitespace() || c.is_control());
    if bad {
        Err(StoreError::InvalidLabel(label.to_owned()))
    } else {
        Ok(())
    }
}

/// Exclusive experiment lock; removed on drop.
#[derive(Debug)]
pub struct StoreLock {
    path: PathBuf,
}

impl Drop for StoreLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Clone, Debug)]
pub struct Store {
    root: PathBuf,
}

impl Store {
    pub fn open(data_dir: impl Into<PathBuf>) -> Self {
        Self { root: data_dir.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn revisions_dir(&self) -> PathBuf {
        self.root.join("revisions")
    }

    pub fn lock_path(&self) -> PathBuf {
        self.root.join("lock")
    }

    /// Takes the single-writer lock, clearing it first if its holder is gone.
    pub fn lock(&self) -> Result<StoreLock, StoreError> {
        fs::create_dir_all(&self.root).map_err(|e| io_err(&self.root, e))?;
        let path = self.lock_path();
        for _ in 0..2 {
            match OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(mut f) => {
                    write!(f, "{}", std::process::id()).map_err(|e| io_err(&path, e))?;
                    return Ok(StoreLock { path });
                }
                Err(e) if e.kind() == io::ErrorKind::AlreadyExists => {
                    let pid = fs::read_to_string(&path).unwrap_or_default().trim().to_owned();
                    if holder_alive(&pid) {
                        return Err(StoreError::Locked { pid, path });
                    }
                    log::warn!("removing stale lock {} (pid {pid:?})", path.display());
                    let _ = fs::remove_file(&path);
                }
                Err(e) => return Err(io_err(&path, e)),
            }
        }
        Err(StoreError::Locked {
            pid: "unknown".into(),
            path,
        })
    }

    /// Writes `record` atomically. Records are never overwritten.
    pub fn save(&self, _lock: &StoreLock, record: &RevisionRecord) -> Result<PathBuf, StoreError> {
        record.validate()?;
        let dir = self.revisions_dir().join(&record.revision_label);
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        let name = record.file_name();
        let dest = dir.join(&name);
        if dest.exists() {
            return Err(StoreError::AlreadyExists(dest));
        }
        let tmp = dir.join(format!(".{name}.{}.tmp", std::process::id()));
        let write = || -> io::Result<()> {
            let mut f = File::create(&tmp)?;
            f.write_all(record.to_document().as_bytes())?;
            f.sync_all()
        };
        if let Err(e) = write() {
            let _ = fs::remove_file(&tmp);
            return Err(io_err(&tmp, e));
        }
        fs::rename(&tmp, &dest).map_err(|e| {
            let _ = fs::remove_file(&tmp);
            io_err(&dest, e)
        })?;
        if let Ok(d) = File::open(&dir) {
            let _ = d.sync_all();
        }
        Ok(dest)
    }

    fn read_record(path: &Path) -> Result<RevisionRecord, StoreError> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        RevisionRecord::from_document(&text).map_err(|message| StoreError::Corrupt {
            path: path.to_owned(),
            message,
        })
    }

    fn record_files(dir: &Path) -> Result<Vec<PathBuf>, StoreError> {
        let entries = match fs::read_dir(dir) {
            Ok(e) => e,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(io_err(dir, e)),
        };
        let mut files = Vec::new();
        for entry in entries {
            let entry = entry.map_err(|e| io_err(dir, e))?;
            let path = entry.path();
            let name = entry.file_name();
            let name = name.to_string_lossy();
            if !name.starts_with('.') && path.extension().is_some_and(|x| x == RECORD_EXT) {
                files.push(path);
            }
        }
        files.sort();
        Ok(files)
    }

    /// Every stored label, sorted.
    pub fn labels(&self) -> Result<Vec<String>, StoreError> {
        let dir = self.revisions_dir();
        let entries = match fs::read_dir(&dir) {
            Ok(e) => e,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(io_err(&dir, e)),
        };
        let mut labels = Vec::new();
        for entry in entries {
            let entry = entry.map_err(|e| io_err(&dir, e))?;
            if entry.path().is_dir() {
                if let Ok(label) = entry.file_name().into_string() {
                    if validate_label(&label).is_ok() {
                        labels.push(label);
                    }
                }
            }
        }
        labels.sort();
        Ok(labels)
    }

    /// All records saved under `label`, oldest first.
    pub fn load(&self, label: &str) -> Result<Vec<RevisionRecord>, StoreError> {
        validate_label(label).map_err(|_| StoreError::UnknownRevision(label.to_owned()))?;
        let files = Self::record_files(&self.revisions_dir().join(label))?;
        if files.is_empty() {
            return Err(StoreError::UnknownRevision(label.to_owned()));
        }
        let mut records = files.iter().map(|p| Self::read_record(p)).collect::<Result<Vec<_>, _>>()?;
        records.sort_by_key(|r| r.created_at);
        Ok(records)
    }

    /// The newest record saved under `label`.
    pub fn latest(&self, label: &str) -> Result<RevisionRecord, StoreError> {
        Ok(self.load(label)?.pop().expect("load returns at least one record"))
    }

    /// Every record in the store ordered by creation time.
    pub fn all_records(&self) -> Result<Vec<RevisionRecord>, StoreError> {
        let mut all = Vec::new();
        for label in self.labels()? {
            for path in Self::record_files(&self.revisions_dir().join(&label))? {
                all.push(Self::read_record(&path)?);
            }
        }
        all.sort_by(|a, b| {
            a.created_at
                .cmp(&b.created_at)
                .then_with(|| a.revision_label.cmp(&b.revision_label))
        });
        Ok(all)
    }

    /// The most recently created record, if any.
    pub fn newest(&self) -> Result<Option<RevisionRecord>, StoreError> {
        Ok(self.all_records()?.pop())
    }

    /// `test`'s summaries across all records, oldest first, keeping the last `limit`.
    pub fn history(&self, test: &TestId, limit: Option<usize>) -> Result<HistorySeries, StoreError> {
        let mut points: Vec<HistoryPoint> = self
            .all_records()?
            .into_iter()
            .filter_map(|mut r| {
                r.summaries.remove(test).map(|summary| HistoryPoint {
                    revision_label: r.revision_label,
                    created_at: r.created_at,
                    summary,
                })
            })
            .collect();
        if let Some(limit) = limit {
            let skip = points.len().saturating_sub(limit);
            points.drain(..skip);
        }
        Ok(HistorySeries {
            test: test.clone(),
            points,
        })
    }
}

fn holder_alive(pid: &str) -> bool {
    let Ok(pid) = pid.parse::<u32>() else {
        return false;
    };
    let proc_root = Path::new("/proc");
    if !proc_root.is_dir() {
        return true;
    }
    proc_root.join(pid.to_string()).exists()
}
