//! Append-only newline-delimited record files and the run manifest.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}:{line}: undecodable record: {message}")]
    Corrupt { path: PathBuf, line: usize, message: String },
    #[error("cannot serialize record: {0}")]
    Serialize(String),
    #[error("{path} mixes run ids: expected {expected}, found {found}")]
    InconsistentRunIds { path: PathBuf, expected: String, found: String },
    #[error("output directory holds run {existing} but this configuration is run {requested}; pass --no-resume or a new --out-dir")]
    ManifestMismatch { existing: String, requested: String },
    #[error("no run manifest in {0}")]
    MissingManifest(PathBuf),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn quarantine_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".quarantine");
    path.with_file_name(name)
}

/// Moves any bytes after the last newline into the quarantine file and
/// truncates the log to whole lines. Returns the number of bytes moved.
fn quarantine_torn_tail(path: &Path) -> Result<usize, StoreError> {
    let mut file = match OpenOptions::new().read(true).write(true).open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(0),
        Err(e) => return Err(io_err(path)(e)),
    };
    let mut body = Vec::new();
    file.read_to_end(&mut body).map_err(io_err(path))?;
    let keep = body.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    if keep == body.len() {
        return Ok(0);
    }
    let qpath = quarantine_path(path);
    let mut q = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&qpath)
        .map_err(io_err(&qpath))?;
    q.write_all(&body[keep..]).map_err(io_err(&qpath))?;
    q.write_all(b"\n").map_err(io_err(&qpath))?;
    file.set_len(keep as u64).map_err(io_err(path))?;
    file.seek(SeekFrom::End(0)).map_err(io_err(path))?;
    tracing::warn!(path = %path.display(), bytes = body.len() - keep, "quarantined torn record line");
    Ok(body.len() - keep)
}

/// Single-writer append-only log; every record is one whole line.
#[derive(Debug)]
pub struct RecordLog {
    path: PathBuf,
    file: Mutex<File>,
}

impl RecordLog {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let path = path.as_ref().to_path_buf();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        quarantine_torn_tail(&path)?;
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io_err(&path))?;
        Ok(Self {
            path,
            file: Mutex::new(file),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append<T: Serialize>(&self, record: &T) -> Result<(), StoreError> {
        self.append_lines(&[to_line(record)?])
    }

    /// Writes the lines with a single call so a block is never interleaved.
    pub fn append_lines(&self, lines: &[String]) -> Result<(), StoreError> {
        if lines.is_empty() {
            return Ok(());
        }
        let mut buf = String::with_capacity(lines.iter().map(|l| l.len() + 1).sum());
        for line in lines {
            debug_assert!(!line.contains('\n'));
            buf.push_str(line);
            buf.push('\n');
        }
        let mut file = self.file.lock().expect("record log lock");
        file.write_all(buf.as_bytes()).map_err(io_err(&self.path))?;
        file.flush().map_err(io_err(&self.path))
    }
}

pub fn to_line<T: Serialize>(record: &T) -> Result<String, StoreError> {
    serde_json::to_string(record).map_err(|e| StoreError::Serialize(e.to_string()))
}

/// Loads every complete line of a record file in write order. A missing file
/// is empty; an unterminated final line is skipped with one notice.
pub fn load_records<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>, StoreError> {
    let path = path.as_ref();
    let body = match fs::read_to_string(path) {
        Ok(b) => b,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(path)(e)),
    };
    let complete = body.rfind('\n').map_or(0, |i| i + 1);
    if complete < body.len() {
        tracing::warn!(path = %path.display(), bytes = body.len() - complete, "skipping torn record line");
    }
    body[..complete]
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| StoreError::Corrupt {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Record wrapper carrying the run id of the run that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stamped<T> {
    pub run_id: String,
    #[serde(flatten)]
    pub inner: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordFile {
    Candidates,
    Scores,
    Selections,
    Records,
    Baseline,
    Budgets,
    Timings,
    Probes,
    Trials,
    Curves,
    Errors,
}

impl RecordFile {
    pub const ALL: [RecordFile; 11] = [
        RecordFile::Candidates,
        RecordFile::Scores,
        RecordFile::Selections,
        RecordFile::Records,
        RecordFile::Baseline,
        RecordFile::Budgets,
        RecordFile::Timings,
        RecordFile::Probes,
        RecordFile::Trials,
        RecordFile::Curves,
        RecordFile::Errors,
    ];

    pub fn file_name(self) -> &'static str {
        match self {
            RecordFile::Candidates => "candidates.jsonl",
            RecordFile::Scores => "scores.jsonl",
            RecordFile::Selections => "selections.jsonl",
            RecordFile::Records => "records.jsonl",
            RecordFile::Baseline => "baseline.jsonl",
            RecordFile::Budgets => "budgets.jsonl",
            RecordFile::Timings => "timings.jsonl",
            RecordFile::Probes => "probes.jsonl",
            RecordFile::Trials => "trials.jsonl",
            RecordFile::Curves => "curves.jsonl",
            RecordFile::Errors => "errors.jsonl",
        }
    }
}

pub const MANIFEST_FILE: &str = "run_manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub config: serde_json::Value,
    pub config_hash: String,
    pub dataset_hash: String,
    pub started_at_unix: u64,
    #[serde(default)]
    pub finished_at_unix: Option<u64>,
    #[serde(default)]
    pub backends: BTreeMap<String, String>,
    pub code_version: String,
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

pub fn read_manifest(dir: &Path) -> Result<Option<RunManifest>, StoreError> {
    let path = dir.join(MANIFEST_FILE);
    match fs::read_to_string(&path) {
        Ok(body) => serde_json::from_str(&body).map(Some).map_err(|e| StoreError::Corrupt {
            path,
            line: 1,
            message: e.to_string(),
        }),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(io_err(&path)(e)),
    }
}

fn write_manifest(dir: &Path, manifest: &RunManifest) -> Result<(), StoreError> {
    let path = dir.join(MANIFEST_FILE);
    let tmp = dir.join(format!("{MANIFEST_FILE}.tmp"));
    let body = serde_json::to_string_pretty(manifest).map_err(|e| StoreError::Serialize(e.to_string()))?;
    fs::write(&tmp, body + "\n").map_err(io_err(&tmp))?;
    fs::rename(&tmp, &path).map_err(io_err(&path))
}

/// The record files of one run directory.
#[derive(Debug)]
pub struct RunStore {
    dir: PathBuf,
    manifest: Mutex<RunManifest>,
    logs: Mutex<HashMap<RecordFile, Arc<RecordLog>>>,
}

impl RunStore {
    /// Opens `dir` for writing under `manifest`. With `resume`, an existing
    /// manifest must carry the same run id. Without it, previous files are
    /// moved into a `superseded-<unix time>` subdirectory.
    pub fn create(dir: impl AsRef<Path>, mut manifest: RunManifest, resume: bool) -> Result<Self, StoreError> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        if let Some(existing) = read_manifest(&dir)? {
            if resume {
                if existing.run_id != manifest.run_id {
                    return Err(StoreError::ManifestMismatch {
                        existing: existing.run_id,
                        requested: manifest.run_id,
                    });
                }
                manifest.started_at_unix = existing.started_at_unix;
                let mut backends = existing.backends;
                backends.append(&mut manifest.backends);
                manifest.backends = backends;
            } else {
                supersede(&dir)?;
            }
        }
        write_manifest(&dir, &manifest)?;
        Ok(Self {
            dir,
            manifest: Mutex::new(manifest),
            logs: Mutex::new(HashMap::new()),
        })
    }

    /// Opens an existing run directory for reading and appending.
    pub fn open_existing(dir: impl AsRef<Path>) -> Result<Self, StoreError> {
        let dir = dir.as_ref().to_path_buf();
        let manifest = read_manifest(&dir)?.ok_or_else(|| StoreError::MissingManifest(dir.clone()))?;
        Ok(Self {
            dir,
            manifest: Mutex::new(manifest),
            logs: Mutex::new(HashMap::new()),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn run_id(&self) -> String {
        self.manifest.lock().expect("manifest lock").run_id.clone()
    }

    pub fn manifest(&self) -> RunManifest {
        self.manifest.lock().expect("manifest lock").clone()
    }

    pub fn path(&self, file: RecordFile) -> PathBuf {
        self.dir.join(file.file_name())
    }

    fn log(&self, file: RecordFile) -> Result<Arc<RecordLog>, StoreError> {
        let mut logs = self.logs.lock().expect("logs lock");
        if let Some(log) = logs.get(&file) {
            return Ok(log.clone());
        }
        let log = Arc::new(RecordLog::open(self.path(file))?);
        logs.insert(file, log.clone());
        Ok(log)
    }

    pub fn stamp<T: Serialize>(&self, record: &T) -> Result<String, StoreError> {
        to_line(&Stamped {
            run_id: self.run_id(),
            inner: record,
        })
    }

    pub fn append<T: Serialize>(&self, file: RecordFile, record: &T) -> Result<(), StoreError> {
        let line = self.stamp(record)?;
        self.log(file)?.append_lines(&[line])
    }

    pub fn append_lines(&self, file: RecordFile, lines: &[String]) -> Result<(), StoreError> {
        self.log(file)?.append_lines(lines)
    }

    /// Loads a record file; every line must belong to this run.
    pub fn load<T: DeserializeOwned>(&self, file: RecordFile) -> Result<Vec<T>, StoreError> {
        let path = self.path(file);
        let expected = self.run_id();
        load_records::<Stamped<T>>(&path)?
            .into_iter()
            .map(|s| {
                if s.run_id == expected {
                    Ok(s.inner)
                } else {
                    Err(StoreError::InconsistentRunIds {
                        path: path.clone(),
                        expected: expected.clone(),
                        found: s.run_id,
                    })
                }
            })
            .collect()
    }

    pub fn record_backend(&self, role: &str, id: &str) -> Result<(), StoreError> {
        let mut m = self.manifest.lock().expect("manifest lock");
        m.backends.insert(role.to_string(), id.to_string());
        write_manifest(&self.dir, &m)
    }

    pub fn finish(&self) -> Result<(), StoreError> {
        let mut m = self.manifest.lock().expect("manifest lock");
        m.finished_at_unix = Some(unix_now());
        write_manifest(&self.dir, &m)
    }
}

fn supersede(dir: &Path) -> Result<(), StoreError> {
    let target = dir.join(format!("superseded-{}", unix_now()));
    fs::create_dir_all(&target).map_err(io_err(&target))?;
    let mut names: Vec<String> = RecordFile::ALL.iter().map(|f| f.file_name().to_string()).collect();
    names.extend(RecordFile::ALL.iter().map(|f| format!("{}.quarantine", f.file_name())));
    names.push(MANIFEST_FILE.to_string());
    for name in names {
        let from = dir.join(&name);
        if from.exists() {
            let to = target.join(&name);
            fs::rename(&from, &to).map_err(io_err(&from))?;
        }
    }
    tracing::info!(dir = %target.display(), "moved previous run files aside");
    Ok(())
}

/// Reorders per-item blocks so each record file is written in item order,
/// whatever order concurrent workers finish in. Every item must commit each
/// file exactly once, possibly with an empty block.
#[derive(Debug)]
pub struct Sequencer<'a> {
    store: &'a RunStore,
    slots: Mutex<BTreeMap<RecordFile, Slot>>,
}

#[derive(Debug, Default)]
struct Slot {
    next: usize,
    pending: BTreeMap<usize, Vec<String>>,
}

impl<'a> Sequencer<'a> {
    pub fn new(store: &'a RunStore) -> Self {
        Self {
            store,
            slots: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn store(&self) -> &RunStore {
        self.store
    }

    pub fn commit(&self, file: RecordFile, index: usize, lines: Vec<String>) -> Result<(), StoreError> {
        let mut slots = self.slots.lock().expect("sequencer lock");
        let slot = slots.entry(file).or_default();
        slot.pending.insert(index, lines);
        while let Some(block) = slot.pending.remove(&slot.next) {
            self.store.append_lines(file, &block)?;
            slot.next += 1;
        }
        Ok(())
    }

    /// Items still waiting on an earlier item, per file.
    pub fn stalled(&self) -> usize {
        self.slots.lock().expect("sequencer lock").values().map(|s| s.pending.len()).sum()
    }
}

/// One item's view of a [`Sequencer`]; blocks it never committed are
/// committed empty on drop so later items are not held back.
pub struct ItemSink<'s, 'a> {
    seq: &'s Sequencer<'a>,
    index: usize,
    files: &'static [RecordFile],
    done: BTreeSet<RecordFile>,
}

impl<'s, 'a> ItemSink<'s, 'a> {
    pub fn new(seq: &'s Sequencer<'a>, index: usize, files: &'static [RecordFile]) -> Self {
        Self {
            seq,
            index,
            files,
            done: BTreeSet::new(),
        }
    }

    pub fn store(&self) -> &RunStore {
        self.seq.store
    }

    pub fn commit<T: Serialize>(&mut self, file: RecordFile, records: &[T]) -> Result<(), StoreError> {
        let lines = records.iter().map(|r| self.seq.store.stamp(r)).collect::<Result<Vec<_>, _>>()?;
        self.commit_lines(file, lines)
    }

    pub fn commit_lines(&mut self, file: RecordFile, lines: Vec<String>) -> Result<(), StoreError> {
        debug_assert!(self.files.contains(&file), "{file:?} not declared for this sink");
        if !self.done.insert(file) {
            return self.seq.store.append_lines(file, &lines);
        }
        self.seq.commit(file, self.index, lines)
    }
}

impl Drop for ItemSink<'_, '_> {
    fn drop(&mut self) {
        for &file in self.files {
            if !self.done.contains(&file) {
                if let Err(e) = self.seq.commit(file, self.index, Vec::new()) {
                    tracing::error!(error = %e, ?file, "failed to release record slot");
                }
            }
        }
    }
}
