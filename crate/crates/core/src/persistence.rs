//! Append-only storage of accepted evaluations and decision-log entries.
//!
//! [`JsonlStore`] keeps two JSON Lines files in a run directory,
//! `results.jsonl` and `decisions.jsonl`. Lines are only ever appended. On
//! open the existing files are scanned so record ids continue where they
//! left off.

use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::reasoning::{LogEntry, LogSink};

pub const RESULTS_FILE: &str = "results.jsonl";
pub const DECISIONS_FILE: &str = "decisions.jsonl";

#[derive(Debug, Error)]
pub enum StorageError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("schema error: {0}")]
    Schema(String),
}

impl StorageError {
    fn io(path: &Path, source: io::Error) -> Self {
        StorageError::Io { path: path.to_path_buf(), source }
    }
}

type Result<T, E = StorageError> = std::result::Result<T, E>;

/// An accepted evaluation of one genome, before an id is assigned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NewResultRecord {
    pub run_id: String,
    pub generation: u32,
    pub job_id: String,
    pub attempt: u32,
    pub worker_id: String,
    pub genome: Vec<f64>,
    pub objectives: Vec<f64>,
    pub fitness: f64,
    pub feasible: bool,
    pub violation: f64,
    pub sim_time_ms: u64,
}

/// One line of `results.jsonl`. Field order is the on-disk key order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub record_id: u64,
    pub run_id: String,
    pub generation: u32,
    pub job_id: String,
    pub attempt: u32,
    pub worker_id: String,
    pub genome: Vec<f64>,
    pub objectives: Vec<f64>,
    pub fitness: f64,
    pub feasible: bool,
    pub violation: f64,
    pub sim_time_ms: u64,
}

impl ResultRecord {
    fn from_new(record_id: u64, r: NewResultRecord) -> Self {
        Self {
            record_id,
            run_id: r.run_id,
            generation: r.generation,
            job_id: r.job_id,
            attempt: r.attempt,
            worker_id: r.worker_id,
            genome: r.genome,
            objectives: r.objectives,
            fitness: r.fitness,
            feasible: r.feasible,
            violation: r.violation,
            sim_time_ms: r.sim_time_ms,
        }
    }
}

fn validate(r: &NewResultRecord) -> Result<()> {
    if r.violation.is_nan() || r.violation < 0.0 {
        return Err(StorageError::Schema("violation must be >= 0".into()));
    }
    if r.genome.is_empty() || r.objectives.is_empty() {
        return Err(StorageError::Schema("genome and objectives must be non-empty".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RecordFilter {
    pub run_id: Option<String>,
    pub generation: Option<u32>,
    pub job_id: Option<String>,
    pub feasible: Option<bool>,
}

impl RecordFilter {
    pub fn generation(generation: u32) -> Self {
        Self { generation: Some(generation), ..Default::default() }
    }

    pub fn matches(&self, r: &ResultRecord) -> bool {
        self.run_id.as_ref().is_none_or(|v| *v == r.run_id)
            && self.generation.is_none_or(|v| v == r.generation)
            && self.job_id.as_ref().is_none_or(|v| *v == r.job_id)
            && self.feasible.is_none_or(|v| v == r.feasible)
    }
}

/// Storage backend contract. Implementations are single-writer.
pub trait Storage: LogSink {
    /// Assigns the next record id, appends, and returns the id.
    fn insert(&mut self, record: NewResultRecord) -> Result<u64>;

    /// Records matching every present filter field, by record id.
    fn query(&mut self, filter: &RecordFilter) -> Result<Vec<ResultRecord>>;

    fn log_entries(&mut self) -> Result<Vec<LogEntry>>;

    fn record_count(&self) -> u64;

    /// Pushes pending appends to durable storage.
    fn sync(&mut self) -> Result<()> {
        Ok(())
    }

    /// Validates an untyped record (e.g. from an external writer) and inserts it.
    fn insert_value(&mut self, value: &serde_json::Value) -> Result<u64> {
        let record: NewResultRecord = serde_json::from_value(value.clone())
            .map_err(|e| StorageError::Schema(e.to_string()))?;
        self.insert(record)
    }
}

/// In-memory backend, used for throwaway runs and tests.
#[derive(Debug, Default)]
pub struct MemoryStore {
    records: Vec<ResultRecord>,
    entries: Vec<LogEntry>,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }
}

impl LogSink for MemoryStore {
    fn append_log_entry(&mut self, entry: &LogEntry) -> Result<u64> {
        check_sequence(self.entries.last().map(|e| e.sequence_no), entry)?;
        self.entries.push(entry.clone());
        Ok(entry.sequence_no)
    }
}

impl Storage for MemoryStore {
    fn insert(&mut self, record: NewResultRecord) -> Result<u64> {
        validate(&record)?;
        let id = self.records.len() as u64 + 1;
        self.records.push(ResultRecord::from_new(id, record));
        Ok(id)
    }

    fn query(&mut self, filter: &RecordFilter) -> Result<Vec<ResultRecord>> {
        Ok(self.records.iter().filter(|r| filter.matches(r)).cloned().collect())
    }

    fn log_entries(&mut self) -> Result<Vec<LogEntry>> {
        Ok(self.entries.clone())
    }

    fn record_count(&self) -> u64 {
        self.records.len() as u64
    }
}

fn check_sequence(last: Option<u64>, entry: &LogEntry) -> Result<()> {
    let expected = last.unwrap_or(0) + 1;
    if entry.sequence_no != expected {
        return Err(StorageError::Schema(format!(
            "log sequence_no {} out of order, expected {expected}",
            entry.sequence_no
        )));
    }
    Ok(())
}

/// JSON Lines store in a directory.
#[derive(Debug)]
pub struct JsonlStore {
    dir: PathBuf,
    results: BufWriter<File>,
    decisions: BufWriter<File>,
    next_record_id: u64,
    last_sequence_no: Option<u64>,
    buffered: bool,
}

impl JsonlStore {
    /// Opens (creating if needed) the store in `dir`, flushing every append.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        Self::open_with(dir, false)
    }

    /// With `buffered = true`, appends sit in memory until [`close`](Self::close),
    /// a query, or drop.
    pub fn open_with(dir: impl AsRef<Path>, buffered: bool) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        std::fs::create_dir_all(&dir).map_err(|e| StorageError::io(&dir, e))?;
        let results_path = dir.join(RESULTS_FILE);
        let decisions_path = dir.join(DECISIONS_FILE);

        let existing: Vec<ResultRecord> = read_jsonl(&results_path)?;
        let next_record_id = existing.iter().map(|r| r.record_id).max().unwrap_or(0) + 1;
        let entries: Vec<LogEntry> = read_jsonl(&decisions_path)?;
        let last_sequence_no = entries.iter().map(|e| e.sequence_no).max();

        let open = |p: &Path| {
            OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)
                .map(BufWriter::new)
                .map_err(|e| StorageError::io(p, e))
        };
        Ok(Self {
            results: open(&results_path)?,
            decisions: open(&decisions_path)?,
            dir,
            next_record_id,
            last_sequence_no,
            buffered,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn results_path(&self) -> PathBuf {
        self.dir.join(RESULTS_FILE)
    }

    pub fn decisions_path(&self) -> PathBuf {
        self.dir.join(DECISIONS_FILE)
    }

    pub fn next_record_id(&self) -> u64 {
        self.next_record_id
    }

    pub fn flush(&mut self) -> Result<()> {
        let rp = self.results_path();
        let dp = self.decisions_path();
        self.results.flush().map_err(|e| StorageError::io(&rp, e))?;
        self.decisions.flush().map_err(|e| StorageError::io(&dp, e))
    }

    /// Flushes and syncs both files to disk.
    pub fn close(mut self) -> Result<()> {
        self.sync()
    }

    fn write_line<T: Serialize>(
        writer: &mut BufWriter<File>,
        path: &Path,
        value: &T,
        buffered: bool,
    ) -> Result<()> {
        let mut line = serde_json::to_vec(value).map_err(|e| StorageError::Schema(e.to_string()))?;
        line.push(b'\n');
        writer.write_all(&line).map_err(|e| StorageError::io(path, e))?;
        if !buffered {
            writer.flush().map_err(|e| StorageError::io(path, e))?;
        }
        Ok(())
    }
}

impl LogSink for JsonlStore {
    fn append_log_entry(&mut self, entry: &LogEntry) -> Result<u64> {
        check_sequence(self.last_sequence_no, entry)?;
        let path = self.decisions_path();
        Self::write_line(&mut self.decisions, &path, entry, self.buffered)?;
        self.last_sequence_no = Some(entry.sequence_no);
        Ok(entry.sequence_no)
    }
}

impl Storage for JsonlStore {
    fn insert(&mut self, record: NewResultRecord) -> Result<u64> {
        validate(&record)?;
        let id = self.next_record_id;
        let path = self.results_path();
        Self::write_line(
            &mut self.results,
            &path,
            &ResultRecord::from_new(id, record),
            self.buffered,
        )?;
        self.next_record_id += 1;
        Ok(id)
    }

    fn query(&mut self, filter: &RecordFilter) -> Result<Vec<ResultRecord>> {
        self.flush()?;
        let mut records: Vec<ResultRecord> = read_jsonl(&self.results_path())?;
        records.retain(|r| filter.matches(r));
        records.sort_by_key(|r| r.record_id);
        Ok(records)
    }

    fn log_entries(&mut self) -> Result<Vec<LogEntry>> {
        self.flush()?;
        read_jsonl(&self.decisions_path())
    }

    fn record_count(&self) -> u64 {
        self.next_record_id - 1
    }

    fn sync(&mut self) -> Result<()> {
        self.flush()?;
        let rp = self.results_path();
        let dp = self.decisions_path();
        self.results.get_ref().sync_all().map_err(|e| StorageError::io(&rp, e))?;
        self.decisions.get_ref().sync_all().map_err(|e| StorageError::io(&dp, e))
    }
}

impl Drop for JsonlStore {
    fn drop(&mut self) {
        let _ = self.results.flush();
        let _ = self.decisions.flush();
    }
}

/// Reads every line of a JSON Lines file; a missing file reads as empty.
pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(StorageError::io(path, e)),
    };
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| StorageError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| {
            StorageError::Schema(format!("{}:{}: {e}", path.display(), i + 1))
        })?;
        out.push(value);
    }
    Ok(out)
}
