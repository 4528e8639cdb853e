//! Hash-chained append-only ledger with in-memory and file backends.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::canonical::{canonical_encode, decode_canonical, digest_value, Digest, Fields, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RecordKind {
    Identity,
    Revocation,
    Policy,
    Anchor,
}

impl RecordKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RecordKind::Identity => "identity",
            RecordKind::Revocation => "revocation",
            RecordKind::Policy => "policy",
            RecordKind::Anchor => "anchor",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "identity" => RecordKind::Identity,
            "revocation" => RecordKind::Revocation,
            "policy" => RecordKind::Policy,
            "anchor" => RecordKind::Anchor,
            _ => return None,
        })
    }
}

impl fmt::Display for RecordKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LedgerRecord {
    pub idx: u64,
    pub prev: Digest,
    pub ts_ms: i64,
    pub kind: RecordKind,
    pub body: BTreeMap<String, Value>,
    pub rhash: Digest,
}

impl LedgerRecord {
    fn content(&self) -> BTreeMap<String, Value> {
        let mut m = BTreeMap::new();
        m.insert("idx".to_owned(), Value::Int(self.idx as i64));
        m.insert("prev".to_owned(), self.prev.into());
        m.insert("ts_ms".to_owned(), Value::Int(self.ts_ms));
        m.insert("kind".to_owned(), Value::str(self.kind.as_str()));
        m.insert("body".to_owned(), Value::Map(self.body.clone()));
        m
    }

    /// Digest of the record without its `rhash` field.
    pub fn compute_rhash(&self) -> Digest {
        digest_value(&Value::Map(self.content()))
    }

    pub fn to_value(&self) -> Value {
        let mut m = self.content();
        m.insert("rhash".to_owned(), self.rhash.into());
        Value::Map(m)
    }

    /// Structural parse only; the `rhash` is not checked here.
    pub fn from_value(value: &Value) -> Result<Self, String> {
        let f = Fields::new(value, "record")
            .and_then(|f| f.only(&["idx", "prev", "ts_ms", "kind", "body", "rhash"]))
            .map_err(|e| e.to_string())?;
        let idx = f.int("idx").map_err(|e| e.to_string())?;
        if idx < 0 {
            return Err("negative idx".into());
        }
        let kind = f.str("kind").map_err(|e| e.to_string())?;
        Ok(LedgerRecord {
            idx: idx as u64,
            prev: f.digest("prev").map_err(|e| e.to_string())?,
            ts_ms: f.int("ts_ms").map_err(|e| e.to_string())?,
            kind: RecordKind::parse(kind).ok_or_else(|| format!("unknown record kind {kind:?}"))?,
            body: f.map("body").map_err(|e| e.to_string())?.clone(),
            rhash: f.digest("rhash").map_err(|e| e.to_string())?,
        })
    }

    /// One canonical line, newline-terminated.
    pub fn to_line(&self) -> Vec<u8> {
        let mut line = canonical_encode(&self.to_value());
        line.push(b'\n');
        line
    }

    /// Parses one line (without its terminator) and validates position and `rhash`.
    pub fn parse_line(line: &[u8], expected_idx: u64) -> Result<Self, LedgerError> {
        let corrupt = |reason: String| LedgerError::Corrupt {
            idx: expected_idx,
            reason,
        };
        let value = decode_canonical(line).map_err(|e| corrupt(e.to_string()))?;
        let record = LedgerRecord::from_value(&value).map_err(corrupt)?;
        record.check(expected_idx)?;
        Ok(record)
    }

    fn check(&self, expected_idx: u64) -> Result<(), LedgerError> {
        if self.idx != expected_idx {
            return Err(LedgerError::Corrupt {
                idx: expected_idx,
                reason: format!("record claims idx {}", self.idx),
            });
        }
        if self.compute_rhash() != self.rhash {
            return Err(LedgerError::Corrupt {
                idx: expected_idx,
                reason: "rhash does not match record content".into(),
            });
        }
        Ok(())
    }

    /// The publishable `idx:<n> rhash:<hex>` checkpoint line for this record.
    pub fn checkpoint(&self) -> String {
        format!("idx:{} rhash:{}", self.idx, self.rhash)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LedgerError {
    #[error("ledger I/O failure: {0}")]
    Io(String),
    #[error("corrupt ledger record {idx}: {reason}")]
    Corrupt { idx: u64, reason: String },
    #[error("ledger index {idx} out of range (length {len})")]
    OutOfRange { idx: u64, len: u64 },
}

impl From<io::Error> for LedgerError {
    fn from(e: io::Error) -> Self {
        LedgerError::Io(e.to_string())
    }
}

/// Append-only, hash-chained record store.
///
/// Appends must be serialized by the caller or the backend; readers observe a
/// prefix of the chain.
pub trait Ledger {
    fn len(&self) -> u64;

    /// Returns record `idx` after revalidating its position and `rhash`.
    fn get(&self, idx: u64) -> Result<LedgerRecord, LedgerError>;

    fn append(
        &mut self,
        kind: RecordKind,
        body: BTreeMap<String, Value>,
        ts_ms: i64,
    ) -> Result<LedgerRecord, LedgerError>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn last(&self) -> Result<Option<LedgerRecord>, LedgerError> {
        match self.len() {
            0 => Ok(None),
            n => self.get(n - 1).map(Some),
        }
    }
}

fn next_record(
    prev: Option<&LedgerRecord>,
    idx: u64,
    kind: RecordKind,
    body: BTreeMap<String, Value>,
    ts_ms: i64,
) -> LedgerRecord {
    let mut record = LedgerRecord {
        idx,
        prev: prev.map(|r| r.rhash).unwrap_or(Digest::ZERO),
        ts_ms,
        kind,
        body,
        rhash: Digest::ZERO,
    };
    record.rhash = record.compute_rhash();
    record
}

/// First failing position found by [`verify_chain`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChainFault {
    pub idx: u64,
    pub reason: String,
}

impl fmt::Display for ChainFault {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "record {}: {}", self.idx, self.reason)
    }
}

/// Walks every record recomputing `rhash` and `prev` links.
///
/// A truncated ledger is still a valid (shorter) chain; detecting truncation
/// needs an externally published checkpoint.
pub fn verify_chain(ledger: &dyn Ledger) -> Result<(), ChainFault> {
    let mut prev = Digest::ZERO;
    for idx in 0..ledger.len() {
        let record = ledger.get(idx).map_err(|e| ChainFault {
            idx,
            reason: match e {
                LedgerError::Corrupt { reason, .. } => reason,
                other => other.to_string(),
            },
        })?;
        if record.prev != prev {
            return Err(ChainFault {
                idx,
                reason: "prev does not link to the preceding record".into(),
            });
        }
        prev = record.rhash;
    }
    Ok(())
}

#[derive(Debug, Default, Clone)]
pub struct MemoryLedger {
    records: Vec<LedgerRecord>,
}

impl MemoryLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn records(&self) -> &[LedgerRecord] {
        &self.records
    }

    /// Direct mutable access, for fault injection in tests.
    pub fn records_mut(&mut self) -> &mut Vec<LedgerRecord> {
        &mut self.records
    }
}

impl Ledger for MemoryLedger {
    fn len(&self) -> u64 {
        self.records.len() as u64
    }

    fn get(&self, idx: u64) -> Result<LedgerRecord, LedgerError> {
        let record = self
            .records
            .get(idx as usize)
            .ok_or(LedgerError::OutOfRange {
                idx,
                len: self.len(),
            })?;
        record.check(idx)?;
        Ok(record.clone())
    }

    fn append(
        &mut self,
        kind: RecordKind,
        body: BTreeMap<String, Value>,
        ts_ms: i64,
    ) -> Result<LedgerRecord, LedgerError> {
        let prev = self.last()?;
        let record = next_record(prev.as_ref(), self.len(), kind, body, ts_ms);
        self.records.push(record.clone());
        Ok(record)
    }
}

/// Newline-delimited ledger file. Appends only ever add bytes at the end of the
/// file and are serialized across processes with an exclusive lock on a
/// sibling `.lock` file.
#[derive(Debug)]
pub struct FileLedger {
    path: PathBuf,
    lines: Vec<Vec<u8>>,
}

impl FileLedger {
    /// Opens (or lazily creates on first append) the ledger at `path`.
    /// Malformed lines are kept and reported by [`Ledger::get`].
    pub fn open(path: impl AsRef<Path>) -> Result<Self, LedgerError> {
        let path = path.as_ref().to_path_buf();
        let lines = read_lines(&path)?;
        Ok(FileLedger { path, lines })
    }

    /// A read-only view over ledger bytes that came from somewhere other than
    /// `path`. Appending still goes to `path`.
    pub fn from_bytes(path: impl AsRef<Path>, bytes: &[u8]) -> Self {
        FileLedger {
            path: path.as_ref().to_path_buf(),
            lines: split_lines(bytes),
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn lock_path(&self) -> PathBuf {
        let mut name = self.path.file_name().unwrap_or_default().to_os_string();
        name.push(".lock");
        self.path.with_file_name(name)
    }
}

fn read_lines(path: &Path) -> Result<Vec<Vec<u8>>, LedgerError> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    Ok(split_lines(&bytes))
}

fn split_lines(bytes: &[u8]) -> Vec<Vec<u8>> {
    // A final segment without a terminator is kept so that it reports as corrupt.
    let mut lines: Vec<Vec<u8>> = bytes.split(|&b| b == b'\n').map(<[u8]>::to_vec).collect();
    if bytes.ends_with(b"\n") || bytes.is_empty() {
        lines.pop();
    } else if let Some(last) = lines.last_mut() {
        last.push(b'\n');
    }
    lines
}

impl Ledger for FileLedger {
    fn len(&self) -> u64 {
        self.lines.len() as u64
    }

    fn get(&self, idx: u64) -> Result<LedgerRecord, LedgerError> {
        let line = self.lines.get(idx as usize).ok_or(LedgerError::OutOfRange {
            idx,
            len: self.len(),
        })?;
        LedgerRecord::parse_line(line, idx)
    }

    fn append(
        &mut self,
        kind: RecordKind,
        body: BTreeMap<String, Value>,
        ts_ms: i64,
    ) -> Result<LedgerRecord, LedgerError> {
        if let Some(dir) = self.path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let lock = File::create(self.lock_path())?;
        lock.lock()?;
        // Another writer may have appended since we last read.
        self.lines = read_lines(&self.path)?;
        if self.lines.last().is_some_and(|l| l.ends_with(b"\n")) {
            return Err(LedgerError::Corrupt {
                idx: self.len() - 1,
                reason: "unterminated final record".into(),
            });
        }
        let prev = self.last()?;
        let record = next_record(prev.as_ref(), self.len(), kind, body, ts_ms);
        let line = record.to_line();
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)?;
        file.write_all(&line)?;
        file.sync_data()?;
        lock.unlock()?;
        self.lines.push(line[..line.len() - 1].to_vec());
        Ok(record)
    }
}
