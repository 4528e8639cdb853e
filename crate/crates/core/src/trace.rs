//! Signed, hash-chained behavioral logs and their newline-delimited file form.
//!
//! Each line of a trace file is the canonical encoding of one [`LogEntry`].

use std::collections::BTreeMap;
use std::fmt;
use std::io::{self, Read, Write};

use thiserror::Error;

use crate::canonical::{
    canonical_encode, decode_canonical, digest_value, Digest, FieldError, Fields, Value,
};
use crate::identity::{did_field, sig_field, verify_value, Did, KeyPair, Signature};

pub const SCHEMA_VERSION: i64 = 1;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TraceError {
    #[error("timestamp {ts_ms} precedes previous entry timestamp {prev_ts_ms}")]
    NonMonotonicTimestamp { ts_ms: i64, prev_ts_ms: i64 },
    #[error("sequence gap: expected seq {expected}, found {found}")]
    SeqGap { expected: u64, found: u64 },
    #[error("chain break at seq {seq}: prev does not match the preceding entry hash")]
    ChainBreak { seq: u64 },
    #[error("signature on seq {seq} does not verify")]
    BadSignature { seq: u64 },
    #[error("hash of seq {seq} does not match its content")]
    HashMismatch { seq: u64 },
    #[error("key pair does not match agent {0}")]
    KeyMismatch(Did),
    #[error("entry belongs to {found}, log belongs to {expected}")]
    AgentMismatch { expected: Did, found: Did },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("I/O failure: {0}")]
    Io(String),
}

impl From<FieldError> for TraceError {
    fn from(e: FieldError) -> Self {
        TraceError::Parse(e.to_string())
    }
}

/// A trace-file error tied to the 1-based line that caused it (0 when no line
/// applies, e.g. an empty file or a read failure).
#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("line {line}: {error}")]
pub struct ImportError {
    pub line: usize,
    pub error: TraceError,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AnchorClass {
    Critical,
    Routine,
}

impl AnchorClass {
    pub fn as_str(self) -> &'static str {
        match self {
            AnchorClass::Critical => "critical",
            AnchorClass::Routine => "routine",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "critical" => Some(AnchorClass::Critical),
            "routine" => Some(AnchorClass::Routine),
            _ => None,
        }
    }
}

/// Upstream reference to another agent's (or this agent's) entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EntryRef {
    pub agent: Did,
    pub seq: u64,
    pub hash: Digest,
}

impl EntryRef {
    pub fn to(entry: &LogEntry) -> Self {
        EntryRef {
            agent: entry.body.agent,
            seq: entry.body.seq,
            hash: entry.hash,
        }
    }

    pub fn to_value(&self) -> Value {
        Value::map([
            ("agent", self.agent.into()),
            ("seq", Value::Int(self.seq as i64)),
            ("hash", self.hash.into()),
        ])
    }

    pub fn from_value(v: &Value) -> Result<Self, FieldError> {
        let f = Fields::new(v, "refs")?.only(&["agent", "seq", "hash"])?;
        Ok(EntryRef {
            agent: did_field(&f, "agent")?,
            seq: positive(&f, "seq")?,
            hash: f.digest("hash")?,
        })
    }
}

impl fmt::Display for EntryRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.agent, self.seq, self.hash)
    }
}

fn positive(f: &Fields<'_>, key: &str) -> Result<u64, FieldError> {
    let n = f.int(key)?;
    if n < 1 {
        return Err(FieldError::new(key, "must be at least 1"));
    }
    Ok(n as u64)
}

/// What an agent did, before it is placed in its log.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActionRecord {
    pub action: String,
    pub params: BTreeMap<String, Value>,
    pub ts_ms: i64,
    pub ctx: BTreeMap<String, Value>,
    pub inputs: Vec<Digest>,
    pub outputs: Vec<Digest>,
    pub refs: Vec<EntryRef>,
    pub anchor_class: AnchorClass,
}

impl ActionRecord {
    pub fn new(action: impl Into<String>, ts_ms: i64) -> Self {
        ActionRecord {
            action: action.into(),
            params: BTreeMap::new(),
            ts_ms,
            ctx: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            refs: Vec::new(),
            anchor_class: AnchorClass::Routine,
        }
    }
}

/// Entry content covered by the signature.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntryBody {
    pub v: i64,
    pub agent: Did,
    pub seq: u64,
    pub prev: Digest,
    pub policy: Digest,
    pub action: String,
    pub params: BTreeMap<String, Value>,
    pub ts_ms: i64,
    pub ctx: BTreeMap<String, Value>,
    pub inputs: Vec<Digest>,
    pub outputs: Vec<Digest>,
    pub refs: Vec<EntryRef>,
    pub anchor_class: AnchorClass,
}

impl EntryBody {
    fn fields(&self) -> BTreeMap<String, Value> {
        let digests = |ds: &[Digest]| Value::List(ds.iter().map(|&d| d.into()).collect());
        [
            ("v", Value::Int(self.v)),
            ("agent", self.agent.into()),
            ("seq", Value::Int(self.seq as i64)),
            ("prev", self.prev.into()),
            ("policy", self.policy.into()),
            ("action", Value::str(&self.action)),
            ("params", Value::Map(self.params.clone())),
            ("ts_ms", Value::Int(self.ts_ms)),
            ("ctx", Value::Map(self.ctx.clone())),
            ("inputs", digests(&self.inputs)),
            ("outputs", digests(&self.outputs)),
            ("refs", Value::List(self.refs.iter().map(EntryRef::to_value).collect())),
            ("anchor_class", Value::str(self.anchor_class.as_str())),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_owned(), v))
        .collect()
    }

    /// The value that is signed: every field except `sig` and `hash`.
    pub fn to_value(&self) -> Value {
        Value::Map(self.fields())
    }

    fn from_fields(f: &Fields<'_>) -> Result<Self, FieldError> {
        let v = f.int("v")?;
        if v != SCHEMA_VERSION {
            return Err(FieldError::new("v", format!("unsupported schema version {v}")));
        }
        let digests = |key: &str| -> Result<Vec<Digest>, FieldError> {
            f.list(key)?
                .iter()
                .map(|d| {
                    d.as_str()
                        .and_then(|s| Digest::from_hex(s).ok())
                        .ok_or_else(|| FieldError::new(key, "expected list of digests"))
                })
                .collect()
        };
        let class = f.str("anchor_class")?;
        Ok(EntryBody {
            v,
            agent: did_field(f, "agent")?,
            seq: positive(f, "seq")?,
            prev: f.digest("prev")?,
            policy: f.digest("policy")?,
            action: f.str("action")?.to_owned(),
            params: f.map("params")?.clone(),
            ts_ms: f.int("ts_ms")?,
            ctx: f.map("ctx")?.clone(),
            inputs: digests("inputs")?,
            outputs: digests("outputs")?,
            refs: f
                .list("refs")?
                .iter()
                .map(EntryRef::from_value)
                .collect::<Result<_, _>>()?,
            anchor_class: AnchorClass::parse(class)
                .ok_or_else(|| FieldError::new("anchor_class", format!("unknown class {class:?}")))?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogEntry {
    pub body: EntryBody,
    pub sig: Signature,
    pub hash: Digest,
}

const ENTRY_FIELDS: &[&str] = &[
    "v", "agent", "seq", "prev", "policy", "action", "params", "ts_ms", "ctx", "inputs",
    "outputs", "refs", "anchor_class", "sig", "hash",
];

impl LogEntry {
    /// Digest over the body plus `sig` (everything but `hash`).
    pub fn compute_hash(body: &EntryBody, sig: &Signature) -> Digest {
        let mut m = body.fields();
        m.insert("sig".to_owned(), (*sig).into());
        digest_value(&Value::Map(m))
    }

    pub fn verify_signature(&self) -> bool {
        verify_value(&self.body.agent, &self.body.to_value(), &self.sig)
    }

    pub fn hash_is_consistent(&self) -> bool {
        Self::compute_hash(&self.body, &self.sig) == self.hash
    }

    pub fn to_value(&self) -> Value {
        let mut m = self.body.fields();
        m.insert("sig".to_owned(), self.sig.into());
        m.insert("hash".to_owned(), self.hash.into());
        Value::Map(m)
    }

    /// Parses an entry and checks that its stated hash recomputes.
    pub fn from_value(value: &Value) -> Result<Self, TraceError> {
        let f = Fields::new(value, "entry")?.only(ENTRY_FIELDS)?;
        let entry = LogEntry {
            body: EntryBody::from_fields(&f)?,
            sig: sig_field(&f, "sig")?,
            hash: f.digest("hash")?,
        };
        if !entry.hash_is_consistent() {
            return Err(TraceError::HashMismatch {
                seq: entry.body.seq,
            });
        }
        Ok(entry)
    }

    pub fn to_line(&self) -> Vec<u8> {
        let mut line = canonical_encode(&self.to_value());
        line.push(b'\n');
        line
    }
}

/// Signs `body` and fixes its hash.
pub fn seal_entry(body: EntryBody, keypair: &KeyPair) -> Result<LogEntry, TraceError> {
    if !keypair.matches(&body.agent) {
        return Err(TraceError::KeyMismatch(body.agent));
    }
    let sig = keypair.sign_value(&body.to_value());
    let hash = LogEntry::compute_hash(&body, &sig);
    Ok(LogEntry { body, sig, hash })
}

/// One agent's append-only log, ordered by `seq`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceLog {
    pub agent: Did,
    pub entries: Vec<LogEntry>,
}

impl TraceLog {
    pub fn new(agent: Did) -> Self {
        TraceLog {
            agent,
            entries: Vec::new(),
        }
    }

    pub fn last(&self) -> Option<&LogEntry> {
        self.entries.last()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Prepares the next unsigned entry for this log.
    pub fn build_entry(&self, policy: Digest, record: ActionRecord) -> Result<EntryBody, TraceError> {
        if let Some(last) = self.last() {
            if record.ts_ms < last.body.ts_ms {
                return Err(TraceError::NonMonotonicTimestamp {
                    ts_ms: record.ts_ms,
                    prev_ts_ms: last.body.ts_ms,
                });
            }
        }
        Ok(EntryBody {
            v: SCHEMA_VERSION,
            agent: self.agent,
            seq: self.last().map_or(1, |e| e.body.seq + 1),
            prev: self.last().map_or(Digest::ZERO, |e| e.hash),
            policy,
            action: record.action,
            params: record.params,
            ts_ms: record.ts_ms,
            ctx: record.ctx,
            inputs: record.inputs,
            outputs: record.outputs,
            refs: record.refs,
            anchor_class: record.anchor_class,
        })
    }

    /// Appends a sealed entry if it continues the chain.
    pub fn append(&mut self, entry: LogEntry) -> Result<(), TraceError> {
        let b = &entry.body;
        if b.agent != self.agent {
            return Err(TraceError::AgentMismatch {
                expected: self.agent,
                found: b.agent,
            });
        }
        let expected = self.last().map_or(1, |e| e.body.seq + 1);
        if b.seq != expected {
            return Err(TraceError::SeqGap {
                expected,
                found: b.seq,
            });
        }
        if b.prev != self.last().map_or(Digest::ZERO, |e| e.hash) {
            return Err(TraceError::ChainBreak { seq: b.seq });
        }
        if let Some(last) = self.last() {
            if b.ts_ms < last.body.ts_ms {
                return Err(TraceError::NonMonotonicTimestamp {
                    ts_ms: b.ts_ms,
                    prev_ts_ms: last.body.ts_ms,
                });
            }
        }
        if !entry.hash_is_consistent() {
            return Err(TraceError::HashMismatch { seq: b.seq });
        }
        if !entry.verify_signature() {
            return Err(TraceError::BadSignature { seq: b.seq });
        }
        self.entries.push(entry);
        Ok(())
    }

    /// Builds, seals and appends in one step; returns the sealed entry.
    pub fn record(
        &mut self,
        keypair: &KeyPair,
        policy: Digest,
        action: ActionRecord,
    ) -> Result<&LogEntry, TraceError> {
        let entry = seal_entry(self.build_entry(policy, action)?, keypair)?;
        self.append(entry)?;
        Ok(self.entries.last().expect("just appended"))
    }
}

/// Serializes the log as one canonical line per entry.
pub fn encode_trace(log: &TraceLog) -> Vec<u8> {
    log.entries.iter().flat_map(LogEntry::to_line).collect()
}

/// Writes the trace to `dest`; returns the number of bytes written.
pub fn export_trace(log: &TraceLog, dest: &mut impl Write) -> io::Result<u64> {
    let bytes = encode_trace(log);
    dest.write_all(&bytes)?;
    Ok(bytes.len() as u64)
}

/// Parses every line and checks each entry's hash, without enforcing chain
/// continuity. All entries must belong to one agent.
pub fn read_entries(bytes: &[u8]) -> Result<Vec<LogEntry>, ImportError> {
    if bytes.is_empty() {
        return Ok(Vec::new());
    }
    if !bytes.ends_with(b"\n") {
        return Err(ImportError {
            line: bytes.iter().filter(|&&b| b == b'\n').count() + 1,
            error: TraceError::Parse("truncated line (missing newline terminator)".into()),
        });
    }
    let mut entries: Vec<LogEntry> = Vec::new();
    for (i, line) in bytes[..bytes.len() - 1].split(|&b| b == b'\n').enumerate() {
        let at = |error| ImportError { line: i + 1, error };
        let value = decode_canonical(line).map_err(|e| at(TraceError::Parse(e.to_string())))?;
        let entry = LogEntry::from_value(&value).map_err(at)?;
        if let Some(first) = entries.first() {
            if first.body.agent != entry.body.agent {
                return Err(at(TraceError::AgentMismatch {
                    expected: first.body.agent,
                    found: entry.body.agent,
                }));
            }
        }
        entries.push(entry);
    }
    Ok(entries)
}

fn read_all(source: &mut impl Read) -> Result<Vec<u8>, ImportError> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes).map_err(|e| ImportError {
        line: 0,
        error: TraceError::Io(e.to_string()),
    })?;
    Ok(bytes)
}

fn replay(agent: Did, entries: Vec<LogEntry>) -> Result<TraceLog, ImportError> {
    let mut log = TraceLog::new(agent);
    for (i, entry) in entries.into_iter().enumerate() {
        log.append(entry).map_err(|error| ImportError { line: i + 1, error })?;
    }
    Ok(log)
}

/// Reads a trace and fully revalidates it (hashes, sequence, chain,
/// timestamps, signatures). The agent is taken from the first line, so the
/// source must hold at least one entry.
pub fn import_trace(source: &mut impl Read) -> Result<TraceLog, ImportError> {
    let entries = read_entries(&read_all(source)?)?;
    let agent = entries.first().map(|e| e.body.agent).ok_or(ImportError {
        line: 0,
        error: TraceError::Parse("trace holds no entries".into()),
    })?;
    replay(agent, entries)
}

/// Like [`import_trace`] for a known agent; an empty source yields an empty log.
pub fn import_trace_for(agent: Did, source: &mut impl Read) -> Result<TraceLog, ImportError> {
    replay(agent, read_entries(&read_all(source)?)?)
}
