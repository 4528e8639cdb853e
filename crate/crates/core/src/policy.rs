//! Operational policies: structure, commitment to the ledger, a
//! content-addressed store, and conformance checks over log entries.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::anchor::ledger::{Ledger, LedgerError, LedgerRecord, RecordKind};
use crate::canonical::{
    canonical_encode, decode, digest, Digest, FieldError, Fields, Value,
};
use crate::identity::{
    did_field, sig_field, verify_value, Did, KeyPair, Registry, Resolution, Signature,
};
use crate::trace::LogEntry;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PolicyError {
    #[error("invalid policy: {}", join(.0))]
    InvalidPolicy(Vec<ValidationError>),
    #[error("key pair does not match {0}")]
    KeyMismatch(Did),
    #[error("agent {0} is not registered")]
    UnknownAgent(Did),
    #[error("agent {0} has been revoked")]
    RevokedIdentity(Did),
    #[error("no policy with hash {0}")]
    NotFound(Digest),
    #[error("stored policy content does not hash to {0}")]
    DigestMismatch(Digest),
    #[error("entry cites policy {cited}, document hashes to {actual}")]
    PolicyHashMismatch { cited: Digest, actual: Digest },
    #[error("entries are not in strictly increasing seq order for a single agent")]
    UnorderedInput,
    #[error("malformed policy document: {0}")]
    Malformed(#[from] FieldError),
    #[error("policy store I/O failure: {0}")]
    Io(String),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
}

fn join<T: fmt::Display>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join("; ")
}

impl From<io::Error> for PolicyError {
    fn from(e: io::Error) -> Self {
        PolicyError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParameterConstraint {
    IntRange { min: i64, max: i64 },
    OneOf { values: BTreeSet<String> },
    MaxLength { limit: i64 },
    Required,
}

impl ParameterConstraint {
    pub fn kind(&self) -> &'static str {
        match self {
            ParameterConstraint::IntRange { .. } => "int_range",
            ParameterConstraint::OneOf { .. } => "one_of",
            ParameterConstraint::MaxLength { .. } => "max_length",
            ParameterConstraint::Required => "required",
        }
    }

    pub fn to_value(&self) -> Value {
        let mut m = BTreeMap::new();
        m.insert("kind".to_owned(), Value::str(self.kind()));
        match self {
            ParameterConstraint::IntRange { min, max } => {
                m.insert("min".to_owned(), Value::Int(*min));
                m.insert("max".to_owned(), Value::Int(*max));
            }
            ParameterConstraint::OneOf { values } => {
                m.insert("values".to_owned(), str_set(values));
            }
            ParameterConstraint::MaxLength { limit } => {
                m.insert("limit".to_owned(), Value::Int(*limit));
            }
            ParameterConstraint::Required => {}
        }
        Value::Map(m)
    }

    pub fn from_value(v: &Value) -> Result<Self, FieldError> {
        let f = Fields::new(v, "constraint")?;
        Ok(match f.str("kind")? {
            "int_range" => {
                let f = f.only(&["kind", "min", "max"])?;
                ParameterConstraint::IntRange {
                    min: f.int("min")?,
                    max: f.int("max")?,
                }
            }
            "one_of" => ParameterConstraint::OneOf {
                values: f.only(&["kind", "values"])?.str_list("values")?.into_iter().collect(),
            },
            "max_length" => ParameterConstraint::MaxLength {
                limit: f.only(&["kind", "limit"])?.int("limit")?,
            },
            "required" => {
                f.only(&["kind"])?;
                ParameterConstraint::Required
            }
            other => return Err(FieldError::new("kind", format!("unknown constraint {other:?}"))),
        })
    }

    /// Whether `value` (absent when `None`) satisfies this constraint. Only
    /// `Required` constrains presence.
    pub fn admits(&self, value: Option<&Value>) -> bool {
        match (self, value) {
            (ParameterConstraint::Required, v) => v.is_some(),
            (_, None) => true,
            (ParameterConstraint::IntRange { min, max }, Some(v)) => {
                v.as_int().is_some_and(|i| (*min..=*max).contains(&i))
            }
            (ParameterConstraint::OneOf { values }, Some(v)) => {
                v.as_str().is_some_and(|s| values.contains(s))
            }
            (ParameterConstraint::MaxLength { limit }, Some(v)) => v
                .as_str()
                .is_some_and(|s| s.chars().count() as i64 <= *limit),
        }
    }
}

fn str_set(set: &BTreeSet<String>) -> Value {
    Value::List(set.iter().map(Value::str).collect())
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RateLimit {
    pub window_ms: i64,
    pub max_actions: i64,
    pub action_filter: Option<String>,
}

impl RateLimit {
    pub fn applies_to(&self, action: &str) -> bool {
        self.action_filter.as_deref().is_none_or(|f| f == action)
    }

    fn to_value(&self) -> Value {
        Value::map([
            ("window_ms", Value::Int(self.window_ms)),
            ("max_actions", Value::Int(self.max_actions)),
            (
                "action_filter",
                self.action_filter.as_deref().map_or(Value::Null, Value::from),
            ),
        ])
    }

    fn from_value(v: &Value) -> Result<Self, FieldError> {
        let f = Fields::new(v, "rate_limits")?.only(&["window_ms", "max_actions", "action_filter"])?;
        Ok(RateLimit {
            window_ms: f.int("window_ms")?,
            max_actions: f.int("max_actions")?,
            action_filter: match f.opt("action_filter") {
                None => None,
                Some(v) => Some(
                    v.as_str()
                        .ok_or_else(|| FieldError::new("action_filter", "expected string"))?
                        .to_owned(),
                ),
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PolicyDocument {
    pub policy_id: String,
    pub agent_did: Did,
    pub version: i64,
    pub allowed_actions: BTreeSet<String>,
    pub parameter_constraints: BTreeMap<String, BTreeMap<String, ParameterConstraint>>,
    pub rate_limits: Vec<RateLimit>,
    pub jurisdictions: BTreeSet<String>,
    pub data_boundaries: BTreeSet<String>,
    pub not_before_ms: i64,
    pub not_after_ms: i64,
    pub delegated_by: Option<Did>,
}

const POLICY_FIELDS: &[&str] = &[
    "policy_id",
    "agent_did",
    "version",
    "allowed_actions",
    "parameter_constraints",
    "rate_limits",
    "jurisdictions",
    "data_boundaries",
    "not_before_ms",
    "not_after_ms",
    "delegated_by",
];

impl PolicyDocument {
    pub fn to_value(&self) -> Value {
        let constraints = self
            .parameter_constraints
            .iter()
            .map(|(action, params)| {
                let params = params
                    .iter()
                    .map(|(p, c)| (p.clone(), c.to_value()))
                    .collect();
                (action.clone(), Value::Map(params))
            })
            .collect();
        Value::map([
            ("policy_id", Value::str(&self.policy_id)),
            ("agent_did", self.agent_did.into()),
            ("version", Value::Int(self.version)),
            ("allowed_actions", str_set(&self.allowed_actions)),
            ("parameter_constraints", Value::Map(constraints)),
            (
                "rate_limits",
                Value::List(self.rate_limits.iter().map(RateLimit::to_value).collect()),
            ),
            ("jurisdictions", str_set(&self.jurisdictions)),
            ("data_boundaries", str_set(&self.data_boundaries)),
            ("not_before_ms", Value::Int(self.not_before_ms)),
            ("not_after_ms", Value::Int(self.not_after_ms)),
            ("delegated_by", self.delegated_by.map_or(Value::Null, Value::from)),
        ])
    }

    /// Sets are accepted in any order and with duplicates; the canonical form
    /// sorts and deduplicates them.
    pub fn from_value(v: &Value) -> Result<Self, FieldError> {
        let f = Fields::new(v, "policy")?.only(POLICY_FIELDS)?;
        let mut parameter_constraints = BTreeMap::new();
        for (action, params) in f.map("parameter_constraints")? {
            let params = params
                .as_map()
                .ok_or_else(|| FieldError::new("parameter_constraints", "expected map of maps"))?;
            let parsed = params
                .iter()
                .map(|(p, c)| Ok((p.clone(), ParameterConstraint::from_value(c)?)))
                .collect::<Result<BTreeMap<_, _>, FieldError>>()?;
            parameter_constraints.insert(action.clone(), parsed);
        }
        Ok(PolicyDocument {
            policy_id: f.str("policy_id")?.to_owned(),
            agent_did: did_field(&f, "agent_did")?,
            version: f.int("version")?,
            allowed_actions: f.str_list("allowed_actions")?.into_iter().collect(),
            parameter_constraints,
            rate_limits: f
                .list("rate_limits")?
                .iter()
                .map(RateLimit::from_value)
                .collect::<Result<_, _>>()?,
            jurisdictions: f.str_list("jurisdictions")?.into_iter().collect(),
            data_boundaries: f.str_list("data_boundaries")?.into_iter().collect(),
            not_before_ms: f.int("not_before_ms")?,
            not_after_ms: f.int("not_after_ms")?,
            delegated_by: match f.opt("delegated_by") {
                None => None,
                Some(_) => Some(did_field(&f, "delegated_by")?),
            },
        })
    }

    pub fn parse(bytes: &[u8]) -> Result<Self, PolicyError> {
        let value = decode(bytes).map_err(|e| FieldError::new("policy", e.to_string()))?;
        Ok(Self::from_value(&value)?)
    }

    pub fn canonical_bytes(&self) -> Vec<u8> {
        canonical_encode(&self.to_value())
    }

    pub fn policy_hash(&self) -> Digest {
        digest(&self.canonical_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ValidationError {
    EmptyActions,
    EmptyValidity { not_before_ms: i64, not_after_ms: i64 },
    InvalidVersion(i64),
    ConstraintOnUnknownAction(String),
    InvertedRange { action: String, param: String },
    EmptyOneOf { action: String, param: String },
    NegativeMaxLength { action: String, param: String },
    InvalidRateLimit(usize),
}

impl fmt::Display for ValidationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ValidationError::EmptyActions => f.write_str("EmptyActions: allowed_actions is empty"),
            ValidationError::EmptyValidity {
                not_before_ms,
                not_after_ms,
            } => write!(
                f,
                "EmptyValidity: not_before_ms {not_before_ms} is not before not_after_ms {not_after_ms}"
            ),
            ValidationError::InvalidVersion(v) => write!(f, "InvalidVersion: {v} (must be >= 1)"),
            ValidationError::ConstraintOnUnknownAction(a) => {
                write!(f, "ConstraintOnUnknownAction: {a:?} is not an allowed action")
            }
            ValidationError::InvertedRange { action, param } => {
                write!(f, "InvertedRange: {action}.{param} has min > max")
            }
            ValidationError::EmptyOneOf { action, param } => {
                write!(f, "EmptyOneOf: {action}.{param} admits no value")
            }
            ValidationError::NegativeMaxLength { action, param } => {
                write!(f, "NegativeMaxLength: {action}.{param}")
            }
            ValidationError::InvalidRateLimit(i) => {
                write!(f, "InvalidRateLimit: rate_limits[{i}] needs window_ms > 0 and max_actions >= 1")
            }
        }
    }
}

/// Returns every structural problem in `doc`; empty means valid.
pub fn validate_policy(doc: &PolicyDocument) -> Vec<ValidationError> {
    let mut errors = Vec::new();
    if doc.allowed_actions.is_empty() {
        errors.push(ValidationError::EmptyActions);
    }
    if doc.not_before_ms >= doc.not_after_ms {
        errors.push(ValidationError::EmptyValidity {
            not_before_ms: doc.not_before_ms,
            not_after_ms: doc.not_after_ms,
        });
    }
    if doc.version < 1 {
        errors.push(ValidationError::InvalidVersion(doc.version));
    }
    for (action, params) in &doc.parameter_constraints {
        if !doc.allowed_actions.contains(action) {
            errors.push(ValidationError::ConstraintOnUnknownAction(action.clone()));
        }
        for (param, c) in params {
            let (action, param) = (action.clone(), param.clone());
            match c {
                ParameterConstraint::IntRange { min, max } if min > max => {
                    errors.push(ValidationError::InvertedRange { action, param })
                }
                ParameterConstraint::OneOf { values } if values.is_empty() => {
                    errors.push(ValidationError::EmptyOneOf { action, param })
                }
                ParameterConstraint::MaxLength { limit } if *limit < 0 => {
                    errors.push(ValidationError::NegativeMaxLength { action, param })
                }
                _ => {}
            }
        }
    }
    for (i, r) in doc.rate_limits.iter().enumerate() {
        if r.window_ms <= 0 || r.max_actions < 1 {
            errors.push(ValidationError::InvalidRateLimit(i));
        }
    }
    errors
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PolicyCommitment {
    pub policy_hash: Digest,
    pub agent_did: Did,
    pub committed_at_ms: i64,
    pub signature: Signature,
    pub ledger_index: u64,
}

impl PolicyCommitment {
    fn unsigned(policy_hash: Digest, agent_did: Did, committed_at_ms: i64) -> BTreeMap<String, Value> {
        [
            ("policy_hash".to_owned(), policy_hash.into()),
            ("agent_did".to_owned(), agent_did.into()),
            ("committed_at_ms".to_owned(), Value::Int(committed_at_ms)),
        ]
        .into_iter()
        .collect()
    }

    pub fn verify(&self) -> bool {
        let body = Self::unsigned(self.policy_hash, self.agent_did, self.committed_at_ms);
        verify_value(&self.agent_did, &Value::Map(body), &self.signature)
    }

    pub fn from_record(record: &LedgerRecord) -> Result<Self, FieldError> {
        if record.kind != RecordKind::Policy {
            return Err(FieldError::new("kind", "not a policy record"));
        }
        let value = Value::Map(record.body.clone());
        let f = Fields::new(&value, "policy record")?
            .only(&["policy_hash", "agent_did", "committed_at_ms", "sig"])?;
        Ok(PolicyCommitment {
            policy_hash: f.digest("policy_hash")?,
            agent_did: did_field(&f, "agent_did")?,
            committed_at_ms: f.int("committed_at_ms")?,
            signature: sig_field(&f, "sig")?,
            ledger_index: record.idx,
        })
    }
}

/// Validates, signs and records the policy's hash on the ledger, and stores the
/// document itself in `store`.
pub fn commit_policy(
    doc: &PolicyDocument,
    keypair: &KeyPair,
    now_ms: i64,
    ledger: &mut dyn Ledger,
    store: &mut PolicyStore,
) -> Result<PolicyCommitment, PolicyError> {
    let problems = validate_policy(doc);
    if !problems.is_empty() {
        return Err(PolicyError::InvalidPolicy(problems));
    }
    if !keypair.matches(&doc.agent_did) {
        return Err(PolicyError::KeyMismatch(doc.agent_did));
    }
    match Registry::from_ledger(ledger)?.resolve(&doc.agent_did) {
        Resolution::NotFound => return Err(PolicyError::UnknownAgent(doc.agent_did)),
        Resolution::Revoked { .. } => return Err(PolicyError::RevokedIdentity(doc.agent_did)),
        Resolution::Registered(_) => {}
    }
    let policy_hash = store.put(doc)?;
    let mut body = PolicyCommitment::unsigned(policy_hash, doc.agent_did, now_ms);
    let signature = keypair.sign_value(&Value::Map(body.clone()));
    body.insert("sig".to_owned(), signature.into());
    let record = ledger.append(RecordKind::Policy, body, now_ms)?;
    Ok(PolicyCommitment {
        policy_hash,
        agent_did: doc.agent_did,
        committed_at_ms: now_ms,
        signature,
        ledger_index: record.idx,
    })
}

/// Content-addressed policy documents, in memory or as `<hash>.json` files in
/// a directory. Each stored blob is the document's canonical encoding.
#[derive(Debug, Clone)]
pub struct PolicyStore {
    dir: Option<PathBuf>,
    blobs: BTreeMap<Digest, Vec<u8>>,
}

impl PolicyStore {
    pub fn in_memory() -> Self {
        PolicyStore {
            dir: None,
            blobs: BTreeMap::new(),
        }
    }

    pub fn open_dir(dir: impl AsRef<Path>) -> Self {
        PolicyStore {
            dir: Some(dir.as_ref().to_path_buf()),
            blobs: BTreeMap::new(),
        }
    }

    pub fn file_name(hash: &Digest) -> String {
        format!("{hash}.json")
    }

    pub fn put(&mut self, doc: &PolicyDocument) -> Result<Digest, PolicyError> {
        let bytes = doc.canonical_bytes();
        let hash = digest(&bytes);
        if let Some(dir) = &self.dir {
            fs::create_dir_all(dir)?;
            crate::fsutil::write_atomic(&dir.join(Self::file_name(&hash)), &bytes)?;
        }
        self.blobs.insert(hash, bytes);
        Ok(hash)
    }

    /// Mutable access to the raw stored bytes, for corruption tests.
    pub fn blobs_mut(&mut self) -> &mut BTreeMap<Digest, Vec<u8>> {
        &mut self.blobs
    }

    fn raw(&self, hash: &Digest) -> Result<Vec<u8>, PolicyError> {
        if let Some(dir) = &self.dir {
            return match fs::read(dir.join(Self::file_name(hash))) {
                Ok(b) => Ok(b),
                Err(e) if e.kind() == io::ErrorKind::NotFound => Err(PolicyError::NotFound(*hash)),
                Err(e) => Err(e.into()),
            };
        }
        self.blobs.get(hash).cloned().ok_or(PolicyError::NotFound(*hash))
    }

    /// Returns the document whose canonical digest is `hash`, re-hashing the
    /// stored bytes on every read.
    pub fn lookup(&self, hash: &Digest) -> Result<PolicyDocument, PolicyError> {
        let bytes = self.raw(hash)?;
        if digest(&bytes) != *hash {
            return Err(PolicyError::DigestMismatch(*hash));
        }
        PolicyDocument::parse(&bytes)
    }
}

pub fn lookup_policy(policy_hash: &Digest, store: &PolicyStore) -> Result<PolicyDocument, PolicyError> {
    store.lookup(policy_hash)
}

/// A single way in which an entry departs from its policy.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum Violation {
    ActionNotAllowed { action: String },
    ParamViolation { param: String, constraint: ParameterConstraint },
    OutsideValidity { ts_ms: i64 },
    DataBoundary { labels: Vec<String> },
    JurisdictionMismatch { jurisdiction: String },
}

impl Violation {
    pub fn code(&self) -> &'static str {
        match self {
            Violation::ActionNotAllowed { .. } => "ActionNotAllowed",
            Violation::ParamViolation { .. } => "ParamViolation",
            Violation::OutsideValidity { .. } => "OutsideValidity",
            Violation::DataBoundary { .. } => "DataBoundary",
            Violation::JurisdictionMismatch { .. } => "JurisdictionMismatch",
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::ActionNotAllowed { action } => write!(f, "action {action:?} is not allowed"),
            Violation::ParamViolation { param, constraint } => {
                write!(f, "param {param:?} violates {}", constraint.kind())
            }
            Violation::OutsideValidity { ts_ms } => write!(f, "ts_ms {ts_ms} outside validity window"),
            Violation::DataBoundary { labels } => {
                write!(f, "data labels outside boundary: {}", labels.join(","))
            }
            Violation::JurisdictionMismatch { jurisdiction } => {
                write!(f, "jurisdiction {jurisdiction:?} not permitted")
            }
        }
    }
}

/// Evaluates one entry against the policy it cites. An empty list means
/// conformant.
pub fn check_action(doc: &PolicyDocument, entry: &LogEntry) -> Result<Vec<Violation>, PolicyError> {
    let actual = doc.policy_hash();
    if entry.body.policy != actual {
        return Err(PolicyError::PolicyHashMismatch {
            cited: entry.body.policy,
            actual,
        });
    }
    let b = &entry.body;
    let mut out = Vec::new();
    if !doc.allowed_actions.contains(&b.action) {
        out.push(Violation::ActionNotAllowed {
            action: b.action.clone(),
        });
    }
    if let Some(params) = doc.parameter_constraints.get(&b.action) {
        for (param, constraint) in params {
            if !constraint.admits(b.params.get(param)) {
                out.push(Violation::ParamViolation {
                    param: param.clone(),
                    constraint: constraint.clone(),
                });
            }
        }
    }
    if b.ts_ms < doc.not_before_ms || b.ts_ms >= doc.not_after_ms {
        out.push(Violation::OutsideValidity { ts_ms: b.ts_ms });
    }
    if let Some(labels) = b.ctx.get("data_labels") {
        // A malformed label list cannot be shown to stay inside the boundary.
        let outside: Vec<String> = match labels.as_list() {
            Some(list) => list
                .iter()
                .filter_map(|l| match l.as_str() {
                    Some(s) if doc.data_boundaries.contains(s) => None,
                    Some(s) => Some(s.to_owned()),
                    None => Some(format!("<{}>", l.kind())),
                })
                .collect(),
            None => vec![format!("<{}>", labels.kind())],
        };
        if !outside.is_empty() {
            out.push(Violation::DataBoundary { labels: outside });
        }
    }
    if let Some(j) = b.ctx.get("jurisdiction") {
        match j.as_str() {
            Some(s) if doc.jurisdictions.contains(s) => {}
            Some(s) => out.push(Violation::JurisdictionMismatch {
                jurisdiction: s.to_owned(),
            }),
            None => out.push(Violation::JurisdictionMismatch {
                jurisdiction: format!("<{}>", j.kind()),
            }),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RateViolation {
    /// Index into the policy's `rate_limits`.
    pub limit: usize,
    pub window_ms: i64,
    pub max_actions: i64,
    pub count: i64,
}

/// For every rate limit and every matching entry `e`, counts matching entries
/// with `ts_ms` in `(e.ts_ms - window_ms, e.ts_ms]` and reports `e.seq` when
/// the count exceeds `max_actions`. Results are ordered by (seq, limit).
pub fn check_rate(
    doc: &PolicyDocument,
    entries: &[LogEntry],
) -> Result<Vec<(u64, RateViolation)>, PolicyError> {
    for pair in entries.windows(2) {
        if pair[0].body.agent != pair[1].body.agent || pair[1].body.seq <= pair[0].body.seq {
            return Err(PolicyError::UnorderedInput);
        }
    }
    let mut out = Vec::new();
    for (limit_idx, limit) in doc.rate_limits.iter().enumerate() {
        let matching: Vec<&LogEntry> = entries
            .iter()
            .filter(|e| limit.applies_to(&e.body.action))
            .collect();
        let mut times: Vec<i64> = matching.iter().map(|e| e.body.ts_ms).collect();
        times.sort_unstable();
        for e in matching {
            let hi = e.body.ts_ms;
            let lo = hi.saturating_sub(limit.window_ms);
            // Entries with lo < ts <= hi.
            let count = times.partition_point(|&t| t <= hi) - times.partition_point(|&t| t <= lo);
            if count as i64 > limit.max_actions {
                out.push((
                    e.body.seq,
                    RateViolation {
                        limit: limit_idx,
                        window_ms: limit.window_ms,
                        max_actions: limit.max_actions,
                        count: count as i64,
                    },
                ));
            }
        }
    }
    out.sort_by_key(|(seq, v)| (*seq, v.limit));
    Ok(out)
}
