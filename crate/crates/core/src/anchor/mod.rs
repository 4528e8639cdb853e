//! Merkle batching of entry hashes and selective anchoring to the ledger.

pub mod ledger;
pub mod merkle;

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::canonical::{Digest, FieldError, Fields, Value};
use crate::identity::{did_field, sig_field, verify_value, Did, KeyPair, Signature};
use crate::trace::{AnchorClass, LogEntry};

use ledger::{Ledger, LedgerError, LedgerRecord, RecordKind};
pub use merkle::{merkle_prove, merkle_root, merkle_verify, MerkleProof, MerkleTree, PathStep, Side};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AnchorError {
    #[error("cannot build a Merkle tree over zero leaves")]
    EmptyBatch,
    #[error("leaf index {index} out of range for {len} leaves")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("invalid anchor policy: {0}")]
    InvalidPolicy(String),
    #[error("ledger append failed: {0}")]
    LedgerAppendFailure(#[from] LedgerError),
}

/// When pending entries are committed to the ledger.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorPolicy {
    /// One batch per `n` pending entries; a remainder stays pending.
    EveryN(u64),
    /// Each critical entry is anchored alone right away; routine entries are
    /// batched per `fallback_n`.
    CriticalImmediate { fallback_n: u64 },
    /// Everything pending goes into a single batch.
    Manual,
}

impl AnchorPolicy {
    pub fn validate(&self) -> Result<(), AnchorError> {
        match *self {
            AnchorPolicy::EveryN(0) => Err(AnchorError::InvalidPolicy("every-n requires n >= 1".into())),
            AnchorPolicy::CriticalImmediate { fallback_n: 0 } => Err(AnchorError::InvalidPolicy(
                "critical requires fallback_n >= 1".into(),
            )),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for AnchorPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AnchorPolicy::EveryN(n) => write!(f, "every-n:{n}"),
            AnchorPolicy::CriticalImmediate { fallback_n } => write!(f, "critical:{fallback_n}"),
            AnchorPolicy::Manual => f.write_str("manual"),
        }
    }
}

/// A contiguous run of one agent's sequence numbers inside a batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Coverage {
    pub agent: Did,
    pub first_seq: u64,
    pub last_seq: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchAnchor {
    pub batch_id: String,
    pub submitter: Did,
    pub merkle_root: Digest,
    pub leaf_count: u64,
    pub coverage: Vec<Coverage>,
    pub ts_ms: i64,
    pub sig: Signature,
    pub ledger_index: Option<u64>,
}

impl BatchAnchor {
    fn unsigned_body(&self) -> BTreeMap<String, Value> {
        let coverage = self
            .coverage
            .iter()
            .map(|c| {
                Value::map([
                    ("agent", c.agent.into()),
                    ("first_seq", Value::Int(c.first_seq as i64)),
                    ("last_seq", Value::Int(c.last_seq as i64)),
                ])
            })
            .collect();
        [
            ("batch_id".to_owned(), Value::str(&self.batch_id)),
            ("submitter".to_owned(), self.submitter.into()),
            ("merkle_root".to_owned(), self.merkle_root.into()),
            ("leaf_count".to_owned(), Value::Int(self.leaf_count as i64)),
            ("coverage".to_owned(), Value::List(coverage)),
            ("ts_ms".to_owned(), Value::Int(self.ts_ms)),
        ]
        .into_iter()
        .collect()
    }

    /// The ledger record body: every anchor field except `ledger_index`.
    pub fn body(&self) -> BTreeMap<String, Value> {
        let mut b = self.unsigned_body();
        b.insert("sig".to_owned(), self.sig.into());
        b
    }

    pub fn verify_signature(&self) -> bool {
        verify_value(&self.submitter, &Value::Map(self.unsigned_body()), &self.sig)
    }

    pub fn from_record(record: &LedgerRecord) -> Result<Self, FieldError> {
        if record.kind != RecordKind::Anchor {
            return Err(FieldError::new("kind", "not an anchor record"));
        }
        let value = Value::Map(record.body.clone());
        let f = Fields::new(&value, "anchor")?.only(&[
            "batch_id",
            "submitter",
            "merkle_root",
            "leaf_count",
            "coverage",
            "ts_ms",
            "sig",
        ])?;
        let mut coverage = Vec::new();
        for item in f.list("coverage")? {
            let c = Fields::new(item, "coverage")?.only(&["agent", "first_seq", "last_seq"])?;
            let (first, last) = (c.int("first_seq")?, c.int("last_seq")?);
            if first < 1 || last < first {
                return Err(FieldError::new("coverage", "invalid sequence range"));
            }
            coverage.push(Coverage {
                agent: did_field(&c, "agent")?,
                first_seq: first as u64,
                last_seq: last as u64,
            });
        }
        let leaf_count = f.int("leaf_count")?;
        if leaf_count < 1 {
            return Err(FieldError::new("leaf_count", "must be at least 1"));
        }
        Ok(BatchAnchor {
            batch_id: f.str("batch_id")?.to_owned(),
            submitter: did_field(&f, "submitter")?,
            merkle_root: f.digest("merkle_root")?,
            leaf_count: leaf_count as u64,
            coverage,
            ts_ms: f.int("ts_ms")?,
            sig: sig_field(&f, "sig")?,
            ledger_index: Some(record.idx),
        })
    }

    /// Covered `(agent, seq)` pairs in leaf order.
    pub fn leaves(&self) -> impl Iterator<Item = (Did, u64)> + '_ {
        self.coverage
            .iter()
            .flat_map(|c| (c.first_seq..=c.last_seq).map(move |s| (c.agent, s)))
    }

    pub fn covered_count(&self) -> u64 {
        self.coverage.iter().map(|c| c.last_seq - c.first_seq + 1).sum()
    }
}

/// A sealed entry awaiting anchoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PendingEntry {
    pub agent: Did,
    pub seq: u64,
    pub hash: Digest,
    pub class: AnchorClass,
}

impl From<&LogEntry> for PendingEntry {
    fn from(e: &LogEntry) -> Self {
        PendingEntry {
            agent: e.body.agent,
            seq: e.body.seq,
            hash: e.hash,
            class: e.body.anchor_class,
        }
    }
}

/// Entries waiting for a batch, kept in (agent DID, seq) order.
#[derive(Debug, Clone, Default)]
pub struct PendingPool {
    entries: BTreeMap<(Did, u64), PendingEntry>,
}

impl PendingPool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, entry: PendingEntry) {
        self.entries.insert((entry.agent, entry.seq), entry);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &PendingEntry> {
        self.entries.values()
    }

    /// Batches the policy would emit now, without consuming anything.
    pub fn plan(&self, policy: AnchorPolicy) -> Vec<Vec<PendingEntry>> {
        let all: Vec<PendingEntry> = self.entries.values().copied().collect();
        match policy {
            AnchorPolicy::EveryN(n) => full_chunks(&all, n),
            AnchorPolicy::CriticalImmediate { fallback_n } => {
                let (critical, routine): (Vec<_>, Vec<_>) =
                    all.into_iter().partition(|e| e.class == AnchorClass::Critical);
                let mut batches: Vec<Vec<PendingEntry>> =
                    critical.into_iter().map(|e| vec![e]).collect();
                batches.extend(full_chunks(&routine, fallback_n));
                batches
            }
            AnchorPolicy::Manual if all.is_empty() => Vec::new(),
            AnchorPolicy::Manual => vec![all],
        }
    }

    /// Drops entries from the pool, e.g. once a batch covering them is submitted.
    pub fn remove(&mut self, batch: &[PendingEntry]) {
        for e in batch {
            self.entries.remove(&(e.agent, e.seq));
        }
    }
}

fn full_chunks(entries: &[PendingEntry], n: u64) -> Vec<Vec<PendingEntry>> {
    let n = n.max(1) as usize;
    entries
        .chunks(n)
        .filter(|c| c.len() == n)
        .map(<[PendingEntry]>::to_vec)
        .collect()
}

/// Contiguous per-agent runs over leaves sorted by (agent, seq).
pub fn coverage_runs(batch: &[PendingEntry]) -> Vec<Coverage> {
    let mut runs: Vec<Coverage> = Vec::new();
    for e in batch {
        match runs.last_mut() {
            Some(run) if run.agent == e.agent && run.last_seq + 1 == e.seq => run.last_seq = e.seq,
            _ => runs.push(Coverage {
                agent: e.agent,
                first_seq: e.seq,
                last_seq: e.seq,
            }),
        }
    }
    runs
}

/// Builds and signs an anchor for `batch` without touching the ledger.
pub fn build_anchor(
    batch: &[PendingEntry],
    batch_id: String,
    submitter: &KeyPair,
    now_ms: i64,
) -> Result<BatchAnchor, AnchorError> {
    let hashes: Vec<Digest> = batch.iter().map(|e| e.hash).collect();
    let mut anchor = BatchAnchor {
        batch_id,
        submitter: submitter.did(),
        merkle_root: merkle_root(&hashes)?,
        leaf_count: batch.len() as u64,
        coverage: coverage_runs(batch),
        ts_ms: now_ms,
        sig: Signature([0; 64]),
        ledger_index: None,
    };
    anchor.sig = submitter.sign_value(&Value::Map(anchor.unsigned_body()));
    Ok(anchor)
}

/// Signs `batch` and appends it to the ledger as an "anchor" record.
pub fn submit_batch(
    batch: &[PendingEntry],
    submitter: &KeyPair,
    now_ms: i64,
    ledger: &mut dyn Ledger,
) -> Result<BatchAnchor, AnchorError> {
    let batch_id = format!("batch-{}", ledger.len());
    let mut anchor = build_anchor(batch, batch_id, submitter, now_ms)?;
    let record = ledger.append(RecordKind::Anchor, anchor.body(), now_ms)?;
    anchor.ledger_index = Some(record.idx);
    Ok(anchor)
}

/// Emits every batch the policy calls for, appending each to the ledger and
/// removing its entries from `pending`.
pub fn flush_batches(
    pending: &mut PendingPool,
    policy: AnchorPolicy,
    submitter: &KeyPair,
    now_ms: i64,
    ledger: &mut dyn Ledger,
) -> Result<Vec<BatchAnchor>, AnchorError> {
    policy.validate()?;
    let mut anchors = Vec::new();
    for batch in pending.plan(policy) {
        anchors.push(submit_batch(&batch, submitter, now_ms, ledger)?);
        pending.remove(&batch);
    }
    Ok(anchors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchor::ledger::MemoryLedger;
    use crate::canonical::digest;
    use crate::identity::generate_keypair;

    fn pending(agent: u8, seqs: std::ops::RangeInclusive<u64>, critical: &[u64]) -> Vec<PendingEntry> {
        let did = generate_keypair(Some(&[agent; 32])).unwrap().did();
        seqs.map(|seq| PendingEntry {
            agent: did,
            seq,
            hash: digest(format!("{agent}-{seq}").as_bytes()),
            class: if critical.contains(&seq) {
                AnchorClass::Critical
            } else {
                AnchorClass::Routine
            },
        })
        .collect()
    }

    fn pool(entries: Vec<PendingEntry>) -> PendingPool {
        let mut p = PendingPool::new();
        entries.into_iter().for_each(|e| p.add(e));
        p
    }

    #[test]
    fn every_n_leaves_residual() {
        let submitter = generate_keypair(Some(&[42; 32])).unwrap();
        let mut ledger = MemoryLedger::new();
        let mut entries = pending(1, 1..=6, &[]);
        entries.extend(pending(2, 1..=4, &[]));
        let mut p = pool(entries);
        let anchors = flush_batches(&mut p, AnchorPolicy::EveryN(4), &submitter, 0, &mut ledger).unwrap();
        assert_eq!(anchors.len(), 2);
        assert_eq!(p.len(), 2);
        assert_eq!(ledger.len(), 2);
        assert!(anchors.iter().all(|a| a.leaf_count == 4 && a.verify_signature()));
    }

    #[test]
    fn critical_immediate_singletons_then_routine() {
        let submitter = generate_keypair(Some(&[42; 32])).unwrap();
        let mut ledger = MemoryLedger::new();
        let mut p = pool(pending(1, 1..=4, &[2]));
        let anchors = flush_batches(
            &mut p,
            AnchorPolicy::CriticalImmediate { fallback_n: 3 },
            &submitter,
            0,
            &mut ledger,
        )
        .unwrap();
        assert_eq!(anchors.len(), 2);
        assert_eq!(anchors[0].leaf_count, 1);
        assert_eq!(anchors[0].coverage[0].first_seq, 2);
        // The routine batch skips seq 2, so it needs two coverage runs.
        assert_eq!(anchors[1].leaf_count, 3);
        assert_eq!(anchors[1].coverage.len(), 2);
        assert!(p.is_empty());
    }

    #[test]
    fn manual_with_nothing_pending_is_a_no_op() {
        let submitter = generate_keypair(Some(&[42; 32])).unwrap();
        let mut ledger = MemoryLedger::new();
        let mut p = PendingPool::new();
        let anchors = flush_batches(&mut p, AnchorPolicy::Manual, &submitter, 0, &mut ledger).unwrap();
        assert!(anchors.is_empty());
        assert!(ledger.is_empty());
    }

    #[test]
    fn anchor_record_round_trip() {
        let submitter = generate_keypair(Some(&[42; 32])).unwrap();
        let mut ledger = MemoryLedger::new();
        let mut p = pool(pending(3, 1..=5, &[]));
        let a = flush_batches(&mut p, AnchorPolicy::Manual, &submitter, 77, &mut ledger).unwrap();
        let back = BatchAnchor::from_record(&ledger.get(0).unwrap()).unwrap();
        assert_eq!(back, a[0]);
        assert!(back.verify_signature());
        assert_eq!(back.leaves().count() as u64, back.leaf_count);
    }

    #[test]
    fn zero_sized_policies_are_rejected() {
        assert!(AnchorPolicy::EveryN(0).validate().is_err());
        assert!(AnchorPolicy::CriticalImmediate { fallback_n: 0 }.validate().is_err());
    }
}
