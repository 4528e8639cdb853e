//! Deterministic multi-agent workflows with fault injection.
//!
//! A scenario commits every agent's policy, executes its steps in order as
//! sealed log entries with seeded synthetic parameters, anchors them with the
//! scenario's strategy and writes the result, together with a manifest of
//! the findings an audit must produce, to an output directory:
//!
//! ```text
//! keys/<role>.json  traces/<role>.ttkt  policies/<hash>.json
//! ledger.ttkl       expected_findings.json
//! ```
//!
//! Keys are derived from the seed and the role. They are deliberately
//! predictable and must never protect anything real.

mod fixtures;
mod manifest;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::anchor::ledger::{FileLedger, MemoryLedger};
use crate::anchor::{submit_batch, AnchorPolicy, PendingEntry, PendingPool};
use crate::audit::{audit_all, AuditReport, CheckKind, LoadError, Verdict};
use crate::canonical::{canonical_encode, digest, digest_value, Digest, Value};
use crate::fsutil::{write_atomic, write_private};
use crate::identity::{
    generate_keypair, keyfile_value, register_identity, AgentIdentity, Did, KeyPair,
};
use crate::policy::{commit_policy, ParameterConstraint, PolicyDocument, PolicyStore};
use crate::trace::{encode_trace, read_entries, ActionRecord, AnchorClass, EntryRef, LogEntry, TraceLog};

pub use fixtures::{
    builtin_legal, builtin_pharma, default_fault, DRAFTER, EU_COUNSEL, FAULT_NAMES, ORCHESTRATOR, REVIEWER,
    SYNTHESIZER, US_COUNSEL,
};
pub use manifest::{ExpectedFinding, Manifest};

/// Timestamp of step 0; step `i` happens at `BASE_EPOCH_MS + i * STEP_MS`.
pub const BASE_EPOCH_MS: i64 = 1_700_000_000_000;
pub const STEP_MS: i64 = 60_000;

pub const LEDGER_FILE: &str = "ledger.ttkl";
pub const MANIFEST_FILE: &str = "expected_findings.json";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ScenarioError {
    #[error("invalid scenario: {0}")]
    InvalidSpec(String),
    #[error("{}: {message}", path.display())]
    Io { path: PathBuf, message: String },
    #[error("generation failed: {0}")]
    Generation(String),
}

fn invalid(msg: impl Into<String>) -> ScenarioError {
    ScenarioError::InvalidSpec(msg.into())
}

fn gen_err(e: impl fmt::Display) -> ScenarioError {
    ScenarioError::Generation(e.to_string())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgentSpec {
    pub role: String,
    pub metadata: BTreeMap<String, Value>,
    /// Agents without a policy never act; they may still submit anchors.
    pub policy: Option<PolicyDocument>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParamTemplate {
    Fixed(Value),
    IntBetween(i64, i64),
    Choice(Vec<String>),
}

impl ParamTemplate {
    fn sample(&self, rng: &mut ChaCha20Rng) -> Value {
        match self {
            ParamTemplate::Fixed(v) => v.clone(),
            ParamTemplate::IntBetween(lo, hi) => Value::Int(rng.gen_range(*lo..=*hi)),
            ParamTemplate::Choice(items) => Value::str(&items[rng.gen_range(0..items.len())]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepSpec {
    pub role: String,
    pub action: String,
    pub params: BTreeMap<String, ParamTemplate>,
    /// Indices of earlier steps this one consumes.
    pub refs: Vec<usize>,
    pub anchor_class: AnchorClass,
    pub jurisdiction: String,
    pub data_labels: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BreachKind {
    DisallowedAction,
    ParamOutOfRange,
    WrongJurisdiction,
}

impl BreachKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BreachKind::DisallowedAction => "disallowed-action",
            BreachKind::ParamOutOfRange => "param-out-of-range",
            BreachKind::WrongJurisdiction => "wrong-jurisdiction",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TamperTarget {
    /// 1-based line of the role's trace file.
    Trace { role: String, line: usize },
    /// The ledger record of the `nth` submitted anchor.
    LedgerAnchor { nth: usize },
}

/// Where a fault is expected to surface.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Detection {
    /// The artifact no longer loads.
    Import,
    Check(CheckKind),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FaultInjection {
    /// XOR 0x01 into the middle byte of the targeted line.
    TamperByte(TamperTarget),
    /// Re-sign the step's entry with another agent's key.
    ForgeSignature { step: usize },
    PolicyBreach { step: usize, kind: BreachKind },
    /// Add a reference to an entry that does not exist.
    DanglingRef { step: usize },
    /// `from` gains a forward reference to `to` and `to` references `from`.
    CycleRef { from: usize, to: usize },
    /// Skip submitting the `batch`-th anchor batch.
    DropAnchor { batch: usize },
    /// `count` extra entries 1 ms apart right after the role's last step.
    RateBurst { role: String, count: usize },
}

impl FaultInjection {
    pub fn detected_by(&self) -> Detection {
        match self {
            FaultInjection::TamperByte(TamperTarget::Trace { .. }) => Detection::Import,
            FaultInjection::TamperByte(TamperTarget::LedgerAnchor { .. }) => {
                Detection::Check(CheckKind::LedgerCheck)
            }
            FaultInjection::ForgeSignature { .. } => Detection::Check(CheckKind::SignatureCheck),
            FaultInjection::PolicyBreach { .. } => Detection::Check(CheckKind::PolicyCheck),
            FaultInjection::DanglingRef { .. } | FaultInjection::CycleRef { .. } => {
                Detection::Check(CheckKind::LineageCheck)
            }
            FaultInjection::DropAnchor { .. } => Detection::Check(CheckKind::AnchorCheck),
            FaultInjection::RateBurst { .. } => Detection::Check(CheckKind::RateCheck),
        }
    }
}

impl fmt::Display for FaultInjection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FaultInjection::TamperByte(TamperTarget::Trace { role, line }) => {
                write!(f, "tamper-byte trace={role} line={line}")
            }
            FaultInjection::TamperByte(TamperTarget::LedgerAnchor { nth }) => {
                write!(f, "tamper-byte ledger-anchor={nth}")
            }
            FaultInjection::ForgeSignature { step } => write!(f, "forge-signature step={step}"),
            FaultInjection::PolicyBreach { step, kind } => {
                write!(f, "policy-breach step={step} kind={}", kind.as_str())
            }
            FaultInjection::DanglingRef { step } => write!(f, "dangling-ref step={step}"),
            FaultInjection::CycleRef { from, to } => write!(f, "cycle-ref from={from} to={to}"),
            FaultInjection::DropAnchor { batch } => write!(f, "drop-anchor batch={batch}"),
            FaultInjection::RateBurst { role, count } => write!(f, "rate-burst role={role} count={count}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScenarioSpec {
    pub name: String,
    pub agents: Vec<AgentSpec>,
    pub steps: Vec<StepSpec>,
    pub anchor_strategy: AnchorPolicy,
    /// Role whose key signs anchor batches.
    pub submitter: String,
    pub faults: Vec<FaultInjection>,
}

impl ScenarioSpec {
    pub fn with_fault(mut self, fault: FaultInjection) -> Self {
        self.faults.push(fault);
        self
    }

    fn role_index(&self, role: &str) -> Option<usize> {
        self.agents.iter().position(|a| a.role == role)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.agents.is_empty() {
            return Err(invalid("no agents"));
        }
        let roles: BTreeSet<&str> = self.agents.iter().map(|a| a.role.as_str()).collect();
        if roles.len() != self.agents.len() {
            return Err(invalid("duplicate agent role"));
        }
        if let Some(bad) = roles.iter().find(|r| r.is_empty() || r.contains(['/', '\\', '.'])) {
            return Err(invalid(format!("role {bad:?} is not usable as a file name")));
        }
        if self.role_index(&self.submitter).is_none() {
            return Err(invalid(format!("unknown submitter {:?}", self.submitter)));
        }
        self.anchor_strategy.validate().map_err(|e| invalid(e.to_string()))?;
        for (i, step) in self.steps.iter().enumerate() {
            let agent = self
                .role_index(&step.role)
                .map(|a| &self.agents[a])
                .ok_or_else(|| invalid(format!("step {i}: unknown role {:?}", step.role)))?;
            if agent.policy.is_none() {
                return Err(invalid(format!("step {i}: role {:?} has no policy", step.role)));
            }
            if let Some(r) = step.refs.iter().find(|&&r| r >= i) {
                return Err(invalid(format!("step {i}: reference to step {r} is not earlier")));
            }
            for (name, t) in &step.params {
                let empty = match t {
                    ParamTemplate::IntBetween(lo, hi) => lo > hi,
                    ParamTemplate::Choice(items) => items.is_empty(),
                    ParamTemplate::Fixed(_) => false,
                };
                if empty {
                    return Err(invalid(format!("step {i}: param {name:?} has no possible value")));
                }
            }
        }
        for fault in &self.faults {
            self.validate_fault(fault)?;
        }
        Ok(())
    }

    fn validate_fault(&self, fault: &FaultInjection) -> Result<(), ScenarioError> {
        let step_ok = |s: usize| {
            if s < self.steps.len() {
                Ok(())
            } else {
                Err(invalid(format!("{fault}: no step {s}")))
            }
        };
        match fault {
            FaultInjection::ForgeSignature { step } | FaultInjection::DanglingRef { step } => step_ok(*step),
            FaultInjection::PolicyBreach { step, kind } => {
                step_ok(*step)?;
                if *kind == BreachKind::ParamOutOfRange && self.range_param(*step).is_none() {
                    return Err(invalid(format!("{fault}: action has no int_range constraint")));
                }
                Ok(())
            }
            FaultInjection::CycleRef { from, to } => {
                step_ok(*to)?;
                if from >= to {
                    return Err(invalid(format!("{fault}: from must precede to")));
                }
                Ok(())
            }
            FaultInjection::RateBurst { role, count } => {
                if !self.steps.iter().any(|s| &s.role == role) {
                    return Err(invalid(format!("{fault}: role never acts")));
                }
                if *count == 0 || *count as i64 >= STEP_MS {
                    return Err(invalid(format!("{fault}: count must be in 1..{STEP_MS}")));
                }
                Ok(())
            }
            FaultInjection::TamperByte(TamperTarget::Trace { role, line }) => {
                if !self.steps.iter().any(|s| &s.role == role) || *line == 0 {
                    return Err(invalid(format!("{fault}: no such trace line")));
                }
                Ok(())
            }
            FaultInjection::TamperByte(TamperTarget::LedgerAnchor { .. })
            | FaultInjection::DropAnchor { .. } => Ok(()),
        }
    }

    fn policy_of(&self, role: &str) -> Option<&PolicyDocument> {
        self.agents.iter().find(|a| a.role == role)?.policy.as_ref()
    }

    /// First int_range-constrained parameter of the step's action.
    fn range_param(&self, step: usize) -> Option<(String, i64)> {
        let s = &self.steps[step];
        self.policy_of(&s.role)?
            .parameter_constraints
            .get(&s.action)?
            .iter()
            .find_map(|(name, c)| match c {
                ParameterConstraint::IntRange { max, .. } => Some((name.clone(), *max)),
                _ => None,
            })
    }
}

/// Deterministic, insecure key for `role` under `seed`.
pub fn scenario_key(seed: u64, role: &str) -> KeyPair {
    let material = digest_value(&Value::List(vec![
        Value::str("ttk-scenario-key"),
        Value::Int(seed as i64),
        Value::str(role),
    ]));
    generate_keypair(Some(material.as_bytes())).expect("32-byte seed")
}

/// A generated scenario held in memory: relative path → file bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bundle {
    pub files: BTreeMap<String, Vec<u8>>,
    pub manifest: Manifest,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScenarioArtifacts {
    pub dir: PathBuf,
    pub files: Vec<PathBuf>,
    pub manifest: Manifest,
}

pub fn trace_file(role: &str) -> String {
    format!("traces/{role}.ttkt")
}

pub fn key_file(role: &str) -> String {
    format!("keys/{role}.json")
}

#[derive(Debug, Clone)]
struct BatchRecord {
    ledger_idx: Option<u64>,
    leaves: Vec<(Did, u64)>,
}

/// Accumulates expected findings, merged the same way a report merges them.
#[derive(Debug, Default)]
struct Expectations {
    map: BTreeMap<(Option<Did>, u64, CheckKind), (Verdict, BTreeSet<String>)>,
}

impl Expectations {
    fn add(&mut self, agent: Option<Did>, seq: u64, check: CheckKind, verdict: Verdict, code: &str) {
        let slot = self
            .map
            .entry((agent, seq, check))
            .or_insert_with(|| (verdict, BTreeSet::new()));
        if verdict > slot.0 {
            *slot = (verdict, BTreeSet::new());
        }
        if verdict == slot.0 {
            slot.1.insert(code.to_owned());
        }
    }

    fn into_findings(self) -> Vec<ExpectedFinding> {
        self.map
            .into_iter()
            .map(|((agent, seq, check), (verdict, codes))| ExpectedFinding {
                agent,
                seq,
                check,
                verdict,
                reason: codes.into_iter().collect::<Vec<_>>().join("+"),
            })
            .collect()
    }
}

struct Run<'a> {
    spec: &'a ScenarioSpec,
    seed: u64,
    rng: ChaCha20Rng,
    keys: Vec<KeyPair>,
    ledger: MemoryLedger,
    policies: BTreeMap<Digest, Vec<u8>>,
    policy_hash: Vec<Option<Digest>>,
    logs: Vec<TraceLog>,
    pool: PendingPool,
    batches: Vec<BatchRecord>,
    emitted: usize,
    expect: Expectations,
    import_error: Option<(String, usize)>,
}

impl Run<'_> {
    fn did(&self, role: usize) -> Did {
        self.keys[role].did()
    }

    fn submitter(&self) -> &KeyPair {
        &self.keys[self.spec.role_index(&self.spec.submitter).expect("validated")]
    }

    fn flush(&mut self, policy: AnchorPolicy, now_ms: i64) -> Result<(), ScenarioError> {
        let dropped: Vec<usize> = self
            .spec
            .faults
            .iter()
            .filter_map(|f| match f {
                FaultInjection::DropAnchor { batch } => Some(*batch),
                _ => None,
            })
            .collect();
        for batch in self.pool.plan(policy) {
            let leaves: Vec<(Did, u64)> = batch.iter().map(|e| (e.agent, e.seq)).collect();
            let ledger_idx = if dropped.contains(&self.emitted) {
                None
            } else {
                let submitter = self.submitter().clone();
                let anchor = submit_batch(&batch, &submitter, now_ms, &mut self.ledger).map_err(gen_err)?;
                anchor.ledger_index
            };
            self.pool.remove(&batch);
            self.batches.push(BatchRecord { ledger_idx, leaves });
            self.emitted += 1;
        }
        Ok(())
    }

    fn setup(&mut self) -> Result<(), ScenarioError> {
        for (i, agent) in self.spec.agents.iter().enumerate() {
            let key = &self.keys[i];
            let mut metadata = agent.metadata.clone();
            metadata.insert("role".into(), Value::str(&agent.role));
            let ts = BASE_EPOCH_MS - 600_000 + i as i64;
            register_identity(&AgentIdentity::new(key.did(), metadata), key, ts, &mut self.ledger)
                .map_err(gen_err)?;
        }
        for (i, agent) in self.spec.agents.iter().enumerate() {
            let Some(template) = &agent.policy else {
                self.policy_hash.push(None);
                continue;
            };
            let mut doc = template.clone();
            doc.agent_did = self.did(i);
            let mut store = PolicyStore::in_memory();
            let ts = BASE_EPOCH_MS - 300_000 + i as i64;
            let c = commit_policy(&doc, &self.keys[i], ts, &mut self.ledger, &mut store)
                .map_err(gen_err)?;
            self.policies.insert(c.policy_hash, doc.canonical_bytes());
            self.policy_hash.push(Some(c.policy_hash));
        }
        Ok(())
    }

    /// Sequence number each step will receive in its agent's log.
    fn planned_seqs(&self) -> Vec<u64> {
        let mut counts: HashMap<&str, u64> = HashMap::new();
        self.spec
            .steps
            .iter()
            .map(|s| {
                let c = counts.entry(&s.role).or_default();
                *c += 1;
                *c
            })
            .collect()
    }

    fn execute(&mut self) -> Result<(), ScenarioError> {
        let spec = self.spec;
        let seqs = self.planned_seqs();
        let mut produced: Vec<(usize, u64)> = Vec::new();
        let last_step_of = |role: &str| spec.steps.iter().rposition(|s| s.role == role);
        for (i, step) in spec.steps.iter().enumerate() {
            let role = spec.role_index(&step.role).expect("validated");
            let ts = BASE_EPOCH_MS + i as i64 * STEP_MS;
            let mut action = ActionRecord::new(&step.action, ts);
            for (name, t) in &step.params {
                action.params.insert(name.clone(), t.sample(&mut self.rng));
            }
            action.ctx.insert("jurisdiction".into(), Value::str(&step.jurisdiction));
            action.ctx.insert(
                "data_labels".into(),
                Value::List(step.data_labels.iter().map(Value::str).collect()),
            );
            action.anchor_class = step.anchor_class;
            for &r in &step.refs {
                let (up_role, up_seq) = produced[r];
                let up = &self.logs[up_role].entries[up_seq as usize - 1];
                action.inputs.extend(up.body.outputs.iter().copied());
                action.refs.push(EntryRef::to(up));
            }
            action.outputs.push(self.random_digest());
            self.inject_at_step(i, role, &seqs, &produced, &mut action);

            let policy = self.policy_hash[role].expect("acting roles have policies");
            let entry = self.logs[role].record(&self.keys[role], policy, action).map_err(gen_err)?;
            self.pool.add(PendingEntry::from(entry));
            produced.push((role, entry.body.seq));

            for fault in &spec.faults {
                if let FaultInjection::RateBurst { role: r, count } = fault {
                    if *r == step.role && last_step_of(r) == Some(i) {
                        self.burst(role, step, *count, ts)?;
                    }
                }
            }
            self.flush(spec.anchor_strategy, ts)?;
        }
        let end = BASE_EPOCH_MS + spec.steps.len() as i64 * STEP_MS;
        self.flush(AnchorPolicy::Manual, end)
    }

    fn random_digest(&mut self) -> Digest {
        let mut bytes = [0u8; 32];
        self.rng.fill_bytes(&mut bytes);
        digest(&bytes)
    }

    fn burst(&mut self, role: usize, step: &StepSpec, count: usize, ts: i64) -> Result<(), ScenarioError> {
        let template = self.logs[role].last().expect("role just acted").body.clone();
        for k in 1..=count as i64 {
            let mut action = ActionRecord::new(&template.action, ts + k);
            action.params = template.params.clone();
            action.ctx = template.ctx.clone();
            action.outputs.push(self.random_digest());
            let policy = self.policy_hash[role].expect("acting roles have policies");
            let entry = self.logs[role].record(&self.keys[role], policy, action).map_err(gen_err)?;
            self.pool.add(PendingEntry::from(entry));
        }
        debug_assert_eq!(template.action, step.action);
        Ok(())
    }

    /// Faults realized while the step executes: the honest signer records
    /// something it should not have.
    fn inject_at_step(
        &mut self,
        i: usize,
        role: usize,
        seqs: &[u64],
        produced: &[(usize, u64)],
        action: &mut ActionRecord,
    ) {
        let spec = self.spec;
        let did = self.did(role);
        let seq = seqs[i];
        for fault in &spec.faults {
            match fault {
                FaultInjection::PolicyBreach { step, kind } if *step == i => {
                    let doc = spec.policy_of(&spec.steps[i].role).expect("validated");
                    let code = match kind {
                        BreachKind::DisallowedAction => {
                            action.action = "export_raw_records".into();
                            "ActionNotAllowed"
                        }
                        BreachKind::ParamOutOfRange => {
                            let (name, max) = spec.range_param(i).expect("validated");
                            action.params.insert(name, Value::Int(max + 1));
                            "ParamViolation"
                        }
                        BreachKind::WrongJurisdiction => {
                            let foreign = ["CN", "EU", "US-CA", "US", "BR"]
                                .into_iter()
                                .find(|j| !doc.jurisdictions.contains(*j))
                                .expect("a foreign jurisdiction");
                            action.ctx.insert("jurisdiction".into(), Value::str(foreign));
                            "JurisdictionMismatch"
                        }
                    };
                    self.expect.add(Some(did), seq, CheckKind::PolicyCheck, Verdict::Violation, code);
                }
                FaultInjection::DanglingRef { step } if *step == i => {
                    let other = (0..spec.agents.len()).find(|&a| a != role).unwrap_or(role);
                    action.refs.push(EntryRef {
                        agent: self.did(other),
                        seq: 999,
                        hash: digest_value(&Value::List(vec![
                            Value::str("ttk-dangling-ref"),
                            Value::Int(self.seed as i64),
                            Value::Int(i as i64),
                        ])),
                    });
                    self.expect.add(Some(did), seq, CheckKind::LineageCheck, Verdict::Violation, "DanglingRef");
                }
                FaultInjection::CycleRef { from, to } if *from == i => {
                    // The target does not exist yet, so its hash is unknowable.
                    let target = spec.role_index(&spec.steps[*to].role).expect("validated");
                    action.refs.push(EntryRef {
                        agent: self.did(target),
                        seq: seqs[*to],
                        hash: Digest::ZERO,
                    });
                    self.expect.add(Some(did), seq, CheckKind::LineageCheck, Verdict::Violation, "RefHashMismatch");
                }
                FaultInjection::CycleRef { from, to } if *to == i => {
                    if !spec.steps[i].refs.contains(from) {
                        let (up_role, up_seq) = produced[*from];
                        action.refs.push(EntryRef::to(&self.logs[up_role].entries[up_seq as usize - 1]));
                    }
                }
                _ => {}
            }
        }
    }

    /// Expectations that follow from the finished logs and batches: cycles,
    /// dropped anchors and rate limits, recounted by brute force.
    fn expect_from_outcome(&mut self) {
        let spec = self.spec;
        let seqs = self.planned_seqs();
        for fault in &spec.faults {
            if let FaultInjection::CycleRef { from, .. } = fault {
                let role = spec.role_index(&spec.steps[*from].role).expect("validated");
                let start = (self.did(role), seqs[*from]);
                for (agent, seq) in cycle_members(&self.logs, start) {
                    self.expect.add(Some(agent), seq, CheckKind::LineageCheck, Verdict::Violation, "CycleDetected");
                }
            }
        }
        for b in self.batches.iter().filter(|b| b.ledger_idx.is_none()) {
            for &(agent, seq) in &b.leaves {
                self.expect.add(Some(agent), seq, CheckKind::AnchorCheck, Verdict::Unverifiable, "Unanchored");
            }
        }
        for (role, log) in self.logs.iter().enumerate() {
            let Some(doc) = spec.agents[role].policy.as_ref() else {
                continue;
            };
            for limit in &doc.rate_limits {
                let hits = |e: &&LogEntry| limit.applies_to(&e.body.action);
                for e in log.entries.iter().filter(hits) {
                    let count = log
                        .entries
                        .iter()
                        .filter(hits)
                        .filter(|o| o.body.ts_ms <= e.body.ts_ms && o.body.ts_ms > e.body.ts_ms - limit.window_ms)
                        .count();
                    if count as i64 > limit.max_actions {
                        self.expect
                            .add(Some(log.agent), e.body.seq, CheckKind::RateCheck, Verdict::Violation, "RateViolation");
                    }
                }
            }
        }
    }

    /// Faults applied to the finished evidence, as an adversary would.
    fn forge(&mut self, step: usize) -> Result<(), ScenarioError> {
        let spec = self.spec;
        let role = spec.role_index(&spec.steps[step].role).expect("validated");
        let seq = self.planned_seqs()[step];
        let forger = (role + 1) % spec.agents.len();
        if forger == role {
            return Err(invalid("forging needs at least two agents"));
        }
        let did = self.did(role);
        let entry = &mut self.logs[role].entries[seq as usize - 1];
        entry.sig = self.keys[forger].sign_value(&entry.body.to_value());
        entry.hash = LogEntry::compute_hash(&entry.body, &entry.sig);

        let e = &mut self.expect;
        e.add(Some(did), seq, CheckKind::SignatureCheck, Verdict::Violation, "BadSignature");
        if (seq as usize) < self.logs[role].entries.len() {
            e.add(Some(did), seq + 1, CheckKind::ChainCheck, Verdict::Violation, "ChainBreak");
        }
        if let Some(b) = self
            .batches
            .iter()
            .find(|b| b.ledger_idx.is_some() && b.leaves.contains(&(did, seq)))
        {
            for &(agent, s) in &b.leaves {
                e.add(Some(agent), s, CheckKind::AnchorCheck, Verdict::Violation, "RootMismatch");
            }
        }
        for down in self.logs.iter().flat_map(|l| &l.entries) {
            if down.body.refs.iter().any(|r| r.agent == did && r.seq == seq) {
                e.add(Some(down.body.agent), down.body.seq, CheckKind::LineageCheck, Verdict::Violation, "RefHashMismatch");
            }
        }
        Ok(())
    }

    fn tamper(&mut self, target: &TamperTarget, files: &mut BTreeMap<String, Vec<u8>>) -> Result<(), ScenarioError> {
        let (file, line) = match target {
            TamperTarget::Trace { role, line } => (trace_file(role), *line),
            TamperTarget::LedgerAnchor { nth } => {
                let b = self
                    .batches
                    .iter()
                    .filter(|b| b.ledger_idx.is_some())
                    .nth(*nth)
                    .ok_or_else(|| invalid(format!("no submitted anchor #{nth}")))?
                    .clone();
                let idx = b.ledger_idx.expect("filtered");
                self.expect.add(None, idx, CheckKind::LedgerCheck, Verdict::Violation, "CorruptRecord");
                for (agent, seq) in b.leaves {
                    self.expect.add(Some(agent), seq, CheckKind::AnchorCheck, Verdict::Unverifiable, "Unanchored");
                }
                (LEDGER_FILE.to_owned(), idx as usize + 1)
            }
        };
        let bytes = files.get_mut(&file).ok_or_else(|| invalid(format!("no file {file}")))?;
        let (start, len) = line_span(bytes, line).ok_or_else(|| invalid(format!("{file} has no line {line}")))?;
        bytes[start + len / 2] ^= 0x01;
        if matches!(target, TamperTarget::Trace { .. }) {
            self.import_error = Some((file, line));
        }
        Ok(())
    }
}

/// Byte offset and length (without terminator) of 1-based `line`.
fn line_span(bytes: &[u8], line: usize) -> Option<(usize, usize)> {
    let mut start = 0;
    for (i, l) in bytes.split(|&b| b == b'\n').enumerate() {
        if i + 1 == line {
            return (!l.is_empty()).then_some((start, l.len()));
        }
        start += l.len() + 1;
    }
    None
}

/// Entries on a reference cycle through `start`: those reachable from it
/// that can also reach it, following every reference to an existing entry.
fn cycle_members(logs: &[TraceLog], start: (Did, u64)) -> BTreeSet<(Did, u64)> {
    let mut adj: BTreeMap<(Did, u64), Vec<(Did, u64)>> = BTreeMap::new();
    for e in logs.iter().flat_map(|l| &l.entries) {
        adj.entry((e.body.agent, e.body.seq)).or_default();
    }
    for e in logs.iter().flat_map(|l| &l.entries) {
        for r in &e.body.refs {
            if adj.contains_key(&(r.agent, r.seq)) {
                adj.get_mut(&(e.body.agent, e.body.seq)).expect("inserted").push((r.agent, r.seq));
            }
        }
    }
    let reach = |from: (Did, u64), forward: bool| {
        let mut seen = BTreeSet::new();
        let mut stack = vec![from];
        while let Some(n) = stack.pop() {
            let next: Vec<(Did, u64)> = if forward {
                adj[&n].clone()
            } else {
                adj.iter().filter(|(_, v)| v.contains(&n)).map(|(k, _)| *k).collect()
            };
            for m in next {
                if seen.insert(m) {
                    stack.push(m);
                }
            }
        }
        seen
    };
    let down = reach(start, true);
    let up = reach(start, false);
    down.intersection(&up).copied().collect()
}

/// Generates the scenario entirely in memory.
pub fn generate(spec: &ScenarioSpec, seed: u64) -> Result<Bundle, ScenarioError> {
    spec.validate()?;
    let keys: Vec<KeyPair> = spec.agents.iter().map(|a| scenario_key(seed, &a.role)).collect();
    let mut run = Run {
        spec,
        seed,
        rng: ChaCha20Rng::seed_from_u64(seed),
        logs: keys.iter().map(|k| TraceLog::new(k.did())).collect(),
        keys,
        ledger: MemoryLedger::new(),
        policies: BTreeMap::new(),
        policy_hash: Vec::new(),
        pool: PendingPool::new(),
        batches: Vec::new(),
        emitted: 0,
        expect: Expectations::default(),
        import_error: None,
    };
    run.setup()?;
    run.execute()?;
    run.expect_from_outcome();
    for fault in &spec.faults {
        if let FaultInjection::ForgeSignature { step } = fault {
            run.forge(*step)?;
        }
    }
    if let Some(batch) = spec.faults.iter().find_map(|f| match f {
        FaultInjection::DropAnchor { batch } if *batch >= run.batches.len() => Some(*batch),
        _ => None,
    }) {
        return Err(invalid(format!("no anchor batch {batch}")));
    }

    let mut files = BTreeMap::new();
    for (i, agent) in spec.agents.iter().enumerate() {
        let mut key = canonical_encode(&keyfile_value(&run.keys[i]));
        key.push(b'\n');
        files.insert(key_file(&agent.role), key);
        if spec.steps.iter().any(|s| s.role == agent.role) {
            files.insert(trace_file(&agent.role), encode_trace(&run.logs[i]));
        }
    }
    for (hash, bytes) in &run.policies {
        files.insert(format!("policies/{}", PolicyStore::file_name(hash)), bytes.clone());
    }
    files.insert(
        LEDGER_FILE.to_owned(),
        run.ledger.records().iter().flat_map(|r| r.to_line()).collect(),
    );
    for fault in &spec.faults {
        if let FaultInjection::TamperByte(target) = fault {
            run.tamper(target, &mut files)?;
        }
    }

    let manifest = Manifest::new(
        &spec.name,
        seed,
        spec.faults.iter().map(ToString::to_string).collect(),
        std::mem::take(&mut run.expect).into_findings(),
        run.import_error.take(),
    );
    let mut bytes = canonical_encode(&manifest.to_value());
    bytes.push(b'\n');
    files.insert(MANIFEST_FILE.to_owned(), bytes);
    Ok(Bundle { files, manifest })
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> ScenarioError + '_ {
    move |e| ScenarioError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Generates the scenario and writes it under `out`. Only the paths the
/// scenario owns are replaced; anything else in `out` is left alone.
pub fn run_scenario(spec: &ScenarioSpec, seed: u64, out: &Path) -> Result<ScenarioArtifacts, ScenarioError> {
    let bundle = generate(spec, seed)?;
    for dir in ["keys", "traces", "policies"] {
        let p = out.join(dir);
        match fs::remove_dir_all(&p) {
            Err(e) if e.kind() != io::ErrorKind::NotFound => return Err(io_err(&p)(e)),
            _ => {}
        }
    }
    for file in [LEDGER_FILE, MANIFEST_FILE] {
        let p = out.join(file);
        match fs::remove_file(&p) {
            Err(e) if e.kind() != io::ErrorKind::NotFound => return Err(io_err(&p)(e)),
            _ => {}
        }
    }
    let mut written = Vec::new();
    for (rel, bytes) in &bundle.files {
        let path = out.join(rel);
        let parent = path.parent().expect("relative paths have parents");
        fs::create_dir_all(parent).map_err(io_err(parent))?;
        if rel.starts_with("keys/") {
            write_private(&path, bytes)
        } else {
            write_atomic(&path, bytes)
        }
        .map_err(io_err(&path))?;
        written.push(path);
    }
    Ok(ScenarioArtifacts {
        dir: out.to_path_buf(),
        files: written,
        manifest: bundle.manifest,
    })
}

/// Audits in-memory artifacts laid out like a scenario directory. Trace
/// files load in name order; load errors name the relative path.
pub fn audit_bundle(files: &BTreeMap<String, Vec<u8>>) -> Result<AuditReport, LoadError> {
    let mut logs = Vec::new();
    for (name, bytes) in files.range("traces/".to_owned()..) {
        if !name.starts_with("traces/") {
            break;
        }
        if !name.ends_with(".ttkt") {
            continue;
        }
        let entries = read_entries(bytes).map_err(|e| LoadError::Trace {
            path: name.into(),
            line: e.line,
            message: e.error.to_string(),
        })?;
        if let Some(first) = entries.first() {
            logs.push(TraceLog {
                agent: first.body.agent,
                entries,
            });
        }
    }
    let mut store = PolicyStore::in_memory();
    for (name, bytes) in files {
        let hash = name
            .strip_prefix("policies/")
            .and_then(|n| n.strip_suffix(".json"))
            .and_then(|h| h.parse::<Digest>().ok());
        if let Some(hash) = hash {
            store.blobs_mut().insert(hash, bytes.clone());
        }
    }
    let ledger_bytes = files.get(LEDGER_FILE).map(Vec::as_slice).unwrap_or_default();
    let ledger = FileLedger::from_bytes(LEDGER_FILE, ledger_bytes);
    Ok(audit_all(&logs, &ledger, &store))
}

/// Reads a scenario directory and audits it with [`audit_bundle`].
pub fn audit_dir(dir: &Path) -> Result<AuditReport, LoadError> {
    let mut files = BTreeMap::new();
    let io = |path: &Path, e: io::Error| LoadError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    for sub in ["traces", "policies"] {
        let d = dir.join(sub);
        let entries = match fs::read_dir(&d) {
            Ok(entries) => entries,
            Err(e) if e.kind() == io::ErrorKind::NotFound => continue,
            Err(e) => return Err(io(&d, e)),
        };
        for entry in entries {
            let entry = entry.map_err(|e| io(&d, e))?;
            let path = entry.path();
            let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
                continue;
            };
            if name.starts_with('.') {
                continue;
            }
            let bytes = fs::read(&path).map_err(|e| io(&path, e))?;
            files.insert(format!("{sub}/{name}"), bytes);
        }
    }
    let ledger = dir.join(LEDGER_FILE);
    files.insert(LEDGER_FILE.to_owned(), fs::read(&ledger).map_err(|e| io(&ledger, e))?);
    audit_bundle(&files)
}

/// Loads the manifest written next to a scenario's artifacts.
pub fn read_manifest(dir: &Path) -> Result<Manifest, ScenarioError> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    Manifest::parse(&bytes).map_err(|e| ScenarioError::Io {
        path,
        message: e.to_string(),
    })
}
