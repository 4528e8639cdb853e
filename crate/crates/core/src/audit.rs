//! Verification engine: signatures, chain continuity, policy conformance, rate
//! limits, anchoring, identity status and cross-agent lineage, folded into an
//! attribution-bearing report.
//!
//! Every check yields one [`Finding`] per entry. When several problems hit the
//! same (agent, seq, check), they merge into a single finding whose verdict is
//! the most severe one and whose reason joins the codes at that severity with
//! `+` in sorted order.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::anchor::ledger::{verify_chain, FileLedger, Ledger, LedgerError, RecordKind};
use crate::anchor::{merkle_verify, BatchAnchor, MerkleTree};
use crate::canonical::{canonical_encode, decode_canonical, Digest, FieldError, Fields, Value};
use crate::identity::{did_field, Did, Registry, Resolution};
use crate::policy::{check_action, check_rate, PolicyCommitment, PolicyError, PolicyStore};
use crate::trace::{read_entries, LogEntry, TraceLog};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CheckKind {
    AnchorCheck,
    ChainCheck,
    IdentityCheck,
    LedgerCheck,
    LineageCheck,
    PolicyCheck,
    RateCheck,
    SignatureCheck,
}

impl CheckKind {
    pub const ALL: [CheckKind; 8] = [
        CheckKind::AnchorCheck,
        CheckKind::ChainCheck,
        CheckKind::IdentityCheck,
        CheckKind::LedgerCheck,
        CheckKind::LineageCheck,
        CheckKind::PolicyCheck,
        CheckKind::RateCheck,
        CheckKind::SignatureCheck,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CheckKind::AnchorCheck => "AnchorCheck",
            CheckKind::ChainCheck => "ChainCheck",
            CheckKind::IdentityCheck => "IdentityCheck",
            CheckKind::LedgerCheck => "LedgerCheck",
            CheckKind::LineageCheck => "LineageCheck",
            CheckKind::PolicyCheck => "PolicyCheck",
            CheckKind::RateCheck => "RateCheck",
            CheckKind::SignatureCheck => "SignatureCheck",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        CheckKind::ALL.into_iter().find(|c| c.as_str() == s)
    }
}

impl fmt::Display for CheckKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Ordered by severity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Verdict {
    Valid,
    Warning,
    Unverifiable,
    Violation,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Valid => "VALID",
            Verdict::Warning => "WARNING",
            Verdict::Unverifiable => "UNVERIFIABLE",
            Verdict::Violation => "VIOLATION",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Verdict::Valid, Verdict::Warning, Verdict::Unverifiable, Verdict::Violation]
            .into_iter()
            .find(|v| v.as_str() == s)
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub const OK: &str = "OK";

/// One check outcome. Ledger-level findings have no agent; their `seq` is the
/// ledger index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Finding {
    pub agent: Option<Did>,
    pub seq: u64,
    pub check: CheckKind,
    pub verdict: Verdict,
    pub reason: String,
    pub detail: String,
}

impl Finding {
    pub fn subject(&self) -> String {
        match self.agent {
            Some(d) => d.to_string(),
            None => "ledger".to_owned(),
        }
    }

    fn sort_key(&self) -> (Option<Did>, u64, CheckKind) {
        (self.agent, self.seq, self.check)
    }

    pub fn to_value(&self) -> Value {
        Value::map([
            ("agent", self.agent.map_or(Value::Null, Value::from)),
            ("seq", Value::Int(self.seq as i64)),
            ("check", Value::str(self.check.as_str())),
            ("verdict", Value::str(self.verdict.as_str())),
            ("reason", Value::str(&self.reason)),
            ("detail", Value::str(&self.detail)),
        ])
    }

    pub fn from_value(v: &Value) -> Result<Self, FieldError> {
        let f = Fields::new(v, "finding")?.only(&["agent", "seq", "check", "verdict", "reason", "detail"])?;
        let check = f.str("check")?;
        let verdict = f.str("verdict")?;
        Ok(Finding {
            agent: match f.opt("agent") {
                None => None,
                Some(_) => Some(did_field(&f, "agent")?),
            },
            seq: f.int("seq")? as u64,
            check: CheckKind::parse(check).ok_or_else(|| FieldError::new("check", "unknown check"))?,
            verdict: Verdict::parse(verdict)
                .ok_or_else(|| FieldError::new("verdict", "unknown verdict"))?,
            reason: f.str("reason")?.to_owned(),
            detail: f.str("detail")?.to_owned(),
        })
    }
}

#[derive(Debug, Clone)]
struct Outcome {
    verdict: Verdict,
    code: String,
    detail: String,
}

/// Accumulates outcomes and merges them per (agent, seq, check).
#[derive(Debug, Default)]
pub struct FindingSet {
    outcomes: BTreeMap<(Option<Did>, u64, CheckKind), Vec<Outcome>>,
}

impl FindingSet {
    pub fn push(
        &mut self,
        agent: Option<Did>,
        seq: u64,
        check: CheckKind,
        verdict: Verdict,
        code: impl Into<String>,
        detail: impl Into<String>,
    ) {
        self.outcomes.entry((agent, seq, check)).or_default().push(Outcome {
            verdict,
            code: code.into(),
            detail: detail.into(),
        });
    }

    pub fn valid(&mut self, agent: Did, seq: u64, check: CheckKind) {
        self.push(Some(agent), seq, check, Verdict::Valid, OK, "");
    }

    pub fn extend(&mut self, other: FindingSet) {
        for (k, v) in other.outcomes {
            self.outcomes.entry(k).or_default().extend(v);
        }
    }

    pub fn into_findings(self) -> Vec<Finding> {
        self.outcomes
            .into_iter()
            .map(|((agent, seq, check), outcomes)| {
                let verdict = outcomes.iter().map(|o| o.verdict).max().unwrap_or(Verdict::Valid);
                let top: Vec<&Outcome> = outcomes.iter().filter(|o| o.verdict == verdict).collect();
                let codes: BTreeSet<&str> = top.iter().map(|o| o.code.as_str()).collect();
                let details: BTreeSet<&str> = top
                    .iter()
                    .map(|o| o.detail.as_str())
                    .filter(|d| !d.is_empty())
                    .collect();
                Finding {
                    agent,
                    seq,
                    check,
                    verdict,
                    reason: codes.into_iter().collect::<Vec<_>>().join("+"),
                    detail: details.into_iter().collect::<Vec<_>>().join("; "),
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
enum BatchStatus {
    Verified(MerkleTree),
    RootMismatch,
    Incomplete(String),
}

/// Everything the auditor derives from the ledger, tolerating corrupt or
/// rejected records (they are reported, not trusted).
#[derive(Debug, Default)]
pub struct LedgerView {
    registry: Registry,
    commitments: HashMap<(Digest, Did), Vec<PolicyCommitment>>,
    anchors: BTreeMap<u64, BatchAnchor>,
    coverage: HashMap<(Did, u64), Vec<u64>>,
    chain_fault: Option<crate::anchor::ledger::ChainFault>,
    rejected: Vec<(u64, String)>,
}

impl LedgerView {
    pub fn build(ledger: &dyn Ledger) -> Self {
        let mut view = LedgerView {
            chain_fault: verify_chain(ledger).err(),
            ..Default::default()
        };
        for idx in 0..ledger.len() {
            let Ok(record) = ledger.get(idx) else {
                continue;
            };
            match record.kind {
                RecordKind::Identity | RecordKind::Revocation => {
                    if !view.registry.apply(&record) {
                        view.rejected.push((idx, format!("{} record not applied", record.kind)));
                    }
                }
                RecordKind::Policy => match PolicyCommitment::from_record(&record) {
                    Ok(c) if c.verify() => view
                        .commitments
                        .entry((c.policy_hash, c.agent_did))
                        .or_default()
                        .push(c),
                    Ok(_) => view.rejected.push((idx, "policy commitment signature invalid".into())),
                    Err(e) => view.rejected.push((idx, e.to_string())),
                },
                RecordKind::Anchor => match BatchAnchor::from_record(&record) {
                    Ok(a) => {
                        if let Some(problem) = view.anchor_problem(&a) {
                            view.rejected.push((idx, problem));
                        } else {
                            for key in a.leaves() {
                                view.coverage.entry(key).or_default().push(idx);
                            }
                            view.anchors.insert(idx, a);
                        }
                    }
                    Err(e) => view.rejected.push((idx, e.to_string())),
                },
            }
        }
        view
    }

    fn anchor_problem(&self, a: &BatchAnchor) -> Option<String> {
        if !a.verify_signature() {
            return Some("anchor signature invalid".into());
        }
        if a.covered_count() != a.leaf_count {
            return Some("anchor leaf_count disagrees with coverage".into());
        }
        match self.registry.resolve(&a.submitter) {
            Resolution::Registered(_) => None,
            Resolution::NotFound => Some(format!("anchor submitter {} not registered", a.submitter)),
            Resolution::Revoked { .. } => Some(format!("anchor submitter {} revoked", a.submitter)),
        }
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn anchors(&self) -> impl Iterator<Item = &BatchAnchor> {
        self.anchors.values()
    }

    pub fn is_committed(&self, policy: &Digest, agent: &Did) -> bool {
        self.commitments.contains_key(&(*policy, *agent))
    }
}

/// Verification context: the ledger view, policy store and the hashes of every
/// entry in the audited logs (needed to rebuild anchored batches).
pub struct AuditContext<'a> {
    view: LedgerView,
    store: &'a PolicyStore,
    batches: HashMap<u64, BatchStatus>,
}

impl<'a> AuditContext<'a> {
    pub fn new(logs: &[TraceLog], ledger: &dyn Ledger, store: &'a PolicyStore) -> Self {
        let view = LedgerView::build(ledger);
        let hashes: HashMap<(Did, u64), Digest> = logs
            .iter()
            .flat_map(|l| &l.entries)
            .map(|e| ((e.body.agent, e.body.seq), e.hash))
            .collect();
        let batches = view
            .anchors
            .iter()
            .map(|(&idx, anchor)| (idx, batch_status(anchor, &hashes)))
            .collect();
        AuditContext {
            view,
            store,
            batches,
        }
    }

    pub fn view(&self) -> &LedgerView {
        &self.view
    }

    /// Ledger index of the first anchor whose rebuilt root proves inclusion.
    fn proven_anchor(&self, entry: &LogEntry) -> Option<u64> {
        let key = (entry.body.agent, entry.body.seq);
        self.view.coverage.get(&key)?.iter().copied().find(|idx| {
            let (Some(BatchStatus::Verified(tree)), Some(anchor)) =
                (self.batches.get(idx), self.view.anchors.get(idx))
            else {
                return false;
            };
            let Some(pos) = anchor.leaves().position(|k| k == key) else {
                return false;
            };
            tree.prove(pos).is_ok_and(|mut proof| {
                proof.leaf_hash = entry.hash;
                proof.root = anchor.merkle_root;
                merkle_verify(&proof)
            })
        })
    }
}

fn batch_status(anchor: &BatchAnchor, hashes: &HashMap<(Did, u64), Digest>) -> BatchStatus {
    let mut leaves = Vec::with_capacity(anchor.leaf_count as usize);
    for (agent, seq) in anchor.leaves() {
        match hashes.get(&(agent, seq)) {
            Some(h) => leaves.push(*h),
            None => return BatchStatus::Incomplete(format!("{agent} seq {seq} not among audited logs")),
        }
    }
    match MerkleTree::build(&leaves) {
        Ok(tree) if tree.root() == anchor.merkle_root => BatchStatus::Verified(tree),
        Ok(_) => BatchStatus::RootMismatch,
        Err(e) => BatchStatus::Incomplete(e.to_string()),
    }
}

/// Identity, signature, policy and anchoring checks for one entry.
pub fn verify_entry(entry: &LogEntry, ctx: &AuditContext<'_>) -> FindingSet {
    let mut out = FindingSet::default();
    let b = &entry.body;
    let (agent, seq) = (b.agent, b.seq);
    let anchored_at = ctx.proven_anchor(entry);

    match ctx.view.registry.resolve(&agent) {
        Resolution::NotFound => out.push(
            Some(agent),
            seq,
            CheckKind::IdentityCheck,
            Verdict::Unverifiable,
            "UnknownAgent",
            format!("{agent} is not registered on the ledger"),
        ),
        Resolution::Registered(_) => out.valid(agent, seq, CheckKind::IdentityCheck),
        Resolution::Revoked {
            revoked_at_ms,
            ledger_index,
            ..
        } => {
            // An anchor recorded before the revocation outranks timestamps.
            let before = match anchored_at {
                Some(anchor_idx) => anchor_idx < ledger_index,
                None => b.ts_ms < revoked_at_ms,
            };
            if before {
                out.valid(agent, seq, CheckKind::IdentityCheck);
            } else {
                out.push(
                    Some(agent),
                    seq,
                    CheckKind::IdentityCheck,
                    Verdict::Violation,
                    "RevokedIdentity",
                    format!("identity revoked at {revoked_at_ms} (ledger index {ledger_index})"),
                );
            }
        }
    }

    if entry.verify_signature() {
        out.valid(agent, seq, CheckKind::SignatureCheck);
    } else {
        out.push(
            Some(agent),
            seq,
            CheckKind::SignatureCheck,
            Verdict::Violation,
            "BadSignature",
            format!("signature does not verify under {agent}"),
        );
    }

    policy_check(entry, ctx, &mut out);

    match anchored_at {
        Some(idx) => out.push(
            Some(agent),
            seq,
            CheckKind::AnchorCheck,
            Verdict::Valid,
            OK,
            format!("included in anchor at ledger index {idx}"),
        ),
        None => {
            let candidates = ctx.view.coverage.get(&(agent, seq)).cloned().unwrap_or_default();
            let mismatch = candidates
                .iter()
                .any(|i| matches!(ctx.batches.get(i), Some(BatchStatus::RootMismatch | BatchStatus::Verified(_))));
            if mismatch {
                out.push(
                    Some(agent),
                    seq,
                    CheckKind::AnchorCheck,
                    Verdict::Violation,
                    "RootMismatch",
                    format!("entry is not included in the root anchored at {candidates:?}"),
                );
            } else if let Some(BatchStatus::Incomplete(why)) =
                candidates.first().and_then(|i| ctx.batches.get(i))
            {
                out.push(
                    Some(agent),
                    seq,
                    CheckKind::AnchorCheck,
                    Verdict::Unverifiable,
                    "IncompleteBatch",
                    why.clone(),
                );
            } else {
                out.push(
                    Some(agent),
                    seq,
                    CheckKind::AnchorCheck,
                    Verdict::Unverifiable,
                    "Unanchored",
                    "no anchored batch covers this entry",
                );
            }
        }
    }
    out
}

fn policy_check(entry: &LogEntry, ctx: &AuditContext<'_>, out: &mut FindingSet) {
    let b = &entry.body;
    let (agent, seq) = (Some(b.agent), b.seq);
    let doc = match ctx.store.lookup(&b.policy) {
        Ok(doc) => doc,
        Err(PolicyError::NotFound(h)) => {
            out.push(agent, seq, CheckKind::PolicyCheck, Verdict::Unverifiable, "UnknownPolicy", format!("policy {h} not in store"));
            return;
        }
        Err(PolicyError::DigestMismatch(h)) => {
            out.push(agent, seq, CheckKind::PolicyCheck, Verdict::Violation, "PolicyDigestMismatch", format!("stored policy does not hash to {h}"));
            return;
        }
        Err(e) => {
            out.push(agent, seq, CheckKind::PolicyCheck, Verdict::Unverifiable, "PolicyUnreadable", e.to_string());
            return;
        }
    };
    if doc.agent_did != b.agent {
        out.push(agent, seq, CheckKind::PolicyCheck, Verdict::Violation, "PolicyAgentMismatch", format!("policy belongs to {}", doc.agent_did));
        return;
    }
    if !ctx.view.is_committed(&b.policy, &b.agent) {
        out.push(agent, seq, CheckKind::PolicyCheck, Verdict::Unverifiable, "UncommittedPolicy", format!("no ledger commitment for policy {}", b.policy));
        return;
    }
    match check_action(&doc, entry) {
        Ok(v) if v.is_empty() => out.valid(b.agent, seq, CheckKind::PolicyCheck),
        Ok(violations) => {
            for v in violations {
                out.push(agent, seq, CheckKind::PolicyCheck, Verdict::Violation, v.code(), v.to_string());
            }
        }
        Err(e) => out.push(agent, seq, CheckKind::PolicyCheck, Verdict::Violation, "PolicyHashMismatch", e.to_string()),
    }
}

/// Per-entry checks plus chain continuity and rate limits over one log.
pub fn verify_trace(log: &TraceLog, ctx: &AuditContext<'_>) -> FindingSet {
    let mut out = FindingSet::default();
    let mut prev: Option<&LogEntry> = None;
    for entry in &log.entries {
        out.extend(verify_entry(entry, ctx));
        let b = &entry.body;
        let (agent, seq) = (Some(b.agent), b.seq);
        let mut clean = true;
        let mut flag = |code: &str, detail: String| {
            clean = false;
            out.push(agent, seq, CheckKind::ChainCheck, Verdict::Violation, code, detail);
        };
        if b.agent != log.agent {
            flag("AgentMismatch", format!("entry agent differs from log agent {}", log.agent));
        }
        let expected_seq = prev.map_or(1, |p| p.body.seq + 1);
        if b.seq != expected_seq {
            flag("SeqGap", format!("expected seq {expected_seq}, found {}", b.seq));
        } else if b.prev != prev.map_or(Digest::ZERO, |p| p.hash) {
            flag("ChainBreak", "prev does not match the preceding entry hash".into());
        }
        if let Some(p) = prev.filter(|p| b.ts_ms < p.body.ts_ms) {
            flag(
                "NonMonotonicTimestamp",
                format!("ts_ms {} precedes {}", b.ts_ms, p.body.ts_ms),
            );
        }
        if clean {
            out.valid(b.agent, seq, CheckKind::ChainCheck);
        }
        prev = Some(entry);
    }
    rate_checks(log, ctx, &mut out);
    out
}

fn rate_checks(log: &TraceLog, ctx: &AuditContext<'_>, out: &mut FindingSet) {
    let mut groups: BTreeMap<Digest, Vec<LogEntry>> = BTreeMap::new();
    for e in &log.entries {
        groups.entry(e.body.policy).or_default().push(e.clone());
    }
    for (policy, entries) in groups {
        let unverifiable = |out: &mut FindingSet, code: &str, detail: String| {
            for e in &entries {
                out.push(Some(e.body.agent), e.body.seq, CheckKind::RateCheck, Verdict::Unverifiable, code, detail.clone());
            }
        };
        let doc = match ctx.store.lookup(&policy) {
            Ok(doc) => doc,
            Err(PolicyError::NotFound(_)) => {
                unverifiable(out, "UnknownPolicy", format!("policy {policy} not in store"));
                continue;
            }
            Err(e) => {
                unverifiable(out, "PolicyUnreadable", e.to_string());
                continue;
            }
        };
        match check_rate(&doc, &entries) {
            Ok(violations) => {
                let mut flagged = BTreeSet::new();
                for (seq, v) in violations {
                    flagged.insert(seq);
                    out.push(
                        Some(log.agent),
                        seq,
                        CheckKind::RateCheck,
                        Verdict::Violation,
                        "RateViolation",
                        format!(
                            "{} actions within {} ms (limit {} per rate_limits[{}])",
                            v.count, v.window_ms, v.max_actions, v.limit
                        ),
                    );
                }
                for e in entries.iter().filter(|e| !flagged.contains(&e.body.seq)) {
                    out.valid(e.body.agent, e.body.seq, CheckKind::RateCheck);
                }
            }
            Err(e) => unverifiable(out, "UnorderedInput", e.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId {
    pub agent: Did,
    pub seq: u64,
}

impl NodeId {
    fn to_value(self) -> Value {
        Value::map([("agent", self.agent.into()), ("seq", Value::Int(self.seq as i64))])
    }

    fn from_value(v: &Value) -> Result<Self, FieldError> {
        let f = Fields::new(v, "node")?.only(&["agent", "seq"])?;
        Ok(NodeId {
            agent: did_field(&f, "agent")?,
            seq: f.int("seq")? as u64,
        })
    }
}

/// Cross-agent provenance graph. Edges run upstream → downstream and only
/// exist for references whose hash matched.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LineageGraph {
    pub nodes: BTreeMap<NodeId, Digest>,
    pub edges: BTreeSet<(NodeId, NodeId)>,
}

impl LineageGraph {
    pub fn downstream(&self, node: NodeId) -> impl Iterator<Item = NodeId> + '_ {
        self.edges.iter().filter(move |(u, _)| *u == node).map(|(_, d)| *d)
    }

    /// Agent-level edges (upstream agent → downstream agent), excluding
    /// references within one agent's own log.
    pub fn agent_edges(&self) -> BTreeSet<(Did, Did)> {
        self.edges
            .iter()
            .filter(|(u, d)| u.agent != d.agent)
            .map(|(u, d)| (u.agent, d.agent))
            .collect()
    }

    pub fn to_value(&self) -> Value {
        let nodes = self
            .nodes
            .iter()
            .map(|(n, h)| {
                Value::map([
                    ("agent", n.agent.into()),
                    ("seq", Value::Int(n.seq as i64)),
                    ("hash", (*h).into()),
                ])
            })
            .collect();
        let edges = self
            .edges
            .iter()
            .map(|(u, d)| Value::map([("from", u.to_value()), ("to", d.to_value())]))
            .collect();
        Value::map([("nodes", Value::List(nodes)), ("edges", Value::List(edges))])
    }

    pub fn from_value(v: &Value) -> Result<Self, FieldError> {
        let f = Fields::new(v, "lineage")?.only(&["nodes", "edges"])?;
        let mut g = LineageGraph::default();
        for n in f.list("nodes")? {
            let nf = Fields::new(n, "nodes")?.only(&["agent", "seq", "hash"])?;
            g.nodes.insert(
                NodeId {
                    agent: did_field(&nf, "agent")?,
                    seq: nf.int("seq")? as u64,
                },
                nf.digest("hash")?,
            );
        }
        for e in f.list("edges")? {
            let ef = Fields::new(e, "edges")?.only(&["from", "to"])?;
            g.edges
                .insert((NodeId::from_value(ef.get("from")?)?, NodeId::from_value(ef.get("to")?)?));
        }
        Ok(g)
    }
}

/// Builds the lineage graph and its per-entry LineageCheck findings.
pub fn build_lineage(logs: &[TraceLog]) -> (LineageGraph, FindingSet) {
    let mut graph = LineageGraph::default();
    let mut out = FindingSet::default();
    let mut by_id: HashMap<NodeId, &LogEntry> = HashMap::new();
    for e in logs.iter().flat_map(|l| &l.entries) {
        let id = NodeId {
            agent: e.body.agent,
            seq: e.body.seq,
        };
        graph.nodes.insert(id, e.hash);
        by_id.insert(id, e);
    }
    // Structural adjacency (downstream → upstream) over every reference that
    // names an existing entry, whether or not its hash matched.
    let mut structural: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
    for (&id, e) in &by_id {
        structural.entry(id).or_default();
        let mut problems = false;
        for r in &e.body.refs {
            let up = NodeId {
                agent: r.agent,
                seq: r.seq,
            };
            let Some(target) = by_id.get(&up) else {
                problems = true;
                out.push(
                    Some(id.agent),
                    id.seq,
                    CheckKind::LineageCheck,
                    Verdict::Violation,
                    "DanglingRef",
                    format!("reference to {} seq {} matches no audited entry", r.agent, r.seq),
                );
                continue;
            };
            structural.entry(id).or_default().push(up);
            if target.hash != r.hash {
                problems = true;
                out.push(
                    Some(id.agent),
                    id.seq,
                    CheckKind::LineageCheck,
                    Verdict::Violation,
                    "RefHashMismatch",
                    format!(
                        "{} seq {} references {} seq {} with hash {}, actual {}",
                        id.agent, id.seq, up.agent, up.seq, r.hash, target.hash
                    ),
                );
                continue;
            }
            graph.edges.insert((up, id));
            if target.body.ts_ms > e.body.ts_ms {
                problems = true;
                out.push(
                    Some(id.agent),
                    id.seq,
                    CheckKind::LineageCheck,
                    Verdict::Warning,
                    "UpstreamLater",
                    format!(
                        "upstream {} seq {} has ts_ms {} after {}",
                        up.agent, up.seq, target.body.ts_ms, e.body.ts_ms
                    ),
                );
            }
        }
        if !problems {
            out.valid(id.agent, id.seq, CheckKind::LineageCheck);
        }
    }
    for component in cyclic_components(&structural) {
        let members: Vec<String> = component.iter().map(|n| format!("{}#{}", n.agent.short(), n.seq)).collect();
        for n in &component {
            out.push(
                Some(n.agent),
                n.seq,
                CheckKind::LineageCheck,
                Verdict::Violation,
                "CycleDetected",
                format!("reference cycle among {}", members.join(",")),
            );
        }
    }
    (graph, out)
}

/// Strongly connected components that contain a cycle (size > 1 or a
/// self-loop), via an iterative Tarjan traversal.
fn cyclic_components(adj: &BTreeMap<NodeId, Vec<NodeId>>) -> Vec<Vec<NodeId>> {
    let ids: Vec<NodeId> = adj.keys().copied().collect();
    let pos: HashMap<NodeId, usize> = ids.iter().enumerate().map(|(i, n)| (*n, i)).collect();
    let succ: Vec<Vec<usize>> = ids
        .iter()
        .map(|n| adj[n].iter().filter_map(|m| pos.get(m).copied()).collect())
        .collect();
    let n = ids.len();
    let mut index = vec![usize::MAX; n];
    let mut low = vec![0usize; n];
    let mut on_stack = vec![false; n];
    let mut stack = Vec::new();
    let mut counter = 0;
    let mut result = Vec::new();

    for root in 0..n {
        if index[root] != usize::MAX {
            continue;
        }
        let mut work: Vec<(usize, usize)> = vec![(root, 0)];
        index[root] = counter;
        low[root] = counter;
        counter += 1;
        stack.push(root);
        on_stack[root] = true;
        while let Some(&mut (v, ref mut next)) = work.last_mut() {
            if *next < succ[v].len() {
                let w = succ[v][*next];
                *next += 1;
                if index[w] == usize::MAX {
                    index[w] = counter;
                    low[w] = counter;
                    counter += 1;
                    stack.push(w);
                    on_stack[w] = true;
                    work.push((w, 0));
                } else if on_stack[w] {
                    low[v] = low[v].min(index[w]);
                }
                continue;
            }
            work.pop();
            if let Some(&(parent, _)) = work.last() {
                low[parent] = low[parent].min(low[v]);
            }
            if low[v] == index[v] {
                let mut comp = Vec::new();
                loop {
                    let w = stack.pop().expect("tarjan stack");
                    on_stack[w] = false;
                    comp.push(ids[w]);
                    if w == v {
                        break;
                    }
                }
                if comp.len() > 1 || succ[v].contains(&v) {
                    comp.sort();
                    result.push(comp);
                }
            }
        }
    }
    result.sort();
    result
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Overall {
    Valid,
    ViolationsFound,
    Unverifiable,
}

impl Overall {
    pub fn as_str(self) -> &'static str {
        match self {
            Overall::Valid => "VALID",
            Overall::ViolationsFound => "VIOLATIONS_FOUND",
            Overall::Unverifiable => "UNVERIFIABLE",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Overall::Valid, Overall::ViolationsFound, Overall::Unverifiable]
            .into_iter()
            .find(|o| o.as_str() == s)
    }

    /// Process exit code: 0 when valid, 1 otherwise.
    pub fn exit_code(self) -> i32 {
        match self {
            Overall::Valid => 0,
            _ => 1,
        }
    }

    pub fn from_findings(findings: &[Finding]) -> Self {
        if findings.iter().any(|f| f.verdict == Verdict::Violation) {
            Overall::ViolationsFound
        } else if findings.iter().any(|f| f.verdict == Verdict::Unverifiable) {
            Overall::Unverifiable
        } else {
            Overall::Valid
        }
    }
}

impl fmt::Display for Overall {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Attribution {
    pub agent_did: Did,
    pub policy_hash: Digest,
    pub anchor_index: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuditReport {
    pub findings: Vec<Finding>,
    pub lineage: LineageGraph,
    pub attribution: BTreeMap<NodeId, Attribution>,
    pub overall: Overall,
}

impl AuditReport {
    pub fn non_valid(&self) -> impl Iterator<Item = &Finding> {
        self.findings.iter().filter(|f| f.verdict != Verdict::Valid)
    }

    pub fn to_value(&self) -> Value {
        let attribution = self
            .attribution
            .iter()
            .map(|(n, a)| {
                (
                    format!("{}#{}", n.agent, n.seq),
                    Value::map([
                        ("agent_did", a.agent_did.into()),
                        ("policy_hash", a.policy_hash.into()),
                        ("anchor_index", a.anchor_index.map_or(Value::Null, |i| Value::Int(i as i64))),
                    ]),
                )
            })
            .collect();
        Value::map([
            ("findings", Value::List(self.findings.iter().map(Finding::to_value).collect())),
            ("lineage", self.lineage.to_value()),
            ("attribution", Value::Map(attribution)),
            ("overall", Value::str(self.overall.as_str())),
        ])
    }

    pub fn from_value(v: &Value) -> Result<Self, FieldError> {
        let f = Fields::new(v, "report")?.only(&["findings", "lineage", "attribution", "overall"])?;
        let mut attribution = BTreeMap::new();
        for (key, value) in f.map("attribution")? {
            let (did, seq) = key
                .rsplit_once('#')
                .ok_or_else(|| FieldError::new("attribution", "key must be <did>#<seq>"))?;
            let node = NodeId {
                agent: Did::parse(did).map_err(|e| FieldError::new("attribution", e.to_string()))?,
                seq: seq.parse().map_err(|_| FieldError::new("attribution", "bad seq"))?,
            };
            let af = Fields::new(value, "attribution")?.only(&["agent_did", "policy_hash", "anchor_index"])?;
            attribution.insert(
                node,
                Attribution {
                    agent_did: did_field(&af, "agent_did")?,
                    policy_hash: af.digest("policy_hash")?,
                    anchor_index: match af.opt("anchor_index") {
                        None => None,
                        Some(_) => Some(af.int("anchor_index")? as u64),
                    },
                },
            );
        }
        Ok(AuditReport {
            findings: f
                .list("findings")?
                .iter()
                .map(Finding::from_value)
                .collect::<Result<_, _>>()?,
            lineage: LineageGraph::from_value(f.get("lineage")?)?,
            attribution,
            overall: Overall::parse(f.str("overall")?)
                .ok_or_else(|| FieldError::new("overall", "unknown verdict"))?,
        })
    }
}

/// Audits every log against the ledger and policy store.
pub fn audit_all(logs: &[TraceLog], ledger: &dyn Ledger, store: &PolicyStore) -> AuditReport {
    let ctx = AuditContext::new(logs, ledger, store);
    let mut set = FindingSet::default();
    let mut attribution = BTreeMap::new();
    for log in logs {
        set.extend(verify_trace(log, &ctx));
        for e in &log.entries {
            attribution.insert(
                NodeId {
                    agent: e.body.agent,
                    seq: e.body.seq,
                },
                Attribution {
                    agent_did: e.body.agent,
                    policy_hash: e.body.policy,
                    anchor_index: ctx.proven_anchor(e),
                },
            );
        }
    }
    let (lineage, lineage_findings) = build_lineage(logs);
    set.extend(lineage_findings);
    if let Some(fault) = &ctx.view.chain_fault {
        let code = if fault.reason.starts_with("prev") {
            "PrevMismatch"
        } else {
            "CorruptRecord"
        };
        set.push(None, fault.idx, CheckKind::LedgerCheck, Verdict::Violation, code, fault.reason.clone());
    }
    for (idx, why) in &ctx.view.rejected {
        set.push(None, *idx, CheckKind::LedgerCheck, Verdict::Warning, "RejectedRecord", why.clone());
    }
    let mut findings = set.into_findings();
    findings.sort_by_key(Finding::sort_key);
    let overall = Overall::from_findings(&findings);
    AuditReport {
        findings,
        lineage,
        attribution,
        overall,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Text,
    Interchange,
}

pub const TEXT_HEADER_LINES: usize = 3;
pub const TEXT_FOOTER_LINES: usize = 1;

/// Deterministic rendering; findings are already in (agent, seq, check) order.
pub fn render_report(report: &AuditReport, format: ReportFormat) -> Vec<u8> {
    match format {
        ReportFormat::Interchange => {
            let mut out = canonical_encode(&report.to_value());
            out.push(b'\n');
            out
        }
        ReportFormat::Text => {
            let mut s = String::new();
            s.push_str("# ttk audit report\n");
            s.push_str(&format!("overall {}\n", report.overall));
            s.push_str(&format!(
                "findings {} entries {} edges {}\n",
                report.findings.len(),
                report.attribution.len(),
                report.lineage.edges.len()
            ));
            for f in &report.findings {
                s.push_str(&format!(
                    "{} {} {} {} {}",
                    f.subject(),
                    f.seq,
                    f.check,
                    f.verdict,
                    f.reason
                ));
                if !f.detail.is_empty() {
                    s.push_str(" | ");
                    s.push_str(&f.detail.replace('\n', " "));
                }
                s.push('\n');
            }
            s.push_str("# end\n");
            s.into_bytes()
        }
    }
}

pub fn parse_report(bytes: &[u8]) -> Result<AuditReport, FieldError> {
    let trimmed = bytes.strip_suffix(b"\n").unwrap_or(bytes);
    let value = decode_canonical(trimmed).map_err(|e| FieldError::new("report", e.to_string()))?;
    AuditReport::from_value(&value)
}

/// Failure to load audit inputs from disk.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LoadError {
    #[error("{}: line {line}: {message}", path.display())]
    Trace {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{}: {message}", path.display())]
    Io { path: PathBuf, message: String },
    #[error(transparent)]
    Ledger(#[from] LedgerError),
}

/// Reads a trace file without enforcing chain continuity (that is the
/// auditor's job); per-line hash and format errors still fail the load.
/// Returns `None` for an empty file.
pub fn load_trace_file(path: &Path) -> Result<Option<TraceLog>, LoadError> {
    let bytes = fs::read(path).map_err(|e| LoadError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let entries = read_entries(&bytes).map_err(|e| LoadError::Trace {
        path: path.to_path_buf(),
        line: e.line,
        message: e.error.to_string(),
    })?;
    Ok(entries.first().map(|first| TraceLog {
        agent: first.body.agent,
        entries: entries.clone(),
    }))
}

/// Loads traces, a file ledger and a policy store directory, then audits them.
pub fn audit_paths(
    traces: &[PathBuf],
    ledger: &Path,
    store_dir: &Path,
) -> Result<AuditReport, LoadError> {
    let mut logs = Vec::new();
    for path in traces {
        if let Some(log) = load_trace_file(path)? {
            logs.push(log);
        }
    }
    if !ledger.exists() {
        return Err(LoadError::Io {
            path: ledger.to_path_buf(),
            message: "ledger file not found".into(),
        });
    }
    let ledger = FileLedger::open(ledger)?;
    Ok(audit_all(&logs, &ledger, &PolicyStore::open_dir(store_dir)))
}
