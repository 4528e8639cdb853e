//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fail.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde_json::ser::{CharEscape, CompactFormatter, Formatter, Serializer};
use serde::Serialize;
use sha2::{Digest as _, Sha256};

use ttk_core::anchor::ledger::verify_chain;
use ttk_core::anchor::{flush_batches, merkle_root, merkle_verify, AnchorPolicy, MerkleTree, PathStep, PendingPool, Side};
use ttk_core::audit::{audit_all, parse_report, render_report, CheckKind, NodeId, Overall, ReportFormat, Verdict};
use ttk_core::canonical::{canonical_encode, decode, decode_canonical, Digest, Value};
use ttk_core::identity::{generate_keypair, keyfile_value, keypair_from_keyfile, register_identity, AgentIdentity};
use ttk_core::policy::{check_rate, commit_policy, ParameterConstraint, PolicyDocument, PolicyStore, RateLimit};
use ttk_core::scenarios::{
    audit_bundle, audit_dir, builtin_legal, builtin_pharma, default_fault, generate, read_manifest, run_scenario,
    scenario_key, ScenarioSpec, DRAFTER, FAULT_NAMES, LEDGER_FILE, REVIEWER, SYNTHESIZER,
};
use ttk_core::trace::{encode_trace, import_trace, read_entries, ActionRecord, TraceLog};
use ttk_core::{FileLedger, Ledger, LedgerRecord, MemoryLedger};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("merkle oracle equivalence", merkle_oracle),
        ("tamper-evidence sweep", tamper_sweep),
        ("fault manifest soundness", manifest_soundness),
        ("policy conformance matrix", policy_matrix),
        ("round-trips", round_trips),
        ("lineage", lineage),
        ("throughput", throughput),
        ("cli contract", cli_contract),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let ms = start.elapsed().as_millis();
        match outcome {
            Ok(detail) => println!("criterion {} PASS {name} ({ms} ms): {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {} FAIL {name} ({ms} ms): {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn within(start: Instant, limit: Duration, what: &str) -> Result<Duration, String> {
    let took = start.elapsed();
    ensure!(took < limit, "{what} took {took:?}, limit {limit:?}");
    Ok(took)
}

// 1

fn sha(parts: &[&[u8]]) -> [u8; 32] {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    h.finalize().into()
}

fn oracle_root(leaves: &[[u8; 32]]) -> [u8; 32] {
    let mut level: Vec<[u8; 32]> = leaves.iter().map(|l| sha(&[&[0x00], l])).collect();
    while level.len() > 1 {
        level = level
            .chunks(2)
            .map(|c| sha(&[&[0x01], &c[0], c.get(1).unwrap_or(&c[0])]))
            .collect();
    }
    level[0]
}

fn flip(d: Digest) -> Digest {
    let mut b = d.0;
    b[0] ^= 0x80;
    Digest(b)
}

fn merkle_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    let (mut proofs, mut mutations) = (0, 0);
    for n in 1..=16usize {
        for trial in 0..100 {
            let raw: Vec<[u8; 32]> = (0..n).map(|_| rng.gen()).collect();
            let leaves: Vec<Digest> = raw.iter().map(|b| Digest(*b)).collect();
            let root = merkle_root(&leaves).map_err(|e| e.to_string())?;
            ensure!(root.0 == oracle_root(&raw), "n={n} trial={trial}: root differs from recomputation");
            let tree = MerkleTree::build(&leaves).map_err(|e| e.to_string())?;
            for i in 0..n {
                let proof = tree.prove(i).map_err(|e| e.to_string())?;
                ensure!(proof.root == root && proof.leaf_hash == leaves[i], "n={n} i={i}: proof fields");
                ensure!(merkle_verify(&proof), "n={n} i={i}: valid proof rejected");
                proofs += 1;
                let mut variants = Vec::new();
                let mut p = proof.clone();
                p.leaf_hash = flip(p.leaf_hash);
                variants.push(("leaf_hash", p));
                let mut p = proof.clone();
                p.root = flip(p.root);
                variants.push(("root", p));
                for other in [i as u64 ^ 1, i as u64 + 1, i as u64 | (1 << proof.path.len())] {
                    if other != i as u64 {
                        let mut p = proof.clone();
                        p.leaf_index = other;
                        variants.push(("leaf_index", p));
                    }
                }
                for k in 0..proof.path.len() {
                    let mut p = proof.clone();
                    p.path[k].hash = flip(p.path[k].hash);
                    variants.push(("path hash", p));
                    let mut p = proof.clone();
                    p.path[k].side = match p.path[k].side {
                        Side::Left => Side::Right,
                        Side::Right => Side::Left,
                    };
                    variants.push(("path side", p));
                }
                let mut p = proof.clone();
                p.path.push(PathStep { hash: leaves[0], side: Side::Right });
                variants.push(("extra step", p));
                if !proof.path.is_empty() {
                    let mut p = proof.clone();
                    p.path.pop();
                    variants.push(("missing step", p));
                }
                for (what, p) in variants {
                    ensure!(!merkle_verify(&p), "n={n} i={i}: mutated {what} still verifies");
                    mutations += 1;
                }
            }
        }
    }
    within(start, Duration::from_secs(1), "oracle run")?;
    Ok(format!("1600 roots match, {proofs} proofs verify, {mutations} mutations rejected"))
}

// 2

fn pharma_bundle() -> Result<BTreeMap<String, Vec<u8>>, String> {
    generate(&builtin_pharma(), 0).map(|b| b.files).map_err(|e| e.to_string())
}

fn detected(files: &BTreeMap<String, Vec<u8>>, name: &str) -> bool {
    let bytes = &files[name];
    if name == LEDGER_FILE {
        if verify_chain(&FileLedger::from_bytes(LEDGER_FILE, bytes)).is_err() {
            return true;
        }
    } else {
        match read_entries(bytes) {
            Err(_) => return true,
            Ok(entries) if entries.is_empty() => {}
            Ok(_) => {
                if import_trace(&mut bytes.as_slice()).is_err() {
                    return true;
                }
            }
        }
    }
    match audit_bundle(files) {
        Err(_) => true,
        Ok(r) => r.overall != Overall::Valid,
    }
}

fn tamper_sweep() -> Outcome {
    let start = Instant::now();
    let clean = pharma_bundle()?;
    ensure!(audit_bundle(&clean).map(|r| r.overall) == Ok(Overall::Valid), "clean bundle is not VALID");
    let targets: Vec<String> = clean
        .keys()
        .filter(|k| k.starts_with("traces/") || *k == LEDGER_FILE)
        .cloned()
        .collect();
    let entries: usize = targets
        .iter()
        .filter(|t| t.starts_with("traces/"))
        .map(|t| read_entries(&clean[t]).map(|e| e.len()).unwrap_or(0))
        .sum();
    ensure!(entries >= 10, "only {entries} entries");
    let mut rng = ChaCha20Rng::seed_from_u64(2);
    let mut files = clean.clone();
    let mut positions = 0;
    for name in &targets {
        for i in 0..clean[name].len() {
            let mask: u8 = rng.gen_range(1..=255);
            files.get_mut(name).unwrap()[i] ^= mask;
            if !detected(&files, name) {
                return Err(format!("{name} byte {i} ^ {mask:#04x} silently accepted"));
            }
            files.get_mut(name).unwrap()[i] = clean[name][i];
            positions += 1;
        }
    }
    within(start, Duration::from_secs(60), "sweep")?;
    Ok(format!(
        "{positions} positions across {} files ({entries} entries), 0 silent acceptances",
        targets.len()
    ))
}

// 3

fn manifest_soundness() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut checked = 0;
    let mut variants = BTreeSet::new();
    for (name, spec) in [("pharma", builtin_pharma()), ("legal", builtin_legal())] {
        let dir = tmp.path().join(format!("{name}-clean"));
        run_scenario(&spec, 0, &dir).map_err(|e| e.to_string())?;
        let report = audit_dir(&dir).map_err(|e| format!("{name} clean: {e}"))?;
        ensure!(report.overall == Overall::Valid, "{name} clean: overall {}", report.overall);
        let bad = report
            .findings
            .iter()
            .filter(|f| matches!(f.verdict, Verdict::Violation | Verdict::Unverifiable))
            .count();
        ensure!(bad == 0, "{name} clean: {bad} negative findings");
        for fault in FAULT_NAMES {
            let injection = default_fault(name, fault).ok_or(format!("no {fault} for {name}"))?;
            variants.insert(format!("{injection:?}").split([' ', '(', '{']).next().unwrap().to_owned());
            let dir = tmp.path().join(format!("{name}-{fault}"));
            run_scenario(&spec.clone().with_fault(injection), 0, &dir).map_err(|e| e.to_string())?;
            let manifest = read_manifest(&dir).map_err(|e| e.to_string())?;
            manifest
                .check(&audit_dir(&dir))
                .map_err(|diff| format!("{name}/{fault}: {}", diff.join("; ")))?;
            checked += 1;
        }
    }
    ensure!(variants.len() == 7, "only variants {variants:?}");
    Ok(format!(
        "2 clean runs VALID; {checked} faulted runs match their manifests exactly ({})",
        variants.into_iter().collect::<Vec<_>>().join(", ")
    ))
}

// 4

fn conformance_policy(agent: ttk_core::Did) -> PolicyDocument {
    PolicyDocument {
        policy_id: "matrix".into(),
        agent_did: agent,
        version: 1,
        allowed_actions: ["summarize".to_owned(), "publish".to_owned()].into(),
        parameter_constraints: [(
            "summarize".to_owned(),
            [
                ("pages".to_owned(), ParameterConstraint::IntRange { min: 1, max: 10 }),
                (
                    "style".to_owned(),
                    ParameterConstraint::OneOf {
                        values: ["brief".to_owned(), "full".to_owned()].into(),
                    },
                ),
                ("title".to_owned(), ParameterConstraint::MaxLength { limit: 5 }),
                ("source".to_owned(), ParameterConstraint::Required),
            ]
            .into(),
        )]
        .into(),
        rate_limits: vec![RateLimit {
            window_ms: 1_000,
            max_actions: 2,
            action_filter: Some("publish".into()),
        }],
        jurisdictions: ["EU".to_owned()].into(),
        data_boundaries: ["public".to_owned()].into(),
        not_before_ms: 0,
        not_after_ms: 100_000,
        delegated_by: None,
    }
}

fn summarize(ts: i64, edit: impl FnOnce(&mut ActionRecord)) -> ActionRecord {
    let mut a = ActionRecord::new("summarize", ts);
    a.params.insert("pages".into(), Value::Int(3));
    a.params.insert("style".into(), Value::str("brief"));
    a.params.insert("title".into(), Value::str("memo"));
    a.params.insert("source".into(), Value::str("doc-1"));
    a.ctx.insert("jurisdiction".into(), Value::str("EU"));
    a.ctx.insert("data_labels".into(), Value::List(vec![Value::str("public")]));
    edit(&mut a);
    a
}

fn policy_matrix() -> Outcome {
    let kp = generate_keypair(Some(&[4; 32])).map_err(|e| e.to_string())?;
    let mut ledger = MemoryLedger::new();
    let mut store = PolicyStore::in_memory();
    register_identity(&AgentIdentity::new(kp.did(), BTreeMap::new()), &kp, 0, &mut ledger).map_err(|e| e.to_string())?;
    let doc = conformance_policy(kp.did());
    let c = commit_policy(&doc, &kp, 1, &mut ledger, &mut store).map_err(|e| e.to_string())?;

    // (record, expected PolicyCheck reason, detail fragment, expected RateCheck reason)
    let fixtures: Vec<(ActionRecord, &str, &str, &str)> = vec![
        (summarize(1_000, |_| {}), "OK", "", "OK"),
        (ActionRecord::new("delete", 2_000), "ActionNotAllowed", "delete", "OK"),
        (summarize(3_000, |a| drop(a.params.insert("pages".into(), Value::Int(11)))), "ParamViolation", "int_range", "OK"),
        (summarize(4_000, |a| drop(a.params.insert("style".into(), Value::str("long")))), "ParamViolation", "one_of", "OK"),
        (summarize(5_000, |a| drop(a.params.insert("title".into(), Value::str("too long")))), "ParamViolation", "max_length", "OK"),
        (summarize(6_000, |a| drop(a.params.remove("source"))), "ParamViolation", "required", "OK"),
        (
            summarize(7_000, |a| drop(a.ctx.insert("data_labels".into(), Value::List(vec![Value::str("secret")])))),
            "DataBoundary",
            "secret",
            "OK",
        ),
        (summarize(8_000, |a| drop(a.ctx.insert("jurisdiction".into(), Value::str("US")))), "JurisdictionMismatch", "US", "OK"),
        (ActionRecord::new("publish", 9_000), "OK", "", "OK"),
        (ActionRecord::new("publish", 9_001), "OK", "", "OK"),
        (ActionRecord::new("publish", 9_002), "OK", "", "RateViolation"),
        (summarize(100_000, |_| {}), "OutsideValidity", "100000", "OK"),
    ];
    let mut log = TraceLog::new(kp.did());
    for (record, ..) in &fixtures {
        log.record(&kp, c.policy_hash, record.clone()).map_err(|e| e.to_string())?;
    }
    let report = audit_all(&[log.clone()], &ledger, &store);
    let reason = |seq: u64, check: CheckKind| {
        report
            .findings
            .iter()
            .find(|f| f.seq == seq && f.check == check)
            .map(|f| (f.reason.clone(), f.detail.clone()))
            .unwrap_or_default()
    };
    let mut kinds = BTreeSet::new();
    for (i, (_, policy_code, fragment, rate_code)) in fixtures.iter().enumerate() {
        let seq = i as u64 + 1;
        let (got, detail) = reason(seq, CheckKind::PolicyCheck);
        ensure!(got == *policy_code, "seq {seq}: PolicyCheck {got}, expected {policy_code}");
        ensure!(detail.contains(fragment), "seq {seq}: detail {detail:?} lacks {fragment:?}");
        let (got, _) = reason(seq, CheckKind::RateCheck);
        ensure!(got == *rate_code, "seq {seq}: RateCheck {got}, expected {rate_code}");
        for code in [*policy_code, *rate_code] {
            if code != "OK" {
                kinds.insert(if code == "ParamViolation" { format!("{code}/{fragment}") } else { code.to_owned() });
            }
        }
    }
    ensure!(kinds.len() == 9, "covered only {kinds:?}");

    let mut rng = ChaCha20Rng::seed_from_u64(4);
    let mut flagged = 0;
    for case in 0..200 {
        let n = rng.gen_range(0..=50);
        let mut log = TraceLog::new(kp.did());
        let mut ts = 0;
        for _ in 0..n {
            ts += rng.gen_range(0..400);
            let action = if rng.gen_bool(0.5) { "a" } else { "b" };
            log.record(&kp, Digest::ZERO, ActionRecord::new(action, ts)).map_err(|e| e.to_string())?;
        }
        let limits: Vec<RateLimit> = (0..rng.gen_range(1..=3))
            .map(|_| RateLimit {
                window_ms: rng.gen_range(1..2_000),
                max_actions: rng.gen_range(0..6),
                action_filter: rng.gen_bool(0.5).then(|| "a".to_owned()),
            })
            .collect();
        let mut rate = conformance_policy(kp.did());
        rate.rate_limits = limits.clone();
        let got: Vec<(u64, usize, i64)> = check_rate(&rate, &log.entries)
            .map_err(|e| e.to_string())?
            .into_iter()
            .map(|(seq, v)| (seq, v.limit, v.count))
            .collect();
        let mut expected = Vec::new();
        for (li, limit) in limits.iter().enumerate() {
            for e in &log.entries {
                if !limit.applies_to(&e.body.action) {
                    continue;
                }
                let count = log
                    .entries
                    .iter()
                    .filter(|o| limit.applies_to(&o.body.action))
                    .filter(|o| o.body.ts_ms > e.body.ts_ms - limit.window_ms && o.body.ts_ms <= e.body.ts_ms)
                    .count() as i64;
                if count > limit.max_actions {
                    expected.push((e.body.seq, li, count));
                }
            }
        }
        expected.sort();
        ensure!(got == expected, "rate case {case}: {got:?} != {expected:?}");
        flagged += got.len();
    }
    Ok(format!(
        "{} kinds reported with correct codes; check_rate equals recount on 200 sequences ({flagged} flags)",
        kinds.len()
    ))
}

// 5

struct Canonical;

impl Formatter for Canonical {
    fn write_char_escape<W: ?Sized + io::Write>(&mut self, w: &mut W, escape: CharEscape) -> io::Result<()> {
        match escape {
            CharEscape::Backspace => w.write_all(b"\\u0008"),
            CharEscape::FormFeed => w.write_all(b"\\u000c"),
            other => CompactFormatter.write_char_escape(w, other),
        }
    }
}

fn to_json(v: &Value) -> serde_json::Value {
    match v {
        Value::Null => serde_json::Value::Null,
        Value::Bool(b) => serde_json::Value::Bool(*b),
        Value::Int(i) => serde_json::Value::from(*i),
        Value::Str(s) => serde_json::Value::String(s.clone()),
        Value::List(items) => serde_json::Value::Array(items.iter().map(to_json).collect()),
        Value::Map(m) => {
            let mut pairs: Vec<(&String, &Value)> = m.iter().collect();
            pairs.sort_by(|a, b| a.0.as_bytes().cmp(b.0.as_bytes()));
            serde_json::Value::Object(pairs.into_iter().map(|(k, v)| (k.clone(), to_json(v))).collect())
        }
    }
}

fn oracle_encode(v: &Value) -> Vec<u8> {
    let mut out = Vec::new();
    to_json(v).serialize(&mut Serializer::with_formatter(&mut out, Canonical)).unwrap();
    out
}

const ALPHABET: &[&str] = &["a", "Z", "0", " ", "\"", "\\", "/", "\n", "\t", "\u{0}", "\u{8}", "\u{c}", "\u{1f}", "\u{7f}", "é", "中", "🦀", "\u{2028}"];

fn random_string(rng: &mut ChaCha20Rng) -> String {
    (0..rng.gen_range(0..8)).map(|_| ALPHABET[rng.gen_range(0..ALPHABET.len())]).collect()
}

fn random_value(rng: &mut ChaCha20Rng, depth: u32) -> Value {
    match rng.gen_range(0..if depth == 0 { 4 } else { 6 }) {
        0 => Value::Null,
        1 => Value::Bool(rng.gen()),
        2 => Value::Int(match rng.gen_range(0..4) {
            0 => i64::MIN,
            1 => i64::MAX,
            2 => rng.gen_range(-10..10),
            _ => rng.gen(),
        }),
        3 => Value::Str(random_string(rng)),
        4 => Value::List((0..rng.gen_range(0..5)).map(|_| random_value(rng, depth - 1)).collect()),
        _ => Value::Map(
            (0..rng.gen_range(0..5))
                .map(|_| (random_string(rng), random_value(rng, depth - 1)))
                .collect(),
        ),
    }
}

fn round_trips() -> Outcome {
    let bundle = pharma_bundle()?;
    let strip = |b: &[u8]| b.strip_suffix(b"\n").unwrap_or(b).to_vec();
    let mut counts = BTreeMap::<&str, usize>::new();
    for (name, bytes) in &bundle {
        if name.starts_with("traces/") {
            let log = import_trace(&mut bytes.as_slice()).map_err(|e| format!("{name}: {e:?}"))?;
            ensure!(encode_trace(&log) == *bytes, "{name}: trace re-export differs");
            *counts.entry("traces").or_default() += 1;
        } else if name.starts_with("keys/") {
            let kp = keypair_from_keyfile(&decode(bytes).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
            ensure!(canonical_encode(&keyfile_value(&kp)) == strip(bytes), "{name}: key file differs");
            *counts.entry("keys").or_default() += 1;
        } else if name.starts_with("policies/") {
            let doc = PolicyDocument::parse(bytes).map_err(|e| e.to_string())?;
            ensure!(doc.canonical_bytes() == strip(bytes), "{name}: policy differs");
            ensure!(name.contains(&doc.policy_hash().to_hex()), "{name}: hash differs");
            *counts.entry("policies").or_default() += 1;
        } else if name == LEDGER_FILE {
            for (idx, line) in strip(bytes).split(|&b| b == b'\n').enumerate() {
                let record = LedgerRecord::parse_line(line, idx as u64).map_err(|e| e.to_string())?;
                ensure!(record.to_line() == [line, b"\n"].concat(), "ledger record {idx} differs");
                *counts.entry("ledger records").or_default() += 1;
            }
        }
    }
    for bundle in [bundle, generate(&builtin_legal().with_fault(default_fault("legal", "forge").unwrap()), 3).map_err(|e| e.to_string())?.files] {
        let report = audit_bundle(&bundle).map_err(|e| e.to_string())?;
        let bytes = render_report(&report, ReportFormat::Interchange);
        let back = parse_report(&bytes).map_err(|e| e.to_string())?;
        ensure!(back == report, "report round-trip lost information");
        ensure!(render_report(&back, ReportFormat::Interchange) == bytes, "report re-render differs");
        ensure!(render_report(&back, ReportFormat::Text) == render_report(&report, ReportFormat::Text), "text render differs");
        *counts.entry("reports").or_default() += 1;
    }

    let mut rng = ChaCha20Rng::seed_from_u64(5);
    for i in 0..10_000 {
        let v = random_value(&mut rng, 4);
        let bytes = canonical_encode(&v);
        ensure!(bytes == canonical_encode(&v.clone()), "value {i}: encoding not deterministic");
        ensure!(bytes == oracle_encode(&v), "value {i}: differs from reference serializer: {}", String::from_utf8_lossy(&bytes));
        ensure!(decode_canonical(&bytes).as_ref() == Ok(&v), "value {i}: decode differs");
    }
    counts.insert("canonical values", 10_000);
    Ok(counts.iter().map(|(k, n)| format!("{n} {k}")).collect::<Vec<_>>().join(", "))
}

// 6

fn step_nodes(spec: &ScenarioSpec, seed: u64) -> Vec<NodeId> {
    let mut next: BTreeMap<&str, u64> = BTreeMap::new();
    spec.steps
        .iter()
        .map(|s| {
            let seq = next.entry(&s.role).or_insert(0);
            *seq += 1;
            NodeId { agent: scenario_key(seed, &s.role).did(), seq: *seq }
        })
        .collect()
}

fn lineage() -> Outcome {
    let spec = builtin_pharma();
    let report = audit_bundle(&pharma_bundle()?).map_err(|e| e.to_string())?;
    let nodes = step_nodes(&spec, 0);
    let expected: BTreeSet<(NodeId, NodeId)> = spec
        .steps
        .iter()
        .enumerate()
        .flat_map(|(i, s)| s.refs.iter().map(move |&j| (j, i)))
        .map(|(j, i)| (nodes[j], nodes[i]))
        .collect();
    ensure!(!expected.is_empty(), "fixture has no references");
    ensure!(report.lineage.edges == expected, "edges {:?} != {:?}", report.lineage.edges, expected);
    ensure!(report.lineage.nodes.len() == spec.steps.len(), "node count");
    let [a, b, c] = [SYNTHESIZER, DRAFTER, REVIEWER].map(|r| scenario_key(0, r).did());
    let agents = report.lineage.agent_edges();
    ensure!(agents == [(a, b), (b, c)].into(), "agent edges {agents:?}");

    let mut seen = Vec::new();
    for (fault, code) in [("dangling-ref", "DanglingRef"), ("forge", "RefHashMismatch"), ("cycle", "CycleDetected")] {
        let files = generate(&builtin_pharma().with_fault(default_fault("pharma", fault).unwrap()), 0)
            .map_err(|e| e.to_string())?
            .files;
        let report = audit_bundle(&files).map_err(|e| e.to_string())?;
        let hit = report
            .findings
            .iter()
            .filter(|f| f.check == CheckKind::LineageCheck && f.reason.split('+').any(|r| r == code))
            .count();
        ensure!(hit > 0, "{fault}: no LineageCheck {code}");
        seen.push(format!("{code}x{hit}"));
    }
    Ok(format!(
        "{} edges reconstructed, agent chain {}->{}->{}; {}",
        expected.len(),
        SYNTHESIZER,
        DRAFTER,
        REVIEWER,
        seen.join(" ")
    ))
}

// 7

fn throughput() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = tmp.path().join("ledger.ttkl");
    let kp = generate_keypair(Some(&[7; 32])).map_err(|e| e.to_string())?;
    let mut ledger = FileLedger::open(&path).map_err(|e| e.to_string())?;
    register_identity(&AgentIdentity::new(kp.did(), BTreeMap::new()), &kp, 0, &mut ledger).map_err(|e| e.to_string())?;
    let policy = ttk_core::canonical::digest(b"throughput policy");

    let start = Instant::now();
    let mut log = TraceLog::new(kp.did());
    let mut pool = PendingPool::new();
    for i in 0..10_000i64 {
        let mut a = ActionRecord::new("step", 1_000 + i);
        a.params.insert("i".into(), Value::Int(i));
        let entry = log.record(&kp, policy, a).map_err(|e| e.to_string())?;
        pool.add(entry.into());
    }
    let mut anchors = flush_batches(&mut pool, AnchorPolicy::EveryN(1024), &kp, 20_000, &mut ledger).map_err(|e| e.to_string())?;
    anchors.extend(flush_batches(&mut pool, AnchorPolicy::Manual, &kp, 20_001, &mut ledger).map_err(|e| e.to_string())?);
    let build = within(start, Duration::from_secs(5), "seal+append+anchor")?;
    let covered: u64 = anchors.iter().map(|a| a.leaf_count).sum();
    ensure!(covered == 10_000 && pool.is_empty(), "anchored {covered} leaves");

    let reopened = FileLedger::open(&path).map_err(|e| e.to_string())?;
    let start = Instant::now();
    verify_chain(&reopened).map_err(|e| e.to_string())?;
    let check = within(start, Duration::from_secs(1), "verify_chain")?;
    Ok(format!(
        "10000 entries in {} batches: {build:?}; verify_chain over {} records: {check:?}",
        anchors.len(),
        reopened.len()
    ))
}

// 8

fn ttk(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_ttk"))
        .args(args)
        .env_remove("TTK_LEDGER")
        .env_remove("TTK_STORE")
        .output()
        .expect("spawn ttk");
    (out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn cli_contract() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = tmp.path();
    let p = |d: &Path| d.to_str().unwrap().to_owned();
    let run = |name: &str, fault: Option<&str>, out: &Path| {
        let out = p(out);
        let mut args = vec!["scenario", "run", name, "--seed", "11", "--out", out.as_str()];
        if let Some(f) = fault {
            args.extend(["--fault", f]);
        }
        ttk(&args).0
    };
    let verify = |dir: &Path| {
        let traces = format!("{}/traces/*.ttkt", dir.display());
        let (ledger, store) = (p(&dir.join(LEDGER_FILE)), p(&dir.join("policies")));
        ttk(&["verify", "--traces", &traces, "--ledger", &ledger, "--store", &store])
    };

    let mut cases: Vec<(&str, i32, (i32, String))> = Vec::new();
    for (name, fault, expect) in [
        ("pharma", None, 0),
        ("legal", None, 0),
        ("pharma", Some("breach-action"), 1),
        ("legal", Some("rate-burst"), 1),
        ("pharma", Some("drop-anchor"), 1),
        ("pharma", Some("tamper-trace"), 3),
        ("legal", Some("tamper-ledger"), 1),
    ] {
        let dir = root.join(format!("{name}-{}", fault.unwrap_or("clean")));
        ensure!(run(name, fault, &dir) == 0, "scenario run {name} {fault:?} failed");
        cases.push((if expect == 0 { "clean verify" } else { fault.unwrap() }, expect, verify(&dir)));
    }
    let clean = root.join("pharma-clean");
    let key = p(&clean.join("none.json"));
    let ledger = p(&clean.join(LEDGER_FILE));
    cases.push(("unknown flag", 2, ttk(&["verify", "--bogus"])));
    cases.push(("missing argument", 2, ttk(&["keygen"])));
    cases.push(("bad strategy", 2, ttk(&["anchor", "flush", "--traces", "x", "--ledger", &ledger, "--key", &key, "--strategy", "sometimes"])));
    cases.push(("bad seed", 2, ttk(&["keygen", "--out", &key, "--seed-hex", "XYZ"])));
    cases.push(("help", 0, ttk(&["--help"])));
    cases.push(("ledger verify clean", 0, ttk(&["ledger", "verify", "--ledger", &ledger])));
    let garbage = root.join("garbage.json");
    fs::write(&garbage, b"{\"policy_id\":").map_err(|e| e.to_string())?;
    cases.push(("corrupt policy", 3, ttk(&["policy", "validate", "--policy", &p(&garbage)])));
    cases.push(("missing key file", 3, ttk(&["id", "register", "--key", &key, "--ledger", &ledger])));
    let no_ledger = root.join("pharma-breach-action");
    fs::remove_file(no_ledger.join(LEDGER_FILE)).map_err(|e| e.to_string())?;
    cases.push(("missing ledger", 3, verify(&no_ledger)));
    let broken = root.join("legal-tamper-ledger");
    cases.push(("ledger verify tampered", 1, ttk(&["ledger", "verify", "--ledger", &p(&broken.join(LEDGER_FILE))])));

    for (what, expect, (got, stderr)) in &cases {
        ensure!(got == expect, "{what}: exit {got}, expected {expect} ({})", stderr.trim());
    }
    let (_, stderr) = &cases[5].2;
    ensure!(stderr.contains(".ttkt: line "), "tampered trace error does not name file and line: {stderr}");

    let mut regenerated = 0;
    for (name, fault) in [("pharma", None), ("legal", Some("cycle")), ("pharma", Some("forge"))] {
        let a = root.join(format!("regen-{name}-a"));
        let b = root.join(format!("regen-{name}-b"));
        ensure!(run(name, fault, &a) == 0 && run(name, fault, &b) == 0, "regeneration run failed");
        let ta = tree(&a);
        ensure!(!ta.is_empty() && ta == tree(&b), "{name} {fault:?}: regenerated bytes differ");
        regenerated += ta.len();
    }
    Ok(format!("{} exit-code cases hold; {regenerated} regenerated files byte-identical", cases.len()))
}
