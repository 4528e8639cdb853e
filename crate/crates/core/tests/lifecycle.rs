//! One agent's full lifecycle against file-backed storage.

use std::collections::BTreeMap;
use std::fs;

use ttk_core::anchor::ledger::verify_chain;
use ttk_core::anchor::{flush_batches, AnchorPolicy, PendingPool};
use ttk_core::audit::{audit_paths, CheckKind, Overall, Verdict};
use ttk_core::canonical::Value;
use ttk_core::identity::{
    generate_keypair, register_identity, resolve, revoke_identity, AgentIdentity, Resolution,
};
use ttk_core::policy::{commit_policy, ParameterConstraint, PolicyDocument, PolicyStore, RateLimit};
use ttk_core::trace::{export_trace, import_trace, ActionRecord, TraceLog};
use ttk_core::{FileLedger, Ledger};

fn policy(agent: ttk_core::Did) -> PolicyDocument {
    PolicyDocument {
        policy_id: "summaries".into(),
        agent_did: agent,
        version: 1,
        allowed_actions: ["summarize".to_owned()].into(),
        parameter_constraints: [(
            "summarize".to_owned(),
            [("words".to_owned(), ParameterConstraint::IntRange { min: 10, max: 500 })].into(),
        )]
        .into(),
        rate_limits: vec![RateLimit {
            window_ms: 10_000,
            max_actions: 10,
            action_filter: None,
        }],
        jurisdictions: ["EU".to_owned()].into(),
        data_boundaries: ["public".to_owned()].into(),
        not_before_ms: 0,
        not_after_ms: 1_000_000,
        delegated_by: None,
    }
}

#[test]
fn register_commit_log_anchor_audit_revoke() {
    let dir = tempfile::tempdir().unwrap();
    let ledger_path = dir.path().join("ledger.ttkl");
    let store_dir = dir.path().join("policies");
    let trace_path = dir.path().join("agent.ttkt");

    let kp = generate_keypair(Some(&[3; 32])).unwrap();
    let mut ledger = FileLedger::open(&ledger_path).unwrap();
    register_identity(&AgentIdentity::new(kp.did(), BTreeMap::new()), &kp, 10, &mut ledger).unwrap();
    let mut store = PolicyStore::open_dir(&store_dir);
    let c = commit_policy(&policy(kp.did()), &kp, 20, &mut ledger, &mut store).unwrap();

    let mut log = TraceLog::new(kp.did());
    for i in 0..6 {
        let mut a = ActionRecord::new("summarize", 1_000 + i * 500);
        a.params.insert("words".into(), Value::Int(100 + i));
        a.ctx.insert("jurisdiction".into(), Value::str("EU"));
        log.record(&kp, c.policy_hash, a).unwrap();
    }
    let mut f = fs::File::create(&trace_path).unwrap();
    export_trace(&log, &mut f).unwrap();
    drop(f);
    let back = import_trace(&mut fs::File::open(&trace_path).unwrap()).unwrap();
    assert_eq!(back, log);

    let mut pool = PendingPool::new();
    for e in &log.entries {
        pool.add(e.into());
    }
    let anchors = flush_batches(&mut pool, AnchorPolicy::EveryN(4), &kp, 5_000, &mut ledger).unwrap();
    assert_eq!((anchors.len(), pool.len()), (1, 2));
    flush_batches(&mut pool, AnchorPolicy::Manual, &kp, 5_001, &mut ledger).unwrap();
    assert!(pool.is_empty());

    // A fresh handle sees everything the writer appended.
    let reopened = FileLedger::open(&ledger_path).unwrap();
    assert_eq!(reopened.len(), 4);
    verify_chain(&reopened).unwrap();

    let report = audit_paths(std::slice::from_ref(&trace_path), &ledger_path, &store_dir).unwrap();
    assert_eq!(report.overall, Overall::Valid);
    assert_eq!(report.findings.len(), 6 * 7);
    assert!(report.attribution.values().all(|a| a.anchor_index.is_some()));

    revoke_identity(&kp.did(), &kp, "retired", 6_000, &mut ledger).unwrap();
    match resolve(&kp.did().to_string(), &ledger).unwrap() {
        Resolution::Revoked { ledger_index, .. } => assert_eq!(ledger_index, 4),
        other => panic!("{other:?}"),
    }
    // Entries anchored before the revocation stay valid.
    let report = audit_paths(std::slice::from_ref(&trace_path), &ledger_path, &store_dir).unwrap();
    assert_eq!(report.overall, Overall::Valid);

    let mut late = ActionRecord::new("summarize", 7_000);
    late.params.insert("words".into(), Value::Int(50));
    log.record(&kp, c.policy_hash, late).unwrap();
    let mut f = fs::File::create(&trace_path).unwrap();
    export_trace(&log, &mut f).unwrap();
    drop(f);
    let report = audit_paths(&[trace_path], &ledger_path, &store_dir).unwrap();
    let bad: Vec<(u64, CheckKind, Verdict, &str)> = report
        .non_valid()
        .map(|f| (f.seq, f.check, f.verdict, f.reason.as_str()))
        .collect();
    assert_eq!(
        bad,
        vec![
            (7, CheckKind::AnchorCheck, Verdict::Unverifiable, "Unanchored"),
            (7, CheckKind::IdentityCheck, Verdict::Violation, "RevokedIdentity"),
        ]
    );
    assert_eq!(report.overall, Overall::ViolationsFound);
}

#[test]
fn ledger_appends_never_rewrite_earlier_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("l.ttkl");
    let mut ledger = FileLedger::open(&path).unwrap();
    let mut previous = Vec::new();
    for i in 0..5 {
        let kp = generate_keypair(Some(&[i + 1; 32])).unwrap();
        register_identity(&AgentIdentity::new(kp.did(), BTreeMap::new()), &kp, i as i64, &mut ledger).unwrap();
        let now = fs::read(&path).unwrap();
        assert!(now.starts_with(&previous));
        assert!(now.len() > previous.len());
        previous = now;
    }
}

#[test]
fn concurrent_writers_serialize_through_the_lock() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("shared.ttkl");
    let handles: Vec<_> = (0..4u8)
        .map(|t| {
            let path = path.clone();
            std::thread::spawn(move || {
                let mut ledger = FileLedger::open(&path).unwrap();
                for i in 0..5u8 {
                    let kp = generate_keypair(Some(&[t * 16 + i + 1; 32])).unwrap();
                    register_identity(&AgentIdentity::new(kp.did(), BTreeMap::new()), &kp, 0, &mut ledger).unwrap();
                }
            })
        })
        .collect();
    for h in handles {
        h.join().unwrap();
    }
    let ledger = FileLedger::open(&path).unwrap();
    assert_eq!(ledger.len(), 20);
    verify_chain(&ledger).unwrap();
}
