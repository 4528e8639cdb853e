use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use ttk_core::anchor::ledger::{verify_chain, LedgerError};
use ttk_core::anchor::{flush_batches, AnchorPolicy, PendingPool};
use ttk_core::audit::{audit_paths, load_trace_file, render_report, LedgerView, LoadError, ReportFormat};
use ttk_core::canonical::{canonical_encode, decode, Digest, Value};
use ttk_core::fsutil::{write_atomic, write_private};
use ttk_core::identity::{
    generate_keypair, keyfile_value, keypair_from_keyfile, register_identity, resolve, revoke_identity,
    AgentIdentity, Did, IdentityError, Resolution,
};
use ttk_core::policy::{commit_policy, validate_policy, PolicyDocument, PolicyError, PolicyStore};
use ttk_core::scenarios::{builtin_legal, builtin_pharma, default_fault, run_scenario};
use ttk_core::trace::{encode_trace, import_trace_for, ActionRecord, AnchorClass, EntryRef, TraceLog};
use ttk_core::{FileLedger, KeyPair, Ledger};

use super::{
    AnchorCommand, AuditArgs, AuditCommand, Class, Command, Format, IdCommand, LedgerCommand, LogCommand,
    PolicyCommand, ScenarioCommand, ScenarioName,
};

pub struct Failure {
    pub code: i32,
    pub message: String,
}

type Outcome = Result<i32, Failure>;

fn usage(msg: impl Display) -> Failure {
    Failure {
        code: 2,
        message: msg.to_string(),
    }
}

fn refused(msg: impl Display) -> Failure {
    Failure {
        code: 1,
        message: msg.to_string(),
    }
}

fn corrupt(msg: impl Display) -> Failure {
    Failure {
        code: 3,
        message: msg.to_string(),
    }
}

fn at(path: &Path) -> impl Fn(io::Error) -> Failure + '_ {
    move |e| corrupt(format!("{}: {e}", path.display()))
}

fn identity_failure(e: IdentityError) -> Failure {
    match e {
        IdentityError::Ledger(_) | IdentityError::KeyFile(_) => corrupt(e),
        IdentityError::MalformedDid(_) => usage(e),
        _ => refused(e),
    }
}

fn policy_failure(e: PolicyError) -> Failure {
    match e {
        PolicyError::Ledger(_) | PolicyError::Io(_) | PolicyError::Malformed(_) | PolicyError::DigestMismatch(_) => {
            corrupt(e)
        }
        _ => refused(e),
    }
}

fn ledger_failure(e: LedgerError) -> Failure {
    corrupt(e)
}

fn load_failure(e: LoadError) -> Failure {
    corrupt(e)
}

/// Writes one canonical document and a newline to standard output.
fn emit(value: &Value) -> Outcome {
    let mut line = canonical_encode(value);
    line.push(b'\n');
    io::stdout().write_all(&line).map_err(|e| corrupt(format!("stdout: {e}")))?;
    Ok(0)
}

fn now_ms(ts: Option<i64>) -> i64 {
    ts.unwrap_or_else(|| {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as i64)
            .unwrap_or(0)
    })
}

fn read_key(path: &Path) -> Result<KeyPair, Failure> {
    let bytes = fs::read(path).map_err(at(path))?;
    let trimmed = bytes.strip_suffix(b"\n").unwrap_or(&bytes);
    let value = decode(trimmed).map_err(|e| corrupt(format!("{}: {e}", path.display())))?;
    keypair_from_keyfile(&value).map_err(|e| corrupt(format!("{}: {e}", path.display())))
}

/// A JSON object file, in any valid spelling.
fn read_object(path: &Path) -> Result<BTreeMap<String, Value>, Failure> {
    let bytes = fs::read(path).map_err(at(path))?;
    match decode(&bytes) {
        Ok(Value::Map(m)) => Ok(m),
        Ok(other) => Err(corrupt(format!("{}: expected an object, found {}", path.display(), other.kind()))),
        Err(e) => Err(corrupt(format!("{}: {e}", path.display()))),
    }
}

fn read_policy(path: &Path) -> Result<PolicyDocument, Failure> {
    let bytes = fs::read(path).map_err(at(path))?;
    PolicyDocument::parse(&bytes).map_err(|e| corrupt(format!("{}: {e}", path.display())))
}

fn open_ledger(path: &Path) -> Result<FileLedger, Failure> {
    FileLedger::open(path).map_err(|e| corrupt(format!("{}: {e}", path.display())))
}

fn expand(pattern: &str) -> Result<Vec<PathBuf>, Failure> {
    let paths = glob::glob(pattern).map_err(|e| usage(format!("bad glob {pattern:?}: {e}")))?;
    let mut out: Vec<PathBuf> = paths
        .collect::<Result<_, _>>()
        .map_err(|e| corrupt(format!("{pattern}: {e}")))?;
    out.sort();
    if out.is_empty() {
        return Err(corrupt(format!("no trace files match {pattern:?}")));
    }
    Ok(out)
}

pub fn dispatch(command: Command) -> Outcome {
    match command {
        Command::Keygen { out, seed_hex } => keygen(&out, seed_hex),
        Command::Id(c) => id(c),
        Command::Policy(c) => policy(c),
        Command::Log(LogCommand::Append {
            key,
            trace,
            policy_hash,
            action,
            params,
            ts_ms,
            ctx,
            refs,
            anchor_class,
        }) => {
            let mut record = ActionRecord::new(action, now_ms(ts_ms));
            if let Some(p) = params {
                record.params = read_object(&p)?;
            }
            if let Some(c) = ctx {
                record.ctx = read_object(&c)?;
            }
            record.refs = refs.iter().map(|r| parse_ref(r)).collect::<Result<_, _>>()?;
            record.anchor_class = match anchor_class {
                Class::Critical => AnchorClass::Critical,
                Class::Routine => AnchorClass::Routine,
            };
            let policy: Digest = policy_hash
                .parse()
                .map_err(|e| usage(format!("--policy-hash: {e}")))?;
            log_append(&key, &trace, policy, record)
        }
        Command::Anchor(AnchorCommand::Flush {
            traces,
            ledger,
            key,
            strategy,
            ts_ms,
        }) => anchor_flush(&traces, &ledger.ledger, &key, &strategy, now_ms(ts_ms)),
        Command::Ledger(LedgerCommand::Verify { ledger }) => {
            let l = open_ledger(&ledger.ledger)?;
            match verify_chain(&l) {
                Ok(()) => emit(&Value::map([
                    ("status", Value::str("ok")),
                    ("records", Value::Int(l.len() as i64)),
                ])),
                Err(fault) => {
                    eprintln!("ttk: {}: {fault}", ledger.ledger.display());
                    emit(&Value::map([
                        ("status", Value::str("broken")),
                        ("idx", Value::Int(fault.idx as i64)),
                        ("reason", Value::str(fault.reason)),
                    ]))?;
                    Ok(1)
                }
            }
        }
        Command::Ledger(LedgerCommand::Checkpoint { ledger }) => {
            let l = open_ledger(&ledger.ledger)?;
            match l.last().map_err(ledger_failure)? {
                Some(r) => {
                    println!("{}", r.checkpoint());
                    Ok(0)
                }
                None => Err(corrupt(format!("{}: ledger is empty", ledger.ledger.display()))),
            }
        }
        Command::Verify(args) => audit(&args, None, false),
        Command::Audit(AuditCommand::Report { audit: args, out }) => audit(&args, out.as_deref(), true),
        Command::Scenario(ScenarioCommand::Run { name, seed, out, faults }) => {
            let (label, mut spec) = match name {
                ScenarioName::Pharma => ("pharma", builtin_pharma()),
                ScenarioName::Legal => ("legal", builtin_legal()),
            };
            for f in &faults {
                spec.faults.push(default_fault(label, f).ok_or_else(|| usage(format!("unknown fault {f}")))?);
            }
            let artifacts = run_scenario(&spec, seed, &out).map_err(|e| match e {
                ttk_core::scenarios::ScenarioError::InvalidSpec(_) => usage(e),
                _ => corrupt(e),
            })?;
            emit(&Value::map([
                ("scenario", Value::str(label)),
                ("seed", Value::Int(seed as i64)),
                ("dir", Value::str(out.display().to_string())),
                ("files", Value::Int(artifacts.files.len() as i64)),
                (
                    "expected_overall",
                    artifacts.manifest.overall.map_or(Value::Null, |o| Value::str(o.as_str())),
                ),
            ]))
        }
    }
}

fn keygen(out: &Path, seed: Option<[u8; 32]>) -> Outcome {
    let kp = generate_keypair(seed.as_ref().map(|s| s.as_slice())).map_err(corrupt)?;
    let mut bytes = canonical_encode(&keyfile_value(&kp));
    bytes.push(b'\n');
    write_private(out, &bytes).map_err(at(out))?;
    emit(&Value::map([("did", kp.did().into())]))
}

fn id(c: IdCommand) -> Outcome {
    match c {
        IdCommand::Register {
            key,
            ledger,
            metadata,
            ts_ms,
        } => {
            let kp = read_key(&key)?;
            let metadata = match metadata {
                Some(p) => read_object(&p)?,
                None => BTreeMap::new(),
            };
            let mut l = open_ledger(&ledger.ledger)?;
            let idx = register_identity(&AgentIdentity::new(kp.did(), metadata), &kp, now_ms(ts_ms), &mut l)
                .map_err(identity_failure)?;
            emit(&Value::map([
                ("did", kp.did().into()),
                ("ledger_index", Value::Int(idx as i64)),
            ]))
        }
        IdCommand::Resolve { did, ledger } => {
            let l = open_ledger(&ledger.ledger)?;
            match resolve(&did, &l).map_err(identity_failure)? {
                Resolution::NotFound => {
                    emit(&Value::map([("did", Value::str(&did)), ("status", Value::str("not_found"))]))?;
                    Ok(1)
                }
                Resolution::Registered(identity) => emit(&Value::map([
                    ("status", Value::str("registered")),
                    ("identity", identity.to_value()),
                ])),
                Resolution::Revoked {
                    identity,
                    revoked_at_ms,
                    ledger_index,
                } => emit(&Value::map([
                    ("status", Value::str("revoked")),
                    ("identity", identity.to_value()),
                    ("revoked_at_ms", Value::Int(revoked_at_ms)),
                    ("revocation_index", Value::Int(ledger_index as i64)),
                ])),
            }
        }
        IdCommand::Revoke {
            key,
            ledger,
            reason,
            ts_ms,
        } => {
            let kp = read_key(&key)?;
            let mut l = open_ledger(&ledger.ledger)?;
            let idx = revoke_identity(&kp.did(), &kp, &reason, now_ms(ts_ms), &mut l).map_err(identity_failure)?;
            emit(&Value::map([
                ("did", kp.did().into()),
                ("ledger_index", Value::Int(idx as i64)),
            ]))
        }
    }
}

fn policy(c: PolicyCommand) -> Outcome {
    match c {
        PolicyCommand::Validate { policy } => {
            let doc = read_policy(&policy)?;
            let problems = validate_policy(&doc);
            emit(&Value::map([
                ("valid", Value::Bool(problems.is_empty())),
                ("policy_hash", doc.policy_hash().into()),
                (
                    "errors",
                    Value::List(problems.iter().map(|p| Value::str(p.to_string())).collect()),
                ),
            ]))?;
            Ok(if problems.is_empty() { 0 } else { 1 })
        }
        PolicyCommand::Commit {
            key,
            policy,
            ledger,
            store,
            ts_ms,
        } => {
            let kp = read_key(&key)?;
            let doc = read_policy(&policy)?;
            let mut l = open_ledger(&ledger.ledger)?;
            let mut s = PolicyStore::open_dir(&store.store);
            let c = commit_policy(&doc, &kp, now_ms(ts_ms), &mut l, &mut s).map_err(policy_failure)?;
            emit(&Value::map([
                ("policy_hash", c.policy_hash.into()),
                ("agent_did", c.agent_did.into()),
                ("ledger_index", Value::Int(c.ledger_index as i64)),
            ]))
        }
    }
}

fn parse_ref(s: &str) -> Result<EntryRef, Failure> {
    let bad = || usage(format!("--ref {s:?}: expected <did>:<seq>:<hash>"));
    let mut parts = s.rsplitn(3, ':');
    let (hash, seq, agent) = match (parts.next(), parts.next(), parts.next()) {
        (Some(h), Some(q), Some(a)) => (h, q, a),
        _ => return Err(bad()),
    };
    Ok(EntryRef {
        agent: Did::parse(agent).map_err(|_| bad())?,
        seq: seq.parse().map_err(|_| bad())?,
        hash: hash.parse().map_err(|_| bad())?,
    })
}

fn log_append(key: &Path, trace: &Path, policy: Digest, record: ActionRecord) -> Outcome {
    let kp = read_key(key)?;
    let mut log = match fs::File::open(trace) {
        Ok(mut f) => import_trace_for(kp.did(), &mut f)
            .map_err(|e| corrupt(format!("{}: line {}: {}", trace.display(), e.line, e.error)))?,
        Err(e) if e.kind() == io::ErrorKind::NotFound => TraceLog::new(kp.did()),
        Err(e) => return Err(at(trace)(e)),
    };
    let entry = log.record(&kp, policy, record).map_err(refused)?.clone();
    write_atomic(trace, &encode_trace(&log)).map_err(at(trace))?;
    emit(&Value::map([
        ("agent", entry.body.agent.into()),
        ("seq", Value::Int(entry.body.seq as i64)),
        ("hash", entry.hash.into()),
    ]))
}

fn parse_strategy(s: &str) -> Result<AnchorPolicy, Failure> {
    let bad = || usage(format!("--strategy {s:?}: expected every-n:N, critical[:N] or manual"));
    let policy = match s.split_once(':') {
        None if s == "manual" => AnchorPolicy::Manual,
        None if s == "critical" => AnchorPolicy::CriticalImmediate { fallback_n: 16 },
        Some(("every-n", n)) => AnchorPolicy::EveryN(n.parse().map_err(|_| bad())?),
        Some(("critical", n)) => AnchorPolicy::CriticalImmediate {
            fallback_n: n.parse().map_err(|_| bad())?,
        },
        _ => return Err(bad()),
    };
    policy.validate().map_err(usage)?;
    Ok(policy)
}

fn anchor_flush(traces: &str, ledger: &Path, key: &Path, strategy: &str, now: i64) -> Outcome {
    let strategy = parse_strategy(strategy)?;
    let kp = read_key(key)?;
    let paths = expand(traces)?;
    let mut l = open_ledger(ledger)?;
    let view = LedgerView::build(&l);
    let anchored: BTreeSet<(Did, u64)> = view.anchors().flat_map(|a| a.leaves()).collect();
    let mut pool = PendingPool::new();
    for path in &paths {
        if let Some(log) = load_trace_file(path).map_err(load_failure)? {
            for e in log.entries.iter().filter(|e| !anchored.contains(&(e.body.agent, e.body.seq))) {
                pool.add(e.into());
            }
        }
    }
    let anchors = flush_batches(&mut pool, strategy, &kp, now, &mut l).map_err(|e| match e {
        ttk_core::anchor::AnchorError::LedgerAppendFailure(_) => corrupt(e),
        _ => refused(e),
    })?;
    emit(&Value::map([
        (
            "anchors",
            Value::List(
                anchors
                    .iter()
                    .map(|a| {
                        Value::map([
                            ("batch_id", Value::str(&a.batch_id)),
                            ("ledger_index", Value::Int(a.ledger_index.unwrap_or(0) as i64)),
                            ("leaf_count", Value::Int(a.leaf_count as i64)),
                            ("merkle_root", a.merkle_root.into()),
                        ])
                    })
                    .collect(),
            ),
        ),
        ("pending", Value::Int(pool.len() as i64)),
    ]))
}

fn audit(args: &AuditArgs, out: Option<&Path>, full: bool) -> Outcome {
    let paths = expand(&args.traces)?;
    let ledger = &args.ledger.ledger;
    let report = audit_paths(&paths, ledger, &args.store.store).map_err(load_failure)?;
    let mut shown = report.clone();
    if !full {
        shown.findings.retain(|f| f.verdict != ttk_core::audit::Verdict::Valid);
    }
    let format = match args.format {
        Format::Interchange => ReportFormat::Interchange,
        Format::Text => ReportFormat::Text,
    };
    let bytes = render_report(&shown, format);
    match out {
        Some(path) => {
            write_atomic(path, &bytes).map_err(at(path))?;
            emit(&Value::map([
                ("overall", Value::str(report.overall.as_str())),
                ("out", Value::str(path.display().to_string())),
            ]))?;
        }
        None => io::stdout().write_all(&bytes).map_err(|e| corrupt(format!("stdout: {e}")))?,
    }
    Ok(report.overall.exit_code())
}
