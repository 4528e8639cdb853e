//! The expected-findings manifest written alongside scenario artifacts.

use std::collections::BTreeSet;

use crate::audit::{AuditReport, CheckKind, LoadError, Overall, Verdict};
use crate::canonical::{decode_canonical, FieldError, Fields, Value};
use crate::identity::{did_field, Did};

/// A non-VALID finding the audit must report. Ledger findings have no agent.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct ExpectedFinding {
    pub agent: Option<Did>,
    pub seq: u64,
    pub check: CheckKind,
    pub verdict: Verdict,
    pub reason: String,
}

impl ExpectedFinding {
    fn to_value(&self) -> Value {
        Value::map([
            ("agent", self.agent.map_or(Value::Null, Value::from)),
            ("seq", Value::Int(self.seq as i64)),
            ("check", Value::str(self.check.as_str())),
            ("verdict", Value::str(self.verdict.as_str())),
            ("reason", Value::str(&self.reason)),
        ])
    }

    fn from_value(v: &Value) -> Result<Self, FieldError> {
        let f = Fields::new(v, "finding")?.only(&["agent", "seq", "check", "verdict", "reason"])?;
        Ok(ExpectedFinding {
            agent: match f.opt("agent") {
                None => None,
                Some(_) => Some(did_field(&f, "agent")?),
            },
            seq: f.int("seq")? as u64,
            check: CheckKind::parse(f.str("check")?).ok_or_else(|| FieldError::new("check", "unknown check"))?,
            verdict: Verdict::parse(f.str("verdict")?)
                .ok_or_else(|| FieldError::new("verdict", "unknown verdict"))?,
            reason: f.str("reason")?.to_owned(),
        })
    }
}

impl std::fmt::Display for ExpectedFinding {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let who = self.agent.map_or_else(|| "ledger".to_owned(), |d| d.short());
        write!(f, "{who}#{} {} {} {}", self.seq, self.check, self.verdict, self.reason)
    }
}

/// What auditing a generated directory must yield: either exactly these
/// non-VALID findings and this overall verdict, or a load failure at
/// `import_error` (file, 1-based line).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub scenario: String,
    pub seed: u64,
    pub faults: Vec<String>,
    pub overall: Option<Overall>,
    pub findings: Vec<ExpectedFinding>,
    pub import_error: Option<(String, usize)>,
}

impl Manifest {
    pub(super) fn new(
        scenario: &str,
        seed: u64,
        faults: Vec<String>,
        findings: Vec<ExpectedFinding>,
        import_error: Option<(String, usize)>,
    ) -> Self {
        let overall = if import_error.is_some() {
            None
        } else if findings.iter().any(|f| f.verdict == Verdict::Violation) {
            Some(Overall::ViolationsFound)
        } else if findings.iter().any(|f| f.verdict == Verdict::Unverifiable) {
            Some(Overall::Unverifiable)
        } else {
            Some(Overall::Valid)
        };
        Manifest {
            scenario: scenario.to_owned(),
            seed,
            faults,
            overall,
            findings,
            import_error,
        }
    }

    pub fn to_value(&self) -> Value {
        Value::map([
            ("scenario", Value::str(&self.scenario)),
            ("seed", Value::Int(self.seed as i64)),
            ("faults", Value::List(self.faults.iter().map(Value::str).collect())),
            ("overall", self.overall.map_or(Value::Null, |o| Value::str(o.as_str()))),
            (
                "findings",
                Value::List(self.findings.iter().map(ExpectedFinding::to_value).collect()),
            ),
            (
                "import_error",
                self.import_error.as_ref().map_or(Value::Null, |(file, line)| {
                    Value::map([("file", Value::str(file)), ("line", Value::Int(*line as i64))])
                }),
            ),
        ])
    }

    pub fn from_value(v: &Value) -> Result<Self, FieldError> {
        let f = Fields::new(v, "manifest")?
            .only(&["scenario", "seed", "faults", "overall", "findings", "import_error"])?;
        let import_error = match f.opt("import_error") {
            None => None,
            Some(ie) => {
                let ie = Fields::new(ie, "import_error")?.only(&["file", "line"])?;
                Some((ie.str("file")?.to_owned(), ie.int("line")? as usize))
            }
        };
        Ok(Manifest {
            scenario: f.str("scenario")?.to_owned(),
            seed: f.int("seed")? as u64,
            faults: f.str_list("faults")?,
            overall: match f.opt("overall") {
                None => None,
                Some(_) => Some(
                    Overall::parse(f.str("overall")?)
                        .ok_or_else(|| FieldError::new("overall", "unknown verdict"))?,
                ),
            },
            findings: f
                .list("findings")?
                .iter()
                .map(ExpectedFinding::from_value)
                .collect::<Result<_, _>>()?,
            import_error,
        })
    }

    pub fn parse(bytes: &[u8]) -> Result<Self, FieldError> {
        let trimmed = bytes.strip_suffix(b"\n").unwrap_or(bytes);
        let value = decode_canonical(trimmed).map_err(|e| FieldError::new("manifest", e.to_string()))?;
        Manifest::from_value(&value)
    }

    /// Compares an audit outcome with the manifest; on mismatch, returns a
    /// description of every difference.
    pub fn check(&self, outcome: &Result<AuditReport, LoadError>) -> Result<(), Vec<String>> {
        let mut problems = Vec::new();
        match (outcome, &self.import_error) {
            (Err(LoadError::Trace { path, line, .. }), Some((file, expected_line))) => {
                if path.to_string_lossy() != file.as_str() || line != expected_line {
                    problems.push(format!(
                        "load failed at {}:{line}, expected {file}:{expected_line}",
                        path.display()
                    ));
                }
            }
            (Err(e), _) => problems.push(format!("unexpected load failure: {e}")),
            (Ok(_), Some((file, line))) => problems.push(format!("expected load failure at {file}:{line}")),
            (Ok(report), None) => {
                let actual: BTreeSet<ExpectedFinding> = report
                    .non_valid()
                    .map(|f| ExpectedFinding {
                        agent: f.agent,
                        seq: f.seq,
                        check: f.check,
                        verdict: f.verdict,
                        reason: f.reason.clone(),
                    })
                    .collect();
                let expected: BTreeSet<ExpectedFinding> = self.findings.iter().cloned().collect();
                for missing in expected.difference(&actual) {
                    problems.push(format!("missing: {missing}"));
                }
                for extra in actual.difference(&expected) {
                    problems.push(format!("unexpected: {extra}"));
                }
                if Some(report.overall) != self.overall {
                    problems.push(format!("overall {} != expected {:?}", report.overall, self.overall));
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(problems)
        }
    }
}
