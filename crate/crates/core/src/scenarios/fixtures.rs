//! The two built-in workflows: a three-stage pharmaceutical submission
//! pipeline and a two-firm cross-jurisdiction redaction pipeline.

use std::collections::{BTreeMap, BTreeSet};

use crate::anchor::AnchorPolicy;
use crate::identity::Did;
use crate::policy::{ParameterConstraint, PolicyDocument, RateLimit};
use crate::trace::AnchorClass;

use super::{
    AgentSpec, BreachKind, FaultInjection, ParamTemplate, ScenarioSpec, StepSpec, TamperTarget, BASE_EPOCH_MS,
};

const DAY_MS: i64 = 86_400_000;

fn set(items: &[&str]) -> BTreeSet<String> {
    items.iter().map(|s| (*s).to_owned()).collect()
}

fn int_range(min: i64, max: i64) -> ParameterConstraint {
    ParameterConstraint::IntRange { min, max }
}

fn one_of(items: &[&str]) -> ParameterConstraint {
    ParameterConstraint::OneOf { values: set(items) }
}

type Constraints = Vec<(&'static str, Vec<(&'static str, ParameterConstraint)>)>;

fn policy(
    id: &str,
    actions: &[&str],
    constraints: Constraints,
    rate_limits: Vec<RateLimit>,
    jurisdictions: &[&str],
    boundaries: &[&str],
) -> PolicyDocument {
    PolicyDocument {
        policy_id: id.to_owned(),
        // Replaced by the agent's own DID when the scenario runs.
        agent_did: Did::from_public_key([0; 32]),
        version: 1,
        allowed_actions: set(actions),
        parameter_constraints: constraints
            .into_iter()
            .map(|(action, params)| {
                (
                    action.to_owned(),
                    params.into_iter().map(|(p, c)| (p.to_owned(), c)).collect(),
                )
            })
            .collect(),
        rate_limits,
        jurisdictions: set(jurisdictions),
        data_boundaries: set(boundaries),
        not_before_ms: BASE_EPOCH_MS - DAY_MS,
        not_after_ms: BASE_EPOCH_MS + 30 * DAY_MS,
        delegated_by: None,
    }
}

fn per_ten_minutes(max_actions: i64, action_filter: Option<&str>) -> RateLimit {
    RateLimit {
        window_ms: 600_000,
        max_actions,
        action_filter: action_filter.map(str::to_owned),
    }
}

fn agent(role: &str, org: &str, policy: Option<PolicyDocument>) -> AgentSpec {
    AgentSpec {
        role: role.to_owned(),
        metadata: [("org".to_owned(), org.into())].into_iter().collect(),
        policy,
    }
}

struct StepBuilder(StepSpec);

impl StepBuilder {
    fn new(role: &str, action: &str, jurisdiction: &str) -> Self {
        StepBuilder(StepSpec {
            role: role.to_owned(),
            action: action.to_owned(),
            params: BTreeMap::new(),
            refs: Vec::new(),
            anchor_class: AnchorClass::Routine,
            jurisdiction: jurisdiction.to_owned(),
            data_labels: Vec::new(),
        })
    }

    fn param(mut self, name: &str, t: ParamTemplate) -> Self {
        self.0.params.insert(name.to_owned(), t);
        self
    }

    fn fixed(self, name: &str, v: &str) -> Self {
        self.param(name, ParamTemplate::Fixed(v.into()))
    }

    fn between(self, name: &str, lo: i64, hi: i64) -> Self {
        self.param(name, ParamTemplate::IntBetween(lo, hi))
    }

    fn choice(self, name: &str, items: &[&str]) -> Self {
        self.param(name, ParamTemplate::Choice(items.iter().map(|s| (*s).to_owned()).collect()))
    }

    fn refs(mut self, refs: &[usize]) -> Self {
        self.0.refs = refs.to_vec();
        self
    }

    fn labels(mut self, labels: &[&str]) -> Self {
        self.0.data_labels = labels.iter().map(|s| (*s).to_owned()).collect();
        self
    }

    fn critical(mut self) -> Self {
        self.0.anchor_class = AnchorClass::Critical;
        self
    }

    fn done(self) -> StepSpec {
        self.0
    }
}

pub const SYNTHESIZER: &str = "data-synthesizer";
pub const DRAFTER: &str = "document-drafter";
pub const REVIEWER: &str = "qa-reviewer";

/// Synthetic preclinical data feeds submission drafting, which feeds QA
/// review and final sign-off.
pub fn builtin_pharma() -> ScenarioSpec {
    let synthesizer = policy(
        "gxp-data-synthesis",
        &["synthesize_dataset", "validate_dataset"],
        vec![
            (
                "synthesize_dataset",
                vec![
                    ("n_records", int_range(100, 5_000)),
                    ("method", one_of(&["bootstrap", "gan", "smote"])),
                    ("study_id", ParameterConstraint::Required),
                ],
            ),
            ("validate_dataset", vec![("threshold_pct", int_range(80, 100))]),
        ],
        vec![per_ten_minutes(6, None)],
        &["EU", "US"],
        &["deidentified", "synthetic"],
    );
    let drafter = policy(
        "gxp-submission-drafting",
        &["draft_section", "revise_section"],
        vec![
            (
                "draft_section",
                vec![
                    ("section", one_of(&["clinical", "cmc", "nonclinical"])),
                    ("pages", int_range(1, 40)),
                ],
            ),
            (
                "revise_section",
                vec![
                    ("pages", int_range(1, 40)),
                    ("note", ParameterConstraint::MaxLength { limit: 120 }),
                ],
            ),
        ],
        vec![per_ten_minutes(6, None)],
        &["EU", "US"],
        &["deidentified", "regulatory"],
    );
    let reviewer = policy(
        "gxp-quality-review",
        &["approve_submission", "review_document"],
        vec![
            (
                "review_document",
                vec![
                    ("checklist", one_of(&["gxp-core", "gxp-full"])),
                    ("findings", int_range(0, 10)),
                ],
            ),
            ("approve_submission", vec![("signoff", ParameterConstraint::Required)]),
        ],
        vec![per_ten_minutes(6, None), per_ten_minutes(2, Some("approve_submission"))],
        &["EU", "US"],
        &["regulatory"],
    );

    let synth = |action| StepBuilder::new(SYNTHESIZER, action, "US");
    let synthesize = || {
        synth("synthesize_dataset")
            .between("n_records", 500, 4_000)
            .choice("method", &["bootstrap", "gan", "smote"])
            .fixed("study_id", "TT-101")
    };
    let validate = || synth("validate_dataset").between("threshold_pct", 90, 99);
    let draft = |section| {
        StepBuilder::new(DRAFTER, "draft_section", "US")
            .fixed("section", section)
            .between("pages", 5, 20)
            .labels(&["deidentified"])
    };
    let revise = |note| {
        StepBuilder::new(DRAFTER, "revise_section", "EU")
            .between("pages", 10, 30)
            .fixed("note", note)
            .labels(&["regulatory"])
    };
    let review = || {
        StepBuilder::new(REVIEWER, "review_document", "EU")
            .choice("checklist", &["gxp-core", "gxp-full"])
            .between("findings", 0, 3)
            .labels(&["regulatory"])
    };

    let steps = vec![
        synthesize().labels(&["synthetic"]).done(),
        validate().refs(&[0]).labels(&["synthetic"]).done(),
        draft("nonclinical").refs(&[1]).done(),
        synthesize().labels(&["deidentified"]).done(),
        validate().refs(&[3]).labels(&["deidentified"]).done(),
        draft("clinical").refs(&[4]).done(),
        revise("merge nonclinical and clinical summaries").refs(&[2, 5]).done(),
        review().refs(&[6]).critical().done(),
        revise("address review comments").refs(&[6]).done(),
        review().refs(&[8]).done(),
        draft("cmc").refs(&[4]).done(),
        StepBuilder::new(REVIEWER, "approve_submission", "US")
            .fixed("signoff", "qa-lead")
            .refs(&[9, 10])
            .labels(&["regulatory"])
            .critical()
            .done(),
    ];

    ScenarioSpec {
        name: "pharma".into(),
        agents: vec![
            agent(SYNTHESIZER, "preclinical-lab", Some(synthesizer)),
            agent(DRAFTER, "regulatory-affairs", Some(drafter)),
            agent(REVIEWER, "quality-assurance", Some(reviewer)),
        ],
        steps,
        anchor_strategy: AnchorPolicy::CriticalImmediate { fallback_n: 4 },
        submitter: REVIEWER.into(),
        faults: Vec::new(),
    }
}

pub const EU_COUNSEL: &str = "eu-counsel";
pub const US_COUNSEL: &str = "us-counsel";
pub const ORCHESTRATOR: &str = "orchestrator";

/// Two firms redact and summarize shared documents under their own privacy
/// regimes; a neutral orchestrator anchors their work.
pub fn builtin_legal() -> ScenarioSpec {
    let firm_policy = |id, profiles: &[&str], languages: &[&str], jurisdiction, personal| {
        policy(
            id,
            &["ingest_document", "redact_document", "summarize_document"],
            vec![
                ("ingest_document", vec![("doc_id", ParameterConstraint::Required)]),
                (
                    "redact_document",
                    vec![("profile", one_of(profiles)), ("pages", int_range(1, 200))],
                ),
                (
                    "summarize_document",
                    vec![("max_words", int_range(50, 500)), ("language", one_of(languages))],
                ),
            ],
            vec![per_ten_minutes(6, None)],
            &[jurisdiction],
            &["public", "redacted", personal],
        )
    };
    let eu = firm_policy(
        "eu-privacy-redaction",
        &["gdpr-art9", "gdpr-standard"],
        &["de", "en", "fr"],
        "EU",
        "gdpr-personal",
    );
    let us = firm_policy(
        "us-ca-privacy-redaction",
        &["ccpa-sensitive", "ccpa-standard"],
        &["en", "es"],
        "US-CA",
        "ccpa-personal",
    );

    let e = |action| StepBuilder::new(EU_COUNSEL, action, "EU");
    let u = |action| StepBuilder::new(US_COUNSEL, action, "US-CA");
    let steps = vec![
        e("ingest_document").fixed("doc_id", "EU-MSA-001").labels(&["gdpr-personal"]).done(),
        e("redact_document")
            .choice("profile", &["gdpr-art9", "gdpr-standard"])
            .between("pages", 10, 120)
            .refs(&[0])
            .labels(&["gdpr-personal", "redacted"])
            .done(),
        u("ingest_document").fixed("doc_id", "US-NDA-007").labels(&["ccpa-personal"]).done(),
        u("redact_document")
            .choice("profile", &["ccpa-sensitive", "ccpa-standard"])
            .between("pages", 5, 80)
            .refs(&[2])
            .labels(&["ccpa-personal", "redacted"])
            .done(),
        e("summarize_document")
            .between("max_words", 100, 300)
            .choice("language", &["de", "en"])
            .refs(&[1])
            .labels(&["redacted"])
            .critical()
            .done(),
        u("summarize_document")
            .between("max_words", 100, 300)
            .fixed("language", "en")
            .refs(&[3, 4])
            .labels(&["redacted"])
            .done(),
        e("ingest_document").fixed("doc_id", "EU-DPA-014").labels(&["gdpr-personal"]).done(),
        e("redact_document")
            .fixed("profile", "gdpr-standard")
            .between("pages", 1, 40)
            .refs(&[6])
            .labels(&["redacted"])
            .done(),
        u("summarize_document")
            .between("max_words", 50, 150)
            .choice("language", &["en", "es"])
            .refs(&[7])
            .labels(&["public", "redacted"])
            .done(),
        e("summarize_document")
            .between("max_words", 200, 500)
            .fixed("language", "fr")
            .refs(&[5, 7])
            .labels(&["public"])
            .critical()
            .done(),
    ];

    ScenarioSpec {
        name: "legal".into(),
        agents: vec![
            agent(EU_COUNSEL, "firm-eu", Some(eu)),
            agent(US_COUNSEL, "firm-us", Some(us)),
            agent(ORCHESTRATOR, "clearing-house", None),
        ],
        steps,
        anchor_strategy: AnchorPolicy::EveryN(3),
        submitter: ORCHESTRATOR.into(),
        faults: Vec::new(),
    }
}

/// Names accepted by [`default_fault`].
pub const FAULT_NAMES: [&str; 10] = [
    "breach-action",
    "breach-jurisdiction",
    "breach-param",
    "cycle",
    "dangling-ref",
    "drop-anchor",
    "forge",
    "rate-burst",
    "tamper-ledger",
    "tamper-trace",
];

/// A representative instance of a named fault for one of the built-in
/// scenarios.
pub fn default_fault(scenario: &str, name: &str) -> Option<FaultInjection> {
    let pharma = scenario == "pharma";
    if !pharma && scenario != "legal" {
        return None;
    }
    let pick = |p: usize, l: usize| if pharma { p } else { l };
    Some(match name {
        "breach-action" => FaultInjection::PolicyBreach {
            step: pick(3, 6),
            kind: BreachKind::DisallowedAction,
        },
        "breach-param" => FaultInjection::PolicyBreach {
            step: pick(0, 1),
            kind: BreachKind::ParamOutOfRange,
        },
        "breach-jurisdiction" => FaultInjection::PolicyBreach {
            step: pick(5, 3),
            kind: BreachKind::WrongJurisdiction,
        },
        "forge" => FaultInjection::ForgeSignature { step: pick(6, 1) },
        "dangling-ref" => FaultInjection::DanglingRef { step: pick(9, 8) },
        "cycle" => FaultInjection::CycleRef {
            from: pick(1, 4),
            to: pick(2, 5),
        },
        "drop-anchor" => FaultInjection::DropAnchor { batch: pick(0, 1) },
        "rate-burst" => FaultInjection::RateBurst {
            role: if pharma { SYNTHESIZER } else { US_COUNSEL }.into(),
            count: pick(4, 5),
        },
        "tamper-trace" => FaultInjection::TamperByte(TamperTarget::Trace {
            role: if pharma { DRAFTER } else { EU_COUNSEL }.into(),
            line: 2,
        }),
        "tamper-ledger" => FaultInjection::TamperByte(TamperTarget::LedgerAnchor { nth: 0 }),
        _ => return None,
    })
}
