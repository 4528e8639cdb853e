use std::collections::BTreeMap;

use proptest::prelude::*;
use ttk_core::anchor::{merkle_prove, merkle_root, merkle_verify, Side};
use ttk_core::canonical::{canonical_encode, decode, decode_canonical, domain_digest, Digest, Value};
use ttk_core::identity::generate_keypair;
use ttk_core::policy::{check_rate, PolicyDocument, RateLimit};
use ttk_core::trace::{ActionRecord, TraceLog};

fn value() -> impl Strategy<Value = Value> {
    let leaf = prop_oneof![
        Just(Value::Null),
        any::<bool>().prop_map(Value::Bool),
        any::<i64>().prop_map(Value::Int),
        "\\PC{0,12}".prop_map(Value::Str),
        prop::collection::vec(0u8..0x20, 0..4).prop_map(|b| Value::Str(b.into_iter().map(char::from).collect())),
    ];
    leaf.prop_recursive(4, 48, 6, |inner| {
        prop_oneof![
            prop::collection::vec(inner.clone(), 0..6).prop_map(Value::List),
            prop::collection::btree_map("\\PC{0,8}", inner, 0..6).prop_map(Value::Map),
        ]
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2_000))]

    #[test]
    fn canonical_round_trip(v in value()) {
        let bytes = canonical_encode(&v);
        prop_assert_eq!(&bytes, &canonical_encode(&v.clone()));
        prop_assert_eq!(decode_canonical(&bytes).unwrap(), v.clone());
        prop_assert_eq!(decode(&bytes).unwrap(), v);
    }

    #[test]
    fn pretty_printing_is_not_canonical(v in value()) {
        let bytes = canonical_encode(&v);
        let pretty = serde_json::to_vec_pretty(&serde_json::from_slice::<serde_json::Value>(&bytes).unwrap()).unwrap();
        prop_assert_eq!(decode(&pretty).unwrap(), v);
        if pretty != bytes {
            prop_assert!(decode_canonical(&pretty).is_err());
        }
    }
}

fn leaves_for(seed: u8, n: usize) -> Vec<Digest> {
    (0..n)
        .map(|i| domain_digest(0x42, &[&[seed], &i.to_le_bytes()]))
        .collect()
}

proptest! {
    #[test]
    fn merkle_proofs_verify_and_bind_their_index(seed in any::<u8>(), n in 1usize..40, pick in any::<prop::sample::Index>()) {
        let leaves = leaves_for(seed, n);
        let i = pick.index(n);
        let proof = merkle_prove(&leaves, i).unwrap();
        prop_assert_eq!(proof.root, merkle_root(&leaves).unwrap());
        prop_assert!(merkle_verify(&proof));
        for other in (0..n).filter(|&j| j != i) {
            let mut moved = proof.clone();
            moved.leaf_index = other as u64;
            prop_assert!(!merkle_verify(&moved));
        }
        for k in 0..proof.path.len() {
            let mut flipped = proof.clone();
            flipped.path[k].side = match flipped.path[k].side {
                Side::Left => Side::Right,
                Side::Right => Side::Left,
            };
            prop_assert!(!merkle_verify(&flipped));
        }
    }
}

fn rate_doc(agent: ttk_core::Did, limits: Vec<RateLimit>) -> PolicyDocument {
    PolicyDocument {
        policy_id: "rate".into(),
        agent_did: agent,
        version: 1,
        allowed_actions: ["a".to_owned(), "b".to_owned()].into(),
        parameter_constraints: BTreeMap::new(),
        rate_limits: limits,
        jurisdictions: Default::default(),
        data_boundaries: Default::default(),
        not_before_ms: 0,
        not_after_ms: i64::MAX,
        delegated_by: None,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn check_rate_matches_quadratic_recount(
        gaps in prop::collection::vec((0i64..400, any::<bool>()), 0..50),
        window in 1i64..2_000,
        max in 0i64..6,
        filtered in any::<bool>(),
    ) {
        let kp = generate_keypair(Some(&[9; 32])).unwrap();
        let mut log = TraceLog::new(kp.did());
        let mut ts = 0;
        for (gap, is_a) in &gaps {
            ts += gap;
            log.record(&kp, Digest::ZERO, ActionRecord::new(if *is_a { "a" } else { "b" }, ts)).unwrap();
        }
        let limit = RateLimit { window_ms: window, max_actions: max, action_filter: filtered.then(|| "a".to_owned()) };
        let doc = rate_doc(kp.did(), vec![limit.clone()]);
        let got: Vec<(u64, i64)> = check_rate(&doc, &log.entries)
            .unwrap()
            .into_iter()
            .map(|(seq, v)| (seq, v.count))
            .collect();

        let matching: Vec<_> = log.entries.iter().filter(|e| limit.applies_to(&e.body.action)).collect();
        let mut expected = Vec::new();
        for e in &matching {
            let count = matching
                .iter()
                .filter(|o| o.body.ts_ms > e.body.ts_ms - window && o.body.ts_ms <= e.body.ts_ms)
                .count() as i64;
            if count > max {
                expected.push((e.body.seq, count));
            }
        }
        prop_assert_eq!(got, expected);
    }
}
