use std::collections::BTreeMap;

use cdrec::domain::{repair_plan, validate_plan, RawPlan, TagVocab, ALLOWED_TAG_COUNTS, ALLOWED_TOTALS, STAGES};
use indexmap::IndexMap;
use proptest::prelude::*;

fn vocab() -> TagVocab {
    TagVocab::from_counts((0..25).map(|i| (format!("tag{i:02}"), 100 - i)).collect())
}

fn weight() -> impl Strategy<Value = Option<f64>> {
    prop_oneof![
        Just(None),
        Just(Some(f64::NAN)),
        Just(Some(f64::INFINITY)),
        (-2.0f64..3.0).prop_map(Some),
    ]
}

fn tag_name() -> impl Strategy<Value = String> {
    prop_oneof![
        4 => (0usize..25).prop_map(|i| format!("tag{i:02}")),
        1 => "[a-z]{1,6}",
    ]
}

fn raw_plan() -> impl Strategy<Value = RawPlan> {
    (
        weight(),
        weight(),
        prop::option::of(any::<bool>()),
        prop::option::of(prop_oneof![
            Just("attention".to_string()),
            Just("graph".to_string()),
            "[a-z]{0,8}"
        ]),
        prop::option::of(prop::collection::vec((tag_name(), -50i64..3000), 0..30)),
        prop::option::of(prop::collection::vec(
            (prop::sample::select(STAGES.to_vec()), ".{0,12}"),
            0..5,
        )),
    )
        .prop_map(|(alpha, beta, structured, encoder, tags, just)| RawPlan {
            alpha,
            beta,
            structured_enabled: structured,
            encoder,
            tag_weights: tags.map(|t| t.into_iter().collect::<IndexMap<_, _>>()),
            justifications: just.map(|j| {
                j.into_iter()
                    .map(|(s, t)| (s.to_string(), t))
                    .collect::<BTreeMap<_, _>>()
            }),
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn repair_is_valid_and_idempotent(raw in raw_plan()) {
        let vocab = vocab();
        let repaired = repair_plan(&raw, &vocab).unwrap();
        let validated = validate_plan(&repaired.to_raw(), &vocab);
        prop_assert!(validated.is_ok(), "{:?}", validated);
        prop_assert!(ALLOWED_TAG_COUNTS.contains(&repaired.tag_weights.len()));
        prop_assert!(ALLOWED_TOTALS.contains(&repaired.total()));
        prop_assert_eq!(repair_plan(&repaired.to_raw(), &vocab).unwrap(), repaired);
    }

    #[test]
    fn valid_plans_pass_through_unchanged(raw in raw_plan()) {
        let vocab = vocab();
        if let Ok(valid) = validate_plan(&raw, &vocab) {
            prop_assert_eq!(repair_plan(&raw, &vocab).unwrap(), valid);
        }
    }
}
