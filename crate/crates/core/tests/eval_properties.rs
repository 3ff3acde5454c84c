use cdrec::domain::{EncoderKind, Interaction, InteractionLog, TagVocab};
use cdrec::eval::{hr_at_k, make_splits, ndcg_at_k, plan_agreement, Preset};
use cdrec::vecmath::top_k;
use proptest::prelude::*;

fn rank_of_truth(scores: &[f64], truth: usize) -> Option<usize> {
    let ranked = top_k(scores.iter().copied().enumerate().collect(), 10);
    ranked.iter().position(|(i, _)| *i == truth).map(|p| p + 1)
}

proptest! {
    #[test]
    fn ndcg_never_exceeds_hr(rank in prop::option::of(1usize..30), k in 1usize..20) {
        prop_assert!(ndcg_at_k(rank, k) <= hr_at_k(rank, k));
        prop_assert!(hr_at_k(rank, 5) <= hr_at_k(rank, 10));
    }

    #[test]
    fn metrics_ignore_monotone_score_transforms(
        scores in prop::collection::vec(-5.0f64..5.0, 1..40),
        truth in 0usize..40,
        scale in 0.1f64..10.0,
        shift in -3.0f64..3.0,
    ) {
        let truth = truth % scores.len();
        let transformed: Vec<f64> = scores.iter().map(|s| (scale * s + shift).exp()).collect();
        let (a, b) = (rank_of_truth(&scores, truth), rank_of_truth(&transformed, truth));
        prop_assert_eq!(a, b);
        for k in [5, 10] {
            prop_assert_eq!(hr_at_k(a, k), hr_at_k(b, k));
            prop_assert_eq!(ndcg_at_k(a, k), ndcg_at_k(b, k));
        }
    }

    #[test]
    fn splits_partition_each_truncated_history(lengths in prop::collection::vec(0usize..30, 1..12), max_len in 3usize..25) {
        let log = InteractionLog::from_rows(lengths.iter().enumerate().flat_map(|(u, &n)| {
            (0..n).map(move |i| (format!("u{u:02}"), Interaction::new(format!("i{i}"), i as i64).unwrap()))
        }));
        let spec = make_splits(&log, max_len);
        let kept = lengths.iter().filter(|&&n| n.min(max_len) >= 3).count();
        prop_assert_eq!(spec.users.len(), kept);
        prop_assert_eq!(spec.excluded.len(), log.users.len() - kept);
        for u in &spec.users {
            let history = log.history(&u.user_id, max_len);
            let mut joined = u.train.clone();
            joined.push(u.val.clone());
            joined.push(u.test.clone());
            prop_assert_eq!(joined.as_slice(), history.interactions());
        }
    }

    #[test]
    fn agreement_is_symmetric_and_one_only_when_equal(
        a1 in 0.0f64..=1.0, b1 in 0.0f64..=1.0, a2 in 0.0f64..=1.0, b2 in 0.0f64..=1.0,
        graph in any::<bool>(), flag in any::<bool>(), preset in 0usize..7,
    ) {
        let vocab = TagVocab::from_tags((0..25).map(|i| format!("t{i:02}")));
        let presets = [Preset::V1, Preset::V2, Preset::V3, Preset::V4, Preset::V5, Preset::V6, Preset::V7];
        let mut p = Preset::V1.fixed_plan(&vocab).unwrap().unwrap();
        p.alpha = a1;
        p.beta = b1;
        let mut q = presets[preset].fixed_plan(&vocab).unwrap().unwrap();
        q.alpha = a2;
        q.beta = b2;
        if graph { q.encoder = EncoderKind::Graph; }
        q.structured_enabled = flag;
        let (pq, qp) = (plan_agreement(&p, &q), plan_agreement(&q, &p));
        prop_assert!((pq - qp).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&pq));
        let equal_fields = p.alpha == q.alpha && p.beta == q.beta && p.encoder == q.encoder
            && p.structured_enabled == q.structured_enabled
            && p.tag_weights.keys().eq(q.tag_weights.keys()) && p.total() == q.total();
        prop_assert_eq!(pq == 1.0, equal_fields);
        prop_assert_eq!(plan_agreement(&p, &p), 1.0);
    }
}
