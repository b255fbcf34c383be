use std::sync::Arc;

use proptest::prelude::*;

use pgmpp::cost::{leaf_epsilon_for_budget, TuningBudget};
use pgmpp::oracle::{exact_rank, measure_coverage, optimal_pla_count};
use pgmpp::{fit_keys, BuildParams, Estimator, EstimatorKind, PgmIndex};

/// Strictly increasing keys from arbitrary positive gaps.
fn keys_strategy(max_len: usize) -> impl Strategy<Value = Vec<u64>> {
    (
        0u64..1_000,
        prop::collection::vec(prop_oneof![1u64..4, 1u64..1_000, 1u64..1_000_000], 1..max_len),
    )
        .prop_map(|(start, gaps)| {
            let mut k = start;
            gaps.into_iter()
                .map(|g| {
                    k += g;
                    k
                })
                .collect()
        })
}

fn eps() -> impl Strategy<Value = u64> {
    prop_oneof![Just(1u64), Just(2), Just(4), Just(8), Just(16), Just(64)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn lookup_matches_exact_rank(
        keys in keys_strategy(3_000),
        ei in eps(),
        el in eps(),
        delta in 4usize..=64,
        probes in prop::collection::vec(any::<u64>(), 50),
    ) {
        let params = BuildParams::new(ei, el).with_delta(pgmpp::search::SearchThreshold::clamped(delta));
        let idx = PgmIndex::build_with(keys.clone(), params).unwrap();
        let top = *keys.last().unwrap();
        for q in keys.iter().copied().chain(probes.iter().map(|p| p % (top + 2))).chain([0, u64::MAX]) {
            let want = exact_rank(&keys, q);
            prop_assert_eq!(idx.lookup(q), want);
            prop_assert_eq!(idx.lookup_branchy(q), want);
        }
    }

    #[test]
    fn fitted_model_bound_and_floor(keys in keys_strategy(3_000), e in eps()) {
        let m = fit_keys(&keys, e).unwrap();
        let starts: Vec<usize> = m.segments.iter().map(|s| keys.partition_point(|&k| k < s.start)).collect();
        prop_assert_eq!(starts[0], 0);
        for (j, seg) in m.segments.iter().enumerate() {
            let end = starts.get(j + 1).copied().unwrap_or(keys.len());
            prop_assert!(end > starts[j]);
            for r in starts[j]..end {
                prop_assert!((seg.eval(keys[r]) - r as f64).abs() <= e as f64 + 1e-6);
            }
            if j + 1 < m.segments.len() {
                prop_assert!((end - starts[j]) as u64 >= 2 * e + 1);
            }
        }
    }

    #[test]
    fn fitter_is_optimal(keys in keys_strategy(400), e in 1u64..=4) {
        let pts: Vec<(u64, u64)> = keys.iter().enumerate().map(|(i, &k)| (k, i as u64)).collect();
        prop_assert_eq!(fit_keys(&keys, e).unwrap().len(), optimal_pla_count(&pts, e).unwrap());
    }

    #[test]
    fn coverage_sums_to_level_below(keys in keys_strategy(5_000), ei in eps(), el in eps()) {
        let idx = PgmIndex::build(keys.clone(), ei, el).unwrap();
        let c = measure_coverage(&idx);
        prop_assert_eq!(c.per_level.len(), idx.levels().len());
        let total = c.leaf().mean * c.leaf().segments as f64;
        prop_assert!((total - keys.len() as f64).abs() < 1e-6);
        prop_assert_eq!(idx.levels().last().unwrap().len(), 1);
    }

    #[test]
    fn blob_round_trip_preserves_lookups(keys in keys_strategy(2_000), ei in eps(), el in eps()) {
        let shared: Arc<[u64]> = keys.clone().into();
        let idx = PgmIndex::build(shared.clone(), ei, el).unwrap();
        let back = PgmIndex::from_bytes(&idx.to_bytes(), shared).unwrap();
        prop_assert_eq!(back.stats(), idx.stats());
        for &k in keys.iter().step_by(7) {
            prop_assert_eq!(back.lookup(k), idx.lookup(k));
        }
    }

    #[test]
    fn leaf_estimate_follows_inverse_square(keys in keys_strategy(3_000), e in 1u64..500) {
        prop_assume!(keys.len() > 2);
        let est = Estimator::new(&keys, EstimatorKind::Simple).unwrap();
        prop_assume!(est.hardness_mass() > 0.0);
        let est = est.with_scale(1.0).unwrap();
        let a = est.estimate_leaf_segments(e).unwrap();
        let b = est.estimate_leaf_segments(2 * e).unwrap();
        prop_assert!((a / b - 4.0).abs() < 1e-9);
    }

    #[test]
    fn bigger_budget_never_raises_leaf_epsilon(mass in 1.0f64..1e9, b in 24u64..1 << 30) {
        let stats = pgmpp::GapStats { count: 1_000, mean: 1.0, variance: mass / 1_000.0 };
        let est = Estimator::from_partitions(EstimatorKind::Simple, vec![pgmpp::GapPartition { offset: 0, stats }])
            .with_scale(1.0)
            .unwrap();
        let small = leaf_epsilon_for_budget(&est, TuningBudget::new(b, 24).unwrap(), 24);
        let big = leaf_epsilon_for_budget(&est, TuningBudget::new(2 * b, 24).unwrap(), 24).unwrap();
        if let Ok(s) = small {
            prop_assert!(big <= s);
        }
    }
}
