use std::collections::BTreeMap;

use icm::consistency::{consistency_fix, inconsistency_count, LabelState};
use icm::data::{assignment_from_map, parse_dataset, serialize_dataset};
use icm::harness::{brute_force_optimum, generate_synthetic_task, perturb_labels};
use icm::predictor::{PlantedOracle, SyntheticTaskSpec};
use icm::scorer::{Memo, ScorerConfig};
use icm::search::temperature;
use icm::{Assignment, Label, LabelSpace, LinkSet, Prediction, Scorer, ScoringMode, SearchConfig};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn task(n: usize, seed: u64, link_fraction: f64) -> SyntheticTaskSpec {
    SyntheticTaskSpec {
        size: n,
        planted_seed: seed,
        link_fraction,
        ..Default::default()
    }
}

fn exact(alpha: f64) -> ScorerConfig {
    ScorerConfig {
        alpha,
        mode: ScoringMode::Exact,
        ..Default::default()
    }
}

proptest! {
    #[test]
    fn renormalized_predictions_sum_to_one(raw in prop::collection::vec(-50.0f64..0.0, 2..6)) {
        let p = Prediction::from_logprobs(&raw);
        prop_assert!(p.is_normalized());
        let top = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(raw[p.argmax().index()], top);
    }

    #[test]
    fn temperature_never_rises_or_undercuts_floor(n in 1u64..1_000_000, t0 in 0.1f64..100.0, beta in 0.01f64..5.0) {
        let cfg = SearchConfig { t0, beta, t_min: 0.05, ..Default::default() };
        let t = temperature(n, &cfg);
        prop_assert!(t >= cfg.t_min && t <= t0);
        prop_assert!(temperature(n + 1, &cfg) <= t);
    }

    #[test]
    fn perturbation_hits_requested_accuracy(n in 1usize..300, acc in 0.0f64..=1.0, seed in any::<u64>()) {
        let golden: BTreeMap<String, Label> =
            (0..n).map(|i| (format!("k{i:04}"), Label((i % 2) as u16))).collect();
        let out = perturb_labels(&golden, &LabelSpace::default(), acc, seed).unwrap();
        let flips = golden.iter().filter(|(k, v)| out[*k] != **v).count();
        let want = ((1.0 - acc) * n as f64).round() as usize;
        prop_assert_eq!(flips, want);
        prop_assert_eq!(out.len(), n);
    }

    #[test]
    fn synthetic_datasets_round_trip(n in 2usize..60, seed in any::<u64>(), lf in 0.0f64..=1.0) {
        let (ds, planted) = generate_synthetic_task(&task(n, seed, lf)).unwrap();
        let text = serialize_dataset(&ds);
        let back = parse_dataset(&text, LabelSpace::default()).unwrap();
        prop_assert_eq!(serialize_dataset(&back), text);
        let links = LinkSet::from_dataset(&ds);
        let a = assignment_from_map(&ds, &planted).unwrap();
        prop_assert_eq!(inconsistency_count(&a, links.links()), 0);
    }

    #[test]
    fn incremental_index_matches_recount(
        edits in prop::collection::vec((0usize..20, 0u16..2), 1..40),
        cut in 0usize..40,
    ) {
        let (ds, _) = generate_synthetic_task(&task(20, 9, 1.0)).unwrap();
        let links = LinkSet::from_dataset(&ds);
        let mut state = LabelState::new(Assignment::new(20), &links);
        let cut = cut.min(edits.len());
        for &(i, l) in &edits[..cut] {
            state.set(&links, i, Label(l));
        }
        let before = state.assignment().clone();
        let mark = state.mark();
        for &(i, l) in &edits[cut..] {
            state.set(&links, i, Label(l));
            prop_assert_eq!(state.inconsistency(), inconsistency_count(state.assignment(), links.links()));
        }
        state.rollback(&links, mark);
        prop_assert!(state.assignment().same_labels(&before));
        prop_assert_eq!(state.inconsistency(), inconsistency_count(&before, links.links()));
    }

    #[test]
    fn repair_never_lowers_utility(labels in prop::collection::vec(0u16..2, 8), seed in 0u64..50) {
        let spec = task(8, seed, 1.0);
        let (ds, _) = generate_synthetic_task(&spec).unwrap();
        let links = LinkSet::from_dataset(&ds);
        let oracle = PlantedOracle::from_spec(&spec).unwrap();
        let scorer = Scorer::new(&ds, &links, &oracle, exact(5.0));
        let a = Assignment::from_pairs(8, labels.iter().enumerate().map(|(i, &l)| (i, Label(l))));
        let mut state = LabelState::new(a, &links);
        let mut memo = Memo::new();
        let before = scorer.evaluate(&state, &mut memo).unwrap().breakdown.utility;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        consistency_fix(&mut state, &links, ds.label_space(), 40, None, &mut rng, |s| {
            scorer.evaluate(s, &mut memo).map(|e| e.breakdown.utility)
        })
        .unwrap();
        let after = scorer.evaluate(&state, &mut memo).unwrap().breakdown.utility;
        prop_assert!(after >= before);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn brute_force_dominates_any_assignment(labels in prop::collection::vec(0u16..2, 6), seed in 0u64..20, alpha in 0.1f64..60.0) {
        let spec = task(6, seed, 1.0);
        let (ds, _) = generate_synthetic_task(&spec).unwrap();
        let links = LinkSet::from_dataset(&ds);
        let oracle = PlantedOracle::from_spec(&spec).unwrap();
        let scorer = Scorer::new(&ds, &links, &oracle, exact(alpha));
        let (_, best) = brute_force_optimum(&ds, &scorer).unwrap();
        let a = Assignment::from_pairs(6, labels.iter().enumerate().map(|(i, &l)| (i, Label(l))));
        let state = LabelState::new(a, &links);
        let u = scorer.evaluate(&state, &mut Memo::new()).unwrap().breakdown.utility;
        prop_assert!(best.utility >= u - 1e-9);
    }

    #[test]
    fn cached_scores_match_exact_when_fresh(
        labels in prop::collection::vec(prop::option::of(0u16..2), 10),
        seed in 0u64..30,
    ) {
        let spec = task(10, seed, 0.6);
        let (ds, _) = generate_synthetic_task(&spec).unwrap();
        let links = LinkSet::from_dataset(&ds);
        let oracle = PlantedOracle::from_spec(&spec).unwrap();
        let pairs = labels.iter().enumerate().filter_map(|(i, l)| l.map(|l| (i, Label(l))));
        let state = LabelState::new(Assignment::from_pairs(10, pairs), &links);
        let exact_scorer = Scorer::new(&ds, &links, &oracle, exact(50.0));
        let mut cached = Scorer::new(&ds, &links, &oracle, ScorerConfig { alpha: 50.0, ..Default::default() });
        cached.refresh_all(state.assignment()).unwrap();
        let e = exact_scorer.evaluate(&state, &mut Memo::new()).unwrap().breakdown;
        let c = cached.utility(&state).unwrap();
        prop_assert!((e.utility - c.utility).abs() < 1e-9);
        prop_assert_eq!(e.inconsistency, c.inconsistency);
    }
}
