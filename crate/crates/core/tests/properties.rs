//! Randomized invariants over the public API.

use caser::data::{
    build_sequences, chronological_split, generate_instances, read_instance_cache, sample_negatives,
    write_instance_cache, InstancePart, Interaction, SplitRatios, UserSequence, PADDING,
};
use caser::eval::{average_precision, evaluate_with, rank_scores, ApMode, EvalOptions, EvalTarget};
use caser::model::init_params;
use caser::rules::{mine_rules, MiningConfig};
use caser::train::{adam_step, AdamState, GradientSet};
use caser::HyperParams;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sequences(max_users: usize, max_len: usize, items: u32) -> impl Strategy<Value = Vec<UserSequence>> {
    prop::collection::vec(prop::collection::vec(1..=items, 1..=max_len), 1..=max_users).prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(u, items)| UserSequence { user: u as u32, items })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_reconstructs_each_sequence(seqs in sequences(10, 40, 30)) {
        let split = chronological_split(&seqs, SplitRatios::default(), seqs.len(), 30).unwrap();
        prop_assert_eq!(split.users.len(), seqs.len());
        for (u, s) in split.users.iter().zip(&seqs) {
            let n = s.items.len();
            let whole: Vec<u32> = u.train.iter().chain(&u.validation).chain(&u.test).copied().collect();
            prop_assert_eq!(&whole, &s.items);
            let train = (7 * n).div_ceil(10);
            prop_assert_eq!(u.train.len(), train);
            prop_assert_eq!(u.validation.len(), (8 * n).div_ceil(10) - train);
        }
    }

    #[test]
    fn every_survivor_meets_the_threshold(
        rows in prop::collection::vec((0u8..12, 0u8..20, 0i64..50), 1..150),
        n in 1usize..5,
    ) {
        let interactions: Vec<Interaction> = rows
            .iter()
            .map(|&(u, i, t)| Interaction { user: u.to_string(), item: i.to_string(), timestamp: t })
            .collect();
        if let Ok((seqs, maps)) = build_sequences(&interactions, n) {
            let mut item_counts = vec![0usize; maps.item_count() + 1];
            for s in &seqs {
                prop_assert!(s.items.len() >= n);
                for &i in &s.items {
                    prop_assert!(i != PADDING);
                    item_counts[i as usize] += 1;
                }
            }
            prop_assert!(item_counts[1..].iter().all(|&c| c >= n));
        }
    }

    #[test]
    fn instances_are_well_formed(seqs in sequences(6, 25, 40), l in 1usize..6, t in 1usize..4) {
        let split = chronological_split(&seqs, SplitRatios { train: 1.0, validation: 0.0, test: 0.0 }, seqs.len(), 40).unwrap();
        let instances = generate_instances(&split, l, t, InstancePart::Train);
        let expected: usize = split
            .users
            .iter()
            .map(|u| {
                let len = u.train.len();
                if len >= l + t { len - l - t + 1 } else { (len >= 2) as usize }
            })
            .sum();
        prop_assert_eq!(instances.len(), expected);
        for inst in &instances {
            prop_assert_eq!(inst.prev_items.len(), l);
            prop_assert!(!inst.target_items.is_empty() && inst.target_items.len() <= t);
            let first_real = inst.prev_items.iter().position(|&i| i != PADDING).unwrap_or(l);
            prop_assert!(inst.prev_items[first_real..].iter().all(|&i| i != PADDING));
            // prev ++ targets is a contiguous run of the user's sequence
            let run: Vec<u32> = inst.prev_items[first_real..].iter().chain(&inst.target_items).copied().collect();
            let seq = &split.users[inst.user as usize].train;
            prop_assert!(seq.windows(run.len()).any(|w| w == run.as_slice()));
        }
        let mut buf = Vec::new();
        write_instance_cache(&mut buf, &instances, l, t, seqs.len(), 40).unwrap();
        prop_assert_eq!(read_instance_cache(buf.as_slice()).unwrap().instances, instances);
    }

    #[test]
    fn negatives_never_hit_targets_or_padding(seed in any::<u64>(), targets in prop::collection::hash_set(1u32..=20, 1..10)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = caser::data::TrainingInstance { user: 0, prev_items: vec![1], target_items: targets.iter().copied().collect() };
        let negs = sample_negatives(&inst, 7, 20, &mut rng).unwrap();
        prop_assert_eq!(negs.len(), 7 * targets.len());
        prop_assert!(negs.iter().all(|j| *j != PADDING && *j <= 20 && !targets.contains(j)));
    }

    #[test]
    fn ranking_and_metrics_ignore_a_score_shift(
        scores in prop::collection::vec(-5i32..5, 2..40),
        shift in -100i32..100,
        exclude in prop::collection::hash_set(1u32..40, 0..10),
    ) {
        let mut s: Vec<f64> = scores.iter().map(|&x| x as f64).collect();
        s[0] = f64::NEG_INFINITY;
        let shifted: Vec<f64> = s.iter().map(|&x| x + shift as f64).collect();
        let a = rank_scores(0, &s, &exclude, None);
        let b = rank_scores(0, &shifted, &exclude, None);
        prop_assert_eq!(&a.items, &b.items);
        prop_assert!(a.items.iter().all(|i| *i != PADDING && !exclude.contains(i)));
        for w in a.items.windows(2) {
            let (x, y) = (s[w[0] as usize], s[w[1] as usize]);
            prop_assert!(x > y || (x == y && w[0] < w[1]));
        }
    }

    #[test]
    fn report_values_are_bounded_and_recall_grows(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let seqs: Vec<UserSequence> = (0..8)
            .map(|u| UserSequence { user: u, items: (0..rng.random_range(1..15)).map(|_| rng.random_range(1..=25)).collect() })
            .collect();
        let split = chronological_split(&seqs, SplitRatios::default(), 8, 25).unwrap();
        let scores: Vec<f64> = (0..=25).map(|_| rng.random::<f64>()).collect();
        let opts = EvalOptions { cutoffs: vec![1, 2, 5, 10, 20], keep_per_user: true, ..Default::default() };
        let r = evaluate_with(&split, EvalTarget::Test, &opts, |_, _| Ok(scores.clone())).unwrap();
        for v in r.precision.iter().chain(&r.recall).chain([&r.map]) {
            prop_assert!((0.0..=1.0).contains(v));
        }
        for m in &r.per_user {
            prop_assert!(m.precision[0] == 0.0 || m.precision[0] == 1.0);
            prop_assert!(m.recall.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn literal_ap_never_exceeds_standard(
        ranked in Just((1u32..=30).collect::<Vec<_>>()).prop_shuffle(),
        relevant in prop::collection::hash_set(1u32..=30, 1..10),
        extra in 0usize..20,
    ) {
        let cutoff = relevant.len() + extra;
        let standard = average_precision(&ranked, &relevant, ApMode::Standard, cutoff);
        let literal = average_precision(&ranked, &relevant, ApMode::PaperLiteral, cutoff);
        prop_assert!((0.0..=1.0).contains(&standard));
        prop_assert!(literal <= standard + 1e-15);
    }

    #[test]
    fn mined_rules_respect_thresholds(
        seqs in prop::collection::vec(prop::collection::vec(1u32..=6, 0..15), 1..30),
        min_support in 1usize..4,
        max_skip in 0usize..3,
    ) {
        let cfg = MiningConfig { max_order: 3, max_skip, min_support, min_confidence: 0.3 };
        let rules = mine_rules(&seqs, &cfg).unwrap();
        for r in &rules {
            prop_assert!(r.support >= min_support && r.support <= r.antecedent_support);
            prop_assert!(r.confidence > 0.0 && r.confidence <= 1.0 && r.confidence >= 0.3);
        }
        // repeating each sequence (behind a separator of fresh items) must
        // leave every support count unchanged
        let separator: Vec<u32> = (100..100 + (cfg.max_order + max_skip + 1) as u32).collect();
        let doubled: Vec<Vec<u32>> = seqs
            .iter()
            .map(|s| s.iter().chain(&separator).chain(s).copied().collect())
            .collect();
        let again = mine_rules(&doubled, &cfg).unwrap();
        for r in &rules {
            prop_assert!(again.contains(r), "{} lost or changed", r);
        }
    }

    #[test]
    fn adam_keeps_pinned_rows_zero(seed in any::<u64>(), steps in 1usize..6) {
        let hp = HyperParams { dim: 3, markov_order: 2, heights: vec![1, 2], filters_per_height: 1, vertical_filters: 1, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = init_params(&hp, 2, 6, &mut rng).unwrap();
        let mut state = AdamState::new(&params, &hp);
        let mut grads = GradientSet::zeros_like(&params, &hp);
        for _ in 0..steps {
            for (_, g) in grads.0.tensors_mut() {
                for v in g.as_mut_slice() {
                    *v = rng.random_range(-1.0..1.0);
                }
            }
            adam_step(&mut params, &grads, &mut state, 0.1, &caser::ComponentMask::ALL).unwrap();
        }
        prop_assert!(params.item_embedding.row(0).iter().all(|&x| x == 0.0));
        prop_assert!(params.out_weight.row(0).iter().all(|&x| x == 0.0));
        prop_assert!(state.second_moment.tensors().iter().all(|(_, m)| m.as_slice().iter().all(|&v| v >= 0.0)));
    }
}
