use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use bap_core::evalkit::{
    evaluate, linear_probe_train, precision_at_k, random_order, top_k_hit, EvalError, Prediction,
    TruthRecord,
};
use bap_core::synth::{generate, SynthConfig};
use bap_core::trainer::{detection_samples, TrainConfig};

fn truth(id: &str, buggy: &[usize], n_lines: usize, fold: Option<u32>) -> TruthRecord {
    TruthRecord {
        sample_id: id.into(),
        label: u8::from(!buggy.is_empty()),
        buggy_lines: buggy.iter().copied().collect(),
        n_lines,
        fold,
    }
}

fn arb_case() -> impl Strategy<Value = (Vec<usize>, BTreeSet<usize>)> {
    (1usize..10).prop_flat_map(|l| {
        (
            Just((0..l).collect::<Vec<_>>()).prop_shuffle(),
            proptest::collection::btree_set(0..l, 1..=l.min(4)),
        )
    })
}

proptest! {
    #[test]
    fn precision_in_unit_interval_and_hit_monotone((order, buggy) in arb_case()) {
        let mut prev = false;
        for k in 1..=order.len() + 2 {
            let p = precision_at_k(&order, &buggy, k).unwrap();
            prop_assert!((0.0..=1.0).contains(&p));
            let hit = top_k_hit(&order, &buggy, k).unwrap();
            prop_assert!(hit || !prev);
            prev = hit;
        }
    }

    #[test]
    fn precision_is_one_when_top_slots_are_all_correct((order, buggy) in arb_case(), k in 1usize..6) {
        let m = k.min(buggy.len());
        let mut front: Vec<usize> = buggy.iter().copied().take(m).collect();
        let rest: Vec<usize> = order.iter().copied().filter(|l| !front.contains(l)).collect();
        front.extend(rest);
        prop_assert_eq!(precision_at_k(&front, &buggy, k).unwrap(), 1.0);
    }

    #[test]
    fn aggregates_are_means_of_rows(cases in proptest::collection::vec(arb_case(), 1..12)) {
        let truths: Vec<TruthRecord> = cases
            .iter()
            .enumerate()
            .map(|(i, (o, b))| truth(&format!("s{i}"), &b.iter().copied().collect::<Vec<_>>(), o.len(), None))
            .collect();
        let preds: Vec<Prediction> = cases
            .iter()
            .enumerate()
            .map(|(i, (o, _))| Prediction::ranked(format!("s{i}"), o.clone()))
            .collect();
        let r = evaluate(&preds, &truths).unwrap();
        for (k, v) in &r.top_k_accuracy {
            let hits: f64 = r.rows.iter().map(|row| f64::from(u8::from(row.hits[k]))).sum();
            prop_assert_eq!(*v, hits / r.rows.len() as f64);
        }
        for (k, v) in &r.precision_at_k {
            let sum: f64 = r.rows.iter().map(|row| row.precision[k]).sum();
            prop_assert_eq!(*v, sum / r.rows.len() as f64);
        }
    }
}

/// Four samples with hand-computed outcomes, plus one clean sample that
/// only counts towards detection.
#[test]
fn hand_built_report() {
    let truths = vec![
        truth("a", &[0], 5, Some(0)),
        truth("b", &[2, 3], 8, Some(0)),
        truth("c", &[9], 12, Some(1)),
        truth("d", &[1], 25, Some(1)),
        truth("clean", &[], 4, None),
    ];
    let mut preds = vec![
        // top-1 hit; P@2 = 1/1
        Prediction::ranked("a", vec![0, 1, 2, 3, 4]),
        // top-1 miss, top-3 hit; P@2 = 1/2, P@3 = 2/2
        Prediction::ranked("b", vec![0, 3, 2, 1]),
        // hit only at rank 5; P@5 = 1
        Prediction::ranked("c", vec![0, 1, 2, 3, 9]),
        Prediction::miss("d"),
        Prediction::ranked("clean", vec![0]),
    ];
    preds[0].detection_prob = Some(0.9);
    preds[1].detection_prob = Some(0.4);
    preds[4].detection_prob = Some(0.2);
    let r = evaluate(&preds, &truths).unwrap();
    assert_eq!(r.n_samples, 5);
    assert_eq!(r.n_buggy_samples, 4);
    assert_eq!(r.n_missed, 1);
    assert_eq!(r.top_k_accuracy[&1], 0.25);
    assert_eq!(r.top_k_accuracy[&3], 0.5);
    assert_eq!(r.top_k_accuracy[&5], 0.75);
    assert_eq!(r.precision_at_k[&2], (1.0 + 0.5) / 4.0);
    assert_eq!(r.precision_at_k[&3], (1.0 + 1.0) / 4.0);
    assert_eq!(r.precision_at_k[&5], (1.0 + 1.0 + 1.0) / 4.0);
    // a correct, b wrong, clean correct
    assert_eq!(r.detection_accuracy, Some(2.0 / 3.0));
    let buckets: Vec<(usize, usize, f64)> =
        r.by_length.iter().map(|b| (b.min_lines, b.n, b.top1)).collect();
    assert_eq!(buckets, vec![(0, 2, 0.5), (10, 1, 0.0), (20, 1, 0.0)]);
    assert_eq!(r.by_fold[&0].top1, 0.5);
    assert_eq!(r.by_fold[&1].n, 2);
    let table = r.to_table();
    assert!(table.contains("top-1 accuracy"));
    assert!(table.contains("0.2500"));
}

#[test]
fn duplicate_prediction_rejected() {
    let truths = vec![truth("a", &[0], 2, None)];
    let preds = vec![Prediction::ranked("a", vec![0]), Prediction::ranked("a", vec![1])];
    assert!(matches!(
        evaluate(&preds, &truths),
        Err(EvalError::DuplicatePrediction(id)) if id == "a"
    ));
}

#[test]
fn random_rankings_match_analytic_top1_on_synthetic_set() {
    let ds = generate(&SynthConfig {
        n_train: 2,
        n_test: 2000,
        ..SynthConfig::default()
    })
    .unwrap();
    let truths: Vec<TruthRecord> = ds.test.iter().map(TruthRecord::from).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let preds: Vec<Prediction> = ds
        .test
        .iter()
        .map(|r| Prediction::ranked(r.sample_id.clone(), random_order(r.n_lines(), &mut rng)))
        .collect();
    let report = evaluate(&preds, &truths).unwrap();
    let buggy: Vec<&TruthRecord> = truths.iter().filter(|t| t.label == 1).collect();
    let expected = buggy
        .iter()
        .map(|t| t.buggy_lines.len() as f64 / t.n_lines as f64)
        .sum::<f64>()
        / buggy.len() as f64;
    assert!((report.top_k_accuracy[&1] - expected).abs() < 0.05);
}

#[test]
fn linear_probe_finds_a_last_token_signal() {
    let ds = generate(&SynthConfig {
        n_train: 400,
        n_test: 200,
        d: 8,
        last_token_strength: 3.0,
        ..SynthConfig::default()
    })
    .unwrap();
    let train = detection_samples(&ds.train).unwrap();
    let test = detection_samples(&ds.test).unwrap();
    let cfg = TrainConfig {
        learning_rate: 1e-2,
        ..TrainConfig::linear_baseline()
    };
    let probe = linear_probe_train(&train, &cfg).unwrap();
    assert!(probe.detection_accuracy(&test) > 0.85);
    // Localization scores form a distribution over tokens.
    let r = probe.localize_record(&ds.test[0]).unwrap();
    assert!(r.coverage_mass <= 1.0 + 1e-12);
}
