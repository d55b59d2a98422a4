use bap_core::evalkit::{linear_probe_train, TruthRecord};
use bap_core::repstore::load_manifest;
use bap_core::synth::{generate, hard_variant, SynthConfig};
use bap_core::trainer::{detection_samples, TrainConfig};

fn small(seed: u64) -> SynthConfig {
    SynthConfig {
        n_train: 60,
        n_test: 30,
        d: 8,
        seed,
        ..SynthConfig::default()
    }
}

#[test]
fn written_dataset_reads_back() {
    let ds = generate(&small(3)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let paths = ds.write(dir.path()).unwrap();
    assert_eq!(load_manifest(&paths.train_manifest).unwrap().read_all().unwrap(), ds.train);
    assert_eq!(load_manifest(&paths.test_manifest).unwrap().read_all().unwrap(), ds.test);
    let truth: Vec<TruthRecord> = std::fs::read_to_string(&paths.test_truth)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(truth.len(), ds.test.len());
    for (t, r) in truth.iter().zip(&ds.test) {
        assert_eq!(t.sample_id, r.sample_id);
        assert_eq!(t.buggy_lines, r.buggy_lines);
        assert_eq!(t.n_lines, r.n_lines());
    }
}

#[test]
fn planted_lines_are_uniform() {
    // 8 lines, one planted line per buggy sample: chi-square over 8 cells.
    let ds = generate(&SynthConfig {
        n_train: 20_000,
        n_test: 2,
        d: 2,
        lines: (8, 8),
        tokens_per_line: (1, 1),
        buggy_lines: (1, 1),
        ..SynthConfig::default()
    })
    .unwrap();
    let mut counts = [0f64; 8];
    for r in ds.train.iter().filter(|r| r.label == 1) {
        counts[*r.buggy_lines.iter().next().unwrap()] += 1.0;
    }
    let n: f64 = counts.iter().sum();
    assert_eq!(n, 10_000.0);
    let e = n / 8.0;
    let chi2: f64 = counts.iter().map(|c| (c - e).powi(2) / e).sum();
    // 99th percentile of chi-square with 7 degrees of freedom.
    assert!(chi2 < 18.475, "chi2 = {chi2}, counts = {counts:?}");
}

#[test]
fn planted_tokens_carry_the_signal() {
    let cfg = SynthConfig {
        n_train: 400,
        n_test: 2,
        ..SynthConfig::default()
    };
    let ds = generate(&cfg).unwrap();
    let mu = &ds.signals[0];
    let (mut on, mut n_on, mut off, mut n_off) = (0.0, 0.0, 0.0, 0.0);
    for r in &ds.train {
        for (t, &line) in r.token_line().iter().enumerate() {
            let proj: f64 = r.token(t).iter().zip(mu).map(|(&x, m)| f64::from(x) * m).sum();
            if line >= 0 && r.buggy_lines.contains(&(line as usize)) {
                on += proj;
                n_on += 1.0;
            } else {
                off += proj;
                n_off += 1.0;
            }
        }
    }
    assert!((on / n_on - cfg.signal_strength).abs() < 0.1);
    assert!((off / n_off).abs() < 0.1);
}

#[test]
fn zero_signal_is_undetectable() {
    let ds = generate(&SynthConfig {
        n_train: 1000,
        n_test: 1000,
        d: 8,
        signal_strength: 0.0,
        ..SynthConfig::default()
    })
    .unwrap();
    let probe = linear_probe_train(
        &detection_samples(&ds.train).unwrap(),
        &TrainConfig {
            epochs: 10,
            learning_rate: 1e-2,
            ..TrainConfig::linear_baseline()
        },
    )
    .unwrap();
    let acc = probe.detection_accuracy(&detection_samples(&ds.test).unwrap());
    assert!((acc - 0.5).abs() < 0.05, "accuracy {acc}");
}

#[test]
fn seeds_change_the_data() {
    let a = generate(&small(1)).unwrap();
    let b = generate(&small(2)).unwrap();
    assert_ne!(a.train, b.train);
    let h = hard_variant(&small(1)).unwrap();
    assert_eq!(h.signals.len(), 2);
    assert!(h.train.iter().all(|r| r.label == 0 || r.buggy_lines.len() == 2));
}
