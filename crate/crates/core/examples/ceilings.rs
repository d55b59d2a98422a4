//! Upper bounds for the synthetic experiments, computed from the planted
//! directions rather than a trained model.
//!
//! `cargo run --release -p bap-core --example ceilings`

use bap_core::localize::rank_desc;
use bap_core::repstore::RepRecord;
use bap_core::synth::{generate, hard_variant, SynthConfig};

fn projections(r: &RepRecord, mu: &[f64]) -> Vec<f64> {
    (0..r.n_tokens())
        .map(|t| r.token(t).iter().zip(mu).map(|(&a, b)| f64::from(a) * b).sum())
        .collect()
}

/// Accuracy of the best single threshold on `scores` (optimistic: tuned on
/// the same data it is scored on).
fn best_threshold_accuracy(scores: &[(f64, u8)]) -> f64 {
    let mut s = scores.to_vec();
    s.sort_by(|a, b| a.0.total_cmp(&b.0));
    let pos = s.iter().filter(|x| x.1 == 1).count();
    let (mut best, mut neg_below, mut pos_below) = (0, 0, 0);
    for i in 0..=s.len() {
        best = best.max(neg_below + pos - pos_below);
        if let Some(x) = s.get(i) {
            if x.1 == 1 {
                pos_below += 1;
            } else {
                neg_below += 1;
            }
        }
    }
    best as f64 / s.len() as f64
}

fn log_mean_exp(p: &[f64], beta: f64) -> f64 {
    (p.iter().map(|x| (beta * x).exp()).sum::<f64>() / p.len() as f64).ln()
}

fn subsets(n: usize, c: usize, start: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
    if cur.len() == c {
        out.push(cur.clone());
        return;
    }
    for i in start..n {
        cur.push(i);
        subsets(n, c, i + 1, cur, out);
        cur.pop();
    }
}

/// Exact likelihood-ratio detector that knows the line structure.
fn line_aware_bayes(cfg: &SynthConfig, test: &[RepRecord], mu: &[f64]) -> f64 {
    let s = cfg.signal_strength;
    let correct = test
        .iter()
        .filter(|r| {
            let n = r.n_lines();
            let (mut sum, mut count) = (vec![0.0; n], vec![0.0; n]);
            for (p, &l) in projections(r, mu).iter().zip(r.token_line()) {
                if l >= 0 {
                    sum[l as usize] += p;
                    count[l as usize] += 1.0;
                }
            }
            let (lo, hi) = (cfg.buggy_lines.0.min(n), cfg.buggy_lines.1.min(n));
            let mut ratio = 0.0;
            for c in lo..=hi {
                let mut all = Vec::new();
                subsets(n, c, 0, &mut Vec::new(), &mut all);
                let w = 1.0 / ((hi - lo + 1) * all.len()) as f64;
                for sub in all {
                    let e: f64 = sub.iter().map(|&i| s * sum[i] - s * s / 2.0 * count[i]).sum();
                    ratio += w * e.exp();
                }
            }
            (ratio > 1.0) == (r.label == 1)
        })
        .count();
    correct as f64 / test.len() as f64
}

fn main() {
    let cfg = SynthConfig::default();
    let ds = generate(&cfg).unwrap();
    let mu = &ds.signals[0];
    println!("planted: line-aware Bayes detection {:.4}", line_aware_bayes(&cfg, &ds.test, mu));
    for beta in [0.0, 0.5, 1.0, 1.5, 2.0, 4.0] {
        let scores: Vec<(f64, u8)> = ds
            .test
            .iter()
            .map(|r| (log_mean_exp(&projections(r, mu), beta), r.label))
            .collect();
        let buggy: Vec<&RepRecord> = ds.test.iter().filter(|r| r.label == 1).collect();
        let hits = buggy
            .iter()
            .filter(|r| {
                let mut lines = vec![0.0; r.n_lines()];
                for (p, &l) in projections(r, mu).iter().zip(r.token_line()) {
                    if l >= 0 {
                        lines[l as usize] += (beta * p).exp();
                    }
                }
                r.buggy_lines.contains(&rank_desc(&lines)[0])
            })
            .count();
        println!(
            "planted: beta {beta}: token-level detection {:.4}, attention-shaped top-1 {:.4}",
            best_threshold_accuracy(&scores),
            hits as f64 / buggy.len() as f64
        );
    }

    let hard = hard_variant(&cfg).unwrap();
    for beta in [0.5, 1.0, 1.5, 2.0, 3.0] {
        let scores: Vec<(f64, u8)> = hard
            .test
            .iter()
            .map(|r| {
                let s = hard
                    .signals
                    .iter()
                    .map(|mu| log_mean_exp(&projections(r, mu), beta))
                    .fold(f64::INFINITY, f64::min);
                (s, r.label)
            })
            .collect();
        println!(
            "hard: beta {beta}: token-level conjunctive detection {:.4}",
            best_threshold_accuracy(&scores)
        );
    }
}
