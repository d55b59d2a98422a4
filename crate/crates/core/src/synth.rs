//! Synthetic detection datasets with a planted line-level signal.
//!
//! Clean tokens are i.i.d. `N(0, noise^2)` vectors. In a buggy sample every
//! token on a planted line gets `+signal_strength * mu`, where `mu` is a
//! seed-derived unit vector. Because the signal is known, the projection
//! `mu . z_t` summed per line is an exact oracle for localization quality.
//!
//! Every sample draws from its own ChaCha stream (indexed by its global
//! position), so generation is reproducible and order-independent.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::seq::index::sample as sample_indices;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evalkit::TruthRecord;
use crate::repstore::{self, RepRecord, RepstoreError, Split};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Store(#[from] RepstoreError),
}

pub type Result<T> = std::result::Result<T, SynthError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub d: usize,
    /// Inclusive range of source lines per sample.
    pub lines: (usize, usize),
    /// Inclusive range of tokens per line.
    pub tokens_per_line: (usize, usize),
    /// Inclusive range of planted lines per buggy sample.
    pub buggy_lines: (usize, usize),
    pub signal_strength: f64,
    pub noise_std: f64,
    /// Extra `mu` added to the final token of buggy samples, giving a
    /// last-token linear probe something to find. Zero by default.
    pub last_token_strength: f64,
    /// Prepend one special token (line -1) to every sample.
    pub special_prefix: bool,
    pub layer_k: u32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_train: 2000,
            n_test: 400,
            d: 32,
            lines: (3, 12),
            tokens_per_line: (2, 8),
            buggy_lines: (1, 3),
            signal_strength: 2.0,
            noise_std: 1.0,
            last_token_strength: 0.0,
            special_prefix: true,
            layer_k: 0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let range = |name: &str, (lo, hi): (usize, usize)| {
            if lo == 0 || lo > hi {
                Err(SynthError::InvalidConfig(format!("{name} range ({lo}, {hi}) is empty")))
            } else {
                Ok(())
            }
        };
        range("lines", self.lines)?;
        range("tokens_per_line", self.tokens_per_line)?;
        range("buggy_lines", self.buggy_lines)?;
        if self.d == 0 {
            return Err(SynthError::InvalidConfig("d must be positive".into()));
        }
        if !(self.signal_strength >= 0.0 && self.signal_strength.is_finite()) {
            return Err(SynthError::InvalidConfig("signal_strength must be >= 0".into()));
        }
        if !(self.noise_std > 0.0 && self.noise_std.is_finite()) {
            return Err(SynthError::InvalidConfig("noise_std must be positive".into()));
        }
        Ok(())
    }

    fn provenance(&self, kind: &str) -> String {
        format!(
            "synthetic:{kind} seed={} d={} strength={} layer={}",
            self.seed, self.d, self.signal_strength, self.layer_k
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub train: Vec<RepRecord>,
    pub test: Vec<RepRecord>,
    /// Planted direction(s); the hard variant uses two.
    pub signals: Vec<Vec<f64>>,
    pub provenance: String,
}

/// Paths written by [`SynthDataset::write`].
#[derive(Debug, Clone)]
pub struct SynthPaths {
    pub train_manifest: PathBuf,
    pub test_manifest: PathBuf,
    pub test_truth: PathBuf,
}

impl SynthDataset {
    /// `dir/train/manifest.jsonl`, `dir/test/manifest.jsonl` and the test
    /// ground truth as `dir/test_truth.jsonl`.
    pub fn write(&self, dir: &Path) -> Result<SynthPaths> {
        let train_manifest =
            repstore::write_dataset(&dir.join("train"), Split::Train, &self.provenance, &self.train)?;
        let test_manifest =
            repstore::write_dataset(&dir.join("test"), Split::Test, &self.provenance, &self.test)?;
        let test_truth = dir.join("test_truth.jsonl");
        let mut text = String::new();
        for r in &self.test {
            text.push_str(&serde_json::to_string(&TruthRecord::from(r)).expect("truth serializes"));
            text.push('\n');
        }
        repstore::write_atomic(&test_truth, text.as_bytes())?;
        Ok(SynthPaths {
            train_manifest,
            test_manifest,
            test_truth,
        })
    }
}

fn sample_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const DIRECTION_STREAM: u64 = 0;
const LABEL_STREAM: u64 = 1 << 63;
const SAMPLE_STREAM_BASE: u64 = 16;

/// `count` orthonormal directions in `d` dimensions (Gram-Schmidt on
/// Gaussian draws).
fn directions(d: usize, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = sample_rng(seed, DIRECTION_STREAM);
    let mut out: Vec<Vec<f64>> = Vec::new();
    while out.len() < count {
        let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        for u in &out {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            for (x, y) in v.iter_mut().zip(u) {
                *x -= dot * y;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            out.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    out
}

/// Exactly balanced labels (the extra one, for odd counts, is clean).
fn balanced_labels(n: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let mut labels: Vec<u8> = (0..n).map(|i| u8::from(i < n / 2)).collect();
    labels.shuffle(rng);
    labels
}

struct Skeleton {
    token_line: Vec<i32>,
    data: Vec<f32>,
    n_lines: usize,
}

fn skeleton(cfg: &SynthConfig, min_lines: usize, rng: &mut ChaCha8Rng) -> Skeleton {
    let lo = cfg.lines.0.max(min_lines);
    let hi = cfg.lines.1.max(lo);
    let n_lines = rng.random_range(lo..=hi);
    let mut token_line = Vec::new();
    if cfg.special_prefix {
        token_line.push(-1);
    }
    for line in 0..n_lines {
        let n = rng.random_range(cfg.tokens_per_line.0..=cfg.tokens_per_line.1);
        token_line.extend(std::iter::repeat_n(line as i32, n));
    }
    let noise = Normal::new(0.0, cfg.noise_std).expect("valid std");
    let data = (0..token_line.len() * cfg.d)
        .map(|_| noise.sample(rng) as f32)
        .collect();
    Skeleton {
        token_line,
        data,
        n_lines,
    }
}

fn plant(sk: &mut Skeleton, d: usize, line: usize, direction: &[f64], strength: f64) {
    for (t, &l) in sk.token_line.iter().enumerate() {
        if l == line as i32 {
            for (x, &m) in sk.data[t * d..(t + 1) * d].iter_mut().zip(direction) {
                *x = (f64::from(*x) + strength * m) as f32;
            }
        }
    }
}

fn make_split(
    cfg: &SynthConfig,
    split: Split,
    provenance: &str,
    mut body: impl FnMut(usize, u8, &mut ChaCha8Rng) -> (Skeleton, BTreeSet<usize>),
) -> Result<Vec<RepRecord>> {
    let (n, offset, tag) = match split {
        Split::Train => (cfg.n_train, 0, "train"),
        Split::Test => (cfg.n_test, cfg.n_train, "test"),
    };
    let mut label_rng = sample_rng(cfg.seed, LABEL_STREAM | offset as u64);
    let labels = balanced_labels(n, &mut label_rng);
    labels
        .iter()
        .enumerate()
        .map(|(i, &label)| {
            let mut rng = sample_rng(cfg.seed, SAMPLE_STREAM_BASE + (offset + i) as u64);
            let (sk, buggy) = body(i, label, &mut rng);
            RepRecord::new(
                format!("{tag}-{i:05}"),
                cfg.layer_k,
                provenance,
                sk.token_line.len(),
                cfg.d,
                sk.data,
                sk.token_line,
                label,
                buggy,
            )
            .map_err(SynthError::from)
        })
        .collect()
}

/// Planted-line dataset: buggy samples carry the signal on 1-3 random lines.
pub fn generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let mu = directions(cfg.d, 1, cfg.seed).remove(0);
    let provenance = cfg.provenance("planted");
    let body = |_: usize, label: u8, rng: &mut ChaCha8Rng| {
        let mut sk = skeleton(cfg, 1, rng);
        let mut buggy = BTreeSet::new();
        if label == 1 {
            let lo = cfg.buggy_lines.0.min(sk.n_lines);
            let hi = cfg.buggy_lines.1.min(sk.n_lines);
            let count = rng.random_range(lo..=hi);
            for line in sample_indices(rng, sk.n_lines, count) {
                plant(&mut sk, cfg.d, line, &mu, cfg.signal_strength);
                buggy.insert(line);
            }
            if cfg.last_token_strength != 0.0 {
                let t = sk.token_line.len() - 1;
                for (x, &m) in sk.data[t * cfg.d..].iter_mut().zip(&mu) {
                    *x = (f64::from(*x) + cfg.last_token_strength * m) as f32;
                }
            }
        }
        (sk, buggy)
    };
    Ok(SynthDataset {
        train: make_split(cfg, Split::Train, &provenance, body)?,
        test: make_split(cfg, Split::Test, &provenance, body)?,
        signals: vec![mu],
        provenance,
    })
}

/// Conjunctive dataset: a sample is buggy iff two different lines carry the
/// two distinct planted directions. Clean samples carry exactly one of the
/// directions on one line, so no single direction decides the label. The
/// last line is never planted, so the final token carries no signal.
pub fn hard_variant(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let dirs = directions(cfg.d, 2, cfg.seed);
    let provenance = cfg.provenance("conjunctive");
    let body = |_: usize, label: u8, rng: &mut ChaCha8Rng| {
        let mut sk = skeleton(cfg, 3, rng);
        let plantable = sk.n_lines - 1;
        let mut buggy = BTreeSet::new();
        if label == 1 {
            let picked = sample_indices(rng, plantable, 2).into_vec();
            plant(&mut sk, cfg.d, picked[0], &dirs[0], cfg.signal_strength);
            plant(&mut sk, cfg.d, picked[1], &dirs[1], cfg.signal_strength);
            buggy.extend(picked);
        } else {
            let line = rng.random_range(0..plantable);
            let which = usize::from(rng.random_bool(0.5));
            plant(&mut sk, cfg.d, line, &dirs[which], cfg.signal_strength);
        }
        (sk, buggy)
    };
    Ok(SynthDataset {
        train: make_split(cfg, Split::Train, &provenance, body)?,
        test: make_split(cfg, Split::Test, &provenance, body)?,
        signals: dirs,
        provenance,
    })
}

/// Oracle ranking: each token scores `mu . z_t`, lines sum their tokens'
/// scores, highest first (earlier line on ties).
pub fn projection_ranking(record: &RepRecord, mu: &[f64]) -> Vec<usize> {
    let n = record.n_lines();
    let mut scores = vec![0.0f64; n];
    for (t, &line) in record.token_line().iter().enumerate() {
        if line >= 0 {
            let s: f64 = record
                .token(t)
                .iter()
                .zip(mu)
                .map(|(&z, &m)| f64::from(z) * m)
                .sum();
            scores[line as usize] += s;
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));
    order
}
