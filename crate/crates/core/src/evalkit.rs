//! Localization and detection metrics, baselines, and ingestion of
//! prompting-style predictions.
//!
//! Localization metrics are computed over buggy samples only; detection
//! accuracy over every sample that carries a probability.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::localize::{aggregate, LineRanking};
use crate::repstore::{CodeRecord, RepRecord};
use crate::tensor::{sigmoid, Tensor};
use crate::trainer::{DetectionSample, OptimizerKind, TrainConfig, TrainError};

pub const TOP_KS: [usize; 3] = [1, 3, 5];
pub const PRECISION_KS: [usize; 3] = [2, 3, 5];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("sample has no ground-truth buggy lines")]
    EmptyTruth,
    #[error("k must be >= 1")]
    ZeroK,
    #[error("random baseline needs at least one line")]
    NoLines,
    #[error("prediction for '{0}' has no matching ground truth")]
    UnknownSample(String),
    #[error("buggy sample '{0}' has neither a prediction nor an explicit miss")]
    MissingPrediction(String),
    #[error("duplicate prediction for '{0}'")]
    DuplicatePrediction(String),
    #[error("cannot parse prediction: {0}")]
    Parse(String),
    #[error(transparent)]
    Train(#[from] TrainError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// 1 iff any ground-truth line is among the first `k` predicted lines.
pub fn top_k_hit(order: &[usize], buggy: &BTreeSet<usize>, k: usize) -> Result<bool> {
    if buggy.is_empty() {
        return Err(EvalError::EmptyTruth);
    }
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    Ok(order.iter().take(k).any(|l| buggy.contains(l)))
}

/// Correct lines in the top `k` divided by `min(k, |buggy|)`.
pub fn precision_at_k(order: &[usize], buggy: &BTreeSet<usize>, k: usize) -> Result<f64> {
    if buggy.is_empty() {
        return Err(EvalError::EmptyTruth);
    }
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    let correct = order.iter().take(k).filter(|l| buggy.contains(l)).count();
    Ok(correct as f64 / k.min(buggy.len()) as f64)
}

/// Probability that a uniformly random ranking of `n_lines` lines puts at
/// least one of `n_buggy` lines in its top `k`: `1 - C(L-b, k) / C(L, k)`.
pub fn random_hit_probability(n_lines: usize, n_buggy: usize, k: usize) -> f64 {
    let k = k.min(n_lines);
    let n_buggy = n_buggy.min(n_lines);
    // C(L-b, k) / C(L, k) = prod_{i<k} (L-b-i) / (L-i)
    let mut miss = 1.0;
    for i in 0..k {
        if n_lines - n_buggy <= i {
            return 1.0;
        }
        miss *= (n_lines - n_buggy - i) as f64 / (n_lines - i) as f64;
    }
    1.0 - miss
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RandomBaseline {
    pub monte_carlo: f64,
    /// Standard error of the Monte-Carlo mean.
    pub std_error: f64,
    pub exact: f64,
}

pub fn random_baseline(
    n_lines: usize,
    buggy: &BTreeSet<usize>,
    k: usize,
    seed: u64,
    trials: usize,
) -> Result<RandomBaseline> {
    if n_lines == 0 {
        return Err(EvalError::NoLines);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n_lines).collect();
    let mut hits = 0usize;
    for _ in 0..trials {
        order.shuffle(&mut rng);
        if top_k_hit(&order, buggy, k)? {
            hits += 1;
        }
    }
    let p = hits as f64 / trials.max(1) as f64;
    let in_range = buggy.iter().filter(|&&l| l < n_lines).count();
    Ok(RandomBaseline {
        monte_carlo: p,
        std_error: (p * (1.0 - p) / trials.max(1) as f64).sqrt(),
        exact: random_hit_probability(n_lines, in_range, k),
    })
}

/// A uniformly random line ranking for one sample.
pub fn random_order(n_lines: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n_lines).collect();
    order.shuffle(rng);
    order
}

/// Logistic regression on the last token's hidden state.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    pub weights: Vec<f32>,
    pub bias: f32,
}

impl LinearProbe {
    fn score(&self, token: &[f32]) -> f64 {
        let z: f64 = self
            .weights
            .iter()
            .zip(token)
            .map(|(&w, &x)| f64::from(w) * f64::from(x))
            .sum::<f64>()
            + f64::from(self.bias);
        sigmoid(z)
    }

    /// Bug probability from the last token.
    pub fn detect(&self, data: &Tensor<f32>) -> f64 {
        self.score(data.row(data.rows() - 1))
    }

    pub fn detection_accuracy(&self, samples: &[DetectionSample]) -> f64 {
        if samples.is_empty() {
            return 0.0;
        }
        let correct = samples
            .iter()
            .filter(|s| (self.detect(&s.data) >= 0.5) == (s.label == 1))
            .count();
        correct as f64 / samples.len() as f64
    }

    /// Applies the classifier to every token, normalizes the token scores
    /// to unit mass and groups them by line.
    pub fn localize(&self, data: &Tensor<f32>, token_line: &[i32]) -> Result<LineRanking> {
        let scores: Vec<f64> = (0..data.rows()).map(|t| self.score(data.row(t))).collect();
        let total: f64 = scores.iter().sum();
        let norm: Vec<f64> = scores.iter().map(|s| s / total).collect();
        aggregate(&norm, token_line).map_err(|e| EvalError::Parse(e.to_string()))
    }

    pub fn localize_record(&self, record: &RepRecord) -> Result<LineRanking> {
        let data = Tensor::matrix(record.n_tokens(), record.dim(), record.data().to_vec())
            .map_err(|e| EvalError::Parse(e.to_string()))?;
        self.localize(&data, record.token_line())
    }
}

/// Trains the linear baseline with the same optimizer and batching as the
/// probe trainer (mean BCE per batch, seeded shuffling).
pub fn linear_probe_train(train: &[DetectionSample], cfg: &TrainConfig) -> Result<LinearProbe> {
    cfg.validate()?;
    let d = train.first().ok_or(TrainError::Empty)?.data.cols();
    for s in train {
        if s.data.cols() != d {
            return Err(TrainError::MixedDim {
                sample_id: s.sample_id.clone(),
                expected: d,
                got: s.data.cols(),
            }
            .into());
        }
    }
    let mut w = vec![0.0f64; d];
    let mut b = 0.0f64;
    let (mut mw, mut vw) = (vec![0.0; d], vec![0.0; d]);
    let (mut mb, mut vb) = (0.0f64, 0.0f64);
    let mut step = 0i32;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut gw = vec![0.0; d];
            let mut gb = 0.0;
            for &i in batch {
                let s = &train[i];
                let x = s.data.row(s.data.rows() - 1);
                let z: f64 = w.iter().zip(x).map(|(a, &v)| a * f64::from(v)).sum::<f64>() + b;
                let err = sigmoid(z) - f64::from(s.label);
                for (g, &v) in gw.iter_mut().zip(x) {
                    *g += err * f64::from(v);
                }
                gb += err;
            }
            let n = batch.len() as f64;
            step += 1;
            let bc1 = 1.0 - cfg.beta1.powi(step);
            let bc2 = 1.0 - cfg.beta2.powi(step);
            let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
                let g = g / n;
                let delta = match cfg.optimizer {
                    OptimizerKind::AdamW => {
                        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                        (*m / bc1) / ((*v / bc2).sqrt() + cfg.eps) + cfg.weight_decay * *p
                    }
                    OptimizerKind::Sgd => g + cfg.weight_decay * *p,
                };
                *p -= cfg.learning_rate * delta;
            };
            for j in 0..d {
                update(&mut w[j], gw[j], &mut mw[j], &mut vw[j]);
            }
            update(&mut b, gb, &mut mb, &mut vb);
        }
    }
    Ok(LinearProbe {
        weights: w.into_iter().map(|v| v as f32).collect(),
        bias: b as f32,
    })
}

/// One entry of a prompting-style prediction (1-based line number).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExternalEntry {
    #[serde(rename = "lineNumber", default, skip_serializing_if = "Option::is_none")]
    pub line_number: Option<i64>,
    #[serde(rename = "codeContent", default, skip_serializing_if = "Option::is_none")]
    pub code_content: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExternalPrediction {
    pub sample_id: String,
    pub entries: Vec<ExternalEntry>,
}

/// Ranked 0-based lines recovered from an external prediction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ingested {
    pub lines: Vec<usize>,
    /// Entries that matched no line (or repeated an earlier line).
    pub dropped: usize,
}

fn strip_fences(text: &str) -> String {
    text.lines()
        .filter(|l| !l.trim_start().starts_with("```"))
        .collect::<Vec<_>>()
        .join("\n")
}

fn parse_values(text: &str) -> Result<Vec<Value>> {
    let cleaned = strip_fences(text);
    if let Ok(v) = serde_json::from_str::<Value>(&cleaned) {
        return Ok(vec![v]);
    }
    // Several concatenated JSON values.
    let values: std::result::Result<Vec<Value>, _> =
        serde_json::Deserializer::from_str(&cleaned).into_iter::<Value>().collect();
    match values {
        Ok(v) if !v.is_empty() => Ok(v),
        Ok(_) => Err(EvalError::Parse("no JSON value found".into())),
        Err(e) => Err(EvalError::Parse(e.to_string())),
    }
}

fn collect_entries(v: &Value, out: &mut Vec<ExternalEntry>) {
    match v {
        Value::Array(items) => items.iter().for_each(|i| collect_entries(i, out)),
        Value::Object(map) => {
            if let Some(inner) = map.get("faultLocalization") {
                collect_entries(inner, out);
            } else if map.contains_key("lineNumber") || map.contains_key("codeContent") {
                let line_number = match map.get("lineNumber") {
                    Some(Value::Number(n)) => n.as_i64(),
                    Some(Value::String(s)) => s.trim().parse().ok(),
                    _ => None,
                };
                let code_content = map.get("codeContent").and_then(Value::as_str).map(str::to_string);
                out.push(ExternalEntry {
                    line_number,
                    code_content,
                });
            }
        }
        _ => {}
    }
}

/// Extracts the `faultLocalization` entries from a model response.
pub fn parse_external(text: &str) -> Result<Vec<ExternalEntry>> {
    let mut entries = Vec::new();
    for v in parse_values(text)? {
        collect_entries(&v, &mut entries);
    }
    Ok(entries)
}

/// Maps external entries onto 0-based lines of `code`. A valid `lineNumber`
/// wins; otherwise the first line whose trimmed text equals the trimmed
/// `codeContent` is used; anything else is dropped.
pub fn resolve_entries(entries: &[ExternalEntry], code: &CodeRecord) -> Ingested {
    let lines = code.lines();
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    let mut dropped = 0;
    for e in entries {
        let by_number = e
            .line_number
            .filter(|&n| n >= 1 && (n as usize) <= lines.len())
            .map(|n| n as usize - 1);
        let by_text = || {
            let wanted = e.code_content.as_deref()?.trim();
            lines.iter().position(|l| l.trim() == wanted)
        };
        match by_number.or_else(by_text) {
            Some(line) if seen.insert(line) => out.push(line),
            _ => dropped += 1,
        }
    }
    if dropped > 0 {
        log::warn!("{}: dropped {dropped} unmatched prediction entries", code.sample_id);
    }
    Ingested { lines: out, dropped }
}

pub fn ingest_external(text: &str, code: &CodeRecord) -> Result<Ingested> {
    Ok(resolve_entries(&parse_external(text)?, code))
}

/// Splits one line of an external-predictions JSON-lines file into its
/// sample id and the response payload. The payload is the `response`
/// string when present, the line itself otherwise.
pub fn external_line(line: &str) -> Result<(String, String)> {
    let v: Value = serde_json::from_str(line).map_err(|e| EvalError::Parse(e.to_string()))?;
    let id = v
        .get("sample_id")
        .and_then(Value::as_str)
        .ok_or_else(|| EvalError::Parse("missing sample_id".into()))?
        .to_string();
    let payload = match v.get("response") {
        Some(Value::String(s)) => s.clone(),
        _ => line.to_string(),
    };
    Ok((id, payload))
}

/// Ground truth for one sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub sample_id: String,
    pub label: u8,
    #[serde(default)]
    pub buggy_lines: BTreeSet<usize>,
    /// Lines of code, used for length buckets.
    pub n_lines: usize,
    /// Precomputed cross-validation fold, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fold: Option<u32>,
}

impl From<&RepRecord> for TruthRecord {
    fn from(r: &RepRecord) -> Self {
        Self {
            sample_id: r.sample_id.clone(),
            label: r.label,
            buggy_lines: r.buggy_lines.clone(),
            n_lines: r.n_lines(),
            fold: None,
        }
    }
}

impl From<&CodeRecord> for TruthRecord {
    fn from(c: &CodeRecord) -> Self {
        Self {
            sample_id: c.sample_id.clone(),
            label: c.label,
            buggy_lines: c.buggy_lines.clone(),
            n_lines: c.lines().len(),
            fold: None,
        }
    }
}

/// A method's output for one sample. `order: None` is an explicit miss
/// (e.g. an unparseable response) and scores zero on every hit metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub sample_id: String,
    pub order: Option<Vec<usize>>,
    pub detection_prob: Option<f64>,
}

impl Prediction {
    pub fn ranked(sample_id: impl Into<String>, order: Vec<usize>) -> Self {
        Self {
            sample_id: sample_id.into(),
            order: Some(order),
            detection_prob: None,
        }
    }

    pub fn miss(sample_id: impl Into<String>) -> Self {
        Self {
            sample_id: sample_id.into(),
            order: None,
            detection_prob: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub sample_id: String,
    pub n_lines: usize,
    pub missed: bool,
    pub hits: BTreeMap<usize, bool>,
    pub precision: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketRow {
    /// Inclusive line-count range.
    pub min_lines: usize,
    pub max_lines: usize,
    pub n: usize,
    pub top1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_samples: usize,
    pub n_buggy_samples: usize,
    pub n_missed: usize,
    pub top_k_accuracy: BTreeMap<usize, f64>,
    pub precision_at_k: BTreeMap<usize, f64>,
    pub detection_accuracy: Option<f64>,
    pub by_length: Vec<BucketRow>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub by_fold: BTreeMap<u32, BucketRow>,
    pub rows: Vec<SampleRow>,
}

const BUCKET_WIDTH: usize = 10;

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        sum += v;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Scores predictions against ground truth. Rows follow truth order.
pub fn evaluate(predictions: &[Prediction], truth: &[TruthRecord]) -> Result<EvalReport> {
    let truth_ids: HashSet<&str> = truth.iter().map(|t| t.sample_id.as_str()).collect();
    let mut by_id: HashMap<&str, &Prediction> = HashMap::new();
    for p in predictions {
        if !truth_ids.contains(p.sample_id.as_str()) {
            return Err(EvalError::UnknownSample(p.sample_id.clone()));
        }
        if by_id.insert(p.sample_id.as_str(), p).is_some() {
            return Err(EvalError::DuplicatePrediction(p.sample_id.clone()));
        }
    }

    let mut rows = Vec::new();
    let mut folds = Vec::new();
    let mut detections = Vec::new();
    for t in truth {
        let pred = by_id.get(t.sample_id.as_str());
        if let Some(prob) = pred.and_then(|p| p.detection_prob) {
            detections.push((prob >= 0.5) == (t.label == 1));
        }
        if t.label != 1 {
            continue;
        }
        if t.buggy_lines.is_empty() {
            return Err(EvalError::EmptyTruth);
        }
        let pred = pred.ok_or_else(|| EvalError::MissingPrediction(t.sample_id.clone()))?;
        let order = pred.order.as_deref();
        let mut hits = BTreeMap::new();
        for k in TOP_KS {
            let hit = match order {
                Some(o) => top_k_hit(o, &t.buggy_lines, k)?,
                None => false,
            };
            hits.insert(k, hit);
        }
        let mut precision = BTreeMap::new();
        for k in PRECISION_KS {
            let p = match order {
                Some(o) => precision_at_k(o, &t.buggy_lines, k)?,
                None => 0.0,
            };
            precision.insert(k, p);
        }
        folds.push(t.fold);
        rows.push(SampleRow {
            sample_id: t.sample_id.clone(),
            n_lines: t.n_lines,
            missed: order.is_none(),
            hits,
            precision,
        });
    }

    let top_k_accuracy = TOP_KS
        .iter()
        .map(|&k| (k, mean(rows.iter().map(|r| f64::from(u8::from(r.hits[&k]))))))
        .collect();
    let precision_at_k = PRECISION_KS
        .iter()
        .map(|&k| (k, mean(rows.iter().map(|r| r.precision[&k]))))
        .collect();

    let mut buckets: BTreeMap<usize, Vec<bool>> = BTreeMap::new();
    for r in &rows {
        buckets.entry(r.n_lines / BUCKET_WIDTH).or_default().push(r.hits[&1]);
    }
    let by_length = buckets
        .into_iter()
        .map(|(b, hits)| BucketRow {
            min_lines: b * BUCKET_WIDTH,
            max_lines: b * BUCKET_WIDTH + BUCKET_WIDTH - 1,
            n: hits.len(),
            top1: mean(hits.iter().map(|&h| f64::from(u8::from(h)))),
        })
        .collect();

    let mut fold_hits: BTreeMap<u32, Vec<bool>> = BTreeMap::new();
    for (r, fold) in rows.iter().zip(&folds) {
        if let Some(f) = fold {
            fold_hits.entry(*f).or_default().push(r.hits[&1]);
        }
    }
    let by_fold = fold_hits
        .into_iter()
        .map(|(f, hits)| {
            (
                f,
                BucketRow {
                    min_lines: 0,
                    max_lines: 0,
                    n: hits.len(),
                    top1: mean(hits.iter().map(|&h| f64::from(u8::from(h)))),
                },
            )
        })
        .collect();

    Ok(EvalReport {
        n_samples: truth.len(),
        n_buggy_samples: rows.len(),
        n_missed: rows.iter().filter(|r| r.missed).count(),
        top_k_accuracy,
        precision_at_k,
        detection_accuracy: if detections.is_empty() {
            None
        } else {
            Some(mean(detections.iter().map(|&c| f64::from(u8::from(c)))))
        },
        by_length,
        by_fold,
        rows,
    })
}

impl EvalReport {
    /// Aligned plain-text summary.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<22}{:>10}", "metric", "value");
        let _ = writeln!(s, "{:<22}{:>10}", "samples", self.n_samples);
        let _ = writeln!(s, "{:<22}{:>10}", "buggy samples", self.n_buggy_samples);
        let _ = writeln!(s, "{:<22}{:>10}", "misses", self.n_missed);
        for (k, v) in &self.top_k_accuracy {
            let _ = writeln!(s, "{:<22}{:>10.4}", format!("top-{k} accuracy"), v);
        }
        for (k, v) in &self.precision_at_k {
            let _ = writeln!(s, "{:<22}{:>10.4}", format!("P@{k}"), v);
        }
        match self.detection_accuracy {
            Some(v) => {
                let _ = writeln!(s, "{:<22}{:>10.4}", "detection accuracy", v);
            }
            None => {
                let _ = writeln!(s, "{:<22}{:>10}", "detection accuracy", "n/a");
            }
        }
        if !self.by_length.is_empty() {
            let _ = writeln!(s, "\n{:<22}{:>10}{:>10}", "lines", "n", "top-1");
            for b in &self.by_length {
                let _ = writeln!(
                    s,
                    "{:<22}{:>10}{:>10.4}",
                    format!("{}-{}", b.min_lines, b.max_lines),
                    b.n,
                    b.top1
                );
            }
        }
        if !self.by_fold.is_empty() {
            let _ = writeln!(s, "\n{:<22}{:>10}{:>10}", "fold", "n", "top-1");
            for (f, b) in &self.by_fold {
                let _ = writeln!(s, "{:<22}{:>10}{:>10.4}", f, b.n, b.top1);
            }
        }
        s
    }
}
