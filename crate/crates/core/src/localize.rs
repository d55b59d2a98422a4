//! Token attention to line ranking.
//!
//! A line's score is the sum of the head-averaged last-token attention over
//! the tokens mapped to it. Lines are ranked by score, highest first, with
//! ties going to the earlier line.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::probe::{ProbeError, ProbeModel};
use crate::repstore::{line_count, RepRecord};

#[derive(Debug, Error)]
pub enum LocalizeError {
    #[error("attention has {attn} entries but token_line has {lines}")]
    LengthMismatch { attn: usize, lines: usize },
    #[error("negative or non-finite attention {value} at token {token}")]
    BadAttention { token: usize, value: f64 },
    #[error("top-k needs k >= 1")]
    ZeroK,
    #[error(transparent)]
    Probe(#[from] ProbeError),
}

pub type Result<T> = std::result::Result<T, LocalizeError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineRanking {
    pub line_scores: Vec<f64>,
    /// Line indices by descending score.
    pub order: Vec<usize>,
    /// Attention mass on tokens that belong to a source line.
    pub coverage_mass: f64,
}

impl LineRanking {
    pub fn n_lines(&self) -> usize {
        self.line_scores.len()
    }

    pub fn top_k(&self, k: usize) -> Result<Vec<usize>> {
        top_k(self, k)
    }
}

/// Sums token scores per line and ranks the lines.
pub fn aggregate(a_bar: &[f64], token_line: &[i32]) -> Result<LineRanking> {
    aggregate_lines(a_bar, token_line, line_count(token_line))
}

/// Like [`aggregate`] but with an explicit line count, for sources whose
/// trailing lines received no tokens. `n_lines` below the token-derived
/// count is raised to it.
pub fn aggregate_lines(a_bar: &[f64], token_line: &[i32], n_lines: usize) -> Result<LineRanking> {
    if a_bar.len() != token_line.len() {
        return Err(LocalizeError::LengthMismatch {
            attn: a_bar.len(),
            lines: token_line.len(),
        });
    }
    if let Some((token, &value)) = a_bar
        .iter()
        .enumerate()
        .find(|(_, v)| !(v.is_finite() && **v >= 0.0))
    {
        return Err(LocalizeError::BadAttention { token, value });
    }
    let n_lines = n_lines.max(line_count(token_line));
    let mut line_scores = vec![0.0; n_lines];
    let mut coverage_mass = 0.0;
    for (&a, &line) in a_bar.iter().zip(token_line) {
        if line >= 0 {
            line_scores[line as usize] += a;
            coverage_mass += a;
        }
    }
    let order = rank_desc(&line_scores);
    Ok(LineRanking {
        line_scores,
        order,
        coverage_mass,
    })
}

/// Indices sorted by descending score; stable, so ties keep index order.
pub fn rank_desc(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// First `min(k, L)` lines of the ranking.
pub fn top_k(ranking: &LineRanking, k: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(LocalizeError::ZeroK);
    }
    Ok(ranking.order.iter().take(k).copied().collect())
}

/// Runs the probe on one record and ranks its lines.
pub fn localize_record(model: &ProbeModel<f32>, record: &RepRecord) -> Result<LineRanking> {
    let out = model.forward_record(record)?;
    let a_bar: Vec<f64> = out.a_bar.iter().map(|&v| f64::from(v)).collect();
    aggregate(&a_bar, record.token_line())
}

/// One line of ranking output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRanking {
    pub sample_id: String,
    #[serde(flatten)]
    pub ranking: LineRanking,
    /// Probe bug probability, when the producer has one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detection_prob: Option<f64>,
}
