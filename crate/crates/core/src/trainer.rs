//! Weakly supervised training of the probe on bug-detection labels.
//!
//! The trainer only ever sees [`DetectionSample`]s, which carry hidden states,
//! the token-to-line map and the sample label. Ground-truth buggy lines are
//! not part of that type, so they cannot leak into training.
//!
//! Records have different lengths, so a batch is processed one sample at a
//! time and the per-sample gradients are averaged before the optimizer step.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::probe::{record_tensor, ProbeConfig, ProbeError, ProbeModel};
use crate::repstore::RepRecord;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training set is empty")]
    Empty,
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("class {label} has {count} samples, need at least 2 to split")]
    TooFewPerClass { label: u8, count: usize },
    #[error("sample '{sample_id}' has hidden dim {got}, expected {expected}")]
    MixedDim {
        sample_id: String,
        expected: usize,
        got: usize,
    },
    #[error("sample '{sample_id}' comes from layer {got}, expected {expected}")]
    MixedLayer {
        sample_id: String,
        expected: u32,
        got: u32,
    },
    #[error("non-finite loss on sample '{sample_id}' in epoch {epoch}")]
    NonFiniteLoss { sample_id: String, epoch: usize },
    #[error("layer sweep needs at least one candidate layer")]
    NoCandidates,
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error("{0}")]
    Load(String),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// What the trainer is allowed to know about a sample.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionSample {
    pub sample_id: String,
    pub layer_k: u32,
    pub data: Tensor<f32>,
    pub token_line: Vec<i32>,
    pub label: u8,
}

impl TryFrom<&RepRecord> for DetectionSample {
    type Error = ProbeError;

    fn try_from(r: &RepRecord) -> std::result::Result<Self, ProbeError> {
        Ok(Self {
            sample_id: r.sample_id.clone(),
            layer_k: r.layer_k,
            data: record_tensor(r)?,
            token_line: r.token_line().to_vec(),
            label: r.label,
        })
    }
}

pub fn detection_samples(records: &[RepRecord]) -> Result<Vec<DetectionSample>> {
    records
        .iter()
        .map(|r| DetectionSample::try_from(r).map_err(TrainError::from))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Adam with decoupled weight decay.
    AdamW,
    /// Plain gradient descent with weight decay added to the gradient.
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub val_fraction: f64,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            learning_rate: 1e-4,
            batch_size: 16,
            weight_decay: 1.0,
            val_fraction: 0.2,
            seed: 0,
            optimizer: OptimizerKind::AdamW,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    /// Short schedule for noisy datasets that overfit within a few epochs.
    pub fn noisy() -> Self {
        Self {
            epochs: 5,
            ..Self::default()
        }
    }

    /// Settings for the last-token logistic-regression baseline.
    pub fn linear_baseline() -> Self {
        Self {
            weight_decay: 0.1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and non-negative");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be finite and non-negative");
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad("val_fraction must be in (0, 1)");
        }
        Ok(())
    }
}

/// Stratified train/validation split over sample indices. Each class sends
/// `round(val_fraction * n_class)` samples (at least one, never all) to
/// validation. Both index lists come back sorted.
pub fn split(labels: &[u8], val_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(TrainError::InvalidConfig("val_fraction must be in (0, 1)".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for label in [0u8, 1] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == label).collect();
        if idx.len() < 2 {
            return Err(TrainError::TooFewPerClass {
                label,
                count: idx.len(),
            });
        }
        idx.shuffle(&mut rng);
        let n_val = ((val_fraction * idx.len() as f64).round() as usize).clamp(1, idx.len() - 1);
        val.extend_from_slice(&idx[..n_val]);
        train.extend_from_slice(&idx[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    /// 1-based epoch whose parameters were kept.
    pub selected_epoch: usize,
    pub best_val_accuracy: Option<f64>,
    pub n_train: usize,
    pub n_val: usize,
    pub wall_clock_seconds: f64,
}

struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    wd: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    fn new(cfg: &TrainConfig, shapes: &[usize]) -> Self {
        Self {
            kind: cfg.optimizer,
            lr: cfg.learning_rate,
            wd: cfg.weight_decay,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            step: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    fn step(&mut self, params: &mut [Tensor<f32>], grads: &[Vec<f64>]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            for (j, (w, &gj)) in p.values_mut().iter_mut().zip(g).enumerate() {
                let wv = f64::from(*w);
                let update = match self.kind {
                    OptimizerKind::AdamW => {
                        let m = &mut self.m[i][j];
                        let v = &mut self.v[i][j];
                        *m = self.beta1 * *m + (1.0 - self.beta1) * gj;
                        *v = self.beta2 * *v + (1.0 - self.beta2) * gj * gj;
                        let m_hat = *m / bc1;
                        let v_hat = *v / bc2;
                        m_hat / (v_hat.sqrt() + self.eps) + self.wd * wv
                    }
                    OptimizerKind::Sgd => gj + self.wd * wv,
                };
                *w = (wv - self.lr * update) as f32;
            }
        }
    }
}

fn check_consistent(samples: &[DetectionSample], d_in: usize, layer: u32) -> Result<()> {
    for s in samples {
        if s.data.cols() != d_in {
            return Err(TrainError::MixedDim {
                sample_id: s.sample_id.clone(),
                expected: d_in,
                got: s.data.cols(),
            });
        }
        if s.layer_k != layer {
            return Err(TrainError::MixedLayer {
                sample_id: s.sample_id.clone(),
                expected: layer,
                got: s.layer_k,
            });
        }
    }
    Ok(())
}

/// Fraction of samples whose predicted probability lands on the right side
/// of 0.5. Runs across threads; the model is only read.
pub fn detection_accuracy<F: Real>(model: &ProbeModel<F>, samples: &[DetectionSample]) -> Result<f64>
where
    ProbeModel<F>: Sync,
{
    if samples.is_empty() {
        return Ok(0.0);
    }
    let correct: Vec<bool> = samples
        .par_iter()
        .map(|s| {
            let p = model.detect(&s.data.cast::<F>())?.to_f64().unwrap();
            Ok((p >= 0.5) == (s.label == 1))
        })
        .collect::<Result<_>>()?;
    Ok(correct.iter().filter(|&&c| c).count() as f64 / samples.len() as f64)
}

/// Trains a probe on `train` and keeps the epoch with the best accuracy on
/// `val` (earliest epoch on ties). With an empty `val` the last epoch is
/// kept. Fully deterministic for fixed seeds.
pub fn train(
    probe_config: &ProbeConfig,
    config: &TrainConfig,
    train: &[DetectionSample],
    val: &[DetectionSample],
) -> Result<(ProbeModel<f32>, TrainReport)> {
    config.validate()?;
    let first = train.first().ok_or(TrainError::Empty)?;
    check_consistent(train, probe_config.d_in, first.layer_k)?;
    check_consistent(val, probe_config.d_in, first.layer_k)?;

    let started = Instant::now();
    let mut model = ProbeModel::init(probe_config.clone())?;
    let shapes: Vec<usize> = model.params().iter().map(Tensor::len).collect();
    let mut opt = Optimizer::new(config, &shapes);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();

    let mut epochs = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, ProbeModel<f32>)> = None;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let results: Vec<(f32, Vec<Tensor<f32>>)> = batch
                .par_iter()
                .map(|&i| model.loss_and_grads(&train[i].data, train[i].label))
                .collect::<std::result::Result<_, _>>()?;
            let mut grads: Vec<Vec<f64>> = shapes.iter().map(|&n| vec![0.0; n]).collect();
            for (&i, (loss, sample_grads)) in batch.iter().zip(&results) {
                if !loss.is_finite() {
                    return Err(TrainError::NonFiniteLoss {
                        sample_id: train[i].sample_id.clone(),
                        epoch,
                    });
                }
                loss_sum += f64::from(*loss);
                for (acc, g) in grads.iter_mut().zip(sample_grads) {
                    for (a, &v) in acc.iter_mut().zip(g.values()) {
                        *a += f64::from(v);
                    }
                }
            }
            let n = batch.len() as f64;
            for g in &mut grads {
                for v in g.iter_mut() {
                    *v /= n;
                }
            }
            opt.step(model.params_mut(), &grads);
        }
        let train_loss = loss_sum / train.len() as f64;
        let val_accuracy = if val.is_empty() {
            None
        } else {
            Some(detection_accuracy(&model, val)?)
        };
        log::debug!("epoch {epoch}: loss {train_loss:.4} val_acc {val_accuracy:?}");
        if let Some(acc) = val_accuracy {
            if best.as_ref().is_none_or(|(b, _, _)| acc > *b) {
                best = Some((acc, epoch, model.clone()));
            }
        }
        epochs.push(EpochStats {
            epoch,
            train_loss,
            val_accuracy,
        });
    }

    let (best_val_accuracy, selected_epoch, selected) = match best {
        Some((acc, epoch, m)) => (Some(acc), epoch, m),
        None => (None, config.epochs, model),
    };
    let report = TrainReport {
        epochs,
        selected_epoch,
        best_val_accuracy,
        n_train: train.len(),
        n_val: val.len(),
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    Ok((selected, report))
}

/// Splits `samples` with `config.val_fraction` and `config.seed`, then trains.
pub fn train_with_split(
    probe_config: &ProbeConfig,
    config: &TrainConfig,
    samples: &[DetectionSample],
) -> Result<(ProbeModel<f32>, TrainReport)> {
    if samples.is_empty() {
        return Err(TrainError::Empty);
    }
    let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
    let (tr, va) = split(&labels, config.val_fraction, config.seed)?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| samples[i].clone()).collect::<Vec<_>>();
    train(probe_config, config, &pick(&tr), &pick(&va))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub layer: u32,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub best_layer: u32,
}

/// Trains one probe per candidate layer with the same seeds and picks the
/// layer with the best validation detection accuracy (smaller layer on ties).
pub fn layer_sweep<L>(
    layers: &[u32],
    mut load: L,
    probe_config: &ProbeConfig,
    config: &TrainConfig,
) -> Result<SweepReport>
where
    L: FnMut(u32) -> Result<Vec<DetectionSample>>,
{
    if layers.is_empty() {
        return Err(TrainError::NoCandidates);
    }
    let mut rows = Vec::with_capacity(layers.len());
    for &layer in layers {
        let samples = load(layer)?;
        let (_, report) = train_with_split(probe_config, config, &samples)?;
        rows.push(SweepRow {
            layer,
            val_accuracy: report.best_val_accuracy.unwrap_or(0.0),
        });
    }
    let best_layer = rows
        .iter()
        .max_by(|a, b| {
            a.val_accuracy
                .total_cmp(&b.val_accuracy)
                .then(b.layer.cmp(&a.layer))
        })
        .map(|r| r.layer)
        .expect("non-empty");
    Ok(SweepReport { rows, best_layer })
}
