//! The attention probe: one grouped-query attention decoder block over frozen
//! hidden states, with a scalar classifier head on the last token.
//!
//! With `use_block_residual_ln` (the default) the block is pre-LN:
//!
//! ```text
//! h      = LN1(z)
//! x'     = z + MHA(h)            causal, M query heads over G kv heads
//! logit  = MLP(LN2(x'[T-1]))     MLP = Linear -> GELU -> Linear(1)
//! ```
//!
//! Without it the MLP reads the raw attention output of the last token.
//! Either way the localization signal is `a_bar`, the head-mean of the last
//! query row of the attention matrices.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::repstore::{self, RepRecord};
use crate::tensor::{real, sigmoid, Graph, Real, Tensor, TensorError, Var};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"BAPM";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("invalid probe config: {0}")]
    InvalidConfig(String),
    #[error("input has hidden dim {got}, probe expects {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("input contains non-finite values")]
    NonFiniteInput,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Store(#[from] repstore::RepstoreError),
}

pub type Result<T> = std::result::Result<T, ProbeError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub d_in: usize,
    /// Query heads (M).
    pub n_heads: usize,
    /// Key/value heads (G); must divide `n_heads`.
    pub n_kv_heads: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub use_block_residual_ln: bool,
    /// Add sinusoidal position encodings to the input. Off by default since
    /// LLM hidden states already carry position.
    #[serde(default)]
    pub positional_encoding: bool,
    pub seed: u64,
}

impl ProbeConfig {
    /// Desk-scale defaults: 4 query heads over 2 kv heads.
    pub fn desk(d_in: usize) -> Self {
        Self {
            d_in,
            n_heads: 4,
            n_kv_heads: 2,
            d_head: 16,
            d_ff: 64,
            use_block_residual_ln: true,
            positional_encoding: false,
            seed: 0,
        }
    }

    /// The full-scale head layout (32 query heads over 8 kv heads).
    pub fn full_scale(d_in: usize) -> Self {
        Self {
            n_heads: 32,
            n_kv_heads: 8,
            d_head: 128,
            d_ff: d_in,
            ..Self::desk(d_in)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_in", self.d_in),
            ("n_heads", self.n_heads),
            ("n_kv_heads", self.n_kv_heads),
            ("d_head", self.d_head),
            ("d_ff", self.d_ff),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(ProbeError::InvalidConfig(format!("{name} must be >= 1")));
        }
        if self.n_heads % self.n_kv_heads != 0 {
            return Err(ProbeError::InvalidConfig(format!(
                "n_heads {} is not a multiple of n_kv_heads {}",
                self.n_heads, self.n_kv_heads
            )));
        }
        Ok(())
    }

    fn group_size(&self) -> usize {
        self.n_heads / self.n_kv_heads
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    Ones,
    Zeros,
    Uniform { fan_in: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: [usize; 2],
}

/// Fixed parameter order; checkpoints store tensors in exactly this order.
fn layout(cfg: &ProbeConfig) -> Vec<(&'static str, [usize; 2], Init)> {
    let d = cfg.d_in;
    let q = cfg.n_heads * cfg.d_head;
    let kv = cfg.n_kv_heads * cfg.d_head;
    let mut out = Vec::new();
    if cfg.use_block_residual_ln {
        out.push(("ln1_gain", [1, d], Init::Ones));
        out.push(("ln1_bias", [1, d], Init::Zeros));
    }
    out.push(("w_q", [d, q], Init::Uniform { fan_in: d }));
    out.push(("w_k", [d, kv], Init::Uniform { fan_in: d }));
    out.push(("w_v", [d, kv], Init::Uniform { fan_in: d }));
    out.push(("w_o", [q, d], Init::Uniform { fan_in: q }));
    if cfg.use_block_residual_ln {
        out.push(("ln2_gain", [1, d], Init::Ones));
        out.push(("ln2_bias", [1, d], Init::Zeros));
    }
    out.push(("mlp_w1", [d, cfg.d_ff], Init::Uniform { fan_in: d }));
    out.push(("mlp_b1", [1, cfg.d_ff], Init::Uniform { fan_in: d }));
    out.push(("mlp_w2", [cfg.d_ff, 1], Init::Uniform { fan_in: cfg.d_ff }));
    out.push(("mlp_b2", [1, 1], Init::Uniform { fan_in: cfg.d_ff }));
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeModel<F: Real = f32> {
    config: ProbeConfig,
    names: Vec<&'static str>,
    params: Vec<Tensor<F>>,
}

/// Result of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeOutput<F: Real = f32> {
    pub logit: F,
    /// `M x T`: row m is the last query row of head m's attention.
    pub attn_last_row: Tensor<F>,
    /// Head-mean of `attn_last_row`, length T.
    pub a_bar: Vec<F>,
}

/// Forward pass with every intermediate the tests and inspection need.
#[derive(Debug, Clone)]
pub struct ProbeTrace<F: Real = f32> {
    pub output: ProbeOutput<F>,
    /// Full `T x T` attention matrix per head.
    pub attention: Vec<Tensor<F>>,
    /// Per-token block output (`T x d_in`).
    pub block_output: Tensor<F>,
}

struct Built {
    logit: Var,
    heads: Vec<Var>,
    block_out: Var,
}

impl ProbeModel<f32> {
    /// Scaled-uniform initialization (bound `1/sqrt(fan_in)`), layer-norm
    /// gains 1 and biases 0. Deterministic per `config.seed`.
    pub fn init(config: ProbeConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (name, [r, c], init) in layout(&config) {
            let values = match init {
                Init::Ones => vec![1.0; r * c],
                Init::Zeros => vec![0.0; r * c],
                Init::Uniform { fan_in } => {
                    let bound = 1.0 / (fan_in as f32).sqrt();
                    (0..r * c).map(|_| rng.random_range(-bound..=bound)).collect()
                }
            };
            names.push(name);
            params.push(Tensor::matrix(r, c, values)?);
        }
        Ok(Self {
            config,
            names,
            params,
        })
    }

    pub fn forward_record(&self, record: &RepRecord) -> Result<ProbeOutput<f32>> {
        self.forward(&record_tensor(record)?)
    }
}

/// The record's hidden states as a `T x d` tensor.
pub fn record_tensor(record: &RepRecord) -> Result<Tensor<f32>> {
    Ok(Tensor::matrix(
        record.n_tokens(),
        record.dim(),
        record.data().to_vec(),
    )?)
}

impl<F: Real> ProbeModel<F> {
    pub fn config(&self) -> &ProbeConfig {
        &self.config
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        self.names
            .iter()
            .zip(&self.params)
            .map(|(n, t)| ParamSpec {
                name: n.to_string(),
                shape: [t.rows(), t.cols()],
            })
            .collect()
    }

    pub fn param_names(&self) -> &[&'static str] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<F>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<F>> {
        self.names.iter().position(|n| *n == name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.names
            .iter()
            .position(|n| *n == name)
            .map(move |i| &mut self.params[i])
    }

    pub fn n_parameters(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Same parameters in another float type.
    pub fn cast<G: Real>(&self) -> ProbeModel<G> {
        ProbeModel {
            config: self.config.clone(),
            names: self.names.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
        }
    }

    fn check_input(&self, z: &Tensor<F>) -> Result<()> {
        if z.shape().len() != 2 || z.cols() != self.config.d_in {
            return Err(ProbeError::DimMismatch {
                expected: self.config.d_in,
                got: z.cols(),
            });
        }
        if !z.is_finite() {
            return Err(ProbeError::NonFiniteInput);
        }
        Ok(())
    }

    fn build(&self, g: &mut Graph<F>, p: &[Var], z: &Tensor<F>) -> Result<Built> {
        let cfg = &self.config;
        let t = z.rows();
        let input = if cfg.positional_encoding {
            let mut with_pe = z.clone();
            add_positional_encoding(&mut with_pe);
            with_pe
        } else {
            z.clone()
        };
        let x = g.constant(input);
        let mut next = 0;
        let mut take = || {
            let v = p[next];
            next += 1;
            v
        };
        let h = if cfg.use_block_residual_ln {
            let (gain, bias) = (take(), take());
            g.layer_norm(x, gain, bias)?
        } else {
            x
        };
        let (w_q, w_k, w_v, w_o) = (take(), take(), take(), take());
        let q = g.matmul(h, w_q)?;
        let k = g.matmul(h, w_k)?;
        let v = g.matmul(h, w_v)?;

        let dh = cfg.d_head;
        let scale = real::<F>(1.0 / (dh as f64).sqrt());
        let mask: Vec<bool> = (0..t * t).map(|i| i % t <= i / t).collect();
        let mut heads = Vec::with_capacity(cfg.n_heads);
        let mut head_out = Vec::with_capacity(cfg.n_heads);
        let mut k_t = Vec::with_capacity(cfg.n_kv_heads);
        let mut v_g = Vec::with_capacity(cfg.n_kv_heads);
        for gi in 0..cfg.n_kv_heads {
            let kg = g.slice_cols(k, gi * dh, dh)?;
            k_t.push(g.transpose(kg)?);
            v_g.push(g.slice_cols(v, gi * dh, dh)?);
        }
        for m in 0..cfg.n_heads {
            let gi = m / cfg.group_size();
            let qm = g.slice_cols(q, m * dh, dh)?;
            let scores = g.matmul(qm, k_t[gi])?;
            let scores = g.scale(scores, scale)?;
            let attn = g.softmax_rows(scores, Some(&mask))?;
            heads.push(attn);
            head_out.push(g.matmul(attn, v_g[gi])?);
        }
        let merged = g.concat_cols(&head_out)?;
        let attn_out = g.matmul(merged, w_o)?;

        let (block_out, last) = if cfg.use_block_residual_ln {
            let resid = g.add(x, attn_out)?;
            let last = g.slice_rows(resid, t - 1, 1)?;
            let (gain, bias) = (take(), take());
            (resid, g.layer_norm(last, gain, bias)?)
        } else {
            (attn_out, g.slice_rows(attn_out, t - 1, 1)?)
        };
        let (w1, b1, w2, b2) = (take(), take(), take(), take());
        let hidden = g.matmul(last, w1)?;
        let hidden = g.add_row(hidden, b1)?;
        let hidden = g.gelu(hidden)?;
        let logit = g.matmul(hidden, w2)?;
        let logit = g.add_row(logit, b2)?;
        Ok(Built {
            logit,
            heads,
            block_out,
        })
    }

    fn output(&self, g: &Graph<F>, built: &Built) -> Result<ProbeOutput<F>> {
        let m = self.config.n_heads;
        let t = g.value(built.heads[0]).rows();
        let mut rows = Vec::with_capacity(m * t);
        for &h in &built.heads {
            rows.extend_from_slice(g.value(h).row(t - 1));
        }
        let attn_last_row = Tensor::matrix(m, t, rows)?;
        let inv_m = real::<F>(m as f64);
        let a_bar = (0..t)
            .map(|j| (0..m).fold(F::zero(), |acc, h| acc + attn_last_row.get(h, j)) / inv_m)
            .collect();
        Ok(ProbeOutput {
            logit: g.value(built.logit).item(),
            attn_last_row,
            a_bar,
        })
    }

    pub fn forward(&self, z: &Tensor<F>) -> Result<ProbeOutput<F>> {
        self.check_input(z)?;
        let mut g = Graph::new();
        let p: Vec<Var> = self.params.iter().map(|t| g.constant(t.clone())).collect();
        let built = self.build(&mut g, &p, z)?;
        self.output(&g, &built)
    }

    pub fn trace(&self, z: &Tensor<F>) -> Result<ProbeTrace<F>> {
        self.check_input(z)?;
        let mut g = Graph::new();
        let p: Vec<Var> = self.params.iter().map(|t| g.constant(t.clone())).collect();
        let built = self.build(&mut g, &p, z)?;
        Ok(ProbeTrace {
            output: self.output(&g, &built)?,
            attention: built.heads.iter().map(|&h| g.value(h).clone()).collect(),
            block_output: g.value(built.block_out).clone(),
        })
    }

    /// Probability that the sample is buggy.
    pub fn detect(&self, z: &Tensor<F>) -> Result<F> {
        Ok(sigmoid(self.forward(z)?.logit))
    }

    /// BCE loss against `label` and its gradient for every parameter, in
    /// parameter order.
    pub fn loss_and_grads(&self, z: &Tensor<F>, label: u8) -> Result<(F, Vec<Tensor<F>>)> {
        self.check_input(z)?;
        let mut g = Graph::new();
        let p: Vec<Var> = self.params.iter().map(|t| g.param(t.clone())).collect();
        let built = self.build(&mut g, &p, z)?;
        let target = if label == 1 { F::one() } else { F::zero() };
        let loss = g.bce_with_logits(built.logit, target)?;
        g.backward(loss)?;
        Ok((g.value(loss).item(), p.iter().map(|&v| g.grad(v)).collect()))
    }
}

fn add_positional_encoding<F: Real>(z: &mut Tensor<F>) {
    let d = z.cols();
    for t in 0..z.rows() {
        for i in 0..d {
            let freq = 10000f64.powf(-((i / 2 * 2) as f64) / d as f64);
            let angle = t as f64 * freq;
            let pe = if i % 2 == 0 { angle.sin() } else { angle.cos() };
            let v = &mut z.values_mut()[t * d + i];
            *v = *v + real::<F>(pe);
        }
    }
}

/// Inference cost of one probe forward pass on `n_tokens` tokens:
///
/// ```text
/// 2*T*d_in*(M+2G)*d_head        q/k/v projections
/// + 2*M*T^2*d_head*2            scores and weighted values
/// + 2*T*(M*d_head)*d_in         output projection
/// + 2*(M*d_head)*d_ff + 2*d_ff  classifier head
/// ```
pub fn flops_estimate(config: &ProbeConfig, n_tokens: usize) -> u128 {
    let t = n_tokens as u128;
    let d = config.d_in as u128;
    let m = config.n_heads as u128;
    let g = config.n_kv_heads as u128;
    let dh = config.d_head as u128;
    let ff = config.d_ff as u128;
    2 * t * d * (m + 2 * g) * dh + 2 * m * t * t * dh * 2 + 2 * t * (m * dh) * d + 2 * (m * dh) * ff + 2 * ff
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    config: ProbeConfig,
    params: Vec<ParamSpec>,
}

/// Checkpoint layout (little-endian): `"BAPM"`, version u32, header length
/// u32, JSON header `{config, params: [{name, shape}]}`, then every parameter
/// as f32 in header order, row-major.
pub fn write_checkpoint<W: Write>(model: &ProbeModel<f32>, mut sink: W) -> Result<usize> {
    let header = CheckpointHeader {
        config: model.config.clone(),
        params: model.param_specs(),
    };
    let header = serde_json::to_vec(&header).map_err(|e| ProbeError::Checkpoint(e.to_string()))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header);
    for p in &model.params {
        for v in p.values() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    sink.write_all(&buf)?;
    Ok(buf.len())
}

pub fn read_checkpoint<R: Read>(mut source: R) -> Result<ProbeModel<f32>> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    let bad = |m: &str| ProbeError::Checkpoint(m.to_string());
    if bytes.len() < 12 {
        return Err(bad("truncated"));
    }
    if bytes[..4] != CHECKPOINT_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(ProbeError::Checkpoint(format!("unsupported version {version}")));
    }
    let hl = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let header_end = 12usize.checked_add(hl).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[12..header_end])
        .map_err(|e| ProbeError::Checkpoint(e.to_string()))?;
    let mut model = ProbeModel::init(header.config)?;
    if model.param_specs() != header.params {
        return Err(bad("parameter layout does not match config"));
    }
    let mut offset = header_end;
    for p in &mut model.params {
        let n = p.len();
        let end = offset + 4 * n;
        if end > bytes.len() {
            return Err(bad("truncated parameters"));
        }
        for (dst, c) in p.values_mut().iter_mut().zip(bytes[offset..end].chunks_exact(4)) {
            *dst = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
        }
        if !p.is_finite() {
            return Err(bad("non-finite parameter"));
        }
        offset = end;
    }
    if offset != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(model)
}

pub fn save_checkpoint(path: &Path, model: &ProbeModel<f32>) -> Result<()> {
    let mut bytes = Vec::new();
    write_checkpoint(model, &mut bytes)?;
    repstore::write_atomic(path, &bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ProbeModel<f32>> {
    let file = std::fs::File::open(path).map_err(|e| {
        ProbeError::Checkpoint(format!("{}: {e}", path.display()))
    })?;
    read_checkpoint(std::io::BufReader::new(file))
}
