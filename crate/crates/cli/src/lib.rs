//! Subcommands of the `bap` executable.

use std::collections::HashMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::Value;

use bap_core::evalkit::{self, Prediction, TruthRecord};
use bap_core::localize::{self, LineRanking, SampleRanking};
use bap_core::probe::{self, ProbeConfig};
use bap_core::render;
use bap_core::repstore::{self, CodeRecord, RepRecord};
use bap_core::synth::{self, SynthConfig};
use bap_core::trainer::{self, OptimizerKind, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "bap", version, about = "Attention-probe bug detection and line localization")]
pub struct Cli {
    /// Worker threads for per-sample work (default: all cores).
    #[arg(long, global = true, env = "BAP_THREADS")]
    pub threads: Option<usize>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a planted-signal dataset.
    Synth(SynthArgs),
    /// Train a probe on a manifest.
    Train(TrainArgs),
    /// Rank the lines of every sample in a manifest.
    Rank(RankArgs),
    /// Score rankings or external predictions against ground truth.
    Eval(EvalArgs),
    /// Render line heatmaps for rankings.
    Report(ReportArgs),
    /// Summarize a record, checkpoint or manifest.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 2000)]
    pub n_train: usize,
    #[arg(long, default_value_t = 400)]
    pub n_test: usize,
    #[arg(long, default_value_t = 32)]
    pub d: usize,
    #[arg(long, default_value_t = 2.0)]
    pub signal_strength: f64,
    #[arg(long, default_value_t = 0.0)]
    pub last_token_strength: f64,
    /// Conjunctive two-direction variant.
    #[arg(long)]
    pub hard: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Where to write the checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Training report path (default: `<checkpoint>.report.json`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 1.0)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.2)]
    pub val_fraction: f64,
    /// Seeds the split, shuffling and probe initialization.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = Opt::Adamw)]
    pub optimizer: Opt,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 2)]
    pub kv_heads: usize,
    #[arg(long, default_value_t = 16)]
    pub d_head: usize,
    #[arg(long, default_value_t = 64)]
    pub d_ff: usize,
    /// Drop the residual and layer norms (MLP reads the raw attention output).
    #[arg(long)]
    pub bare: bool,
    #[arg(long)]
    pub positional_encoding: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Opt {
    Adamw,
    Sgd,
}

#[derive(Debug, Args)]
pub struct RankArgs {
    #[arg(long, required_unless_present = "random")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Truncate each order to its first k lines.
    #[arg(long)]
    pub top_k: Option<usize>,
    /// Rankings file (default: stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Uniformly random rankings instead of a probe.
    #[arg(long, conflicts_with = "checkpoint")]
    pub random: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Rankings from `bap rank`, or external predictions with `--external`.
    #[arg(long)]
    pub predictions: PathBuf,
    /// Ground truth: truth records or a code corpus (JSON lines).
    #[arg(long)]
    pub truth: PathBuf,
    /// Predictions are `faultLocalization` responses; needs a code corpus
    /// as truth.
    #[arg(long)]
    pub external: bool,
    /// Also write the JSON report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = EvalFormat::Table)]
    pub format: EvalFormat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvalFormat {
    Table,
    Json,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub rankings: PathBuf,
    /// Code corpus (JSON lines of sample_id, code, label, buggy_lines).
    #[arg(long)]
    pub code: PathBuf,
    /// Render only this sample.
    #[arg(long)]
    pub sample: Option<String>,
    #[arg(long, value_enum, default_value_t = ReportFormat::Ansi)]
    pub format: ReportFormat,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Ansi,
    Html,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    pub path: PathBuf,
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        // Fails only if a pool already exists, which is harmless.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Rank(a) => cmd_rank(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Report(a) => cmd_report(&a),
        Command::Inspect(a) => cmd_inspect(&a),
    }
}

fn emit(out: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match out {
        Some(path) => repstore::write_atomic(path, bytes)
            .with_context(|| format!("writing {}", path.display())),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(bytes)?;
            stdout.flush()?;
            Ok(())
        }
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

/// Non-blank lines with their 1-based line numbers.
fn jsonl(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l))
}

fn placeholder_code(record: &RepRecord) -> CodeRecord {
    let code = (0..record.n_lines())
        .map(|i| format!("stmt_{i}();"))
        .collect::<Vec<_>>()
        .join("\n");
    CodeRecord {
        sample_id: record.sample_id.clone(),
        code,
        label: record.label,
        buggy_lines: record.buggy_lines.clone(),
    }
}

pub fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        n_train: a.n_train,
        n_test: a.n_test,
        d: a.d,
        signal_strength: a.signal_strength,
        last_token_strength: a.last_token_strength,
        seed: a.seed,
        ..SynthConfig::default()
    };
    let ds = if a.hard {
        synth::hard_variant(&cfg)?
    } else {
        synth::generate(&cfg)?
    };
    let paths = ds.write(&a.out)?;
    let code: Vec<CodeRecord> = ds.test.iter().map(placeholder_code).collect();
    let code_path = a.out.join("test_code.jsonl");
    repstore::write_code_corpus(&code_path, &code)?;
    eprintln!(
        "wrote {} train / {} test samples\n  {}\n  {}\n  {}\n  {}",
        ds.train.len(),
        ds.test.len(),
        paths.train_manifest.display(),
        paths.test_manifest.display(),
        paths.test_truth.display(),
        code_path.display()
    );
    Ok(())
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let manifest = repstore::load_manifest(&a.manifest)?;
    let records = manifest.read_all()?;
    let d = records
        .first()
        .map(RepRecord::dim)
        .ok_or_else(|| anyhow!("{}: manifest has no samples", a.manifest.display()))?;
    let samples = trainer::detection_samples(&records)?;
    let probe_cfg = ProbeConfig {
        d_in: d,
        n_heads: a.heads,
        n_kv_heads: a.kv_heads,
        d_head: a.d_head,
        d_ff: a.d_ff,
        use_block_residual_ln: !a.bare,
        positional_encoding: a.positional_encoding,
        seed: a.seed,
    };
    let cfg = TrainConfig {
        epochs: a.epochs,
        learning_rate: a.lr,
        batch_size: a.batch_size,
        weight_decay: a.weight_decay,
        val_fraction: a.val_fraction,
        seed: a.seed,
        optimizer: match a.optimizer {
            Opt::Adamw => OptimizerKind::AdamW,
            Opt::Sgd => OptimizerKind::Sgd,
        },
        ..TrainConfig::default()
    };
    let (model, report) = trainer::train_with_split(&probe_cfg, &cfg, &samples)?;
    probe::save_checkpoint(&a.checkpoint, &model)?;
    let report_path = a.out.clone().unwrap_or_else(|| {
        let mut p = a.checkpoint.clone().into_os_string();
        p.push(".report.json");
        PathBuf::from(p)
    });
    let mut json = serde_json::to_vec_pretty(&report)?;
    json.push(b'\n');
    repstore::write_atomic(&report_path, &json)?;
    eprintln!(
        "selected epoch {} (val accuracy {:.4}); checkpoint {}",
        report.selected_epoch,
        report.best_val_accuracy.unwrap_or(f64::NAN),
        a.checkpoint.display()
    );
    Ok(())
}

pub fn cmd_rank(a: &RankArgs) -> Result<()> {
    if a.top_k == Some(0) {
        bail!("--top-k must be at least 1");
    }
    let manifest = repstore::load_manifest(&a.manifest)?;
    let records = manifest.read_all()?;
    let mut rankings: Vec<SampleRanking> = match &a.checkpoint {
        Some(path) => {
            let model = probe::load_checkpoint(path)?;
            let d_in = model.config().d_in;
            if let Some(r) = records.iter().find(|r| r.dim() != d_in) {
                bail!(
                    "sample '{}' has hidden dim {} but the checkpoint expects {d_in}",
                    r.sample_id,
                    r.dim()
                );
            }
            records
                .par_iter()
                .map(|r| -> Result<SampleRanking> {
                    let out = model.forward_record(r)?;
                    let a_bar: Vec<f64> = out.a_bar.iter().map(|&v| f64::from(v)).collect();
                    Ok(SampleRanking {
                        sample_id: r.sample_id.clone(),
                        ranking: localize::aggregate(&a_bar, r.token_line())?,
                        detection_prob: Some(bap_core::tensor::sigmoid(f64::from(out.logit))),
                    })
                })
                .collect::<Result<_>>()?
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
            records
                .iter()
                .map(|r| {
                    let n = r.n_lines();
                    let order = evalkit::random_order(n, &mut rng);
                    // Scores mirror the order so the record is self-consistent.
                    let mut line_scores = vec![0.0; n];
                    for (rank, &line) in order.iter().enumerate() {
                        line_scores[line] = (n - rank) as f64 / n as f64;
                    }
                    SampleRanking {
                        sample_id: r.sample_id.clone(),
                        ranking: LineRanking {
                            line_scores,
                            order,
                            coverage_mass: 0.0,
                        },
                        detection_prob: None,
                    }
                })
                .collect()
        }
    };
    if let Some(k) = a.top_k {
        for r in &mut rankings {
            r.ranking.order.truncate(k);
        }
    }
    let mut out = Vec::new();
    for r in &rankings {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    emit(a.out.as_deref(), &out)
}

enum Truth {
    Plain(TruthRecord),
    Code(CodeRecord),
}

fn load_truth(path: &Path) -> Result<Vec<Truth>> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (n, line) in jsonl(&text) {
        let v: Value = serde_json::from_str(line)
            .with_context(|| format!("{}: line {n} is not JSON", path.display()))?;
        let t = if v.get("code").is_some() {
            let c: CodeRecord = serde_json::from_value(v)
                .with_context(|| format!("{}: line {n}", path.display()))?;
            c.validate()?;
            Truth::Code(c)
        } else {
            Truth::Plain(
                serde_json::from_value(v).with_context(|| format!("{}: line {n}", path.display()))?,
            )
        };
        out.push(t);
    }
    Ok(out)
}

fn ranking_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (n, line) in jsonl(&text) {
        let v: Value = serde_json::from_str(line)
            .with_context(|| format!("{}: line {n} is not JSON", path.display()))?;
        let sample_id = v
            .get("sample_id")
            .and_then(Value::as_str)
            .ok_or_else(|| anyhow!("{}: line {n} has no sample_id", path.display()))?
            .to_string();
        let order: Option<Vec<usize>> = match v.get("order") {
            Some(o) => Some(
                serde_json::from_value(o.clone())
                    .with_context(|| format!("{}: line {n}: bad order", path.display()))?,
            ),
            None => None,
        };
        let detection_prob = v.get("detection_prob").and_then(Value::as_f64);
        out.push(Prediction {
            sample_id,
            order,
            detection_prob,
        });
    }
    Ok(out)
}

fn external_predictions(path: &Path, code: &HashMap<&str, &CodeRecord>) -> Result<Vec<Prediction>> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (n, line) in jsonl(&text) {
        let (id, payload) = evalkit::external_line(line)
            .with_context(|| format!("{}: line {n}", path.display()))?;
        let record = code
            .get(id.as_str())
            .ok_or_else(|| anyhow!("prediction for '{id}' has no matching ground truth"))?;
        let pred = match evalkit::ingest_external(&payload, record) {
            Ok(ing) => Prediction::ranked(id, ing.lines),
            Err(e) => {
                log::warn!("{id}: unparseable response scored as a miss: {e}");
                Prediction::miss(id)
            }
        };
        out.push(pred);
    }
    Ok(out)
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let truth = load_truth(&a.truth)?;
    let code: HashMap<&str, &CodeRecord> = truth
        .iter()
        .filter_map(|t| match t {
            Truth::Code(c) => Some((c.sample_id.as_str(), c)),
            Truth::Plain(_) => None,
        })
        .collect();
    let predictions = if a.external {
        if code.len() != truth.len() {
            bail!(
                "{}: --external needs a code corpus as truth (records with a \"code\" field)",
                a.truth.display()
            );
        }
        external_predictions(&a.predictions, &code)?
    } else {
        ranking_predictions(&a.predictions)?
    };
    let truth: Vec<TruthRecord> = truth
        .iter()
        .map(|t| match t {
            Truth::Plain(t) => t.clone(),
            Truth::Code(c) => TruthRecord::from(c),
        })
        .collect();
    let report = evalkit::evaluate(&predictions, &truth)?;
    let mut json = serde_json::to_vec_pretty(&report)?;
    json.push(b'\n');
    if let Some(out) = &a.out {
        repstore::write_atomic(out, &json)?;
    }
    match a.format {
        EvalFormat::Json => emit(None, &json),
        EvalFormat::Table => emit(None, report.to_table().as_bytes()),
    }
}

/// Line scores padded to the code's line count. Code may only extend past
/// the ranking with blank lines.
fn align_scores(ranking: &LineRanking, code: &CodeRecord) -> Result<Vec<f64>> {
    let lines = code.lines();
    let n = ranking.n_lines();
    if n > lines.len() || lines[n..].iter().any(|l| !l.trim().is_empty()) {
        bail!(
            "sample '{}': ranking has {n} lines but the code has {}",
            code.sample_id,
            lines.len()
        );
    }
    let mut scores = ranking.line_scores.clone();
    scores.resize(lines.len(), 0.0);
    Ok(scores)
}

pub fn cmd_report(a: &ReportArgs) -> Result<()> {
    let corpus = repstore::read_code_corpus(&a.code)?;
    let by_id: HashMap<&str, &CodeRecord> =
        corpus.iter().map(|c| (c.sample_id.as_str(), c)).collect();
    let text = read_text(&a.rankings)?;
    let mut rows = Vec::new();
    for (n, line) in jsonl(&text) {
        let r: SampleRanking = serde_json::from_str(line)
            .with_context(|| format!("{}: line {n}", a.rankings.display()))?;
        if a.sample.as_deref().is_some_and(|s| s != r.sample_id) {
            continue;
        }
        let code = by_id
            .get(r.sample_id.as_str())
            .ok_or_else(|| anyhow!("no code for sample '{}'", r.sample_id))?;
        let scores = align_scores(&r.ranking, code)?;
        rows.push((r.sample_id, *code, scores));
    }
    if let (Some(s), true) = (&a.sample, rows.is_empty()) {
        bail!("sample '{s}' not found in {}", a.rankings.display());
    }
    let line_sets: Vec<Vec<&str>> = rows.iter().map(|(_, c, _)| c.lines()).collect();
    let out = match a.format {
        ReportFormat::Ansi => {
            let mut s = String::new();
            for ((id, _, scores), lines) in rows.iter().zip(&line_sets) {
                s.push_str(&format!("== {id}\n"));
                s.push_str(&render::ansi(lines, scores));
            }
            s
        }
        ReportFormat::Html => {
            let maps: Vec<render::Heatmap<'_>> = rows
                .iter()
                .zip(&line_sets)
                .map(|((id, _, scores), lines)| render::Heatmap {
                    title: id,
                    lines,
                    scores,
                })
                .collect();
            render::html_page("line scores", &maps)
        }
    };
    emit(a.out.as_deref(), out.as_bytes())
}

pub fn cmd_inspect(a: &InspectArgs) -> Result<()> {
    let bytes = std::fs::read(&a.path).with_context(|| format!("reading {}", a.path.display()))?;
    let summary = if bytes.starts_with(&repstore::RECORD_MAGIC) {
        let r = repstore::read_record(bytes.as_slice())?;
        serde_json::json!({
            "kind": "record",
            "sample_id": r.sample_id,
            "layer_k": r.layer_k,
            "T": r.n_tokens(),
            "d": r.dim(),
            "n_lines": r.n_lines(),
            "label": r.label,
            "buggy_lines": r.buggy_lines,
            "special_tokens": r.token_line().iter().filter(|&&l| l < 0).count(),
            "provenance": r.provenance,
        })
    } else if bytes.starts_with(&probe::CHECKPOINT_MAGIC) {
        let m = probe::read_checkpoint(bytes.as_slice())?;
        let params: Vec<Value> = m
            .param_specs()
            .into_iter()
            .map(|s| serde_json::json!({"name": s.name, "shape": s.shape}))
            .collect();
        serde_json::json!({
            "kind": "checkpoint",
            "config": m.config(),
            "n_parameters": m.n_parameters(),
            "params": params,
            "flops_per_100_tokens": probe::flops_estimate(m.config(), 100).to_string(),
        })
    } else {
        let m = repstore::load_manifest(&a.path)
            .with_context(|| format!("{}: not a record, checkpoint or manifest", a.path.display()))?;
        let labels = m.labels();
        let buggy = labels.iter().filter(|&&l| l == 1).count();
        let tokens: Vec<usize> = m.entries.iter().map(|e| e.n_tokens).collect();
        serde_json::json!({
            "kind": "manifest",
            "format_version": m.format_version,
            "split": m.split,
            "provenance": m.provenance,
            "samples": m.len(),
            "buggy": buggy,
            "clean": m.len() - buggy,
            "min_T": tokens.iter().min(),
            "max_T": tokens.iter().max(),
        })
    };
    let mut out = serde_json::to_vec_pretty(&summary)?;
    out.push(b'\n');
    emit(None, &out)
}
