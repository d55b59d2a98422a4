use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use bap_core::localize::{localize_record, SampleRanking};
use bap_core::probe::load_checkpoint;
use bap_core::repstore::load_manifest;

fn bap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bap"))
        .args(args)
        .env_remove("BAP_THREADS")
        .env_remove("RUST_LOG")
        .output()
        .expect("bap runs")
}

fn ok(args: &[&str]) -> String {
    let out = bap(args);
    assert!(
        out.status.success(),
        "bap {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str]) -> String {
    let out = bap(args);
    assert_eq!(out.status.code(), Some(1), "bap {args:?} should fail");
    String::from_utf8(out.stderr).unwrap()
}

fn fixture(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
        .to_string_lossy()
        .into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// One small synthetic dataset and trained checkpoint shared by the tests.
struct Trained {
    _dir: tempfile::TempDir,
    root: PathBuf,
    ckpt: PathBuf,
}

fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        ok(&["synth", "--out", s(&root), "--n-train", "60", "--n-test", "12", "--d", "8", "--seed", "3"]);
        let ckpt = root.join("probe.bapm");
        ok(&[
            "train",
            "--manifest",
            s(&root.join("train/manifest.jsonl")),
            "--checkpoint",
            s(&ckpt),
            "--epochs",
            "2",
            "--d-head",
            "8",
            "--d-ff",
            "16",
        ]);
        Trained {
            _dir: dir,
            root,
            ckpt,
        }
    })
}

fn rankings(text: &str) -> Vec<SampleRanking> {
    text.lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn missing_manifest_names_the_path() {
    let err = fails(&["train", "--manifest", "/no/such/manifest.jsonl", "--checkpoint", "/tmp/x.bapm"]);
    assert!(err.starts_with("error: "));
    assert!(err.contains("/no/such/manifest.jsonl"), "{err}");
}

#[test]
fn checkpoint_reloads_with_report() {
    let t = trained();
    let model = load_checkpoint(&t.ckpt).unwrap();
    assert_eq!(model.config().d_in, 8);
    assert_eq!(model.config().d_head, 8);
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(t.root.join("probe.bapm.report.json")).unwrap()).unwrap();
    assert_eq!(report["epochs"].as_array().unwrap().len(), 2);
}

#[test]
fn rank_matches_library_localization() {
    let t = trained();
    let manifest = t.root.join("test/manifest.jsonl");
    let out = ok(&["rank", "--checkpoint", s(&t.ckpt), "--manifest", s(&manifest)]);
    let got = rankings(&out);
    let model = load_checkpoint(&t.ckpt).unwrap();
    let records = load_manifest(&manifest).unwrap().read_all().unwrap();
    assert_eq!(got.len(), records.len());
    for (g, r) in got.iter().zip(&records) {
        assert_eq!(g.sample_id, r.sample_id);
        assert_eq!(g.ranking, localize_record(&model, r).unwrap());
        let p = g.detection_prob.unwrap();
        assert!((0.0..=1.0).contains(&p));
    }
}

#[test]
fn single_record_and_top_k() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let records = load_manifest(&t.root.join("test/manifest.jsonl")).unwrap().read_all().unwrap();
    let one = bap_core::repstore::write_dataset(
        dir.path(),
        bap_core::repstore::Split::Test,
        "one",
        &records[..1],
    )
    .unwrap();
    let out = ok(&["rank", "--checkpoint", s(&t.ckpt), "--manifest", s(&one), "--top-k", "1"]);
    let got = rankings(&out);
    assert_eq!(got.len(), 1);
    assert_eq!(got[0].ranking.order.len(), 1);
    assert_eq!(got[0].ranking.line_scores.len(), records[0].n_lines());
    let err = fails(&["rank", "--checkpoint", s(&t.ckpt), "--manifest", s(&one), "--top-k", "0"]);
    assert!(err.contains("--top-k"));
}

#[test]
fn rank_rejects_dimension_mismatch() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    ok(&["synth", "--out", s(dir.path()), "--n-train", "4", "--n-test", "4", "--d", "6"]);
    let err = fails(&[
        "rank",
        "--checkpoint",
        s(&t.ckpt),
        "--manifest",
        s(&dir.path().join("test/manifest.jsonl")),
    ]);
    assert!(err.contains("hidden dim 6") && err.contains("expects 8"), "{err}");
}

#[test]
fn perfect_predictions_score_one() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let truth = std::fs::read_to_string(t.root.join("test_truth.jsonl")).unwrap();
    let mut preds = String::new();
    for line in truth.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let buggy: Vec<u64> = v["buggy_lines"].as_array().unwrap().iter().map(|x| x.as_u64().unwrap()).collect();
        let n = v["n_lines"].as_u64().unwrap();
        let mut order = buggy.clone();
        order.extend((0..n).filter(|l| !buggy.contains(l)));
        let p = if buggy.is_empty() { 0.1 } else { 0.9 };
        preds.push_str(&serde_json::json!({"sample_id": v["sample_id"], "order": order, "detection_prob": p}).to_string());
        preds.push('\n');
    }
    let pred_path = dir.path().join("perfect.jsonl");
    std::fs::write(&pred_path, preds).unwrap();
    let out = ok(&[
        "eval",
        "--predictions",
        s(&pred_path),
        "--truth",
        s(&t.root.join("test_truth.jsonl")),
        "--format",
        "json",
    ]);
    let report: serde_json::Value = serde_json::from_str(&out).unwrap();
    for k in ["1", "3", "5"] {
        assert_eq!(report["top_k_accuracy"][k], 1.0);
    }
    for k in ["2", "3", "5"] {
        assert_eq!(report["precision_at_k"][k], 1.0);
    }
    assert_eq!(report["detection_accuracy"], 1.0);
    let table = ok(&["eval", "--predictions", s(&pred_path), "--truth", s(&t.root.join("test_truth.jsonl"))]);
    assert!(table.contains("1.0000"));
}

#[test]
fn unknown_sample_fails_without_partial_output() {
    let dir = tempfile::tempdir().unwrap();
    let truth = dir.path().join("truth.jsonl");
    std::fs::write(&truth, "{\"sample_id\":\"a\",\"label\":1,\"buggy_lines\":[0],\"n_lines\":2}\n").unwrap();
    let preds = dir.path().join("preds.jsonl");
    std::fs::write(&preds, "{\"sample_id\":\"a\",\"order\":[0,1]}\n{\"sample_id\":\"ghost\",\"order\":[0]}\n").unwrap();
    let out = dir.path().join("report.json");
    let err = fails(&["eval", "--predictions", s(&preds), "--truth", s(&truth), "--out", s(&out)]);
    assert!(err.contains("ghost"), "{err}");
    assert!(!out.exists());
}

#[test]
fn random_rankings_are_seeded() {
    let t = trained();
    let manifest = t.root.join("test/manifest.jsonl");
    let a = ok(&["rank", "--random", "--seed", "4", "--manifest", s(&manifest)]);
    let b = ok(&["rank", "--random", "--seed", "4", "--manifest", s(&manifest)]);
    let c = ok(&["rank", "--random", "--seed", "5", "--manifest", s(&manifest)]);
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert!(rankings(&a).iter().all(|r| r.detection_prob.is_none()));
}

#[test]
fn html_report_matches_golden() {
    let out = ok(&[
        "report",
        "--rankings",
        &fixture("report_rankings.jsonl"),
        "--code",
        &fixture("report_code.jsonl"),
        "--format",
        "html",
    ]);
    let golden = std::fs::read_to_string(fixture("report_golden.html")).unwrap();
    assert_eq!(out, golden);
    // The top line gets the hottest class; equal scores shade uniformly.
    assert!(out.contains("<span class=\"h9\" title=\"0.600000\">   3 "));
    assert_eq!(out.matches("class=\"h9\" title=\"0.500000\"").count(), 2);
}

#[test]
fn report_single_sample_and_errors() {
    let ansi = ok(&[
        "report",
        "--rankings",
        &fixture("report_rankings.jsonl"),
        "--code",
        &fixture("report_code.jsonl"),
        "--sample",
        "r1",
    ]);
    assert!(ansi.starts_with("== r1\n"));
    assert!(!ansi.contains("flat"));
    assert!(ansi.contains("\x1b[48;5;"));
    let err = fails(&[
        "report",
        "--rankings",
        &fixture("report_rankings.jsonl"),
        "--code",
        &fixture("report_code.jsonl"),
        "--sample",
        "nope",
    ]);
    assert!(err.contains("nope"));
}

#[test]
fn inspect_sniffs_file_kinds() {
    let t = trained();
    let ckpt: serde_json::Value = serde_json::from_str(&ok(&["inspect", s(&t.ckpt)])).unwrap();
    assert_eq!(ckpt["kind"], "checkpoint");
    assert_eq!(ckpt["config"]["d_in"], 8);
    let record = t.root.join("test/records/test-00000.bapr");
    let rec: serde_json::Value = serde_json::from_str(&ok(&["inspect", s(&record)])).unwrap();
    assert_eq!(rec["kind"], "record");
    assert_eq!(rec["sample_id"], "test-00000");
    assert_eq!(rec["d"], 8);
    let man: serde_json::Value =
        serde_json::from_str(&ok(&["inspect", s(&t.root.join("test/manifest.jsonl"))])).unwrap();
    assert_eq!(man["kind"], "manifest");
}

#[test]
fn external_requires_code_truth() {
    let t = trained();
    let err = fails(&[
        "eval",
        "--external",
        "--predictions",
        &fixture("external_predictions.jsonl"),
        "--truth",
        s(&t.root.join("test_truth.jsonl")),
    ]);
    assert!(err.contains("code corpus"), "{err}");
}
