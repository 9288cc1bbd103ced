//! End-to-end runs of the `mml` binary.

mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mml_core::data_model::{parse_manifest, read_archive, write_archive, TensorRecord};
use mml_core::evaluation::{write_predictions, PredictionLine};

const CONFIG: &str = "name = \"tiny\"

[paths]
manifest = \"data/train.jsonl\"
test_manifest = \"data/test.jsonl\"
archives = [\"data/features.mmlf\"]
output_dir = \"out\"
predictions = \"preds.jsonl\"

[dims]
sentence_bert = 32
vo_glove = 16
c3d_fc6 = 32
visual_activity_concepts = 24
object_segmentation = 32

[model]
common_dim = 16
hidden_dim = 16

[train]
learning_rate = 0.05
epochs = 2

[synth]
n_videos = 6
n_queries = 24
";

fn mml(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mml"))
        .arg("--config")
        .arg(dir.join("run.toml"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

/// A fresh directory with the config and synthesized data.
fn setup() -> (tempfile::TempDir, PathBuf) {
    let tmp = tempfile::tempdir().unwrap();
    common::write_config(tmp.path(), CONFIG);
    let out = mml(tmp.path(), &["synth"]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let archive = tmp.path().join("data/features.mmlf");
    (tmp, archive)
}

#[test]
fn validate_clean_data() {
    let (tmp, _) = setup();
    let out = mml(tmp.path(), &["validate"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(text(&out.stdout).contains("clean: 6 videos"), "{}", text(&out.stdout));
}

#[test]
fn validate_reports_truncation() {
    let (tmp, archive) = setup();
    let bytes = fs::read(&archive).unwrap();
    fs::write(&archive, &bytes[..bytes.len() / 2]).unwrap();
    let out = mml(tmp.path(), &["validate"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(text(&out.stdout).contains("truncation at record"), "{}", text(&out.stdout));
}

fn rewrite(archive: &Path, edit: impl FnOnce(&mut Vec<TensorRecord>)) {
    let mut records = read_archive(archive).unwrap();
    edit(&mut records);
    write_archive(&records, archive).unwrap();
}

#[test]
fn validate_reports_dim_mismatch() {
    let (tmp, archive) = setup();
    let mut key = String::new();
    rewrite(&archive, |recs| {
        let r = recs.iter_mut().find(|r| r.shape == vec![32] && r.key.contains("sentence_bert")).unwrap();
        key = r.key.clone();
        *r = TensorRecord::new(key.clone(), vec![30], vec![0.0; 30]).unwrap();
    });
    let out = mml(tmp.path(), &["validate"]);
    assert_eq!(out.status.code(), Some(3));
    let stdout = text(&out.stdout);
    assert!(stdout.contains(&key) && stdout.contains("expected 32"), "{stdout}");
}

#[test]
fn validate_reports_dangling_key() {
    let (tmp, archive) = setup();
    let mut key = String::new();
    rewrite(&archive, |recs| key = recs.remove(0).key);
    let out = mml(tmp.path(), &["validate"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(text(&out.stdout).contains(&key), "{}", text(&out.stdout));
}

fn gt_predictions(tmp: &Path, drop_last: bool) -> Option<String> {
    let manifest = parse_manifest(tmp.join("data/test.jsonl")).unwrap();
    let mut queries = manifest.queries;
    let dropped = if drop_last { queries.pop().map(|q| q.query_id) } else { None };
    let lines: Vec<PredictionLine> = queries
        .iter()
        .map(|q| PredictionLine {
            query_id: q.query_id.clone(),
            rank: 1,
            start_sec: q.gt.start(),
            end_sec: q.gt.end(),
            score: 1.0,
        })
        .collect();
    write_predictions(&lines, tmp.join("preds.jsonl")).unwrap();
    dropped
}

#[test]
fn grade_ground_truth_is_perfect() {
    let (tmp, _) = setup();
    gt_predictions(tmp.path(), false);
    let out = mml(tmp.path(), &["grade"]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let stdout = text(&out.stdout);
    let row = stdout.lines().nth(1).unwrap();
    assert!(row.split_whitespace().collect::<Vec<_>>().ends_with(&["1.000", "1.000"]), "{stdout}");
}

#[test]
fn grade_missing_query_is_data_error() {
    let (tmp, _) = setup();
    let missing = gt_predictions(tmp.path(), true).unwrap();
    let out = mml(tmp.path(), &["grade"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(text(&out.stderr).contains(&missing), "{}", text(&out.stderr));
    assert!(out.stdout.is_empty());
}

#[test]
fn train_then_eval_prints_table() {
    let (tmp, _) = setup();
    let out = mml(tmp.path(), &["train"]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    assert!(text(&out.stdout).starts_with("best epoch"));
    // Logs go to stderr, uncolored when piped.
    let log = text(&out.stderr);
    assert!(log.contains("INFO training done") && !log.contains('\x1b'), "{log}");
    let out = mml(tmp.path(), &["eval"]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let stdout = text(&out.stdout);
    let header: Vec<&str> = stdout.lines().next().unwrap().split_whitespace().collect();
    assert_eq!(header, ["Model", "Sentence", "VO", "Objects", "Captioning", "R@1", "R@5"]);
    assert!(stdout.lines().nth(1).unwrap().starts_with("tiny"));
    assert_eq!(stdout.lines().count(), 2);
}

#[test]
fn default_grid_sweep_has_128_rows() {
    let (tmp, _) = setup();
    let out = mml(tmp.path(), &["--set", "train.epochs=0", "--parallelism", "2", "sweep"]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    assert!(text(&out.stdout).starts_with("sweep: 128 configs"), "{}", text(&out.stdout));
    let run_dir = fs::read_dir(tmp.path().join("out")).unwrap().next().unwrap().unwrap().path();
    let table = fs::read_to_string(run_dir.join("sweep.jsonl")).unwrap();
    assert_eq!(table.lines().count(), 128);
    let plot = mml(tmp.path(), &["--set", "train.epochs=0", "plot"]);
    assert_eq!(plot.status.code(), Some(0), "{}", text(&plot.stderr));
    assert_eq!(text(&plot.stdout).lines().count(), 8);
}

#[test]
fn bad_override_is_config_error() {
    let (tmp, _) = setup();
    let out = mml(tmp.path(), &["--set", "train.epoch=3", "train"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(out.stdout.is_empty());
}
