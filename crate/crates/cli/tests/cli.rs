use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use fcdn_cli::commands::holdout_report;
use fcdn_core::data::load_epochset;
use fcdn_core::eval::WindowClassifier;
use fcdn_core::EpochSet;
use serde_json::Value;

const TINY: &str = "# tiny pipeline\nsynth.samples = 128\nsynth.fs_hz = 128\nsynth.per_class = 10\nmodel.preset = tiny\ntrain.epochs = 1\n";

fn fcdn(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fcdn"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = fcdn(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn workspace(config: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.cfg"), config).unwrap();
    ok(dir.path(), &["synth", "--config", "run.cfg", "--out", "ds", "--quiet"]);
    dir
}

fn json(path: impl AsRef<Path>) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn synth_round_trips_and_is_deterministic() {
    let dir = workspace(TINY);
    let d = dir.path();
    let set = load_epochset(d.join("ds")).unwrap();
    assert_eq!(
        (set.n_trials(), set.n_channels(), set.n_samples(), set.n_classes()),
        (40, 8, 128, 4)
    );
    ok(d, &["synth", "--config", "run.cfg", "--out", "again", "-q"]);
    assert_eq!(fs::read(d.join("ds.f32")).unwrap(), fs::read(d.join("again.f32")).unwrap());
    assert_eq!(fs::read(d.join("ds.json")).unwrap(), fs::read(d.join("again.json")).unwrap());
    let other = fcdn(d, &["synth", "--config", "run.cfg", "--out", "missing/dir/ds"]);
    assert_ne!(code(&other), 0);
}

#[test]
fn connectivity_finds_the_coupled_pair() {
    let cfg = format!("{TINY}synth.pairs = 2-5,2-5,2-5,2-5\nsynth.amplitude = 4\nsynth.noise = 0.3\n");
    let dir = workspace(&cfg);
    let d = dir.path();
    ok(d, &["connectivity", "--config", "run.cfg", "--data", "ds", "--out", "fc", "-q"]);
    let csv = fs::read_to_string(d.join("fc.edges.csv")).unwrap();
    let first = csv.lines().nth(1).expect("at least one edge");
    assert!(first.starts_with("F7,F4,") || first.starts_with("F4,F7,"), "{first}");
    let w = json(d.join("fc.weights.json"));
    assert_eq!(w["weights"].as_array().unwrap().len(), 8);
    let bad = fcdn(
        d,
        &[
            "connectivity",
            "--config",
            "run.cfg",
            "--data",
            "ds",
            "--out",
            "fc",
            "--threshold",
            "1.0",
        ],
    );
    assert_eq!(code(&bad), 64);
}

#[test]
fn train_logs_and_reproduces() {
    let dir = workspace(TINY);
    let d = dir.path();
    ok(d, &["train", "--config", "run.cfg", "--data", "ds", "--out", "a.ckpt", "-q"]);
    ok(d, &["train", "--config", "run.cfg", "--data", "ds", "--out", "b.ckpt", "-q"]);
    assert_eq!(fs::read_to_string(d.join("a.ckpt.log.jsonl")).unwrap().lines().count(), 1);
    for ext in ["json", "f32"] {
        assert_eq!(
            fs::read(d.join(format!("a.ckpt.{ext}"))).unwrap(),
            fs::read(d.join(format!("b.ckpt.{ext}"))).unwrap()
        );
    }
    let (ra, rb) = (json(d.join("a.ckpt.report.json")), json(d.join("b.ckpt.report.json")));
    assert_eq!(ra["test_accuracy"], rb["test_accuracy"]);
    assert_eq!(ra["config_sha256"].as_str().unwrap().len(), 64);
    let no_teacher = fcdn(
        d,
        &[
            "train",
            "--config",
            "run.cfg",
            "--data",
            "ds",
            "--out",
            "c.ckpt",
            "--set",
            "model.beta=0.5",
        ],
    );
    assert_eq!(code(&no_teacher), 64);
    assert!(String::from_utf8_lossy(&no_teacher.stderr).contains("teacher"));
}

#[test]
fn reports_follow_flag_precedence() {
    let dir = workspace(&format!("{TINY}seed = 3\n"));
    let d = dir.path();
    ok(d, &["train", "--config", "run.cfg", "--data", "ds", "--out", "m.ckpt", "-q"]);
    ok(
        d,
        &[
            "evaluate", "--config", "run.cfg", "--data", "ds", "--model", "m.ckpt", "--seed", "5", "--out", "r.json", "-q",
        ],
    );
    let first = fs::read(d.join("r.json")).unwrap();
    ok(
        d,
        &[
            "evaluate", "--config", "run.cfg", "--data", "ds", "--model", "m.ckpt", "--seed", "5", "--out", "r.json", "-q",
        ],
    );
    assert_eq!(first, fs::read(d.join("r.json")).unwrap());
    let r = json(d.join("r.json"));
    assert_eq!(r["seed"], 5);
    assert_eq!(r["config"]["seed"], "5");
    assert_eq!(r["config"]["train.epochs"], "1");
    assert_eq!(r["config"]["fir_order"], "30");
    let unknown = fcdn(d, &["synth", "--out", "x", "--set", "nope=1"]);
    assert_eq!(code(&unknown), 64);
}

#[test]
fn data_errors_use_their_exit_code() {
    let dir = workspace(TINY);
    let d = dir.path();
    fs::write(d.join("bad.json"), "{\"magic\": 1}").unwrap();
    fs::write(d.join("bad.f32"), []).unwrap();
    let out = fcdn(d, &["connectivity", "--config", "run.cfg", "--data", "bad", "--out", "x"]);
    assert_eq!(code(&out), 65);
}

#[test]
fn cross_validation_and_loso() {
    let dir = workspace(TINY);
    let d = dir.path();
    ok(
        d,
        &[
            "evaluate", "--config", "run.cfg", "--data", "ds", "--mode", "cv5", "--out", "cv.json", "-q",
        ],
    );
    assert_eq!(json(d.join("cv.json"))["folds"].as_array().unwrap().len(), 5);
    let one = fcdn(
        d,
        &[
            "evaluate", "--config", "run.cfg", "--data", "ds", "--mode", "loso", "--out", "l.json",
        ],
    );
    assert_eq!(code(&one), 64);
    ok(
        d,
        &["synth", "--config", "run.cfg", "--out", "subj", "--set", "synth.subjects=2", "-q"],
    );
    ok(
        d,
        &[
            "evaluate",
            "--config",
            "run.cfg",
            "--data",
            "subj_s0,subj_s1",
            "--mode",
            "loso",
            "--out",
            "l.json",
            "-q",
        ],
    );
    let l = json(d.join("l.json"));
    assert_eq!(l["subjects"][0]["n_test"], 40);
}

#[test]
fn pseudo_online_table() {
    let cfg = "synth.samples = 1250\nsynth.per_class = 2\nmodel.preset = tiny\nmodel.pool_widths = 88,14\ntrain.epochs = 1\n";
    let dir = workspace(cfg);
    let d = dir.path();
    // too few trials for a 60/20/20 split: train on a larger set, replay the small one
    ok(
        d,
        &["synth", "--config", "run.cfg", "--out", "big", "--set", "synth.per_class=5", "-q"],
    );
    ok(d, &["train", "--config", "run.cfg", "--data", "big", "--out", "m.ckpt", "-q"]);
    ok(
        d,
        &[
            "pseudo-online",
            "--config",
            "run.cfg",
            "--data",
            "ds",
            "--model",
            "m.ckpt",
            "--out",
            "po.json",
            "-q",
        ],
    );
    let csv = fs::read_to_string(d.join("po.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "trial,window1,window2,window3,window4,fused,correct_windows,success"
    );
    assert_eq!(lines.count(), 8);
    let r = json(d.join("po.json"));
    assert_eq!(r["result"]["window_starts"], serde_json::json!([0, 250, 500, 750]));
}

#[test]
fn feature_export() {
    let dir = workspace(TINY);
    let d = dir.path();
    ok(d, &["train", "--config", "run.cfg", "--data", "ds", "--out", "m.ckpt", "-q"]);
    ok(
        d,
        &[
            "export-features",
            "--config",
            "run.cfg",
            "--data",
            "ds",
            "--model",
            "m.ckpt",
            "--out",
            "f1.csv",
            "-q",
        ],
    );
    ok(
        d,
        &[
            "export-features",
            "--config",
            "run.cfg",
            "--data",
            "ds",
            "--model",
            "m.ckpt",
            "--out",
            "f2.csv",
            "-q",
        ],
    );
    let csv = fs::read_to_string(d.join("f1.csv")).unwrap();
    assert_eq!(csv, fs::read_to_string(d.join("f2.csv")).unwrap());
    let header: Vec<&str> = csv.lines().next().unwrap().split(',').collect();
    assert_eq!(csv.lines().count(), 41);
    assert_eq!(header.iter().filter(|h| h.starts_with("cls_token_")).count(), 16);
    // conv1 of the tiny net: 4 maps x 8 channels x 121 steps, three bands
    assert_eq!(header.iter().filter(|h| h.starts_with("conv1_")).count(), 3 * 4 * 8 * 121);
    assert!(csv.lines().skip(1).all(|l| l.split(',').count() == header.len()));
}

/// Returns the true label with certainty.
struct Oracle;

impl WindowClassifier for Oracle {
    fn classify(&self, windows: &EpochSet, _window: usize) -> fcdn_core::Result<Vec<Vec<f64>>> {
        Ok(windows
            .labels()
            .iter()
            .map(|&l| {
                let mut p = vec![0.0; windows.n_classes()];
                p[l] = 1.0;
                p
            })
            .collect())
    }
}

#[test]
fn holdout_on_a_perfect_model() {
    let dir = workspace(TINY);
    let set = load_epochset(dir.path().join("ds")).unwrap();
    let r = holdout_report(&Oracle, &set, 0).unwrap();
    assert_eq!(r["accuracy"], 1.0);
    assert_eq!(r["n_test"], 8);
}
