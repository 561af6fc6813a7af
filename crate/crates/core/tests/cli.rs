use std::path::Path;
use std::process::{Command, Output};

use stmt_track::config::Config;
use stmt_track::io::synth::SynthSpec;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_stmt-track"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn small_spec(dir: &Path) -> String {
    let spec = SynthSpec {
        length: 8,
        width: 48,
        height: 48,
        target_min: 8.0,
        target_max: 12.0,
        occlusion_length: 2,
        ..SynthSpec::default()
    };
    let p = dir.join("spec.txt");
    std::fs::write(&p, spec.to_text()).unwrap();
    p.to_string_lossy().into_owned()
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(run(&["track", "--config", "c.txt", "--out", "r.txt"]).status.code(), Some(2));
    assert_eq!(run(&["eval", "--results", "a", "--gt", "b", "--bogus"]).status.code(), Some(2));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    let out = run(&["track", "--config", "c.txt", "--out", "r.txt"]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("--seq"));
}

#[test]
fn help_exits_0() {
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_failures_exit_1_with_diagnostic() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = s(&tmp.path().join("nope.txt"));
    let out = run(&["track", "--config", &missing, "--seq", &missing, "--out", &missing]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: "));

    let bad = tmp.path().join("bad_spec.txt");
    std::fs::write(&bad, "width = 16\nheight = 16\ntarget_max = 30\n").unwrap();
    let out = run(&["synth", "--spec", &s(&bad), "--seed", "1", "--out", &s(&tmp.path().join("x"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn eval_of_ground_truth_reports_perfect_scores() {
    let tmp = tempfile::tempdir().unwrap();
    let seq = tmp.path().join("seq");
    let spec = small_spec(tmp.path());
    assert!(run(&["synth", "--spec", &spec, "--seed", "3", "--out", &s(&seq)]).status.success());
    let out = run(&["eval", "--results", &s(&seq.join("groundtruth.txt")), "--gt", &s(&seq)]);
    assert!(out.status.success());
    let csv = String::from_utf8(out.stdout).unwrap();
    assert_eq!(csv, "seq,n_frames,PR20,NPR,SR\nseq,8,1.000,1.000,1.000\n");
}

#[test]
fn synth_track_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let spec = small_spec(root);
    let data = root.join("data");
    assert!(run(&["synth", "--spec", &spec, "--seed", "9", "--count", "2", "--out", &s(&data)]).status.success());
    let cfg = Config {
        template_size: 16,
        search_size: 32,
        ..Config::tiny()
    };
    cfg.save(&root.join("cfg.txt")).unwrap();
    let results = root.join("results");
    let out = run(&["track", "--config", &s(&root.join("cfg.txt")), "--seq", &s(&data), "--out", &s(&results), "--jobs", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let written: Vec<_> = std::fs::read_dir(&results).unwrap().collect();
    assert_eq!(written.len(), 2);
    for e in written {
        let text = std::fs::read_to_string(e.unwrap().path()).unwrap();
        assert_eq!(text.lines().count(), 8);
        assert!(!text.contains('\r') && text.ends_with('\n'));
    }

    let report = root.join("report.csv");
    let out = run(&["eval", "--results", &s(&results), "--gt", &s(&data), "--out", &s(&report)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(&report).unwrap();
    assert!(csv.starts_with("seq,n_frames,PR20,NPR,SR\n"));
    assert_eq!(csv.lines().count(), 3);
    assert!(String::from_utf8_lossy(&out.stdout).contains("mean over 2 sequences"));
}

#[test]
fn train_writes_checkpoint_and_loss_log() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let spec = small_spec(root);
    let data = root.join("data");
    assert!(run(&["synth", "--spec", &spec, "--seed", "2", "--count", "2", "--out", &s(&data)]).status.success());
    let cfg = Config {
        steps: 4,
        checkpoint_every: 2,
        batch_size: 1,
        ..Config::tiny()
    };
    cfg.save(&root.join("cfg.txt")).unwrap();
    let out_dir = root.join("run");
    let out = run(&["train", "--config", &s(&root.join("cfg.txt")), "--data", &s(&data), "--out", &s(&out_dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["checkpoint_000002.bin", "checkpoint_000004.bin", "model.bin", "loss.csv", "config.txt"] {
        assert!(out_dir.join(f).is_file(), "{f} missing");
    }
    assert_eq!(Config::load(&out_dir.join("config.txt")).unwrap(), cfg);
    let log = std::fs::read_to_string(out_dir.join("loss.csv")).unwrap();
    assert_eq!(log.lines().count(), 5);
}
