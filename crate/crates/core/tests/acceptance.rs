//! Acceptance criteria 2 to 9. Each test writes one `criterion N: PASS|FAIL`
//! line straight to stdout so it shows up without `--nocapture`.
//!
//! Criterion 6 is a training outcome: its line is printed and recorded, and the
//! test does not fail on it.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use stmt_track::config::Config;
use stmt_track::experiment::{run_ablation, AblationPlan};
use stmt_track::io::synth::{render, SynthSpec};
use stmt_track::model::StmtModel;
use stmt_track::selftest::{self, Check, GRAD_BUDGET_SECS};
use stmt_track::tracker::Tracker;

fn report(criterion: u8, passed: bool, detail: &str) {
    let mut out = std::io::stdout().lock();
    let verdict = if passed { "PASS" } else { "FAIL" };
    writeln!(out, "criterion {criterion}: {verdict} ({detail})").unwrap();
    out.flush().unwrap();
}

fn print_failures(checks: &[Check]) {
    let mut out = std::io::stdout().lock();
    for c in checks.iter().filter(|c| !c.passed) {
        writeln!(out, "  failed: {} {}", c.name, c.detail).unwrap();
    }
}

fn summarize(criterion: u8, checks: &[Check]) -> bool {
    let failed = checks.iter().filter(|c| !c.passed).count();
    print_failures(checks);
    let passed = failed == 0 && !checks.is_empty();
    report(criterion, passed, &format!("{} checks, {failed} failed", checks.len()));
    passed
}

#[test]
fn criterion_2_gradient_suite() {
    let start = Instant::now();
    let checks = selftest::gradient_suite();
    let secs = start.elapsed().as_secs_f64();
    let mut shapes: BTreeMap<String, usize> = BTreeMap::new();
    for c in checks.iter().filter(|c| c.name.starts_with("grad ")) {
        let op = c.name.split_whitespace().nth(1).unwrap().split('(').next().unwrap().to_string();
        *shapes.entry(op).or_default() += 1;
    }
    let thin: Vec<&String> = shapes.iter().filter(|(op, n)| **n < 3 && op.as_str() != "full").map(|(op, _)| op).collect();
    let failed = checks.iter().filter(|c| !c.passed).count();
    print_failures(&checks);
    let passed = failed == 0 && thin.is_empty() && shapes.contains_key("stmt_forward") && secs < GRAD_BUDGET_SECS;
    report(
        2,
        passed,
        &format!("{} ops incl. stmt_forward, {} checks, {failed} failed, ops with < 3 shapes: {thin:?}, {secs:.1}s", shapes.len(), checks.len()),
    );
    assert!(passed);
}

#[test]
fn criterion_3_identity() {
    assert!(summarize(3, &selftest::identity_suite()));
}

#[test]
fn criterion_4_memory_exactness() {
    assert!(summarize(4, &selftest::memory_suite()));
}

#[test]
fn criterion_5_metric_oracles() {
    assert!(summarize(5, &selftest::metric_suite()));
}

#[test]
fn criterion_6_dynamic_token_ablation() {
    let plan = AblationPlan::default();
    let start = Instant::now();
    let result = run_ablation(&plan, &mut |r| {
        let mut out = std::io::stdout().lock();
        writeln!(
            out,
            "  seed {} dynamic {:<5} PR20 {:.3} NPR {:.3} SR {:.3} ({:.0}s)",
            r.seed, r.dynamic_tokens, r.pr20, r.npr, r.sr, r.seconds
        )
        .unwrap();
    })
    .expect("ablation runs");
    let minutes = start.elapsed().as_secs_f64() / 60.0;
    let (full, ablated) = (result.mean_sr_full(), result.mean_sr_ablated());
    report(
        6,
        full > ablated && minutes <= 45.0,
        &format!(
            "mean SR over seeds {:?}: full {full:.4} vs without dynamic tokens {ablated:.4}, {minutes:.1} min",
            plan.seeds
        ),
    );
}

struct GateRun {
    template_ok: bool,
    cache_ok: bool,
    updates: usize,
    interval_closed: usize,
    score_closed: usize,
    scores: Vec<f64>,
}

fn gated_run(cfg: &Config, seq: &stmt_track::io::Sequence, model: &StmtModel) -> GateRun {
    let tracker = Tracker::new(model, cfg);
    let (rgb, tir) = &seq.frames[0];
    let mut state = tracker.init(rgb, tir, &seq.groundtruth[0]).unwrap();
    let template = state.template_bytes();
    let mut run = GateRun {
        template_ok: true,
        cache_ok: true,
        updates: 0,
        interval_closed: 0,
        score_closed: 0,
        scores: Vec::new(),
    };
    for (i, (rgb, tir)) in seq.frames.iter().enumerate().skip(1) {
        let before = state.cache.to_bytes();
        let last = state.cache.last_update_frame;
        let out = tracker.step(&mut state, rgb, tir).unwrap();
        let due = i - last >= cfg.update_interval;
        let gate = due && out.score > cfg.score_threshold;
        let changed = state.cache.to_bytes() != before;
        run.template_ok &= state.template_bytes() == template;
        run.cache_ok &= out.updated == gate && changed == gate;
        run.scores.push(out.score);
        match (due, gate) {
            (_, true) => run.updates += 1,
            (false, _) => run.interval_closed += 1,
            (true, false) => run.score_closed += 1,
        }
    }
    run
}

#[test]
fn criterion_7_template_fixed_and_cache_gated() {
    let spec = SynthSpec {
        length: 300,
        ..stmt_track::experiment::desk_spec()
    };
    let seq = render(&spec, 7).unwrap().sequence;
    let cfg = stmt_track::experiment::desk_config();
    let model = StmtModel::new(&cfg).unwrap();
    let first = gated_run(&cfg, &seq, &model);
    // A second pass with the threshold at the median score closes the gate on
    // confidence as well as on the interval.
    let mut sorted = first.scores.clone();
    sorted.sort_by(f64::total_cmp);
    let median = Config {
        score_threshold: sorted[sorted.len() / 2],
        ..cfg.clone()
    };
    let second = gated_run(&median, &seq, &model);
    let runs = [&first, &second];
    let passed = runs.iter().all(|r| r.template_ok && r.cache_ok && r.updates > 0)
        && runs.iter().map(|r| r.score_closed).sum::<usize>() > 0
        && runs.iter().map(|r| r.interval_closed).sum::<usize>() > 0;
    let line = |r: &GateRun| {
        format!(
            "template fixed {}, cache follows gate {}, {} updates, {} closed on interval, {} on score",
            r.template_ok, r.cache_ok, r.updates, r.interval_closed, r.score_closed
        )
    };
    report(
        7,
        passed,
        &format!("300 frames at threshold {}: {}; at median {:.3}: {}", cfg.score_threshold, line(&first), median.score_threshold, line(&second)),
    );
    assert!(passed);
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_stmt-track"))
}

fn run_ok(cmd: &mut Command) {
    let out = cmd.output().unwrap();
    assert!(out.status.success(), "{cmd:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect()
}

#[test]
fn criterion_8_byte_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let spec = SynthSpec {
        length: 12,
        width: 64,
        height: 64,
        target_min: 10.0,
        target_max: 16.0,
        occlusion_length: 3,
        ..SynthSpec::default()
    };
    std::fs::write(root.join("spec.txt"), spec.to_text()).unwrap();
    let data = root.join("data");
    run_ok(bin().args(["synth", "--seed", "5", "--count", "3", "--spec"]).arg(root.join("spec.txt")).arg("--out").arg(&data));
    let cfg = Config {
        steps: 100,
        checkpoint_every: 100,
        batch_size: 2,
        ..Config::tiny()
    };
    cfg.save(&root.join("cfg.txt")).unwrap();

    for run in ["a", "b"] {
        run_ok(bin().arg("train").arg("--config").arg(root.join("cfg.txt")).arg("--data").arg(&data).arg("--out").arg(root.join(format!("train_{run}"))));
    }
    let (ta, tb) = (files(&root.join("train_a")), files(&root.join("train_b")));
    let ckpt = ta.contains_key("checkpoint_000100.bin") && ta == tb;

    for (run, jobs) in [("a", "1"), ("b", "1"), ("c", "2")] {
        run_ok(
            bin()
                .arg("track")
                .arg("--config")
                .arg(root.join("cfg.txt"))
                .arg("--checkpoint")
                .arg(root.join("train_a/model.bin"))
                .arg("--seq")
                .arg(&data)
                .arg("--out")
                .arg(root.join(format!("track_{run}")))
                .args(["--jobs", jobs]),
        );
    }
    let ra = files(&root.join("track_a"));
    let results = ra.len() == 3 && ra == files(&root.join("track_b")) && ra == files(&root.join("track_c"));
    let passed = ckpt && results;
    report(
        8,
        passed,
        &format!("train checkpoints after 100 steps identical {ckpt}, track results identical across runs and --jobs {results}"),
    );
    assert!(passed);
}

#[test]
fn criterion_9_selftest_exit_code() {
    let out = bin().arg("selftest").output().unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout);
    let summary = stdout.lines().last().unwrap_or("").to_string();
    let criteria: Vec<u8> = (2..=5).filter(|c| stdout.contains(&format!("[{c}]"))).collect();
    let passed = out.status.code() == Some(0) && criteria == [2, 3, 4, 5];
    report(9, passed, &format!("exit {:?}, covers criteria {criteria:?}, {summary}", out.status.code()));
    assert!(passed);
}
