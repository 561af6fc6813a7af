//! Command-line surface: `track`, `train`, `eval`, `synth` and `selftest`.
//!
//! [`run`] returns the process exit code: 0 on success, 1 on a runtime
//! failure and 2 on a usage error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, report_csv, report_text, SequenceReport};
use crate::io::sequence::{read_boxes, write_boxes};
use crate::io::synth::{dataset_seed, render, SynthSpec};
use crate::io::{list_sequences, SequenceDir};
use crate::model::StmtModel;
use crate::selftest;
use crate::tensor::checkpoint::{load_params, write_atomic};
use crate::tracker::track_frames;
use crate::training::train;

#[derive(Debug, Parser)]
#[command(name = "stmt-track", version, about = "RGB-thermal transformer tracker with spatio-temporal multimodal tokens")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Track one sequence directory, or every sequence under a root.
    Track(TrackArgs),
    /// Train a model on the sequences under a root.
    Train(TrainArgs),
    /// Score results against ground truth.
    Eval(EvalArgs),
    /// Render synthetic RGB-thermal sequences.
    Synth(SynthArgs),
    /// Run gradient checks and the invariant suite.
    Selftest,
}

#[derive(Debug, Args)]
struct TrackArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seq: PathBuf,
    /// Results file for a single sequence, or a directory of `<name>.txt` files.
    #[arg(long)]
    out: PathBuf,
    /// Trained weights; without it the model is initialized from the config seed.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Results file, or a directory of `<name>.txt` files.
    #[arg(long)]
    results: PathBuf,
    /// Sequence directory, or a root of sequence directories.
    #[arg(long)]
    gt: PathBuf,
    /// Where to write the comma-separated report; printed to stdout otherwise.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Spec file of `key = value` lines; defaults apply without it.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Number of sequences; more than one writes `<out>/<name>` directories.
    #[arg(long, default_value_t = 1)]
    count: usize,
}

/// Parses `argv` (program name first) and runs the subcommand.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let outcome = match cli.command {
        Command::Track(a) => cmd_track(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Synth(a) => cmd_synth(&a),
        Command::Selftest => cmd_selftest(),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// Maps `f` over `items` on up to `jobs` threads, keeping the input order.
fn parallel_map<T: Sync, U: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> Result<U> + Sync) -> Result<Vec<U>> {
    let jobs = jobs.clamp(1, items.len().max(1));
    if jobs == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(jobs);
    let parts: Vec<Result<Vec<U>>> = std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(|| c.iter().map(&f).collect::<Result<Vec<U>>>()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker thread panicked")).collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

fn is_sequence(path: &Path) -> bool {
    path.join("groundtruth.txt").is_file()
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path.display().to_string(), e))
}

fn results_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.txt"))
}

fn cmd_track(a: &TrackArgs) -> Result<i32> {
    let cfg = Config::load(&a.config)?;
    let mut model = StmtModel::new(&cfg)?;
    match &a.checkpoint {
        Some(p) => load_params(p, &mut model)?,
        None => eprintln!("warning: no --checkpoint given, tracking with untrained weights"),
    }
    let single = is_sequence(&a.seq);
    let dirs = list_sequences(&a.seq)?;
    if dirs.is_empty() {
        return Err(Error::contract(format!("no sequences under {}", a.seq.display())));
    }
    if !single {
        create_dir(&a.out)?;
    }
    parallel_map(&dirs, a.jobs, |dir| {
        let seq = SequenceDir::open(dir)?;
        let boxes = track_frames(&model, &cfg, &seq.groundtruth[0], seq.frames())?;
        let out = if single { a.out.clone() } else { results_path(&a.out, &seq.name()) };
        write_boxes(&out, &boxes)?;
        eprintln!("{}: {} frames -> {}", seq.name(), boxes.len(), out.display());
        Ok(())
    })?;
    Ok(0)
}

fn cmd_train(a: &TrainArgs) -> Result<i32> {
    let cfg = Config::load(&a.config)?;
    let data = list_sequences(&a.data)?
        .iter()
        .map(|p| SequenceDir::open(p)?.load())
        .collect::<Result<Vec<_>>>()?;
    if data.is_empty() {
        return Err(Error::contract(format!("no sequences under {}", a.data.display())));
    }
    let mut model = StmtModel::new(&cfg)?;
    let every = (cfg.steps / 20).max(1);
    let log = train(&mut model, &cfg, &data, Some(&a.out), &mut |r| {
        if r.step % every == 0 || r.step == cfg.steps {
            eprintln!("step {:>6}  loss {:.5}  lr {:.2e}", r.step, r.loss, r.lr);
        }
    })?;
    cfg.save(&a.out.join("config.txt"))?;
    eprintln!("trained {} steps on {} sequences -> {}", log.len(), data.len(), a.out.display());
    Ok(0)
}

fn cmd_eval(a: &EvalArgs) -> Result<i32> {
    let single = is_sequence(&a.gt);
    let dirs = list_sequences(&a.gt)?;
    if dirs.is_empty() {
        return Err(Error::contract(format!("no sequences under {}", a.gt.display())));
    }
    let rows = parallel_map(&dirs, a.jobs, |dir| {
        let gt = read_boxes(&dir.join("groundtruth.txt"))?;
        let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let res_path = if single { a.results.clone() } else { results_path(&a.results, &name) };
        let pred = read_boxes(&res_path)?;
        if pred.len() != gt.len() {
            return Err(Error::contract(format!(
                "{}: {} result boxes for {} ground-truth boxes",
                res_path.display(),
                pred.len(),
                gt.len()
            )));
        }
        Ok(SequenceReport {
            n_frames: gt.len(),
            result: evaluate(&pred, &gt)?,
            name,
        })
    })?;
    let csv = report_csv(&rows);
    match &a.out {
        Some(p) => {
            write_atomic(p, csv.as_bytes())?;
            print!("{}", report_text(&rows));
        }
        None => print!("{csv}"),
    }
    Ok(0)
}

fn cmd_synth(a: &SynthArgs) -> Result<i32> {
    let spec = match &a.spec {
        Some(p) => SynthSpec::load(p)?,
        None => SynthSpec::default(),
    };
    spec.validate()?;
    if a.count == 1 {
        render(&spec, a.seed)?.sequence.write(&a.out)?;
        eprintln!("wrote {} frames to {}", spec.length, a.out.display());
        return Ok(0);
    }
    create_dir(&a.out)?;
    for i in 0..a.count {
        let seq = render(&spec, dataset_seed(a.seed, i))?.sequence;
        seq.write(&a.out.join(&seq.name))?;
    }
    eprintln!("wrote {} sequences to {}", a.count, a.out.display());
    Ok(0)
}

fn cmd_selftest() -> Result<i32> {
    let checks = selftest::run_all();
    for c in &checks {
        println!("{} [{}] {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.criterion, c.name, c.detail);
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    println!("{} checks, {} failed", checks.len(), failed);
    Ok(if failed == 0 { 0 } else { 1 })
}
