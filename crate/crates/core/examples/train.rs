//! Trains a small model on synthetic sequences and writes checkpoints plus a
//! loss log.
//!
//! `cargo run --release --example train [out_dir] [steps]`

use std::path::PathBuf;

use stmt_track::config::Config;
use stmt_track::io::synth::{render_dataset, SynthSpec};
use stmt_track::model::StmtModel;
use stmt_track::training::train;

fn main() -> stmt_track::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "train_run".into()));
    let steps: usize = args.next().map(|s| s.parse().expect("steps")).unwrap_or(60);
    let cfg = Config {
        template_size: 32,
        search_size: 64,
        embed_dim: 32,
        depth: 4,
        heads: 4,
        head_hidden: 32,
        insert_layers: vec![2, 4],
        tf_layers: vec![4],
        backbone_lr_factor: 1.0,
        head_lr_factor: 1.0,
        lr: 5e-4,
        steps,
        checkpoint_every: steps / 2,
        ..Config::tiny()
    };
    let spec = SynthSpec {
        length: 24,
        width: 96,
        height: 96,
        target_min: 10.0,
        target_max: 18.0,
        ..SynthSpec::default()
    };
    let data = render_dataset(&spec, 11, 16)?;
    let mut model = StmtModel::new(&cfg)?;
    let log = train(&mut model, &cfg, &data, Some(&out), &mut |r| {
        if r.step % 10 == 0 {
            println!("step {:>4}  loss {:.4}  lr {:.1e}", r.step, r.loss, r.lr);
        }
    })?;
    cfg.save(&out.join("config.txt"))?;
    println!("{} steps, final loss {:.4}; checkpoints in {}", log.len(), log.last().map_or(f64::NAN, |r| r.loss), out.display());
    Ok(())
}
