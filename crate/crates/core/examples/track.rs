//! Tracks a synthetic sequence frame by frame and prints box, confidence and
//! whether the dynamic-token cache was refreshed.
//!
//! `cargo run --release --example track [checkpoint config]`
//! Without arguments the model is untrained, which shows the mechanics only.

use std::path::Path;

use stmt_track::config::Config;
use stmt_track::evaluation::{evaluate, iou};
use stmt_track::io::synth::{render, SynthSpec};
use stmt_track::model::StmtModel;
use stmt_track::tensor::checkpoint::load_params;
use stmt_track::tracker::Tracker;

fn main() -> stmt_track::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let (cfg, model) = match args.as_slice() {
        [ckpt, cfg] => {
            let cfg = Config::load(Path::new(cfg))?;
            let mut model = StmtModel::new(&cfg)?;
            load_params(Path::new(ckpt), &mut model)?;
            (cfg, model)
        }
        _ => {
            let cfg = stmt_track::experiment::desk_config();
            let model = StmtModel::new(&cfg)?;
            (cfg, model)
        }
    };
    let spec = SynthSpec {
        length: 30,
        width: 96,
        height: 96,
        target_min: 10.0,
        target_max: 18.0,
        ..SynthSpec::default()
    };
    let seq = render(&spec, 3)?.sequence;
    let tracker = Tracker::new(&model, &cfg);
    let (rgb, tir) = &seq.frames[0];
    let mut state = tracker.init(rgb, tir, &seq.groundtruth[0])?;
    let mut boxes = vec![seq.groundtruth[0]];
    for (i, (rgb, tir)) in seq.frames.iter().enumerate().skip(1) {
        let out = tracker.step(&mut state, rgb, tir)?;
        println!(
            "frame {i:>3}  box ({:6.1},{:6.1},{:5.1},{:5.1})  score {:.3}  iou {:.3}{}",
            out.bbox.x,
            out.bbox.y,
            out.bbox.w,
            out.bbox.h,
            out.score,
            iou(&out.bbox, &seq.groundtruth[i]),
            if out.updated { "  cache updated" } else { "" }
        );
        boxes.push(out.bbox);
    }
    let r = evaluate(&boxes, &seq.groundtruth)?;
    println!("PR20 {:.3}  NPR {:.3}  SR {:.3}", r.pr20, r.npr, r.sr);
    Ok(())
}
