//! Renders one synthetic RGB-thermal sequence to disk and summarizes it.
//!
//! `cargo run --release --example synth [out_dir] [seed]`

use std::path::PathBuf;

use stmt_track::io::synth::{render, SynthSpec};

fn main() -> stmt_track::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "synth_seq".into()));
    let seed: u64 = args.next().map(|s| s.parse().expect("seed")).unwrap_or(1);
    let spec = SynthSpec::default();
    let synth = render(&spec, seed)?;
    let dir = synth.sequence.write(&out)?;
    let gt = &synth.sequence.groundtruth;
    let occluded: Vec<usize> = synth.occluded.iter().enumerate().filter(|(_, o)| **o).map(|(i, _)| i + 1).collect();
    println!("{} frames of {}x{} written to {}", dir.len(), spec.width, spec.height, out.display());
    println!("first box {:?}", gt[0]);
    println!("last box  {:?}", gt[gt.len() - 1]);
    println!("occluded frames: {occluded:?}");
    Ok(())
}
