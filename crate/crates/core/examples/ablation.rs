//! Desk-scale ablation: trains the full model and a copy without dynamic
//! tokens for each seed, then compares mean success rate on held-out
//! synthetic sequences.
//!
//! Run with `cargo run --release --example ablation [seeds] [steps]`.

use std::time::Instant;

use stmt_track::experiment::AblationPlan;

fn main() -> stmt_track::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mut plan = AblationPlan::default();
    if let Some(n) = args.first() {
        let n: u64 = n.parse().expect("seed count");
        plan.seeds = (0..n).collect();
    }
    if let Some(steps) = args.get(1) {
        plan.model.steps = steps.parse().expect("step count");
    }
    println!(
        "{} train / {} test sequences, {} steps x batch {}, seeds {:?}",
        plan.train_sequences, plan.test_sequences, plan.model.steps, plan.model.batch_size, plan.seeds
    );
    let start = Instant::now();
    let result = stmt_track::experiment::run_ablation(&plan, &mut |r| {
        println!(
            "seed {} dynamic {:<5}  PR20 {:.3}  NPR {:.3}  SR {:.3}  loss {:.4}  ({:.0}s)",
            r.seed, r.dynamic_tokens, r.pr20, r.npr, r.sr, r.final_loss, r.seconds
        );
    })?;
    println!(
        "mean SR: full {:.4}, without dynamic tokens {:.4}  [{:.1} min]",
        result.mean_sr_full(),
        result.mean_sr_ablated(),
        start.elapsed().as_secs_f64() / 60.0
    );
    Ok(())
}
