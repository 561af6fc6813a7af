//! Runs the built-in verification suite: finite-difference gradient checks,
//! STMT identity invariants, memory exactness and metric oracles.

fn main() {
    let checks = stmt_track::selftest::run_all();
    for c in &checks {
        println!("{} [{}] {}: {}", if c.passed { "ok  " } else { "FAIL" }, c.criterion, c.name, c.detail);
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    println!("{} checks, {failed} failed", checks.len());
    std::process::exit(i32::from(failed > 0));
}
