//! Run the oracle suite: every sampled or chained estimator in the library
//! compared against exact enumeration or finite differences on a small
//! random stack, with one pass/fail record per comparison.
//!
//! Run with: cargo run --release --example exact_oracles

use rgaudit::pipeline::{run_oracle_check, RunConfig};

fn main() -> rgaudit::Result<()> {
    let dir = tempfile::tempdir().expect("temp dir");
    let mut cfg = RunConfig::example(dir.path());
    cfg.layers = vec![3, 3];
    cfg.n_chains = 400_000;

    let summary = run_oracle_check(&cfg)?;
    for r in &summary.records {
        match (&r.max_abs_err, &r.error) {
            (Some(err), _) => println!(
                "{} {:<35} error {:.3e} (tolerance {:.1e})",
                if r.pass { "PASS" } else { "FAIL" },
                r.op,
                err,
                r.tolerance
            ),
            (None, Some(msg)) => println!("FAIL {:<35} {msg}", r.op),
            (None, None) => println!("FAIL {:<35} no result", r.op),
        }
    }
    println!(
        "{} of {} comparisons passed; summary at {}",
        summary.records.iter().filter(|r| r.pass).count(),
        summary.records.len(),
        cfg.oracle_path().display()
    );
    Ok(())
}
