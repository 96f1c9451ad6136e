//! Command-line front end: generate benchmark data, train a stack, audit it,
//! or run the oracle suite. All four commands read the same JSON config and
//! accept a few overriding flags; everything else lives in the library.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use rgaudit::pipeline::{gen_data, load_config, run_audit, run_oracle_check, run_train, RunConfig};

#[derive(Parser)]
#[command(
    name = "rgaudit",
    about = "Coupling-flow stability audit for deep binary RBM stacks",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Override the root seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the command's sample count: dataset rows for gen-data and
    /// train, Monte Carlo chains for audit and oracle-check.
    #[arg(long)]
    samples: Option<usize>,
    /// Override the operator-basis degree cutoff.
    #[arg(long)]
    max_degree: Option<usize>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Draw the benchmark dataset and its task sidecar.
    GenData(Common),
    /// Train a stack on the stored dataset and save the model.
    Train(Common),
    /// Audit the stored model: flow, Fisher metric, attack sweep, verdict.
    Audit(Common),
    /// Compare every estimator against exact oracles; nonzero exit on any miss.
    OracleCheck(Common),
}

/// Which config field `--samples` should override.
enum SampleRole {
    DatasetRows,
    Chains,
}

fn load(common: &Common, role: SampleRole) -> Result<RunConfig, rgaudit::AuditError> {
    let mut cfg = load_config(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(samples) = common.samples {
        match role {
            SampleRole::DatasetRows => cfg.n_samples = samples,
            SampleRole::Chains => cfg.n_chains = samples,
        }
    }
    if let Some(deg) = common.max_degree {
        cfg.max_degree = deg;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<ExitCode, rgaudit::AuditError> {
    match cli.command {
        Command::GenData(common) => {
            let cfg = load(&common, SampleRole::DatasetRows)?;
            let summary = gen_data(&cfg)?;
            println!(
                "wrote {} rows to {} (task sidecar {})",
                summary.n_samples,
                summary.dataset.display(),
                summary.sidecar.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Train(common) => {
            let cfg = load(&common, SampleRole::DatasetRows)?;
            let summary = run_train(&cfg)?;
            println!(
                "trained on {} rows, accuracy {:.4}, model at {}",
                summary.n_samples,
                summary.train_accuracy,
                summary.model.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Audit(common) => {
            let cfg = load(&common, SampleRole::Chains)?;
            let outcome = run_audit(&cfg)?;
            println!(
                "{}",
                serde_json::json!({
                    "verdict": outcome.verdict,
                    "relevant_inputs": outcome.relevant_inputs,
                    "audited_inputs": outcome.audited_inputs,
                    "bundle": outcome
                        .bundle
                        .iter()
                        .map(|p| p.display().to_string())
                        .collect::<Vec<_>>(),
                })
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::OracleCheck(common) => {
            let cfg = load(&common, SampleRole::Chains)?;
            let summary = run_oracle_check(&cfg)?;
            for r in &summary.records {
                let detail = match (&r.max_abs_err, &r.error) {
                    (Some(err), _) => format!("max_abs_err {err:.3e} vs tol {:.1e}", r.tolerance),
                    (None, Some(msg)) => format!("error: {msg}"),
                    (None, None) => String::from("no result"),
                };
                println!("{} {} ({detail})", if r.pass { "PASS" } else { "FAIL" }, r.op);
            }
            println!(
                "summary written to {} ({})",
                cfg.oracle_path().display(),
                if summary.all_pass { "all pass" } else { "FAILURES" }
            );
            Ok(if summary.all_pass {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
