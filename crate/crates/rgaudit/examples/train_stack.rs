//! Generate the two-prototype benchmark, train a stack on it, and measure
//! how much better the trained model carries the class posterior than an
//! untrained one with the same shape.
//!
//! Run with: cargo run --release --example train_stack

use rgaudit::pipeline::{
    gen_data, load_dataset, load_model, mean_posterior_divergence, run_train, RunConfig,
};
use rgaudit::train::init_stack;

fn main() -> rgaudit::Result<()> {
    let dir = tempfile::tempdir().expect("temp dir");
    let cfg = RunConfig::example(dir.path());

    let data_summary = gen_data(&cfg)?;
    println!(
        "dataset: {} rows at {}",
        data_summary.n_samples,
        data_summary.dataset.display()
    );

    let train_summary = run_train(&cfg)?;
    println!(
        "trained {} -> accuracy {:.4}",
        cfg.dims()
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join(" -> "),
        train_summary.train_accuracy
    );

    let trained = load_model(cfg.model_path())?;
    let untrained = init_stack(&cfg.dims(), Some(cfg.task.n_classes), cfg.seed, 0.1)?;
    let data = load_dataset(cfg.dataset_path())?;
    let probe = &data[..200.min(data.len())];

    let kl_trained = mean_posterior_divergence(&trained, &cfg.task, probe, cfg.enum_limit)?;
    let kl_untrained = mean_posterior_divergence(&untrained, &cfg.task, probe, cfg.enum_limit)?;
    println!("mean KL(task posterior || model readout), {} inputs:", probe.len());
    println!("  untrained: {kl_untrained:.6}");
    println!("  trained:   {kl_trained:.6}");
    println!("  ratio:     {:.1}x", kl_untrained / kl_trained.max(1e-300));
    Ok(())
}
