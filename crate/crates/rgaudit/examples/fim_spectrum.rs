//! Assemble the input-space Fisher information matrix of a small random
//! stack by the chain rule (first-layer Jacobian pushed through exact
//! per-transition stability matrices), then verify it against the direct
//! divergence curvature and walk its eigenvalue ladder: a few stiff
//! directions over a sloppy tail.
//!
//! Run with: cargo run --release --example fim_spectrum

use nalgebra::DVector;
use rgaudit::exact::{exact_layer_distribution, fim_fd};
use rgaudit::fim::{
    assemble_fim, chain_jacobian, evaluate_attack, first_layer_jacobian, sloppiness_ratios,
    top_mode, AttackOptions, JacobianMethod,
};
use rgaudit::mcrg::{solve_stability, ExpectationSet, StabilityOptions};
use rgaudit::operators::OperatorBasis;
use rgaudit::rbm::InputPoint;
use rgaudit::train::init_stack;

fn main() -> rgaudit::Result<()> {
    let stack = init_stack(&[4, 3, 3], None, 42, 0.9)?;
    let x = InputPoint::new(vec![0.7, 0.3, 0.6, 0.4], None)?;

    // Full bases make the chained product exactly the coupling Jacobian.
    let mut basis = OperatorBasis::full(stack.layer(0).n_out())?;
    let first = first_layer_jacobian(stack.layer(0), &x, &basis, JacobianMethod::Analytic)?;
    let opts = StabilityOptions {
        regularization: 0.0,
        bootstrap_resamples: 0,
        ..StabilityOptions::default()
    };
    let mut transitions = Vec::new();
    for k in 1..stack.depth() {
        let out_basis = OperatorBasis::full(stack.layer(k).n_out())?;
        let parent = exact_layer_distribution(&stack, &x, k, 14)?;
        let child =
            ExpectationSet::from_exact_transition(&parent, stack.layer(k), &basis, &out_basis, 14)?;
        let parent_set = ExpectationSet::from_exact_layer(&parent, &basis)?;
        transitions.push(solve_stability(&parent_set, &child, &opts)?);
        basis = out_basis;
    }
    let refs: Vec<_> = transitions.iter().collect();
    let chain = chain_jacobian(&first, &refs)?;

    let deepest = exact_layer_distribution(&stack, &x, stack.depth(), 14)?;
    let deep_set = ExpectationSet::from_exact_layer(&deepest, &basis)?;
    let fim = assemble_fim(&chain, &deep_set)?;

    let fd = fim_fd(&stack, &x, 1e-3, 1e-12, 14)?;
    let rel = (&fim.matrix - &fd.matrix).norm() / fd.matrix.norm();
    println!("chain-rule FIM vs divergence curvature: relative error {rel:.2e}");

    let spectrum = fim.spectrum()?;
    println!("eigenvalue ladder:");
    for (i, v) in spectrum.values.iter().enumerate() {
        println!("  {i}: {v:.6e}");
    }
    println!("consecutive ratios: {:?}", sloppiness_ratios(&spectrum.values));

    let top = top_mode(&fim)?;
    println!(
        "stiffest direction: {:?} (eigenvalue {:.4e})",
        top.vector
            .iter()
            .map(|v| format!("{v:+.3}"))
            .collect::<Vec<_>>(),
        top.eigenvalue
    );

    let attack_opts = AttackOptions {
        enum_limit: 14,
        n_classes: None,
        seed: 5,
        ..AttackOptions::default()
    };
    let probe = DVector::from_column_slice(&top.vector);
    let report = evaluate_attack(&stack, &x, &fim, &probe, &[1e-2, 1e-3], &attack_opts)?;
    println!("divergence along the stiffest direction (exact mode):");
    for rec in report.records.iter().filter(|r| r.direction == "probe") {
        println!(
            "  eps {:.0e}: KL {:.4e}, quadratic prediction {:.4e}, ratio {:.4}",
            rec.epsilon,
            rec.kl,
            rec.quadratic_prediction,
            rec.kl / rec.quadratic_prediction
        );
    }
    Ok(())
}
