//! Fisher information over the input space, assembled by the chain rule.
//!
//! The deepest layer's distribution is an exponential family in its
//! couplings, so its Fisher metric in coupling coordinates is the operator
//! covariance `C`. Pulling that metric back through the coupling flow gives
//! the input-space matrix `F = J^T C J`, where `J` chains the first kernel's
//! input-to-coupling Jacobian with the per-transition stability matrices
//! evaluated along the trajectory of the probed input. Large eigenvalues of
//! `F` mark stiff input directions: candidate adversarial perturbations.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{AuditError, Result};
use crate::exact::{
    exact_all_layers, exact_kl, ExactDistribution, DEFAULT_ENUM_LIMIT, DEFAULT_KL_FLOOR,
};
use crate::linalg::{ridge_solve, symmetric_spectrum, SymSpectrum};
use crate::mcrg::{ExpectationSet, StabilityEstimate, DEFAULT_REGULARIZATION};
use crate::operators::OperatorBasis;
use crate::rbm::{derive_seed, propagate, DeepStack, InputPoint, RbmLayer};

/// Chain count for the sampled fallback of the attack evaluator.
pub const DEFAULT_ATTACK_SAMPLES: usize = 20_000;

/// Bootstrap resamples behind a sampled divergence error bar.
pub const DEFAULT_ATTACK_RESAMPLES: usize = 200;

/// Largest eigenvalue at or below this scale means the metric carries no
/// usable curvature: there is no stiff direction to attack along.
pub const STIFF_FLOOR: f64 = 1e-12;

/// How far a probe direction may deviate from unit length.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-8;

/// How many leading input indices the flip list reports.
pub const DEFAULT_TOP_BITS: usize = 5;

const STAGE_ATTACK: u64 = 0x4154_434b; // "ATCK"
const STAGE_ATTACK_BOOT: u64 = 0x4142_4f54; // "ABOT"

/// How the first kernel's input-to-coupling Jacobian is obtained.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum JacobianMethod {
    /// Closed form. The first layer factorizes over nodes given the input,
    /// so each field coupling is half the (negated) pre-activation and every
    /// higher-degree coupling vanishes identically.
    Analytic,
    /// The same moment-matching linear system used for deeper transitions,
    /// built from the factorized layer's closed-form moments. Exists to
    /// cross-check the analytic route and to exercise the solver.
    LinearSolve { regularization: f64 },
}

impl JacobianMethod {
    /// Parse a config tag. Accepts `analytic` and `linear-solve`.
    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "analytic" => Ok(JacobianMethod::Analytic),
            "linear-solve" => Ok(JacobianMethod::LinearSolve {
                regularization: DEFAULT_REGULARIZATION,
            }),
            other => Err(AuditError::InvalidArgument {
                what: "jacobian method tag",
                reason: format!("unknown tag {other:?}; expected \"analytic\" or \"linear-solve\""),
            }),
        }
    }
}

/// `d g_a / d x_i` for the first hidden layer's couplings.
#[derive(Clone, Debug)]
pub struct FirstLayerJacobian {
    /// Basis indexing the rows.
    pub basis: OperatorBasis,
    /// Rows follow `basis`, columns the input coordinates.
    pub matrix: DMatrix<f64>,
    pub method: JacobianMethod,
}

/// Product of `2 p_j - 1` over the nodes in `mask`.
fn spin_mean_product(means: &DVector<f64>, mask: u64) -> f64 {
    let mut rest = mask;
    let mut prod = 1.0;
    while rest != 0 {
        let j = rest.trailing_zeros() as usize;
        prod *= 2.0 * means[j] - 1.0;
        rest &= rest - 1;
    }
    prod
}

/// Jacobian of the first layer's couplings with respect to the input
/// coordinates, at the operating point `x`. Given the input the layer
/// factorizes, so both methods work from closed-form node probabilities.
pub fn first_layer_jacobian(
    layer: &RbmLayer,
    x: &InputPoint,
    basis: &OperatorBasis,
    method: JacobianMethod,
) -> Result<FirstLayerJacobian> {
    if basis.dimension() != layer.n_out() {
        return Err(AuditError::DimensionMismatch {
            context: "first-layer jacobian basis",
            expected: layer.n_out(),
            got: basis.dimension(),
        });
    }
    let p = layer.hidden_given_visible(&x.to_vector())?;
    let w = layer.weights();
    let n_in = layer.n_in();
    let matrix = match method {
        JacobianMethod::Analytic => {
            // g_{j} = -(W x + a)_j / 2 for single nodes; the factorized
            // distribution carries no higher-degree couplings at any x, so
            // those rows are identically zero.
            let mut j = DMatrix::zeros(basis.len(), n_in);
            for (r, op) in basis.operators().iter().enumerate() {
                if op.degree() == 1 {
                    let node = op.mask().trailing_zeros() as usize;
                    for i in 0..n_in {
                        j[(r, i)] = -0.5 * w[(node, i)];
                    }
                }
            }
            j
        }
        JacobianMethod::LinearSolve { regularization } => {
            // A T = B with A the (negated) operator covariance and B the
            // direct derivative of the operator means in x; both sides in
            // closed form because the conditional measure is a product.
            let dim = basis.len();
            let mut a = DMatrix::zeros(dim, dim);
            for (r, og) in basis.operators().iter().enumerate() {
                for (c, oa) in basis.operators().iter().enumerate() {
                    let joint = spin_mean_product(&p, og.mask() ^ oa.mask());
                    a[(r, c)] = spin_mean_product(&p, og.mask())
                        * spin_mean_product(&p, oa.mask())
                        - joint;
                }
            }
            let mut b = DMatrix::zeros(dim, n_in);
            for (r, og) in basis.operators().iter().enumerate() {
                let mut rest = og.mask();
                while rest != 0 {
                    let node = rest.trailing_zeros() as usize;
                    rest &= rest - 1;
                    let partner = spin_mean_product(&p, og.mask() & !(1u64 << node));
                    let gain = 2.0 * p[node] * (1.0 - p[node]) * partner;
                    for i in 0..n_in {
                        b[(r, i)] += gain * w[(node, i)];
                    }
                }
            }
            ridge_solve(&a, &b, regularization)?.solution
        }
    };
    Ok(FirstLayerJacobian {
        basis: basis.clone(),
        matrix,
        method,
    })
}

/// Input-to-deep-coupling Jacobian: stability matrices folded onto the first
/// layer's Jacobian, deepest last.
#[derive(Clone, Debug)]
pub struct ChainJacobian {
    /// Basis of the deepest layer reached.
    pub basis: OperatorBasis,
    /// One-based index of that layer.
    pub layer_index: usize,
    /// Rows follow `basis`, columns the input coordinates.
    pub matrix: DMatrix<f64>,
}

/// Compose the first-layer Jacobian with consecutive transition estimates.
/// An empty transition list returns the first-layer Jacobian unchanged.
pub fn chain_jacobian(
    first: &FirstLayerJacobian,
    transitions: &[&StabilityEstimate],
) -> Result<ChainJacobian> {
    let mut basis = &first.basis;
    let mut layer_index = 1;
    let mut matrix = first.matrix.clone();
    for step in transitions {
        if step.from_layer != layer_index {
            return Err(AuditError::InvalidArgument {
                what: "transition chain",
                reason: format!(
                    "expected a transition out of layer {layer_index}, got {} -> {}",
                    step.from_layer, step.to_layer
                ),
            });
        }
        if step.in_basis != *basis {
            return Err(AuditError::InvalidArgument {
                what: "transition chain",
                reason: format!(
                    "transition {} -> {} is indexed on a different incoming basis",
                    step.from_layer, step.to_layer
                ),
            });
        }
        matrix = &step.t * matrix;
        basis = &step.out_basis;
        layer_index = step.to_layer;
    }
    Ok(ChainJacobian {
        basis: basis.clone(),
        layer_index,
        matrix,
    })
}

/// Fisher information matrix over the input coordinates.
#[derive(Clone, Debug)]
pub struct FimMatrix {
    /// Symmetrized `J^T C J`.
    pub matrix: DMatrix<f64>,
    /// Layer whose operator covariance supplied the metric.
    pub layer_index: usize,
    /// Basis the covariance was taken over.
    pub basis: OperatorBasis,
}

impl FimMatrix {
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// Eigenvalues (descending) and matching orthonormal directions.
    pub fn spectrum(&self) -> Result<SymSpectrum> {
        symmetric_spectrum(&self.matrix)
    }
}

/// Pull the deep layer's coupling-space metric back to the input: the
/// covariance of the basis operators under the deep distribution, conjugated
/// by the chained Jacobian. The product is symmetrized to shed the last bits
/// of floating-point skew.
pub fn assemble_fim(chain: &ChainJacobian, output: &ExpectationSet) -> Result<FimMatrix> {
    if output.basis != chain.basis {
        return Err(AuditError::InvalidArgument {
            what: "fisher assembly",
            reason: format!(
                "deep moments follow a different basis than the chained jacobian at layer {}",
                chain.layer_index
            ),
        });
    }
    if output.layer_index != chain.layer_index {
        return Err(AuditError::InvalidArgument {
            what: "fisher assembly",
            reason: format!(
                "moments describe layer {} but the jacobian reaches layer {}",
                output.layer_index, chain.layer_index
            ),
        });
    }
    let c = &output.second - &output.first * output.first.transpose();
    let f = chain.matrix.transpose() * c * &chain.matrix;
    let sym = (&f + f.transpose()) * 0.5;
    Ok(FimMatrix {
        matrix: sym,
        layer_index: output.layer_index,
        basis: chain.basis.clone(),
    })
}

/// The stiffest input direction of a Fisher matrix.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StiffMode {
    pub eigenvalue: f64,
    /// Unit vector; the largest-magnitude component is made positive.
    pub vector: Vec<f64>,
    /// The whole spectrum sits at numerical zero: no stiff direction.
    pub degenerate: bool,
}

/// Extract the top eigenpair. A metric whose largest eigenvalue is at
/// numerical zero is flagged degenerate; its vector is still returned but
/// carries no directional information.
pub fn top_mode(fim: &FimMatrix) -> Result<StiffMode> {
    let spec = fim.spectrum()?;
    let scale = fim.matrix.amax().max(1.0);
    let top = spec.values[0];
    Ok(StiffMode {
        eigenvalue: top,
        vector: spec.vectors[0].iter().copied().collect(),
        degenerate: top <= STIFF_FLOOR * scale,
    })
}

/// Consecutive eigenvalue decay ratios `lambda_{i+1} / lambda_i`, the usual
/// sloppiness diagnostic. Eigenvalues at or below zero are treated as zero
/// and yield a zero ratio, keeping the list finite.
pub fn sloppiness_ratios(values: &[f64]) -> Vec<f64> {
    values
        .windows(2)
        .map(|w| {
            if w[0] > 0.0 {
                (w[1].max(0.0)) / w[0]
            } else {
                0.0
            }
        })
        .collect()
}

/// Knobs for [`evaluate_attack`].
#[derive(Clone, Debug)]
pub struct AttackOptions {
    /// Largest layer width enumerated exactly; wider stacks fall back to
    /// sampled class readout.
    pub enum_limit: usize,
    /// Chains per input in the sampled fallback.
    pub n_samples: usize,
    /// Class count override; defaults to the stack's metadata.
    pub n_classes: Option<usize>,
    /// Bootstrap resamples behind sampled error bars.
    pub bootstrap_resamples: usize,
    pub seed: u64,
    pub kl_floor: f64,
    /// Length of the reported flip list.
    pub top_bits: usize,
}

impl Default for AttackOptions {
    fn default() -> Self {
        AttackOptions {
            enum_limit: DEFAULT_ENUM_LIMIT,
            n_samples: DEFAULT_ATTACK_SAMPLES,
            n_classes: None,
            bootstrap_resamples: DEFAULT_ATTACK_RESAMPLES,
            seed: 0,
            kl_floor: DEFAULT_KL_FLOOR,
            top_bits: DEFAULT_TOP_BITS,
        }
    }
}

/// One perturbed evaluation of the stack.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PerturbationRecord {
    /// `probe` for the supplied direction, `control` for the sloppiest one.
    pub direction: String,
    pub epsilon: f64,
    /// Perturbed input after clamping to the unit cube.
    pub x_prime: Vec<f64>,
    /// Divergence between the unperturbed and perturbed deep distributions:
    /// exact over configurations when enumerable, otherwise a smoothed
    /// plug-in estimate over class readouts.
    pub kl: f64,
    /// Bootstrap error bar; only present in sampled mode.
    pub kl_stderr: Option<f64>,
    /// Second-order prediction `eps^2 v^T F v / 2`.
    pub quadratic_prediction: f64,
    pub class_before: Option<usize>,
    pub class_after: Option<usize>,
    pub flipped: Option<bool>,
}

/// Attack evaluation bundle: the spectrum context plus one record per
/// direction and step size.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdversarialReport {
    pub input: Vec<f64>,
    pub label: Option<usize>,
    /// `exact` or `sampled`.
    pub kl_mode: String,
    pub n_samples: Option<usize>,
    /// Fisher eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
    /// Consecutive eigenvalue decay ratios.
    pub sloppiness: Vec<f64>,
    pub no_stiff_direction: bool,
    /// The probed unit direction.
    pub probe_vector: Vec<f64>,
    /// Sloppiest unit direction, probed as the control.
    pub control_vector: Vec<f64>,
    /// Input indices ranked by probe weight `|v_i|`, largest first.
    pub bits_to_flip: Vec<usize>,
    pub records: Vec<PerturbationRecord>,
}

/// Mean activity per class block of the deepest layer, normalized into a
/// distribution over classes.
pub fn class_posterior_from_marginals(
    marginals: &DVector<f64>,
    n_classes: usize,
) -> Result<Vec<f64>> {
    let n = marginals.len();
    if n_classes == 0 || n % n_classes != 0 {
        return Err(AuditError::InvalidArgument {
            what: "class blocks",
            reason: format!("{n} output units cannot split into {n_classes} equal blocks"),
        });
    }
    let block = n / n_classes;
    let mut masses = vec![0.0; n_classes];
    for (j, m) in marginals.iter().enumerate() {
        masses[j / block] += m / block as f64;
    }
    let total: f64 = masses.iter().sum();
    if total <= 0.0 {
        return Err(AuditError::InvalidDistribution {
            reason: "all class blocks have zero mean activity".into(),
        });
    }
    for m in &mut masses {
        *m /= total;
    }
    Ok(masses)
}

/// Exact class posterior read off the deepest layer given the input.
pub fn exact_class_posterior(
    stack: &DeepStack,
    x: &InputPoint,
    n_classes: usize,
    limit: usize,
) -> Result<Vec<f64>> {
    let layers = exact_all_layers(stack, x, limit)?;
    let deepest = layers.last().expect("stack depth is validated positive");
    class_posterior_from_marginals(&deepest.unit_marginals(), n_classes)
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax_class(masses: &[f64]) -> usize {
    let mut best = 0;
    for (i, &m) in masses.iter().enumerate().skip(1) {
        if m > masses[best] {
            best = i;
        }
    }
    best
}

fn clamp_unit(x: f64) -> f64 {
    x.clamp(0.0, 1.0)
}

/// Per-class counts of sampled deep configurations. Each sample votes for
/// the class block with the highest mean bit; ties go to the lowest class.
fn sampled_class_counts(
    stack: &DeepStack,
    x: &InputPoint,
    n_classes: usize,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<u64>> {
    let ensembles = propagate(stack, x, n_samples, seed)?;
    let deepest = ensembles.last().expect("stack depth is validated positive");
    let n_out = stack.n_out();
    let block = n_out / n_classes;
    let mut counts = vec![0u64; n_classes];
    for &bits in &deepest.samples {
        let mut best = 0usize;
        let mut best_pop = (bits & ((1u64 << block) - 1)).count_ones();
        for y in 1..n_classes {
            let mask = ((1u64 << block) - 1) << (y * block);
            let pop = (bits & mask).count_ones();
            if pop > best_pop {
                best_pop = pop;
                best = y;
            }
        }
        counts[best] += 1;
    }
    Ok(counts)
}

/// Additive-smoothing plug-in distribution: half a count per class.
fn smoothed(counts: &[u64], total: u64) -> Vec<f64> {
    let denom = total as f64 + 0.5 * counts.len() as f64;
    counts
        .iter()
        .map(|&c| (c as f64 + 0.5) / denom)
        .collect()
}

/// Multinomial redraw of `counts` using sequential binomials.
fn resample_counts(counts: &[u64], rng: &mut impl rand::Rng) -> Vec<u64> {
    use rand_distr::{Binomial, Distribution};
    let total: u64 = counts.iter().sum();
    let mut out = vec![0u64; counts.len()];
    let mut remaining = total;
    let mut mass_left: f64 = 1.0;
    let probs: Vec<f64> = counts.iter().map(|&c| c as f64 / total as f64).collect();
    for (i, &p) in probs.iter().enumerate() {
        if remaining == 0 {
            break;
        }
        if i + 1 == probs.len() {
            out[i] = remaining;
            break;
        }
        let q = (p / mass_left).clamp(0.0, 1.0);
        let draw = Binomial::new(remaining, q)
            .expect("probability is clamped to [0, 1]")
            .sample(rng);
        out[i] = draw;
        remaining -= draw;
        mass_left = (mass_left - p).max(f64::MIN_POSITIVE);
    }
    out
}

struct Baseline {
    exact: Option<ExactDistribution>,
    counts: Option<Vec<u64>>,
    class_before: Option<usize>,
}

/// Probe the stack along a unit direction and along the sloppiest (control)
/// direction, sweeping the given step sizes. Enumerable stacks are scored by
/// the exact divergence between deep configuration distributions; wider
/// stacks fall back to a smoothed plug-in divergence between sampled class
/// readouts with a bootstrap error bar. A zero step is reported as exactly
/// zero divergence since the input is unchanged.
pub fn evaluate_attack(
    stack: &DeepStack,
    x: &InputPoint,
    fim: &FimMatrix,
    direction: &DVector<f64>,
    epsilons: &[f64],
    opts: &AttackOptions,
) -> Result<AdversarialReport> {
    let n_in = stack.n_in();
    if x.dim() != n_in {
        return Err(AuditError::DimensionMismatch {
            context: "attack input",
            expected: n_in,
            got: x.dim(),
        });
    }
    if fim.dim() != n_in {
        return Err(AuditError::DimensionMismatch {
            context: "attack metric",
            expected: n_in,
            got: fim.dim(),
        });
    }
    if direction.len() != n_in {
        return Err(AuditError::DimensionMismatch {
            context: "attack direction",
            expected: n_in,
            got: direction.len(),
        });
    }
    if (direction.norm() - 1.0).abs() > UNIT_NORM_TOLERANCE {
        return Err(AuditError::InvalidArgument {
            what: "probe direction",
            reason: format!("norm {} is not 1", direction.norm()),
        });
    }
    if epsilons.is_empty() {
        return Err(AuditError::InvalidArgument {
            what: "step sizes",
            reason: "no epsilon values supplied".into(),
        });
    }
    for &e in epsilons {
        if !e.is_finite() || e < 0.0 {
            return Err(AuditError::InvalidArgument {
                what: "step sizes",
                reason: format!("{e} is not a finite non-negative step"),
            });
        }
    }

    let spec = fim.spectrum()?;
    let scale = fim.matrix.amax().max(1.0);
    let no_stiff = spec.values[0] <= STIFF_FLOOR * scale;
    let control: DVector<f64> = spec.vectors[spec.vectors.len() - 1].clone();

    let n_classes = opts.n_classes.or(stack.meta().n_classes);
    if let Some(c) = n_classes {
        if c == 0 || stack.n_out() % c != 0 {
            return Err(AuditError::InvalidArgument {
                what: "class blocks",
                reason: format!(
                    "{} output units cannot split into {c} equal blocks",
                    stack.n_out()
                ),
            });
        }
    }
    let enumerable = stack
        .layers()
        .iter()
        .all(|l| l.n_out() <= opts.enum_limit);
    if !enumerable && n_classes.is_none() {
        return Err(AuditError::InvalidArgument {
            what: "attack sampling",
            reason: "stack is too wide to enumerate and no class count is available \
                     for the sampled readout"
                .into(),
        });
    }

    // Baseline at the unperturbed input.
    let baseline = if enumerable {
        let layers = exact_all_layers(stack, x, opts.enum_limit)?;
        let deepest = layers.into_iter().last().expect("validated depth");
        let class_before = match n_classes {
            Some(c) => Some(argmax_class(&class_posterior_from_marginals(
                &deepest.unit_marginals(),
                c,
            )?)),
            None => None,
        };
        Baseline {
            exact: Some(deepest),
            counts: None,
            class_before,
        }
    } else {
        let c = n_classes.expect("checked above");
        let counts = sampled_class_counts(
            stack,
            x,
            c,
            opts.n_samples,
            derive_seed(opts.seed, STAGE_ATTACK, 0),
        )?;
        let class_before = Some(argmax_class(&smoothed(&counts, opts.n_samples as u64)));
        Baseline {
            exact: None,
            counts: Some(counts),
            class_before,
        }
    };

    let mut records = Vec::with_capacity(2 * epsilons.len());
    let directions: [(&str, &DVector<f64>); 2] = [("probe", direction), ("control", &control)];
    for (d_idx, (tag, v)) in directions.iter().enumerate() {
        let curvature = (v.transpose() * &fim.matrix * *v)[(0, 0)];
        for (e_idx, &eps) in epsilons.iter().enumerate() {
            let coords: Vec<f64> = x
                .coordinates()
                .iter()
                .zip(v.iter())
                .map(|(&xi, &vi)| clamp_unit(xi + eps * vi))
                .collect();
            let x_prime = InputPoint::new(coords.clone(), None)?;
            let quadratic = 0.5 * eps * eps * curvature;
            let record_index = 1 + (d_idx * epsilons.len() + e_idx) as u64;
            let (kl, kl_stderr, class_after) = if eps == 0.0 {
                // The input is unchanged, so the deep distribution is too.
                let stderr = if enumerable { None } else { Some(0.0) };
                (0.0, stderr, baseline.class_before)
            } else if enumerable {
                let base = baseline.exact.as_ref().expect("exact baseline");
                let layers = exact_all_layers(stack, &x_prime, opts.enum_limit)?;
                let deepest = layers.into_iter().last().expect("validated depth");
                let kl = exact_kl(&base.probabilities, &deepest.probabilities, opts.kl_floor)?;
                let class_after = match n_classes {
                    Some(c) => Some(argmax_class(&class_posterior_from_marginals(
                        &deepest.unit_marginals(),
                        c,
                    )?)),
                    None => None,
                };
                (kl, None, class_after)
            } else {
                let c = n_classes.expect("checked above");
                let base_counts = baseline.counts.as_ref().expect("sampled baseline");
                let counts = sampled_class_counts(
                    stack,
                    &x_prime,
                    c,
                    opts.n_samples,
                    derive_seed(opts.seed, STAGE_ATTACK, record_index),
                )?;
                let total = opts.n_samples as u64;
                let p = smoothed(base_counts, total);
                let q = smoothed(&counts, total);
                let kl = exact_kl(&p, &q, opts.kl_floor)?;
                let mut boot = Vec::with_capacity(opts.bootstrap_resamples);
                let mut rng = crate::rbm::chain_rng(
                    derive_seed(opts.seed, STAGE_ATTACK_BOOT, record_index),
                    0,
                );
                for _ in 0..opts.bootstrap_resamples {
                    let bp = smoothed(&resample_counts(base_counts, &mut rng), total);
                    let bq = smoothed(&resample_counts(&counts, &mut rng), total);
                    boot.push(exact_kl(&bp, &bq, opts.kl_floor)?);
                }
                let stderr = if boot.len() > 1 {
                    let mean = boot.iter().sum::<f64>() / boot.len() as f64;
                    let var = boot.iter().map(|b| (b - mean).powi(2)).sum::<f64>()
                        / (boot.len() - 1) as f64;
                    Some(var.sqrt())
                } else {
                    None
                };
                (kl, stderr, Some(argmax_class(&q)))
            };
            records.push(PerturbationRecord {
                direction: tag.to_string(),
                epsilon: eps,
                x_prime: coords,
                kl,
                kl_stderr,
                quadratic_prediction: quadratic,
                class_before: baseline.class_before,
                class_after,
                flipped: baseline
                    .class_before
                    .and_then(|b| class_after.map(|a| a != b)),
            });
        }
    }

    let mut ranked: Vec<usize> = (0..n_in).collect();
    ranked.sort_by(|&a, &b| {
        direction[b]
            .abs()
            .partial_cmp(&direction[a].abs())
            .expect("unit direction entries are finite")
            .then(a.cmp(&b))
    });
    ranked.truncate(opts.top_bits.min(n_in));

    Ok(AdversarialReport {
        input: x.coordinates().to_vec(),
        label: x.label(),
        kl_mode: if enumerable { "exact" } else { "sampled" }.to_string(),
        n_samples: if enumerable {
            None
        } else {
            Some(opts.n_samples)
        },
        eigenvalues: spec.values.iter().copied().collect(),
        sloppiness: sloppiness_ratios(spec.values.as_slice()),
        no_stiff_direction: no_stiff,
        probe_vector: direction.iter().copied().collect(),
        control_vector: control.iter().copied().collect(),
        bits_to_flip: ranked,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exact::{exact_first_layer, exact_layer_distribution, fim_fd, DEFAULT_FIM_STEP};
    use crate::mcrg::{solve_stability, StabilityOptions};
    use crate::operators::{couplings_from_distribution, DEFAULT_PROB_FLOOR};
    use crate::rbm::StackMeta;
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer(n_out: usize, n_in: usize, w: &[f64], a: &[f64]) -> RbmLayer {
        RbmLayer::new(
            DMatrix::from_row_slice(n_out, n_in, w),
            DVector::from_column_slice(a),
            DVector::zeros(n_in),
        )
        .unwrap()
    }

    fn random_layer(n_out: usize, n_in: usize, scale: f64, rng: &mut impl Rng) -> RbmLayer {
        let w: Vec<f64> = (0..n_out * n_in)
            .map(|_| scale * (rng.gen::<f64>() * 2.0 - 1.0))
            .collect();
        let a: Vec<f64> = (0..n_out)
            .map(|_| scale * (rng.gen::<f64>() * 2.0 - 1.0))
            .collect();
        layer(n_out, n_in, &w, &a)
    }

    fn random_point(n: usize, rng: &mut impl Rng) -> InputPoint {
        let coords: Vec<f64> = (0..n).map(|_| 0.2 + 0.6 * rng.gen::<f64>()).collect();
        InputPoint::new(coords, None).unwrap()
    }

    fn stack(layers: Vec<RbmLayer>) -> DeepStack {
        DeepStack::new(
            layers,
            StackMeta {
                seed: 0,
                n_classes: None,
                training: None,
            },
        )
        .unwrap()
    }

    /// Exact-moment transition estimate for one kernel of an enumerable
    /// stack, with no regularization.
    fn exact_transition(
        stack: &DeepStack,
        x: &InputPoint,
        k: usize,
        basis_in: &OperatorBasis,
        basis_out: &OperatorBasis,
    ) -> StabilityEstimate {
        let parent = exact_layer_distribution(stack, x, k, 14).unwrap();
        let set =
            ExpectationSet::from_exact_transition(&parent, stack.layer(k), basis_in, basis_out, 14)
                .unwrap();
        let parent_set = ExpectationSet::from_exact_layer(&parent, basis_in).unwrap();
        let opts = StabilityOptions {
            regularization: 0.0,
            bootstrap_resamples: 0,
            ..StabilityOptions::default()
        };
        solve_stability(&parent_set, &set, &opts).unwrap()
    }

    #[test]
    fn zero_weights_give_zero_jacobian() {
        let l = layer(2, 3, &[0.0; 6], &[0.3, -0.2]);
        let x = InputPoint::new(vec![0.4, 0.5, 0.6], None).unwrap();
        let basis = OperatorBasis::full(2).unwrap();
        for method in [
            JacobianMethod::Analytic,
            JacobianMethod::LinearSolve {
                regularization: 0.0,
            },
        ] {
            let j = first_layer_jacobian(&l, &x, &basis, method).unwrap();
            assert_abs_diff_eq!(j.matrix.amax(), 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn single_node_jacobian_is_half_negated_weight() {
        let l = layer(1, 2, &[0.8, -1.3], &[0.1]);
        let x = InputPoint::new(vec![0.3, 0.7], None).unwrap();
        let basis = OperatorBasis::full(1).unwrap();
        let j = first_layer_jacobian(&l, &x, &basis, JacobianMethod::Analytic).unwrap();
        assert_abs_diff_eq!(j.matrix[(0, 0)], -0.4, epsilon = 1e-12);
        assert_abs_diff_eq!(j.matrix[(0, 1)], 0.65, epsilon = 1e-12);
    }

    #[test]
    fn analytic_and_linear_solve_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..10 {
            let l = random_layer(3, 4, 1.2, &mut rng);
            let x = random_point(4, &mut rng);
            let basis = OperatorBasis::full(3).unwrap();
            let a = first_layer_jacobian(&l, &x, &basis, JacobianMethod::Analytic).unwrap();
            let s = first_layer_jacobian(
                &l,
                &x,
                &basis,
                JacobianMethod::LinearSolve {
                    regularization: 0.0,
                },
            )
            .unwrap();
            assert!(
                (&a.matrix - &s.matrix).amax() < 1e-8,
                "methods disagree by {}",
                (&a.matrix - &s.matrix).amax()
            );
        }
    }

    #[test]
    fn jacobian_matches_finite_difference_of_exact_couplings() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let l = random_layer(3, 3, 1.0, &mut rng);
        let x = random_point(3, &mut rng);
        let basis = OperatorBasis::full(3).unwrap();
        let j = first_layer_jacobian(&l, &x, &basis, JacobianMethod::Analytic).unwrap();
        let delta = 1e-4;
        for i in 0..3 {
            let mut plus = x.coordinates().to_vec();
            let mut minus = plus.clone();
            plus[i] += delta;
            minus[i] -= delta;
            let gp = couplings_from_distribution(
                &exact_first_layer(&l, &InputPoint::new(plus, None).unwrap(), 14)
                    .unwrap()
                    .probabilities,
                &basis,
                DEFAULT_PROB_FLOOR,
            )
            .unwrap();
            let gm = couplings_from_distribution(
                &exact_first_layer(&l, &InputPoint::new(minus, None).unwrap(), 14)
                    .unwrap()
                    .probabilities,
                &basis,
                DEFAULT_PROB_FLOOR,
            )
            .unwrap();
            for r in 0..basis.len() {
                let fd = (gp.values[r] - gm.values[r]) / (2.0 * delta);
                assert!(
                    (j.matrix[(r, i)] - fd).abs() < 1e-6,
                    "row {r} col {i}: analytic {} vs fd {fd}",
                    j.matrix[(r, i)]
                );
            }
        }
    }

    #[test]
    fn chain_with_no_transitions_is_the_first_jacobian() {
        let l = layer(2, 2, &[0.5, -0.4, 0.2, 0.9], &[0.0, 0.1]);
        let x = InputPoint::new(vec![0.5, 0.5], None).unwrap();
        let basis = OperatorBasis::full(2).unwrap();
        let first = first_layer_jacobian(&l, &x, &basis, JacobianMethod::Analytic).unwrap();
        let chain = chain_jacobian(&first, &[]).unwrap();
        assert_eq!(chain.layer_index, 1);
        assert_abs_diff_eq!((&chain.matrix - &first.matrix).amax(), 0.0);
    }

    #[test]
    fn chain_rejects_wrong_layer_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = stack(vec![
            random_layer(2, 2, 0.8, &mut rng),
            random_layer(2, 2, 0.8, &mut rng),
            random_layer(2, 2, 0.8, &mut rng),
        ]);
        let x = random_point(2, &mut rng);
        let basis = OperatorBasis::full(2).unwrap();
        let first = first_layer_jacobian(s.layer(0), &x, &basis, JacobianMethod::Analytic).unwrap();
        let t23 = exact_transition(&s, &x, 2, &basis, &basis);
        let err = chain_jacobian(&first, &[&t23]).unwrap_err();
        assert!(matches!(err, AuditError::InvalidArgument { .. }));
    }

    #[test]
    fn chained_jacobian_matches_finite_difference_through_stack() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for _ in 0..3 {
            let s = stack(vec![
                random_layer(3, 3, 1.0, &mut rng),
                random_layer(3, 3, 1.0, &mut rng),
                random_layer(2, 3, 1.0, &mut rng),
            ]);
            let x = random_point(3, &mut rng);
            let b3 = OperatorBasis::full(3).unwrap();
            let b2 = OperatorBasis::full(2).unwrap();
            let first =
                first_layer_jacobian(s.layer(0), &x, &b3, JacobianMethod::Analytic).unwrap();
            let t12 = exact_transition(&s, &x, 1, &b3, &b3);
            let t23 = exact_transition(&s, &x, 2, &b3, &b2);
            let chain = chain_jacobian(&first, &[&t12, &t23]).unwrap();
            assert_eq!(chain.layer_index, 3);

            let delta = 1e-4;
            for i in 0..3 {
                let mut plus = x.coordinates().to_vec();
                let mut minus = plus.clone();
                plus[i] += delta;
                minus[i] -= delta;
                let dp = exact_layer_distribution(
                    &s,
                    &InputPoint::new(plus, None).unwrap(),
                    3,
                    14,
                )
                .unwrap();
                let dm = exact_layer_distribution(
                    &s,
                    &InputPoint::new(minus, None).unwrap(),
                    3,
                    14,
                )
                .unwrap();
                let gp =
                    couplings_from_distribution(&dp.probabilities, &b2, DEFAULT_PROB_FLOOR)
                        .unwrap();
                let gm =
                    couplings_from_distribution(&dm.probabilities, &b2, DEFAULT_PROB_FLOOR)
                        .unwrap();
                for r in 0..b2.len() {
                    let fd = (gp.values[r] - gm.values[r]) / (2.0 * delta);
                    assert!(
                        (chain.matrix[(r, i)] - fd).abs() < 1e-5,
                        "row {r} col {i}: chained {} vs fd {fd}",
                        chain.matrix[(r, i)]
                    );
                }
            }
        }
    }

    #[test]
    fn fim_matches_curvature_of_exact_divergence() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        for case in 0..3 {
            let s = stack(vec![
                random_layer(3, 3, 1.1, &mut rng),
                random_layer(2, 3, 1.1, &mut rng),
            ]);
            let x = random_point(3, &mut rng);
            let b3 = OperatorBasis::full(3).unwrap();
            let b2 = OperatorBasis::full(2).unwrap();
            let first =
                first_layer_jacobian(s.layer(0), &x, &b3, JacobianMethod::Analytic).unwrap();
            let t12 = exact_transition(&s, &x, 1, &b3, &b2);
            let chain = chain_jacobian(&first, &[&t12]).unwrap();
            let deep = exact_layer_distribution(&s, &x, 2, 14).unwrap();
            let set = ExpectationSet::from_exact_layer(&deep, &b2).unwrap();
            let fim = assemble_fim(&chain, &set).unwrap();

            let fd = fim_fd(&s, &x, DEFAULT_FIM_STEP, DEFAULT_KL_FLOOR, 14).unwrap();
            assert!(!fd.clamped);
            let rel = (&fim.matrix - &fd.matrix).norm() / fd.matrix.norm();
            assert!(rel < 1e-4, "case {case}: relative error {rel}");
        }
    }

    #[test]
    fn fim_is_symmetric_and_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let s = stack(vec![
            random_layer(3, 4, 1.3, &mut rng),
            random_layer(3, 3, 1.3, &mut rng),
        ]);
        let x = random_point(4, &mut rng);
        let b3 = OperatorBasis::full(3).unwrap();
        let first = first_layer_jacobian(s.layer(0), &x, &b3, JacobianMethod::Analytic).unwrap();
        let t12 = exact_transition(&s, &x, 1, &b3, &b3);
        let chain = chain_jacobian(&first, &[&t12]).unwrap();
        let deep = exact_layer_distribution(&s, &x, 2, 14).unwrap();
        let set = ExpectationSet::from_exact_layer(&deep, &b3).unwrap();
        let fim = assemble_fim(&chain, &set).unwrap();
        assert!((&fim.matrix - fim.matrix.transpose()).amax() < 1e-10);
        let spec = fim.spectrum().unwrap();
        for &v in spec.values.iter() {
            assert!(v > -1e-8, "eigenvalue {v} below tolerance");
        }
    }

    #[test]
    fn top_mode_of_diagonal_metric() {
        let basis = OperatorBasis::full(1).unwrap();
        let fim = FimMatrix {
            matrix: DMatrix::from_diagonal(&DVector::from_column_slice(&[1.0, 3.0])),
            layer_index: 2,
            basis: basis.clone(),
        };
        let mode = top_mode(&fim).unwrap();
        assert!(!mode.degenerate);
        assert_abs_diff_eq!(mode.eigenvalue, 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(mode.vector[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(mode.vector[1], 1.0, epsilon = 1e-12);
        // Residual || F v - lambda v ||.
        let v = DVector::from_column_slice(&mode.vector);
        let residual = (&fim.matrix * &v - mode.eigenvalue * &v).norm();
        assert!(residual < 1e-10);

        let zero = FimMatrix {
            matrix: DMatrix::zeros(2, 2),
            layer_index: 2,
            basis,
        };
        assert!(top_mode(&zero).unwrap().degenerate);
    }

    #[test]
    fn sloppiness_ratios_handle_zero_tail() {
        let r = sloppiness_ratios(&[4.0, 2.0, 0.0, -1e-15]);
        assert_abs_diff_eq!(r[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(r[1], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r[2], 0.0, epsilon = 1e-12);
    }

    /// Exact-mode FIM for a small stack, for the attack tests.
    fn exact_fim(s: &DeepStack, x: &InputPoint) -> FimMatrix {
        let b_in = OperatorBasis::full(s.layer(0).n_out()).unwrap();
        let b_out = OperatorBasis::full(s.n_out()).unwrap();
        let first = first_layer_jacobian(s.layer(0), x, &b_in, JacobianMethod::Analytic).unwrap();
        let mut transitions = Vec::new();
        let mut basis = b_in.clone();
        for k in 1..s.depth() {
            let next = OperatorBasis::full(s.layer(k).n_out()).unwrap();
            transitions.push(exact_transition(s, x, k, &basis, &next));
            basis = next;
        }
        let refs: Vec<&StabilityEstimate> = transitions.iter().collect();
        let chain = chain_jacobian(&first, &refs).unwrap();
        let deep = exact_layer_distribution(s, x, s.depth(), 14).unwrap();
        let set = ExpectationSet::from_exact_layer(&deep, &b_out).unwrap();
        assemble_fim(&chain, &set).unwrap()
    }

    #[test]
    fn zero_step_reports_zero_divergence() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = stack(vec![random_layer(2, 2, 1.0, &mut rng)]);
        let x = random_point(2, &mut rng);
        let fim = exact_fim(&s, &x);
        let mode = top_mode(&fim).unwrap();
        let v = DVector::from_column_slice(&mode.vector);
        let report =
            evaluate_attack(&s, &x, &fim, &v, &[0.0, 0.01], &AttackOptions::default()).unwrap();
        assert_eq!(report.kl_mode, "exact");
        let zero_records: Vec<_> = report
            .records
            .iter()
            .filter(|r| r.epsilon == 0.0)
            .collect();
        assert_eq!(zero_records.len(), 2);
        for r in zero_records {
            assert_eq!(r.kl, 0.0);
            assert_eq!(r.quadratic_prediction, 0.0);
        }
    }

    #[test]
    fn divergence_follows_the_quadratic_prediction() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let s = stack(vec![
            random_layer(3, 3, 1.2, &mut rng),
            random_layer(2, 3, 1.2, &mut rng),
        ]);
        let x = random_point(3, &mut rng);
        let fim = exact_fim(&s, &x);
        let mode = top_mode(&fim).unwrap();
        assert!(!mode.degenerate);
        let v = DVector::from_column_slice(&mode.vector);
        let report = evaluate_attack(
            &s,
            &x,
            &fim,
            &v,
            &[1e-2, 1e-3],
            &AttackOptions::default(),
        )
        .unwrap();
        for r in report.records.iter().filter(|r| r.direction == "probe") {
            assert!(r.quadratic_prediction > 0.0);
            let ratio = r.kl / r.quadratic_prediction;
            assert!(
                (ratio - 1.0).abs() < 0.1,
                "eps {}: ratio {ratio}",
                r.epsilon
            );
        }
    }

    #[test]
    fn stiff_direction_dominates_control() {
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        for _ in 0..5 {
            let s = stack(vec![
                random_layer(3, 3, 1.4, &mut rng),
                random_layer(2, 3, 1.4, &mut rng),
            ]);
            let x = random_point(3, &mut rng);
            let fim = exact_fim(&s, &x);
            let spec = fim.spectrum().unwrap();
            let spread = spec.values[0] / spec.values[spec.values.len() - 1].max(1e-300);
            if spread <= 2.0 {
                continue;
            }
            let mode = top_mode(&fim).unwrap();
            let v = DVector::from_column_slice(&mode.vector);
            let report = evaluate_attack(
                &s,
                &x,
                &fim,
                &v,
                &[0.01, 0.03, 0.05],
                &AttackOptions::default(),
            )
            .unwrap();
            for eps in [0.01, 0.03, 0.05] {
                let probe = report
                    .records
                    .iter()
                    .find(|r| r.direction == "probe" && r.epsilon == eps)
                    .unwrap();
                let control = report
                    .records
                    .iter()
                    .find(|r| r.direction == "control" && r.epsilon == eps)
                    .unwrap();
                assert!(
                    probe.kl > control.kl,
                    "eps {eps}: probe {} vs control {}",
                    probe.kl,
                    control.kl
                );
            }
        }
    }

    #[test]
    fn attack_rejects_bad_arguments() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s = stack(vec![random_layer(2, 2, 1.0, &mut rng)]);
        let x = random_point(2, &mut rng);
        let fim = exact_fim(&s, &x);
        let long = DVector::from_column_slice(&[2.0, 0.0]);
        assert!(matches!(
            evaluate_attack(&s, &x, &fim, &long, &[0.01], &AttackOptions::default()),
            Err(AuditError::InvalidArgument { .. })
        ));
        let unit = DVector::from_column_slice(&[1.0, 0.0]);
        assert!(matches!(
            evaluate_attack(&s, &x, &fim, &unit, &[-0.5], &AttackOptions::default()),
            Err(AuditError::InvalidArgument { .. })
        ));
        assert!(matches!(
            evaluate_attack(&s, &x, &fim, &unit, &[], &AttackOptions::default()),
            Err(AuditError::InvalidArgument { .. })
        ));
        // Too wide to enumerate and no class count anywhere.
        let opts = AttackOptions {
            enum_limit: 1,
            ..AttackOptions::default()
        };
        assert!(matches!(
            evaluate_attack(&s, &x, &fim, &unit, &[0.01], &opts),
            Err(AuditError::InvalidArgument { .. })
        ));
    }

    #[test]
    fn sampled_mode_reports_classes_and_error_bars() {
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let mut s = stack(vec![
            random_layer(3, 2, 1.5, &mut rng),
            random_layer(4, 3, 1.5, &mut rng),
        ]);
        s.meta_mut().n_classes = Some(2);
        let x = random_point(2, &mut rng);
        let fim = exact_fim(&s, &x);
        let v = DVector::from_column_slice(&[1.0, 0.0]);
        let opts = AttackOptions {
            enum_limit: 2, // force the sampled path despite the tiny stack
            n_samples: 4_000,
            seed: 17,
            ..AttackOptions::default()
        };
        let report = evaluate_attack(&s, &x, &fim, &v, &[0.0, 0.4], &opts).unwrap();
        assert_eq!(report.kl_mode, "sampled");
        assert_eq!(report.n_samples, Some(4_000));
        for r in &report.records {
            assert!(r.kl_stderr.is_some());
            assert!(r.class_before.is_some());
            assert!(r.class_after.is_some());
            assert!(r.kl.is_finite() && r.kl >= 0.0);
        }
        // Deterministic: an identical call reproduces every number.
        let again = evaluate_attack(&s, &x, &fim, &v, &[0.0, 0.4], &opts).unwrap();
        assert_eq!(
            serde_json::to_string(&report).unwrap(),
            serde_json::to_string(&again).unwrap()
        );
    }

    #[test]
    fn class_posterior_blocks_and_argmax() {
        let m = DVector::from_column_slice(&[0.9, 0.7, 0.2, 0.2]);
        let q = class_posterior_from_marginals(&m, 2).unwrap();
        assert_abs_diff_eq!(q[0], 0.8 / 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(q[1], 0.2 / 1.0, epsilon = 1e-12);
        assert_eq!(argmax_class(&q), 0);
        assert!(class_posterior_from_marginals(&m, 3).is_err());
        assert_eq!(argmax_class(&[0.5, 0.5]), 0);
    }

    #[test]
    fn flip_list_ranks_by_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(90);
        let s = stack(vec![random_layer(2, 3, 1.0, &mut rng)]);
        let x = random_point(3, &mut rng);
        let fim = exact_fim(&s, &x);
        let norm = (0.64f64 + 0.09 + 0.04).sqrt();
        let v = DVector::from_column_slice(&[-0.8 / norm, 0.3 / norm, 0.2 / norm]);
        let report =
            evaluate_attack(&s, &x, &fim, &v, &[0.01], &AttackOptions::default()).unwrap();
        assert_eq!(report.bits_to_flip, vec![0, 1, 2]);
    }

    #[test]
    fn report_round_trips_through_json() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let s = stack(vec![random_layer(2, 2, 1.0, &mut rng)]);
        let x = random_point(2, &mut rng);
        let fim = exact_fim(&s, &x);
        let v = DVector::from_column_slice(&[0.0, 1.0]);
        let report =
            evaluate_attack(&s, &x, &fim, &v, &[0.01], &AttackOptions::default()).unwrap();
        let text = serde_json::to_string(&report).unwrap();
        let back: AdversarialReport = serde_json::from_str(&text).unwrap();
        assert_eq!(serde_json::to_string(&back).unwrap(), text);
    }
}
