//! Monte Carlo estimation of the layer-to-layer stability matrix and its
//! spectrum.
//!
//! For a distribution in coupling coordinates `g`, the derivative of an
//! operator mean is a covariance: `d<O_g>/dg_a = <O_g><O_a> - <O_g O_a>`.
//! Applying the chain rule across one layer turns the unknown Jacobian
//! `T_ab = dg'_a/dg_b` into the solution of a linear system whose
//! coefficients are in-layer and between-layer correlations, all estimable
//! from paired samples without ever fitting couplings:
//!
//! `sum_a (<O_g><O_a> - <O_g O_a>)' T_ab = <O_g>' <O_b> - <O_g(h') O_b(h)>`
//!
//! Primes live on the deeper layer. Eigenvalues of `T` with modulus above
//! one mark directions the flow expands; those are the relevant operators
//! the adversarial analysis downstream feeds on.

use crate::error::{AuditError, Result};
use crate::exact::{
    exact_cross_moments, exact_expectations, exact_second_moments, push_through,
    ExactDistribution,
};
use crate::linalg::{eig_general, ridge_solve};
use crate::operators::OperatorBasis;
use crate::rbm::{chain_rng, derive_seed, propagate, DeepStack, InputPoint, LayerEnsemble, Parents, RbmLayer};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Fewest paired samples accepted by the estimators.
pub const MIN_SAMPLES: usize = 100;

pub const DEFAULT_REGULARIZATION: f64 = 1e-6;
pub const DEFAULT_RELEVANCE_MARGIN: f64 = 0.05;
pub const DEFAULT_BOOTSTRAP_RESAMPLES: usize = 200;

/// Aggregated (child, parent) configuration counts. Chains are exchangeable,
/// so these counts are a sufficient statistic for every moment estimated
/// here, and resampling chains with replacement is exactly a multinomial
/// redraw of the counts.
#[derive(Clone, Debug, PartialEq)]
struct PairCounts {
    /// Sorted by (child, parent); parent is zero for first-layer sets.
    cells: Vec<(u64, u64, u64)>,
    total: u64,
}

impl PairCounts {
    fn from_pairs(pairs: impl Iterator<Item = (u64, u64)>) -> Self {
        let mut map: BTreeMap<(u64, u64), u64> = BTreeMap::new();
        let mut total = 0u64;
        for (child, parent) in pairs {
            *map.entry((child, parent)).or_insert(0) += 1;
            total += 1;
        }
        PairCounts {
            cells: map.into_iter().map(|((c, p), n)| (c, p, n)).collect(),
            total,
        }
    }
}

/// Moment estimates of one layer, plus the between-layer correlations tying
/// it to the layer below when the ensembles were paired.
#[derive(Clone, Debug)]
pub struct ExpectationSet {
    pub layer_index: usize,
    pub basis: OperatorBasis,
    pub parent_basis: Option<OperatorBasis>,
    /// `<O_a>` in basis order.
    pub first: DVector<f64>,
    /// `<O_a O_b>`; symmetric with unit diagonal.
    pub second: DMatrix<f64>,
    /// `<O_g(h_this) O_b(h_parent)>`, rows over this layer's basis. Absent
    /// for first-layer sets, whose parent is the fixed input.
    pub cross: Option<DMatrix<f64>>,
    /// Parent-layer means seen by the same pairs as `cross`.
    pub parent_first: Option<DVector<f64>>,
    /// Zero for exact sets.
    pub sample_count: usize,
    counts: Option<PairCounts>,
}

fn moments_from_cells(
    cells: &[(u64, u64, u64)],
    total: u64,
    basis: &OperatorBasis,
    parent_basis: Option<&OperatorBasis>,
) -> (
    DVector<f64>,
    DMatrix<f64>,
    Option<DMatrix<f64>>,
    Option<DVector<f64>>,
) {
    let n = basis.len();
    let inv = 1.0 / total as f64;

    // Second moments of spin products reduce to first moments on the
    // symmetric difference, so one pass over distinct child masks covers
    // both. Slot zero is the constant operator.
    let mut masks: BTreeMap<u64, usize> = BTreeMap::new();
    masks.insert(0, 0);
    for op in basis.operators() {
        let next = masks.len();
        masks.entry(op.mask()).or_insert(next);
    }
    for i in 0..n {
        for j in i + 1..n {
            let next = masks.len();
            masks
                .entry(basis.op(i).mask() ^ basis.op(j).mask())
                .or_insert(next);
        }
    }
    let mask_list: Vec<u64> = {
        let mut v = vec![0u64; masks.len()];
        for (&m, &slot) in &masks {
            v[slot] = m;
        }
        v
    };
    let mut mask_mean = vec![0.0f64; mask_list.len()];
    for &(child, _, count) in cells {
        let w = count as f64 * inv;
        for (slot, &m) in mask_list.iter().enumerate() {
            let flips = m.count_ones() + (child & m).count_ones();
            if flips & 1 == 1 {
                mask_mean[slot] -= w;
            } else {
                mask_mean[slot] += w;
            }
        }
    }

    let first = DVector::from_iterator(
        n,
        basis.operators().iter().map(|op| mask_mean[masks[&op.mask()]]),
    );
    let mut second = DMatrix::zeros(n, n);
    for i in 0..n {
        second[(i, i)] = 1.0;
        for j in i + 1..n {
            let v = mask_mean[masks[&(basis.op(i).mask() ^ basis.op(j).mask())]];
            second[(i, j)] = v;
            second[(j, i)] = v;
        }
    }

    let (cross, parent_first) = match parent_basis {
        None => (None, None),
        Some(pb) => {
            let m = pb.len();
            let mut cross = DMatrix::zeros(n, m);
            let mut pfirst = DVector::zeros(m);
            let mut child_vals = vec![0.0f64; n];
            let mut parent_vals = vec![0.0f64; m];
            for &(child, parent, count) in cells {
                let w = count as f64 * inv;
                for (i, op) in basis.operators().iter().enumerate() {
                    child_vals[i] = op.evaluate_bits(child);
                }
                for (j, op) in pb.operators().iter().enumerate() {
                    parent_vals[j] = op.evaluate_bits(parent);
                    pfirst[j] += w * parent_vals[j];
                }
                for i in 0..n {
                    let wc = w * child_vals[i];
                    for j in 0..m {
                        cross[(i, j)] += wc * parent_vals[j];
                    }
                }
            }
            (Some(cross), Some(pfirst))
        }
    };
    (first, second, cross, parent_first)
}

fn check_ensemble_basis(ens: &LayerEnsemble, basis: &OperatorBasis) -> Result<()> {
    if basis.dimension() != ens.dim {
        return Err(AuditError::DimensionMismatch {
            context: "ensemble basis",
            expected: ens.dim,
            got: basis.dimension(),
        });
    }
    Ok(())
}

/// Moments of a first-layer ensemble, whose conditioning input is shared by
/// every chain.
pub fn estimate_expectations_input(
    ensemble: &LayerEnsemble,
    basis: &OperatorBasis,
) -> Result<ExpectationSet> {
    check_ensemble_basis(ensemble, basis)?;
    if !matches!(ensemble.parents, Parents::Input(_)) {
        return Err(AuditError::UnpairedEnsembles {
            reason: "ensemble was not sampled directly from the input".into(),
        });
    }
    if ensemble.len() < MIN_SAMPLES {
        return Err(AuditError::TooFewSamples {
            got: ensemble.len(),
            min: MIN_SAMPLES,
        });
    }
    let counts = PairCounts::from_pairs(ensemble.samples.iter().map(|&c| (c, 0)));
    let (first, second, _, _) = moments_from_cells(&counts.cells, counts.total, basis, None);
    Ok(ExpectationSet {
        layer_index: ensemble.layer_index,
        basis: basis.clone(),
        parent_basis: None,
        first,
        second,
        cross: None,
        parent_first: None,
        sample_count: ensemble.len(),
        counts: Some(counts),
    })
}

/// Moments of layer `k + 1` tied to layer `k` through chain pairing. The
/// deeper ensemble must have been propagated from the shallower one:
/// matching chain ids, and its recorded parents identical to the shallower
/// samples.
pub fn estimate_expectations(
    parent: &LayerEnsemble,
    child: &LayerEnsemble,
    parent_basis: &OperatorBasis,
    child_basis: &OperatorBasis,
) -> Result<ExpectationSet> {
    check_ensemble_basis(parent, parent_basis)?;
    check_ensemble_basis(child, child_basis)?;
    if child.layer_index != parent.layer_index + 1 {
        return Err(AuditError::UnpairedEnsembles {
            reason: format!(
                "layer {} does not sit directly above layer {}",
                child.layer_index, parent.layer_index
            ),
        });
    }
    if child.len() != parent.len() || child.chain_ids != parent.chain_ids {
        return Err(AuditError::UnpairedEnsembles {
            reason: "chain ids differ between the two ensembles".into(),
        });
    }
    match &child.parents {
        Parents::Sampled(p) if *p == parent.samples => {}
        Parents::Sampled(_) => {
            return Err(AuditError::UnpairedEnsembles {
                reason: "child ensemble was propagated from different parent configurations"
                    .into(),
            })
        }
        Parents::Input(_) => {
            return Err(AuditError::UnpairedEnsembles {
                reason: "child ensemble records an input, not sampled parents".into(),
            })
        }
    }
    if child.len() < MIN_SAMPLES {
        return Err(AuditError::TooFewSamples {
            got: child.len(),
            min: MIN_SAMPLES,
        });
    }
    let counts = PairCounts::from_pairs(
        child
            .samples
            .iter()
            .zip(&parent.samples)
            .map(|(&c, &p)| (c, p)),
    );
    let (first, second, cross, parent_first) =
        moments_from_cells(&counts.cells, counts.total, child_basis, Some(parent_basis));
    Ok(ExpectationSet {
        layer_index: child.layer_index,
        basis: child_basis.clone(),
        parent_basis: Some(parent_basis.clone()),
        first,
        second,
        cross,
        parent_first,
        sample_count: child.len(),
        counts: Some(counts),
    })
}

impl ExpectationSet {
    /// Exact moments of an enumerated layer distribution.
    pub fn from_exact_layer(dist: &ExactDistribution, basis: &OperatorBasis) -> Result<Self> {
        let first = exact_expectations(dist, basis)?;
        let second = exact_second_moments(dist, basis)?;
        Ok(ExpectationSet {
            layer_index: dist.layer_index,
            basis: basis.clone(),
            parent_basis: None,
            first,
            second,
            cross: None,
            parent_first: None,
            sample_count: 0,
            counts: None,
        })
    }

    /// Exact moments of the layer above `parent`, including the
    /// between-layer correlations, by enumerating the kernel.
    pub fn from_exact_transition(
        parent: &ExactDistribution,
        layer: &RbmLayer,
        parent_basis: &OperatorBasis,
        child_basis: &OperatorBasis,
        limit: usize,
    ) -> Result<Self> {
        let pushed = push_through(layer, &parent.probabilities, limit)?;
        let child = ExactDistribution::new(parent.layer_index + 1, layer.n_out(), pushed)?;
        let first = exact_expectations(&child, child_basis)?;
        let second = exact_second_moments(&child, child_basis)?;
        let cross = exact_cross_moments(parent, layer, child_basis, parent_basis)?;
        let parent_first = exact_expectations(parent, parent_basis)?;
        Ok(ExpectationSet {
            layer_index: child.layer_index,
            basis: child_basis.clone(),
            parent_basis: Some(parent_basis.clone()),
            first,
            second,
            cross: Some(cross),
            parent_first: Some(parent_first),
            sample_count: 0,
            counts: None,
        })
    }
}

/// One eigenvalue of a stability matrix, reported as modulus and phase so
/// complex pairs stay readable. The eigenvector is unit-norm with a
/// deterministic orientation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EigenMode {
    pub magnitude: f64,
    pub phase: f64,
    /// Bootstrap standard error of the magnitude; zero without a bootstrap.
    pub stderr: f64,
    pub vector_re: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vector_im: Option<Vec<f64>>,
    pub relevant: bool,
}

/// Expansion test with a safety margin: a mode counts as relevant only when
/// its modulus clears one plus the margin by more than its own standard
/// error.
fn is_relevant(magnitude: f64, stderr: f64, margin: f64) -> bool {
    magnitude > 1.0 + margin + stderr
}

/// Full eigen-analysis of a square stability matrix: modes sorted by
/// descending modulus (ties broken by descending real then imaginary part),
/// flagged for relevance against `margin` plus the per-rank `stderr`.
pub fn eigen_analysis(
    t: &DMatrix<f64>,
    margin: f64,
    stderr_by_rank: &[f64],
) -> Result<Vec<EigenMode>> {
    let pairs = eig_general(t)?;
    Ok(pairs
        .into_iter()
        .enumerate()
        .map(|(rank, p)| {
            let stderr = stderr_by_rank.get(rank).copied().unwrap_or(0.0);
            let magnitude = p.magnitude();
            EigenMode {
                magnitude,
                phase: p.phase(),
                stderr,
                vector_re: p.vector_re.iter().cloned().collect(),
                vector_im: if p.is_real() {
                    None
                } else {
                    Some(p.vector_im.iter().cloned().collect())
                },
                relevant: is_relevant(magnitude, stderr, margin),
            }
        })
        .collect())
}

#[derive(Clone, Copy, Debug)]
pub struct StabilityOptions {
    /// Relative ridge weight; the solver multiplies by the largest singular
    /// value. Zero demands a well-conditioned system.
    pub regularization: f64,
    pub relevance_margin: f64,
    /// Bootstrap resamples for error bars; zero disables the bootstrap.
    pub bootstrap_resamples: usize,
    pub bootstrap_seed: u64,
}

impl Default for StabilityOptions {
    fn default() -> Self {
        StabilityOptions {
            regularization: DEFAULT_REGULARIZATION,
            relevance_margin: DEFAULT_RELEVANCE_MARGIN,
            bootstrap_resamples: DEFAULT_BOOTSTRAP_RESAMPLES,
            bootstrap_seed: 0,
        }
    }
}

/// Estimated stability matrix of one layer transition.
#[derive(Clone, Debug)]
pub struct StabilityEstimate {
    pub from_layer: usize,
    pub to_layer: usize,
    pub in_basis: OperatorBasis,
    pub out_basis: OperatorBasis,
    /// Rows over `out_basis`, columns over `in_basis`.
    pub t: DMatrix<f64>,
    /// Bootstrap standard error per entry; absent without a bootstrap.
    pub t_stderr: Option<DMatrix<f64>>,
    /// Condition number of the correlation system; absent when exactly
    /// singular.
    pub condition_number: Option<f64>,
    /// Relative ridge weight requested.
    pub regularization: f64,
    /// Absolute ridge weight applied.
    pub lambda: f64,
    /// Empty when the matrix is rectangular (layer widths differ).
    pub eigenmodes: Vec<EigenMode>,
    pub bootstrap_resamples: usize,
}

impl StabilityEstimate {
    pub fn max_magnitude(&self) -> Option<f64> {
        self.eigenmodes.first().map(|m| m.magnitude)
    }

    pub fn has_relevant_mode(&self) -> bool {
        self.eigenmodes.iter().any(|m| m.relevant)
    }
}

fn build_system(
    first_child: &DVector<f64>,
    second_child: &DMatrix<f64>,
    first_parent: &DVector<f64>,
    cross: &DMatrix<f64>,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = first_child.len();
    let m = first_parent.len();
    let mut a = DMatrix::zeros(n, n);
    for g in 0..n {
        for al in 0..n {
            a[(g, al)] = first_child[g] * first_child[al] - second_child[(g, al)];
        }
    }
    let mut b = DMatrix::zeros(n, m);
    for g in 0..n {
        for be in 0..m {
            b[(g, be)] = first_child[g] * first_parent[be] - cross[(g, be)];
        }
    }
    (a, b)
}

/// Draws multinomial cell counts by chained binomials.
fn resample_counts(cells: &[(u64, u64, u64)], total: u64, rng: &mut impl Rng) -> Vec<f64> {
    let mut out = Vec::with_capacity(cells.len());
    let mut remaining_weight = total;
    let mut remaining_draws = total;
    for &(_, _, count) in cells {
        if remaining_draws == 0 || remaining_weight == 0 {
            out.push(0.0);
            continue;
        }
        if count >= remaining_weight {
            out.push(remaining_draws as f64);
            remaining_draws = 0;
            remaining_weight = 0;
            continue;
        }
        let p = count as f64 / remaining_weight as f64;
        let draw = Binomial::new(remaining_draws, p)
            .expect("probability in range")
            .sample(rng);
        out.push(draw as f64);
        remaining_draws -= draw;
        remaining_weight -= count;
    }
    out
}

/// Eigenvalue magnitudes, descending, via nalgebra's Schur reduction; used
/// in the bootstrap loop both for speed and as an implementation
/// independent of the eigenvector solver.
fn schur_magnitudes(t: &DMatrix<f64>) -> Vec<f64> {
    let mut mags: Vec<f64> = t
        .clone()
        .complex_eigenvalues()
        .iter()
        .map(|c| c.norm())
        .collect();
    mags.sort_by(|a, b| b.partial_cmp(a).unwrap());
    mags
}

/// Solves the correlation linear system for the stability matrix of the
/// transition from `parent_set`'s layer to `child_set`'s layer, with
/// optional bootstrap error bars over the sampling noise.
pub fn solve_stability(
    parent_set: &ExpectationSet,
    child_set: &ExpectationSet,
    opts: &StabilityOptions,
) -> Result<StabilityEstimate> {
    let cross = child_set.cross.as_ref().ok_or_else(|| AuditError::UnpairedEnsembles {
        reason: "child expectation set carries no between-layer correlations".into(),
    })?;
    let child_parent_basis =
        child_set
            .parent_basis
            .as_ref()
            .ok_or_else(|| AuditError::UnpairedEnsembles {
                reason: "child expectation set has no parent basis".into(),
            })?;
    if child_parent_basis != &parent_set.basis {
        return Err(AuditError::UnpairedEnsembles {
            reason: "parent set basis differs from the basis the child was paired against".into(),
        });
    }
    if child_set.layer_index != parent_set.layer_index + 1 {
        return Err(AuditError::UnpairedEnsembles {
            reason: format!(
                "expectation sets are for layers {} and {}, not consecutive",
                parent_set.layer_index, child_set.layer_index
            ),
        });
    }
    if let Some(pf) = &child_set.parent_first {
        let drift = (pf - &parent_set.first).abs().max();
        if drift > 1e-9 {
            return Err(AuditError::UnpairedEnsembles {
                reason: format!(
                    "parent means disagree between the two sets by {drift}; \
                     the sets come from different ensembles"
                ),
            });
        }
    }

    let (a, b) = build_system(&child_set.first, &child_set.second, &parent_set.first, cross);
    let solved = ridge_solve(&a, &b, opts.regularization)?;
    let t = solved.solution;
    let square = t.nrows() == t.ncols();

    // Bootstrap over the child set's pair counts; the parent-side moments in
    // the system are recomputed from the same resampled pairs, which is what
    // chain pairing means.
    let mut t_stderr = None;
    let mut eig_stderr: Vec<f64> = Vec::new();
    let mut resamples_used = 0;
    if opts.bootstrap_resamples > 0 {
        if let Some(counts) = &child_set.counts {
            let mut rng = chain_rng(opts.bootstrap_seed, 0);
            let mut sum = DMatrix::zeros(t.nrows(), t.ncols());
            let mut sumsq = DMatrix::zeros(t.nrows(), t.ncols());
            let mut mag_sum = vec![0.0f64; if square { t.nrows() } else { 0 }];
            let mut mag_sumsq = vec![0.0f64; mag_sum.len()];
            for _ in 0..opts.bootstrap_resamples {
                let weights = resample_counts(&counts.cells, counts.total, &mut rng);
                let resampled: Vec<(u64, u64, u64)> = counts
                    .cells
                    .iter()
                    .zip(&weights)
                    .filter(|(_, &w)| w > 0.0)
                    .map(|(&(c, p, _), &w)| (c, p, w as u64))
                    .collect();
                let (rf, rs, rc, rp) = moments_from_cells(
                    &resampled,
                    counts.total,
                    &child_set.basis,
                    Some(child_parent_basis),
                );
                let rc = rc.expect("parent basis given");
                let rp = rp.expect("parent basis given");
                let (ra, rb) = build_system(&rf, &rs, &rp, &rc);
                let rt = ridge_solve(&ra, &rb, opts.regularization)?.solution;
                if square {
                    for (k, m) in schur_magnitudes(&rt).into_iter().enumerate() {
                        mag_sum[k] += m;
                        mag_sumsq[k] += m * m;
                    }
                }
                sum += &rt;
                sumsq += rt.component_mul(&rt);
                resamples_used += 1;
            }
            if resamples_used > 1 {
                let nf = resamples_used as f64;
                let var = (sumsq - sum.component_mul(&sum) / nf) / (nf - 1.0);
                t_stderr = Some(var.map(|v| v.max(0.0).sqrt()));
                eig_stderr = mag_sum
                    .iter()
                    .zip(&mag_sumsq)
                    .map(|(&s, &sq)| ((sq - s * s / nf) / (nf - 1.0)).max(0.0).sqrt())
                    .collect();
            }
        }
    }

    let eigenmodes = if square {
        eigen_analysis(&t, opts.relevance_margin, &eig_stderr)?
    } else {
        Vec::new()
    };

    Ok(StabilityEstimate {
        from_layer: parent_set.layer_index,
        to_layer: child_set.layer_index,
        in_basis: parent_set.basis.clone(),
        out_basis: child_set.basis.clone(),
        t,
        t_stderr,
        condition_number: solved.condition_number,
        regularization: opts.regularization,
        lambda: solved.lambda,
        eigenmodes,
        bootstrap_resamples: resamples_used,
    })
}

/// Options for a whole-stack flow analysis.
#[derive(Clone, Debug)]
pub struct FlowOptions {
    pub n_chains: usize,
    /// Probe operators up to this degree (capped at each layer's width).
    pub max_degree: usize,
    pub stability: StabilityOptions,
    pub seed: u64,
}

/// Flow of one input through the stack.
#[derive(Clone, Debug)]
pub struct InputFlow {
    pub input_index: usize,
    pub label: Option<usize>,
    pub bases: Vec<OperatorBasis>,
    /// Per-layer expectation sets, layer 1 first.
    pub sets: Vec<ExpectationSet>,
    /// Stability estimate per transition, length `depth - 1`.
    pub transitions: Vec<StabilityEstimate>,
    /// Euclidean distance between consecutive layers' operator means;
    /// absent when the layer widths (and so the bases) differ.
    pub consecutive_distance: Vec<Option<f64>>,
}

impl InputFlow {
    pub fn deepest_first(&self) -> &DVector<f64> {
        &self.sets.last().expect("at least one layer").first
    }
}

/// Distance statistics of deepest-layer expectations, grouped by label.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClassCohesion {
    pub label: usize,
    pub inputs: usize,
    /// Mean pairwise distance within the class; absent below two members.
    pub mean_within: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FlowSummary {
    pub per_class: Vec<ClassCohesion>,
    /// Mean pairwise distance across distinct labels.
    pub mean_across: Option<f64>,
}

/// Propagates each input, estimates per-layer moments, and solves every
/// transition. The summary compares where different inputs land at the
/// deepest layer: class structure survives the flow when within-class
/// distances stay below across-class ones.
pub fn flow_report(
    stack: &DeepStack,
    inputs: &[InputPoint],
    opts: &FlowOptions,
) -> Result<(Vec<InputFlow>, FlowSummary)> {
    if inputs.is_empty() {
        return Err(AuditError::InvalidArgument {
            what: "flow inputs",
            reason: "empty input list".into(),
        });
    }
    let mut bases = Vec::with_capacity(stack.depth());
    for layer in stack.layers() {
        let dim = layer.n_out();
        bases.push(OperatorBasis::complete(dim, opts.max_degree.min(dim))?);
    }

    let mut flows = Vec::with_capacity(inputs.len());
    for (idx, input) in inputs.iter().enumerate() {
        let seed = derive_seed(opts.seed, STAGE_FLOW, idx as u64);
        let ensembles = propagate(stack, input, opts.n_chains, seed)?;
        let mut sets = Vec::with_capacity(stack.depth());
        sets.push(estimate_expectations_input(&ensembles[0], &bases[0])?);
        for k in 1..stack.depth() {
            sets.push(estimate_expectations(
                &ensembles[k - 1],
                &ensembles[k],
                &bases[k - 1],
                &bases[k],
            )?);
        }
        let mut transitions = Vec::with_capacity(stack.depth().saturating_sub(1));
        let mut consecutive = Vec::with_capacity(stack.depth().saturating_sub(1));
        for k in 0..stack.depth() - 1 {
            let mut st_opts = opts.stability;
            st_opts.bootstrap_seed =
                derive_seed(opts.seed, STAGE_BOOTSTRAP, (idx * stack.depth() + k) as u64);
            transitions.push(solve_stability(&sets[k], &sets[k + 1], &st_opts)?);
            consecutive.push(if bases[k] == bases[k + 1] {
                Some((&sets[k + 1].first - &sets[k].first).norm())
            } else {
                None
            });
        }
        flows.push(InputFlow {
            input_index: idx,
            label: input.label(),
            bases: bases.clone(),
            sets,
            transitions,
            consecutive_distance: consecutive,
        });
    }

    let summary = summarize_classes(&flows);
    Ok((flows, summary))
}

const STAGE_FLOW: u64 = 0x464c_4f57; // "FLOW"
const STAGE_BOOTSTRAP: u64 = 0x424f_4f54; // "BOOT"

fn summarize_classes(flows: &[InputFlow]) -> FlowSummary {
    let mut by_label: BTreeMap<usize, Vec<&InputFlow>> = BTreeMap::new();
    for f in flows {
        if let Some(l) = f.label {
            by_label.entry(l).or_default().push(f);
        }
    }
    let dist = |a: &InputFlow, b: &InputFlow| (a.deepest_first() - b.deepest_first()).norm();
    let mut per_class = Vec::new();
    for (&label, members) in &by_label {
        let mut sum = 0.0;
        let mut pairs = 0usize;
        for i in 0..members.len() {
            for j in i + 1..members.len() {
                sum += dist(members[i], members[j]);
                pairs += 1;
            }
        }
        per_class.push(ClassCohesion {
            label,
            inputs: members.len(),
            mean_within: (pairs > 0).then(|| sum / pairs as f64),
        });
    }
    let labels: Vec<usize> = by_label.keys().copied().collect();
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..labels.len() {
        for j in i + 1..labels.len() {
            for a in &by_label[&labels[i]] {
                for b in &by_label[&labels[j]] {
                    sum += dist(a, b);
                    pairs += 1;
                }
            }
        }
    }
    FlowSummary {
        per_class,
        mean_across: (pairs > 0).then(|| sum / pairs as f64),
    }
}
