//! Exact enumeration over small layers: reference distributions, moments,
//! renormalization steps, and finite-difference derivatives.
//!
//! Everything here is an oracle. The sampled estimators elsewhere in the
//! crate are validated against these routines on stacks small enough to
//! enumerate, then trusted beyond that size.

use crate::error::{AuditError, Result};
use crate::operators::{
    couplings_from_distribution, distribution_from_couplings, moment_table, CouplingVector,
    OperatorBasis,
};
use crate::rbm::{DeepStack, InputPoint, RbmLayer};
use nalgebra::{DMatrix, DVector};

/// Default cap on nodes per enumerated layer (`2^14` states).
pub const DEFAULT_ENUM_LIMIT: usize = 14;

/// Default central-difference step for coupling-space derivatives.
pub const DEFAULT_JACOBIAN_STEP: f64 = 1e-4;

/// Default central-difference step for input-space curvature.
pub const DEFAULT_FIM_STEP: f64 = 1e-3;

/// Default floor inside logs when a divergence is evaluated.
pub const DEFAULT_KL_FLOOR: f64 = 1e-12;

/// Full probability table of one layer's configurations.
#[derive(Clone, Debug, PartialEq)]
pub struct ExactDistribution {
    /// One-based layer index within the stack.
    pub layer_index: usize,
    pub dim: usize,
    pub probabilities: Vec<f64>,
}

impl ExactDistribution {
    pub fn new(layer_index: usize, dim: usize, probabilities: Vec<f64>) -> Result<Self> {
        if probabilities.len() != 1usize << dim {
            return Err(AuditError::DimensionMismatch {
                context: "exact distribution",
                expected: 1usize << dim,
                got: probabilities.len(),
            });
        }
        Ok(ExactDistribution {
            layer_index,
            dim,
            probabilities,
        })
    }

    /// `p(h_j = 1)` for every node.
    pub fn unit_marginals(&self) -> DVector<f64> {
        let mut m = DVector::zeros(self.dim);
        for (h, &q) in self.probabilities.iter().enumerate() {
            let mut rest = h as u64;
            while rest != 0 {
                let j = rest.trailing_zeros() as usize;
                m[j] += q;
                rest &= rest - 1;
            }
        }
        m
    }
}

fn check_enum(what: String, nodes: usize, limit: usize) -> Result<()> {
    if nodes > limit {
        return Err(AuditError::EnumerationLimit { what, nodes, limit });
    }
    Ok(())
}

/// Dense table of the product measure with per-node success probabilities.
fn product_table(probs: &DVector<f64>, out: &mut [f64]) {
    debug_assert_eq!(out.len(), 1usize << probs.len());
    out[0] = 1.0;
    let mut size = 1usize;
    for (j, &p) in probs.iter().enumerate() {
        for s in 0..size {
            let v = out[s];
            out[s] = v * (1.0 - p);
            out[s | (1 << j)] = v * p;
        }
        size <<= 1;
    }
}

fn check_mass(p: &[f64], what: &str) -> Result<()> {
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(AuditError::InvalidDistribution {
            reason: format!("{what} has mass {sum}"),
        });
    }
    Ok(())
}

/// Pushes a distribution over visible configurations through one layer's
/// hidden-given-visible kernel.
pub fn push_through(layer: &RbmLayer, q: &[f64], limit: usize) -> Result<Vec<f64>> {
    if q.len() != 1usize << layer.n_in() {
        return Err(AuditError::DimensionMismatch {
            context: "pushforward input",
            expected: 1usize << layer.n_in(),
            got: q.len(),
        });
    }
    check_enum("kernel output".into(), layer.n_out(), limit)?;
    check_enum("kernel input".into(), layer.n_in(), limit)?;
    let n_out = layer.n_out();
    let mut out = vec![0.0; 1usize << n_out];
    let mut table = vec![0.0; 1usize << n_out];
    for (h, &w) in q.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let probs = layer.hidden_probs_bits(h as u64);
        product_table(&probs, &mut table);
        for (o, t) in out.iter_mut().zip(&table) {
            *o += w * t;
        }
    }
    check_mass(&out, "pushforward")?;
    Ok(out)
}

/// Distribution of the first layer conditioned on a real input point.
pub fn exact_first_layer(
    layer: &RbmLayer,
    x: &InputPoint,
    limit: usize,
) -> Result<ExactDistribution> {
    check_enum("layer 1".into(), layer.n_out(), limit)?;
    let probs = layer.hidden_given_visible(&x.to_vector())?;
    let mut table = vec![0.0; 1usize << layer.n_out()];
    product_table(&probs, &mut table);
    ExactDistribution::new(1, layer.n_out(), table)
}

/// Marginal distribution of layer `k` (one-based) given the input, obtained
/// by exact pushforward through every kernel up to `k`.
pub fn exact_layer_distribution(
    stack: &DeepStack,
    x: &InputPoint,
    k: usize,
    limit: usize,
) -> Result<ExactDistribution> {
    if k == 0 || k > stack.depth() {
        return Err(AuditError::InvalidArgument {
            what: "layer index",
            reason: format!("{k} with stack depth {}", stack.depth()),
        });
    }
    let mut dist = exact_first_layer(stack.layer(0), x, limit)?;
    for j in 1..k {
        let layer = stack.layer(j);
        check_enum(format!("layer {}", j + 1), layer.n_out(), limit)?;
        let p = push_through(layer, &dist.probabilities, limit)?;
        dist = ExactDistribution::new(j + 1, layer.n_out(), p)?;
    }
    Ok(dist)
}

/// Distributions of every layer given the input.
pub fn exact_all_layers(
    stack: &DeepStack,
    x: &InputPoint,
    limit: usize,
) -> Result<Vec<ExactDistribution>> {
    let mut out = Vec::with_capacity(stack.depth());
    out.push(exact_first_layer(stack.layer(0), x, limit)?);
    for j in 1..stack.depth() {
        let layer = stack.layer(j);
        check_enum(format!("layer {}", j + 1), layer.n_out(), limit)?;
        let p = push_through(layer, &out[j - 1].probabilities, limit)?;
        out.push(ExactDistribution::new(j + 1, layer.n_out(), p)?);
    }
    Ok(out)
}

/// `<O_a>` for each basis operator.
pub fn exact_expectations(dist: &ExactDistribution, basis: &OperatorBasis) -> Result<DVector<f64>> {
    if basis.dimension() != dist.dim {
        return Err(AuditError::DimensionMismatch {
            context: "expectation basis",
            expected: dist.dim,
            got: basis.dimension(),
        });
    }
    let table = moment_table(&dist.probabilities, dist.dim)?;
    Ok(DVector::from_iterator(
        basis.len(),
        basis.operators().iter().map(|op| table[op.mask() as usize]),
    ))
}

/// `<O_a O_b>` for each basis pair. Products of spin operators reduce to the
/// operator on the symmetric difference of their node sets, so this reads
/// off the same transform.
pub fn exact_second_moments(
    dist: &ExactDistribution,
    basis: &OperatorBasis,
) -> Result<DMatrix<f64>> {
    if basis.dimension() != dist.dim {
        return Err(AuditError::DimensionMismatch {
            context: "second-moment basis",
            expected: dist.dim,
            got: basis.dimension(),
        });
    }
    let table = moment_table(&dist.probabilities, dist.dim)?;
    let n = basis.len();
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let xor = basis.op(i).mask() ^ basis.op(j).mask();
            let v = table[xor as usize];
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    Ok(m)
}

/// `<O_g(h_out) O_b(h_in)>` under the joint of a parent distribution and one
/// kernel step. Hidden nodes are conditionally independent, so the inner
/// expectation is a product of per-node spin means.
pub fn exact_cross_moments(
    parent: &ExactDistribution,
    layer: &RbmLayer,
    out_basis: &OperatorBasis,
    in_basis: &OperatorBasis,
) -> Result<DMatrix<f64>> {
    if in_basis.dimension() != parent.dim || layer.n_in() != parent.dim {
        return Err(AuditError::DimensionMismatch {
            context: "cross-moment parent",
            expected: parent.dim,
            got: in_basis.dimension().max(layer.n_in()),
        });
    }
    if out_basis.dimension() != layer.n_out() {
        return Err(AuditError::DimensionMismatch {
            context: "cross-moment output basis",
            expected: layer.n_out(),
            got: out_basis.dimension(),
        });
    }
    let mut m = DMatrix::zeros(out_basis.len(), in_basis.len());
    for (h, &w) in parent.probabilities.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let probs = layer.hidden_probs_bits(h as u64);
        let spin_means: Vec<f64> = probs.iter().map(|&p| 2.0 * p - 1.0).collect();
        for (gi, g_op) in out_basis.operators().iter().enumerate() {
            let mut e = 1.0;
            let mut rest = g_op.mask();
            while rest != 0 {
                e *= spin_means[rest.trailing_zeros() as usize];
                rest &= rest - 1;
            }
            let we = w * e;
            for (bi, b_op) in in_basis.operators().iter().enumerate() {
                m[(gi, bi)] += we * b_op.evaluate_bits(h as u64);
            }
        }
    }
    Ok(m)
}

/// One exact renormalization step: couplings in, renormalized couplings out.
/// Demands a full basis; with operators missing, the pushforward couplings
/// would alias onto directions the vector cannot represent.
pub fn exact_rg_step(
    couplings: &CouplingVector,
    layer: &RbmLayer,
    floor: f64,
    limit: usize,
) -> Result<CouplingVector> {
    if !couplings.basis.is_full() {
        return Err(AuditError::TruncatedBasis {
            reason: format!(
                "renormalization step needs degree {} but the basis stops at {}",
                couplings.basis.dimension(),
                couplings.basis.max_degree()
            ),
        });
    }
    if couplings.basis.dimension() != layer.n_in() {
        return Err(AuditError::DimensionMismatch {
            context: "renormalization couplings",
            expected: layer.n_in(),
            got: couplings.basis.dimension(),
        });
    }
    let q = distribution_from_couplings(couplings)?;
    let pushed = push_through(layer, &q, limit)?;
    let out_basis = OperatorBasis::full(layer.n_out())?;
    couplings_from_distribution(&pushed, &out_basis, floor)
}

/// Central-difference Jacobian of the renormalized couplings with respect to
/// the incoming ones, at the operating point `at`. Rows follow `out_basis`,
/// columns follow `at`'s basis.
pub fn jacobian_fd(
    layer: &RbmLayer,
    at: &CouplingVector,
    out_basis: &OperatorBasis,
    step: f64,
    floor: f64,
    limit: usize,
) -> Result<DMatrix<f64>> {
    if !(step > 0.0) {
        return Err(AuditError::InvalidArgument {
            what: "difference step",
            reason: format!("{step}"),
        });
    }
    if out_basis.dimension() != layer.n_out() {
        return Err(AuditError::DimensionMismatch {
            context: "jacobian output basis",
            expected: layer.n_out(),
            got: out_basis.dimension(),
        });
    }
    let n_in = at.basis.len();
    let mut t = DMatrix::zeros(out_basis.len(), n_in);
    let mut probe = at.clone();
    for b in 0..n_in {
        let g0 = at.values[b];
        probe.values[b] = g0 + step;
        let plus = renormalized_couplings(&probe, layer, out_basis, floor, limit)?;
        probe.values[b] = g0 - step;
        let minus = renormalized_couplings(&probe, layer, out_basis, floor, limit)?;
        probe.values[b] = g0;
        for a in 0..out_basis.len() {
            t[(a, b)] = (plus[a] - minus[a]) / (2.0 * step);
        }
    }
    Ok(t)
}

/// Pushforward couplings on an arbitrary output basis. Coupling recovery is
/// exact per operator, so a truncated selection still returns true values.
fn renormalized_couplings(
    couplings: &CouplingVector,
    layer: &RbmLayer,
    out_basis: &OperatorBasis,
    floor: f64,
    limit: usize,
) -> Result<DVector<f64>> {
    let q = distribution_from_couplings(couplings)?;
    let pushed = push_through(layer, &q, limit)?;
    let c = couplings_from_distribution(&pushed, out_basis, floor)?;
    Ok(c.values)
}

/// `KL(p || q)` over matching configuration tables. Zero mass in `p` drops
/// its term; `q` is floored before the log.
pub fn exact_kl(p: &[f64], q: &[f64], floor: f64) -> Result<f64> {
    if p.len() != q.len() {
        return Err(AuditError::DimensionMismatch {
            context: "divergence",
            expected: p.len(),
            got: q.len(),
        });
    }
    let mut kl = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        if a > 0.0 {
            kl += a * (a.ln() - b.max(floor).ln());
        }
    }
    Ok(kl)
}

/// Curvature of the input-to-deep-layer map obtained without any chain rule:
/// a central second difference of `KL(q_N(x) || q_N(x'))` in the input
/// coordinates.
pub struct FdCurvature {
    pub matrix: DMatrix<f64>,
    /// Some probe point left the unit cube and was clamped; the estimate at
    /// the boundary is one-sided in effect.
    pub clamped: bool,
}

pub fn fim_fd(
    stack: &DeepStack,
    x: &InputPoint,
    step: f64,
    floor: f64,
    limit: usize,
) -> Result<FdCurvature> {
    if !(step > 0.0) {
        return Err(AuditError::InvalidArgument {
            what: "difference step",
            reason: format!("{step}"),
        });
    }
    let n = x.dim();
    let base = exact_layer_distribution(stack, x, stack.depth(), limit)?;
    let mut clamped = false;
    let mut probe = |deltas: &[(usize, f64)]| -> Result<f64> {
        let mut coords = x.coordinates().to_vec();
        for &(i, d) in deltas {
            coords[i] += d;
            if coords[i] < 0.0 {
                coords[i] = 0.0;
                clamped = true;
            } else if coords[i] > 1.0 {
                coords[i] = 1.0;
                clamped = true;
            }
        }
        let xp = InputPoint::new(coords, None)?;
        let dist = exact_layer_distribution(stack, &xp, stack.depth(), limit)?;
        exact_kl(&base.probabilities, &dist.probabilities, floor)
    };

    let mut f = DMatrix::zeros(n, n);
    for i in 0..n {
        let plus = probe(&[(i, step)])?;
        let minus = probe(&[(i, -step)])?;
        f[(i, i)] = (plus + minus) / (step * step);
    }
    for i in 0..n {
        for j in i + 1..n {
            let pp = probe(&[(i, step), (j, step)])?;
            let pm = probe(&[(i, step), (j, -step)])?;
            let mp = probe(&[(i, -step), (j, step)])?;
            let mm = probe(&[(i, -step), (j, -step)])?;
            let v = (pp - pm - mp + mm) / (4.0 * step * step);
            f[(i, j)] = v;
            f[(j, i)] = v;
        }
    }
    // The two difference orders agree analytically; averaging kills the
    // residual asymmetry of floating-point evaluation.
    let ft = f.transpose();
    f = (f + ft) * 0.5;
    Ok(FdCurvature { matrix: f, clamped })
}
