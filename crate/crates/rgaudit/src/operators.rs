//! Spin-product observables on binary configurations and the coupling
//! (log-linear) parametrization of distributions over them.
//!
//! A configuration of `n` binary nodes is packed into a `u64`, node `i` at
//! bit `i`. An operator is a non-empty subset of nodes; its value on a
//! configuration is the product of the node spins `2*h_i - 1`, so always
//! plus or minus one. Any strictly positive distribution over the `2^n`
//! configurations factorizes as `p(h) = exp(-sum_a g_a O_a(h)) / Z` with one
//! coupling `g_a` per operator, recovered here by a fast Walsh-Hadamard
//! transform of `ln p`.

use crate::error::{AuditError, Result};
use nalgebra::DVector;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::collections::BTreeMap;
use std::fmt;

/// Probability floor applied before taking logs. Zero disables the floor.
pub const DEFAULT_PROB_FLOOR: f64 = 1e-12;

/// Largest node count for which dense `2^n` tables are allowed.
pub const MAX_TABLE_NODES: usize = 26;

/// A product-of-spins observable, identified by the set of nodes it touches.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct OperatorId {
    mask: u64,
}

impl OperatorId {
    /// Bitmask constructor. The empty set is the constant operator and is
    /// never part of a basis; it is absorbed into the normalization.
    pub fn from_mask(mask: u64) -> Result<Self> {
        if mask == 0 {
            return Err(AuditError::InvalidArgument {
                what: "operator",
                reason: "empty node set (the constant operator carries no coupling)".into(),
            });
        }
        Ok(OperatorId { mask })
    }

    pub fn from_indices(indices: &[usize]) -> Result<Self> {
        let mut mask = 0u64;
        for &i in indices {
            if i >= 64 {
                return Err(AuditError::InvalidArgument {
                    what: "operator",
                    reason: format!("node index {i} exceeds the 64-node packing limit"),
                });
            }
            if mask & (1u64 << i) != 0 {
                return Err(AuditError::InvalidArgument {
                    what: "operator",
                    reason: format!("node index {i} repeated"),
                });
            }
            mask |= 1u64 << i;
        }
        Self::from_mask(mask)
    }

    pub fn mask(&self) -> u64 {
        self.mask
    }

    /// Number of nodes in the product.
    pub fn degree(&self) -> usize {
        self.mask.count_ones() as usize
    }

    /// Ascending node indices.
    pub fn indices(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.degree());
        let mut m = self.mask;
        while m != 0 {
            out.push(m.trailing_zeros() as usize);
            m &= m - 1;
        }
        out
    }

    /// Product of spins `2*h_i - 1` over the member nodes of a packed
    /// configuration. The sign is the parity of zero-bits inside the mask.
    #[inline]
    pub fn evaluate_bits(&self, h: u64) -> f64 {
        let flips = self.mask.count_ones() + (h & self.mask).count_ones();
        if flips & 1 == 1 {
            -1.0
        } else {
            1.0
        }
    }

    /// Checked evaluation on an explicit 0/1 vector.
    pub fn evaluate(&self, h: &[u8]) -> Result<f64> {
        let mut packed = 0u64;
        for (i, &b) in h.iter().enumerate() {
            if b > 1 {
                return Err(AuditError::InvalidArgument {
                    what: "configuration",
                    reason: format!("entry {i} is {b}, nodes are 0/1"),
                });
            }
            if b == 1 && i < 64 {
                packed |= 1u64 << i;
            }
        }
        let top = 64 - self.mask.leading_zeros() as usize;
        if top > h.len() {
            return Err(AuditError::DimensionMismatch {
                context: "operator evaluation",
                expected: top,
                got: h.len(),
            });
        }
        Ok(self.evaluate_bits(packed))
    }
}

impl fmt::Display for OperatorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "O{:?}", self.indices())
    }
}

impl Serialize for OperatorId {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.indices().serialize(s)
    }
}

impl<'de> Deserialize<'de> for OperatorId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let indices = Vec::<usize>::deserialize(d)?;
        OperatorId::from_indices(&indices).map_err(D::Error::custom)
    }
}

/// All operators on `dimension` nodes up to `max_degree`, in canonical order:
/// degree-major, then lexicographic in the ascending index tuple. The order
/// is the contract every moment vector and stability matrix row follows.
#[derive(Clone, PartialEq, Eq, Debug, Serialize)]
pub struct OperatorBasis {
    dimension: usize,
    max_degree: usize,
    operators: Vec<OperatorId>,
    #[serde(skip)]
    index: BTreeMap<u64, usize>,
}

impl OperatorBasis {
    pub fn complete(dimension: usize, max_degree: usize) -> Result<Self> {
        if dimension == 0 || dimension > 64 {
            return Err(AuditError::InvalidArgument {
                what: "basis dimension",
                reason: format!("{dimension} nodes (need 1..=64)"),
            });
        }
        if max_degree == 0 || max_degree > dimension {
            return Err(AuditError::InvalidArgument {
                what: "basis degree",
                reason: format!("max degree {max_degree} with {dimension} nodes"),
            });
        }
        let mut operators = Vec::new();
        let mut combo = Vec::new();
        for degree in 1..=max_degree {
            combo.clear();
            combo.extend(0..degree);
            loop {
                let mut mask = 0u64;
                for &i in &combo {
                    mask |= 1u64 << i;
                }
                operators.push(OperatorId { mask });
                // Next index combination in lexicographic order.
                let mut pos = degree;
                while pos > 0 && combo[pos - 1] == dimension - degree + pos - 1 {
                    pos -= 1;
                }
                if pos == 0 {
                    break;
                }
                combo[pos - 1] += 1;
                for j in pos..degree {
                    combo[j] = combo[j - 1] + 1;
                }
            }
        }
        let index = operators
            .iter()
            .enumerate()
            .map(|(i, op)| (op.mask, i))
            .collect();
        Ok(OperatorBasis {
            dimension,
            max_degree,
            operators,
            index,
        })
    }

    /// Basis spanning every coupling of the distribution (degree up to the
    /// node count). Required by exact renormalization steps.
    pub fn full(dimension: usize) -> Result<Self> {
        Self::complete(dimension, dimension)
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn max_degree(&self) -> usize {
        self.max_degree
    }

    pub fn is_full(&self) -> bool {
        self.max_degree == self.dimension
    }

    pub fn len(&self) -> usize {
        self.operators.len()
    }

    pub fn is_empty(&self) -> bool {
        self.operators.is_empty()
    }

    pub fn operators(&self) -> &[OperatorId] {
        &self.operators
    }

    pub fn op(&self, i: usize) -> OperatorId {
        self.operators[i]
    }

    pub fn index_of(&self, op: OperatorId) -> Option<usize> {
        self.index.get(&op.mask()).copied()
    }

    /// Serialization form: one ascending index list per operator.
    pub fn to_index_lists(&self) -> Vec<Vec<usize>> {
        self.operators.iter().map(|op| op.indices()).collect()
    }
}

impl<'de> Deserialize<'de> for OperatorBasis {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            dimension: usize,
            max_degree: usize,
            operators: Vec<OperatorId>,
        }
        let raw = Raw::deserialize(d)?;
        let basis =
            OperatorBasis::complete(raw.dimension, raw.max_degree).map_err(D::Error::custom)?;
        if basis.operators != raw.operators {
            return Err(D::Error::custom(
                "operator list is not the canonical enumeration for its dimension and degree",
            ));
        }
        Ok(basis)
    }
}

/// Couplings `g_a`, one per basis operator, defining
/// `p(h) ~ exp(-sum_a g_a O_a(h))`.
#[derive(Clone, Debug)]
pub struct CouplingVector {
    pub basis: OperatorBasis,
    pub values: DVector<f64>,
}

impl CouplingVector {
    pub fn new(basis: OperatorBasis, values: DVector<f64>) -> Result<Self> {
        if values.len() != basis.len() {
            return Err(AuditError::DimensionMismatch {
                context: "coupling vector",
                expected: basis.len(),
                got: values.len(),
            });
        }
        Ok(CouplingVector { basis, values })
    }

    pub fn get(&self, op: OperatorId) -> Option<f64> {
        self.basis.index_of(op).map(|i| self.values[i])
    }
}

/// In-place fast Walsh-Hadamard transform (unnormalized):
/// `out[m] = sum_h (-1)^{popcount(m & h)} in[h]`. Self-inverse up to `1/len`.
pub fn fwht_inplace(v: &mut [f64]) {
    assert!(
        v.len().is_power_of_two(),
        "transform length must be a power of two"
    );
    let mut half = 1;
    while half < v.len() {
        for block in v.chunks_exact_mut(2 * half) {
            let (lo, hi) = block.split_at_mut(half);
            for (a, b) in lo.iter_mut().zip(hi.iter_mut()) {
                let (x, y) = (*a, *b);
                *a = x + y;
                *b = x - y;
            }
        }
        half <<= 1;
    }
}

fn check_table_len(probabilities: &[f64], dimension: usize) -> Result<()> {
    if dimension > MAX_TABLE_NODES {
        return Err(AuditError::InvalidArgument {
            what: "distribution",
            reason: format!("{dimension} nodes exceeds the dense-table cap of {MAX_TABLE_NODES}"),
        });
    }
    let expected = 1usize << dimension;
    if probabilities.len() != expected {
        return Err(AuditError::DimensionMismatch {
            context: "probability table",
            expected,
            got: probabilities.len(),
        });
    }
    Ok(())
}

fn check_normalized(probabilities: &[f64]) -> Result<()> {
    let mut sum = 0.0;
    for (h, &p) in probabilities.iter().enumerate() {
        if !p.is_finite() || p < 0.0 {
            return Err(AuditError::InvalidDistribution {
                reason: format!("entry {h} is {p}"),
            });
        }
        sum += p;
    }
    if (sum - 1.0).abs() > 1e-9 {
        return Err(AuditError::InvalidDistribution {
            reason: format!("total mass {sum}, expected 1"),
        });
    }
    Ok(())
}

/// Expectations of every spin-product operator at once:
/// `table[m] = <O_m>` for all masks `m`, with `table[0] = 1`.
pub fn moment_table(probabilities: &[f64], dimension: usize) -> Result<Vec<f64>> {
    check_table_len(probabilities, dimension)?;
    check_normalized(probabilities)?;
    let mut table = probabilities.to_vec();
    fwht_inplace(&mut table);
    for (m, t) in table.iter_mut().enumerate() {
        if (m as u64).count_ones() & 1 == 1 {
            *t = -*t;
        }
    }
    Ok(table)
}

/// Recovers couplings from a probability table by transforming `ln p`.
/// Entries are floored at `floor` first; a zero floor demands strictly
/// positive input instead.
pub fn couplings_from_distribution(
    probabilities: &[f64],
    basis: &OperatorBasis,
    floor: f64,
) -> Result<CouplingVector> {
    check_table_len(probabilities, basis.dimension())?;
    check_normalized(probabilities)?;
    if !(floor >= 0.0) || floor >= 1.0 {
        return Err(AuditError::InvalidArgument {
            what: "probability floor",
            reason: format!("{floor} (need 0 <= floor < 1)"),
        });
    }
    let mut logp = Vec::with_capacity(probabilities.len());
    for (h, &p) in probabilities.iter().enumerate() {
        let q = p.max(floor);
        if q <= 0.0 {
            return Err(AuditError::InvalidDistribution {
                reason: format!("entry {h} is zero and the floor is disabled"),
            });
        }
        logp.push(q.ln());
    }
    fwht_inplace(&mut logp);
    let scale = 1.0 / probabilities.len() as f64;
    let values = DVector::from_iterator(
        basis.len(),
        basis.operators().iter().map(|op| {
            let w = logp[op.mask() as usize];
            let sign = if op.degree() & 1 == 1 { 1.0 } else { -1.0 };
            // g_a = -(-1)^{|a|} W[ln p](a) / 2^n
            sign * w * scale
        }),
    );
    CouplingVector::new(basis.clone(), values)
}

/// Rebuilds the normalized probability table from couplings. Operators
/// missing from the basis carry zero coupling.
pub fn distribution_from_couplings(couplings: &CouplingVector) -> Result<Vec<f64>> {
    let n = couplings.basis.dimension();
    if n > MAX_TABLE_NODES {
        return Err(AuditError::InvalidArgument {
            what: "coupling vector",
            reason: format!("{n} nodes exceeds the dense-table cap of {MAX_TABLE_NODES}"),
        });
    }
    let mut u = vec![0.0; 1usize << n];
    for (i, op) in couplings.basis.operators().iter().enumerate() {
        let sign = if op.degree() & 1 == 1 { -1.0 } else { 1.0 };
        u[op.mask() as usize] = sign * couplings.values[i];
    }
    // H(h) = sum_a g_a O_a(h) is itself a Walsh transform of the signed
    // coupling table.
    fwht_inplace(&mut u);
    let max_neg_h = u.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    let mut p: Vec<f64> = u
        .iter()
        .map(|&h_val| {
            let w = (-h_val + max_neg_h).exp();
            total += w;
            w
        })
        .collect();
    for q in &mut p {
        *q /= total;
    }
    Ok(p)
}

/// Half the L1 distance between two probability tables.
pub fn total_variation(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(AuditError::DimensionMismatch {
            context: "total variation",
            expected: p.len(),
            got: q.len(),
        });
    }
    Ok(0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn basis_counts_match_binomial_sums() {
        assert_eq!(OperatorBasis::complete(2, 2).unwrap().len(), 3);
        assert_eq!(OperatorBasis::complete(4, 1).unwrap().len(), 4);
        assert_eq!(OperatorBasis::complete(4, 2).unwrap().len(), 10);
        assert_eq!(OperatorBasis::complete(4, 4).unwrap().len(), 15);
        assert_eq!(OperatorBasis::full(10).unwrap().len(), 1023);
    }

    #[test]
    fn basis_order_is_degree_major_then_lexicographic() {
        let basis = OperatorBasis::complete(4, 2).unwrap();
        let listed: Vec<Vec<usize>> = basis.to_index_lists();
        let expected: Vec<Vec<usize>> = vec![
            vec![0],
            vec![1],
            vec![2],
            vec![3],
            vec![0, 1],
            vec![0, 2],
            vec![0, 3],
            vec![1, 2],
            vec![1, 3],
            vec![2, 3],
        ];
        assert_eq!(listed, expected);
        // {0,3} precedes {1,2} even though its mask 0b1001 is larger.
        let b3 = OperatorBasis::complete(4, 4).unwrap();
        let i03 = b3
            .index_of(OperatorId::from_indices(&[0, 3]).unwrap())
            .unwrap();
        let i12 = b3
            .index_of(OperatorId::from_indices(&[1, 2]).unwrap())
            .unwrap();
        assert!(i03 < i12);
    }

    #[test]
    fn empty_operator_is_rejected() {
        assert!(OperatorId::from_mask(0).is_err());
        assert!(OperatorId::from_indices(&[]).is_err());
        assert!(OperatorId::from_indices(&[2, 2]).is_err());
    }

    #[test]
    fn evaluate_is_spin_product() {
        let op = OperatorId::from_indices(&[0, 2]).unwrap();
        assert_eq!(op.evaluate(&[1, 0, 1]).unwrap(), 1.0);
        assert_eq!(op.evaluate(&[0, 1, 1]).unwrap(), -1.0);
        assert_eq!(op.evaluate(&[0, 0, 0]).unwrap(), 1.0);
        assert_eq!(op.evaluate(&[1, 0, 0]).unwrap(), -1.0);
        assert!(op.evaluate(&[1, 0]).is_err());
        assert!(op.evaluate(&[1, 0, 2]).is_err());
    }

    #[test]
    fn fwht_matches_direct_sum() {
        let v = [0.3, -1.0, 0.25, 2.0, 0.0, 1.5, -0.5, 0.75];
        let mut fast = v;
        fwht_inplace(&mut fast);
        for m in 0..8usize {
            let direct: f64 = v
                .iter()
                .enumerate()
                .map(|(h, &x)| {
                    if (m & h).count_ones() & 1 == 1 {
                        -x
                    } else {
                        x
                    }
                })
                .sum();
            assert_abs_diff_eq!(fast[m], direct, epsilon = 1e-12);
        }
    }

    #[test]
    fn single_node_field_recovers_half_activation() {
        // p(h) ~ exp(a h) on one node maps to coupling g = -a/2 on the spin.
        let a: f64 = 0.5;
        let z = 1.0 + a.exp();
        let p = [1.0 / z, a.exp() / z];
        let basis = OperatorBasis::full(1).unwrap();
        let c = couplings_from_distribution(&p, &basis, 0.0).unwrap();
        assert_abs_diff_eq!(c.values[0], -0.25, epsilon = 1e-12);
    }

    #[test]
    fn uniform_distribution_has_zero_couplings() {
        let p = vec![1.0 / 16.0; 16];
        let basis = OperatorBasis::full(4).unwrap();
        let c = couplings_from_distribution(&p, &basis, DEFAULT_PROB_FLOOR).unwrap();
        for &g in c.values.iter() {
            assert_abs_diff_eq!(g, 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn moment_table_uses_xor_identity() {
        let p = [0.1, 0.2, 0.3, 0.4];
        let t = moment_table(&p, 2).unwrap();
        assert_abs_diff_eq!(t[0], 1.0, epsilon = 1e-12);
        // <s0> = -p00 + p01 - p10 + p11 (bit 0 is the low bit)
        assert_abs_diff_eq!(t[1], -0.1 + 0.2 - 0.3 + 0.4, epsilon = 1e-12);
        assert_abs_diff_eq!(t[2], -0.1 - 0.2 + 0.3 + 0.4, epsilon = 1e-12);
        assert_abs_diff_eq!(t[3], 0.1 - 0.2 - 0.3 + 0.4, epsilon = 1e-12);
    }

    #[test]
    fn zero_entry_without_floor_errors() {
        let p = [0.5, 0.5, 0.0, 0.0];
        let basis = OperatorBasis::full(2).unwrap();
        assert!(couplings_from_distribution(&p, &basis, 0.0).is_err());
        assert!(couplings_from_distribution(&p, &basis, DEFAULT_PROB_FLOOR).is_ok());
    }

    #[test]
    fn unnormalized_table_is_rejected() {
        let p = [0.5, 0.6];
        let basis = OperatorBasis::full(1).unwrap();
        assert!(couplings_from_distribution(&p, &basis, 0.0).is_err());
    }

    #[test]
    fn serde_round_trips_basis_as_index_lists() {
        let basis = OperatorBasis::complete(3, 2).unwrap();
        let json = serde_json::to_string(&basis).unwrap();
        assert!(json.contains("[0,1]"));
        let back: OperatorBasis = serde_json::from_str(&json).unwrap();
        assert_eq!(back, basis);
    }

    proptest! {
        #[test]
        fn couplings_round_trip_random_distributions(
            raw in proptest::collection::vec(0.05f64..1.0, 8),
        ) {
            let total: f64 = raw.iter().sum();
            let p: Vec<f64> = raw.iter().map(|x| x / total).collect();
            let basis = OperatorBasis::full(3).unwrap();
            let c = couplings_from_distribution(&p, &basis, 0.0).unwrap();
            let q = distribution_from_couplings(&c).unwrap();
            let tv = total_variation(&p, &q).unwrap();
            prop_assert!(tv < 1e-10, "round trip moved mass by {tv}");
        }

        #[test]
        fn operators_are_orthonormal_under_uniform(
            a in 1u64..16,
            b in 1u64..16,
        ) {
            let op_a = OperatorId::from_mask(a).unwrap();
            let op_b = OperatorId::from_mask(b).unwrap();
            let mean: f64 = (0..16u64)
                .map(|h| op_a.evaluate_bits(h) * op_b.evaluate_bits(h))
                .sum::<f64>() / 16.0;
            if a == b {
                prop_assert!((mean - 1.0).abs() < 1e-12);
            } else {
                prop_assert!(mean.abs() < 1e-12);
            }
        }
    }
}
