//! Hand-built demonstration stacks with known stability behavior.
//!
//! [`expanding_stack`] was found by direct numeric search over small
//! stacks: analyzed in the degree-1 operator basis, its second transition
//! carries a stability eigenvalue of modulus about 1.59 at the probe input,
//! while its first transition contracts (modulus about 0.66). The matched
//! negative control [`copy_stack`] replaces the last kernel with a
//! saturated per-node copy whose stability matrix is the identity in any
//! basis, so every mode sits exactly on modulus one.
//!
//! Two structural facts shaped the construction. First, the child ensemble
//! one kernel step after a fixed input is an independent-node (product)
//! measure, and a search over full-basis linear-response solves at such
//! points never found a modulus above one; correlations in the parent
//! ensemble are what make expansion possible, and those first appear at
//! the second transition of a deep stack. Second, even at a correlated
//! parent the full-basis solve equals the exact coupling-map Jacobian of a
//! stochastic kernel and stayed non-expanding in every searched
//! configuration; expansion shows up once the analysis basis is truncated,
//! which is precisely how the stability matrix is computed in practice.
//! Feedback from the dropped operators, channeled through an
//! ill-conditioned parent covariance, is what pushes retained modes past
//! modulus one.

use nalgebra::{DMatrix, DVector};

use crate::error::Result;
use crate::rbm::{DeepStack, InputPoint, RbmLayer, StackMeta};

/// First-layer weights (2 x 4, row-major) shared by both deep fixtures.
pub const FIRST_WEIGHTS: [f64; 8] = [
    -1.999602, 1.481461, 1.813810, -0.363122, -4.022741, -2.592881, -3.377049, -4.537708,
];
/// First-layer hidden biases shared by both deep fixtures.
pub const FIRST_BIAS: [f64; 2] = [-1.805841, 8.832495];
/// Second-layer weights (2 x 2, row-major); builds the correlated parent
/// ensemble the expanding kernel feeds on.
pub const SECOND_WEIGHTS: [f64; 4] = [-4.600432, 9.146177, 7.635538, -3.954726];
/// Second-layer hidden biases.
pub const SECOND_BIAS: [f64; 2] = [-6.171786, -0.688177];
/// Expanding third-layer weights (2 x 2, row-major).
pub const EXPANDING_WEIGHTS: [f64; 4] = [10.896905, -11.976431, -11.985443, -11.974566];
/// Expanding third-layer hidden biases.
pub const EXPANDING_BIAS: [f64; 2] = [7.131577, 4.337416];
/// Gain of the saturated copy kernel: `W = 2g I`, `a = -g 1` pins each
/// output node to its input node to double precision.
pub const COPY_GAIN: f64 = 40.0;

/// The analysis operates on single-node operators for these fixtures.
pub const FIXTURE_MAX_DEGREE: usize = 1;

fn shared_front() -> Result<(RbmLayer, RbmLayer)> {
    let l1 = RbmLayer::new(
        DMatrix::from_row_slice(2, 4, &FIRST_WEIGHTS),
        DVector::from_column_slice(&FIRST_BIAS),
        DVector::zeros(4),
    )?;
    let l2 = RbmLayer::new(
        DMatrix::from_row_slice(2, 2, &SECOND_WEIGHTS),
        DVector::from_column_slice(&SECOND_BIAS),
        DVector::zeros(2),
    )?;
    Ok((l1, l2))
}

fn meta() -> StackMeta {
    StackMeta {
        seed: 0,
        n_classes: Some(2),
        training: None,
    }
}

/// A saturated per-node copy layer: each output bit equals its input bit.
pub fn copy_layer(nodes: usize) -> Result<RbmLayer> {
    let w = DMatrix::from_fn(nodes, nodes, |r, c| {
        if r == c {
            2.0 * COPY_GAIN
        } else {
            0.0
        }
    });
    RbmLayer::new(
        w,
        DVector::from_element(nodes, -COPY_GAIN),
        DVector::zeros(nodes),
    )
}

/// Three-layer stack (4 -> 2 -> 2 -> 2) whose second transition expands in
/// the degree-1 basis at [`probe_input`]: exact modulus about 1.59.
pub fn expanding_stack() -> Result<DeepStack> {
    let (l1, l2) = shared_front()?;
    let l3 = RbmLayer::new(
        DMatrix::from_row_slice(2, 2, &EXPANDING_WEIGHTS),
        DVector::from_column_slice(&EXPANDING_BIAS),
        DVector::zeros(2),
    )?;
    DeepStack::new(vec![l1, l2, l3], meta())
}

/// Same front layers as [`expanding_stack`], but the third kernel is a
/// saturated copy, so its stability matrix is the identity: every mode has
/// modulus exactly one and none should be flagged.
pub fn copy_stack() -> Result<DeepStack> {
    let (l1, l2) = shared_front()?;
    DeepStack::new(vec![l1, l2, copy_layer(2)?], meta())
}

/// A single saturated copy layer on four nodes: no transitions to analyze
/// at all, the simplest model the audit should call robust.
pub fn single_copy_stack() -> Result<DeepStack> {
    DeepStack::new(vec![copy_layer(4)?], meta())
}

/// The input at which the expanding direction was engineered.
pub fn probe_input() -> InputPoint {
    InputPoint::new(vec![1.0, 1.0, 0.0, 0.0], None).expect("valid coordinates")
}
