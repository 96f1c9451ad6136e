//! Stacked binary restricted Boltzmann machines and block-Gibbs-free
//! feed-forward sampling through them.
//!
//! Each layer holds a joint energy over its visible and hidden nodes; the
//! audit only ever conditions downward-to-upward, so propagation needs the
//! hidden-given-visible factor alone. Hidden nodes are conditionally
//! independent: `p(h_j = 1 | v) = logistic((W v + a)_j)`. The visible bias
//! `b` belongs to the joint energy and the training objective but drops out
//! of this conditional; it is kept in the model so files round-trip.

use crate::error::{AuditError, Result};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Saturation threshold: beyond this the logistic is 0 or 1 to double
/// precision, so sampling is deterministic.
#[cfg(test)]
const LOGISTIC_SATURATION: f64 = 36.0;

#[inline]
pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// One layer: `n_out` hidden nodes over `n_in` visible nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct RbmLayer {
    weights: DMatrix<f64>,
    hidden_bias: DVector<f64>,
    visible_bias: DVector<f64>,
}

impl RbmLayer {
    pub fn new(
        weights: DMatrix<f64>,
        hidden_bias: DVector<f64>,
        visible_bias: DVector<f64>,
    ) -> Result<Self> {
        if hidden_bias.len() != weights.nrows() {
            return Err(AuditError::DimensionMismatch {
                context: "hidden bias",
                expected: weights.nrows(),
                got: hidden_bias.len(),
            });
        }
        if visible_bias.len() != weights.ncols() {
            return Err(AuditError::DimensionMismatch {
                context: "visible bias",
                expected: weights.ncols(),
                got: visible_bias.len(),
            });
        }
        if weights.nrows() == 0 || weights.ncols() == 0 {
            return Err(AuditError::InvalidArgument {
                what: "layer shape",
                reason: format!("{}x{} weight matrix", weights.nrows(), weights.ncols()),
            });
        }
        for m in [&weights] {
            if m.iter().any(|x| !x.is_finite()) {
                return Err(AuditError::InvalidArgument {
                    what: "weights",
                    reason: "non-finite entry".into(),
                });
            }
        }
        if hidden_bias.iter().chain(visible_bias.iter()).any(|x| !x.is_finite()) {
            return Err(AuditError::InvalidArgument {
                what: "bias",
                reason: "non-finite entry".into(),
            });
        }
        Ok(RbmLayer {
            weights,
            hidden_bias,
            visible_bias,
        })
    }

    pub fn n_in(&self) -> usize {
        self.weights.ncols()
    }

    pub fn n_out(&self) -> usize {
        self.weights.nrows()
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn hidden_bias(&self) -> &DVector<f64> {
        &self.hidden_bias
    }

    pub fn visible_bias(&self) -> &DVector<f64> {
        &self.visible_bias
    }

    /// Pre-activation `W v + a` for a real-valued visible vector.
    pub fn activation(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        if v.len() != self.n_in() {
            return Err(AuditError::DimensionMismatch {
                context: "visible vector",
                expected: self.n_in(),
                got: v.len(),
            });
        }
        Ok(&self.weights * v + &self.hidden_bias)
    }

    /// `p(h_j = 1 | v)` for every hidden node. Visible entries must lie in
    /// the unit interval; mean-field activations of an earlier layer
    /// qualify.
    pub fn hidden_given_visible(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        if let Some(bad) = v.iter().find(|x| !(0.0..=1.0).contains(*x)) {
            return Err(AuditError::InvalidArgument {
                what: "visible vector",
                reason: format!("entry {bad} outside the unit interval"),
            });
        }
        let mut z = self.activation(v)?;
        z.apply(|x| *x = logistic(*x));
        Ok(z)
    }

    /// Same conditional for a packed 0/1 visible configuration.
    pub fn hidden_probs_bits(&self, v: u64) -> DVector<f64> {
        let mut z = self.hidden_bias.clone();
        let mut rest = v;
        while rest != 0 {
            let i = rest.trailing_zeros() as usize;
            z += self.weights.column(i);
            rest &= rest - 1;
        }
        z.apply(|x| *x = logistic(*x));
        z
    }
}

fn sample_bits_from_probs(probs: &DVector<f64>, rng: &mut impl Rng) -> u64 {
    let mut h = 0u64;
    for (j, &p) in probs.iter().enumerate() {
        if rng.gen::<f64>() < p {
            h |= 1u64 << j;
        }
    }
    h
}

/// One upward Gibbs draw from a packed visible configuration.
pub fn sample_layer(layer: &RbmLayer, visible: u64, rng: &mut impl Rng) -> u64 {
    let probs = layer.hidden_probs_bits(visible);
    sample_bits_from_probs(&probs, rng)
}

/// One upward Gibbs draw from a real-valued visible vector (layer one, where
/// the input lives in the unit cube).
pub fn sample_layer_real(layer: &RbmLayer, visible: &DVector<f64>, rng: &mut impl Rng) -> Result<u64> {
    let probs = layer.hidden_given_visible(visible)?;
    Ok(sample_bits_from_probs(&probs, rng))
}

/// Training provenance stored alongside the weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub cd_steps: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub head_epochs: usize,
    pub head_learning_rate: f64,
    pub train_accuracy: f64,
    pub n_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StackMeta {
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_classes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training: Option<TrainRecord>,
}

/// A feed-forward chain of layers; layer `k` reads the output of `k - 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct DeepStack {
    layers: Vec<RbmLayer>,
    meta: StackMeta,
}

impl DeepStack {
    pub fn new(layers: Vec<RbmLayer>, meta: StackMeta) -> Result<Self> {
        if layers.is_empty() {
            return Err(AuditError::InvalidArgument {
                what: "stack",
                reason: "no layers".into(),
            });
        }
        for k in 1..layers.len() {
            if layers[k].n_in() != layers[k - 1].n_out() {
                return Err(AuditError::DimensionMismatch {
                    context: "layer chaining",
                    expected: layers[k - 1].n_out(),
                    got: layers[k].n_in(),
                });
            }
        }
        Ok(DeepStack { layers, meta })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, k: usize) -> &RbmLayer {
        &self.layers[k]
    }

    pub fn layers(&self) -> &[RbmLayer] {
        &self.layers
    }

    pub fn meta(&self) -> &StackMeta {
        &self.meta
    }

    pub fn meta_mut(&mut self) -> &mut StackMeta {
        &mut self.meta
    }

    pub fn n_in(&self) -> usize {
        self.layers[0].n_in()
    }

    pub fn n_out(&self) -> usize {
        self.layers[self.depth() - 1].n_out()
    }

    /// Node counts from the input inward: `[n_in, n_1, ..., n_N]`.
    pub fn dims(&self) -> Vec<usize> {
        let mut d = Vec::with_capacity(self.depth() + 1);
        d.push(self.n_in());
        d.extend(self.layers.iter().map(|l| l.n_out()));
        d
    }
}

/// A point in the unit cube, optionally labeled.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputPoint {
    coordinates: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<usize>,
}

impl InputPoint {
    pub fn new(coordinates: Vec<f64>, label: Option<usize>) -> Result<Self> {
        if coordinates.is_empty() {
            return Err(AuditError::InvalidArgument {
                what: "input point",
                reason: "empty coordinate vector".into(),
            });
        }
        if let Some(bad) = coordinates.iter().find(|x| !(0.0..=1.0).contains(*x)) {
            return Err(AuditError::InvalidArgument {
                what: "input point",
                reason: format!("coordinate {bad} outside the unit interval"),
            });
        }
        Ok(InputPoint { coordinates, label })
    }

    pub fn from_bits(bits: &[u8], label: Option<usize>) -> Result<Self> {
        Self::new(bits.iter().map(|&b| f64::from(b)).collect(), label)
    }

    pub fn coordinates(&self) -> &[f64] {
        &self.coordinates
    }

    pub fn to_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.coordinates)
    }

    pub fn dim(&self) -> usize {
        self.coordinates.len()
    }

    pub fn label(&self) -> Option<usize> {
        self.label
    }
}

/// What the chains were conditioned on one level down.
#[derive(Clone, Debug, PartialEq)]
pub enum Parents {
    /// Layer one: every chain shares the same real-valued input.
    Input(Vec<f64>),
    /// Deeper layers: per-chain packed configurations of the layer below.
    Sampled(Vec<u64>),
}

/// Per-layer Monte Carlo sample, one entry per chain, in chain order.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerEnsemble {
    pub layer_index: usize,
    pub dim: usize,
    pub samples: Vec<u64>,
    pub parents: Parents,
    pub chain_ids: Vec<u32>,
}

impl LayerEnsemble {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Derives the independent stream for one chain. Streams, not reseeds, keep
/// every chain decorrelated while the whole run stays a pure function of the
/// root seed.
pub fn chain_rng(seed: u64, chain: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain);
    rng
}

/// Splitmix-style mix of a root seed with a stage tag and an index, so every
/// consumer of randomness in a run gets its own named stream while the whole
/// run remains a pure function of one seed.
pub fn derive_seed(root: u64, stage: u64, index: u64) -> u64 {
    let mut z = root
        ^ stage.wrapping_mul(0xA076_1D64_78BD_642F)
        ^ index.wrapping_mul(0xE703_7ED1_A0B4_28DB);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Runs `n_chains` independent single-sweep chains through every layer and
/// returns one ensemble per layer, paired by chain index. Chains run in
/// parallel but merge in chain order, so the result depends only on the
/// seed.
pub fn propagate(
    stack: &DeepStack,
    input: &InputPoint,
    n_chains: usize,
    seed: u64,
) -> Result<Vec<LayerEnsemble>> {
    if input.dim() != stack.n_in() {
        return Err(AuditError::DimensionMismatch {
            context: "propagation input",
            expected: stack.n_in(),
            got: input.dim(),
        });
    }
    if n_chains == 0 {
        return Err(AuditError::InvalidArgument {
            what: "chain count",
            reason: "zero chains".into(),
        });
    }
    let depth = stack.depth();
    let x = input.to_vector();
    let first_probs = stack.layer(0).hidden_given_visible(&x)?;

    let trajectories: Vec<Vec<u64>> = (0..n_chains)
        .into_par_iter()
        .map(|chain| {
            let mut rng = chain_rng(seed, chain as u64);
            let mut states = Vec::with_capacity(depth);
            let mut h = sample_bits_from_probs(&first_probs, &mut rng);
            states.push(h);
            for layer in &stack.layers()[1..] {
                h = sample_layer(layer, h, &mut rng);
                states.push(h);
            }
            states
        })
        .collect();

    let chain_ids: Vec<u32> = (0..n_chains as u32).collect();
    let mut ensembles = Vec::with_capacity(depth);
    for k in 0..depth {
        let samples: Vec<u64> = trajectories.iter().map(|t| t[k]).collect();
        let parents = if k == 0 {
            Parents::Input(input.coordinates().to_vec())
        } else {
            Parents::Sampled(trajectories.iter().map(|t| t[k - 1]).collect())
        };
        ensembles.push(LayerEnsemble {
            layer_index: k + 1,
            dim: stack.layer(k).n_out(),
            samples,
            parents,
            chain_ids: chain_ids.clone(),
        });
    }
    Ok(ensembles)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn unit_layer(w: f64, a: f64) -> RbmLayer {
        RbmLayer::new(
            DMatrix::from_row_slice(1, 1, &[w]),
            DVector::from_column_slice(&[a]),
            DVector::from_column_slice(&[0.0]),
        )
        .unwrap()
    }

    #[test]
    fn logistic_anchor_values() {
        assert_abs_diff_eq!(logistic(0.0), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(logistic(1.0), 0.7310585786300049, epsilon = 1e-12);
        assert_abs_diff_eq!(logistic(-1.0), 1.0 - 0.7310585786300049, epsilon = 1e-12);
        assert_eq!(logistic(2.0 * LOGISTIC_SATURATION), 1.0);
        assert!(logistic(-2.0 * LOGISTIC_SATURATION) < 1e-31);
    }

    #[test]
    fn conditional_matches_logistic_of_activation() {
        let layer = RbmLayer::new(
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.5, -0.5]),
            DVector::from_column_slice(&[0.0, 0.5]),
            DVector::from_column_slice(&[0.0, 0.0]),
        )
        .unwrap();
        let v = DVector::from_column_slice(&[1.0, 0.0]);
        let p = layer.hidden_given_visible(&v).unwrap();
        assert_abs_diff_eq!(p[0], logistic(1.0), epsilon = 1e-15);
        assert_abs_diff_eq!(p[1], logistic(1.0), epsilon = 1e-15);
        let packed = layer.hidden_probs_bits(0b01);
        assert_abs_diff_eq!(p[0], packed[0], epsilon = 1e-15);
        assert_abs_diff_eq!(p[1], packed[1], epsilon = 1e-15);
    }

    #[test]
    fn zero_weights_give_unbiased_coin() {
        let layer = unit_layer(0.0, 0.0);
        let p = layer.hidden_given_visible(&DVector::from_column_slice(&[0.3])).unwrap();
        assert_abs_diff_eq!(p[0], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn out_of_range_visible_is_rejected() {
        let layer = unit_layer(1.0, 0.0);
        assert!(layer
            .hidden_given_visible(&DVector::from_column_slice(&[1.2]))
            .is_err());
        assert!(InputPoint::new(vec![0.5, -0.1], None).is_err());
    }

    #[test]
    fn saturated_units_sample_deterministically() {
        let layer = unit_layer(0.0, 100.0);
        let mut rng = chain_rng(7, 0);
        for _ in 0..50 {
            assert_eq!(sample_layer(&layer, 0, &mut rng), 1);
        }
        let layer = unit_layer(0.0, -100.0);
        for _ in 0..50 {
            assert_eq!(sample_layer(&layer, 0, &mut rng), 0);
        }
    }

    #[test]
    fn propagation_is_deterministic_and_paired() {
        let stack = DeepStack::new(
            vec![
                RbmLayer::new(
                    DMatrix::from_row_slice(2, 2, &[0.8, -0.3, 0.1, 0.9]),
                    DVector::from_column_slice(&[0.1, -0.2]),
                    DVector::zeros(2),
                )
                .unwrap(),
                RbmLayer::new(
                    DMatrix::from_row_slice(2, 2, &[0.5, 0.5, -0.4, 0.2]),
                    DVector::from_column_slice(&[0.0, 0.3]),
                    DVector::zeros(2),
                )
                .unwrap(),
            ],
            StackMeta {
                seed: 11,
                n_classes: None,
                training: None,
            },
        )
        .unwrap();
        let x = InputPoint::new(vec![0.7, 0.2], None).unwrap();
        let a = propagate(&stack, &x, 500, 11).unwrap();
        let b = propagate(&stack, &x, 500, 11).unwrap();
        assert_eq!(a, b);
        let c = propagate(&stack, &x, 500, 12).unwrap();
        assert_ne!(a, c);

        assert_eq!(a.len(), 2);
        assert_eq!(a[0].layer_index, 1);
        assert_eq!(a[1].layer_index, 2);
        match (&a[1].parents, &a[0].samples) {
            (Parents::Sampled(p), s) => assert_eq!(p, s),
            _ => panic!("deep layer must record sampled parents"),
        }
        match &a[0].parents {
            Parents::Input(v) => assert_eq!(v, x.coordinates()),
            _ => panic!("first layer must record the input"),
        }
    }

    #[test]
    fn sampled_frequency_tracks_conditional() {
        let layer = unit_layer(2.0, -1.0);
        let p = logistic(1.0);
        let n = 100_000u64;
        let mut hits = 0u64;
        for chain in 0..n {
            let mut rng = chain_rng(3, chain);
            hits += sample_layer(&layer, 1, &mut rng);
        }
        let freq = hits as f64 / n as f64;
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        assert!(
            (freq - p).abs() < 3.0 * sigma,
            "frequency {freq} vs probability {p} (3 sigma = {})",
            3.0 * sigma
        );
    }

    #[test]
    fn stack_rejects_mismatched_chaining() {
        let l1 = RbmLayer::new(
            DMatrix::from_row_slice(3, 2, &[0.0; 6]),
            DVector::zeros(3),
            DVector::zeros(2),
        )
        .unwrap();
        let l2 = RbmLayer::new(
            DMatrix::from_row_slice(2, 2, &[0.0; 4]),
            DVector::zeros(2),
            DVector::zeros(2),
        )
        .unwrap();
        let meta = StackMeta {
            seed: 0,
            n_classes: None,
            training: None,
        };
        assert!(DeepStack::new(vec![l1, l2], meta).is_err());
    }
}
