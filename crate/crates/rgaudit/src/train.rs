//! Greedy layerwise training of a deep stack: contrastive divergence for the
//! representation layers, then a supervised logistic readout as the final
//! layer, whose units are grouped into one block per class.
//!
//! Training is single-threaded and fully determined by the root seed; every
//! stage draws from its own derived stream so stages stay independently
//! reproducible.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AuditError, Result};
use crate::rbm::{
    chain_rng, derive_seed, logistic, DeepStack, InputPoint, RbmLayer, StackMeta, TrainRecord,
};

/// Weight scale for fresh stacks.
pub const DEFAULT_INIT_SCALE: f64 = 0.1;

const STAGE_INIT: u64 = 0x494e_4954; // "INIT"
const STAGE_CD: u64 = 0x4344_4c57; // "CDLW"
const STAGE_HEAD: u64 = 0x4845_4144; // "HEAD"

/// Knobs for [`train_stack`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainOptions {
    /// Gibbs half-step pairs per contrastive-divergence update.
    pub cd_steps: usize,
    /// Passes over the data per representation layer.
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Passes over the data for the supervised readout layer.
    pub head_epochs: usize,
    pub head_learning_rate: f64,
    /// Scale of the random initialization.
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            cd_steps: 1,
            epochs: 30,
            learning_rate: 0.1,
            batch_size: 32,
            head_epochs: 300,
            head_learning_rate: 0.5,
            init_scale: DEFAULT_INIT_SCALE,
            seed: 0,
        }
    }
}

fn validate_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 {
        return Err(AuditError::InvalidArgument {
            what: "stack shape",
            reason: format!("need an input width and at least one layer, got {dims:?}"),
        });
    }
    if dims.iter().any(|&d| d == 0) {
        return Err(AuditError::InvalidArgument {
            what: "stack shape",
            reason: format!("zero-width layer in {dims:?}"),
        });
    }
    Ok(())
}

/// A fresh, untrained stack with centered uniform weights of the given
/// scale and zero biases. `dims` starts with the input width.
pub fn init_stack(
    dims: &[usize],
    n_classes: Option<usize>,
    seed: u64,
    scale: f64,
) -> Result<DeepStack> {
    validate_dims(dims)?;
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(AuditError::InvalidArgument {
            what: "weight scale",
            reason: format!("{scale}"),
        });
    }
    if let Some(c) = n_classes {
        if c == 0 || dims[dims.len() - 1] % c != 0 {
            return Err(AuditError::InvalidArgument {
                what: "class blocks",
                reason: format!(
                    "{} output units cannot split into {c} equal blocks",
                    dims[dims.len() - 1]
                ),
            });
        }
    }
    let mut layers = Vec::with_capacity(dims.len() - 1);
    for k in 0..dims.len() - 1 {
        let (n_in, n_out) = (dims[k], dims[k + 1]);
        let mut rng = chain_rng(derive_seed(seed, STAGE_INIT, k as u64), 0);
        let w = DMatrix::from_fn(n_out, n_in, |_, _| scale * (rng.gen::<f64>() * 2.0 - 1.0));
        layers.push(RbmLayer::new(
            w,
            DVector::zeros(n_out),
            DVector::zeros(n_in),
        )?);
    }
    DeepStack::new(
        layers,
        StackMeta {
            seed,
            n_classes,
            training: None,
        },
    )
}

/// Mean-field pass: each layer maps its parent's activation probabilities
/// through the logistic, with the raw input as the first parent. Returns
/// every layer's probability vector.
pub fn mean_field_forward(stack: &DeepStack, x: &InputPoint) -> Result<Vec<DVector<f64>>> {
    let mut out = Vec::with_capacity(stack.depth());
    let mut v = x.to_vector();
    for layer in stack.layers() {
        v = layer.hidden_given_visible(&v)?;
        out.push(v.clone());
    }
    Ok(out)
}

/// Mean activity of each class block of the deepest layer, under the
/// mean-field pass.
pub fn class_scores(stack: &DeepStack, x: &InputPoint, n_classes: usize) -> Result<Vec<f64>> {
    let n_out = stack.n_out();
    if n_classes == 0 || n_out % n_classes != 0 {
        return Err(AuditError::InvalidArgument {
            what: "class blocks",
            reason: format!("{n_out} output units cannot split into {n_classes} equal blocks"),
        });
    }
    let forward = mean_field_forward(stack, x)?;
    let deepest = forward.last().expect("stack depth is validated positive");
    let block = n_out / n_classes;
    let mut scores = vec![0.0; n_classes];
    for (j, p) in deepest.iter().enumerate() {
        scores[j / block] += p / block as f64;
    }
    Ok(scores)
}

/// Deterministic mean-field classification: the class block with the
/// highest mean activity, ties to the lowest class.
pub fn classify(stack: &DeepStack, x: &InputPoint, n_classes: usize) -> Result<usize> {
    Ok(crate::fim::argmax_class(&class_scores(stack, x, n_classes)?))
}

/// One contrastive-divergence epoch over shuffled minibatches. Visible
/// states are real-valued probabilities; hidden states are sampled binary
/// in the Gibbs chain, with probabilities used in the gradient estimate.
fn cd_epoch(
    w: &mut DMatrix<f64>,
    a: &mut DVector<f64>,
    b: &mut DVector<f64>,
    data: &[DVector<f64>],
    order: &[usize],
    opts: &TrainOptions,
    rng: &mut impl Rng,
) {
    let n_out = w.nrows();
    let n_in = w.ncols();
    for batch in order.chunks(opts.batch_size) {
        let mut dw = DMatrix::zeros(n_out, n_in);
        let mut da = DVector::zeros(n_out);
        let mut db = DVector::zeros(n_in);
        for &idx in batch {
            let v0 = &data[idx];
            let h0 = (w as &DMatrix<f64>) * v0 + a as &DVector<f64>;
            let h0 = h0.map(logistic);
            let mut h_sample = DVector::zeros(n_out);
            for j in 0..n_out {
                h_sample[j] = if rng.gen::<f64>() < h0[j] { 1.0 } else { 0.0 };
            }
            let mut vk = DVector::zeros(n_in);
            let mut hk = h0.clone();
            for step in 0..opts.cd_steps {
                if step > 0 {
                    for j in 0..n_out {
                        h_sample[j] = if rng.gen::<f64>() < hk[j] { 1.0 } else { 0.0 };
                    }
                }
                vk = (w.transpose() * &h_sample + b as &DVector<f64>).map(logistic);
                hk = ((w as &DMatrix<f64>) * &vk + a as &DVector<f64>).map(logistic);
            }
            dw += &h0 * v0.transpose() - &hk * vk.transpose();
            da += &h0 - &hk;
            db += v0 - &vk;
        }
        let scale = opts.learning_rate / batch.len() as f64;
        *w += dw * scale;
        *a += da * scale;
        *b += db * scale;
    }
}

/// Train a stack on labeled inputs. Representation layers learn by CD on
/// the mean-field activations of the layer below; the final layer is a
/// logistic readout trained to light up the true class block. The returned
/// stack records the run in its metadata.
pub fn train_stack(
    data: &[InputPoint],
    dims: &[usize],
    n_classes: usize,
    opts: &TrainOptions,
) -> Result<DeepStack> {
    validate_dims(dims)?;
    if data.is_empty() {
        return Err(AuditError::TooFewSamples { got: 0, min: 1 });
    }
    if opts.epochs == 0 && dims.len() > 2 {
        return Err(AuditError::InvalidArgument {
            what: "training epochs",
            reason: "zero epochs cannot train representation layers".into(),
        });
    }
    if opts.cd_steps == 0 || opts.batch_size == 0 || opts.head_epochs == 0 {
        return Err(AuditError::InvalidArgument {
            what: "training options",
            reason: "cd_steps, batch_size, and head_epochs must be positive".into(),
        });
    }
    let n_out = dims[dims.len() - 1];
    if n_classes == 0 || n_out % n_classes != 0 {
        return Err(AuditError::InvalidArgument {
            what: "class blocks",
            reason: format!("{n_out} output units cannot split into {n_classes} equal blocks"),
        });
    }
    for (i, x) in data.iter().enumerate() {
        if x.dim() != dims[0] {
            return Err(AuditError::DimensionMismatch {
                context: "training input",
                expected: dims[0],
                got: x.dim(),
            });
        }
        match x.label() {
            Some(y) if y < n_classes => {}
            Some(y) => {
                return Err(AuditError::InvalidArgument {
                    what: "training label",
                    reason: format!("sample {i} has label {y}, class count is {n_classes}"),
                });
            }
            None => {
                return Err(AuditError::InvalidArgument {
                    what: "training label",
                    reason: format!("sample {i} is unlabeled"),
                });
            }
        }
    }

    let base = init_stack(dims, Some(n_classes), opts.seed, opts.init_scale)?;
    let mut layers: Vec<RbmLayer> = base.layers().to_vec();
    let mut features: Vec<DVector<f64>> = data.iter().map(|x| x.to_vector()).collect();

    // Greedy unsupervised pass over all but the readout layer.
    for k in 0..layers.len() - 1 {
        let mut w = layers[k].weights().clone();
        let mut a = layers[k].hidden_bias().clone();
        let mut b = layers[k].visible_bias().clone();
        let mut rng = chain_rng(derive_seed(opts.seed, STAGE_CD, k as u64), 0);
        let mut order: Vec<usize> = (0..features.len()).collect();
        for _ in 0..opts.epochs {
            order.shuffle(&mut rng);
            cd_epoch(&mut w, &mut a, &mut b, &features, &order, opts, &mut rng);
        }
        layers[k] = RbmLayer::new(w, a, b)?;
        features = features
            .iter()
            .map(|v| layers[k].hidden_given_visible(v))
            .collect::<Result<Vec<_>>>()?;
    }

    // Supervised readout: cross-entropy on per-unit one-hot block targets.
    let head = layers.len() - 1;
    let block = n_out / n_classes;
    let targets: Vec<DVector<f64>> = data
        .iter()
        .map(|x| {
            let y = x.label().expect("labels validated above");
            DVector::from_fn(n_out, |j, _| if j / block == y { 1.0 } else { 0.0 })
        })
        .collect();
    {
        let mut w = layers[head].weights().clone();
        let mut a = layers[head].hidden_bias().clone();
        let b = layers[head].visible_bias().clone();
        let mut rng = chain_rng(derive_seed(opts.seed, STAGE_HEAD, 0), 0);
        let mut order: Vec<usize> = (0..features.len()).collect();
        for _ in 0..opts.head_epochs {
            order.shuffle(&mut rng);
            for batch in order.chunks(opts.batch_size) {
                let mut dw = DMatrix::zeros(n_out, w.ncols());
                let mut da = DVector::zeros(n_out);
                for &idx in batch {
                    let z = &features[idx];
                    let p = ((&w) * z + &a).map(logistic);
                    let err = &targets[idx] - p;
                    dw += &err * z.transpose();
                    da += err;
                }
                let scale = opts.head_learning_rate / batch.len() as f64;
                w += dw * scale;
                a += da * scale;
            }
        }
        layers[head] = RbmLayer::new(w, a, b)?;
    }

    let mut stack = DeepStack::new(
        layers,
        StackMeta {
            seed: opts.seed,
            n_classes: Some(n_classes),
            training: None,
        },
    )?;
    let mut hits = 0usize;
    for x in data {
        if classify(&stack, x, n_classes)? == x.label().expect("validated") {
            hits += 1;
        }
    }
    stack.meta_mut().training = Some(TrainRecord {
        cd_steps: opts.cd_steps,
        epochs: opts.epochs,
        learning_rate: opts.learning_rate,
        head_epochs: opts.head_epochs,
        head_learning_rate: opts.head_learning_rate,
        train_accuracy: hits as f64 / data.len() as f64,
        n_samples: data.len(),
    });
    Ok(stack)
}
