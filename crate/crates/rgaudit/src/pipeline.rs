//! End-to-end plumbing: the synthetic benchmark task, dataset and model
//! file formats, the audit orchestration that writes the report bundle, and
//! the oracle suite comparing every estimator against its exact counterpart.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AuditError, Result};
use crate::exact::{
    exact_kl, exact_layer_distribution, fim_fd, jacobian_fd, DEFAULT_ENUM_LIMIT, DEFAULT_FIM_STEP,
    DEFAULT_JACOBIAN_STEP, DEFAULT_KL_FLOOR,
};
use crate::fim::{
    assemble_fim, chain_jacobian, evaluate_attack, exact_class_posterior, first_layer_jacobian,
    top_mode, AdversarialReport, AttackOptions, FimMatrix, JacobianMethod, StiffMode,
    DEFAULT_ATTACK_SAMPLES,
};
use crate::mcrg::{
    flow_report, solve_stability, EigenMode, ExpectationSet, FlowOptions, FlowSummary, InputFlow,
    StabilityOptions, DEFAULT_BOOTSTRAP_RESAMPLES, DEFAULT_REGULARIZATION,
    DEFAULT_RELEVANCE_MARGIN,
};
use crate::operators::{
    couplings_from_distribution, distribution_from_couplings, total_variation, OperatorBasis,
    DEFAULT_PROB_FLOOR,
};
use crate::rbm::{chain_rng, derive_seed, DeepStack, InputPoint, RbmLayer, StackMeta};
use crate::train::{train_stack, TrainOptions};

const STAGE_DATA: u64 = 0x4441_5441; // "DATA"
const STAGE_TRAIN: u64 = 0x5452_4149; // "TRAI"
const STAGE_AUDIT_FLOW: u64 = 0x4155_4446; // "AUDF"
const STAGE_AUDIT_ATTACK: u64 = 0x4155_4441; // "AUDA"
const STAGE_ORACLE: u64 = 0x4f52_4143; // "ORAC"

/// The synthetic benchmark: each class is a bit prototype, observed through
/// independent per-bit flip noise. Its class posterior is closed-form, which
/// makes the deep stack's readout directly checkable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub n_in: usize,
    pub n_classes: usize,
    /// One bit pattern per class, all distinct.
    pub prototypes: Vec<Vec<u8>>,
    /// Per-bit flip probability, in `[0, 0.5)`.
    pub flip_noise: f64,
    /// Class priors: positive, summing to one.
    pub priors: Vec<f64>,
    pub seed: u64,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_in == 0 || self.n_in > 63 {
            return Err(AuditError::config(format!(
                "input width {} out of range 1..=63",
                self.n_in
            )));
        }
        if self.n_classes == 0 {
            return Err(AuditError::config("class count must be positive"));
        }
        if self.prototypes.len() != self.n_classes {
            return Err(AuditError::config(format!(
                "{} prototypes for {} classes",
                self.prototypes.len(),
                self.n_classes
            )));
        }
        for (c, proto) in self.prototypes.iter().enumerate() {
            if proto.len() != self.n_in {
                return Err(AuditError::config(format!(
                    "prototype {c} has {} bits, input width is {}",
                    proto.len(),
                    self.n_in
                )));
            }
            if proto.iter().any(|&b| b > 1) {
                return Err(AuditError::config(format!(
                    "prototype {c} contains a non-bit entry"
                )));
            }
            for (d, other) in self.prototypes.iter().enumerate().take(c) {
                if proto == other {
                    return Err(AuditError::config(format!(
                        "prototypes {d} and {c} are identical"
                    )));
                }
            }
        }
        if !(0.0..0.5).contains(&self.flip_noise) {
            return Err(AuditError::config(format!(
                "flip noise {} outside [0, 0.5)",
                self.flip_noise
            )));
        }
        if self.priors.len() != self.n_classes {
            return Err(AuditError::config(format!(
                "{} priors for {} classes",
                self.priors.len(),
                self.n_classes
            )));
        }
        if self.priors.iter().any(|&p| !(p > 0.0) || !p.is_finite()) {
            return Err(AuditError::config("priors must be positive"));
        }
        let total: f64 = self.priors.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(AuditError::config(format!("priors sum to {total}, not 1")));
        }
        Ok(())
    }

    /// Uniform-prior two-class task on eight bits; the worked example used
    /// throughout the documentation.
    pub fn example() -> Self {
        TaskSpec {
            n_in: 8,
            n_classes: 2,
            prototypes: vec![vec![1, 1, 1, 1, 0, 0, 0, 0], vec![0, 0, 0, 0, 1, 1, 1, 1]],
            flip_noise: 0.1,
            priors: vec![0.5, 0.5],
            seed: 7,
        }
    }

    /// Closed-form class posterior of a binary observation: the prior times
    /// the flip-noise likelihood, normalized. Likelihoods vanish entirely
    /// only with zero noise and an off-prototype observation.
    pub fn posterior(&self, bits: &[u8]) -> Result<Vec<f64>> {
        if bits.len() != self.n_in {
            return Err(AuditError::DimensionMismatch {
                context: "posterior input",
                expected: self.n_in,
                got: bits.len(),
            });
        }
        let rho = self.flip_noise;
        let mut masses = Vec::with_capacity(self.n_classes);
        for (proto, prior) in self.prototypes.iter().zip(&self.priors) {
            let flips = proto.iter().zip(bits).filter(|(a, b)| a != b).count();
            let keeps = self.n_in - flips;
            masses.push(prior * rho.powi(flips as i32) * (1.0 - rho).powi(keeps as i32));
        }
        let total: f64 = masses.iter().sum();
        if total <= 0.0 {
            return Err(AuditError::InvalidDistribution {
                reason: "observation is impossible under every class".into(),
            });
        }
        for m in &mut masses {
            *m /= total;
        }
        Ok(masses)
    }

    /// Draw one labeled observation.
    pub fn sample(&self, rng: &mut impl Rng) -> (Vec<u8>, usize) {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut class = self.n_classes - 1;
        for (c, &p) in self.priors.iter().enumerate() {
            acc += p;
            if u < acc {
                class = c;
                break;
            }
        }
        let bits = self.prototypes[class]
            .iter()
            .map(|&b| {
                if rng.gen::<f64>() < self.flip_noise {
                    1 - b
                } else {
                    b
                }
            })
            .collect();
        (bits, class)
    }
}

/// One run's worth of settings, loaded from a JSON file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub task: TaskSpec,
    /// Hidden-layer widths; the input width comes from the task.
    pub layers: Vec<usize>,
    /// Dataset size drawn by `gen-data`.
    #[serde(default = "default_n_samples")]
    pub n_samples: usize,
    /// Monte Carlo chains per audited input.
    #[serde(default = "default_n_chains")]
    pub n_chains: usize,
    /// Operator basis truncation for the flow analysis.
    #[serde(default = "default_max_degree")]
    pub max_degree: usize,
    #[serde(default = "default_regularization")]
    pub regularization: f64,
    #[serde(default = "default_relevance_margin")]
    pub relevance_margin: f64,
    #[serde(default = "default_bootstrap_resamples")]
    pub bootstrap_resamples: usize,
    /// Perturbation sizes swept by the attack stage; strictly positive.
    #[serde(default = "default_epsilons")]
    pub epsilons: Vec<f64>,
    /// Chains per attack evaluation when the stack is too wide to enumerate.
    #[serde(default = "default_attack_samples")]
    pub attack_samples: usize,
    /// How many dataset rows the audit covers.
    #[serde(default = "default_audit_inputs")]
    pub audit_inputs: usize,
    #[serde(default = "default_enum_limit")]
    pub enum_limit: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub train: TrainOptions,
    /// Directory receiving every artifact.
    pub out_dir: PathBuf,
}

fn default_n_samples() -> usize {
    2_000
}
fn default_n_chains() -> usize {
    1_000_000
}
fn default_max_degree() -> usize {
    2
}
fn default_regularization() -> f64 {
    DEFAULT_REGULARIZATION
}
fn default_relevance_margin() -> f64 {
    DEFAULT_RELEVANCE_MARGIN
}
fn default_bootstrap_resamples() -> usize {
    DEFAULT_BOOTSTRAP_RESAMPLES
}
fn default_epsilons() -> Vec<f64> {
    vec![0.001, 0.01, 0.05]
}
fn default_attack_samples() -> usize {
    DEFAULT_ATTACK_SAMPLES
}
fn default_audit_inputs() -> usize {
    2
}
fn default_enum_limit() -> usize {
    DEFAULT_ENUM_LIMIT
}

impl RunConfig {
    /// A complete desk-scale configuration around [`TaskSpec::example`].
    pub fn example(out_dir: impl Into<PathBuf>) -> Self {
        RunConfig {
            task: TaskSpec::example(),
            layers: vec![6, 4],
            n_samples: default_n_samples(),
            n_chains: default_n_chains(),
            max_degree: default_max_degree(),
            regularization: default_regularization(),
            relevance_margin: default_relevance_margin(),
            bootstrap_resamples: default_bootstrap_resamples(),
            epsilons: default_epsilons(),
            attack_samples: default_attack_samples(),
            audit_inputs: default_audit_inputs(),
            enum_limit: default_enum_limit(),
            seed: 12345,
            train: TrainOptions::default(),
            out_dir: out_dir.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        if self.layers.is_empty() {
            return Err(AuditError::config("no hidden layers configured"));
        }
        if self.layers.iter().any(|&w| w == 0 || w > 63) {
            return Err(AuditError::config(format!(
                "layer widths {:?} must lie in 1..=63",
                self.layers
            )));
        }
        if self.n_samples == 0
            || self.n_chains == 0
            || self.attack_samples == 0
            || self.audit_inputs == 0
        {
            return Err(AuditError::config("sample counts must be positive"));
        }
        if self.max_degree == 0 {
            return Err(AuditError::config("basis degree must be positive"));
        }
        if self.epsilons.is_empty()
            || self
                .epsilons
                .iter()
                .any(|&e| !e.is_finite() || e <= 0.0)
        {
            return Err(AuditError::config(
                "epsilon sweep must be non-empty and strictly positive",
            ));
        }
        if !(self.regularization >= 0.0) || !(self.relevance_margin >= 0.0) {
            return Err(AuditError::config(
                "regularization and relevance margin must be non-negative",
            ));
        }
        if self.out_dir.as_os_str().is_empty() {
            return Err(AuditError::config("output directory is empty"));
        }
        Ok(())
    }

    /// Full stack shape: input width then hidden widths.
    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.task.n_in];
        d.extend_from_slice(&self.layers);
        d
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.out_dir.join("dataset.jsonl")
    }
    pub fn task_path(&self) -> PathBuf {
        self.out_dir.join("dataset.task.json")
    }
    pub fn model_path(&self) -> PathBuf {
        self.out_dir.join("model.json")
    }
    pub fn flow_path(&self) -> PathBuf {
        self.out_dir.join("flow.json")
    }
    pub fn fim_path(&self) -> PathBuf {
        self.out_dir.join("fim.json")
    }
    pub fn attack_path(&self) -> PathBuf {
        self.out_dir.join("attack.json")
    }
    pub fn eigs_csv_path(&self) -> PathBuf {
        self.out_dir.join("eigs_vs_depth.csv")
    }
    pub fn kl_csv_path(&self) -> PathBuf {
        self.out_dir.join("kl_vs_eps.csv")
    }
    pub fn fim_csv_path(&self) -> PathBuf {
        self.out_dir.join("fim_spectrum.csv")
    }
    pub fn oracle_path(&self) -> PathBuf {
        self.out_dir.join("oracle.json")
    }
}

/// Parse and validate a config file.
pub fn load_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| AuditError::io(path, e))?;
    let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| AuditError::json(path, e))?;
    cfg.validate()?;
    Ok(cfg)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| AuditError::io(dir, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| AuditError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| AuditError::json(path, e))?;
    bytes.push(b'\n');
    write_bytes(path, &bytes)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| AuditError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| AuditError::json(path, e))
}

// ---------------------------------------------------------------------------
// Dataset file: one JSON object per line, {"x": [bits], "y": class}.

#[derive(Serialize, Deserialize)]
struct DatasetRow {
    x: Vec<f64>,
    y: usize,
}

/// Draw the configured dataset and write it with its task sidecar.
pub fn gen_data(cfg: &RunConfig) -> Result<GenDataSummary> {
    cfg.validate()?;
    let mut rng = chain_rng(derive_seed(cfg.seed, STAGE_DATA, 0), 0);
    let mut lines = Vec::with_capacity(cfg.n_samples);
    for _ in 0..cfg.n_samples {
        let (bits, y) = cfg.task.sample(&mut rng);
        let row = DatasetRow {
            x: bits.iter().map(|&b| b as f64).collect(),
            y,
        };
        lines.push(serde_json::to_string(&row).expect("row serialization cannot fail"));
    }
    let mut text = lines.join("\n");
    text.push('\n');
    let path = cfg.dataset_path();
    write_bytes(&path, text.as_bytes())?;
    let sidecar = cfg.task_path();
    write_json(&sidecar, &cfg.task)?;
    Ok(GenDataSummary {
        dataset: path,
        sidecar,
        n_samples: cfg.n_samples,
    })
}

#[derive(Clone, Debug)]
pub struct GenDataSummary {
    pub dataset: PathBuf,
    pub sidecar: PathBuf,
    pub n_samples: usize,
}

/// Load a JSON-lines dataset; every entry must be a bit and every row must
/// parse, with violations reported by line number.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<InputPoint>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| AuditError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: DatasetRow =
            serde_json::from_str(line).map_err(|e| AuditError::DatasetSchema {
                line: i + 1,
                reason: e.to_string(),
            })?;
        let mut bits = Vec::with_capacity(row.x.len());
        for (j, &v) in row.x.iter().enumerate() {
            if v == 0.0 || v == 1.0 {
                bits.push(v as u8);
            } else {
                return Err(AuditError::DatasetSchema {
                    line: i + 1,
                    reason: format!("x[{j}] = {v} is not a bit"),
                });
            }
        }
        out.push(
            InputPoint::from_bits(&bits, Some(row.y)).map_err(|e| AuditError::DatasetSchema {
                line: i + 1,
                reason: e.to_string(),
            })?,
        );
    }
    if out.is_empty() {
        return Err(AuditError::DatasetSchema {
            line: 0,
            reason: "dataset holds no rows".into(),
        });
    }
    Ok(out)
}

/// Load the task sidecar written next to a dataset.
pub fn load_task(path: impl AsRef<Path>) -> Result<TaskSpec> {
    let task: TaskSpec = read_json(path.as_ref())?;
    task.validate()?;
    Ok(task)
}

// ---------------------------------------------------------------------------
// Model file: {"layers": [{"W": rows, "a": [...], "b": [...]}], "meta": {...}}

#[derive(Serialize, Deserialize)]
struct LayerDoc {
    #[serde(rename = "W")]
    w: Vec<Vec<f64>>,
    a: Vec<f64>,
    b: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ModelDoc {
    layers: Vec<LayerDoc>,
    meta: StackMeta,
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|r| m.row(r).iter().copied().collect())
        .collect()
}

pub fn save_model(stack: &DeepStack, path: impl AsRef<Path>) -> Result<()> {
    let doc = ModelDoc {
        layers: stack
            .layers()
            .iter()
            .map(|l| LayerDoc {
                w: matrix_rows(l.weights()),
                a: l.hidden_bias().iter().copied().collect(),
                b: l.visible_bias().iter().copied().collect(),
            })
            .collect(),
        meta: stack.meta().clone(),
    };
    write_json(path.as_ref(), &doc)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<DeepStack> {
    let path = path.as_ref();
    let doc: ModelDoc = read_json(path)?;
    let mut layers = Vec::with_capacity(doc.layers.len());
    for (k, l) in doc.layers.iter().enumerate() {
        let n_out = l.w.len();
        if n_out == 0 || l.w.iter().any(|row| row.len() != l.w[0].len()) {
            return Err(AuditError::config(format!(
                "model layer {k} has a ragged or empty weight matrix"
            )));
        }
        let n_in = l.w[0].len();
        let w = DMatrix::from_fn(n_out, n_in, |r, c| l.w[r][c]);
        layers.push(RbmLayer::new(
            w,
            DVector::from_column_slice(&l.a),
            DVector::from_column_slice(&l.b),
        )?);
    }
    DeepStack::new(layers, doc.meta)
}

/// Train on the generated dataset and persist the model. At most
/// `cfg.n_samples` rows are used, so lowering that below the stored dataset
/// size trains on a prefix.
pub fn run_train(cfg: &RunConfig) -> Result<TrainSummary> {
    cfg.validate()?;
    let mut data = load_dataset(cfg.dataset_path())?;
    data.truncate(cfg.n_samples);
    let mut opts = cfg.train.clone();
    opts.seed = derive_seed(cfg.seed, STAGE_TRAIN, 0);
    let stack = train_stack(&data, &cfg.dims(), cfg.task.n_classes, &opts)?;
    let path = cfg.model_path();
    save_model(&stack, &path)?;
    let accuracy = stack
        .meta()
        .training
        .as_ref()
        .map(|t| t.train_accuracy)
        .unwrap_or(0.0);
    Ok(TrainSummary {
        model: path,
        train_accuracy: accuracy,
        n_samples: data.len(),
    })
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub model: PathBuf,
    pub train_accuracy: f64,
    pub n_samples: usize,
}

/// Mean divergence from the task's closed-form class posterior to the
/// stack's exact readout over the given binary inputs. This is the working
/// assumption behind the whole audit: a trained stack should carry `p(y|x)`
/// to its deepest layer.
pub fn mean_posterior_divergence(
    stack: &DeepStack,
    task: &TaskSpec,
    inputs: &[InputPoint],
    limit: usize,
) -> Result<f64> {
    if inputs.is_empty() {
        return Err(AuditError::InvalidArgument {
            what: "premise inputs",
            reason: "empty input list".into(),
        });
    }
    let mut total = 0.0;
    for x in inputs {
        let bits: Vec<u8> = x.coordinates().iter().map(|&v| v as u8).collect();
        let p = task.posterior(&bits)?;
        let q = exact_class_posterior(stack, x, task.n_classes, limit)?;
        total += exact_kl(&p, &q, DEFAULT_KL_FLOOR)?;
    }
    Ok(total / inputs.len() as f64)
}

// ---------------------------------------------------------------------------
// Audit report documents. These mirror the in-memory results with plain
// nested lists so every artifact is a stable, parseable schema.

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TransitionDoc {
    pub from_layer: usize,
    pub to_layer: usize,
    pub t: Vec<Vec<f64>>,
    pub t_stderr: Option<Vec<Vec<f64>>>,
    pub condition_number: Option<f64>,
    pub regularization: f64,
    pub lambda: f64,
    pub bootstrap_resamples: usize,
    pub eigenmodes: Vec<EigenMode>,
    pub has_relevant_mode: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InputFlowDoc {
    pub input_index: usize,
    pub label: Option<usize>,
    /// Coupling-space distance between consecutive layers, where bases match.
    pub consecutive_distance: Vec<Option<f64>>,
    pub transitions: Vec<TransitionDoc>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClassCohesionDoc {
    pub label: usize,
    pub inputs: usize,
    pub mean_within: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FlowDoc {
    pub n_chains: usize,
    pub max_degree: usize,
    pub inputs: Vec<InputFlowDoc>,
    pub per_class: Vec<ClassCohesionDoc>,
    pub mean_across_classes: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FimDoc {
    pub input_index: usize,
    /// Layer whose operator covariance supplied the metric.
    pub layer_index: usize,
    pub matrix: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
    pub top: StiffMode,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IndexedReport {
    pub input_index: usize,
    pub report: AdversarialReport,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttackDoc {
    /// "vulnerable" or "robust"; recomputable from the bundle contents.
    pub verdict: String,
    pub smallest_epsilon: f64,
    pub reports: Vec<IndexedReport>,
}

fn flow_to_doc(flows: &[InputFlow], summary: &FlowSummary, cfg: &RunConfig) -> FlowDoc {
    FlowDoc {
        n_chains: cfg.n_chains,
        max_degree: cfg.max_degree,
        inputs: flows
            .iter()
            .map(|f| InputFlowDoc {
                input_index: f.input_index,
                label: f.label,
                consecutive_distance: f.consecutive_distance.clone(),
                transitions: f
                    .transitions
                    .iter()
                    .map(|t| TransitionDoc {
                        from_layer: t.from_layer,
                        to_layer: t.to_layer,
                        t: matrix_rows(&t.t),
                        t_stderr: t.t_stderr.as_ref().map(matrix_rows),
                        condition_number: t.condition_number,
                        regularization: t.regularization,
                        lambda: t.lambda,
                        bootstrap_resamples: t.bootstrap_resamples,
                        eigenmodes: t.eigenmodes.clone(),
                        has_relevant_mode: t.has_relevant_mode(),
                    })
                    .collect(),
            })
            .collect(),
        per_class: summary
            .per_class
            .iter()
            .map(|c| ClassCohesionDoc {
                label: c.label,
                inputs: c.inputs,
                mean_within: c.mean_within,
            })
            .collect(),
        mean_across_classes: summary.mean_across,
    }
}

/// The verdict rule, applied to report documents alone so it can be
/// recomputed from the written bundle: some input must both carry a
/// relevant mode in its flow and show the probed stiff direction beating
/// the control at the smallest swept step.
pub fn recompute_verdict(flow: &FlowDoc, attack: &AttackDoc) -> String {
    let eps = attack.smallest_epsilon;
    let vulnerable = flow.inputs.iter().any(|f| {
        let relevant = f.transitions.iter().any(|t| t.has_relevant_mode);
        if !relevant {
            return false;
        }
        attack
            .reports
            .iter()
            .filter(|r| r.input_index == f.input_index)
            .any(|r| {
                let kl_at = |tag: &str| {
                    r.report
                        .records
                        .iter()
                        .find(|rec| rec.direction == tag && rec.epsilon == eps)
                        .map(|rec| rec.kl)
                };
                matches!((kl_at("probe"), kl_at("control")), (Some(p), Some(c)) if p > c)
            })
    });
    if vulnerable { "vulnerable" } else { "robust" }.to_string()
}

fn format_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn write_eigs_csv(path: &Path, flow: &FlowDoc) -> Result<()> {
    let mut text = String::from("input_index,layer,mode_rank,eig_magnitude,eig_phase,stderr,relevant\n");
    for f in &flow.inputs {
        for t in &f.transitions {
            for (rank, mode) in t.eigenmodes.iter().enumerate() {
                text.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    f.input_index,
                    t.to_layer,
                    rank,
                    mode.magnitude,
                    mode.phase,
                    mode.stderr,
                    mode.relevant
                ));
            }
        }
    }
    write_bytes(path, text.as_bytes())
}

fn write_fim_csv(path: &Path, fims: &[FimDoc]) -> Result<()> {
    let mut text = String::from("input_index,rank,eigenvalue\n");
    for f in fims {
        for (rank, v) in f.eigenvalues.iter().enumerate() {
            text.push_str(&format!("{},{},{}\n", f.input_index, rank, v));
        }
    }
    write_bytes(path, text.as_bytes())
}

fn write_kl_csv(path: &Path, attack: &AttackDoc) -> Result<()> {
    let mut text =
        String::from("input_index,direction,epsilon,kl,kl_stderr,quadratic_prediction\n");
    for r in &attack.reports {
        for rec in &r.report.records {
            text.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.input_index,
                rec.direction,
                rec.epsilon,
                rec.kl,
                format_opt(rec.kl_stderr),
                rec.quadratic_prediction
            ));
        }
    }
    write_bytes(path, text.as_bytes())
}

#[derive(Clone, Debug)]
pub struct AuditOutcome {
    pub verdict: String,
    pub relevant_inputs: usize,
    pub audited_inputs: usize,
    pub bundle: Vec<PathBuf>,
}

/// Run the full audit on the stored model and dataset: flow analysis per
/// input, Fisher assembly, and the attack sweep. Each artifact is written
/// as soon as its stage completes, so earlier files survive a later
/// failure.
pub fn run_audit(cfg: &RunConfig) -> Result<AuditOutcome> {
    cfg.validate()?;
    let stack = load_model(cfg.model_path())?;
    if stack.n_in() != cfg.task.n_in {
        return Err(AuditError::DimensionMismatch {
            context: "audit model input width",
            expected: cfg.task.n_in,
            got: stack.n_in(),
        });
    }
    let data = load_dataset(cfg.dataset_path())?;
    let take = cfg.audit_inputs.min(data.len());
    let inputs = &data[..take];

    // Stage 1: coupling flow and per-transition stability.
    let flow_opts = FlowOptions {
        n_chains: cfg.n_chains,
        max_degree: cfg.max_degree,
        stability: StabilityOptions {
            regularization: cfg.regularization,
            relevance_margin: cfg.relevance_margin,
            bootstrap_resamples: cfg.bootstrap_resamples,
            bootstrap_seed: 0,
        },
        seed: derive_seed(cfg.seed, STAGE_AUDIT_FLOW, 0),
    };
    let (flows, summary) = flow_report(&stack, inputs, &flow_opts)?;
    let flow_doc = flow_to_doc(&flows, &summary, cfg);
    write_json(&cfg.flow_path(), &flow_doc)?;
    write_eigs_csv(&cfg.eigs_csv_path(), &flow_doc)?;

    // Stage 2: Fisher information per input via the chain rule.
    let mut fims: Vec<FimMatrix> = Vec::with_capacity(inputs.len());
    let mut fim_docs = Vec::with_capacity(inputs.len());
    for (f, x) in flows.iter().zip(inputs) {
        let first = first_layer_jacobian(stack.layer(0), x, &f.bases[0], JacobianMethod::Analytic)?;
        let refs: Vec<_> = f.transitions.iter().collect();
        let chain = chain_jacobian(&first, &refs)?;
        let deep_set: &ExpectationSet = f.sets.last().expect("stack depth is positive");
        let fim = assemble_fim(&chain, deep_set)?;
        let top = top_mode(&fim)?;
        let spectrum = fim.spectrum()?;
        fim_docs.push(FimDoc {
            input_index: f.input_index,
            layer_index: fim.layer_index,
            matrix: matrix_rows(&fim.matrix),
            eigenvalues: spectrum.values.clone(),
            top,
        });
        fims.push(fim);
    }
    write_json(&cfg.fim_path(), &fim_docs)?;
    write_fim_csv(&cfg.fim_csv_path(), &fim_docs)?;

    // Stage 3: attack sweep along each input's stiffest direction.
    let mut reports = Vec::with_capacity(inputs.len());
    for ((f, x), (fim, doc)) in flows.iter().zip(inputs).zip(fims.iter().zip(&fim_docs)) {
        let attack_opts = AttackOptions {
            enum_limit: cfg.enum_limit,
            n_samples: cfg.attack_samples,
            n_classes: stack.meta().n_classes.or(Some(cfg.task.n_classes)),
            bootstrap_resamples: cfg.bootstrap_resamples,
            seed: derive_seed(cfg.seed, STAGE_AUDIT_ATTACK, f.input_index as u64),
            ..AttackOptions::default()
        };
        let direction = DVector::from_column_slice(&doc.top.vector);
        let report = evaluate_attack(&stack, x, fim, &direction, &cfg.epsilons, &attack_opts)?;
        reports.push(IndexedReport {
            input_index: f.input_index,
            report,
        });
    }
    let smallest = cfg
        .epsilons
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    let mut attack_doc = AttackDoc {
        verdict: String::new(),
        smallest_epsilon: smallest,
        reports,
    };
    attack_doc.verdict = recompute_verdict(&flow_doc, &attack_doc);
    write_json(&cfg.attack_path(), &attack_doc)?;
    write_kl_csv(&cfg.kl_csv_path(), &attack_doc)?;

    let relevant_inputs = flow_doc
        .inputs
        .iter()
        .filter(|f| f.transitions.iter().any(|t| t.has_relevant_mode))
        .count();
    Ok(AuditOutcome {
        verdict: attack_doc.verdict,
        relevant_inputs,
        audited_inputs: take,
        bundle: vec![
            cfg.flow_path(),
            cfg.fim_path(),
            cfg.attack_path(),
            cfg.eigs_csv_path(),
            cfg.kl_csv_path(),
            cfg.fim_csv_path(),
        ],
    })
}

// ---------------------------------------------------------------------------
// Oracle suite: every sampled or chained quantity against its exact or
// finite-difference counterpart, on a stack of the configured shape.

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OracleRecord {
    pub op: String,
    pub max_abs_err: Option<f64>,
    pub tolerance: f64,
    pub pass: bool,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OracleSummary {
    pub records: Vec<OracleRecord>,
    pub all_pass: bool,
}

fn oracle_record(op: &str, tolerance: f64, outcome: Result<f64>) -> OracleRecord {
    match outcome {
        Ok(err) => OracleRecord {
            op: op.into(),
            max_abs_err: Some(err),
            tolerance,
            pass: err.is_finite() && err <= tolerance,
            error: None,
        },
        Err(e) => OracleRecord {
            op: op.into(),
            max_abs_err: None,
            tolerance,
            pass: false,
            error: Some(e.to_string()),
        },
    }
}

fn random_layer_for(n_out: usize, n_in: usize, scale: f64, rng: &mut impl Rng) -> Result<RbmLayer> {
    let w = DMatrix::from_fn(n_out, n_in, |_, _| scale * (rng.gen::<f64>() * 2.0 - 1.0));
    let a = DVector::from_fn(n_out, |_, _| scale * (rng.gen::<f64>() * 2.0 - 1.0));
    RbmLayer::new(w, a, DVector::zeros(n_in))
}

/// Exact transition estimate used by several oracles.
fn oracle_transition(
    stack: &DeepStack,
    x: &InputPoint,
    k: usize,
    basis_in: &OperatorBasis,
    basis_out: &OperatorBasis,
    limit: usize,
) -> Result<crate::mcrg::StabilityEstimate> {
    let parent = exact_layer_distribution(stack, x, k, limit)?;
    let child =
        ExpectationSet::from_exact_transition(&parent, stack.layer(k), basis_in, basis_out, limit)?;
    let parent_set = ExpectationSet::from_exact_layer(&parent, basis_in)?;
    let opts = StabilityOptions {
        regularization: 0.0,
        bootstrap_resamples: 0,
        ..StabilityOptions::default()
    };
    solve_stability(&parent_set, &child, &opts)
}

/// Run the oracle suite on a random stack of the configured shape and write
/// a JSON summary. Refuses up front when a configured layer exceeds the
/// enumeration limit, naming the offender.
pub fn run_oracle_check(cfg: &RunConfig) -> Result<OracleSummary> {
    cfg.validate()?;
    for (k, &width) in cfg.layers.iter().enumerate() {
        if width > cfg.enum_limit {
            return Err(AuditError::EnumerationLimit {
                what: format!("layer {}", k + 1),
                nodes: width,
                limit: cfg.enum_limit,
            });
        }
    }
    if cfg.task.n_in > cfg.enum_limit {
        return Err(AuditError::EnumerationLimit {
            what: "input layer".into(),
            nodes: cfg.task.n_in,
            limit: cfg.enum_limit,
        });
    }

    let mut rng = chain_rng(derive_seed(cfg.seed, STAGE_ORACLE, 0), 0);
    let dims = cfg.dims();
    let mut layers = Vec::new();
    for k in 0..dims.len() - 1 {
        layers.push(random_layer_for(dims[k + 1], dims[k], 1.0, &mut rng)?);
    }
    let stack = DeepStack::new(
        layers,
        StackMeta {
            seed: cfg.seed,
            n_classes: None,
            training: None,
        },
    )?;
    let x = InputPoint::new(
        (0..cfg.task.n_in)
            .map(|_| 0.25 + 0.5 * rng.gen::<f64>())
            .collect(),
        None,
    )?;
    let limit = cfg.enum_limit;
    let mut records = Vec::new();

    // Coupling extraction round trip on a random strictly positive table.
    records.push(oracle_record("coupling_round_trip", 1e-10, (|| {
        let n = dims[1].min(4);
        let raw: Vec<f64> = (0..1usize << n).map(|_| 0.05 + rng.gen::<f64>()).collect();
        let total: f64 = raw.iter().sum();
        let probs: Vec<f64> = raw.iter().map(|p| p / total).collect();
        let basis = OperatorBasis::full(n)?;
        let c = couplings_from_distribution(&probs, &basis, DEFAULT_PROB_FLOOR)?;
        let back = distribution_from_couplings(&c)?;
        Ok(total_variation(&probs, &back)?)
    })()));

    // Exact-moment stability solve against the finite-difference Jacobian,
    // on the first transition of the configured stack.
    let b_in = OperatorBasis::full(dims[1])?;
    let exact_t = if dims.len() >= 3 {
        let b_out = OperatorBasis::full(dims[2])?;
        let outcome = (|| {
            let t = oracle_transition(&stack, &x, 1, &b_in, &b_out, limit)?;
            let parent = exact_layer_distribution(&stack, &x, 1, limit)?;
            let g = couplings_from_distribution(&parent.probabilities, &b_in, DEFAULT_PROB_FLOOR)?;
            let fd = jacobian_fd(
                stack.layer(1),
                &g,
                &b_out,
                DEFAULT_JACOBIAN_STEP,
                DEFAULT_PROB_FLOOR,
                limit,
            )?;
            Ok(((&t.t - &fd).abs().max(), t))
        })();
        match outcome {
            Ok((err, t)) => {
                records.push(oracle_record(
                    "solve_stability_exact_vs_jacobian_fd",
                    1e-6,
                    Ok(err),
                ));
                Some(t)
            }
            Err(e) => {
                records.push(oracle_record(
                    "solve_stability_exact_vs_jacobian_fd",
                    1e-6,
                    Err(e),
                ));
                None
            }
        }
    } else {
        None
    };

    // Sampled stability estimate against the same finite-difference oracle.
    if dims.len() >= 3 {
        records.push(oracle_record("sampled_t_vs_jacobian_fd", 0.05, (|| {
            let b_out = OperatorBasis::full(dims[2])?;
            let flow_opts = FlowOptions {
                n_chains: cfg.n_chains,
                max_degree: dims[1].max(dims[2]),
                stability: StabilityOptions {
                    regularization: cfg.regularization,
                    bootstrap_resamples: 0,
                    ..StabilityOptions::default()
                },
                seed: derive_seed(cfg.seed, STAGE_ORACLE, 1),
            };
            let (flows, _) = flow_report(&stack, std::slice::from_ref(&x), &flow_opts)?;
            let sampled = &flows[0].transitions[0];
            let parent = exact_layer_distribution(&stack, &x, 1, limit)?;
            let g = couplings_from_distribution(&parent.probabilities, &b_in, DEFAULT_PROB_FLOOR)?;
            let fd = jacobian_fd(
                stack.layer(1),
                &g,
                &b_out,
                DEFAULT_JACOBIAN_STEP,
                DEFAULT_PROB_FLOOR,
                limit,
            )?;
            Ok((&sampled.t - &fd).abs().max())
        })()));
    }

    // First-layer Jacobian: the two methods against each other.
    records.push(oracle_record("first_layer_jacobian_methods", 1e-8, (|| {
        let basis = OperatorBasis::full(dims[1])?;
        let a = first_layer_jacobian(stack.layer(0), &x, &basis, JacobianMethod::Analytic)?;
        let s = first_layer_jacobian(
            stack.layer(0),
            &x,
            &basis,
            JacobianMethod::LinearSolve {
                regularization: 0.0,
            },
        )?;
        Ok((&a.matrix - &s.matrix).abs().max())
    })()));

    // Chained Jacobian against finite differences of the deep couplings.
    let chain_and_fim = (|| {
        let first = first_layer_jacobian(
            stack.layer(0),
            &x,
            &b_in,
            JacobianMethod::Analytic,
        )?;
        let mut transitions = Vec::new();
        let mut basis = b_in.clone();
        for k in 1..stack.depth() {
            let next = OperatorBasis::full(stack.layer(k).n_out())?;
            transitions.push(match (k, &exact_t) {
                (1, Some(t)) => t.clone(),
                _ => oracle_transition(&stack, &x, k, &basis, &next, limit)?,
            });
            basis = next;
        }
        let refs: Vec<_> = transitions.iter().collect();
        let chain = chain_jacobian(&first, &refs)?;
        let deep = exact_layer_distribution(&stack, &x, stack.depth(), limit)?;
        let deep_basis = OperatorBasis::full(stack.n_out())?;
        let set = ExpectationSet::from_exact_layer(&deep, &deep_basis)?;
        let fim = assemble_fim(&chain, &set)?;
        Ok::<_, AuditError>((chain, deep, deep_basis, fim))
    })();

    match &chain_and_fim {
        Ok((chain, deep, deep_basis, fim)) => {
            records.push(oracle_record("chain_jacobian_vs_fd", 1e-5, (|| {
                let delta = DEFAULT_JACOBIAN_STEP;
                let mut worst = 0.0f64;
                for i in 0..cfg.task.n_in {
                    let mut plus = x.coordinates().to_vec();
                    let mut minus = plus.clone();
                    plus[i] += delta;
                    minus[i] -= delta;
                    let dp = exact_layer_distribution(
                        &stack,
                        &InputPoint::new(plus, None)?,
                        stack.depth(),
                        limit,
                    )?;
                    let dm = exact_layer_distribution(
                        &stack,
                        &InputPoint::new(minus, None)?,
                        stack.depth(),
                        limit,
                    )?;
                    let gp =
                        couplings_from_distribution(&dp.probabilities, deep_basis, DEFAULT_PROB_FLOOR)?;
                    let gm =
                        couplings_from_distribution(&dm.probabilities, deep_basis, DEFAULT_PROB_FLOOR)?;
                    for r in 0..deep_basis.len() {
                        let fd = (gp.values[r] - gm.values[r]) / (2.0 * delta);
                        worst = worst.max((chain.matrix[(r, i)] - fd).abs());
                    }
                }
                let _ = deep;
                Ok(worst)
            })()));

            records.push(oracle_record("fim_vs_divergence_curvature", 1e-4, (|| {
                let fd = fim_fd(&stack, &x, DEFAULT_FIM_STEP, DEFAULT_KL_FLOOR, limit)?;
                Ok((&fim.matrix - &fd.matrix).norm() / fd.matrix.norm().max(1e-300))
            })()));

            records.push(oracle_record("kl_quadratic_ratio", 0.1, (|| {
                let top = top_mode(fim)?;
                if top.degenerate {
                    return Err(AuditError::InvalidDistribution {
                        reason: "metric is degenerate; no quadratic check possible".into(),
                    });
                }
                let v = DVector::from_column_slice(&top.vector);
                let curv = (v.transpose() * &fim.matrix * &v)[(0, 0)];
                let eps = 1e-2;
                let coords: Vec<f64> = x
                    .coordinates()
                    .iter()
                    .zip(v.iter())
                    .map(|(&xi, &vi)| (xi + eps * vi).clamp(0.0, 1.0))
                    .collect();
                let perturbed = exact_layer_distribution(
                    &stack,
                    &InputPoint::new(coords, None)?,
                    stack.depth(),
                    limit,
                )?;
                let base = exact_layer_distribution(&stack, &x, stack.depth(), limit)?;
                let kl = exact_kl(&base.probabilities, &perturbed.probabilities, DEFAULT_KL_FLOOR)?;
                let predicted = 0.5 * eps * eps * curv;
                Ok((kl / predicted - 1.0).abs())
            })()));
        }
        Err(e) => {
            for op in [
                "chain_jacobian_vs_fd",
                "fim_vs_divergence_curvature",
                "kl_quadratic_ratio",
            ] {
                records.push(OracleRecord {
                    op: op.into(),
                    max_abs_err: None,
                    tolerance: 0.0,
                    pass: false,
                    error: Some(e.to_string()),
                });
            }
        }
    }

    let all_pass = records.iter().all(|r| r.pass);
    let summary = OracleSummary { records, all_pass };
    write_json(&cfg.oracle_path(), &summary)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::init_stack;
    use tempfile::TempDir;

    fn small_config(dir: &Path) -> RunConfig {
        let mut cfg = RunConfig::example(dir);
        cfg.task = TaskSpec {
            n_in: 4,
            n_classes: 2,
            prototypes: vec![vec![1, 1, 0, 0], vec![0, 0, 1, 1]],
            flip_noise: 0.1,
            priors: vec![0.5, 0.5],
            seed: 3,
        };
        cfg.layers = vec![2, 2];
        cfg.n_samples = 200;
        cfg.n_chains = 3_000;
        cfg.bootstrap_resamples = 20;
        cfg.attack_samples = 500;
        cfg.audit_inputs = 2;
        cfg.epsilons = vec![0.01, 0.05];
        cfg.train = TrainOptions {
            epochs: 12,
            head_epochs: 200,
            ..TrainOptions::default()
        };
        cfg.seed = 99;
        cfg
    }

    #[test]
    fn task_validation_catches_bad_specs() {
        let mut t = TaskSpec::example();
        assert!(t.validate().is_ok());
        t.prototypes[1] = t.prototypes[0].clone();
        assert!(t.validate().is_err());
        let mut t = TaskSpec::example();
        t.flip_noise = 0.5;
        assert!(t.validate().is_err());
        let mut t = TaskSpec::example();
        t.priors = vec![0.4, 0.4];
        assert!(t.validate().is_err());
        let mut t = TaskSpec::example();
        t.priors = vec![-0.5, 1.5];
        assert!(t.validate().is_err());
    }

    #[test]
    fn posterior_is_sharpest_at_the_prototype() {
        let t = TaskSpec::example();
        let p = t.posterior(&t.prototypes[0].clone()).unwrap();
        assert!(p[0] > 0.99, "posterior at prototype: {p:?}");
        // One flipped bit weakens but keeps the class.
        let mut near = t.prototypes[0].clone();
        near[0] = 1 - near[0];
        let q = t.posterior(&near).unwrap();
        assert!(q[0] > 0.5 && q[0] < p[0]);
        let total: f64 = q.iter().sum();
        approx::assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn zero_noise_samples_equal_their_prototype() {
        let mut t = TaskSpec::example();
        t.flip_noise = 0.0;
        let mut rng = chain_rng(5, 0);
        for _ in 0..50 {
            let (bits, y) = t.sample(&mut rng);
            assert_eq!(bits, t.prototypes[y]);
        }
        // And the posterior there is a point mass.
        let p = t.posterior(&t.prototypes[1].clone()).unwrap();
        assert_eq!(p[1], 1.0);
        // Off-prototype observations are impossible.
        assert!(t.posterior(&[1, 0, 0, 0, 0, 0, 0, 1]).is_err());
    }

    #[test]
    fn flip_rate_matches_the_configured_noise() {
        let t = TaskSpec::example();
        let mut rng = chain_rng(11, 0);
        let n = 10_000usize;
        let mut flips = 0usize;
        for _ in 0..n {
            let (bits, y) = t.sample(&mut rng);
            flips += bits
                .iter()
                .zip(&t.prototypes[y])
                .filter(|(a, b)| a != b)
                .count();
        }
        let rate = flips as f64 / (n * t.n_in) as f64;
        let sigma = (0.1 * 0.9 / (n * t.n_in) as f64).sqrt();
        assert!(
            (rate - 0.1).abs() < 3.0 * sigma,
            "rate {rate}, tolerance {}",
            3.0 * sigma
        );
    }

    #[test]
    fn dataset_round_trips_and_reports_line_errors() {
        let dir = TempDir::new().unwrap();
        let cfg = small_config(dir.path());
        let summary = gen_data(&cfg).unwrap();
        assert_eq!(summary.n_samples, 200);
        let rows = load_dataset(&summary.dataset).unwrap();
        assert_eq!(rows.len(), 200);
        assert!(rows.iter().all(|r| r.label().is_some() && r.dim() == 4));
        let task = load_task(&summary.sidecar).unwrap();
        assert_eq!(task, cfg.task);

        // Deterministic regeneration.
        let bytes_a = fs::read(&summary.dataset).unwrap();
        gen_data(&cfg).unwrap();
        let bytes_b = fs::read(&summary.dataset).unwrap();
        assert_eq!(bytes_a, bytes_b);

        let bad = dir.path().join("bad.jsonl");
        fs::write(&bad, "{\"x\":[0,1,0,1],\"y\":0}\n{\"x\":[0,2,0,1],\"y\":0}\n").unwrap();
        match load_dataset(&bad) {
            Err(AuditError::DatasetSchema { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected a schema error, got {other:?}"),
        }
    }

    #[test]
    fn model_file_round_trips() {
        let dir = TempDir::new().unwrap();
        let stack = init_stack(&[4, 3, 2], Some(2), 8, 0.4).unwrap();
        let path = dir.path().join("model.json");
        save_model(&stack, &path).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(stack, back);

        fs::write(&path, "{\"layers\":[{\"W\":[[0.1],[0.2,0.3]],\"a\":[0,0],\"b\":[0]}],\"meta\":{\"seed\":0}}")
            .unwrap();
        assert!(load_model(&path).is_err());
    }

    #[test]
    fn train_command_produces_a_working_model() {
        let dir = TempDir::new().unwrap();
        let cfg = small_config(dir.path());
        gen_data(&cfg).unwrap();
        let summary = run_train(&cfg).unwrap();
        assert!(summary.train_accuracy > 0.8, "{}", summary.train_accuracy);
        let stack = load_model(cfg.model_path()).unwrap();
        assert_eq!(stack.dims(), vec![4, 2, 2]);
        assert_eq!(stack.meta().n_classes, Some(2));
    }

    #[test]
    fn audit_writes_the_full_bundle_with_a_recomputable_verdict() {
        let dir = TempDir::new().unwrap();
        let cfg = small_config(dir.path());
        gen_data(&cfg).unwrap();
        run_train(&cfg).unwrap();
        let outcome = run_audit(&cfg).unwrap();
        assert!(outcome.verdict == "vulnerable" || outcome.verdict == "robust");
        for path in &outcome.bundle {
            assert!(path.exists(), "missing artifact {path:?}");
        }
        let flow: FlowDoc = read_json(&cfg.flow_path()).unwrap();
        let attack: AttackDoc = read_json(&cfg.attack_path()).unwrap();
        assert_eq!(recompute_verdict(&flow, &attack), attack.verdict);
        assert_eq!(flow.inputs.len(), 2);
        assert_eq!(attack.reports.len(), 2);
        let eigs = fs::read_to_string(cfg.eigs_csv_path()).unwrap();
        assert!(eigs.starts_with("input_index,layer,mode_rank,eig_magnitude"));
        assert!(eigs.lines().count() > 1);
        let kl = fs::read_to_string(cfg.kl_csv_path()).unwrap();
        assert_eq!(kl.lines().count(), 1 + 2 * 2 * cfg.epsilons.len());
    }

    #[test]
    fn audit_is_byte_identical_across_reruns() {
        let dir = TempDir::new().unwrap();
        let cfg = small_config(dir.path());
        gen_data(&cfg).unwrap();
        run_train(&cfg).unwrap();
        run_audit(&cfg).unwrap();
        let snapshot: Vec<Vec<u8>> = [
            cfg.flow_path(),
            cfg.fim_path(),
            cfg.attack_path(),
            cfg.eigs_csv_path(),
            cfg.kl_csv_path(),
            cfg.fim_csv_path(),
        ]
        .iter()
        .map(|p| fs::read(p).unwrap())
        .collect();
        run_audit(&cfg).unwrap();
        for (i, p) in [
            cfg.flow_path(),
            cfg.fim_path(),
            cfg.attack_path(),
            cfg.eigs_csv_path(),
            cfg.kl_csv_path(),
            cfg.fim_csv_path(),
        ]
        .iter()
        .enumerate()
        {
            assert_eq!(fs::read(p).unwrap(), snapshot[i], "artifact {p:?} changed");
        }
    }

    #[test]
    fn oracle_suite_passes_on_a_small_exact_config() {
        let dir = TempDir::new().unwrap();
        let mut cfg = small_config(dir.path());
        cfg.n_chains = 200_000;
        let summary = run_oracle_check(&cfg).unwrap();
        assert!(
            summary.all_pass,
            "failures: {:?}",
            summary
                .records
                .iter()
                .filter(|r| !r.pass)
                .collect::<Vec<_>>()
        );
        assert!(cfg.oracle_path().exists());
        let back: OracleSummary = read_json(&cfg.oracle_path()).unwrap();
        assert_eq!(back.records.len(), summary.records.len());
    }

    #[test]
    fn oracle_suite_attributes_sampling_failures() {
        let dir = TempDir::new().unwrap();
        let mut cfg = small_config(dir.path());
        cfg.n_chains = 150; // above the hard floor, far too few for accuracy
        let summary = run_oracle_check(&cfg).unwrap();
        assert!(!summary.all_pass);
        for r in &summary.records {
            if r.op == "sampled_t_vs_jacobian_fd" {
                assert!(!r.pass, "sampled comparison should fail at 150 chains");
            } else {
                assert!(r.pass, "exact-path op {} should still pass", r.op);
            }
        }
    }

    #[test]
    fn oracle_suite_refuses_oversized_layers() {
        let dir = TempDir::new().unwrap();
        let mut cfg = small_config(dir.path());
        cfg.enum_limit = 2;
        match run_oracle_check(&cfg) {
            Err(AuditError::EnumerationLimit { what, .. }) => {
                assert!(what.contains("layer"), "refusal names {what:?}");
            }
            other => panic!("expected an enumeration refusal, got {other:?}"),
        }
    }

    #[test]
    fn config_file_round_trips_with_defaults() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("config.json");
        let text = format!(
            "{{\"task\":{},\"layers\":[3,2],\"out_dir\":{:?}}}",
            serde_json::to_string(&TaskSpec::example()).unwrap(),
            dir.path().join("out")
        );
        fs::write(&path, text).unwrap();
        let cfg = load_config(&path).unwrap();
        assert_eq!(cfg.layers, vec![3, 2]);
        assert_eq!(cfg.n_samples, default_n_samples());
        assert_eq!(cfg.max_degree, 2);

        fs::write(&path, "{\"layers\":[]}").unwrap();
        assert!(load_config(&path).is_err());
    }

    #[test]
    fn trained_model_tracks_the_posterior_better_than_untrained() {
        let dir = TempDir::new().unwrap();
        let mut cfg = small_config(dir.path());
        cfg.n_samples = 400;
        cfg.train.epochs = 10;
        cfg.train.head_epochs = 150;
        gen_data(&cfg).unwrap();
        run_train(&cfg).unwrap();
        let trained = load_model(cfg.model_path()).unwrap();
        let untrained = init_stack(&cfg.dims(), Some(2), cfg.seed, 0.1).unwrap();
        let data = load_dataset(cfg.dataset_path()).unwrap();
        let probe = &data[..100];
        let kl_trained =
            mean_posterior_divergence(&trained, &cfg.task, probe, cfg.enum_limit).unwrap();
        let kl_untrained =
            mean_posterior_divergence(&untrained, &cfg.task, probe, cfg.enum_limit).unwrap();
        assert!(
            kl_trained < kl_untrained,
            "trained {kl_trained} vs untrained {kl_untrained}"
        );
    }
}
