//! Graph classifiers: the attention model and the convolutional baseline.

mod gat;
mod gcn;
#[cfg(test)]
mod model_tests;

pub use gat::{
    gat_eval, gat_forward_on_tape, GatConfig, GatForward, GatHeadParams, GatHeadVars,
    GatLayerParams, GatModelParams, GatModelVars, MlpHeadVars,
};
pub use gcn::{gcn_forward_on_tape, GcnConfig, GcnConvParams, GcnForward, GcnModelParams, GcnVars};

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tensor};
use crate::connectivity::GraphSample;
use crate::features::N_FEATURES;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("empty batch")]
    EmptyBatch,
    #[error("checkpoint io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format error: {0}")]
    Format(#[from] serde_json::Error),
    #[error("checkpoint version {0} unsupported (expected {CHECKPOINT_VERSION})")]
    UnsupportedVersion(u32),
}

/// Several graphs merged into one disjoint batch graph.
#[derive(Clone, Debug)]
pub struct GraphBatch {
    /// `[total_nodes x n_features]` node features.
    pub x: Tensor,
    pub edge_src: Vec<usize>,
    pub edge_dst: Vec<usize>,
    /// `[total_edges x 1]` scalar edge attributes.
    pub edge_attr: Tensor,
    /// Graph index of every node.
    pub node_graph: Vec<usize>,
    pub n_graphs: usize,
    pub n_nodes: usize,
    /// Class index per graph.
    pub labels: Vec<usize>,
}

impl GraphBatch {
    pub fn from_samples(samples: &[&GraphSample]) -> Result<Self, ModelError> {
        if samples.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let mut x_rows = Vec::new();
        let mut edge_src = Vec::new();
        let mut edge_dst = Vec::new();
        let mut edge_attr = Vec::new();
        let mut node_graph = Vec::new();
        let mut labels = Vec::new();
        let mut node_offset = 0;
        for (g, sample) in samples.iter().enumerate() {
            let n = sample.n_nodes();
            for row in &sample.node_features.values {
                x_rows.extend_from_slice(row);
            }
            let (src, dst, attr) = sample.edge_list();
            for ((s, d), a) in src.into_iter().zip(dst).zip(attr) {
                edge_src.push(node_offset + s);
                edge_dst.push(node_offset + d);
                edge_attr.push(a);
            }
            node_graph.extend(std::iter::repeat_n(g, n));
            labels.push(sample.label.index());
            node_offset += n;
        }
        let n_features = samples[0].node_features.values[0].len();
        Ok(Self {
            x: Tensor::new(node_offset, n_features, x_rows),
            edge_attr: Tensor::column(&edge_attr),
            edge_src,
            edge_dst,
            node_graph,
            n_graphs: samples.len(),
            n_nodes: node_offset,
            labels,
        })
    }

    pub fn n_edges(&self) -> usize {
        self.edge_src.len()
    }
}

/// Scale and shift of a normalization layer.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AffineParams {
    pub scale: Tensor,
    pub offset: Tensor,
}

impl AffineParams {
    pub fn identity(width: usize) -> Self {
        Self { scale: Tensor::filled(1, width, 1.0), offset: Tensor::zeros(1, width) }
    }
}

/// Two dense layers with batch normalization after the first.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MlpHead {
    /// `[d_in x d_hidden]`
    pub w1: Tensor,
    pub b1: Tensor,
    pub bn_gamma: Tensor,
    pub bn_beta: Tensor,
    /// `[d_hidden x n_classes]`
    pub w2: Tensor,
    pub b2: Tensor,
    pub bn_running_mean: Vec<f64>,
    pub bn_running_var: Vec<f64>,
}

impl MlpHead {
    pub fn init(d_in: usize, d_hidden: usize, n_classes: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w1: glorot(d_in, d_hidden, rng),
            b1: Tensor::zeros(1, d_hidden),
            bn_gamma: Tensor::filled(1, d_hidden, 1.0),
            bn_beta: Tensor::zeros(1, d_hidden),
            w2: glorot(d_hidden, n_classes, rng),
            b2: Tensor::zeros(1, n_classes),
            bn_running_mean: vec![0.0; d_hidden],
            bn_running_var: vec![1.0; d_hidden],
        }
    }
}

/// Glorot-uniform `[fan_in x fan_out]` matrix.
pub fn glorot(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::new(
        fan_in,
        fan_out,
        (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect(),
    )
}

/// Glorot-uniform with explicit shape when it differs from the fan pair
/// (attention vectors, edge projections).
pub fn glorot_shaped(
    rows: usize,
    cols: usize,
    fan_in: usize,
    fan_out: usize,
    rng: &mut ChaCha8Rng,
) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect())
}

/// Update a running statistic pair in place (momentum toward the batch
/// value; variance stored unbiased when the batch has more than one row).
pub fn update_running(
    running_mean: &mut [f64],
    running_var: &mut [f64],
    batch_mean: &[f64],
    batch_var: &[f64],
    batch_rows: usize,
    momentum: f64,
) {
    let unbias = if batch_rows > 1 { batch_rows as f64 / (batch_rows as f64 - 1.0) } else { 1.0 };
    for (r, &b) in running_mean.iter_mut().zip(batch_mean) {
        *r = (1.0 - momentum) * *r + momentum * b;
    }
    for (r, &b) in running_var.iter_mut().zip(batch_var) {
        *r = (1.0 - momentum) * *r + momentum * b * unbias;
    }
}

/// Batch statistics observed by one batch-norm node during training.
#[derive(Clone, Debug)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub rows: usize,
}

/// Output of one forward (and, in training, backward) pass.
pub struct StepOutput {
    pub loss: f64,
    /// `[n_graphs x n_classes]` log-probabilities.
    pub log_probs: Tensor,
    /// Gradients aligned with `param_tensors`; empty in eval mode.
    pub grads: Vec<Tensor>,
    /// Batch-norm statistics observed during a training pass, in the order
    /// expected by `apply_bn_updates`.
    pub bn_updates: Vec<BnStats>,
}

/// Shared trainer interface of the gradient-trained graph models.
pub trait GraphClassifier: Clone + Send + Sync {
    fn param_tensors(&self) -> Vec<&Tensor>;
    fn param_tensors_mut(&mut self) -> Vec<&mut Tensor>;
    fn param_names(&self) -> Vec<String>;
    /// Forward + backward in training mode.
    fn train_step(&self, batch: &GraphBatch, rng: &mut ChaCha8Rng) -> Result<StepOutput, ModelError>;
    /// Deterministic forward in eval mode (running statistics, no dropout).
    fn eval_step(&self, batch: &GraphBatch) -> Result<StepOutput, ModelError>;
    fn apply_bn_updates(&mut self, updates: &[BnStats], momentum: f64);
}

pub(crate) const BN_MOMENTUM: f64 = 0.1;
pub(crate) const BN_EPS: f64 = 1e-5;
pub(crate) const LN_EPS: f64 = 1e-5;

const CHECKPOINT_VERSION: u32 = 1;

/// Versioned checkpoint wrapper; JSON round-trips are bit-exact for finite
/// values.
#[derive(Serialize, Deserialize)]
pub struct Checkpoint<P> {
    pub format_version: u32,
    pub seed: u64,
    pub config_echo: String,
    pub params: P,
}

pub fn save_checkpoint<P: Serialize>(
    params: &P,
    seed: u64,
    config_echo: &str,
    path: &Path,
) -> Result<(), ModelError> {
    let checkpoint = Checkpoint {
        format_version: CHECKPOINT_VERSION,
        seed,
        config_echo: config_echo.to_string(),
        params,
    };
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer_pretty(file, &checkpoint)?;
    Ok(())
}

pub fn load_checkpoint<P: DeserializeOwned>(path: &Path) -> Result<Checkpoint<P>, ModelError> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let checkpoint: Checkpoint<P> = serde_json::from_reader(file)?;
    if checkpoint.format_version != CHECKPOINT_VERSION {
        return Err(ModelError::UnsupportedVersion(checkpoint.format_version));
    }
    Ok(checkpoint)
}

/// Default input width: the five node features.
pub fn default_in_features() -> usize {
    N_FEATURES
}
