//! Graph-convolution baseline: four conv layers, each batch-normed and
//! ReLU-activated, then the same sum-pool + MLP head as the attention model.
//!
//! Aggregation uses the symmetric-normalized weighted adjacency
//! `c_ij = e_ij / sqrt(deg_i * deg_j)` with self-loops (attribute 1.0)
//! already present in every graph; a config flag switches to unweighted
//! edges.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    glorot, update_running, BnStats, GraphBatch, GraphClassifier, MlpHead, ModelError,
    StepOutput, BN_EPS,
};
use crate::autodiff::{Tape, Tensor, Var};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GcnConfig {
    pub in_features: usize,
    pub hidden: usize,
    pub layers: usize,
    pub mlp_hidden: usize,
    pub out_classes: usize,
    /// Use PLV edge weights in the normalized adjacency (otherwise 1.0).
    pub weighted: bool,
}

impl Default for GcnConfig {
    fn default() -> Self {
        Self {
            in_features: super::default_in_features(),
            hidden: 32,
            layers: 4,
            mlp_hidden: 64,
            out_classes: 2,
            weighted: true,
        }
    }
}

/// One convolution: linear transform + batch norm statistics.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GcnConvParams {
    /// `[d_in x d_out]`
    pub w: Tensor,
    pub bn_gamma: Tensor,
    pub bn_beta: Tensor,
    pub bn_running_mean: Vec<f64>,
    pub bn_running_var: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GcnModelParams {
    pub cfg: GcnConfig,
    pub convs: Vec<GcnConvParams>,
    pub head: MlpHead,
}

impl GcnModelParams {
    pub fn init(cfg: &GcnConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut convs = Vec::with_capacity(cfg.layers);
        for layer in 0..cfg.layers {
            let d_in = if layer == 0 { cfg.in_features } else { cfg.hidden };
            convs.push(GcnConvParams {
                w: glorot(d_in, cfg.hidden, &mut rng),
                bn_gamma: Tensor::filled(1, cfg.hidden, 1.0),
                bn_beta: Tensor::zeros(1, cfg.hidden),
                bn_running_mean: vec![0.0; cfg.hidden],
                bn_running_var: vec![1.0; cfg.hidden],
            });
        }
        let head = MlpHead::init(cfg.hidden, cfg.mlp_hidden, cfg.out_classes, &mut rng);
        Self { cfg: cfg.clone(), convs, head }
    }

    pub fn param_tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for conv in &self.convs {
            out.extend([&conv.w, &conv.bn_gamma, &conv.bn_beta]);
        }
        let h = &self.head;
        out.extend([&h.w1, &h.b1, &h.bn_gamma, &h.bn_beta, &h.w2, &h.b2]);
        out
    }

    pub fn param_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for conv in &mut self.convs {
            out.push(&mut conv.w);
            out.push(&mut conv.bn_gamma);
            out.push(&mut conv.bn_beta);
        }
        let h = &mut self.head;
        out.push(&mut h.w1);
        out.push(&mut h.b1);
        out.push(&mut h.bn_gamma);
        out.push(&mut h.bn_beta);
        out.push(&mut h.w2);
        out.push(&mut h.b2);
        out
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for l in 0..self.convs.len() {
            for field in ["w", "bn_gamma", "bn_beta"] {
                out.push(format!("conv{l}.{field}"));
            }
        }
        for field in ["w1", "b1", "bn_gamma", "bn_beta", "w2", "b2"] {
            out.push(format!("mlp.{field}"));
        }
        out
    }
}

/// Symmetric-normalized edge coefficients for the batch.
pub(crate) fn normalized_coefficients(batch: &GraphBatch, weighted: bool) -> Vec<f64> {
    let attr =
        |e: usize| -> f64 { if weighted { batch.edge_attr.get(e, 0) } else { 1.0 } };
    let mut degree = vec![0.0; batch.n_nodes];
    for e in 0..batch.n_edges() {
        degree[batch.edge_dst[e]] += attr(e);
    }
    (0..batch.n_edges())
        .map(|e| {
            let d = (degree[batch.edge_src[e]] * degree[batch.edge_dst[e]]).sqrt();
            if d > 0.0 {
                attr(e) / d
            } else {
                0.0
            }
        })
        .collect()
}

pub struct GcnVars {
    pub convs: Vec<(Var, Var, Var)>, // w, gamma, beta
    pub head: super::gat::MlpHeadVars,
}

impl GcnVars {
    pub fn from_vars(cfg: &GcnConfig, vars: &[Var]) -> Self {
        let mut it = vars.iter().copied();
        let mut next = || it.next().expect("enough vars for the architecture");
        let convs = (0..cfg.layers).map(|_| (next(), next(), next())).collect();
        let head = super::gat::MlpHeadVars {
            w1: next(),
            b1: next(),
            bn_gamma: next(),
            bn_beta: next(),
            w2: next(),
            b2: next(),
        };
        assert!(it.next().is_none(), "unconsumed parameter vars");
        Self { convs, head }
    }

    pub fn bind(params: &GcnModelParams, tape: &mut Tape, track: bool) -> Self {
        let vars: Vec<Var> =
            params.param_tensors().into_iter().map(|t| tape.leaf(t.clone(), track)).collect();
        Self::from_vars(&params.cfg, &vars)
    }
}

pub struct GcnForward {
    pub log_probs: Var,
    pub bn_batch: Vec<BnStats>,
}

pub fn gcn_forward_on_tape(
    tape: &mut Tape,
    params: &GcnModelParams,
    vars: &GcnVars,
    batch: &GraphBatch,
    train: bool,
) -> Result<GcnForward, ModelError> {
    let coeff_values = normalized_coefficients(batch, params.cfg.weighted);
    let coeff = tape.constant(Tensor::column(&coeff_values));
    let mut bn_batch = Vec::new();

    let mut h = tape.constant(batch.x.clone());
    for (l, &(w, gamma, beta)) in vars.convs.iter().enumerate() {
        let projected = tape.matmul(h, w)?;
        let gathered = tape.gather_rows(projected, &batch.edge_src)?;
        let weighted = tape.multiply(gathered, coeff)?;
        let aggregated = tape.scatter_add_rows(weighted, &batch.edge_dst, batch.n_nodes)?;
        let normed = if train {
            let (out, mean, var) = tape.batch_norm_train(aggregated, gamma, beta, BN_EPS)?;
            bn_batch.push(BnStats { mean, var, rows: batch.n_nodes });
            out
        } else {
            tape.batch_norm_eval(
                aggregated,
                gamma,
                beta,
                &params.convs[l].bn_running_mean,
                &params.convs[l].bn_running_var,
                BN_EPS,
            )?
        };
        h = tape.relu(normed);
    }

    let pooled = tape.segment_sum(h, &batch.node_graph, batch.n_graphs)?;
    let z1 = tape.matmul(pooled, vars.head.w1)?;
    let z1 = tape.add(z1, vars.head.b1)?;
    let zb = if train {
        let (out, mean, var) =
            tape.batch_norm_train(z1, vars.head.bn_gamma, vars.head.bn_beta, BN_EPS)?;
        bn_batch.push(BnStats { mean, var, rows: batch.n_graphs });
        out
    } else {
        tape.batch_norm_eval(
            z1,
            vars.head.bn_gamma,
            vars.head.bn_beta,
            &params.head.bn_running_mean,
            &params.head.bn_running_var,
            BN_EPS,
        )?
    };
    let za = tape.relu(zb);
    let logits = tape.matmul(za, vars.head.w2)?;
    let logits = tape.add(logits, vars.head.b2)?;
    let log_probs = tape.log_softmax(logits);
    Ok(GcnForward { log_probs, bn_batch })
}

fn run_step(params: &GcnModelParams, batch: &GraphBatch, train: bool) -> Result<StepOutput, ModelError> {
    let mut tape = Tape::new();
    let vars = GcnVars::bind(params, &mut tape, train);
    let fwd = gcn_forward_on_tape(&mut tape, params, &vars, batch, train)?;
    let loss = tape.nll_loss(fwd.log_probs, &batch.labels)?;
    let grads = if train {
        let map = tape.backward(loss)?;
        flatten_vars(&vars)
            .iter()
            .map(|&v| {
                map.get(v).cloned().unwrap_or_else(|| {
                    let (r, c) = tape.value(v).shape();
                    Tensor::zeros(r, c)
                })
            })
            .collect()
    } else {
        Vec::new()
    };
    Ok(StepOutput {
        loss: tape.value(loss).item(),
        log_probs: tape.value(fwd.log_probs).clone(),
        grads,
        bn_updates: fwd.bn_batch,
    })
}

fn flatten_vars(vars: &GcnVars) -> Vec<Var> {
    let mut out = Vec::new();
    for &(w, gamma, beta) in &vars.convs {
        out.extend([w, gamma, beta]);
    }
    let h = &vars.head;
    out.extend([h.w1, h.b1, h.bn_gamma, h.bn_beta, h.w2, h.b2]);
    out
}

impl GraphClassifier for GcnModelParams {
    fn param_tensors(&self) -> Vec<&Tensor> {
        GcnModelParams::param_tensors(self)
    }

    fn param_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        GcnModelParams::param_tensors_mut(self)
    }

    fn param_names(&self) -> Vec<String> {
        GcnModelParams::param_names(self)
    }

    fn train_step(
        &self,
        batch: &GraphBatch,
        _rng: &mut ChaCha8Rng,
    ) -> Result<StepOutput, ModelError> {
        run_step(self, batch, true)
    }

    fn eval_step(&self, batch: &GraphBatch) -> Result<StepOutput, ModelError> {
        run_step(self, batch, false)
    }

    fn apply_bn_updates(&mut self, updates: &[BnStats], momentum: f64) {
        // Order: one per conv layer, then the MLP head.
        for (l, stats) in updates.iter().enumerate() {
            if l < self.convs.len() {
                let conv = &mut self.convs[l];
                update_running(
                    &mut conv.bn_running_mean,
                    &mut conv.bn_running_var,
                    &stats.mean,
                    &stats.var,
                    stats.rows,
                    momentum,
                );
            } else {
                update_running(
                    &mut self.head.bn_running_mean,
                    &mut self.head.bn_running_var,
                    &stats.mean,
                    &stats.var,
                    stats.rows,
                    momentum,
                );
            }
        }
    }
}
