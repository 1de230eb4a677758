//! Two-layer multi-head GATv2 classifier with edge attributes.
//!
//! Per head, an edge (target i, source j) scores
//! `s_ij = a^T LeakyReLU(W [x_i || x_j] + W_e e_ij)`; scores are softmaxed
//! over each target's in-neighborhood (self-loop included) and the node
//! update is the attention-weighted sum of `M x_j`. Heads are concatenated;
//! each layer is followed by layer normalization and ELU. Graph embeddings
//! are sum-pooled, then classified by a small batch-normed MLP ending in
//! log-softmax.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    glorot_shaped, update_running, AffineParams, BnStats, GraphBatch, GraphClassifier, MlpHead,
    ModelError, StepOutput, BN_EPS, LN_EPS,
};
use crate::autodiff::{Tape, Tensor, Var};

/// Architecture knobs. The defaults follow the trained configuration:
/// 6 heads, 32 hidden channels, two attention layers, binary output.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GatConfig {
    pub in_features: usize,
    pub hidden: usize,
    pub heads: usize,
    pub layers: usize,
    pub mlp_hidden: usize,
    pub out_classes: usize,
    pub dropout: f64,
    pub negative_slope: f64,
}

impl Default for GatConfig {
    fn default() -> Self {
        Self {
            in_features: super::default_in_features(),
            hidden: 32,
            heads: 6,
            layers: 2,
            mlp_hidden: 64,
            out_classes: 2,
            dropout: 0.0,
            negative_slope: 0.2,
        }
    }
}

impl GatConfig {
    /// Concatenated width after any attention layer.
    pub fn concat_width(&self) -> usize {
        self.heads * self.hidden
    }

    fn layer_in(&self, layer: usize) -> usize {
        if layer == 0 {
            self.in_features
        } else {
            self.concat_width()
        }
    }
}

/// One attention head: `w` is `[d_out x 2*d_in]`, `a` and `w_e` are
/// `[d_out x 1]`, `m` is `[d_out x d_in]`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GatHeadParams {
    pub w: Tensor,
    pub a: Tensor,
    pub m: Tensor,
    pub w_e: Tensor,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GatLayerParams {
    pub heads: Vec<GatHeadParams>,
}

/// Full parameter set of the attention classifier.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GatModelParams {
    pub cfg: GatConfig,
    pub layers: Vec<GatLayerParams>,
    pub norms: Vec<AffineParams>,
    pub head: MlpHead,
}

impl GatModelParams {
    /// Glorot-uniform weights, zero biases, identity norms; deterministic
    /// per seed.
    pub fn init(cfg: &GatConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(cfg.layers);
        let mut norms = Vec::with_capacity(cfg.layers);
        for layer in 0..cfg.layers {
            let d_in = cfg.layer_in(layer);
            let d_out = cfg.hidden;
            let heads = (0..cfg.heads)
                .map(|_| GatHeadParams {
                    w: glorot_shaped(d_out, 2 * d_in, 2 * d_in, d_out, &mut rng),
                    a: glorot_shaped(d_out, 1, d_out, 1, &mut rng),
                    m: glorot_shaped(d_out, d_in, d_in, d_out, &mut rng),
                    w_e: glorot_shaped(d_out, 1, 1, d_out, &mut rng),
                })
                .collect();
            layers.push(GatLayerParams { heads });
            norms.push(AffineParams::identity(cfg.concat_width()));
        }
        let head = MlpHead::init(cfg.concat_width(), cfg.mlp_hidden, cfg.out_classes, &mut rng);
        Self { cfg: cfg.clone(), layers, norms, head }
    }
}

/// Tape handles for every trainable tensor, in canonical order.
pub struct GatModelVars {
    pub layers: Vec<Vec<GatHeadVars>>,
    pub norms: Vec<(Var, Var)>,
    pub head: MlpHeadVars,
}

pub struct GatHeadVars {
    pub w: Var,
    pub a: Var,
    pub m: Var,
    pub w_e: Var,
}

pub struct MlpHeadVars {
    pub w1: Var,
    pub b1: Var,
    pub bn_gamma: Var,
    pub bn_beta: Var,
    pub w2: Var,
    pub b2: Var,
}

impl GatModelVars {
    /// Reassemble from a flat ordered slice (the order of
    /// [`GatModelParams::param_tensors`]).
    pub fn from_vars(cfg: &GatConfig, vars: &[Var]) -> Self {
        let mut it = vars.iter().copied();
        let mut next = || it.next().expect("enough vars for the architecture");
        let layers = (0..cfg.layers)
            .map(|_| {
                (0..cfg.heads)
                    .map(|_| GatHeadVars { w: next(), a: next(), m: next(), w_e: next() })
                    .collect()
            })
            .collect();
        let norms = (0..cfg.layers).map(|_| (next(), next())).collect();
        let head = MlpHeadVars {
            w1: next(),
            b1: next(),
            bn_gamma: next(),
            bn_beta: next(),
            w2: next(),
            b2: next(),
        };
        assert!(it.next().is_none(), "unconsumed parameter vars");
        Self { layers, norms, head }
    }

    pub fn bind(params: &GatModelParams, tape: &mut Tape, track: bool) -> Self {
        let vars: Vec<Var> =
            params.param_tensors().into_iter().map(|t| tape.leaf(t.clone(), track)).collect();
        Self::from_vars(&params.cfg, &vars)
    }
}

impl GatModelParams {
    /// Trainable tensors in canonical order (running stats excluded).
    pub fn param_tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for layer in &self.layers {
            for head in &layer.heads {
                out.extend([&head.w, &head.a, &head.m, &head.w_e]);
            }
        }
        for norm in &self.norms {
            out.extend([&norm.scale, &norm.offset]);
        }
        let h = &self.head;
        out.extend([&h.w1, &h.b1, &h.bn_gamma, &h.bn_beta, &h.w2, &h.b2]);
        out
    }

    pub fn param_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for layer in &mut self.layers {
            for head in &mut layer.heads {
                out.push(&mut head.w);
                out.push(&mut head.a);
                out.push(&mut head.m);
                out.push(&mut head.w_e);
            }
        }
        for norm in &mut self.norms {
            out.push(&mut norm.scale);
            out.push(&mut norm.offset);
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
        for (l, layer) in self.layers.iter().enumerate() {
            for h in 0..layer.heads.len() {
                for field in ["w", "a", "m", "w_e"] {
                    out.push(format!("gat{l}.head{h}.{field}"));
                }
            }
        }
        for l in 0..self.norms.len() {
            out.push(format!("norm{l}.scale"));
            out.push(format!("norm{l}.offset"));
        }
        for field in ["w1", "b1", "bn_gamma", "bn_beta", "w2", "b2"] {
            out.push(format!("mlp.{field}"));
        }
        out
    }
}

/// Everything a forward pass exposes: outputs plus the handles the
/// explainability pass needs to differentiate through.
pub struct GatForward {
    pub log_probs: Var,
    pub logits: Var,
    /// Final node embeddings (input of the pooling).
    pub h_final: Var,
    /// Per layer, the `[n_edges x heads]` attention coefficients.
    pub attention: Vec<Tensor>,
    /// Train-mode batch statistics (MLP batch norm), for running updates.
    pub bn_batch: Vec<BnStats>,
}

/// One attention layer on the tape. Returns the concatenated node update
/// (pre-norm, pre-activation) and the per-head attention values.
///
/// `W [x_i || x_j]` is evaluated as `W_l x_i + W_r x_j` with per-node
/// transforms gathered onto edges, which avoids materializing `[E, 2*d_in]`
/// tensors on complete graphs.
pub(crate) fn gat_layer(
    tape: &mut Tape,
    heads: &[GatHeadVars],
    x: Var,
    batch: &GraphBatch,
    slope: f64,
) -> Result<(Var, Tensor), ModelError> {
    let edge_attr = tape.constant(batch.edge_attr.clone());
    let d_in = tape.value(x).cols();
    let left_rows: Vec<usize> = (0..d_in).collect();
    let right_rows: Vec<usize> = (d_in..2 * d_in).collect();

    let n_edges = batch.n_edges();
    let mut outputs = Vec::with_capacity(heads.len());
    let mut attention = Tensor::zeros(n_edges, heads.len());
    for (h, head) in heads.iter().enumerate() {
        let w_t = tape.transpose(head.w);
        let wl_t = tape.gather_rows(w_t, &left_rows)?;
        let wr_t = tape.gather_rows(w_t, &right_rows)?;
        let we_t = tape.transpose(head.w_e);
        let m_t = tape.transpose(head.m);

        let target_part = tape.matmul(x, wl_t)?;
        let source_part = tape.matmul(x, wr_t)?;
        let per_dst = tape.gather_rows(target_part, &batch.edge_dst)?;
        let per_src = tape.gather_rows(source_part, &batch.edge_src)?;
        let projected = tape.add(per_dst, per_src)?;
        let edge_term = tape.matmul(edge_attr, we_t)?;
        let pre = tape.add(projected, edge_term)?;
        let act = tape.leaky_relu(pre, slope);
        let scores = tape.matmul(act, head.a)?;
        let alpha = tape.segment_softmax(scores, &batch.edge_dst, batch.n_nodes)?;

        let messages = tape.matmul(x, m_t)?;
        let gathered = tape.gather_rows(messages, &batch.edge_src)?;
        let weighted = tape.multiply(gathered, alpha)?;
        let aggregated = tape.scatter_add_rows(weighted, &batch.edge_dst, batch.n_nodes)?;
        outputs.push(aggregated);

        for (e, &v) in tape.value(alpha).data().iter().enumerate() {
            attention.set(e, h, v);
        }
    }
    let concat = tape.concat(&outputs, 1)?;
    Ok((concat, attention))
}

/// Full model forward on an existing tape.
///
/// `dropout_masks`, when provided, are multiplied onto each layer's input
/// (training only; one mask per attention layer).
pub fn gat_forward_on_tape(
    tape: &mut Tape,
    params: &GatModelParams,
    vars: &GatModelVars,
    batch: &GraphBatch,
    train: bool,
    dropout_masks: Option<&[Tensor]>,
) -> Result<GatForward, ModelError> {
    let cfg = &params.cfg;
    let mut h = tape.constant(batch.x.clone());
    let mut attention = Vec::with_capacity(cfg.layers);
    for (l, layer_vars) in vars.layers.iter().enumerate() {
        if let Some(masks) = dropout_masks {
            let mask = tape.constant(masks[l].clone());
            h = tape.multiply(h, mask)?;
        }
        let (update, alpha) = gat_layer(tape, layer_vars, h, batch, cfg.negative_slope)?;
        attention.push(alpha);
        let (scale, offset) = vars.norms[l];
        let normed = tape.layer_norm(update, scale, offset, LN_EPS)?;
        h = tape.elu(normed);
    }
    let h_final = h;

    let pooled = tape.segment_sum(h_final, &batch.node_graph, batch.n_graphs)?;
    let z1 = tape.matmul(pooled, vars.head.w1)?;
    let z1 = tape.add(z1, vars.head.b1)?;
    let mut bn_batch = Vec::new();
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
    Ok(GatForward { log_probs, logits, h_final, attention, bn_batch })
}

/// Draw inverted-dropout masks for each layer input.
pub(crate) fn dropout_masks(
    cfg: &GatConfig,
    batch: &GraphBatch,
    rng: &mut ChaCha8Rng,
) -> Option<Vec<Tensor>> {
    if cfg.dropout <= 0.0 {
        return None;
    }
    let keep = 1.0 - cfg.dropout;
    let mut masks = Vec::with_capacity(cfg.layers);
    for layer in 0..cfg.layers {
        let cols = cfg.layer_in(layer);
        let data = (0..batch.n_nodes * cols)
            .map(|_| if rng.gen_range(0.0..1.0) < keep { 1.0 / keep } else { 0.0 })
            .collect();
        masks.push(Tensor::new(batch.n_nodes, cols, data));
    }
    Some(masks)
}

fn run_step(
    params: &GatModelParams,
    batch: &GraphBatch,
    train: bool,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<StepOutput, ModelError> {
    let mut tape = Tape::new();
    let vars = GatModelVars::bind(params, &mut tape, train);
    let masks = match (train, rng) {
        (true, Some(rng)) => dropout_masks(&params.cfg, batch, rng),
        _ => None,
    };
    let fwd = gat_forward_on_tape(&mut tape, params, &vars, batch, train, masks.as_deref())?;
    let loss = tape.nll_loss(fwd.log_probs, &batch.labels)?;
    let grads = if train {
        let map = tape.backward(loss)?;
        let ordered: Vec<Var> = flatten_vars(&vars);
        ordered
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

fn flatten_vars(vars: &GatModelVars) -> Vec<Var> {
    let mut out = Vec::new();
    for layer in &vars.layers {
        for head in layer {
            out.extend([head.w, head.a, head.m, head.w_e]);
        }
    }
    for &(scale, offset) in &vars.norms {
        out.extend([scale, offset]);
    }
    let h = &vars.head;
    out.extend([h.w1, h.b1, h.bn_gamma, h.bn_beta, h.w2, h.b2]);
    out
}

impl GraphClassifier for GatModelParams {
    fn param_tensors(&self) -> Vec<&Tensor> {
        GatModelParams::param_tensors(self)
    }

    fn param_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        GatModelParams::param_tensors_mut(self)
    }

    fn param_names(&self) -> Vec<String> {
        GatModelParams::param_names(self)
    }

    fn train_step(
        &self,
        batch: &GraphBatch,
        rng: &mut ChaCha8Rng,
    ) -> Result<StepOutput, ModelError> {
        run_step(self, batch, true, Some(rng))
    }

    fn eval_step(&self, batch: &GraphBatch) -> Result<StepOutput, ModelError> {
        run_step(self, batch, false, None)
    }

    fn apply_bn_updates(&mut self, updates: &[BnStats], momentum: f64) {
        if let Some(stats) = updates.first() {
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

/// Eval-mode forward returning plain tensors.
pub fn gat_eval(
    params: &GatModelParams,
    batch: &GraphBatch,
) -> Result<(Tensor, Vec<Tensor>), ModelError> {
    let mut tape = Tape::new();
    let vars = GatModelVars::bind(params, &mut tape, false);
    let fwd = gat_forward_on_tape(&mut tape, params, &vars, batch, false, None)?;
    Ok((tape.value(fwd.log_probs).clone(), fwd.attention))
}
