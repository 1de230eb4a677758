//! Edge and node explanations of a trained attention model.
//!
//! Edge importance averages the final attention layer's coefficients over
//! heads and samples, then symmetrizes. Node importance follows the graph
//! Grad-CAM recipe: channel weights are the node-averaged gradients of the
//! target-class logit with respect to the final node embeddings, and each
//! node scores the ReLU-clamped weighted sum of its embedding.

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, Tensor};
use crate::connectivity::GraphSample;
use crate::models::{
    gat_forward_on_tape, GatModelParams, GatModelVars, GraphBatch, ModelError,
};
use crate::{CANONICAL_CHANNELS, N_CHANNELS};

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error("empty sample set")]
    EmptySampleSet,
    #[error("top_k {got} exceeds the {max} undirected off-diagonal edges")]
    InvalidTopK { got: usize, max: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Symmetric edge-importance matrix with self-loop weights kept aside.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EdgeImportance {
    pub channels: Vec<String>,
    /// `[14 x 14]` symmetric, zero diagonal.
    pub weights: Vec<Vec<f64>>,
    /// Mean self-attention per channel, reported separately.
    pub self_loops: Vec<f64>,
}

impl EdgeImportance {
    /// Undirected off-diagonal edges ranked by weight, strongest first.
    pub fn ranked_edges(&self) -> Vec<(usize, usize, f64)> {
        let n = self.weights.len();
        let mut edges = Vec::with_capacity(n * (n - 1) / 2);
        for i in 0..n {
            for j in (i + 1)..n {
                edges.push((i, j, self.weights[i][j]));
            }
        }
        edges.sort_by(|a, b| b.2.partial_cmp(&a.2).expect("finite weights"));
        edges
    }
}

/// Nonnegative per-channel importance scores.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NodeImportance {
    pub channels: Vec<String>,
    pub scores: Vec<f64>,
}

impl NodeImportance {
    pub fn ranked_nodes(&self) -> Vec<(usize, f64)> {
        let mut nodes: Vec<(usize, f64)> =
            self.scores.iter().copied().enumerate().collect();
        nodes.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite scores"));
        nodes
    }
}

/// Mean directed attention of the final layer, `[dst][src]`, averaged over
/// heads and samples. Each row (including its self-loop column) sums to 1.
pub fn directed_attention_mean(
    model: &GatModelParams,
    samples: &[GraphSample],
) -> Result<Vec<Vec<f64>>, ExplainError> {
    if samples.is_empty() {
        return Err(ExplainError::EmptySampleSet);
    }
    let n = samples[0].n_nodes();
    let mut mean = vec![vec![0.0; n]; n];
    for sample in samples {
        let batch = GraphBatch::from_samples(&[sample])?;
        let (_, attention) = crate::models::gat_eval(model, &batch)?;
        let last = attention.last().expect("at least one attention layer");
        let heads = last.cols();
        for e in 0..batch.n_edges() {
            let head_mean: f64 =
                (0..heads).map(|h| last.get(e, h)).sum::<f64>() / heads as f64;
            mean[batch.edge_dst[e]][batch.edge_src[e]] += head_mean;
        }
    }
    let count = samples.len() as f64;
    for row in &mut mean {
        for v in row {
            *v /= count;
        }
    }
    Ok(mean)
}

/// Aggregate final-layer attention into a symmetric edge-importance matrix.
pub fn edge_importance(
    model: &GatModelParams,
    samples: &[GraphSample],
) -> Result<EdgeImportance, ExplainError> {
    let directed = directed_attention_mean(model, samples)?;
    let n = directed.len();
    let mut weights = vec![vec![0.0; n]; n];
    let mut self_loops = vec![0.0; n];
    for i in 0..n {
        self_loops[i] = directed[i][i];
        for j in 0..n {
            if i != j {
                weights[i][j] = 0.5 * (directed[i][j] + directed[j][i]);
            }
        }
    }
    Ok(EdgeImportance {
        channels: CANONICAL_CHANNELS.iter().map(|s| s.to_string()).collect(),
        weights,
        self_loops,
    })
}

/// Grad-CAM node importance for one sample and target class.
///
/// `w_k = mean_v d logit_c / d H[v, k]`, `score_v = relu(sum_k w_k H[v, k])`.
pub fn gradcam_node_importance(
    model: &GatModelParams,
    sample: &GraphSample,
    target_class: usize,
) -> Result<NodeImportance, ExplainError> {
    let batch = GraphBatch::from_samples(&[sample])?;
    let mut tape = Tape::new();
    // Tracked bind: the embeddings sit mid-tape, and gradients only flow
    // through nodes on a tracked path.
    let vars = GatModelVars::bind(model, &mut tape, true);
    let fwd = gat_forward_on_tape(&mut tape, model, &vars, &batch, false, None)?;

    // Select the scalar logit via a one-hot product.
    let mut onehot = Tensor::zeros(model.cfg.out_classes, 1);
    onehot.set(target_class, 0, 1.0);
    let select = tape.constant(onehot);
    let scalar = tape.matmul(fwd.logits, select).map_err(ModelError::from)?;
    let grads = tape.backward(scalar).map_err(ModelError::from)?;

    let embeddings = tape.value(fwd.h_final).clone();
    let (n_nodes, width) = embeddings.shape();
    let grad = grads.get(fwd.h_final);
    let mut scores = vec![0.0; n_nodes];
    if let Some(grad) = grad {
        // Channel weights: node-mean of the embedding gradients.
        let mut weights = vec![0.0; width];
        for v in 0..n_nodes {
            for k in 0..width {
                weights[k] += grad.get(v, k) / n_nodes as f64;
            }
        }
        for v in 0..n_nodes {
            let s: f64 = (0..width).map(|k| weights[k] * embeddings.get(v, k)).sum();
            scores[v] = s.max(0.0);
        }
    }
    // A detached logit (no gradient path) leaves all scores at zero.
    Ok(NodeImportance {
        channels: CANONICAL_CHANNELS.iter().map(|s| s.to_string()).collect(),
        scores,
    })
}

/// Mean Grad-CAM importance over a set of samples.
pub fn gradcam_mean(
    model: &GatModelParams,
    samples: &[GraphSample],
    target_class: usize,
) -> Result<NodeImportance, ExplainError> {
    if samples.is_empty() {
        return Err(ExplainError::EmptySampleSet);
    }
    let mut total = vec![0.0; N_CHANNELS];
    for sample in samples {
        let single = gradcam_node_importance(model, sample, target_class)?;
        for (t, s) in total.iter_mut().zip(&single.scores) {
            *t += s;
        }
    }
    for t in &mut total {
        *t /= samples.len() as f64;
    }
    Ok(NodeImportance {
        channels: CANONICAL_CHANNELS.iter().map(|s| s.to_string()).collect(),
        scores: total,
    })
}

/// Approximate 10-20 scalp coordinates of the 14 electrodes, unit head
/// circle, nose up: `(x right, y front)`.
pub const ELECTRODE_XY: [(f64, f64); 14] = [
    (-0.27, 0.82),  // AF3
    (-0.67, 0.44),  // F7
    (-0.34, 0.51),  // F3
    (-0.59, 0.21),  // FC5
    (-0.81, 0.00),  // T7
    (-0.67, -0.44), // P7
    (-0.27, -0.82), // O1
    (0.27, -0.82),  // O2
    (0.67, -0.44),  // P8
    (0.81, 0.00),   // T8
    (0.59, 0.21),   // FC6
    (0.34, 0.51),   // F4
    (0.67, 0.44),   // F8
    (0.27, 0.82),   // AF4
];

#[derive(Serialize)]
struct ConnectomeJson<'a> {
    channels: &'a [String],
    edge_weights: &'a [Vec<f64>],
    self_loops: &'a [f64],
    node_scores: &'a [f64],
    ranked_edges: Vec<RankedEdge>,
    ranked_nodes: Vec<RankedNode>,
}

#[derive(Serialize, Deserialize)]
struct RankedEdge {
    from: String,
    to: String,
    weight: f64,
}

#[derive(Serialize, Deserialize)]
struct RankedNode {
    channel: String,
    score: f64,
}

/// Write the connectome JSON (full matrices plus rankings) and a schematic
/// head-plot SVG with the `top_k` strongest edges.
pub fn export_connectome(
    edges: &EdgeImportance,
    nodes: &NodeImportance,
    top_k: usize,
    json_path: &Path,
    svg_path: &Path,
) -> Result<(), ExplainError> {
    let max_edges = edges.weights.len() * (edges.weights.len() - 1) / 2;
    if top_k > max_edges {
        return Err(ExplainError::InvalidTopK { got: top_k, max: max_edges });
    }
    let ranked = edges.ranked_edges();
    let payload = ConnectomeJson {
        channels: &edges.channels,
        edge_weights: &edges.weights,
        self_loops: &edges.self_loops,
        node_scores: &nodes.scores,
        ranked_edges: ranked
            .iter()
            .map(|&(i, j, w)| RankedEdge {
                from: edges.channels[i].clone(),
                to: edges.channels[j].clone(),
                weight: w,
            })
            .collect(),
        ranked_nodes: nodes
            .ranked_nodes()
            .into_iter()
            .map(|(i, s)| RankedNode { channel: nodes.channels[i].clone(), score: s })
            .collect(),
    };
    let mut file = std::io::BufWriter::new(std::fs::File::create(json_path)?);
    serde_json::to_writer_pretty(&mut file, &payload)?;
    file.flush()?;

    std::fs::write(svg_path, render_svg(edges, nodes, top_k))?;
    Ok(())
}

fn color_for(t: f64) -> String {
    // Blue (weak) to red (strong).
    let t = t.clamp(0.0, 1.0);
    let r = (40.0 + 215.0 * t) as u8;
    let g = (60.0 + 40.0 * (1.0 - t)) as u8;
    let b = (220.0 * (1.0 - t) + 35.0 * t) as u8;
    format!("#{r:02x}{g:02x}{b:02x}")
}

fn render_svg(edges: &EdgeImportance, nodes: &NodeImportance, top_k: usize) -> String {
    let size = 480.0;
    let center = size / 2.0;
    let scale = size * 0.38;
    let xy = |i: usize| -> (f64, f64) {
        let (x, y) = ELECTRODE_XY[i];
        (center + x * scale, center - y * scale)
    };

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size}\" height=\"{size}\" viewBox=\"0 0 {size} {size}\">\n"
    ));
    svg.push_str(&format!(
        "  <circle cx=\"{center}\" cy=\"{center}\" r=\"{}\" fill=\"#fbfbfb\" stroke=\"#555\" stroke-width=\"2\"/>\n",
        scale * 1.15
    ));
    // Nose marker.
    svg.push_str(&format!(
        "  <path d=\"M {} {} L {} {} L {} {} Z\" fill=\"none\" stroke=\"#555\" stroke-width=\"2\"/>\n",
        center - 14.0,
        center - scale * 1.14,
        center,
        center - scale * 1.24,
        center + 14.0,
        center - scale * 1.14
    ));

    let ranked = edges.ranked_edges();
    let strongest = ranked.first().map_or(1.0, |e| e.2).max(1e-12);
    // Each undirected edge drawn once.
    for &(i, j, w) in ranked.iter().take(top_k) {
        let (x1, y1) = xy(i);
        let (x2, y2) = xy(j);
        let t = w / strongest;
        svg.push_str(&format!(
            "  <line x1=\"{x1:.1}\" y1=\"{y1:.1}\" x2=\"{x2:.1}\" y2=\"{y2:.1}\" stroke=\"{}\" stroke-width=\"{:.2}\" stroke-opacity=\"0.85\"/>\n",
            color_for(t),
            1.0 + 4.0 * t
        ));
    }

    let node_max = nodes.scores.iter().cloned().fold(0.0f64, f64::max).max(1e-12);
    for i in 0..N_CHANNELS {
        let (x, y) = xy(i);
        let t = nodes.scores[i] / node_max;
        svg.push_str(&format!(
            "  <circle cx=\"{x:.1}\" cy=\"{y:.1}\" r=\"{:.1}\" fill=\"{}\" stroke=\"#333\" stroke-width=\"1\"/>\n",
            9.0 + 5.0 * t,
            color_for(t)
        ));
        svg.push_str(&format!(
            "  <text x=\"{x:.1}\" y=\"{:.1}\" font-size=\"11\" font-family=\"sans-serif\" text-anchor=\"middle\">{}</text>\n",
            y - 12.0,
            CANONICAL_CHANNELS[i]
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::ClassLabel;
    use crate::models::{testutil::random_graph, GatConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn uniform_attention_model() -> GatModelParams {
        let mut params = GatModelParams::init(&GatConfig::default(), 1);
        for layer in &mut params.layers {
            for head in &mut layer.heads {
                head.a = Tensor::zeros(head.a.rows(), 1);
                head.w_e = Tensor::zeros(head.w_e.rows(), 1);
            }
        }
        params
    }

    #[test]
    fn uniform_model_gives_uniform_directed_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(90);
        let samples = vec![random_graph(N_CHANNELS, &mut rng, ClassLabel::Control)];
        let model = uniform_attention_model();
        let directed = directed_attention_mean(&model, &samples).unwrap();
        for row in &directed {
            for &v in row {
                assert!((v - 1.0 / 14.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn directed_rows_sum_to_one_and_single_sample_matches_hand_extraction() {
        let mut rng = ChaCha8Rng::seed_from_u64(91);
        let sample = random_graph(N_CHANNELS, &mut rng, ClassLabel::Epilepsy);
        let cfg = GatConfig { heads: 1, hidden: 8, ..GatConfig::default() };
        let model = GatModelParams::init(&cfg, 7);
        let directed = directed_attention_mean(&model, std::slice::from_ref(&sample)).unwrap();
        for (i, row) in directed.iter().enumerate() {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9, "row {i} sums to {sum}");
        }

        // Single sample, single head: aggregation is the identity on that
        // sample's attention.
        let batch = GraphBatch::from_samples(&[&sample]).unwrap();
        let (_, attention) = crate::models::gat_eval(&model, &batch).unwrap();
        let last = attention.last().unwrap();
        for e in 0..batch.n_edges() {
            let v = directed[batch.edge_dst[e]][batch.edge_src[e]];
            assert!((v - last.get(e, 0)).abs() < 1e-15);
        }
    }

    #[test]
    fn two_sample_aggregate_is_the_mean_of_singles() {
        let mut rng = ChaCha8Rng::seed_from_u64(92);
        let a = random_graph(N_CHANNELS, &mut rng, ClassLabel::Control);
        let b = random_graph(N_CHANNELS, &mut rng, ClassLabel::Epilepsy);
        let model = GatModelParams::init(&GatConfig::default(), 3);
        let ea = edge_importance(&model, std::slice::from_ref(&a)).unwrap();
        let eb = edge_importance(&model, std::slice::from_ref(&b)).unwrap();
        let both = edge_importance(&model, &[a, b]).unwrap();
        for i in 0..N_CHANNELS {
            for j in 0..N_CHANNELS {
                let mean = 0.5 * (ea.weights[i][j] + eb.weights[i][j]);
                assert!((both.weights[i][j] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn edge_importance_is_sample_order_invariant_and_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(93);
        let a = random_graph(N_CHANNELS, &mut rng, ClassLabel::Control);
        let b = random_graph(N_CHANNELS, &mut rng, ClassLabel::Epilepsy);
        let model = GatModelParams::init(&GatConfig::default(), 4);
        let ab = edge_importance(&model, &[a.clone(), b.clone()]).unwrap();
        let ba = edge_importance(&model, &[b, a]).unwrap();
        for i in 0..N_CHANNELS {
            assert_eq!(ab.weights[i][i], 0.0, "diagonal excluded");
            for j in 0..N_CHANNELS {
                assert!((ab.weights[i][j] - ba.weights[i][j]).abs() < 1e-12);
                assert_eq!(ab.weights[i][j], ab.weights[j][i]);
            }
        }
        assert!(matches!(
            edge_importance(&model, &[]),
            Err(ExplainError::EmptySampleSet)
        ));
    }

    #[test]
    fn gradcam_scores_are_nonnegative_and_match_linear_head_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(94);
        let sample = random_graph(N_CHANNELS, &mut rng, ClassLabel::Epilepsy);
        // Make the head linear in the pooled embedding: identity Dense1,
        // identity eval batch-norm, and a large positive shift so the ReLU
        // never clamps the hidden layer.
        let width = 8; // heads * hidden = 2 * 4
        let cfg = GatConfig {
            hidden: 4,
            heads: 2,
            mlp_hidden: width,
            ..GatConfig::default()
        };
        let mut model = GatModelParams::init(&cfg, 5);
        let mut identity = Tensor::zeros(width, width);
        for i in 0..width {
            identity.set(i, i, 1.0);
        }
        model.head.w1 = identity;
        model.head.b1 = Tensor::filled(1, width, 1000.0);
        model.head.bn_gamma = Tensor::filled(1, width, 1.0);
        model.head.bn_beta = Tensor::zeros(1, width);
        model.head.bn_running_mean = vec![0.0; width];
        model.head.bn_running_var = vec![1.0 - crate::models::BN_EPS; width];

        let target = 1;
        let got = gradcam_node_importance(&model, &sample, target).unwrap();
        for &s in &got.scores {
            assert!(s >= 0.0);
        }

        // Closed form: logit_c = u_c . (Z + 1000) + b, so the channel
        // weights are exactly u_c and scores are relu(H u_c).
        let batch = GraphBatch::from_samples(&[&sample]).unwrap();
        let mut tape = Tape::new();
        let vars = GatModelVars::bind(&model, &mut tape, false);
        let fwd = gat_forward_on_tape(&mut tape, &model, &vars, &batch, false, None).unwrap();
        let h = tape.value(fwd.h_final).clone();
        for v in 0..N_CHANNELS {
            let mut s = 0.0;
            for k in 0..width {
                s += model.head.w2.get(k, target) * h.get(v, k);
            }
            let expected = s.max(0.0);
            assert!(
                (got.scores[v] - expected).abs() < 1e-9,
                "node {v}: {} vs {expected}",
                got.scores[v]
            );
        }
    }

    #[test]
    fn detached_logit_yields_zero_importance() {
        let mut rng = ChaCha8Rng::seed_from_u64(95);
        let sample = random_graph(N_CHANNELS, &mut rng, ClassLabel::Control);
        let cfg = GatConfig { hidden: 4, heads: 2, mlp_hidden: 8, ..GatConfig::default() };
        let mut model = GatModelParams::init(&cfg, 6);
        // Zero second dense layer: the logit no longer depends on the
        // embeddings, so the gradient is identically zero.
        model.head.w2 = Tensor::zeros(8, 2);
        let got = gradcam_node_importance(&model, &sample, 1).unwrap();
        assert!(got.scores.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn export_writes_json_and_svg() {
        let mut rng = ChaCha8Rng::seed_from_u64(96);
        let samples = vec![random_graph(N_CHANNELS, &mut rng, ClassLabel::Epilepsy)];
        let model = GatModelParams::init(&GatConfig::default(), 8);
        let edges = edge_importance(&model, &samples).unwrap();
        let nodes = gradcam_mean(&model, &samples, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let json_path = dir.path().join("connectome.json");
        let svg_path = dir.path().join("connectome.svg");
        export_connectome(&edges, &nodes, 10, &json_path, &svg_path).unwrap();

        // JSON roundtrips the matrix bit-exactly.
        let text = std::fs::read_to_string(&json_path).unwrap();
        let value: serde_json::Value = serde_json::from_str(&text).unwrap();
        let matrix: Vec<Vec<f64>> =
            serde_json::from_value(value["edge_weights"].clone()).unwrap();
        assert_eq!(matrix, edges.weights);

        let svg = std::fs::read_to_string(&svg_path).unwrap();
        assert_eq!(svg.matches("<line").count(), 10, "top_k edges drawn once each");
        assert_eq!(svg.matches("<circle").count(), 15, "head + 14 electrodes");

        // top_k = 0 still renders nodes.
        let svg0 = render_svg(&edges, &nodes, 0);
        assert_eq!(svg0.matches("<line").count(), 0);
        assert_eq!(svg0.matches("<circle").count(), 15);

        assert!(matches!(
            export_connectome(&edges, &nodes, 92, &json_path, &svg_path),
            Err(ExplainError::InvalidTopK { .. })
        ));
    }
}
