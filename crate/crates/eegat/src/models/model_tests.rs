//! Model oracles: dense per-node reference implementations, symmetry
//! arguments, and finite-difference gradient checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gat::{gat_layer, GatHeadParams};
use super::testutil::{permute_graph, random_graph};
use super::*;
use crate::autodiff::{grad_check, Tape, Tensor};
use crate::dataset::ClassLabel;
use crate::models::gcn::normalized_coefficients;

fn leaky(v: f64, slope: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        slope * v
    }
}

/// Straightforward dense per-node implementation of one attention layer.
fn dense_gat_layer(
    heads: &[GatHeadParams],
    x: &Tensor,
    plv: &[Vec<f64>],
    slope: f64,
) -> (Tensor, Vec<Tensor>) {
    let n = x.rows();
    let d_in = x.cols();
    let d_out = heads[0].m.rows();
    let mut out = Tensor::zeros(n, heads.len() * d_out);
    let mut alphas = vec![Tensor::zeros(n, n); heads.len()];
    for (h, head) in heads.iter().enumerate() {
        for target in 0..n {
            // Scores against every source (complete graph incl. self).
            let mut scores = vec![0.0; n];
            for source in 0..n {
                let mut s = 0.0;
                for r in 0..d_out {
                    let mut u = head.w_e.get(r, 0) * plv[source][target];
                    for k in 0..d_in {
                        u += head.w.get(r, k) * x.get(target, k);
                        u += head.w.get(r, d_in + k) * x.get(source, k);
                    }
                    s += head.a.get(r, 0) * leaky(u, slope);
                }
                scores[source] = s;
            }
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|&s| (s - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            for source in 0..n {
                let alpha = exps[source] / z;
                alphas[h].set(target, source, alpha);
                for r in 0..d_out {
                    let mut m_x = 0.0;
                    for k in 0..d_in {
                        m_x += head.m.get(r, k) * x.get(source, k);
                    }
                    let v = out.get(target, h * d_out + r) + alpha * m_x;
                    out.set(target, h * d_out + r, v);
                }
            }
        }
    }
    (out, alphas)
}

fn tape_gat_layer(params: &GatModelParams, batch: &GraphBatch) -> (Tensor, Tensor) {
    let mut tape = Tape::new();
    let vars = GatModelVars::bind(params, &mut tape, false);
    let x = tape.constant(batch.x.clone());
    let (out, attention) =
        gat_layer(&mut tape, &vars.layers[0], x, batch, params.cfg.negative_slope).unwrap();
    (tape.value(out).clone(), attention)
}

#[test]
fn gat_layer_matches_dense_oracle_on_random_graph() {
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    let g = random_graph(14, &mut rng, ClassLabel::Control);
    let batch = GraphBatch::from_samples(&[&g]).unwrap();
    let cfg = GatConfig { hidden: 8, heads: 3, layers: 1, ..GatConfig::default() };
    let params = GatModelParams::init(&cfg, 5);

    let (tape_out, tape_attention) = tape_gat_layer(&params, &batch);
    let (dense_out, dense_alphas) =
        dense_gat_layer(&params.layers[0].heads, &batch.x, &g.plv, cfg.negative_slope);

    assert_eq!(tape_out.shape(), dense_out.shape());
    for (a, b) in tape_out.data().iter().zip(dense_out.data()) {
        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }
    // Attention agrees edge-by-edge.
    for e in 0..batch.n_edges() {
        let (src, dst) = (batch.edge_src[e], batch.edge_dst[e]);
        for h in 0..cfg.heads {
            let dense = dense_alphas[h].get(dst, src);
            let taped = tape_attention.get(e, h);
            assert!((dense - taped).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_sums_to_one_per_node_and_head() {
    let mut rng = ChaCha8Rng::seed_from_u64(72);
    let g = random_graph(14, &mut rng, ClassLabel::Epilepsy);
    let batch = GraphBatch::from_samples(&[&g]).unwrap();
    let params = GatModelParams::init(&GatConfig::default(), 3);
    let (_, attention) = gat_eval(&params, &batch).unwrap();
    for alpha in &attention {
        for h in 0..params.cfg.heads {
            let mut sums = vec![0.0; batch.n_nodes];
            for e in 0..batch.n_edges() {
                sums[batch.edge_dst[e]] += alpha.get(e, h);
            }
            for (node, s) in sums.iter().enumerate() {
                assert!((s - 1.0).abs() < 1e-12, "node {node} head {h} sum {s}");
            }
        }
    }
}

#[test]
fn isolated_node_attends_to_itself_only() {
    let cfg = GatConfig { hidden: 4, heads: 2, layers: 1, ..GatConfig::default() };
    let params = GatModelParams::init(&cfg, 9);
    let x = Tensor::new(1, 5, vec![0.3, -0.7, 1.1, 0.2, -0.4]);
    let batch = GraphBatch {
        x: x.clone(),
        edge_src: vec![0],
        edge_dst: vec![0],
        edge_attr: Tensor::column(&[1.0]),
        node_graph: vec![0],
        n_graphs: 1,
        n_nodes: 1,
        labels: vec![0],
    };
    let (out, attention) = tape_gat_layer(&params, &batch);
    for h in 0..cfg.heads {
        assert!((attention.get(0, h) - 1.0).abs() < 1e-15, "softmax of a singleton");
        for r in 0..cfg.hidden {
            let mut m_x = 0.0;
            for k in 0..5 {
                m_x += params.layers[0].heads[h].m.get(r, k) * x.get(0, k);
            }
            assert!((out.get(0, h * cfg.hidden + r) - m_x).abs() < 1e-12);
        }
    }
}

#[test]
fn two_identical_nodes_split_attention_evenly() {
    let cfg = GatConfig { hidden: 4, heads: 2, layers: 1, ..GatConfig::default() };
    let params = GatModelParams::init(&cfg, 11);
    let features = vec![0.5, -0.2, 0.9, 0.1, -0.6];
    let mut x_data = features.clone();
    x_data.extend(&features);
    let batch = GraphBatch {
        x: Tensor::new(2, 5, x_data),
        edge_src: vec![0, 1, 0, 1],
        edge_dst: vec![0, 0, 1, 1],
        edge_attr: Tensor::column(&[1.0, 1.0, 1.0, 1.0]),
        node_graph: vec![0, 0],
        n_graphs: 1,
        n_nodes: 2,
        labels: vec![0],
    };
    let (_, attention) = tape_gat_layer(&params, &batch);
    for e in 0..4 {
        for h in 0..cfg.heads {
            assert!((attention.get(e, h) - 0.5).abs() < 1e-12, "symmetric logits");
        }
    }
}

#[test]
fn zeroed_attention_parameters_give_uniform_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(73);
    let g = random_graph(14, &mut rng, ClassLabel::Control);
    let batch = GraphBatch::from_samples(&[&g]).unwrap();
    let mut params = GatModelParams::init(&GatConfig::default(), 1);
    for layer in &mut params.layers {
        for head in &mut layer.heads {
            head.a = Tensor::zeros(head.a.rows(), 1);
            head.w_e = Tensor::zeros(head.w_e.rows(), 1);
        }
    }
    let (_, attention) = gat_eval(&params, &batch).unwrap();
    for alpha in &attention {
        for v in alpha.iter() {
            assert!((v - 1.0 / 14.0).abs() < 1e-12);
        }
    }
}

#[test]
fn log_probs_exponentiate_to_a_distribution() {
    let mut rng = ChaCha8Rng::seed_from_u64(74);
    let g = random_graph(14, &mut rng, ClassLabel::Control);
    let batch = GraphBatch::from_samples(&[&g]).unwrap();
    let params = GatModelParams::init(&GatConfig::default(), 2);
    let (log_probs, _) = gat_eval(&params, &batch).unwrap();
    let total: f64 = log_probs.data().iter().map(|lp| lp.exp()).sum();
    assert!((total - 1.0).abs() < 1e-9);
}

#[test]
fn pooled_outputs_are_invariant_to_node_permutation() {
    let mut rng = ChaCha8Rng::seed_from_u64(75);
    let gat = GatModelParams::init(&GatConfig::default(), 4);
    let gcn = GcnModelParams::init(&GcnConfig::default(), 4);
    for trial in 0..5 {
        let g = random_graph(14, &mut rng, ClassLabel::Epilepsy);
        let mut perm: Vec<usize> = (0..14).collect();
        for i in (1..14).rev() {
            let j = rng.gen_range(0..=i);
            perm.swap(i, j);
        }
        let permuted = permute_graph(&g, &perm);
        let original = GraphBatch::from_samples(&[&g]).unwrap();
        let shuffled = GraphBatch::from_samples(&[&permuted]).unwrap();

        let (a, _) = gat_eval(&gat, &original).unwrap();
        let (b, _) = gat_eval(&gat, &shuffled).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-9, "gat trial {trial}: {x} vs {y}");
        }

        let a = gcn.eval_step(&original).unwrap().log_probs;
        let b = gcn.eval_step(&shuffled).unwrap().log_probs;
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-9, "gcn trial {trial}: {x} vs {y}");
        }
    }
}

#[test]
fn duplicated_graph_in_a_batch_scores_identically_in_eval() {
    let mut rng = ChaCha8Rng::seed_from_u64(76);
    let g = random_graph(14, &mut rng, ClassLabel::Control);
    let params = GatModelParams::init(&GatConfig::default(), 6);
    let pair = GraphBatch::from_samples(&[&g, &g]).unwrap();
    let single = GraphBatch::from_samples(&[&g]).unwrap();
    let (two, _) = gat_eval(&params, &pair).unwrap();
    let (one, _) = gat_eval(&params, &single).unwrap();
    for c in 0..2 {
        assert!((two.get(0, c) - two.get(1, c)).abs() < 1e-12);
        assert!((two.get(0, c) - one.get(0, c)).abs() < 1e-12);
    }
}

#[test]
fn init_is_deterministic_and_bounded() {
    let cfg = GatConfig::default();
    let a = GatModelParams::init(&cfg, 42);
    let b = GatModelParams::init(&cfg, 42);
    for (x, y) in a.param_tensors().iter().zip(b.param_tensors()) {
        assert_eq!(x.data(), y.data(), "same seed must be bit-identical");
    }
    let c = GatModelParams::init(&cfg, 43);
    let differs = a
        .param_tensors()
        .iter()
        .zip(c.param_tensors())
        .any(|(x, y)| x.data() != y.data());
    assert!(differs, "different seeds should differ");

    // Glorot bound per matrix.
    for layer in &a.layers {
        for head in &layer.heads {
            let d_out = head.w.rows();
            let two_d_in = head.w.cols();
            let bound = (6.0 / (two_d_in + d_out) as f64).sqrt();
            assert!(head.w.iter().all(|&v| v.abs() <= bound));
            let bound = (6.0 / (head.m.rows() + head.m.cols()) as f64).sqrt();
            assert!(head.m.iter().all(|&v| v.abs() <= bound));
        }
    }
}

/// Dense per-node reference of one normalized graph convolution.
fn dense_gcn_layer(w: &Tensor, batch: &GraphBatch, weighted: bool) -> Tensor {
    let coeff = normalized_coefficients(batch, weighted);
    let n = batch.n_nodes;
    let d_out = w.cols();
    let projected = batch.x.matmul(w);
    let mut out = Tensor::zeros(n, d_out);
    for e in 0..batch.n_edges() {
        let (src, dst) = (batch.edge_src[e], batch.edge_dst[e]);
        for r in 0..d_out {
            let v = out.get(dst, r) + coeff[e] * projected.get(src, r);
            out.set(dst, r, v);
        }
    }
    out
}

#[test]
fn gcn_layer_matches_dense_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let g = random_graph(14, &mut rng, ClassLabel::Control);
    let batch = GraphBatch::from_samples(&[&g]).unwrap();
    let params = GcnModelParams::init(&GcnConfig::default(), 7);

    let mut tape = Tape::new();
    let vars = GcnVars::bind(&params, &mut tape, false);
    let x = tape.constant(batch.x.clone());
    let coeff = tape.constant(Tensor::column(&normalized_coefficients(&batch, true)));
    let projected = tape.matmul(x, vars.convs[0].0).unwrap();
    let gathered = tape.gather_rows(projected, &batch.edge_src).unwrap();
    let weighted = tape.multiply(gathered, coeff).unwrap();
    let aggregated = tape.scatter_add_rows(weighted, &batch.edge_dst, batch.n_nodes).unwrap();

    let dense = dense_gcn_layer(&params.convs[0].w, &batch, true);
    for (a, b) in tape.value(aggregated).data().iter().zip(dense.data()) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn gcn_equal_features_on_regular_graph_stay_equal() {
    // All-equal node features and all-equal edge weights: by symmetry every
    // node embedding stays identical through every layer.
    let n = 14;
    let mut plv = vec![vec![0.4; n]; n];
    for (i, row) in plv.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    let g = GraphSample {
        subject_id: "reg".into(),
        window_index: 0,
        label: ClassLabel::Control,
        node_features: crate::features::FeatureMatrix {
            values: vec![vec![0.3, -0.2, 0.8, 0.5, -0.9]; n],
        },
        plv,
    };
    let batch = GraphBatch::from_samples(&[&g]).unwrap();
    let params = GcnModelParams::init(&GcnConfig::default(), 8);
    let coeff = normalized_coefficients(&batch, true);

    let mut tape = Tape::new();
    let vars = GcnVars::bind(&params, &mut tape, false);
    let mut h = tape.constant(batch.x.clone());
    let coeff_var = tape.constant(Tensor::column(&coeff));
    for (l, &(w, gamma, beta)) in vars.convs.iter().enumerate() {
        let projected = tape.matmul(h, w).unwrap();
        let gathered = tape.gather_rows(projected, &batch.edge_src).unwrap();
        let weighted = tape.multiply(gathered, coeff_var).unwrap();
        let aggregated =
            tape.scatter_add_rows(weighted, &batch.edge_dst, batch.n_nodes).unwrap();
        let normed = tape
            .batch_norm_eval(
                aggregated,
                gamma,
                beta,
                &params.convs[l].bn_running_mean,
                &params.convs[l].bn_running_var,
                BN_EPS,
            )
            .unwrap();
        h = tape.relu(normed);
        let value = tape.value(h);
        for r in 1..n {
            for c in 0..value.cols() {
                assert!(
                    (value.get(r, c) - value.get(0, c)).abs() < 1e-12,
                    "layer {l} row {r}"
                );
            }
        }
    }
}

fn small_gat_config() -> GatConfig {
    GatConfig { hidden: 4, heads: 2, layers: 2, mlp_hidden: 6, ..GatConfig::default() }
}

fn small_gcn_config() -> GcnConfig {
    GcnConfig { hidden: 4, layers: 2, mlp_hidden: 6, ..GcnConfig::default() }
}

fn random_batch(rng: &mut ChaCha8Rng, n_graphs: usize) -> (Vec<GraphSample>, Vec<usize>) {
    let graphs: Vec<GraphSample> = (0..n_graphs)
        .map(|i| {
            random_graph(
                6,
                rng,
                if i % 2 == 0 { ClassLabel::Control } else { ClassLabel::Epilepsy },
            )
        })
        .collect();
    let labels = graphs.iter().map(|g| g.label.index()).collect();
    (graphs, labels)
}

#[test]
fn full_gat_model_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(80);
    let (graphs, labels) = random_batch(&mut rng, 3);
    let refs: Vec<&GraphSample> = graphs.iter().collect();
    let batch = GraphBatch::from_samples(&refs).unwrap();
    let cfg = small_gat_config();
    let params = GatModelParams::init(&cfg, 81);
    let point: Vec<Tensor> = params.param_tensors().into_iter().cloned().collect();

    let err = grad_check(
        |tape, vars| {
            let model_vars = GatModelVars::from_vars(&cfg, vars);
            let fwd = gat_forward_on_tape(tape, &params, &model_vars, &batch, true, None)
                .map_err(|e| match e {
                    ModelError::Autodiff(a) => a,
                    other => panic!("non-autodiff error {other}"),
                })?;
            tape.nll_loss(fwd.log_probs, &labels)
        },
        &point,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn full_gcn_model_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(82);
    let (graphs, labels) = random_batch(&mut rng, 3);
    let refs: Vec<&GraphSample> = graphs.iter().collect();
    let batch = GraphBatch::from_samples(&refs).unwrap();
    let cfg = small_gcn_config();
    let params = GcnModelParams::init(&cfg, 83);
    let point: Vec<Tensor> = params.param_tensors().into_iter().cloned().collect();

    let err = grad_check(
        |tape, vars| {
            let model_vars = GcnVars::from_vars(&cfg, vars);
            let fwd = gcn_forward_on_tape(tape, &params, &model_vars, &batch, true)
                .map_err(|e| match e {
                    ModelError::Autodiff(a) => a,
                    other => panic!("non-autodiff error {other}"),
                })?;
            tape.nll_loss(fwd.log_probs, &labels)
        },
        &point,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn checkpoint_roundtrip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let params = GatModelParams::init(&GatConfig::default(), 19);
    let path = dir.path().join("model.json");
    save_checkpoint(&params, 19, "model.arch = gat", &path).unwrap();
    let loaded: Checkpoint<GatModelParams> = load_checkpoint(&path).unwrap();
    assert_eq!(loaded.seed, 19);
    assert_eq!(loaded.config_echo, "model.arch = gat");
    for (a, b) in params.param_tensors().iter().zip(loaded.params.param_tensors()) {
        assert_eq!(a.data(), b.data(), "bit-exact tensor roundtrip");
    }
    assert_eq!(params.head.bn_running_mean, loaded.params.head.bn_running_mean);
    assert_eq!(params.head.bn_running_var, loaded.params.head.bn_running_var);
}
