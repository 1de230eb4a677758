//! Random-forest baseline over flattened per-window features.
//!
//! Each graph flattens to a 161-dimensional vector: the 70 node features
//! followed by the 91 upper-triangle PLV values. Trees are grown on
//! bootstrap samples with Gini-impurity splits over sqrt(d) candidate
//! features, to purity unless capped.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::connectivity::GraphSample;
use crate::derive_seed;

#[derive(Debug, Error)]
pub enum RfError {
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("training labels contain a single class")]
    SingleClass,
    #[error("feature dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// Forest settings; defaults are the conventional 500 trees, unlimited
/// depth, sqrt(d) feature subsampling, leaves down to one sample.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RfConfig {
    pub n_trees: usize,
    /// `None` grows to purity.
    pub max_depth: Option<usize>,
    pub min_samples_leaf: usize,
    pub seed: u64,
}

impl Default for RfConfig {
    fn default() -> Self {
        Self { n_trees: 500, max_depth: None, min_samples_leaf: 1, seed: 0 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
enum Node {
    Leaf { counts: [usize; 2] },
    Split { feature: usize, threshold: f64, left: usize, right: usize },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    fn leaf_counts(&self, x: &[f64]) -> [usize; 2] {
        let mut at = 0;
        loop {
            match &self.nodes[at] {
                Node::Leaf { counts } => return *counts,
                Node::Split { feature, threshold, left, right } => {
                    at = if x[*feature] <= *threshold { *left } else { *right };
                }
            }
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Forest {
    pub trees: Vec<Tree>,
    pub n_features: usize,
    pub config: RfConfig,
    /// Accuracy over out-of-bag votes, when every sample was out of bag for
    /// at least one tree.
    pub oob_accuracy: Option<f64>,
}

/// Flatten a graph to `[node features (70) | upper-triangle PLV (91)]`.
pub fn flatten_window_features(sample: &GraphSample) -> Vec<f64> {
    let n = sample.n_nodes();
    let mut out = Vec::with_capacity(n * sample.node_features.values[0].len() + n * (n - 1) / 2);
    for row in &sample.node_features.values {
        out.extend_from_slice(row);
    }
    for i in 0..n {
        for j in (i + 1)..n {
            out.push(sample.plv[i][j]);
        }
    }
    out
}

/// Inverse of the flattening layout: which (node, feature) or (i, j) pair a
/// vector position refers to.
#[derive(Debug, PartialEq, Eq)]
pub enum FeatureIndex {
    Node { channel: usize, feature: usize },
    Edge { i: usize, j: usize },
}

pub fn feature_index(position: usize, n_nodes: usize, n_features: usize) -> FeatureIndex {
    let node_block = n_nodes * n_features;
    if position < node_block {
        FeatureIndex::Node { channel: position / n_features, feature: position % n_features }
    } else {
        let mut offset = position - node_block;
        for i in 0..n_nodes {
            let row = n_nodes - i - 1;
            if offset < row {
                return FeatureIndex::Edge { i, j: i + 1 + offset };
            }
            offset -= row;
        }
        unreachable!("position out of range");
    }
}

fn gini(counts: &[usize; 2]) -> f64 {
    let total = (counts[0] + counts[1]) as f64;
    if total == 0.0 {
        return 0.0;
    }
    let p0 = counts[0] as f64 / total;
    let p1 = counts[1] as f64 / total;
    1.0 - p0 * p0 - p1 * p1
}

struct TreeBuilder<'a> {
    x: &'a [Vec<f64>],
    y: &'a [usize],
    n_candidates: usize,
    max_depth: Option<usize>,
    min_samples_leaf: usize,
    nodes: Vec<Node>,
}

impl TreeBuilder<'_> {
    fn counts(&self, idx: &[usize]) -> [usize; 2] {
        let mut counts = [0usize; 2];
        for &i in idx {
            counts[self.y[i]] += 1;
        }
        counts
    }

    fn grow(&mut self, idx: &[usize], depth: usize, rng: &mut ChaCha8Rng) -> usize {
        let counts = self.counts(idx);
        let node_gini = gini(&counts);
        let depth_capped = self.max_depth.is_some_and(|d| depth >= d);
        if node_gini == 0.0 || depth_capped || idx.len() < 2 * self.min_samples_leaf {
            self.nodes.push(Node::Leaf { counts });
            return self.nodes.len() - 1;
        }

        let mut best: Option<(f64, usize, f64)> = None; // (gain, feature, threshold)
        for feature in sample_features(self.x[0].len(), self.n_candidates, rng) {
            // Sort the node's samples along this feature, then scan split
            // points between distinct neighbors.
            let mut order: Vec<usize> = idx.to_vec();
            order.sort_by(|&a, &b| {
                self.x[a][feature]
                    .partial_cmp(&self.x[b][feature])
                    .expect("features are finite")
            });
            let total = counts;
            let mut left = [0usize; 2];
            for w in 0..order.len() - 1 {
                left[self.y[order[w]]] += 1;
                let a = self.x[order[w]][feature];
                let b = self.x[order[w + 1]][feature];
                if a == b {
                    continue;
                }
                let n_left = w + 1;
                let n_right = order.len() - n_left;
                if n_left < self.min_samples_leaf || n_right < self.min_samples_leaf {
                    continue;
                }
                let right = [total[0] - left[0], total[1] - left[1]];
                let weighted = (n_left as f64 * gini(&left) + n_right as f64 * gini(&right))
                    / order.len() as f64;
                let gain = node_gini - weighted;
                if gain > best.map_or(0.0, |(g, _, _)| g) {
                    best = Some((gain, feature, 0.5 * (a + b)));
                }
            }
        }

        let Some((_, feature, threshold)) = best else {
            self.nodes.push(Node::Leaf { counts });
            return self.nodes.len() - 1;
        };

        // The threshold sits between two observed values, so neither side is
        // empty.
        let (left_idx, right_idx): (Vec<usize>, Vec<usize>) =
            idx.iter().partition(|&&i| self.x[i][feature] <= threshold);
        let placeholder = self.nodes.len();
        self.nodes.push(Node::Leaf { counts });
        let left = self.grow(&left_idx, depth + 1, rng);
        let right = self.grow(&right_idx, depth + 1, rng);
        self.nodes[placeholder] = Node::Split { feature, threshold, left, right };
        placeholder
    }
}

/// `k` distinct feature indices via partial Fisher-Yates.
fn sample_features(d: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut pool: Vec<usize> = (0..d).collect();
    let k = k.min(d);
    for i in 0..k {
        let j = rng.gen_range(i..d);
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool
}

/// Train a forest on feature vectors with binary labels.
pub fn rf_train(x: &[Vec<f64>], y: &[usize], cfg: &RfConfig) -> Result<Forest, RfError> {
    if x.len() < 2 {
        return Err(RfError::TooFewSamples(x.len()));
    }
    assert_eq!(x.len(), y.len(), "sample/label count");
    if y.iter().all(|&l| l == y[0]) {
        return Err(RfError::SingleClass);
    }
    let d = x[0].len();
    let n_candidates = (d as f64).sqrt().ceil() as usize;

    let results: Vec<(Tree, Vec<bool>)> = (0..cfg.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "tree", t as u64));
            let mut in_bag = vec![false; x.len()];
            let idx: Vec<usize> = (0..x.len())
                .map(|_| {
                    let i = rng.gen_range(0..x.len());
                    in_bag[i] = true;
                    i
                })
                .collect();
            let mut builder = TreeBuilder {
                x,
                y,
                n_candidates,
                max_depth: cfg.max_depth,
                min_samples_leaf: cfg.min_samples_leaf,
                nodes: Vec::new(),
            };
            builder.grow(&idx, 0, &mut rng);
            (Tree { nodes: builder.nodes }, in_bag)
        })
        .collect();

    // Out-of-bag accuracy from per-sample vote averages.
    let mut votes = vec![[0.0f64; 2]; x.len()];
    let mut covered = vec![false; x.len()];
    for (tree, in_bag) in &results {
        for (i, bagged) in in_bag.iter().enumerate() {
            if !bagged {
                let counts = tree.leaf_counts(&x[i]);
                let total = (counts[0] + counts[1]) as f64;
                votes[i][0] += counts[0] as f64 / total;
                votes[i][1] += counts[1] as f64 / total;
                covered[i] = true;
            }
        }
    }
    let oob_accuracy = if covered.iter().all(|&c| c) {
        let correct = votes
            .iter()
            .zip(y)
            .filter(|(v, &label)| (v[1] > v[0]) as usize == label)
            .count();
        Some(correct as f64 / x.len() as f64)
    } else {
        None
    };

    Ok(Forest {
        trees: results.into_iter().map(|(t, _)| t).collect(),
        n_features: d,
        config: cfg.clone(),
        oob_accuracy,
    })
}

/// Mean of per-tree leaf class frequencies; sums to 1.
pub fn rf_predict_proba(forest: &Forest, x: &[f64]) -> Result<[f64; 2], RfError> {
    if x.len() != forest.n_features {
        return Err(RfError::DimensionMismatch { expected: forest.n_features, got: x.len() });
    }
    let mut probs = [0.0f64; 2];
    for tree in &forest.trees {
        let counts = tree.leaf_counts(x);
        let total = (counts[0] + counts[1]) as f64;
        probs[0] += counts[0] as f64 / total;
        probs[1] += counts[1] as f64 / total;
    }
    probs[0] /= forest.trees.len() as f64;
    probs[1] /= forest.trees.len() as f64;
    Ok(probs)
}
