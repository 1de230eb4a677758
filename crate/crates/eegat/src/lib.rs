//! EEG epilepsy-vs-control classification over phase-locking-value graphs.
//!
//! The pipeline turns 14-channel resting-state EEG recordings into windowed
//! complete graphs (PLV edge weights, five per-channel node features) and
//! classifies them with a two-layer GATv2 network, with a GCN and a random
//! forest as baselines. Training runs leave-one-subject-out cross-validation
//! with Adam; evaluation reports per-class metrics, AUROC, and DeLong
//! comparisons. Attention coefficients and Grad-CAM provide edge- and
//! node-level explanations, exportable as JSON and schematic connectome SVGs.
//!
//! Everything is deterministic given the root seed: data generation,
//! initialization, batching, and fold splits all derive from it.
//!
//! Start with the runnable examples (`cargo run --example ...`):
//!
//! - `synthetic_data` — generate a labeled synthetic dataset and inspect PLV
//!   separation between classes
//! - `preprocess_signal` — band-pass filtering, ICA cleaning, windowing
//! - `plv_graphs` — analytic phase, PLV matrices, graph assembly
//! - `gradient_check` — the reverse-mode engine vs. finite differences
//! - `train_gat` — train the attention classifier on one split
//! - `loocv_compare` — full cross-validated comparison of GAT/GCN/RF + DeLong
//! - `explain_attention` — edge/node importance and connectome export
//!
//! The same capabilities are reachable through the thin `eegat` binary
//! (`eegat synth|preprocess|featurize|train|loocv|explain|all`).

pub mod autodiff;
pub mod config;
pub mod connectivity;
pub mod dataset;
pub mod explain;
pub mod features;
pub mod models;
pub mod pipeline;
pub mod preprocess;
pub mod rf;
pub mod train;

pub use config::PipelineConfig;
pub use connectivity::GraphSample;
pub use dataset::{ClassLabel, DatasetManifest, Recording};
pub use features::FeatureMatrix;
pub use preprocess::Window;

/// The 14 Epoc electrode labels in canonical column order.
pub const CANONICAL_CHANNELS: [&str; 14] = [
    "AF3", "F7", "F3", "FC5", "T7", "P7", "O1", "O2", "P8", "T8", "FC6", "F4", "F8", "AF4",
];

/// Number of EEG channels (graph nodes).
pub const N_CHANNELS: usize = 14;

/// Index of a canonical channel label, if present.
pub fn channel_index(label: &str) -> Option<usize> {
    CANONICAL_CHANNELS.iter().position(|&c| c == label)
}

/// Derive a sub-seed from a root seed for an independent random stream.
///
/// Streams are identified by a short domain string plus an index, so every
/// consumer (subjects, folds, trees, initializers) draws from its own
/// reproducible source regardless of scheduling order.
pub fn derive_seed(root: u64, domain: &str, index: u64) -> u64 {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    hasher.update(root.to_le_bytes());
    hasher.update(domain.as_bytes());
    hasher.update(index.to_le_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is long enough"))
}
