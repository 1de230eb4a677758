//! Optimization, leave-one-subject-out cross-validation, and evaluation.

mod adam;
mod loocv;
mod metrics;
mod trainer;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use loocv::{
    loocv, train_fold, window_probabilities, Aggregate, ClassifierKind, DatasetAccess,
    DelongPair, FoldModels, LoocvOptions, LoocvResult, SubjectGraphs, SubjectScore,
};
pub use metrics::{
    auroc, compute_metrics, delong_test, ClassMetrics, ConfusionCounts, DelongResult,
    MetricsReport,
};
pub use trainer::{train_model, TrainHistory};

use thiserror::Error;

use crate::models::ModelError;
use crate::rf::RfError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("shape mismatch between parameters and gradients at index {0}")]
    ShapeMismatch(usize),
    #[error("empty {0} split")]
    EmptySplit(&'static str),
    #[error("labels contain a single class")]
    SingleClass,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("variance estimate is not positive; the comparison is degenerate")]
    DegenerateVariance,
    #[error("training pool for fold {fold} has a single class")]
    ClassMissing { fold: usize },
    #[error("need at least {need} subjects, got {got}")]
    TooFewSubjects { need: usize, got: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Forest(#[from] RfError),
    #[error(transparent)]
    Feature(#[from] crate::features::FeatureError),
}

/// Optimization settings. Defaults follow the trained configuration:
/// Adam at 1e-3 with decoupled weight decay 5.8e-3, up to 400 epochs,
/// early stopping after 10 stagnant validation epochs.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub iterations: usize,
    pub early_stop_patience: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 5.8e-3,
            iterations: 400,
            early_stop_patience: 10,
            batch_size: 64,
            seed: 0,
            val_fraction: 0.2,
        }
    }
}
