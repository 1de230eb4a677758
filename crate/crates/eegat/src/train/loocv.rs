//! Leave-one-subject-out cross-validation over the three classifiers.
//!
//! Every fold holds out all windows of one subject. The training pool is
//! split by subject into train and validation (stratified, seeded), the
//! feature normalizer is fitted on training windows only, and the held-out
//! subject is scored window by window; the subject score aggregates the
//! window-level epilepsy probabilities.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{compute_metrics, delong_test, DelongResult, MetricsReport};
use super::trainer::{train_model, TrainHistory};
use super::{TrainConfig, TrainError};
use crate::connectivity::GraphSample;
use crate::dataset::ClassLabel;
use crate::derive_seed;
use crate::features::{apply_normalizer, fit_normalizer, Normalizer};
use crate::models::{
    GatConfig, GatModelParams, GcnConfig, GcnModelParams, GraphBatch, GraphClassifier,
};
use crate::rf::{flatten_window_features, rf_predict_proba, rf_train, Forest, RfConfig};

/// The comparison classifiers, in reporting order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassifierKind {
    Rf,
    Gcn,
    Gat,
}

impl ClassifierKind {
    pub fn name(self) -> &'static str {
        match self {
            ClassifierKind::Rf => "rf",
            ClassifierKind::Gcn => "gcn",
            ClassifierKind::Gat => "gat",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "rf" => Some(ClassifierKind::Rf),
            "gcn" => Some(ClassifierKind::Gcn),
            "gat" => Some(ClassifierKind::Gat),
            _ => None,
        }
    }
}

/// How window probabilities roll up into a subject score.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Aggregate {
    /// Mean window-level epilepsy probability.
    #[default]
    Mean,
    /// Fraction of windows voting epilepsy (probability above one half).
    Majority,
}

impl Aggregate {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mean" => Some(Aggregate::Mean),
            "majority" => Some(Aggregate::Majority),
            _ => None,
        }
    }
}

/// Read-only view of a per-subject dataset. The indirection lets tests trace
/// exactly which subjects a fold touches.
pub trait DatasetAccess: Sync {
    fn n_subjects(&self) -> usize;
    fn subject_id(&self, idx: usize) -> &str;
    fn label(&self, idx: usize) -> ClassLabel;
    fn windows(&self, idx: usize) -> Vec<GraphSample>;
}

/// One subject's graphs.
#[derive(Clone, Debug)]
pub struct SubjectGraphs {
    pub subject_id: String,
    pub label: ClassLabel,
    pub windows: Vec<GraphSample>,
}

impl DatasetAccess for [SubjectGraphs] {
    fn n_subjects(&self) -> usize {
        self.len()
    }

    fn subject_id(&self, idx: usize) -> &str {
        &self[idx].subject_id
    }

    fn label(&self, idx: usize) -> ClassLabel {
        self[idx].label
    }

    fn windows(&self, idx: usize) -> Vec<GraphSample> {
        self[idx].windows.clone()
    }
}

impl DatasetAccess for Vec<SubjectGraphs> {
    fn n_subjects(&self) -> usize {
        self.as_slice().n_subjects()
    }

    fn subject_id(&self, idx: usize) -> &str {
        self.as_slice().subject_id(idx)
    }

    fn label(&self, idx: usize) -> ClassLabel {
        self.as_slice().label(idx)
    }

    fn windows(&self, idx: usize) -> Vec<GraphSample> {
        DatasetAccess::windows(self.as_slice(), idx)
    }
}

/// Cross-validation settings.
#[derive(Clone, Debug)]
pub struct LoocvOptions {
    pub classifiers: Vec<ClassifierKind>,
    pub gat: GatConfig,
    pub gcn: GcnConfig,
    pub rf: RfConfig,
    pub train: TrainConfig,
    /// Z-score node features with statistics from the fold's training
    /// windows.
    pub normalize: bool,
    pub aggregate: Aggregate,
    /// Worker threads for fold-level parallelism; 0 uses the global pool.
    pub jobs: usize,
}

impl Default for LoocvOptions {
    fn default() -> Self {
        Self {
            classifiers: vec![ClassifierKind::Rf, ClassifierKind::Gcn, ClassifierKind::Gat],
            gat: GatConfig::default(),
            gcn: GcnConfig::default(),
            rf: RfConfig::default(),
            train: TrainConfig::default(),
            normalize: true,
            aggregate: Aggregate::Mean,
            jobs: 0,
        }
    }
}

/// Models trained for one fold.
pub struct FoldModels {
    pub held_out: usize,
    pub normalizer: Option<Normalizer>,
    pub gat: Option<(GatModelParams, TrainHistory)>,
    pub gcn: Option<(GcnModelParams, TrainHistory)>,
    pub rf: Option<Forest>,
}

impl FoldModels {
    /// Apply this fold's normalizer to a sample.
    pub fn normalize_sample(&self, sample: &GraphSample) -> GraphSample {
        match &self.normalizer {
            Some(norm) => {
                let mut out = sample.clone();
                out.node_features = apply_normalizer(norm, &sample.node_features);
                out
            }
            None => sample.clone(),
        }
    }
}

/// Train every requested classifier with subject `held_out` excluded.
///
/// The held-out subject's windows are never read here; scoring happens
/// separately.
pub fn train_fold<D: DatasetAccess + ?Sized>(
    data: &D,
    held_out: usize,
    opts: &LoocvOptions,
) -> Result<FoldModels, TrainError> {
    let pool: Vec<usize> = (0..data.n_subjects()).filter(|&i| i != held_out).collect();
    let has_both = pool.iter().any(|&i| data.label(i) == ClassLabel::Control)
        && pool.iter().any(|&i| data.label(i) == ClassLabel::Epilepsy);
    if !has_both {
        return Err(TrainError::ClassMissing { fold: held_out });
    }

    // Stratified validation subjects, seeded per fold. Classes with a single
    // pool subject stay entirely in training.
    let val_seed = derive_seed(opts.train.seed, "fold-val", held_out as u64);
    let mut val_subjects = Vec::new();
    for class in [ClassLabel::Control, ClassLabel::Epilepsy] {
        let mut members: Vec<usize> =
            pool.iter().copied().filter(|&i| data.label(i) == class).collect();
        if members.len() < 2 {
            continue;
        }
        let mut rng = rand::SeedableRng::seed_from_u64(derive_seed(val_seed, "class", class.index() as u64));
        let rng: &mut rand_chacha::ChaCha8Rng = &mut rng;
        for i in (1..members.len()).rev() {
            let j = rand::Rng::gen_range(rng, 0..=i);
            members.swap(i, j);
        }
        let want = ((members.len() as f64 * opts.train.val_fraction).round() as usize)
            .clamp(1, members.len() - 1);
        val_subjects.extend(members.into_iter().take(want));
    }

    let mut train_windows = Vec::new();
    let mut val_windows = Vec::new();
    for &i in &pool {
        let windows = data.windows(i);
        if val_subjects.contains(&i) {
            val_windows.extend(windows);
        } else {
            train_windows.extend(windows);
        }
    }
    // A two-subject pool cannot spare a validation subject; early stopping
    // then tracks the training windows instead.
    if val_windows.is_empty() {
        val_windows = train_windows.clone();
    }
    let train_has_both = {
        let mut c = [false, false];
        for w in &train_windows {
            c[w.label.index()] = true;
        }
        c[0] && c[1]
    };
    if !train_has_both {
        return Err(TrainError::ClassMissing { fold: held_out });
    }

    let normalizer = if opts.normalize {
        let feature_matrices: Vec<_> =
            train_windows.iter().map(|w| w.node_features.clone()).collect();
        Some(fit_normalizer(&feature_matrices)?)
    } else {
        None
    };
    let normalize = |windows: &[GraphSample]| -> Vec<GraphSample> {
        match &normalizer {
            Some(norm) => windows
                .iter()
                .map(|w| {
                    let mut out = w.clone();
                    out.node_features = apply_normalizer(norm, &w.node_features);
                    out
                })
                .collect(),
            None => windows.to_vec(),
        }
    };
    let train_windows = normalize(&train_windows);
    let val_windows = normalize(&val_windows);

    let mut fold = FoldModels { held_out, normalizer, gat: None, gcn: None, rf: None };
    for kind in &opts.classifiers {
        match kind {
            ClassifierKind::Gat => {
                let init = GatModelParams::init(
                    &opts.gat,
                    derive_seed(opts.train.seed, "gat-init", held_out as u64),
                );
                let cfg = TrainConfig {
                    seed: derive_seed(opts.train.seed, "gat-train", held_out as u64),
                    ..opts.train.clone()
                };
                fold.gat = Some(train_model(init, &train_windows, &val_windows, &cfg)?);
            }
            ClassifierKind::Gcn => {
                let init = GcnModelParams::init(
                    &opts.gcn,
                    derive_seed(opts.train.seed, "gcn-init", held_out as u64),
                );
                let cfg = TrainConfig {
                    seed: derive_seed(opts.train.seed, "gcn-train", held_out as u64),
                    ..opts.train.clone()
                };
                fold.gcn = Some(train_model(init, &train_windows, &val_windows, &cfg)?);
            }
            ClassifierKind::Rf => {
                // No early stopping: the forest trains on the full pool.
                let mut x: Vec<Vec<f64>> =
                    train_windows.iter().map(flatten_window_features).collect();
                let mut y: Vec<usize> = train_windows.iter().map(|w| w.label.index()).collect();
                x.extend(val_windows.iter().map(flatten_window_features));
                y.extend(val_windows.iter().map(|w| w.label.index()));
                let cfg = RfConfig {
                    seed: derive_seed(opts.train.seed, "rf", held_out as u64),
                    ..opts.rf.clone()
                };
                fold.rf = Some(rf_train(&x, &y, &cfg)?);
            }
        }
    }
    Ok(fold)
}

/// Window-level epilepsy probabilities of one classifier on (normalized)
/// samples.
pub fn window_probabilities(
    fold: &FoldModels,
    kind: ClassifierKind,
    samples: &[GraphSample],
    batch_size: usize,
) -> Result<Vec<f64>, TrainError> {
    let normalized: Vec<GraphSample> =
        samples.iter().map(|s| fold.normalize_sample(s)).collect();
    let mut probs = Vec::with_capacity(normalized.len());
    match kind {
        ClassifierKind::Gat => {
            let (model, _) = fold.gat.as_ref().expect("gat was trained for this fold");
            for chunk in normalized.chunks(batch_size.max(1)) {
                let refs: Vec<&GraphSample> = chunk.iter().collect();
                let out = model.eval_step(&GraphBatch::from_samples(&refs)?)?;
                for g in 0..chunk.len() {
                    probs.push(out.log_probs.get(g, 1).exp());
                }
            }
        }
        ClassifierKind::Gcn => {
            let (model, _) = fold.gcn.as_ref().expect("gcn was trained for this fold");
            for chunk in normalized.chunks(batch_size.max(1)) {
                let refs: Vec<&GraphSample> = chunk.iter().collect();
                let out = model.eval_step(&GraphBatch::from_samples(&refs)?)?;
                for g in 0..chunk.len() {
                    probs.push(out.log_probs.get(g, 1).exp());
                }
            }
        }
        ClassifierKind::Rf => {
            let forest = fold.rf.as_ref().expect("rf was trained for this fold");
            for sample in &normalized {
                let p = rf_predict_proba(forest, &flatten_window_features(sample))?;
                probs.push(p[1]);
            }
        }
    }
    Ok(probs)
}

fn aggregate_score(probs: &[f64], how: Aggregate) -> f64 {
    match how {
        Aggregate::Mean => probs.iter().sum::<f64>() / probs.len() as f64,
        Aggregate::Majority => {
            probs.iter().filter(|&&p| p > 0.5).count() as f64 / probs.len() as f64
        }
    }
}

/// One subject's aggregated scores, in `opts.classifiers` order.
#[derive(Clone, Debug, Serialize)]
pub struct SubjectScore {
    pub subject_id: String,
    pub label: ClassLabel,
    pub scores: Vec<(ClassifierKind, f64)>,
}

#[derive(Clone, Debug, Serialize)]
pub struct DelongPair {
    pub a: ClassifierKind,
    pub b: ClassifierKind,
    #[serde(flatten)]
    pub result: DelongResult,
}

pub struct LoocvResult {
    pub subject_scores: Vec<SubjectScore>,
    pub subject_metrics: Vec<(ClassifierKind, MetricsReport)>,
    pub window_metrics: Vec<(ClassifierKind, MetricsReport)>,
    pub delong: Vec<DelongPair>,
    pub folds: Vec<FoldModels>,
}

/// Full leave-one-subject-out evaluation of the requested classifiers.
pub fn loocv<D: DatasetAccess + ?Sized>(
    data: &D,
    opts: &LoocvOptions,
) -> Result<LoocvResult, TrainError> {
    let n = data.n_subjects();
    if n < 3 {
        return Err(TrainError::TooFewSubjects { need: 3, got: n });
    }
    let any = |class: ClassLabel| (0..n).any(|i| data.label(i) == class);
    if !(any(ClassLabel::Control) && any(ClassLabel::Epilepsy)) {
        return Err(TrainError::SingleClass);
    }

    let run = || -> Result<Vec<(FoldModels, Vec<(ClassifierKind, Vec<f64>)>)>, TrainError> {
        (0..n)
            .into_par_iter()
            .map(|fold_idx| {
                let fold = train_fold(data, fold_idx, opts)?;
                let held = data.windows(fold_idx);
                let mut per_classifier = Vec::with_capacity(opts.classifiers.len());
                for &kind in &opts.classifiers {
                    let probs =
                        window_probabilities(&fold, kind, &held, opts.train.batch_size)?;
                    per_classifier.push((kind, probs));
                }
                Ok((fold, per_classifier))
            })
            .collect()
    };
    let outcomes = if opts.jobs > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(opts.jobs)
            .build()
            .expect("worker pool")
            .install(run)?
    } else {
        run()?
    };

    let mut subject_scores = Vec::with_capacity(n);
    let mut window_labels: Vec<(ClassifierKind, Vec<usize>, Vec<f64>)> = opts
        .classifiers
        .iter()
        .map(|&k| (k, Vec::new(), Vec::new()))
        .collect();
    for (fold_idx, (_, per_classifier)) in outcomes.iter().enumerate() {
        let label = data.label(fold_idx);
        let n_windows = per_classifier.first().map_or(0, |(_, p)| p.len());
        let mut scores = Vec::with_capacity(per_classifier.len());
        for (slot, (kind, probs)) in window_labels.iter_mut().zip(per_classifier) {
            debug_assert_eq!(slot.0, *kind);
            slot.1.extend(std::iter::repeat_n(label.index(), n_windows));
            slot.2.extend_from_slice(probs);
            scores.push((*kind, aggregate_score(probs, opts.aggregate)));
        }
        subject_scores.push(SubjectScore {
            subject_id: data.subject_id(fold_idx).to_string(),
            label,
            scores,
        });
    }

    let subject_labels: Vec<usize> =
        subject_scores.iter().map(|s| s.label.index()).collect();
    let mut subject_metrics = Vec::new();
    let mut window_metrics = Vec::new();
    for (slot, &kind) in window_labels.iter().zip(&opts.classifiers) {
        let scores: Vec<f64> = subject_scores
            .iter()
            .map(|s| s.scores.iter().find(|(k, _)| *k == kind).expect("scored").1)
            .collect();
        let preds: Vec<usize> = scores.iter().map(|&s| usize::from(s > 0.5)).collect();
        subject_metrics.push((kind, compute_metrics(&subject_labels, &preds, &scores)?));

        let preds: Vec<usize> = slot.2.iter().map(|&p| usize::from(p > 0.5)).collect();
        window_metrics.push((kind, compute_metrics(&slot.1, &preds, &slot.2)?));
    }

    let mut delong = Vec::new();
    for i in 0..opts.classifiers.len() {
        for j in (i + 1)..opts.classifiers.len() {
            let (a, b) = (opts.classifiers[i], opts.classifiers[j]);
            let score_of = |kind: ClassifierKind| -> Vec<f64> {
                subject_scores
                    .iter()
                    .map(|s| s.scores.iter().find(|(k, _)| *k == kind).expect("scored").1)
                    .collect()
            };
            delong.push(DelongPair {
                a,
                b,
                result: delong_test(&subject_labels, &score_of(a), &score_of(b))?,
            });
        }
    }

    Ok(LoocvResult {
        subject_scores,
        subject_metrics,
        window_metrics,
        delong,
        folds: outcomes.into_iter().map(|(fold, _)| fold).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::testutil::random_graph;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Mutex;

    /// Class-separable toy dataset: one feature is shifted by label.
    fn toy_subjects(n_subjects: usize, windows_each: usize, seed: u64) -> Vec<SubjectGraphs> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n_subjects)
            .map(|s| {
                let label =
                    if s % 2 == 0 { ClassLabel::Control } else { ClassLabel::Epilepsy };
                let windows = (0..windows_each)
                    .map(|w| {
                        let mut g = random_graph(6, &mut rng, label);
                        g.subject_id = format!("s{s:02}");
                        g.window_index = w;
                        for row in &mut g.node_features.values {
                            row[0] += if label == ClassLabel::Epilepsy { 3.0 } else { -3.0 };
                            row[1] += rng.gen_range(-0.2..0.2);
                        }
                        g
                    })
                    .collect();
                SubjectGraphs { subject_id: format!("s{s:02}"), label, windows }
            })
            .collect()
    }

    fn fast_opts(seed: u64) -> LoocvOptions {
        LoocvOptions {
            gat: GatConfig { hidden: 4, heads: 2, mlp_hidden: 8, ..GatConfig::default() },
            gcn: GcnConfig { hidden: 8, layers: 2, mlp_hidden: 8, ..GcnConfig::default() },
            rf: RfConfig { n_trees: 31, ..RfConfig::default() },
            train: TrainConfig {
                iterations: 120,
                batch_size: 16,
                early_stop_patience: 15,
                seed,
                ..TrainConfig::default()
            },
            ..LoocvOptions::default()
        }
    }

    #[test]
    fn one_fold_per_subject_and_delong_pairs() {
        let data = toy_subjects(6, 4, 21);
        let result = loocv(&data, &fast_opts(1)).unwrap();
        assert_eq!(result.subject_scores.len(), 6);
        assert_eq!(result.folds.len(), 6);
        assert_eq!(result.delong.len(), 3); // rf-gcn, rf-gat, gcn-gat
        assert_eq!(result.subject_metrics.len(), 3);
        assert_eq!(result.window_metrics.len(), 3);
    }

    #[test]
    fn separable_toy_dataset_scores_high_auroc() {
        let data = toy_subjects(8, 5, 22);
        let result = loocv(&data, &fast_opts(2)).unwrap();
        for (kind, report) in &result.subject_metrics {
            assert!(
                report.auroc >= 0.9,
                "{} subject AUROC {}",
                kind.name(),
                report.auroc
            );
        }
    }

    #[test]
    fn too_few_or_single_class_is_rejected() {
        let data = toy_subjects(2, 3, 23);
        assert!(matches!(
            loocv(&data, &fast_opts(3)),
            Err(TrainError::TooFewSubjects { .. })
        ));
        let mut single = toy_subjects(4, 3, 24);
        for s in &mut single {
            s.label = ClassLabel::Control;
        }
        assert!(matches!(loocv(&single, &fast_opts(3)), Err(TrainError::SingleClass)));
    }

    /// Access-tracing double: records every subject whose windows are read.
    struct Traced {
        inner: Vec<SubjectGraphs>,
        accessed: Mutex<Vec<usize>>,
    }

    impl DatasetAccess for Traced {
        fn n_subjects(&self) -> usize {
            self.inner.n_subjects()
        }

        fn subject_id(&self, idx: usize) -> &str {
            self.inner.subject_id(idx)
        }

        fn label(&self, idx: usize) -> ClassLabel {
            self.inner.label(idx)
        }

        fn windows(&self, idx: usize) -> Vec<GraphSample> {
            self.accessed.lock().unwrap().push(idx);
            self.inner.windows(idx)
        }
    }

    #[test]
    fn training_never_reads_the_held_out_subject() {
        let data = Traced { inner: toy_subjects(5, 3, 25), accessed: Mutex::new(Vec::new()) };
        for held_out in 0..5 {
            data.accessed.lock().unwrap().clear();
            let opts = fast_opts(4);
            let _fold = train_fold(&data, held_out, &opts).unwrap();
            let accessed = data.accessed.lock().unwrap().clone();
            assert!(
                !accessed.contains(&held_out),
                "fold {held_out} read its own test subject during training"
            );
            // Everything else participates (train or val).
            for other in 0..5 {
                if other != held_out {
                    assert!(accessed.contains(&other), "subject {other} unused");
                }
            }
        }
    }

    #[test]
    fn classifier_subset_trains_only_that_state() {
        let data = toy_subjects(4, 3, 26);
        let opts = LoocvOptions {
            classifiers: vec![ClassifierKind::Gat],
            ..fast_opts(5)
        };
        let result = loocv(&data, &opts).unwrap();
        for fold in &result.folds {
            assert!(fold.gat.is_some());
            assert!(fold.gcn.is_none(), "gcn state must not be constructed");
            assert!(fold.rf.is_none(), "rf state must not be constructed");
        }
        assert!(result.delong.is_empty());
    }

    #[test]
    fn loocv_is_deterministic() {
        let data = toy_subjects(5, 3, 27);
        let opts = fast_opts(6);
        let a = loocv(&data, &opts).unwrap();
        let b = loocv(&data, &opts).unwrap();
        for (sa, sb) in a.subject_scores.iter().zip(&b.subject_scores) {
            assert_eq!(sa.scores, sb.scores);
        }
    }
}
