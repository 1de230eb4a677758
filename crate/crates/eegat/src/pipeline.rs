//! End-to-end orchestration behind the CLI subcommands.
//!
//! Every stage reads its inputs from the output directory of the previous
//! stage (or the configured dataset), writes its artifacts under `out.dir`,
//! and records a run manifest with the full config echo, the root seed, and
//! content hashes of its inputs. Metrics JSON files are byte-identical
//! across reruns with the same config, seed, and inputs.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{Arch, PipelineConfig};
use crate::connectivity::{build_graph, read_graphs_jsonl, write_graphs_jsonl, GraphSample};
use crate::dataset::{
    generate_synthetic_dataset_with, load_manifest, load_recording, write_manifest,
    write_recording, ClassLabel, DatasetManifest, SynthConfig,
};
use crate::explain::{
    edge_importance, export_connectome, gradcam_mean, EdgeImportance, NodeImportance,
};
use crate::features::node_features;
use crate::models::{save_checkpoint, GatModelParams, GcnModelParams};
use crate::preprocess::{preprocess_recording, PreprocessOptions, Window};
use crate::train::{
    loocv, train_model, window_probabilities, ClassifierKind, LoocvResult, SubjectGraphs,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
    #[error(transparent)]
    Data(#[from] crate::dataset::DataError),
    #[error(transparent)]
    Preprocess(#[from] crate::preprocess::PreprocessError),
    #[error(transparent)]
    Feature(#[from] crate::features::FeatureError),
    #[error(transparent)]
    Connectivity(#[from] crate::connectivity::ConnectivityError),
    #[error(transparent)]
    Model(#[from] crate::models::ModelError),
    #[error(transparent)]
    Train(#[from] crate::train::TrainError),
    #[error(transparent)]
    Explain(#[from] crate::explain::ExplainError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Invalid(String),
}

/// Process exit code a failure maps to, for the CLI's documented table.
pub fn exit_code(err: &PipelineError) -> i32 {
    match err {
        PipelineError::Config(_) => 2,
        PipelineError::Data(_) | PipelineError::Preprocess(_) | PipelineError::Feature(_)
        | PipelineError::Connectivity(_) | PipelineError::Invalid(_) => 3,
        PipelineError::Model(_) | PipelineError::Train(_) | PipelineError::Explain(_) => 4,
        PipelineError::Io(_) | PipelineError::Json(_) => 1,
    }
}

fn sha256_file(path: &Path) -> std::io::Result<String> {
    let bytes = std::fs::read(path)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    seed: u64,
    config: &'a str,
    input_hashes: BTreeMap<String, String>,
}

fn write_run_manifest(
    cfg: &PipelineConfig,
    command: &str,
    inputs: &[PathBuf],
) -> Result<(), PipelineError> {
    let mut input_hashes = BTreeMap::new();
    for path in inputs {
        input_hashes.insert(path.display().to_string(), sha256_file(path)?);
    }
    let manifest = RunManifest {
        command,
        seed: cfg.seed,
        config: &cfg.render(),
        input_hashes,
    };
    let path = cfg.out_dir.join(format!("run_manifest_{command}.json"));
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer_pretty(&mut file, &manifest)?;
    file.flush()?;
    Ok(())
}

/// Resolve the dataset manifest: the configured one, or the synthetic
/// dataset generated under `out.dir`.
fn manifest_path(cfg: &PipelineConfig) -> PathBuf {
    cfg.dataset_manifest
        .clone()
        .unwrap_or_else(|| cfg.out_dir.join("dataset").join("manifest.csv"))
}

/// Generate the synthetic dataset (per `synth.*` keys) under
/// `out.dir/dataset/`. Returns the manifest path.
pub fn run_synth(cfg: &PipelineConfig) -> Result<PathBuf, PipelineError> {
    let dir = cfg.out_dir.join("dataset");
    std::fs::create_dir_all(&dir)?;
    let synth_cfg = SynthConfig {
        fs: cfg.fs,
        duration_s: cfg.synth_duration_s,
        ..SynthConfig::default()
    };
    let (recordings, manifest) = generate_synthetic_dataset_with(
        cfg.synth_subjects,
        cfg.synth_effect,
        cfg.seed,
        &synth_cfg,
    )?;
    for (rec, entry) in recordings.iter().zip(&manifest.entries) {
        write_recording(rec, &dir.join(&entry.file))?;
    }
    let path = dir.join("manifest.csv");
    write_manifest(&manifest, &path)?;
    write_run_manifest(cfg, "synth", &[])?;
    Ok(path)
}

fn load_dataset(cfg: &PipelineConfig) -> Result<DatasetManifest, PipelineError> {
    let path = manifest_path(cfg);
    if !path.exists() {
        return Err(PipelineError::Invalid(format!(
            "dataset manifest {} not found; run `synth` first or set dataset.manifest",
            path.display()
        )));
    }
    Ok(load_manifest(&path)?)
}

fn preprocess_options(cfg: &PipelineConfig) -> PreprocessOptions {
    PreprocessOptions {
        low_hz: cfg.filter_low_hz,
        high_hz: cfg.filter_high_hz,
        ica_enabled: cfg.ica_enabled,
        ica_components: cfg.ica_components,
        ica_reject: cfg.ica_reject,
        window_len_s: cfg.window_len_s,
        overlap_s: cfg.window_overlap_s,
        seed: cfg.seed,
    }
}

#[derive(Serialize, serde::Deserialize)]
struct WindowRecord {
    subject_id: String,
    index: usize,
    label: ClassLabel,
    fs: f64,
    /// `[win_samples][14]`
    data: Vec<Vec<f64>>,
}

/// Filter, optionally ICA-clean, and window every recording; one JSONL file
/// of windows per subject under `out.dir/windows/`.
pub fn run_preprocess(cfg: &PipelineConfig) -> Result<PathBuf, PipelineError> {
    let manifest = load_dataset(cfg)?;
    let dir = cfg.out_dir.join("windows");
    std::fs::create_dir_all(&dir)?;
    let opts = preprocess_options(cfg);
    let mut inputs = vec![manifest_path(cfg)];
    for entry in &manifest.entries {
        let recording = load_recording(&entry.file, &entry.subject_id, cfg.fs)?;
        let windows = preprocess_recording(&recording, entry.label, &opts)?;
        let path = dir.join(format!("{}.windows.jsonl", entry.subject_id));
        let mut file = std::io::BufWriter::new(std::fs::File::create(&path)?);
        for w in &windows {
            let record = WindowRecord {
                subject_id: w.subject_id.clone(),
                index: w.index,
                label: w.label,
                fs: w.fs,
                data: w.data.rows().into_iter().map(|r| r.to_vec()).collect(),
            };
            serde_json::to_writer(&mut file, &record)?;
            file.write_all(b"\n")?;
        }
        file.flush()?;
        inputs.push(entry.file.clone());
    }
    write_run_manifest(cfg, "preprocess", &inputs)?;
    Ok(dir)
}

fn read_windows(path: &Path) -> Result<Vec<Window>, PipelineError> {
    use std::io::BufRead;
    let reader = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut windows = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: WindowRecord = serde_json::from_str(&line)?;
        let rows = record.data.len();
        let cols = record.data.first().map_or(0, Vec::len);
        let mut data = ndarray::Array2::zeros((rows, cols));
        for (r, row) in record.data.iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                data[[r, c]] = v;
            }
        }
        windows.push(Window {
            subject_id: record.subject_id,
            index: record.index,
            label: record.label,
            fs: record.fs,
            data,
        });
    }
    Ok(windows)
}

/// Node features + PLV graphs for every window; one JSONL graph file per
/// subject under `out.dir/graphs/`.
pub fn run_featurize(cfg: &PipelineConfig) -> Result<PathBuf, PipelineError> {
    let manifest = load_dataset(cfg)?;
    let windows_dir = cfg.out_dir.join("windows");
    let dir = cfg.out_dir.join("graphs");
    std::fs::create_dir_all(&dir)?;
    let mut inputs = Vec::new();
    for entry in &manifest.entries {
        let windows_path = windows_dir.join(format!("{}.windows.jsonl", entry.subject_id));
        if !windows_path.exists() {
            return Err(PipelineError::Invalid(format!(
                "{} not found; run `preprocess` first",
                windows_path.display()
            )));
        }
        let windows = read_windows(&windows_path)?;
        let mut graphs = Vec::with_capacity(windows.len());
        for window in &windows {
            let features = node_features(window, cfg.features_window_fn)?;
            graphs.push(build_graph(window, &features, cfg.plv_band)?);
        }
        write_graphs_jsonl(&graphs, &dir.join(format!("{}.graphs.jsonl", entry.subject_id)))?;
        inputs.push(windows_path);
    }
    write_run_manifest(cfg, "featurize", &inputs)?;
    Ok(dir)
}

/// Load the per-subject graph files in manifest order.
pub fn load_subject_graphs(cfg: &PipelineConfig) -> Result<Vec<SubjectGraphs>, PipelineError> {
    let manifest = load_dataset(cfg)?;
    let dir = cfg.out_dir.join("graphs");
    let mut subjects = Vec::with_capacity(manifest.len());
    for entry in &manifest.entries {
        let path = dir.join(format!("{}.graphs.jsonl", entry.subject_id));
        if !path.exists() {
            return Err(PipelineError::Invalid(format!(
                "{} not found; run `featurize` first",
                path.display()
            )));
        }
        subjects.push(SubjectGraphs {
            subject_id: entry.subject_id.clone(),
            label: entry.label,
            windows: read_graphs_jsonl(&path)?,
        });
    }
    Ok(subjects)
}

/// Train one model (per `model.arch`) on a single subject-level split and
/// save a checkpoint plus the loss history.
pub fn run_train(cfg: &PipelineConfig) -> Result<PathBuf, PipelineError> {
    let subjects = load_subject_graphs(cfg)?;
    // Deterministic subject split: every k-th subject per class validates.
    let mut train_windows = Vec::new();
    let mut val_windows = Vec::new();
    let mut class_counter = [0usize; 2];
    let val_every = (1.0 / cfg.train_val_fraction).round() as usize;
    for subject in &subjects {
        let c = subject.label.index();
        class_counter[c] += 1;
        if class_counter[c] % val_every.max(2) == 0 {
            val_windows.extend(subject.windows.iter().cloned());
        } else {
            train_windows.extend(subject.windows.iter().cloned());
        }
    }
    if val_windows.is_empty() {
        val_windows = train_windows.clone();
    }

    let normalizer = if cfg.features_normalize {
        let mats: Vec<_> = train_windows.iter().map(|w| w.node_features.clone()).collect();
        Some(crate::features::fit_normalizer(&mats)?)
    } else {
        None
    };
    let normalize = |ws: &mut Vec<GraphSample>| {
        if let Some(norm) = &normalizer {
            for w in ws.iter_mut() {
                w.node_features = crate::features::apply_normalizer(norm, &w.node_features);
            }
        }
    };
    normalize(&mut train_windows);
    normalize(&mut val_windows);

    std::fs::create_dir_all(&cfg.out_dir)?;
    let train_cfg = cfg.train_config();
    let (checkpoint_path, history) = match cfg.model_arch {
        Arch::Gat => {
            let init = GatModelParams::init(&cfg.gat_config(), cfg.seed);
            let (model, history) = train_model(init, &train_windows, &val_windows, &train_cfg)?;
            let path = cfg.out_dir.join("model_gat.json");
            save_checkpoint(&model, cfg.seed, &cfg.render(), &path)?;
            (path, history)
        }
        Arch::Gcn => {
            let init = GcnModelParams::init(&cfg.gcn_config(), cfg.seed);
            let (model, history) = train_model(init, &train_windows, &val_windows, &train_cfg)?;
            let path = cfg.out_dir.join("model_gcn.json");
            save_checkpoint(&model, cfg.seed, &cfg.render(), &path)?;
            (path, history)
        }
    };

    #[derive(Serialize)]
    struct HistoryJson {
        train_loss: Vec<f64>,
        val_loss: Vec<f64>,
        best_epoch: usize,
        best_val_loss: f64,
        stopped_early: bool,
    }
    let history_json = HistoryJson {
        train_loss: history.train_loss,
        val_loss: history.val_loss,
        best_epoch: history.best_epoch,
        best_val_loss: history.best_val_loss,
        stopped_early: history.stopped_early,
    };
    let mut file = std::io::BufWriter::new(std::fs::File::create(
        cfg.out_dir.join("train_history.json"),
    )?);
    serde_json::to_writer_pretty(&mut file, &history_json)?;
    file.flush()?;

    write_run_manifest(cfg, "train", &graph_inputs(cfg)?)?;
    Ok(checkpoint_path)
}

fn graph_inputs(cfg: &PipelineConfig) -> Result<Vec<PathBuf>, PipelineError> {
    let manifest = load_dataset(cfg)?;
    let dir = cfg.out_dir.join("graphs");
    Ok(manifest
        .entries
        .iter()
        .map(|e| dir.join(format!("{}.graphs.jsonl", e.subject_id)))
        .collect())
}

#[derive(Serialize)]
struct MetricsJson<'a> {
    dataset: String,
    classifier: &'a str,
    subject_level: &'a crate::train::MetricsReport,
    window_level: &'a crate::train::MetricsReport,
}

/// Write per-classifier metrics JSON, the per-subject score CSV, and the
/// pairwise DeLong JSON.
pub fn write_loocv_reports(
    cfg: &PipelineConfig,
    result: &LoocvResult,
) -> Result<(), PipelineError> {
    let dataset = manifest_path(cfg).display().to_string();
    for (kind, subject_report) in &result.subject_metrics {
        let window_report = &result
            .window_metrics
            .iter()
            .find(|(k, _)| k == kind)
            .expect("window metrics exist for every classifier")
            .1;
        let payload = MetricsJson {
            dataset: dataset.clone(),
            classifier: kind.name(),
            subject_level: subject_report,
            window_level: window_report,
        };
        let path = cfg.out_dir.join(format!("metrics_{}.json", kind.name()));
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer_pretty(&mut file, &payload)?;
        file.flush()?;
    }

    // Fixed five-column score CSV; classifiers that did not run stay blank.
    let mut csv = String::from("subject_id,label,score_rf,score_gcn,score_gat\n");
    for subject in &result.subject_scores {
        let score_of = |kind: ClassifierKind| -> String {
            subject
                .scores
                .iter()
                .find(|(k, _)| *k == kind)
                .map(|(_, s)| format!("{s}"))
                .unwrap_or_default()
        };
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            subject.subject_id,
            subject.label,
            score_of(ClassifierKind::Rf),
            score_of(ClassifierKind::Gcn),
            score_of(ClassifierKind::Gat),
        ));
    }
    std::fs::write(cfg.out_dir.join("subject_scores.csv"), csv)?;

    #[derive(Serialize)]
    struct DelongJson<'a> {
        dataset: String,
        pairs: &'a [crate::train::DelongPair],
    }
    let payload = DelongJson { dataset, pairs: &result.delong };
    let mut file =
        std::io::BufWriter::new(std::fs::File::create(cfg.out_dir.join("delong.json"))?);
    serde_json::to_writer_pretty(&mut file, &payload)?;
    file.flush()?;
    Ok(())
}

/// Full cross-validated evaluation of the configured classifiers.
pub fn run_loocv(cfg: &PipelineConfig) -> Result<LoocvResult, PipelineError> {
    let subjects = load_subject_graphs(cfg)?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    let result = loocv(&subjects, &cfg.loocv_options())?;
    write_loocv_reports(cfg, &result)?;
    write_run_manifest(cfg, "loocv", &graph_inputs(cfg)?)?;
    Ok(result)
}

/// Attention/Grad-CAM explanations aggregated over all test folds.
///
/// Each fold's trained attention model explains that fold's held-out
/// windows; matrices are averaged over all explained windows (optionally
/// only correctly classified ones) and exported as JSON + SVG.
pub fn run_explain(cfg: &PipelineConfig) -> Result<(EdgeImportance, NodeImportance), PipelineError> {
    let subjects = load_subject_graphs(cfg)?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    let mut opts = cfg.loocv_options();
    opts.classifiers = vec![ClassifierKind::Gat];
    let result = loocv(&subjects, &opts)?;

    let mut edge_sum = vec![vec![0.0; crate::N_CHANNELS]; crate::N_CHANNELS];
    let mut self_sum = vec![0.0; crate::N_CHANNELS];
    let mut node_sum = vec![0.0; crate::N_CHANNELS];
    let mut total_samples = 0usize;
    for fold in &result.folds {
        let (model, _) = fold.gat.as_ref().expect("gat trained in explain mode");
        let held: Vec<GraphSample> = subjects[fold.held_out]
            .windows
            .iter()
            .map(|w| fold.normalize_sample(w))
            .collect();
        let held = if cfg.explain_correct_only {
            let probs = window_probabilities(
                fold,
                ClassifierKind::Gat,
                &subjects[fold.held_out].windows,
                cfg.train_batch_size,
            )?;
            held.into_iter()
                .zip(probs)
                .filter(|(w, p)| usize::from(*p > 0.5) == w.label.index())
                .map(|(w, _)| w)
                .collect()
        } else {
            held
        };
        if held.is_empty() {
            continue;
        }
        let edges = edge_importance(model, &held)?;
        let nodes = gradcam_mean(model, &held, ClassLabel::Epilepsy.index())?;
        let weight = held.len() as f64;
        for i in 0..crate::N_CHANNELS {
            self_sum[i] += edges.self_loops[i] * weight;
            node_sum[i] += nodes.scores[i] * weight;
            for j in 0..crate::N_CHANNELS {
                edge_sum[i][j] += edges.weights[i][j] * weight;
            }
        }
        total_samples += held.len();
    }
    if total_samples == 0 {
        return Err(PipelineError::Invalid(
            "no windows available for explanation".to_string(),
        ));
    }
    let scale = total_samples as f64;
    for row in &mut edge_sum {
        for v in row {
            *v /= scale;
        }
    }
    for v in &mut self_sum {
        *v /= scale;
    }
    for v in &mut node_sum {
        *v /= scale;
    }
    let edges = EdgeImportance {
        channels: crate::CANONICAL_CHANNELS.iter().map(|s| s.to_string()).collect(),
        weights: edge_sum,
        self_loops: self_sum,
    };
    let nodes = NodeImportance {
        channels: crate::CANONICAL_CHANNELS.iter().map(|s| s.to_string()).collect(),
        scores: node_sum,
    };
    export_connectome(
        &edges,
        &nodes,
        cfg.explain_top_k,
        &cfg.out_dir.join("connectome.json"),
        &cfg.out_dir.join("connectome.svg"),
    )?;
    write_run_manifest(cfg, "explain", &graph_inputs(cfg)?)?;
    Ok((edges, nodes))
}

/// `synth` (when no manifest is configured) then `preprocess`, `featurize`,
/// `loocv`, and `explain`.
pub fn run_all(cfg: &PipelineConfig) -> Result<LoocvResult, PipelineError> {
    if cfg.dataset_manifest.is_none() {
        run_synth(cfg)?;
    }
    run_preprocess(cfg)?;
    run_featurize(cfg)?;
    let result = run_loocv(cfg)?;
    run_explain(cfg)?;
    Ok(result)
}
