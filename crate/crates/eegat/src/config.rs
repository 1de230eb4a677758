//! Flat key=value pipeline configuration.
//!
//! One configuration drives every subcommand. Sources merge with the
//! precedence `flags > environment > file > defaults`; unknown keys and
//! out-of-domain values are rejected. Environment overrides use the
//! `EEGAT_` prefix with `.` spelled as `__` (`EEGAT_TRAIN__BATCH_SIZE`).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::connectivity::PlvBand;
use crate::features::WindowFn;
use crate::models::{GatConfig, GcnConfig};
use crate::rf::RfConfig;
use crate::train::{Aggregate, ClassifierKind, LoocvOptions, TrainConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("invalid value {value:?} for {key}: {reason}")]
    InvalidValue { key: String, value: String, reason: String },
    #[error("line {0} is not `key = value`")]
    Malformed(usize),
    #[error("io error reading config: {0}")]
    Io(#[from] std::io::Error),
}

/// Model architecture selected by the `train` subcommand.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arch {
    Gat,
    Gcn,
}

/// Every tunable of the pipeline, with documented defaults.
#[derive(Clone, Debug)]
pub struct PipelineConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Manifest of an on-disk dataset; empty means "use the synthetic one".
    pub dataset_manifest: Option<PathBuf>,
    pub fs: f64,

    pub filter_low_hz: f64,
    pub filter_high_hz: f64,
    pub ica_enabled: bool,
    pub ica_components: usize,
    pub ica_reject: bool,
    pub window_len_s: f64,
    pub window_overlap_s: f64,

    pub features_normalize: bool,
    pub features_window_fn: WindowFn,
    pub plv_band: PlvBand,

    pub model_arch: Arch,
    pub model_layers: usize,
    pub model_hidden: usize,
    pub model_heads: usize,
    pub model_dropout: f64,
    pub model_mlp_hidden: usize,

    pub gcn_layers: usize,
    pub gcn_hidden: usize,
    pub gcn_weighted: bool,

    pub train_lr: f64,
    pub train_weight_decay: f64,
    pub train_iterations: usize,
    pub train_patience: usize,
    pub train_batch_size: usize,
    pub train_val_fraction: f64,

    pub loocv_classifiers: Vec<ClassifierKind>,
    pub loocv_aggregate: Aggregate,
    pub loocv_jobs: usize,

    pub rf_trees: usize,
    /// 0 grows to purity.
    pub rf_max_depth: usize,

    pub explain_top_k: usize,
    pub explain_correct_only: bool,

    pub synth_subjects: usize,
    pub synth_effect: f64,
    pub synth_duration_s: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("out"),
            dataset_manifest: None,
            fs: 128.0,
            filter_low_hz: 0.5,
            filter_high_hz: 45.0,
            ica_enabled: false,
            ica_components: 10,
            ica_reject: false,
            window_len_s: 5.0,
            window_overlap_s: 1.0,
            features_normalize: true,
            features_window_fn: WindowFn::Hann,
            plv_band: PlvBand::Broadband,
            model_arch: Arch::Gat,
            model_layers: 2,
            model_hidden: 32,
            model_heads: 6,
            model_dropout: 0.0,
            model_mlp_hidden: 64,
            gcn_layers: 4,
            gcn_hidden: 32,
            gcn_weighted: true,
            train_lr: 1e-3,
            train_weight_decay: 5.8e-3,
            train_iterations: 400,
            train_patience: 10,
            train_batch_size: 64,
            train_val_fraction: 0.2,
            loocv_classifiers: vec![
                ClassifierKind::Rf,
                ClassifierKind::Gcn,
                ClassifierKind::Gat,
            ],
            loocv_aggregate: Aggregate::Mean,
            loocv_jobs: 0,
            rf_trees: 500,
            rf_max_depth: 0,
            explain_top_k: 10,
            explain_correct_only: false,
            synth_subjects: 12,
            synth_effect: 0.8,
            synth_duration_s: 40.0,
        }
    }
}

fn parse_as<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::InvalidValue {
        key: key.to_string(),
        value: value.to_string(),
        reason: format!("expected {}", std::any::type_name::<T>()),
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(ConfigError::InvalidValue {
            key: key.to_string(),
            value: value.to_string(),
            reason: "expected true or false".to_string(),
        }),
    }
}

fn domain_err(key: &str, value: &str, domain: &str) -> ConfigError {
    ConfigError::InvalidValue {
        key: key.to_string(),
        value: value.to_string(),
        reason: format!("allowed: {domain}"),
    }
}

impl PipelineConfig {
    /// Set one key. Domains follow the documented grid.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match key {
            "seed" => self.seed = parse_as(key, value)?,
            "out.dir" => self.out_dir = PathBuf::from(value),
            "dataset.manifest" => {
                self.dataset_manifest =
                    if value.is_empty() { None } else { Some(PathBuf::from(value)) }
            }
            "data.fs" => self.fs = parse_as(key, value)?,
            "filter.low_hz" => self.filter_low_hz = parse_as(key, value)?,
            "filter.high_hz" => self.filter_high_hz = parse_as(key, value)?,
            "ica.enabled" => self.ica_enabled = parse_bool(key, value)?,
            "ica.components" => self.ica_components = parse_as(key, value)?,
            "ica.reject" => self.ica_reject = parse_bool(key, value)?,
            "window.len_s" => self.window_len_s = parse_as(key, value)?,
            "window.overlap_s" => self.window_overlap_s = parse_as(key, value)?,
            "features.normalize" => self.features_normalize = parse_bool(key, value)?,
            "features.window_fn" => {
                self.features_window_fn = match value {
                    "hann" => WindowFn::Hann,
                    "rect" => WindowFn::Rect,
                    _ => return Err(domain_err(key, value, "hann, rect")),
                }
            }
            "plv.band" => {
                self.plv_band = PlvBand::parse(value).ok_or_else(|| {
                    domain_err(key, value, "broadband, delta, theta, alpha, beta")
                })?
            }
            "model.arch" => {
                self.model_arch = match value {
                    "gat" => Arch::Gat,
                    "gcn" => Arch::Gcn,
                    _ => return Err(domain_err(key, value, "gat, gcn")),
                }
            }
            "model.layers" => {
                let n: usize = parse_as(key, value)?;
                if !(1..=3).contains(&n) {
                    return Err(domain_err(key, value, "1, 2, 3"));
                }
                self.model_layers = n;
            }
            "model.hidden" => {
                let n: usize = parse_as(key, value)?;
                if ![8, 16, 32, 64].contains(&n) {
                    return Err(domain_err(key, value, "8, 16, 32, 64"));
                }
                self.model_hidden = n;
            }
            "model.heads" => {
                let n: usize = parse_as(key, value)?;
                if ![2, 4, 6, 8].contains(&n) {
                    return Err(domain_err(key, value, "2, 4, 6, 8"));
                }
                self.model_heads = n;
            }
            "model.dropout" => {
                let p: f64 = parse_as(key, value)?;
                if ![0.0, 0.2, 0.5].contains(&p) {
                    return Err(domain_err(key, value, "0, 0.2, 0.5"));
                }
                self.model_dropout = p;
            }
            "model.mlp_hidden" => {
                let n: usize = parse_as(key, value)?;
                if n == 0 {
                    return Err(domain_err(key, value, "a positive width"));
                }
                self.model_mlp_hidden = n;
            }
            "gcn.layers" => {
                let n: usize = parse_as(key, value)?;
                if !(1..=6).contains(&n) {
                    return Err(domain_err(key, value, "1..=6"));
                }
                self.gcn_layers = n;
            }
            "gcn.hidden" => {
                let n: usize = parse_as(key, value)?;
                if ![8, 16, 32, 64].contains(&n) {
                    return Err(domain_err(key, value, "8, 16, 32, 64"));
                }
                self.gcn_hidden = n;
            }
            "gcn.weighted" => self.gcn_weighted = parse_bool(key, value)?,
            "train.lr" => {
                let lr: f64 = parse_as(key, value)?;
                if lr < 0.0 {
                    return Err(domain_err(key, value, "a nonnegative rate"));
                }
                self.train_lr = lr;
            }
            "train.weight_decay" => {
                let wd: f64 = parse_as(key, value)?;
                if wd < 0.0 {
                    return Err(domain_err(key, value, "a nonnegative decay"));
                }
                self.train_weight_decay = wd;
            }
            "train.iterations" => self.train_iterations = parse_as(key, value)?,
            "train.patience" => self.train_patience = parse_as(key, value)?,
            "train.batch_size" => {
                let n: usize = parse_as(key, value)?;
                if n == 0 {
                    return Err(domain_err(key, value, "a positive batch size"));
                }
                self.train_batch_size = n;
            }
            "train.val_fraction" => {
                let f: f64 = parse_as(key, value)?;
                if !(f > 0.0 && f <= 0.5) {
                    return Err(domain_err(key, value, "(0, 0.5]"));
                }
                self.train_val_fraction = f;
            }
            "loocv.classifiers" => {
                let mut kinds = Vec::new();
                for part in value.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                    let kind = ClassifierKind::parse(part)
                        .ok_or_else(|| domain_err(key, value, "rf, gcn, gat"))?;
                    if !kinds.contains(&kind) {
                        kinds.push(kind);
                    }
                }
                if kinds.is_empty() {
                    return Err(domain_err(key, value, "at least one of rf, gcn, gat"));
                }
                self.loocv_classifiers = kinds;
            }
            "loocv.aggregate" => {
                self.loocv_aggregate = Aggregate::parse(value)
                    .ok_or_else(|| domain_err(key, value, "mean, majority"))?
            }
            "loocv.jobs" => self.loocv_jobs = parse_as(key, value)?,
            "rf.trees" => {
                let n: usize = parse_as(key, value)?;
                if n == 0 {
                    return Err(domain_err(key, value, "a positive tree count"));
                }
                self.rf_trees = n;
            }
            "rf.max_depth" => self.rf_max_depth = parse_as(key, value)?,
            "explain.top_k" => self.explain_top_k = parse_as(key, value)?,
            "explain.correct_only" => self.explain_correct_only = parse_bool(key, value)?,
            "synth.subjects" => self.synth_subjects = parse_as(key, value)?,
            "synth.effect" => {
                let e: f64 = parse_as(key, value)?;
                if !(0.0..=1.0).contains(&e) {
                    return Err(domain_err(key, value, "[0, 1]"));
                }
                self.synth_effect = e;
            }
            "synth.duration_s" => self.synth_duration_s = parse_as(key, value)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Parse `key = value` lines (`#` comments allowed) over the defaults.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(ConfigError::Malformed(idx + 1))?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path)?;
        self.apply_text(&text)
    }

    /// Apply `EEGAT_*` environment overrides (`.` spelled `__`).
    pub fn apply_env(&mut self) -> Result<(), ConfigError> {
        let mut pairs: Vec<(String, String)> = std::env::vars()
            .filter_map(|(name, value)| {
                let rest = name.strip_prefix("EEGAT_")?;
                Some((rest.to_lowercase().replace("__", "."), value))
            })
            .collect();
        pairs.sort();
        for (key, value) in pairs {
            self.set(&key, &value)?;
        }
        Ok(())
    }

    /// Canonical flat rendering, used as the config echo in manifests and
    /// checkpoints.
    pub fn render(&self) -> String {
        let mut map = BTreeMap::new();
        map.insert("seed", self.seed.to_string());
        map.insert("out.dir", self.out_dir.display().to_string());
        map.insert(
            "dataset.manifest",
            self.dataset_manifest
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
        );
        map.insert("data.fs", self.fs.to_string());
        map.insert("filter.low_hz", self.filter_low_hz.to_string());
        map.insert("filter.high_hz", self.filter_high_hz.to_string());
        map.insert("ica.enabled", self.ica_enabled.to_string());
        map.insert("ica.components", self.ica_components.to_string());
        map.insert("ica.reject", self.ica_reject.to_string());
        map.insert("window.len_s", self.window_len_s.to_string());
        map.insert("window.overlap_s", self.window_overlap_s.to_string());
        map.insert("features.normalize", self.features_normalize.to_string());
        map.insert(
            "features.window_fn",
            match self.features_window_fn {
                WindowFn::Hann => "hann",
                WindowFn::Rect => "rect",
            }
            .to_string(),
        );
        map.insert(
            "plv.band",
            match self.plv_band {
                PlvBand::Broadband => "broadband",
                PlvBand::Delta => "delta",
                PlvBand::Theta => "theta",
                PlvBand::Alpha => "alpha",
                PlvBand::Beta => "beta",
            }
            .to_string(),
        );
        map.insert(
            "model.arch",
            match self.model_arch {
                Arch::Gat => "gat",
                Arch::Gcn => "gcn",
            }
            .to_string(),
        );
        map.insert("model.layers", self.model_layers.to_string());
        map.insert("model.hidden", self.model_hidden.to_string());
        map.insert("model.heads", self.model_heads.to_string());
        map.insert("model.dropout", self.model_dropout.to_string());
        map.insert("model.mlp_hidden", self.model_mlp_hidden.to_string());
        map.insert("gcn.layers", self.gcn_layers.to_string());
        map.insert("gcn.hidden", self.gcn_hidden.to_string());
        map.insert("gcn.weighted", self.gcn_weighted.to_string());
        map.insert("train.lr", self.train_lr.to_string());
        map.insert("train.weight_decay", self.train_weight_decay.to_string());
        map.insert("train.iterations", self.train_iterations.to_string());
        map.insert("train.patience", self.train_patience.to_string());
        map.insert("train.batch_size", self.train_batch_size.to_string());
        map.insert("train.val_fraction", self.train_val_fraction.to_string());
        map.insert(
            "loocv.classifiers",
            self.loocv_classifiers.iter().map(|k| k.name()).collect::<Vec<_>>().join(","),
        );
        map.insert(
            "loocv.aggregate",
            match self.loocv_aggregate {
                Aggregate::Mean => "mean",
                Aggregate::Majority => "majority",
            }
            .to_string(),
        );
        map.insert("loocv.jobs", self.loocv_jobs.to_string());
        map.insert("rf.trees", self.rf_trees.to_string());
        map.insert("rf.max_depth", self.rf_max_depth.to_string());
        map.insert("explain.top_k", self.explain_top_k.to_string());
        map.insert("explain.correct_only", self.explain_correct_only.to_string());
        map.insert("synth.subjects", self.synth_subjects.to_string());
        map.insert("synth.effect", self.synth_effect.to_string());
        map.insert("synth.duration_s", self.synth_duration_s.to_string());
        map.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn gat_config(&self) -> GatConfig {
        GatConfig {
            layers: self.model_layers,
            hidden: self.model_hidden,
            heads: self.model_heads,
            dropout: self.model_dropout,
            mlp_hidden: self.model_mlp_hidden,
            ..GatConfig::default()
        }
    }

    pub fn gcn_config(&self) -> GcnConfig {
        GcnConfig {
            layers: self.gcn_layers,
            hidden: self.gcn_hidden,
            weighted: self.gcn_weighted,
            mlp_hidden: self.model_mlp_hidden,
            ..GcnConfig::default()
        }
    }

    pub fn rf_config(&self) -> RfConfig {
        RfConfig {
            n_trees: self.rf_trees,
            max_depth: (self.rf_max_depth > 0).then_some(self.rf_max_depth),
            min_samples_leaf: 1,
            seed: self.seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.train_lr,
            weight_decay: self.train_weight_decay,
            iterations: self.train_iterations,
            early_stop_patience: self.train_patience,
            batch_size: self.train_batch_size,
            seed: self.seed,
            val_fraction: self.train_val_fraction,
        }
    }

    pub fn loocv_options(&self) -> LoocvOptions {
        LoocvOptions {
            classifiers: self.loocv_classifiers.clone(),
            gat: self.gat_config(),
            gcn: self.gcn_config(),
            rf: self.rf_config(),
            train: self.train_config(),
            normalize: self.features_normalize,
            aggregate: self.loocv_aggregate,
            jobs: self.loocv_jobs,
        }
    }
}
