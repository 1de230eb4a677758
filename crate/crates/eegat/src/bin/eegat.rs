//! Thin command-line front end over the library pipeline.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data/validation error,
//! 4 model or training error, 1 anything else.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use eegat::pipeline::{
    self, exit_code, run_all, run_explain, run_featurize, run_loocv, run_preprocess, run_synth,
    run_train,
};
use eegat::PipelineConfig;

#[derive(Parser)]
#[command(
    name = "eegat",
    about = "EEG epilepsy-vs-control classification over PLV graphs",
    long_about = None,
    version
)]
struct Cli {
    /// Flat key=value config file (precedence: flags > env > file > defaults).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one config key, e.g. --set train.iterations=50 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Output directory (shorthand for --set out.dir=...).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Root seed (shorthand for --set seed=...).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Fold-level worker threads (shorthand for --set loocv.jobs=...).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the labeled synthetic dataset.
    Synth,
    /// Filter, clean, and window the recordings.
    Preprocess,
    /// Compute node features and PLV graphs per window.
    Featurize,
    /// Train one model (model.arch) on a single split and save a checkpoint.
    Train,
    /// Leave-one-subject-out evaluation of the configured classifiers.
    Loocv {
        /// Comma-separated subset, e.g. --classifiers gat
        #[arg(long)]
        classifiers: Option<String>,
    },
    /// Export attention edge importance and Grad-CAM node importance.
    Explain {
        /// Number of strongest edges drawn in the SVG.
        #[arg(long = "top-k")]
        top_k: Option<usize>,
    },
    /// Everything: synth (if needed), preprocess, featurize, loocv, explain.
    All,
}

fn build_config(cli: &Cli) -> Result<PipelineConfig, pipeline::PipelineError> {
    let mut cfg = PipelineConfig::default();
    if let Some(path) = &cli.config {
        cfg.apply_file(path)?;
    }
    cfg.apply_env()?;
    for pair in &cli.overrides {
        let (key, value) = pair.split_once('=').ok_or_else(|| {
            eegat::config::ConfigError::InvalidValue {
                key: pair.clone(),
                value: String::new(),
                reason: "expected KEY=VALUE".to_string(),
            }
        })?;
        cfg.set(key.trim(), value.trim())?;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(jobs) = cli.jobs {
        cfg.loocv_jobs = jobs;
    }
    match &cli.command {
        Command::Loocv { classifiers: Some(list) } => cfg.set("loocv.classifiers", list)?,
        Command::Explain { top_k: Some(k) } => cfg.set("explain.top_k", &k.to_string())?,
        _ => {}
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), pipeline::PipelineError> {
    let cfg = build_config(cli)?;
    match &cli.command {
        Command::Synth => {
            let path = run_synth(&cfg)?;
            println!("synthetic dataset written; manifest: {}", path.display());
        }
        Command::Preprocess => {
            let dir = run_preprocess(&cfg)?;
            println!("windows written under {}", dir.display());
        }
        Command::Featurize => {
            let dir = run_featurize(&cfg)?;
            println!("graphs written under {}", dir.display());
        }
        Command::Train => {
            let path = run_train(&cfg)?;
            println!("checkpoint written to {}", path.display());
        }
        Command::Loocv { .. } => {
            let result = run_loocv(&cfg)?;
            for (kind, report) in &result.subject_metrics {
                println!(
                    "{:>4}  subject AUROC {:.3}  accuracy {:.3}  macro F1 {:.3}",
                    kind.name(),
                    report.auroc,
                    report.accuracy,
                    report.macro_f1
                );
            }
            for pair in &result.delong {
                println!(
                    "delong {} vs {}: z = {:.3}, p = {:.4}",
                    pair.a.name(),
                    pair.b.name(),
                    pair.result.z,
                    pair.result.p_two_sided
                );
            }
            println!("reports written under {}", cfg.out_dir.display());
        }
        Command::Explain { .. } => {
            let (edges, _) = run_explain(&cfg)?;
            println!("strongest connections:");
            for (i, j, w) in edges.ranked_edges().into_iter().take(cfg.explain_top_k) {
                println!("  {} - {}  {:.4}", edges.channels[i], edges.channels[j], w);
            }
            println!("connectome exports written under {}", cfg.out_dir.display());
        }
        Command::All => {
            let result = run_all(&cfg)?;
            for (kind, report) in &result.subject_metrics {
                println!("{:>4}  subject AUROC {:.3}", kind.name(), report.auroc);
            }
            println!("all artifacts written under {}", cfg.out_dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err) as u8)
        }
    }
}
