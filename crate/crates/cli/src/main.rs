//! `ordmil`: staged pipeline driver. Each subcommand reads the same TOML run
//! configuration, writes into a fixed run-directory layout, and exits 0 only
//! when every declared output was written and validated.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use ordmil_core::pipeline::{
    cmd_eval, cmd_gen, cmd_qc_filter, cmd_qc_train, cmd_train, cmd_tune, RunConfig, RunDir,
    TrainMode,
};
use ordmil_core::Result;

#[derive(Parser)]
#[command(
    name = "ordmil",
    version,
    about = "Weakly supervised ordinal MIL: generate, train, tune, evaluate, QC",
    after_help = "Environment:\n  ORDMIL_THREADS  cap the worker thread count (default: all cores)"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration file (TOML).
    #[arg(long, value_name = "PATH")]
    config: PathBuf,

    /// Run directory; defaults to out_dir from the configuration.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Reseed every stage from this base value (recorded in output echoes).
    #[arg(long, value_name = "INT")]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset and the subject-grouped fold split.
    Gen {
        #[command(flatten)]
        common: Common,
    },
    /// Train per-fold models for one mode.
    Train {
        #[command(flatten)]
        common: Common,

        /// binary0 | binary1 | binary2 | ensemble | regression
        #[arg(long, value_name = "MODE")]
        mode: String,

        /// Train a single fold instead of all folds.
        #[arg(long, value_name = "INT")]
        fold: Option<usize>,
    },
    /// Grid-search aggregation thresholds on out-of-fold predictions.
    Tune {
        #[command(flatten)]
        common: Common,

        /// Override both configured grid steps.
        #[arg(long, value_name = "FLOAT")]
        grid_step: Option<f64>,
    },
    /// Evaluate all methods; writes the video report, the frame report when
    /// planted labels exist, and the per-frame score dump.
    Eval {
        #[command(flatten)]
        common: Common,
    },
    /// Artifact-frame QC: train the linear SVM or filter the dataset with it.
    Qc {
        #[arg(value_enum)]
        action: QcAction,

        #[command(flatten)]
        common: Common,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum QcAction {
    Train,
    Filter,
}

fn main() -> ExitCode {
    init_threads();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

/// ORDMIL_THREADS caps the rayon pool; unset or unparsable values fall back
/// to the default (all cores).
fn init_threads() {
    if let Ok(text) = std::env::var("ORDMIL_THREADS") {
        if let Ok(n) = text.trim().parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}

fn load_config(common: &Common) -> Result<(RunConfig, PathBuf)> {
    let mut config = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        config.override_seed(seed);
    }
    let out = common.out.clone().unwrap_or_else(|| config.out_dir.clone());
    Ok((config, out))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { common } => {
            let (config, out) = load_config(&common)?;
            let summary = cmd_gen(&config, &out)?;
            println!(
                "generated {} videos ({} subjects, {} frames, dim {})",
                summary.n_videos, summary.n_subjects, summary.total_frames, summary.dim
            );
            let h = summary.class_histogram;
            println!("class histogram: 0:{} 1:{} 2:{} 3:{}", h[0], h[1], h[2], h[3]);
            println!("wrote {}", RunDir::new(&out).dataset_file().display());
        }
        Command::Train { common, mode, fold } => {
            let (config, out) = load_config(&common)?;
            let mode = TrainMode::parse(&mode)?;
            let summary = cmd_train(&config, &out, mode, fold)?;
            println!("trained mode {} on folds {:?}", summary.mode, summary.folds);
            for path in &summary.model_files {
                println!("wrote {}", path.display());
            }
        }
        Command::Tune { common, grid_step } => {
            let (config, out) = load_config(&common)?;
            let tune = cmd_tune(&config, &out, grid_step)?;
            let b = tune.binary.thresholds.as_array();
            println!(
                "binary thresholds ({:.4}, {:.4}, {:.4})  kappa {:.4}  per fold {:?}",
                b[0], b[1], b[2], tune.binary.kappa_pooled, tune.binary.kappa_per_fold
            );
            let s = tune.sum.thresholds.as_array();
            println!(
                "sum thresholds    ({:.4}, {:.4}, {:.4})  kappa {:.4}  per fold {:?}",
                s[0], s[1], s[2], tune.sum.kappa_pooled, tune.sum.kappa_per_fold
            );
            let r = tune.regression.thresholds.as_array();
            println!(
                "regr thresholds   ({:.4}, {:.4}, {:.4})  kappa {:.4}  per fold {:?}",
                r[0], r[1], r[2], tune.regression.kappa_pooled, tune.regression.kappa_per_fold
            );
        }
        Command::Eval { common } => {
            let (config, out) = load_config(&common)?;
            let eval = cmd_eval(&config, &out)?;
            let run = RunDir::new(&out);
            println!("video-level (pooled out-of-fold):");
            for (key, value) in &eval.video_report.pooled {
                println!("  {key}: {value:.4}");
            }
            if let Some(frame) = &eval.frame_report {
                println!("frame-level (pooled, planted labels):");
                for (key, value) in &frame.pooled {
                    println!("  {key}: {value:.4}");
                }
            }
            println!("wrote {}", run.video_report_file().display());
            if eval.frame_report.is_some() {
                println!("wrote {}", run.frame_report_file().display());
            }
            println!("wrote {} ({} frames)", run.frame_scores_file().display(), eval.frames_dumped);
        }
        Command::Qc { action, common } => {
            let (config, out) = load_config(&common)?;
            match action {
                QcAction::Train => {
                    let report = cmd_qc_train(&config, &out)?;
                    println!(
                        "svm trained on {} frames ({} artifact); held-out accuracy {:.4}",
                        report.train_frames, report.artifact_frames, report.holdout_accuracy
                    );
                    println!(
                        "objective {:.6} -> {:.6}",
                        report.initial_objective, report.final_objective
                    );
                    println!("wrote {}", RunDir::new(&out).svm_file().display());
                }
                QcAction::Filter => {
                    let report = cmd_qc_filter(&config, &out)?;
                    let s = &report.stats;
                    println!(
                        "removed {} of {} frames ({:.1}% mean per-bag decrease); dropped {} of {} bags",
                        s.frames_removed,
                        s.frames_before,
                        s.mean_frame_decrease_pct,
                        s.bags_dropped,
                        s.bags_before
                    );
                    println!("wrote {}", RunDir::new(&out).filtered_dataset_file().display());
                }
            }
        }
    }
    Ok(())
}
