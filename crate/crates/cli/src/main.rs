//! `ldn` — the command-line surface of the label-denoising pipeline:
//! generate synthetic data, split folds, train first-level models,
//! evaluate GAP, fit ensemble weights, distill a student on soft labels,
//! stack penultimate features, analyze errors, and run the gradient suite.
//!
//! Exit codes: 0 success, 2 input/usage errors, 3 file-format errors,
//! 1 internal numeric errors.

mod commands;
mod presets;

use clap::{Args, Parser, Subcommand};
use ldn_core::Error;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "ldn", version, about = "noisy-label denoising pipeline")]
struct Cli {
    /// Upper bound on worker threads for parallel sections (0 = default).
    /// Outputs are byte-identical regardless of this setting.
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct SynthArgs {
    /// Output dataset path (.ldns).
    #[arg(long)]
    out: PathBuf,
    /// Preset: desk | paperlike.
    #[arg(long, default_value = "desk")]
    preset: String,
    #[arg(long)]
    videos: Option<usize>,
    #[arg(long)]
    vocab: Option<u32>,
    #[arg(long)]
    dv: Option<usize>,
    #[arg(long)]
    da: Option<usize>,
    /// Probability that a true positive label is dropped.
    #[arg(long)]
    fn_rate: Option<f64>,
    /// Expected count of spurious labels added per video.
    #[arg(long)]
    fp_rate: Option<f64>,
    /// Generate frame sequences (preset default when omitted).
    #[arg(long)]
    frames: Option<bool>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct FoldsArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    folds: PathBuf,
    /// Canonical-text model config; preset default when omitted.
    #[arg(long)]
    model_config: Option<PathBuf>,
    /// Canonical-text training config; defaults when omitted.
    #[arg(long)]
    train_config: Option<PathBuf>,
    #[arg(long, default_value = "desk")]
    preset: String,
    /// Overrides the training config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory for run.json, fold_<i>.model, oof.pred, history.jsonl.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    /// A fold model (.model) or a final stacked container (.ldnc).
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 20)]
    n: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    /// Dataset supplying the ground truth labels.
    #[arg(long)]
    truth: PathBuf,
    #[arg(long, default_value_t = 20)]
    n: usize,
    /// Evaluate against clean labels instead of noisy ones.
    #[arg(long, default_value_t = false)]
    clean: bool,
}

#[derive(Args)]
struct EnsembleArgs {
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated training run directories.
    #[arg(long, value_delimiter = ',')]
    runs: Vec<PathBuf>,
    #[arg(long, default_value_t = 20)]
    n: usize,
    /// Output directory for ensemble.json and soft.pred.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DistillArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    folds: PathBuf,
    /// Soft-label file (full-vocabulary predictions format).
    #[arg(long)]
    soft: PathBuf,
    #[arg(long)]
    model_config: Option<PathBuf>,
    #[arg(long)]
    train_config: Option<PathBuf>,
    #[arg(long, default_value = "desk")]
    preset: String,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct StackArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    folds: PathBuf,
    #[arg(long)]
    soft: PathBuf,
    /// Comma-separated student run directories.
    #[arg(long, value_delimiter = ',')]
    students: Vec<PathBuf>,
    /// Head training config (canonical text).
    #[arg(long)]
    train_config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Fail budget_check when the serialized final model exceeds this.
    #[arg(long)]
    budget_bytes: Option<u64>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Label-group map (label_index<TAB>group_name lines).
    #[arg(long)]
    groups: Option<PathBuf>,
    /// Analyze against clean labels instead of noisy ones.
    #[arg(long, default_value_t = false)]
    clean: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic noisy-label dataset with clean ground truth.
    Synth(SynthArgs),
    /// Split a dataset into k cross-validation folds.
    Folds(FoldsArgs),
    /// Train one model configuration across all folds.
    Train(TrainArgs),
    /// Predict top-n labels with a saved model.
    Predict(PredictArgs),
    /// GAP@n of a prediction file against a dataset's labels.
    Eval(EvalArgs),
    /// Fit simplex ensemble weights over run OOF predictions.
    Ensemble(EnsembleArgs),
    /// Train a student on ensemble soft labels.
    Distill(DistillArgs),
    /// Stack frozen students' penultimate features under a fresh head.
    Stack(StackArgs),
    /// TP/FP/FN taxonomy and per-label reports for a prediction file.
    Analyze(AnalyzeArgs),
    /// Finite-difference gradient checks through every architecture.
    Gradcheck(GradcheckArgs),
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Input(_) | Error::Io(_) => 2,
        Error::Format(_) => 3,
        Error::Numeric(_) => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();

    #[cfg(feature = "parallel")]
    if cli.jobs > 0 {
        // Build errors only if a pool already exists; harmless then.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.jobs)
            .build_global();
    }

    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Folds(a) => commands::folds(a),
        Command::Train(a) => commands::train(a),
        Command::Predict(a) => commands::predict(a),
        Command::Eval(a) => commands::eval(a),
        Command::Ensemble(a) => commands::ensemble(a),
        Command::Distill(a) => commands::distill(a),
        Command::Stack(a) => commands::stack(a),
        Command::Analyze(a) => commands::analyze(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("ldn: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
