mod commands;
mod config;
mod error;
mod render;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use crowdped_core::pipeline::{DiagnosticMode, Variant};
use crowdped_core::postprocess::NmsMode;

use crate::commands::{EvalOptions, VisualizeOptions};
use crate::config::ExperimentConfig;
use crate::error::{CliResult, EXIT_USAGE};

#[derive(Debug, Parser)]
#[command(name = "crowdped", version, about = "Occlusion-aware pedestrian detection on synthetic crowds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic dataset: PNG images, odgt annotations and a manifest.
    GenData {
        /// JSON scene spec; built-in defaults when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a detector and write a checkpoint, a CSV log and the resolved config.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset and write metrics JSON.
    Eval(EvalArgs),
    /// Draw detections, suppressed boxes and part scores over images.
    Visualize(VisualizeArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    train_data: Option<PathBuf>,
    #[arg(long)]
    test_data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_parser = parse_variant)]
    variant: Option<Variant>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Experiment config supplying inference settings and sweep thresholds; the
    /// checkpoint must match its architecture.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_nms_mode)]
    nms_mode: Option<NmsMode>,
    #[arg(long)]
    nms_threshold: Option<f64>,
    /// Evaluate at every configured matching threshold.
    #[arg(long)]
    sweep: bool,
    /// Replace a component with ground truth (p-vdn, p-vdn+nms, p-fen); repeatable.
    #[arg(long = "diagnostic", value_parser = parse_diagnostic)]
    diagnostics: Vec<DiagnosticMode>,
    /// Write PR and FPPI/miss-rate curves as PNG.
    #[arg(long)]
    plots: bool,
}

#[derive(Debug, Args)]
struct VisualizeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// PNG files or directories of them (a dataset root works too).
    #[arg(long, num_args = 1.., required = true)]
    images: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.3)]
    min_score: f64,
    /// Integer upscaling of the overlays.
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u32).range(1..=16))]
    scale: u32,
    #[arg(long, value_parser = parse_nms_mode)]
    nms_mode: Option<NmsMode>,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: crowdped_core::Error| e.to_string())
}

fn parse_diagnostic(s: &str) -> Result<DiagnosticMode, String> {
    s.parse().map_err(|e: crowdped_core::Error| e.to_string())
}

fn parse_nms_mode(s: &str) -> Result<NmsMode, String> {
    match s.to_ascii_lowercase().as_str() {
        "visible" => Ok(NmsMode::Visible),
        "full" => Ok(NmsMode::Full),
        other => Err(format!("unknown NMS mode `{other}` (expected visible or full)")),
    }
}

/// Defaults, then the config file, then flags.
fn resolve_train(args: TrainArgs) -> CliResult<ExperimentConfig> {
    let mut c = ExperimentConfig::load(args.config.as_deref())?;
    if let Some(p) = args.train_data {
        c.train_data = Some(p);
    }
    if let Some(p) = args.test_data {
        c.test_data = Some(p);
    }
    if let Some(p) = args.out {
        c.output_dir = p;
    }
    let t = &mut c.train;
    t.variant = args.variant.unwrap_or(t.variant);
    t.epochs = args.epochs.unwrap_or(t.epochs);
    t.seed = args.seed.unwrap_or(t.seed);
    t.lr = args.lr.unwrap_or(t.lr);
    t.alpha = args.alpha.unwrap_or(t.alpha);
    t.beta = args.beta.unwrap_or(t.beta);
    Ok(c)
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenData { spec, count, seed, out } => commands::gen_data(spec.as_deref(), count, seed, &out),
        Command::Train(args) => commands::train(&resolve_train(args)?),
        Command::Eval(args) => {
            let cfg = args.config.as_deref().map(|p| ExperimentConfig::load(Some(p))).transpose()?;
            let base = cfg.clone().unwrap_or_default();
            let mut infer = base.train.infer;
            infer.nms_mode = args.nms_mode.or(infer.nms_mode);
            infer.nms_threshold = args.nms_threshold.unwrap_or(infer.nms_threshold);
            let opts = EvalOptions {
                checkpoint: args.checkpoint,
                data: args.data,
                out: args.out,
                config: args.config,
                infer,
                iou_thresholds: base.iou_thresholds,
                sweep: args.sweep,
                diagnostics: args.diagnostics,
                plots: args.plots,
            };
            commands::eval(&opts, cfg.as_ref())
        }
        Command::Visualize(args) => {
            let mut infer = crowdped_core::pipeline::InferConfig::default();
            infer.nms_mode = args.nms_mode;
            let opts = VisualizeOptions {
                checkpoint: args.checkpoint,
                images: args.images,
                out: args.out,
                min_score: args.min_score,
                scale: args.scale,
                infer,
            };
            commands::visualize(&opts)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE as u8 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
