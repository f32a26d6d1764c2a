mod commands;
mod data;
mod error;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Deep statistical shape model segmentation: synthetic data, shape model
/// building, regressor training, fitting, prediction and evaluation.
#[derive(Debug, Parser)]
#[command(name = "deepssm", version)]
pub struct Cli {
    /// Worker threads; results do not depend on this value.
    #[arg(long, global = true, env = "DEEPSSM_THREADS")]
    pub threads: Option<usize>,

    /// `key = value` file supplying defaults for this subcommand's flags.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset directory.
    Synth(SynthArgs),
    /// Build a shape model (.ssm) from a dataset directory.
    BuildModel(BuildModelArgs),
    /// Train the image-to-parameter regressor (.reg).
    Train(TrainArgs),
    /// Fit the shape model to every mask in a directory.
    Fit(FitArgs),
    /// Predict point clouds and masks for every image in a directory.
    Predict(PredictArgs),
    /// Compare predicted masks against ground truth.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Number of samples.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    /// Points per cloud.
    #[arg(long)]
    pub t: Option<usize>,
    /// Pixel spacing in mm.
    #[arg(long)]
    pub spacing: Option<f64>,
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    /// Draw shapes from this model instead of the parametric generator.
    #[arg(long)]
    pub from_model: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BuildModelArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub t: Option<usize>,
    #[arg(long)]
    pub beta_dim: Option<usize>,
    /// Samples whose resampled cloud renders below this Dice are excluded.
    #[arg(long)]
    pub min_dice: Option<f64>,
    /// Output model file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    /// Output regressor file.
    #[arg(long)]
    pub out: PathBuf,
    /// Training report; defaults to `<out>.report.tsv`.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Hidden layer sizes, comma separated.
    #[arg(long)]
    pub hidden: Option<String>,
    #[arg(long)]
    pub downsample: Option<usize>,
    #[arg(long)]
    pub val_fraction: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub stage2_epochs: Option<usize>,
    /// Skip the mask-loss fine-tuning stage.
    #[arg(long)]
    pub stage1_only: bool,
    /// Disable augmentation.
    #[arg(long)]
    pub no_augment: bool,
    #[arg(long)]
    pub min_dice: Option<f64>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Directory of `<id>.mask.pgm` targets.
    #[arg(long)]
    pub masks: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub spacing: Option<f64>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub reg: PathBuf,
    /// Directory of `<id>.pgm` images.
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Mask-fitting iterations after the regressor, against an Otsu
    /// foreground estimate of the image.
    #[arg(long)]
    pub refine_iters: Option<usize>,
    #[arg(long)]
    pub spacing: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    /// Pixel spacing in mm; defaults to the ground-truth manifest, else 1.
    #[arg(long)]
    pub spacing: Option<f64>,
    /// Report file; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Directory for plot-ready TSV curves.
    #[arg(long)]
    pub plot_data: Option<PathBuf>,
    /// Training report whose loss curves are exported with `--plot-data`.
    #[arg(long)]
    pub train_report: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { error::EXIT_USAGE as u8 } else { 0 });
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: invalid --threads: must be positive");
            return ExitCode::from(error::EXIT_USAGE as u8);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure threads: {e}");
            return ExitCode::from(error::EXIT_USAGE as u8);
        }
    }
    let config = cli.config.as_deref();
    let result = match &cli.command {
        Command::Synth(a) => commands::synth(a, config),
        Command::BuildModel(a) => commands::build_model(a, config),
        Command::Train(a) => commands::train(a, config),
        Command::Fit(a) => commands::fit(a, config),
        Command::Predict(a) => commands::predict(a, config),
        Command::Eval(a) => commands::eval(a, config),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
