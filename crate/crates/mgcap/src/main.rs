use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use mgcap::cli::{self, RunConfig};
use mgcap::error::Result;
use mgcap::gradcheck::Scope;

/// Multi-granularity canonical appearance pooling: train, evaluate and
/// inspect rotation-invariant second-order classifiers, generate the
/// synthetic texture dataset, and verify every gradient against finite
/// differences.
#[derive(Parser)]
#[command(name = "mgcap", version)]
struct CliArgs {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Two-stage training (head warm-up, then full fine-tuning).
    Train(TrainArgs),
    /// Forward-only evaluation of a checkpoint; writes a confusion matrix.
    Eval(EvalArgs),
    /// Finite-difference verification of the backward passes.
    Gradcheck(GradcheckArgs),
    /// Generate the synthetic rotated-texture dataset.
    Synth(SynthArgs),
    /// Single-image forward pass with the canonical-appearance report.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Config file with `key = value` lines; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for checkpoints, metrics and the resolved config.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    data_dir: Option<String>,
    #[arg(long)]
    transforms: Option<usize>,
    /// Comma-separated central-crop fractions, e.g. "1.0,0.75,0.5".
    #[arg(long)]
    granularity_ratios: Option<String>,
    /// log_e | sqrt_e | identity
    #[arg(long)]
    norm_mode: Option<String>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    eps_lo: Option<f64>,
    #[arg(long)]
    eps_hi: Option<f64>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs_stage1: Option<usize>,
    #[arg(long)]
    epochs_stage2: Option<usize>,
    #[arg(long)]
    lr_stage1: Option<f64>,
    #[arg(long)]
    lr_stage2: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    crop: Option<f64>,
    #[arg(long)]
    use_gaussian: Option<bool>,
    /// mean | sum
    #[arg(long)]
    mean_convention: Option<String>,
}

impl TrainArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        let mut set = |key: &str, v: Option<String>| -> Result<()> {
            if let Some(v) = v {
                cfg.apply_line(key, &v)?;
            }
            Ok(())
        };
        set("data_dir", self.data_dir.clone())?;
        set("transforms", self.transforms.map(|v| v.to_string()))?;
        set("granularity_ratios", self.granularity_ratios.clone())?;
        set("norm_mode", self.norm_mode.clone())?;
        set("lambda", self.lambda.map(|v| v.to_string()))?;
        set("eps_lo", self.eps_lo.map(|v| v.to_string()))?;
        set("eps_hi", self.eps_hi.map(|v| v.to_string()))?;
        set("channels", self.channels.map(|v| v.to_string()))?;
        set("batch_size", self.batch_size.map(|v| v.to_string()))?;
        set("epochs_stage1", self.epochs_stage1.map(|v| v.to_string()))?;
        set("epochs_stage2", self.epochs_stage2.map(|v| v.to_string()))?;
        set("lr_stage1", self.lr_stage1.map(|v| v.to_string()))?;
        set("lr_stage2", self.lr_stage2.map(|v| v.to_string()))?;
        set("momentum", self.momentum.map(|v| v.to_string()))?;
        set("weight_decay", self.weight_decay.map(|v| v.to_string()))?;
        set("seed", self.seed.map(|v| v.to_string()))?;
        set("crop", self.crop.map(|v| v.to_string()))?;
        set("use_gaussian", self.use_gaussian.map(|v| v.to_string()))?;
        set("mean_convention", self.mean_convention.clone())?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Defaults to config.txt next to the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
    /// Confusion matrix CSV destination (default: confusion.csv next to the
    /// checkpoint).
    #[arg(long)]
    confusion_out: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum ScopeArg {
    Covariance,
    Gaussian,
    Ridge,
    Maxout,
    SpectralLog,
    SpectralSqrt,
    Backbone,
    Full,
    All,
}

impl ScopeArg {
    fn scopes(self) -> Vec<Scope> {
        match self {
            ScopeArg::Covariance => vec![Scope::Covariance],
            ScopeArg::Gaussian => vec![Scope::Gaussian],
            ScopeArg::Ridge => vec![Scope::Ridge],
            ScopeArg::Maxout => vec![Scope::Maxout],
            ScopeArg::SpectralLog => vec![Scope::SpectralLog],
            ScopeArg::SpectralSqrt => vec![Scope::SpectralSqrt],
            ScopeArg::Backbone => vec![Scope::Backbone],
            ScopeArg::Full => vec![Scope::Full],
            ScopeArg::All => Scope::ALL.to_vec(),
        }
    }
}

#[derive(Args)]
struct GradcheckArgs {
    /// Which backward pass to verify.
    #[arg(value_enum)]
    scope: ScopeArg,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Degenerate-spectrum suite (λI and rank-1 inputs) for spectral scopes.
    #[arg(long)]
    degenerate: bool,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    classes: usize,
    #[arg(long, default_value_t = 200)]
    samples_per_class: usize,
    #[arg(long, default_value_t = 64)]
    image_size: usize,
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.1)]
    train_ratio: f64,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

fn run(cmd: Cmd) -> Result<bool> {
    match cmd {
        Cmd::Train(args) => {
            let cfg = args.resolve()?;
            let outcome = cli::cmd_train(&cfg, &args.out)?;
            println!(
                "done: {} epochs, final train top1 {:.4}, test top1 {:.4}",
                outcome.total_epochs, outcome.final_train.top1, outcome.final_test.top1
            );
            println!("metrics: {}", outcome.metrics_path.display());
            println!("checkpoint: {}", outcome.checkpoint_path.display());
            Ok(true)
        }
        Cmd::Eval(args) => {
            let confusion = args
                .confusion_out
                .clone()
                .or_else(|| args.checkpoint.parent().map(|d| d.join("confusion.csv")));
            let stats = cli::cmd_eval(
                &args.checkpoint,
                args.config.as_deref(),
                &args.split,
                confusion.as_deref(),
            )?;
            println!(
                "split {}: loss {:.6} top1 {:.4}",
                args.split, stats.loss, stats.top1
            );
            for (i, row) in stats.confusion.iter().enumerate() {
                let total: usize = row.iter().sum();
                if total > 0 {
                    println!(
                        "class {i}: {}/{} = {:.4}",
                        row[i],
                        total,
                        row[i] as f64 / total as f64
                    );
                }
            }
            if let Some(p) = confusion {
                println!("confusion: {}", p.display());
            }
            Ok(true)
        }
        Cmd::Gradcheck(args) => cli::cmd_gradcheck(
            &args.scope.scopes(),
            args.trials,
            args.seed,
            args.degenerate,
        ),
        Cmd::Synth(args) => {
            let manifest = cli::cmd_synth(
                &args.out,
                args.classes,
                args.samples_per_class,
                args.image_size,
                args.noise,
                args.seed,
                args.train_ratio,
            )?;
            println!(
                "generated {} classes x {} samples at {}px: {}",
                args.classes,
                args.samples_per_class,
                args.image_size,
                manifest.display()
            );
            Ok(true)
        }
        Cmd::Inspect(args) => {
            let out = cli::cmd_inspect(&args.checkpoint, &args.image, args.config.as_deref())?;
            println!("probabilities:");
            for (name, p) in out.class_names.iter().zip(&out.probs) {
                println!("  {name}: {p:.6}");
            }
            for (s, (idx, angle)) in out.canonical.iter().enumerate() {
                println!("granularity {s}: canonical rotation {angle}° (branch {idx})");
            }
            let fmt = |v: &[f64]| {
                v.iter()
                    .map(|x| format!("{x:.4e}"))
                    .collect::<Vec<_>>()
                    .join(" ")
            };
            println!("spectrum before: {}", fmt(&out.spectrum_before));
            println!("spectrum after:  {}", fmt(&out.spectrum_after));
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = CliArgs::parse();
    match run(cli.cmd) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
