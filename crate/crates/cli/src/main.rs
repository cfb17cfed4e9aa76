use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use log::info;

use dsfa_core::pipeline::{
    load_scene, run_pipeline, sweep_r, sweep_strategy, write_sweep_csv, DetectParams, Method,
    PipelineConfig, ThresholdMethod, DEFAULT_DSFA_RUNS,
};
use dsfa_core::predetect::SampleStrategy;
use dsfa_core::raster::save_image;
use dsfa_core::synth::synth_generate;
use dsfa_core::{Activation, Criterion, TrainConfig};

#[derive(Parser)]
#[command(name = "dsfa", version, about = "Unsupervised change detection for bi-temporal multiband images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Detect changes between two co-registered dates.
    Detect(DetectArgs),
    /// Write a synthetic image pair with planted changes.
    Synth(SynthArgs),
    /// Evaluate DSFA for several regularization constants.
    SweepR(SweepRArgs),
    /// Evaluate DSFA for several training-sample selection strategies.
    SweepStrategy(SweepStrategyArgs),
}

#[derive(Args)]
struct InputArgs {
    /// First-date raster (`.json` header with a `.bin` payload beside it).
    #[arg(long)]
    t1: PathBuf,
    /// Second-date raster.
    #[arg(long)]
    t2: PathBuf,
    /// Single-band label raster: 0 unsampled, 1 unchanged, 2 changed.
    #[arg(long)]
    gt: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Hidden layer widths.
    #[arg(long, value_delimiter = ',', default_value = "128,128")]
    hidden: Vec<usize>,
    /// Output feature count; defaults to the band count.
    #[arg(long)]
    out_dim: Option<usize>,
    #[arg(long, default_value_t = TrainConfig::default().learning_rate)]
    lr: f64,
    #[arg(long, default_value_t = TrainConfig::default().max_epochs)]
    epochs: usize,
    /// Covariance regularization constant.
    #[arg(long, default_value_t = TrainConfig::default().reg_r)]
    r: f64,
    /// Training pixels; defaults to 2.5% of the scene (64 to 4000).
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long, default_value_t = Activation::Tanh)]
    activation: Activation,
    /// Where training pixels come from.
    #[arg(long, default_value_t = SampleStrategy::Cva)]
    strategy: SampleStrategy,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Independent trainings whose intensities are summed.
    #[arg(long)]
    runs: Option<usize>,
}

impl TrainArgs {
    fn params(&self, method: Method, threshold: ThresholdMethod, best_criterion: Criterion) -> DetectParams {
        let default_runs = if method == Method::Dsfa { DEFAULT_DSFA_RUNS } else { 1 };
        DetectParams {
            method,
            train: TrainConfig {
                hidden_sizes: self.hidden.clone(),
                out_dim: self.out_dim,
                learning_rate: self.lr,
                max_epochs: self.epochs,
                reg_r: self.r,
                seed: self.seed,
                activation: self.activation,
            },
            sample_count: self.samples,
            strategy: self.strategy,
            threshold,
            best_criterion,
            runs: self.runs.unwrap_or(default_runs),
            seed: self.seed,
        }
    }
}

#[derive(Args)]
struct DetectArgs {
    #[arg(long, default_value_t = Method::Dsfa)]
    method: Method,
    #[command(flatten)]
    input: InputArgs,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = ThresholdMethod::Otsu)]
    threshold: ThresholdMethod,
    /// Metric maximized by `--threshold best`.
    #[arg(long, default_value_t = Criterion::Oa)]
    best_criterion: Criterion,
    #[command(flatten)]
    train: TrainArgs,
    /// Skip writing loss_history.csv.
    #[arg(long)]
    no_loss_history: bool,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 64)]
    rows: usize,
    #[arg(long, default_value_t = 64)]
    cols: usize,
    #[arg(long, default_value_t = 6)]
    bands: usize,
    #[arg(long, default_value_t = 0.1)]
    change_frac: f64,
    #[arg(long, default_value_t = 0.05)]
    noise_std: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Receives t1, t2 and gt rasters.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepRArgs {
    #[command(flatten)]
    input: InputArgs,
    #[arg(long, value_delimiter = ',', default_value = "1e-8,1e-6,1e-4")]
    r_values: Vec<f64>,
    #[arg(long, default_value_t = ThresholdMethod::Otsu)]
    threshold: ThresholdMethod,
    #[command(flatten)]
    train: TrainArgs,
    /// CSV destination.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepStrategyArgs {
    #[command(flatten)]
    input: InputArgs,
    #[arg(long, value_delimiter = ',', default_value = "cva,ground_truth,random,negative")]
    strategies: Vec<SampleStrategy>,
    #[arg(long, default_value_t = ThresholdMethod::Otsu)]
    threshold: ThresholdMethod,
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long)]
    out: PathBuf,
}

fn detect(args: DetectArgs) -> anyhow::Result<()> {
    let config = PipelineConfig {
        t1: args.input.t1,
        t2: args.input.t2,
        ground_truth: args.input.gt,
        out_dir: args.out,
        params: args.train.params(args.method, args.threshold, args.best_criterion),
        write_loss_history: !args.no_loss_history,
    };
    let report = run_pipeline(&config)?;
    println!(
        "{}: threshold {:.6}, {} changed pixels",
        report.method, report.threshold, report.changed_pixels
    );
    if let Some(m) = &report.metrics {
        println!(
            "oa_chg {:.4}  oa_un {:.4}  oa {:.4}  kappa {:.4}  f1 {:.4}",
            m.oa_chg, m.oa_un, m.oa, m.kappa, m.f1
        );
    }
    println!("outputs in {}", config.out_dir.display());
    Ok(())
}

fn synth(args: SynthArgs) -> anyhow::Result<()> {
    let scene = synth_generate(args.rows, args.cols, args.bands, args.change_frac, args.noise_std, args.seed)?;
    save_image(&scene.t1, args.out.join("t1"))?;
    save_image(&scene.t2, args.out.join("t2"))?;
    save_image(&scene.truth.to_image(args.rows, args.cols)?, args.out.join("gt"))?;
    println!("wrote t1, t2 and gt to {}", args.out.display());
    Ok(())
}

fn sweep_params(train: &TrainArgs, threshold: ThresholdMethod) -> anyhow::Result<DetectParams> {
    let params = train.params(Method::Dsfa, threshold, Criterion::Oa);
    if threshold == ThresholdMethod::Best {
        bail!("sweeps compare unsupervised thresholds; use otsu or kmeans");
    }
    Ok(params)
}

fn run_sweep_r(args: SweepRArgs) -> anyhow::Result<()> {
    let params = sweep_params(&args.train, args.threshold)?;
    let scene = load_scene(&args.input.t1, &args.input.t2, args.input.gt.as_deref())?;
    let rows = sweep_r(&scene, &params, &args.r_values)?;
    for row in &rows {
        info!("r {}: oa {:.4} kappa {:.4}", row.label, row.metrics.oa, row.metrics.kappa);
    }
    write_sweep_csv(&args.out, "r", &rows).context("writing sweep table")?;
    println!("wrote {} rows to {}", rows.len(), args.out.display());
    Ok(())
}

fn run_sweep_strategy(args: SweepStrategyArgs) -> anyhow::Result<()> {
    let params = sweep_params(&args.train, args.threshold)?;
    let scene = load_scene(&args.input.t1, &args.input.t2, args.input.gt.as_deref())?;
    let rows = sweep_strategy(&scene, &params, &args.strategies)?;
    write_sweep_csv(&args.out, "strategy", &rows).context("writing sweep table")?;
    println!("wrote {} rows to {}", rows.len(), args.out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Detect(args) => detect(args),
        Command::Synth(args) => synth(args),
        Command::SweepR(args) => run_sweep_r(args),
        Command::SweepStrategy(args) => run_sweep_strategy(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
