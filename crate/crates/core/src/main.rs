use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use resup::cotrain::{TrainConfig, Variant};
use resup::datagen::save_csv;
use resup::harness::diagnostics::{export_histograms, export_weights};
use resup::harness::{
    build_datasets, fit_noise_report, format_aggregates, merge_reports, parse_value_column, reaggregate,
    run_experiment, run_single, DataSpec, ExperimentSpec, HarnessError, NoiseMode, NoiseSpec, Report,
};
use resup::noise_model::FitConfig;

#[derive(Parser)]
#[command(name = "resup", version)]
#[command(about = "Noise-robust co-training experiments on synthetic or CSV data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a blob dataset (optionally with corrupted labels) as CSV
    Gen(GenArgs),
    /// Train one variant with one seed
    Train(TrainArgs),
    /// Run a grid of variants x seeds
    Ablate(AblateArgs),
    /// Fit the beta mixture to a single column of similarities
    FitNoise(FitNoiseArgs),
    /// Re-aggregate one or more existing reports
    Report(ReportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum NoiseModeArg {
    Sym,
    Asym,
}

impl From<NoiseModeArg> for NoiseMode {
    fn from(m: NoiseModeArg) -> Self {
        match m {
            NoiseModeArg::Sym => NoiseMode::Sym,
            NoiseModeArg::Asym => NoiseMode::Asym,
        }
    }
}

#[derive(Args)]
struct BlobArgs {
    /// Number of training samples
    #[arg(long, default_value_t = 2000)]
    n_train: usize,
    /// Number of test samples
    #[arg(long, default_value_t = 500)]
    n_test: usize,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 10)]
    dim: usize,
    /// Minimum distance between cluster centres
    #[arg(long, default_value_t = 4.0)]
    separation: f64,
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
}

#[derive(Args)]
struct NoiseArgs {
    /// Fraction of training labels to corrupt
    #[arg(long, default_value_t = 0.0)]
    noise_rate: f64,
    #[arg(long, value_enum, default_value_t = NoiseModeArg::Sym)]
    noise_mode: NoiseModeArg,
    #[arg(long, default_value_t = 0)]
    noise_seed: u64,
}

impl NoiseArgs {
    fn spec(&self) -> NoiseSpec {
        NoiseSpec { mode: self.noise_mode.into(), rate: self.noise_rate, seed: self.noise_seed }
    }
}

#[derive(Args)]
struct DataArgs {
    #[command(flatten)]
    blobs: BlobArgs,
    /// Training CSV; replaces the blob generator (requires --test-csv)
    #[arg(long, requires = "test_csv")]
    train_csv: Option<PathBuf>,
    #[arg(long, requires = "train_csv")]
    test_csv: Option<PathBuf>,
    /// Keep CSV features as they are instead of standardizing them
    #[arg(long)]
    no_standardize: bool,
    #[command(flatten)]
    noise: NoiseArgs,
}

impl DataArgs {
    fn spec(&self) -> DataSpec {
        match (&self.train_csv, &self.test_csv) {
            (Some(train), Some(test)) => {
                DataSpec::Csv { train: train.clone(), test: test.clone(), standardize: !self.no_standardize }
            }
            _ => {
                let b = &self.blobs;
                DataSpec::Blobs {
                    n_train: b.n_train,
                    n_test: b.n_test,
                    classes: b.classes,
                    dim: b.dim,
                    separation: b.separation,
                    seed: b.data_seed,
                }
            }
        }
    }
}

#[derive(Args)]
struct TrainOpts {
    #[arg(long, default_value_t = 5.0)]
    lambda: f64,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 96)]
    batch_size: usize,
    #[arg(long, default_value_t = 2e-4)]
    lr: f64,
    /// Comma-separated epochs after which the learning rate decays ("none" for a constant rate)
    #[arg(long, default_value = "10,20", value_parser = parse_usize_list)]
    lr_milestones: UsizeList,
    #[arg(long, default_value_t = 0.1)]
    lr_decay: f64,
    /// Full layer widths, input first and class count last, e.g. 10,64,64,4
    #[arg(long, value_parser = parse_usize_list)]
    layer_dims: Option<UsizeList>,
    /// Epochs trained on uniform weights before the noise model takes over
    #[arg(long, default_value_t = 1)]
    warmup: usize,
    /// Start both networks from the same initialization
    #[arg(long)]
    tie_init: bool,
    /// Trailing epochs averaged into the reported accuracy
    #[arg(long, default_value_t = 5)]
    window: usize,
    /// Leave per-epoch histograms out of the report
    #[arg(long)]
    omit_histograms: bool,
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    blobs: BlobArgs,
    #[command(flatten)]
    noise: NoiseArgs,
    /// Where to write the training CSV
    #[arg(long)]
    out: PathBuf,
    /// Where to write the clean test CSV
    #[arg(long)]
    test_out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    opts: TrainOpts,
    #[arg(long, default_value_t = Variant::Resup)]
    variant: Variant,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Report path; the report goes to stdout when omitted
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write per-epoch similarity and loss histograms as CSV
    #[arg(long)]
    histograms: Option<PathBuf>,
    /// Write final per-sample weights as CSV
    #[arg(long)]
    weights: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    opts: TrainOpts,
    /// Comma-separated variants; all of them by default
    #[arg(long = "variant", value_delimiter = ',')]
    variants: Vec<Variant>,
    /// Comma-separated replicate seeds
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    seeds: Vec<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FitNoiseArgs {
    /// CSV whose first column holds similarities in (0, 1)
    input: PathBuf,
    #[arg(long, default_value_t = FitConfig::default().max_iters)]
    max_iters: usize,
}

#[derive(Args)]
struct ReportArgs {
    /// Report files written by `train` or `ablate`
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    window: Option<usize>,
    /// Write the merged, re-aggregated report here
    #[arg(long)]
    out: Option<PathBuf>,
}

type UsizeList = Vec<usize>;

fn parse_usize_list(s: &str) -> Result<UsizeList, String> {
    if s.trim().is_empty() || s == "none" {
        return Ok(Vec::new());
    }
    s.split(',').map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}"))).collect()
}

fn build_spec(data: &DataArgs, opts: &TrainOpts, variants: Vec<Variant>, seeds: Vec<u64>) -> Result<ExperimentSpec, HarnessError> {
    let data_spec = data.spec();
    let noise = data.noise.spec();
    let hidden_dims = match &opts.layer_dims {
        None => TrainConfig::default().hidden_dims,
        Some(dims) => {
            let (train, test) = build_datasets(&data_spec, &noise, seeds.first().copied().unwrap_or(0))?;
            let classes = train.class_count.max(test.class_count);
            match dims.as_slice() {
                [first, hidden @ .., last] if *first == train.dim() && *last == classes => hidden.to_vec(),
                _ => {
                    return Err(HarnessError::Invalid(format!(
                        "--layer-dims {dims:?} must start with the feature count {} and end with the class count {classes}",
                        train.dim()
                    )))
                }
            }
        }
    };
    let train = TrainConfig {
        lambda: opts.lambda,
        epochs: opts.epochs,
        batch_size: opts.batch_size,
        lr: opts.lr,
        lr_milestones: opts.lr_milestones.clone(),
        lr_decay: opts.lr_decay,
        warmup_epochs: opts.warmup,
        hidden_dims,
        tie_init: opts.tie_init,
        report_window: opts.window,
        ..TrainConfig::default()
    };
    Ok(ExperimentSpec { data: data_spec, noise, train, variants, seeds, omit_histograms: opts.omit_histograms })
}

fn emit(report: &Report, out: Option<&Path>) -> Result<(), HarnessError> {
    match out {
        Some(path) => {
            report.write(path)?;
            print!("{}", format_aggregates(report));
        }
        None => print!("{}", report.to_json()?),
    }
    Ok(())
}

fn read(path: &Path) -> Result<String, HarnessError> {
    std::fs::read_to_string(path).map_err(|e| HarnessError::Io(path.to_path_buf(), e))
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Gen(args) => {
            let b = &args.blobs;
            let data = DataSpec::Blobs {
                n_train: b.n_train,
                n_test: b.n_test,
                classes: b.classes,
                dim: b.dim,
                separation: b.separation,
                seed: b.data_seed,
            };
            let (train, test) = build_datasets(&data, &args.noise.spec(), 0)?;
            save_csv(&train, &args.out)?;
            if let Some(path) = &args.test_out {
                save_csv(&test, path)?;
            }
            eprintln!("wrote {} training samples ({} corrupted)", train.len(), train.noisy_count());
        }
        Command::Train(args) => {
            let spec = build_spec(&args.data, &args.opts, vec![args.variant], vec![args.seed])?;
            let single = run_single(&spec)?;
            if let Some(path) = &args.histograms {
                export_histograms(&single.epochs, path)?;
            }
            if let Some(path) = &args.weights {
                export_weights(&single.final_samples, &single.train, path)?;
            }
            emit(&single.report, args.out.as_deref())?;
        }
        Command::Ablate(args) => {
            let variants = if args.variants.is_empty() { Variant::ALL.to_vec() } else { args.variants.clone() };
            let spec = build_spec(&args.data, &args.opts, variants, args.seeds.clone())?;
            let report = run_experiment(&spec)?;
            emit(&report, args.out.as_deref())?;
        }
        Command::FitNoise(args) => {
            let values = parse_value_column(&read(&args.input)?)?;
            let cfg = FitConfig { max_iters: args.max_iters, ..FitConfig::default() };
            print!("{}", fit_noise_report(&values, &cfg)?);
        }
        Command::Report(args) => {
            let reports =
                args.inputs.iter().map(|p| Report::from_json(&read(p)?)).collect::<Result<Vec<_>, _>>()?;
            let merged = merge_reports(reports)?;
            let window = args.window.unwrap_or(merged.spec.train.report_window);
            let report = reaggregate(&merged, window);
            if let Some(path) = &args.out {
                report.write(path)?;
            }
            print!("{}", format_aggregates(&report));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
