//! `wxnet` command-line front end.

pub mod config;
pub mod error;
pub mod manifest;
pub mod pipeline;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use wxnet_core::data::{load_dataset, synthetic_cube, SynthOptions};
use wxnet_core::Variant;

use crate::config::{RunConfig, SyntheticSection};
use crate::error::{CliError, Result};
use crate::manifest::{InputRecord, Manifest};
use crate::pipeline::{OccludeOptions, RehearsalOptions, ScoremaxOptions};

#[derive(Debug, Parser)]
#[command(name = "wxnet", version, about = "Train, evaluate and explain multi-station weather forecasters")]
pub struct Cli {
    /// More log output (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a long-form CSV and write the canonical cube.
    Ingest(IngestArgs),
    /// Write a synthetic dataset in the long-form CSV layout.
    Synth(SynthArgs),
    /// Train one model and evaluate it on the test split.
    Train(TrainArgs),
    /// Re-evaluate a trained run on its test split.
    Eval(EvalArgs),
    /// Occlusion analysis and score maximization.
    #[command(subcommand)]
    Explain(ExplainCommand),
    /// All targets × horizons × variants, combined tables and explanation artifacts.
    Rehearse(RehearseArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Raw long-form CSV (`date,city,<features...>`).
    pub input: PathBuf,
    /// Canonical CSV to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Keep only these cities, in this order.
    #[arg(long, value_delimiter = ',')]
    pub cities: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    pub features: Option<Vec<String>>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 400)]
    pub days: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
}

#[derive(Debug, Args, Default)]
pub struct RunOverrides {
    /// Run configuration (TOML); defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// unistream, att_unistream, multistream or att_multistream.
    #[arg(long)]
    pub variant: Option<String>,
    /// Days ahead.
    #[arg(long)]
    pub horizon: Option<usize>,
    /// Target feature, e.g. avg_temp or wind_speed.
    #[arg(long)]
    pub target: Option<String>,
    #[arg(long)]
    pub lags: Option<usize>,
    /// Data CSV; overrides the config and the data directory variable.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Root of the run directories.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

impl RunOverrides {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(v) = &self.variant {
            cfg.model.variant = v.clone();
        }
        if let Some(h) = self.horizon {
            cfg.task.horizon = h;
        }
        if let Some(t) = &self.target {
            cfg.task.target = t.clone();
        }
        if let Some(l) = self.lags {
            cfg.task.lags = l;
        }
        if let Some(d) = &self.data {
            cfg.data.path = Some(d.clone());
            cfg.data.synthetic = None;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.output = o.clone();
        }
        if let Some(e) = self.epochs {
            cfg.train.max_epochs = e;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunOverrides,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    pub run: PathBuf,
    /// Checkpoint to use instead of the run's own.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum ExplainCommand {
    /// Mask regions of the test windows and report the mean % change of the error.
    Occlude(OccludeArgs),
    /// Gradient ascent on the input to maximize 1/MSE.
    Scoremax(ScoremaxArgs),
}

#[derive(Debug, Args)]
pub struct OccludeArgs {
    #[arg(long)]
    pub run: PathBuf,
    /// feature_row, city_column, patch or temporal.
    #[arg(long)]
    pub mode: String,
    #[arg(long)]
    pub patch_size: Option<usize>,
    /// One target city (all target cities by default).
    #[arg(long)]
    pub city: Option<String>,
    /// Also emit the map for the error over all targets.
    #[arg(long)]
    pub all_targets: bool,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScoremaxArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub iterations: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    /// 1-based lags to render (lag 1 is the oldest).
    #[arg(long, value_delimiter = ',')]
    pub lags: Vec<usize>,
    /// Test window to start from.
    #[arg(long)]
    pub sample: Option<usize>,
    /// Start from uniform noise with this seed instead of the sample.
    #[arg(long)]
    pub random_init: Option<u64>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RehearseArgs {
    #[command(flatten)]
    pub run: RunOverrides,
    #[arg(long, value_delimiter = ',', default_value = "wind_speed,avg_temp")]
    pub targets: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "2,4,6")]
    pub horizons: Vec<usize>,
    /// Use a synthetic cube of this many days when no data is configured.
    #[arg(long)]
    pub synthetic_days: Option<usize>,
    #[arg(long, default_value_t = 100)]
    pub scoremax_iterations: usize,
}

fn ingest(args: &IngestArgs, out: &mut dyn Write) -> Result<()> {
    let (cube, report) = load_dataset(&args.input, args.cities.as_deref(), args.features.as_deref())?;
    cube.save_csv(&args.out)?;
    let report_path = sibling(&args.out, "report.txt");
    std::fs::write(&report_path, report.to_string())
        .map_err(|e| CliError::io(format!("writing {}", report_path.display()), e))?;
    let mut manifest = Manifest::new("ingest", 0);
    manifest.inputs.push(InputRecord::from_file("raw", &args.input)?);
    manifest.outputs = vec![args.out.display().to_string(), report_path.display().to_string()];
    manifest.write(&sibling(&args.out, "manifest.toml"))?;
    let _ = write!(out, "{report}");
    let _ = writeln!(
        out,
        "wrote {} ({} days × {} features × {} cities)",
        args.out.display(),
        cube.days(),
        cube.features().len(),
        cube.cities().len()
    );
    Ok(())
}

/// `data.csv` → `data.<suffix>`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn synth(args: &SynthArgs, out: &mut dyn Write) -> Result<()> {
    let mut opts = SynthOptions::full(args.days, args.seed);
    opts.noise = args.noise;
    let cube = synthetic_cube(&opts)?;
    cube.save_csv(&args.out)?;
    let _ = writeln!(out, "wrote synthetic data to {} ({} days)", args.out.display(), cube.days());
    Ok(())
}

fn print_table(out: &mut dyn Write, table: &wxnet_core::training::EvalTable) {
    let _ = writeln!(out, "{} {} days ahead, {}", table.feature, table.horizon, table.model);
    for (city, mse) in table.rows() {
        let _ = writeln!(out, "  {city:<12} {mse:.6}");
    }
}

fn dispatch(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Ingest(a) => ingest(&a, out),
        Command::Synth(a) => synth(&a, out),
        Command::Train(a) => {
            let cfg = a.run.resolve()?;
            let o = pipeline::train_run(&cfg)?;
            if o.synthetic {
                let _ = writeln!(out, "NOTE: trained on SYNTHETIC data");
            }
            let best = o.log.best().expect("at least one epoch");
            let _ = writeln!(
                out,
                "best epoch {} of {} (val mse {:.6e})",
                best.epoch,
                o.log.epochs.len(),
                best.val_mse
            );
            print_table(out, &o.table);
            let _ = writeln!(out, "run directory: {}", o.dir.display());
            Ok(())
        }
        Command::Eval(a) => {
            let o = pipeline::eval_run(&a.run, a.checkpoint.as_deref())?;
            print_table(out, &o.table);
            let _ = writeln!(out, "{} test windows; series in {}", o.windows, a.run.join("eval").display());
            Ok(())
        }
        Command::Explain(ExplainCommand::Occlude(a)) => {
            let opts = OccludeOptions {
                mode: a.mode,
                patch_size: a.patch_size,
                city: a.city,
                all_targets: a.all_targets,
                checkpoint: a.checkpoint,
            };
            for p in pipeline::occlude_run(&a.run, &opts)? {
                let _ = writeln!(out, "wrote {}", p.display());
            }
            Ok(())
        }
        Command::Explain(ExplainCommand::Scoremax(a)) => {
            let opts = ScoremaxOptions {
                iterations: a.iterations,
                learning_rate: a.lr,
                lags: a.lags,
                sample: a.sample,
                random_init: a.random_init,
                checkpoint: a.checkpoint,
            };
            for p in pipeline::scoremax_run(&a.run, &opts)? {
                let _ = writeln!(out, "wrote {}", p.display());
            }
            Ok(())
        }
        Command::Rehearse(a) => {
            let mut cfg = a.run.resolve()?;
            if cfg.resolve_data_path().is_none() && cfg.data.synthetic.is_none() {
                if let Some(days) = a.synthetic_days {
                    cfg.data.synthetic = Some(SyntheticSection {
                        days,
                        seed: cfg.seed,
                        noise: 0.1,
                        features: None,
                        cities: None,
                    });
                }
            }
            let opts = RehearsalOptions {
                targets: a.targets,
                horizons: a.horizons,
                variants: Variant::ALL.to_vec(),
                explain_variant: None,
                scoremax_iterations: a.scoremax_iterations,
            };
            let o = pipeline::rehearse(&cfg, &opts)?;
            if o.synthetic {
                let _ = writeln!(out, "NOTE: rehearsal ran on SYNTHETIC data, not the real dataset");
            }
            for p in o.table_files.iter().chain(&o.artifacts) {
                let _ = writeln!(out, "wrote {}", p.display());
            }
            Ok(())
        }
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code. Errors go to `err`.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let sink: &mut dyn Write = if code == 0 { out } else { err };
            let _ = write!(sink, "{}", e.render());
            return code;
        }
    };
    init_logging(cli.verbose);
    match dispatch(cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}
