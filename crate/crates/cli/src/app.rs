//! Argument parsing and dispatch. Flags override the config file, which
//! overrides the built-in defaults.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::commands::{self, Subject};
use crate::config::{MethodKey, RunConfig};
use crate::reproduce::{self, ReproduceOptions, Table};
use crate::CliError;

#[derive(Debug, Parser)]
#[command(name = "scoregen", version, about = "Scoring-rule training of generative forecasters")]
pub struct Cli {
    /// TOML run configuration; unknown keys are rejected.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides SCOREGEN_OUT and the config).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Print the default configuration (for `--preset`) and exit.
    #[arg(long)]
    pub print_defaults: bool,
    /// Preset whose defaults `--print-defaults` shows.
    #[arg(long, requires = "print_defaults")]
    pub preset: Option<String>,
    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate (or re-read) the configured series and write it.
    Simulate(DataArgs),
    /// Train one method and write the checkpoint and run logs.
    Train(TrainArgs),
    /// Evaluate a generator checkpoint or the oracle on the test split.
    Evaluate(EvalArgs),
    /// Simulate, sweep-train every method of a table, evaluate and compare.
    Reproduce(ReproduceArgs),
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Simulator preset (lorenz63-paper or lorenz96-paper).
    #[arg(long)]
    pub preset: Option<String>,
    /// Series file instead of a simulator.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Recorded time units after burn-in.
    #[arg(long)]
    pub duration: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// energy, kernel, variogram, energy_variogram, kernel_variogram or gan.
    #[arg(long)]
    pub method: Option<String>,
    /// Sweep the learning-rate grid(s).
    #[arg(long)]
    pub sweep: bool,
    /// Generator learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Discriminator learning rate (GAN only).
    #[arg(long)]
    pub lr_disc: Option<f64>,
    /// Maximum number of epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Ensemble members per training step.
    #[arg(long)]
    pub members: Option<usize>,
    /// Training windows per step.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Worker threads for the sweep.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Log every epoch to stderr.
    #[arg(long)]
    pub verbose: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Generator checkpoint written by `train`.
    #[arg(long, conflicts_with = "oracle", required_unless_present = "oracle")]
    pub checkpoint: Option<PathBuf>,
    /// Evaluate the forecaster that returns the verification itself.
    #[arg(long)]
    pub oracle: bool,
    /// Method label for the report row.
    #[arg(long)]
    pub method: Option<String>,
    /// Ensemble members per test case.
    #[arg(long)]
    pub members: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ReproduceArgs {
    /// lorenz63 or lorenz96.
    pub table: String,
    /// Acknowledge that the full run takes hours of CPU time.
    #[arg(long)]
    pub accept_compute_budget: bool,
    /// Recorded time units after burn-in (reduced-scale runs).
    #[arg(long)]
    pub duration: Option<f64>,
    /// Maximum number of epochs per method.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Train each method at the default learning rate only.
    #[arg(long)]
    pub no_sweep: bool,
    /// Comma-separated subset of the table's methods.
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<String>>,
    /// Worker threads for the sweeps.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Log every epoch to stderr.
    #[arg(long)]
    pub verbose: bool,
}

fn base_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn apply_data(cfg: &mut RunConfig, a: &DataArgs) {
    if let Some(p) = &a.preset {
        cfg.data.preset = p.clone();
        cfg.data.file = None;
    }
    if let Some(f) = &a.data {
        cfg.data.file = Some(f.clone());
    }
    if a.duration.is_some() {
        cfg.data.duration = a.duration;
    }
}

fn print_evaluation(ev: &scoregen::evaluation::Evaluation, dir: &Path) {
    println!("{}", scoregen::evaluation::EvaluationReport::CSV_HEADER);
    println!("{}", ev.report.csv_row());
    println!("wrote {}", dir.display());
}

/// Runs the parsed command and returns the process exit code.
pub fn run(cli: Cli) -> Result<(), CliError> {
    if cli.print_defaults {
        let cfg = match &cli.preset {
            Some(p) => RunConfig::defaults_for(p)?,
            None => RunConfig::default(),
        };
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let Some(command) = &cli.command else {
        return Err(CliError::Config("no command given (see --help)".into()));
    };
    let mut cfg = base_config(&cli)?;
    match command {
        Command::Simulate(a) => {
            apply_data(&mut cfg, a);
            let out = cfg.resolve_output(cli.out.as_deref());
            let (path, ts) = commands::simulate(&cfg, &out)?;
            print!("{}", commands::series_summary(&ts));
            println!("wrote {}", path.display());
        }
        Command::Train(a) => {
            apply_data(&mut cfg, &a.data);
            let t = &mut cfg.train;
            if let Some(m) = &a.method {
                t.method = MethodKey::parse(m)?;
            }
            t.sweep |= a.sweep;
            t.verbose |= a.verbose;
            if let Some(v) = a.lr {
                t.lr = v;
            }
            if let Some(v) = a.lr_disc {
                t.lr_disc = v;
            }
            if let Some(v) = a.epochs {
                t.epochs = v;
            }
            if let Some(v) = a.members {
                t.members = v;
            }
            if let Some(v) = a.batch_size {
                t.batch_size = v;
            }
            if let Some(v) = a.jobs {
                cfg.jobs = v;
            }
            let out = cfg.resolve_output(cli.out.as_deref());
            let trained = commands::train(&cfg, &out)?;
            let r = &trained.report;
            if trained.sweep.len() > 1 {
                for e in &trained.sweep {
                    let val = e.best_val.map_or_else(|| e.error.clone().unwrap_or_default(), |v| format!("{v:.6}"));
                    match e.lr_disc {
                        Some(d) => println!("lr {:e} lr_disc {d:e}: {val}", e.lr),
                        None => println!("lr {:e}: {val}", e.lr),
                    }
                }
            }
            println!(
                "{}: selected lr {:e}{}, best epoch {} of {}, validation {:.6}",
                cfg.train.method.label(),
                r.lr,
                r.lr_disc.map(|d| format!(" / {d:e}")).unwrap_or_default(),
                r.best_epoch,
                r.epochs_run,
                r.best_val
            );
            for w in &r.warnings {
                eprintln!("warning: {w}");
            }
            println!("wrote {}", out.display());
        }
        Command::Evaluate(a) => {
            apply_data(&mut cfg, &a.data);
            if let Some(m) = &a.method {
                cfg.train.method = MethodKey::parse(m)?;
            }
            if let Some(m) = a.members {
                cfg.eval.members = m;
            }
            let subject = match (&a.checkpoint, a.oracle) {
                (Some(p), _) => Subject::Checkpoint(p.clone()),
                (None, _) => Subject::Oracle,
            };
            let out = cfg.resolve_output(cli.out.as_deref());
            let ev = commands::evaluate(&cfg, &subject, &out)?;
            print_evaluation(&ev, &out);
        }
        Command::Reproduce(a) => {
            let table = Table::parse(&a.table)?;
            let methods = a
                .methods
                .as_ref()
                .map(|ms| ms.iter().map(|m| MethodKey::parse(m)).collect::<Result<Vec<_>, _>>())
                .transpose()?;
            let opts = ReproduceOptions {
                duration: a.duration,
                epochs: a.epochs,
                no_sweep: a.no_sweep,
                methods: methods.clone(),
                jobs: a.jobs,
                seed: cli.seed,
                verbose: a.verbose,
            };
            let base = cli.config.is_some().then(|| base_config(&cli)).transpose()?;
            let rcfg = reproduce::reproduce_config(table, base, &opts)?;
            if !a.accept_compute_budget {
                return Err(CliError::Config(
                    "reproduce trains every method of the table with a learning-rate sweep and can take hours; \
                     pass --accept-compute-budget to proceed"
                        .into(),
                ));
            }
            let out = rcfg.resolve_output(cli.out.as_deref());
            let report = reproduce::reproduce(table, &rcfg, methods.as_deref(), &out, |row| match (&row.obtained, &row.failure) {
                (Some(r), _) => eprintln!("{}: cal {:.4} nrmse {:.4} r2 {:.4}", row.method, r.calibration_error, r.nrmse, r.r_squared),
                (None, f) => eprintln!("{}: FAILED {}", row.method, f.as_deref().unwrap_or_default()),
            })?;
            print!("{}", report.to_markdown());
            println!("wrote {}", out.display());
            if report.rows.iter().any(|r| r.failure.is_some()) {
                return Err(CliError::Numerical("one or more stages failed; see the partial report".into()));
            }
            if !report.passed() {
                return Err(CliError::Acceptance("one or more acceptance checks failed".into()));
            }
        }
    }
    Ok(())
}

/// Parses `args`, runs the command and maps the outcome to an exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
