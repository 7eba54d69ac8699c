use clap::{Args, Parser, Subcommand, ValueEnum};
use drifter_uq::drifter::ControlKind;
use drifter_uq::experiment::{self, ExperimentConfig, ExperimentError, SweepOptions, SweepOutcome, WORKERS_ENV};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "drifter-uq", version, about = "Controlled-drifter data assimilation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write stagnation points, stream-function grid and the uncontrolled truth path.
    Truth(RunArgs),
    /// Sweep the magnitude of a zonal or bidirectional control.
    Sweep {
        #[arg(long, value_enum)]
        control: SweepControl,
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        cells: CellArgs,
    },
    /// Two-stage run with the control built from the first-half posterior mean.
    Aposteriori {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        cells: CellArgs,
    },
    /// Summarise a finished (or partial) run directory.
    Report { run_dir: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepControl {
    Zonal,
    Bidirectional,
}

#[derive(Args)]
struct RunArgs {
    /// JSON configuration; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `output_dir` from the configuration.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CellArgs {
    /// Comma-separated grid indices to run (default: all).
    #[arg(long, value_delimiter = ',')]
    cells: Option<Vec<usize>>,
    /// Concurrent cells (default: the environment variable, then all cores).
    #[arg(long, env = WORKERS_ENV)]
    workers: Option<usize>,
}

impl RunArgs {
    fn load(&self) -> Result<ExperimentConfig, ExperimentError> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::from_file(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        Ok(cfg)
    }
}

impl CellArgs {
    fn options(self) -> SweepOptions {
        SweepOptions {
            cells: self.cells,
            workers: self.workers,
            progress: true,
        }
    }
}

fn finish(outcome: SweepOutcome) -> Result<bool, ExperimentError> {
    for f in &outcome.failures {
        eprintln!("cell {} (zeta = {}) failed: {}", f.index, f.zeta, f.message);
    }
    print!("{}", experiment::report(&outcome.run_dir)?);
    Ok(outcome.is_complete())
}

fn run(cli: Cli) -> Result<bool, ExperimentError> {
    match cli.command {
        Command::Truth(args) => {
            let cfg = args.load()?;
            let traj = experiment::run_truth(&cfg)?;
            println!(
                "wrote truth artifacts ({} path points) to {}",
                traj.len(),
                cfg.output_dir.display()
            );
            Ok(true)
        }
        Command::Sweep { control, run, cells } => {
            let mut cfg = run.load()?;
            cfg.control = match control {
                SweepControl::Zonal => ControlKind::Zonal,
                SweepControl::Bidirectional => ControlKind::Bidirectional,
            };
            finish(experiment::run_sweep(&cfg, &cells.options())?)
        }
        Command::Aposteriori { run, cells } => {
            let mut cfg = run.load()?;
            cfg.control = ControlKind::GradMean;
            finish(experiment::run_aposteriori(&cfg, &cells.options())?)
        }
        Command::Report { run_dir } => {
            let report = experiment::report(&run_dir)?;
            print!("{report}");
            Ok(report.is_complete())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
