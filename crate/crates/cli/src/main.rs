//! `fedmorph`: run, ablate and report simulator experiments.

mod config;
mod report;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use fedmorph_core::runtime::{write_run, Simulation, Summary};
use fedmorph_core::transformer::CellSelection;
use fedmorph_core::Error;

use config::{Beta, ExperimentConfig};

#[derive(Parser)]
#[command(name = "fedmorph", version, about = "Multi-model federated training simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct RunArgs {
    /// Flat JSON experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's seed and FEDTRANS_SEED.
    #[arg(long)]
    seed: Option<u64>,
    /// Parent directory for run outputs (default: config `out_dir`, else `runs`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Caps the number of client-training worker threads.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment.
    Run(RunArgs),
    /// Run an experiment with one component disabled.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum)]
        switch: Switch,
    },
    /// Summarize a finished run directory.
    Report {
        #[arg(long)]
        dir: PathBuf,
        /// Also write a plot-ready round/loss/cost CSV here.
        #[arg(long)]
        plot_csv: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Switch {
    #[value(name = "no_transform")]
    NoTransform,
    #[value(name = "no_soft")]
    NoSoft,
    #[value(name = "no_warmup")]
    NoWarmup,
    #[value(name = "random_cells")]
    RandomCells,
}

impl Switch {
    fn name(self) -> &'static str {
        match self {
            Switch::NoTransform => "no_transform",
            Switch::NoSoft => "no_soft",
            Switch::NoWarmup => "no_warmup",
            Switch::RandomCells => "random_cells",
        }
    }

    fn apply(self, cfg: &mut ExperimentConfig) {
        match self {
            Switch::NoTransform => cfg.beta = Beta(f64::NEG_INFINITY),
            Switch::NoSoft => cfg.enable_soft = false,
            Switch::NoWarmup => cfg.warmup = false,
            Switch::RandomCells => cfg.cell_selection = CellSelection::Random,
        }
    }
}

enum Failure {
    /// Bad flags, config or input files: exit 2.
    Usage(String),
    /// The simulation itself failed: exit 1.
    Runtime(String),
}

fn classify(e: Error) -> Failure {
    match e {
        Error::Config(_) | Error::DatasetTooSmall { .. } | Error::Selection { .. } => {
            Failure::Usage(e.to_string())
        }
        other => Failure::Runtime(other.to_string()),
    }
}

fn execute(args: &RunArgs, switch: Option<Switch>) -> Result<PathBuf, Failure> {
    let mut cfg = ExperimentConfig::load(&args.config).map_err(Failure::Usage)?;
    let seed = cfg.resolve_seed(args.seed).map_err(Failure::Usage)?;
    cfg.seed = Some(seed);
    if let Some(s) = switch {
        s.apply(&mut cfg);
    }
    let run_cfg = cfg.to_run_config(seed);
    run_cfg
        .validate()
        .map_err(|e| Failure::Usage(format!("{}: {e}", args.config.display())))?;
    if let Some(k) = args.threads {
        if k == 0 {
            return Err(Failure::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build_global()
            .map_err(|e| Failure::Runtime(e.to_string()))?;
    }

    let parent = args
        .out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs"));
    let name = match switch {
        Some(s) => format!("{}-{}", cfg.run_name(), s.name()),
        None => cfg.run_name().to_string(),
    };
    let dir = parent.join(name);

    let sim = Simulation::new(run_cfg).map_err(classify)?;
    let result = sim.run().map_err(|e| Failure::Runtime(e.to_string()))?;
    write_run(&dir, &result).map_err(|e| Failure::Runtime(e.to_string()))?;
    let effective = serde_json::to_string_pretty(&cfg).map_err(|e| Failure::Runtime(e.to_string()))?;
    std::fs::write(dir.join("config.json"), effective).map_err(|e| Failure::Runtime(e.to_string()))?;

    let s = Summary::from_result(&result);
    println!(
        "{}: mean_acc={:.4} iqr_acc={:.4} total_macs={} models={} rounds={}",
        dir.display(),
        s.mean_acc,
        s.iqr_acc,
        s.total_macs,
        s.models.len(),
        s.rounds
    );
    Ok(dir)
}

fn report(dir: &Path, plot_csv: Option<&Path>) -> Result<(), Failure> {
    let r = report::load(dir).map_err(|e| Failure::Usage(format!("{}: {e}", dir.display())))?;
    let name = dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned());
    print!("{}", r.table(&name));
    if let Some(p) = plot_csv {
        std::fs::write(p, r.plot_csv()).map_err(|e| Failure::Runtime(format!("{}: {e}", p.display())))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Run(args) => execute(args, None).map(|_| ()),
        Command::Ablate { run, switch } => execute(run, Some(*switch)).map(|_| ()),
        Command::Report { dir, plot_csv } => report(dir, plot_csv.as_deref()),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
