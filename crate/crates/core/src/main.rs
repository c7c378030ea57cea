use std::path::PathBuf;
use std::process::ExitCode;

use chafee_exit::cli::{self, CliError, Flags};
use chafee_exit::config::{ExperimentConfig, SEED_ENV};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "chafee-exit",
    version,
    about = "First-exit statistics of the Chafee-Infante equation under Levy noise"
)]
struct Args {
    #[command(subcommand)]
    command: Command,
    /// Experiment configuration; built-in defaults when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Worker threads for ensembles and table construction.
    #[arg(long, global = true, value_name = "N")]
    workers: Option<usize>,
    /// Build threshold tables instead of requiring a valid cache.
    #[arg(long, global = true)]
    build_tables: bool,
    /// Write `(t, |X - phi|_inf)` samples of every path.
    #[arg(long, global = true)]
    dump_trajectories: bool,
    /// Output directory; overrides `io.out_dir`.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Continue an interrupted run from its record file.
    #[arg(long, global = true)]
    resume: bool,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Equilibria, energies and the relaxation-time fit.
    Equilibria,
    /// Build or refresh the threshold table cache.
    Tables,
    /// Run the exit-time ensemble.
    Run,
    /// Aggregate records into summary statistics.
    Summarize,
}

fn load(args: &Args) -> Result<ExperimentConfig, CliError> {
    let cfg = match &args.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let seed = std::env::var(SEED_ENV).ok();
    let mut cfg = cfg.with_seed_override(seed.as_deref())?;
    if let Some(out) = &args.out {
        cfg.io.out_dir = out.clone();
    }
    Ok(cfg)
}

fn execute(args: &Args) -> Result<(), CliError> {
    let cfg = load(args)?;
    eprint!("{}", cfg.constraint_report());
    let workers = args.workers.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get())).max(1);
    let flags = Flags {
        workers,
        build_tables: args.build_tables,
        dump_trajectories: args.dump_trajectories,
        resume: args.resume,
    };
    match args.command {
        Command::Equilibria => {
            let path = cli::cmd_equilibria(&cfg, &flags)?;
            println!("wrote {}", path.display());
        }
        Command::Tables => {
            let t = cli::cmd_tables(&cfg, &flags)?;
            let how = if t.reused { "reused" } else { "wrote" };
            println!("{how} {} ({} rows)", t.path.display(), t.rows);
        }
        Command::Run => {
            let r = cli::cmd_run(&cfg, &flags)?;
            if flags.resume {
                println!("resumed from seed_id {}", r.resumed_from);
            }
            for (eps, c) in &r.censor_fractions {
                println!("epsilon {eps}: censor fraction {c}");
            }
            println!(
                "simulated {} paths, {} failures; {} records in {}",
                r.simulated,
                r.failures,
                r.total_records,
                r.records_path.display()
            );
        }
        Command::Summarize => {
            let s = cli::cmd_summarize(&cfg, &flags)?;
            print!("{}", s.to_text());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let args = Args::parse();
    match execute(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(e)) => {
            eprintln!("{e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
