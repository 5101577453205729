use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand, ValueEnum};

use curedesign::commands::{self, OptimizeArgs, Probe};
use curedesign::config::resolve;
use curedesign_core::cure_cycle::DesignVector;
use curedesign_core::design_opt::OptimizerKind;

#[derive(Parser)]
#[command(name = "curedesign", version, about = "Cure-cycle simulation, surrogate training and inverse design")]
struct Cli {
    /// Preset name (paper-20mm, paper-30mm, desk-scale) or path to a JSON config.
    #[arg(long, global = true, default_value = "paper-20mm")]
    config: String,
    /// Master seed; overrides the config's.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads for population evaluations.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProbeArg {
    Midpoint,
}

#[derive(Clone, Copy, ValueEnum)]
enum OptimizerArg {
    Adam,
    Nadam,
    Pso,
    Ga,
}

impl From<OptimizerArg> for OptimizerKind {
    fn from(o: OptimizerArg) -> Self {
        match o {
            OptimizerArg::Adam => OptimizerKind::Adam,
            OptimizerArg::Nadam => OptimizerKind::Nadam,
            OptimizerArg::Pso => OptimizerKind::Pso,
            OptimizerArg::Ga => OptimizerKind::Ga,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the finite-difference simulator for one design.
    Simulate {
        /// Design JSON file (array, named object or optimize summary).
        #[arg(long, conflicts_with = "u")]
        design: Option<PathBuf>,
        /// Design as nine comma-separated values.
        #[arg(long, allow_hyphen_values = true)]
        u: Option<String>,
        #[arg(long, value_enum)]
        probe: Option<ProbeArg>,
    },
    /// Train the surrogate; the checkpoint goes to <out>/model.
    Train {
        /// Continue from the checkpoint in <out>/model.
        #[arg(long)]
        resume: bool,
    },
    /// Optimise the design on a trained surrogate.
    Optimize {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum)]
        optimizer: Option<OptimizerArg>,
        /// Number of random initial designs.
        #[arg(long)]
        starts: Option<usize>,
        /// Initial design as nine comma-separated values.
        #[arg(long, allow_hyphen_values = true)]
        u0: Option<String>,
    },
    /// Check a design on the finite-difference simulator.
    Verify {
        #[arg(long, conflicts_with = "u")]
        design: Option<PathBuf>,
        #[arg(long, allow_hyphen_values = true)]
        u: Option<String>,
        /// Also report the surrogate's view of the design.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Compare Adam, NAdam, PSO and GA at the configured budgets.
    Benchmark {
        #[arg(long)]
        model: PathBuf,
    },
}

fn design_arg(file: Option<PathBuf>, list: Option<String>) -> Result<Option<DesignVector>> {
    match (file, list) {
        (Some(f), _) => Ok(Some(commands::read_design(&f)?)),
        (None, Some(s)) => Ok(Some(commands::parse_design_list(&s)?)),
        (None, None) => Ok(None),
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve(&cli.config, cli.seed)?;
    let out = &cli.out;
    match cli.command {
        Command::Simulate { design, u, probe } => {
            let d = design_arg(design, u)?;
            commands::simulate(&cfg, d, probe.map(|_| Probe::Midpoint), out)?;
        }
        Command::Train { resume } => {
            let model = commands::train(&cfg, out, resume)?;
            println!("trained {} subdomains into {}", model.subdomains.len(), out.join("model").display());
        }
        Command::Optimize { model, optimizer, starts, u0 } => {
            let args = OptimizeArgs {
                model,
                optimizer: optimizer.map(Into::into),
                starts,
                u0: u0.map(|s| commands::parse_design_list(&s)).transpose()?,
                jobs: cli.jobs,
            };
            let traces = commands::optimize(&cfg, &args, out)?;
            for (i, t) in traces.iter().enumerate() {
                println!("start {i}: best total {:.6e} after {} calls", t.best.total, t.calls.total());
            }
        }
        Command::Verify { design, u, model } => {
            let d = design_arg(design, u)?.unwrap_or(cfg.config.initial_design);
            let report = commands::verify(&cfg, &d, model.as_deref(), out)?;
            for c in &report.checks {
                println!(
                    "{:<20} {:>12.4} {} {:<8} {}",
                    c.metric,
                    c.value,
                    c.relation,
                    c.limit,
                    if c.pass { "pass" } else { "FAIL" }
                );
            }
        }
        Command::Benchmark { model } => {
            commands::benchmark(&cfg, &model, cli.jobs, out)?;
            print!("{}", std::fs::read_to_string(out.join("benchmark.csv"))?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(curedesign::exit_code(&e))
        }
    }
}
