use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::anyhow;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use stl_ess_cli::commands::{self, Failure, Outcome, RunOptions, Side};

#[derive(Parser)]
#[command(
    name = "stl-ess",
    version,
    about = "Probability that a stochastic closed loop satisfies an STL specification"
)]
struct Cli {
    /// Worker threads for chains, outer iterations and simulations.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Work with the negated specification.
    #[arg(long)]
    negate: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn options(&self) -> RunOptions {
        RunOptions {
            seed: self.seed,
            negate: self.negate,
            out: self.out.clone(),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Probability of the STL formula.
    Verify(Common),
    /// Reach-avoid failure probability over the polytope union.
    VerifyRa(Common),
    /// Plain Monte-Carlo estimate of the same event.
    Mc {
        #[command(flatten)]
        common: Common,
        /// Number of simulations; defaults to estimator.mc_runs.
        #[arg(long)]
        runs: Option<usize>,
    },
    /// Draw fresh trajectories from one side of the specification as CSV.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        count: usize,
        #[arg(long, value_enum, default_value = "violate")]
        side: Side,
    },
    /// Fit a trajectory Gaussian to simulated runs.
    Fit {
        /// CSV with header x_0[0], x_0[1], ..., one trajectory per row.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long, default_value_t = 1e-9)]
        ridge: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Repeated paired HDR and Monte-Carlo runs.
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 100)]
        runs: usize,
    },
}

fn print<T: Serialize>(value: &T) -> Outcome<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Config(e.into()))?;
    println!("{text}");
    Ok(())
}

fn run(cli: Cli) -> Outcome<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::Config(anyhow!("--threads must be positive")));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Config(e.into()))?;
    }
    match cli.command {
        Command::Verify(c) => print(&commands::verify(
            &commands::load(&c.scenario)?,
            &c.options(),
        )?),
        Command::VerifyRa(c) => print(&commands::verify_ra(
            &commands::load(&c.scenario)?,
            &c.options(),
        )?),
        Command::Mc { common, runs } => print(&commands::mc(
            &commands::load(&common.scenario)?,
            &common.options(),
            runs,
        )?),
        Command::Sample {
            common,
            count,
            side,
        } => {
            let p = commands::load(&common.scenario)?;
            let (doc, rows) = commands::sample(&p, &common.options(), count, side)?;
            if common.out.is_none() && p.scenario().outputs.dir.is_none() {
                let mut w = csv::WriterBuilder::new()
                    .terminator(csv::Terminator::Any(b'\n'))
                    .from_writer(std::io::stdout());
                let io = |e: csv::Error| Failure::Config(e.into());
                w.write_record(stl_ess_cli::report::trajectory_header(p.state_dim, p.steps))
                    .map_err(io)?;
                for r in &rows {
                    w.write_record(r.iter().map(|v| v.to_string()))
                        .map_err(io)?;
                }
                w.flush().map_err(|e| Failure::Config(e.into()))?;
                Ok(())
            } else {
                print(&doc)
            }
        }
        Command::Fit {
            data,
            scenario,
            ridge,
            out,
        } => {
            let (summary, _) = commands::fit(&data, scenario.as_deref(), ridge, out.as_deref())?;
            print(&summary)
        }
        Command::Compare { common, runs } => {
            let summary =
                commands::compare(&commands::load(&common.scenario)?, &common.options(), runs)?;
            print(&summary)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
