use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pmlab_cli::{run_random, run_scenario, RandomOutcome, RunOptions, EXIT_ERROR, EXIT_PASS, EXIT_VIOLATION};
use pmlab_core::suite::SuiteConfig;

#[derive(Parser)]
#[command(name = "pmlab", version, about = "Pseudo-marginal MCMC verification lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every experiment of a scenario file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides `output_dir` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Experiments run in parallel.
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long)]
        seed_override: Option<u64>,
    },
    /// Randomized ordering suite on small finite instances.
    Random {
        #[arg(long)]
        count: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        max_states: usize,
        #[arg(long, default_value_t = 4)]
        max_atoms: usize,
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn code(c: i32) -> ExitCode {
    ExitCode::from(c as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            config,
            out,
            jobs,
            seed_override,
        } => {
            let opts = RunOptions {
                config,
                out,
                jobs,
                seed_override,
            };
            match run_scenario(&opts) {
                Ok(summary) => {
                    print!("{}", summary.table());
                    println!("report: {}", summary.out_dir.join("report.json").display());
                    for o in summary.outcomes.iter().filter(|o| !o.pass) {
                        if let Some(v) = &o.violation {
                            eprintln!("violation in {}: {} (slack {:e}) {}", o.name, v.check, v.slack, v.detail);
                        }
                    }
                    code(summary.exit_code())
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    code(EXIT_ERROR)
                }
            }
        }
        Command::Random {
            count,
            seed,
            max_states,
            max_atoms,
            jobs,
            out,
        } => {
            let mut cfg = SuiteConfig::new(count, seed);
            cfg.max_states = max_states;
            cfg.max_atoms = max_atoms;
            match run_random(&cfg, jobs, out.as_deref()) {
                Ok(RandomOutcome::Pass(r)) => {
                    println!("{}", serde_json::to_string_pretty(&r).expect("report serializes"));
                    code(EXIT_PASS)
                }
                Ok(RandomOutcome::Violation(v)) => {
                    eprintln!("inequality `{}` violated with slack {:e}", v.check, v.slack);
                    println!("{}", serde_json::to_string_pretty(&v).expect("instance serializes"));
                    code(EXIT_VIOLATION)
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    code(EXIT_ERROR)
                }
            }
        }
    }
}
