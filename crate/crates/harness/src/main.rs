use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use stamina_core::trainer::{Ablation, Method};
use stamina_harness::config::{parse_pairs, ExperimentConfig};
use stamina_harness::experiment::{recompute_metrics, run_experiment, threads_from_env};
use stamina_harness::report::render;
use stamina_harness::{selftest, HarnessError};

#[derive(Parser)]
#[command(name = "stamina", version, about = "Continual adaptation experiments on toy attention models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the method grid of a config.
    Run(RunArgs),
    /// Run full STAMINA plus each of the five ablations.
    Ablate(RunArgs),
    /// Recompute the report of a finished run from its saved logs.
    Metrics {
        /// Run directory holding config.txt and logs/.
        run_dir: PathBuf,
    },
    /// Run the built-in invariant checks.
    Selftest,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Restrict the grid to these methods (repeat or comma separate).
    #[arg(long, value_delimiter = ',')]
    method: Vec<String>,
    #[arg(long)]
    n_tasks: Option<usize>,
    #[arg(long)]
    mode: Option<String>,
    /// Continue from the latest per-task checkpoints.
    #[arg(long)]
    resume: bool,
}

impl RunArgs {
    fn config(&self, ablate: bool) -> Result<ExperimentConfig, HarnessError> {
        let mut pairs = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| HarnessError::Io {
                    path: p.clone(),
                    source,
                })?;
                parse_pairs(&text)?
            }
            None => Vec::new(),
        };
        let mut set = |k: &str, v: String| pairs.push((k.to_string(), v));
        if let Some(m) = &self.mode {
            set("mode", m.clone());
        }
        if let Some(s) = self.seed {
            set("seed", s.to_string());
        }
        if let Some(n) = self.n_tasks {
            set("n_tasks", n.to_string());
        }
        if let Some(o) = &self.out {
            set("out", o.display().to_string());
        }
        if ablate {
            set("methods", Method::Stamina.name().into());
            let all: Vec<&str> = Ablation::ALL.iter().map(|a| a.name()).collect();
            set("ablations", all.join(","));
        } else if !self.method.is_empty() {
            set("methods", self.method.join(","));
        }
        ExperimentConfig::from_pairs(&pairs)
    }
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Run(a) => {
            let cfg = a.config(false)?;
            let report = run_experiment(&cfg, a.resume, threads_from_env())?;
            print!("{}", render(&report));
            eprintln!("wrote {}", cfg.run_dir().display());
        }
        Command::Ablate(a) => {
            let cfg = a.config(true)?;
            let report = run_experiment(&cfg, a.resume, threads_from_env())?;
            print!("{}", render(&report));
            eprintln!("wrote {}", cfg.run_dir().display());
        }
        Command::Metrics { run_dir } => {
            let report = recompute_metrics(&run_dir)?;
            print!("{}", render(&report));
        }
        Command::Selftest => {
            let checks = selftest::run_all();
            let mut failed = 0;
            for c in &checks {
                match &c.outcome {
                    Ok(()) => println!("ok    {}", c.name),
                    Err(e) => {
                        failed += 1;
                        println!("FAIL  {}: {e}", c.name);
                    }
                }
            }
            if failed > 0 {
                return Err(HarnessError::Config(format!("{failed} selftest check(s) failed")));
            }
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
