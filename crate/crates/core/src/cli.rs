//! Command-line front end behind the `bandit-meta` binary.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::bench::{self, ExperimentConfig, Policy};
use crate::data;
use crate::error::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "bandit-meta", version, about = "Meta-learning benchmark for linear bandit tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run an experiment and write traces, summary and config echo.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides `output_dir` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Number of meta-seeds.
        #[arg(long)]
        seeds: Option<usize>,
        /// Comma-separated subset of OPT, Oracle, ITL, AvgOful, RrOful.
        #[arg(long, value_delimiter = ',')]
        policies: Option<Vec<String>>,
        #[arg(long = "lambda-grid", value_delimiter = ',')]
        lambda_grid: Option<Vec<f64>>,
    },
    /// Generate test fixtures.
    Fixtures {
        #[command(subcommand)]
        what: Fixture,
    },
    /// Print transfer diagnostics of the meta-estimators.
    Diag {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
enum Fixture {
    /// Synthetic ratings with planted user groups.
    GenRatings {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        users: usize,
        #[arg(long)]
        items: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Run {
            config,
            out,
            seeds,
            policies,
            lambda_grid,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seeds {
                cfg.n_meta_seeds = s;
            }
            if let Some(p) = policies {
                cfg.policies = p.iter().map(|s| s.parse::<Policy>()).collect::<Result<_>>()?;
            }
            if let Some(g) = lambda_grid {
                cfg.lambda_grid = g;
            }
            if let Some(o) = out {
                cfg.output_dir = Some(o);
            }
            let dir = cfg
                .output_dir
                .clone()
                .ok_or_else(|| Error::Config("no output directory: pass --out or set output_dir".into()))?;
            cfg.validate()?;
            let result = bench::run_experiment(&cfg)?;
            let written = bench::write_outputs(&cfg, &result, &dir)?;
            for s in &result.summaries {
                println!(
                    "{:<8} lambda={:<8} regret={:.4} ± {:.4}  reward={:.4}{}",
                    s.policy.name(),
                    s.lambda,
                    s.mean_cum_regret,
                    s.se_cum_regret,
                    s.mean_cum_reward,
                    if s.best_lambda { "  (best lambda)" } else { "" }
                );
            }
            println!("wrote {} files to {}", written.len(), dir.display());
        }
        Command::Fixtures {
            what: Fixture::GenRatings { out, users, items, seed },
        } => {
            let text = data::generate_planted_ratings(users, items, seed)?;
            std::fs::write(&out, text).map_err(|e| Error::io(&out, e))?;
            println!("wrote {}", out.display());
        }
        Command::Diag { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            for r in bench::diagnose(&cfg)? {
                let d = &r.diagnostics;
                println!(
                    "{} lambda={} nu_min={} max_misalignment={} eps={} H_rho={} H_tilde_max={} |h|={}",
                    r.policy.name(),
                    r.lambda,
                    d.nu_min,
                    d.max_misalignment,
                    d.eps,
                    d.h_rho,
                    d.h_tilde_max,
                    r.bias_norm
                );
                let per_task: Vec<String> = r.per_task_misalignment.iter().map(|m| format!("{m:.6}")).collect();
                println!("  misalignment per task: {}", per_task.join(" "));
            }
        }
    }
    Ok(())
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code: 0 success, 2 config error, 3 data error, 4 numerical failure.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
