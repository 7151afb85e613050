use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use fibergi::reconstruction::Method;
use fibergi_cli::commands::{self, Report, RunOptions};
use fibergi_cli::{ConfigError, Experiment};

#[derive(Parser)]
#[command(name = "fibergi", version, about = "Ghost-imaging fiber sensing simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the reconstruction method: whgi, iwht or rsgi.
    #[arg(long, global = true)]
    method: Option<String>,
    /// Overrides the seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Also write the pattern table to `patterns.txt`.
    #[arg(long, global = true)]
    dump_patterns: bool,
    /// Add the single-pulse oracle column to reconstructed images.
    #[arg(long, global = true)]
    compare_oracle: bool,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Acquire bucket records for every frequency of the sweep.
    Simulate,
    /// Reconstruct images from previously simulated records.
    Reconstruct,
    /// Sweep, reconstruct and fit the Brillouin frequency profile.
    Sweep,
    /// Fit a previously written spectrum map.
    Fit,
    /// Sweep and compare against the single-pulse method.
    Compare,
}

fn load(cli: &Cli) -> anyhow::Result<Experiment> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| ConfigError("--config <path> is required".into()))?;
    let mut exp = Experiment::load(path)?;
    if let Some(m) = &cli.method {
        let method: Method = m
            .parse()
            .map_err(|_| ConfigError(format!("--method: unknown method `{m}` (whgi, iwht or rsgi)")))?;
        exp = exp.with_method(method);
    }
    if let Some(seed) = cli.seed {
        exp = exp.with_seed(seed);
    }
    if let Some(out) = &cli.out {
        exp = exp.with_output_dir(out.clone());
    }
    Ok(exp)
}

fn run(cli: &Cli) -> anyhow::Result<Report> {
    let exp = load(cli)?;
    let opts = RunOptions {
        dump_patterns: cli.dump_patterns,
        compare_oracle: cli.compare_oracle,
    };
    match cli.command {
        Command::Simulate => commands::simulate(&exp, opts),
        Command::Reconstruct => commands::reconstruct(&exp, opts),
        Command::Sweep => commands::sweep(&exp, opts),
        Command::Fit => commands::fit(&exp),
        Command::Compare => commands::compare(&exp, opts),
    }
    .context("run failed")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(report) => {
            for line in &report.lines {
                println!("{line}");
            }
            for file in &report.files {
                println!("wrote {}", file.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ConfigError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}
