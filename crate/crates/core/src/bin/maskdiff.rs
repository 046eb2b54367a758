use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use maskdiff::bench::{cmd_bench, cmd_sample, cmd_sweep, ExperimentConfig, RunOptions};
use maskdiff::validate::{run_all, ValidateOptions};
use maskdiff::Error;

/// Masked diffusion samplers on the sticky Markov-chain task.
#[derive(Parser)]
#[command(name = "maskdiff", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; built-in defaults when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (the MASKDIFF_OUT_DIR variable takes precedence)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed, overriding the config
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: all cores)
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Run every self-check and print one line per check
    Validate {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Sequences in the one-at-a-time zero-error check
        #[arg(long, default_value_t = 1000)]
        sequences: usize,
    },
    /// Error-rate table over the sampler grid
    Bench(Common),
    /// Full grid plus the best cell per sampler and budget
    Sweep(Common),
    /// Draw sequences as JSON lines
    Sample {
        #[command(flatten)]
        common: Common,
        /// Number of sequences, overriding the config
        #[arg(long)]
        n: Option<usize>,
        /// Attach one record per denoiser evaluation
        #[arg(long)]
        trace: bool,
    },
}

fn load(common: &Common) -> maskdiff::Result<(ExperimentConfig, PathBuf, RunOptions)> {
    let mut config = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &common.out {
        config.run.out_dir = out.clone();
    }
    let out_dir = config.out_dir();
    Ok((config, out_dir, RunOptions { seed: common.seed, jobs: common.jobs }))
}

fn run(cli: Cli) -> maskdiff::Result<bool> {
    match cli.command {
        Command::Validate { seed, sequences } => {
            let reports = run_all(&ValidateOptions { seed, zero_error_sequences: sequences, ..Default::default() });
            for r in &reports {
                println!("{}", r.line());
            }
            Ok(reports.iter().all(|r| r.passed))
        }
        Command::Bench(common) => {
            let (config, out, opts) = load(&common)?;
            let outcome = cmd_bench(&config, &out, opts)?;
            for s in &outcome.summary {
                println!("{:<16} nfe={:<4} err={:.5} se={:.5}", s.sampler.as_str(), s.nfe, s.err_mean, s.err_se);
            }
            eprintln!("wrote {}", out.display());
            Ok(true)
        }
        Command::Sweep(common) => {
            let (config, out, opts) = load(&common)?;
            let outcome = cmd_sweep(&config, &out, opts)?;
            for b in &outcome.best {
                println!(
                    "{:<16} nfe={:<4} k={:?} tau={:?} h_c={:?} err={:.5}",
                    b.sampler.as_str(),
                    b.nfe,
                    b.k,
                    b.tau,
                    b.h_c,
                    b.err_mean
                );
            }
            eprintln!("wrote {}", out.display());
            Ok(true)
        }
        Command::Sample { common, n, trace } => {
            let (mut config, out, opts) = load(&common)?;
            if let Some(n) = n {
                config.sample.n = n;
            }
            let reports = cmd_sample(&config, &out, opts, trace)?;
            eprintln!("wrote {} samples to {}", reports.len(), out.join("samples.jsonl").display());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Domain(_) | Error::Selection { .. } => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
