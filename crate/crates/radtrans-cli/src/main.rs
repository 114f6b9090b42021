use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use radtrans::bench::{configure_threads, describe, run_benchmark, BenchmarkConfig};
use radtrans::kernel::{KernelMatrix, KernelSpec};
use radtrans::selftest;

#[derive(Parser)]
#[command(
    name = "radtrans",
    version,
    about = "Certified adaptive radiative transfer solver"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the checkerboard benchmark.
    Run {
        /// `key = value` configuration file.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long)]
        threads: Option<usize>,
        /// Wall-clock limit in seconds.
        #[arg(long)]
        time_limit: Option<f64>,
        /// Output directory for dumps, convergence table and certificate.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the built-in oracle suites.
    Selftest {
        /// Perturb one kernel entry by this amount; the kernel checks must fail.
        #[arg(long)]
        inject_fault: Option<f64>,
        #[arg(long)]
        kernel_level: Option<u8>,
    },
    /// Print the Henyey-Greenstein kernel matrix in wavelet coordinates.
    KernelDump {
        #[arg(long, default_value_t = 0.5)]
        gamma: f64,
        #[arg(long, default_value_t = 5)]
        level: u8,
        #[arg(long, default_value_t = 2)]
        degree: usize,
        /// Entries below this magnitude are omitted.
        #[arg(long, default_value_t = 0.0)]
        min_abs: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Run {
            config,
            epsilon,
            gamma,
            threads,
            time_limit,
            out,
        } => {
            let mut cfg = match &config {
                Some(p) => {
                    BenchmarkConfig::load(p).with_context(|| format!("loading {}", p.display()))?
                }
                None => BenchmarkConfig::default(),
            };
            if let Some(v) = epsilon {
                cfg.epsilon = v;
            }
            if let Some(v) = gamma {
                cfg.gamma = v;
            }
            if let Some(v) = threads {
                cfg.threads = v;
            }
            if time_limit.is_some() {
                cfg.time_limit = time_limit;
            }
            if out.is_some() {
                cfg.output = out;
            }
            configure_threads(cfg.threads)?;
            let run = run_benchmark(&cfg)?;
            print!("{}", describe(&run));
            Ok(run.certificate.terminated)
        }
        Command::Selftest {
            inject_fault,
            kernel_level,
        } => {
            let report = selftest::run(&selftest::Options {
                fault: inject_fault,
                kernel_level,
            })?;
            println!("{report}");
            Ok(report.passed())
        }
        Command::KernelDump {
            gamma,
            level,
            degree,
            min_abs,
            out,
        } => {
            let k = KernelMatrix::assemble(&KernelSpec::henyey_greenstein(gamma)?, degree, level)?;
            let text = k.dump(min_abs);
            match out {
                Some(p) => {
                    std::fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?
                }
                None => print!("{text}"),
            }
            Ok(true)
        }
    }
}
