use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Parser, Subcommand};

mod commands;
mod manifest;

#[derive(Parser)]
#[command(name = "motion4d", version, about = "Respiratory motion models from unsorted 4DCT segments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a default phantom spec, schedule and fit config.
    Defaults {
        #[arg(long)]
        out: PathBuf,
        /// Use the small 48x40x24 phantom.
        #[arg(long)]
        reduced: bool,
    },
    /// Simulate a cine acquisition of the phantom.
    Simulate {
        #[arg(long)]
        spec: PathBuf,
        /// Defaults to 6-slice couch positions with equal dwell.
        #[arg(long)]
        schedule: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit reference image, motion model and surrogates.
    Fit {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare a fitted result and the sorted baseline with ground truth.
    Evaluate {
        #[arg(long)]
        result: PathBuf,
        /// Simulation directory holding spec.json.
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Evaluate every n-th timepoint.
        #[arg(long, default_value_t = 1)]
        stride: usize,
    },
    /// Export frames and the extreme end-inhale pair.
    Export {
        #[arg(long)]
        result: PathBuf,
        /// Comma-separated timepoints, may be empty.
        #[arg(long, default_value = "")]
        timepoints: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_timepoints(s: &str) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.parse() {
            Ok(t) => out.push(t),
            Err(_) => bail!(motion4d::Error::Argument(format!("bad timepoint {part:?}"))),
        }
    }
    Ok(out)
}

fn init_threads() -> Result<()> {
    let n = match std::env::var("MOTION4D_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|_| motion4d::Error::Config(format!("MOTION4D_THREADS must be a number, got {v:?}")))?,
        Err(_) => 0,
    };
    if n > 0 {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    match cli.command {
        Command::Defaults { out, reduced } => commands::defaults(&out, reduced),
        Command::Simulate { spec, schedule, out } => commands::simulate(&spec, schedule.as_deref(), &out),
        Command::Fit { config, data, out } => commands::fit(&config, &data, &out),
        Command::Evaluate { result, gt, out, stride } => commands::evaluate(&result, &gt, &out, stride),
        Command::Export { result, timepoints, out } => commands::export(&result, &parse_timepoints(&timepoints)?, &out),
    }
}

/// 2 configuration, 3 data or format, 4 numerical.
fn exit_code(err: &anyhow::Error) -> u8 {
    use motion4d::Error as E;
    match err.chain().find_map(|e| e.downcast_ref::<E>()) {
        Some(E::Config(_) | E::Argument(_) | E::Spec(_) | E::Schedule(_) | E::Range(_)) => 2,
        Some(E::Numerical(_) | E::DegenerateSignal(_)) => 4,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
