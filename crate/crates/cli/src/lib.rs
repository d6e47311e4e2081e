//! Command-line harness: latency/memory benchmark, verification suites and
//! toy training, all with CSV or line-oriented output.

pub mod bench;
pub mod train;
pub mod verify;

use std::ffi::OsString;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use streamvit::attention::AttentionMode;
use streamvit::engine::EngineConfig;
use streamvit::numerics::with_intra_op_threads;
use streamvit::Error;

use crate::bench::{run_bench, BenchSpec, BENCH_VERIFY_TOL};
use crate::verify::{run_suite, Suite, VerifyOptions};

/// Process exit codes.
pub mod exit {
    pub const SUCCESS: i32 = 0;
    pub const VERIFY_FAILED: i32 = 1;
    pub const USAGE: i32 = 2;
    pub const CAPACITY: i32 = 3;
    pub const NUMERIC: i32 = 4;
}

/// Caps the intra-op thread count of every subcommand.
pub const THREADS_ENV: &str = "OMNISTREAM_THREADS";

#[derive(Debug, Parser)]
#[command(name = "streamvit", version, about = "Streaming video transformer harness")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Time frame T given T-1 frames of history, cached versus recomputed.
    Bench(BenchArgs),
    /// Run a property suite and report PASS/FAIL per property.
    Verify(VerifyArgs),
    /// Train the toy multi-task model and write its loss curve.
    TrainToy(TrainArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Cache,
    Recompute,
    Both,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Context lengths to measure, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = [16usize, 32, 64, 128, 256])]
    pub frames: Vec<usize>,
    /// Patch grid per frame.
    #[arg(long, num_args = 2, value_names = ["H", "W"], default_values_t = [14usize, 14])]
    pub grid: Vec<usize>,
    #[arg(long, default_value_t = 256)]
    pub dim: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 4)]
    pub layers: usize,
    #[arg(long, value_enum, default_value_t = ModeArg::Both)]
    pub mode: ModeArg,
    /// Minimum timed repetitions per row; cheap rows take more samples and
    /// each mode also runs one discarded warmup.
    #[arg(long, default_value_t = 3)]
    pub reps: usize,
    /// Write CSV here instead of standard output.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Check cached outputs against the full forward while timing.
    #[arg(long)]
    pub verify_during_bench: bool,
    /// Intra-op threads; the default of 1 keeps timings comparable.
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(value_enum)]
    pub suite: Suite,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub trials: Option<usize>,
    /// Negative control for the causality suite: attend to future frames.
    #[arg(long, hide = true)]
    pub inject_leak: bool,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, default_value_t = 200)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// JSON engine config; the built-in toy config when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Write CSV here instead of standard output.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

/// Exit code for an engine error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Capacity { .. } => exit::CAPACITY,
        Error::NonFinite(_) => exit::NUMERIC,
        Error::Config(_) | Error::Io(_) | Error::Checkpoint(_) | Error::Image(_) => exit::USAGE,
        _ => exit::VERIFY_FAILED,
    }
}

fn thread_cap() -> Result<Option<usize>, String> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .map(Some)
            .ok_or_else(|| format!("{THREADS_ENV} must be a positive integer, got `{v}`")),
    }
}

fn output(path: &Option<PathBuf>) -> io::Result<Box<dyn Write + Send>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(io::stdout()),
    })
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { exit::USAGE } else { exit::SUCCESS };
        }
    };
    let cap = match thread_cap() {
        Ok(c) => c,
        Err(msg) => {
            eprintln!("error: {msg}");
            return exit::USAGE;
        }
    };
    let threads = |requested: usize| cap.map_or(requested, |c| requested.min(c));
    let result = match cli.command {
        Command::Bench(a) => {
            let t = threads(a.threads);
            with_intra_op_threads(t, || cmd_bench(a))
        }
        Command::Verify(a) => {
            let t = threads(a.threads);
            with_intra_op_threads(t, || cmd_verify(a))
        }
        Command::TrainToy(a) => cmd_train(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn cmd_bench(a: BenchArgs) -> streamvit::Result<i32> {
    let modes = match a.mode {
        ModeArg::Cache => vec![AttentionMode::Cache],
        ModeArg::Recompute => vec![AttentionMode::Recompute],
        ModeArg::Both => vec![AttentionMode::Cache, AttentionMode::Recompute],
    };
    let spec = BenchSpec {
        frames: a.frames,
        grid_h: a.grid[0],
        grid_w: a.grid[1],
        dim: a.dim,
        heads: a.heads,
        layers: a.layers,
        modes,
        reps: a.reps,
        seed: a.seed,
        verify: a.verify_during_bench,
    };
    spec.validate()?;
    let mut out = output(&a.csv)?;
    writeln!(out, "{}", bench::CSV_HEADER)?;
    out.flush()?;
    let mut failed = false;
    run_bench(&spec, |r| {
        writeln!(out, "{}", r.csv_row())?;
        out.flush()?;
        if let Some(dev) = r.max_deviation {
            if !(dev < BENCH_VERIFY_TOL) {
                eprintln!("FAIL equivalence at T={}: max|Δ|={dev:e} (tol {BENCH_VERIFY_TOL:e})", r.t);
                failed = true;
            }
        }
        Ok(())
    })?;
    Ok(if failed { exit::VERIFY_FAILED } else { exit::SUCCESS })
}

fn cmd_verify(a: VerifyArgs) -> streamvit::Result<i32> {
    let opts = VerifyOptions {
        seed: a.seed,
        trials: a.trials,
        inject_leak: a.inject_leak,
    };
    let props = run_suite(a.suite, &opts)?;
    let mut all = true;
    for p in &props {
        println!("{}/{p}", a.suite.name());
        all &= p.passed();
    }
    Ok(if all { exit::SUCCESS } else { exit::VERIFY_FAILED })
}

fn cmd_train(a: TrainArgs) -> streamvit::Result<i32> {
    let config = match &a.config {
        Some(p) => EngineConfig::load(p)?,
        None => EngineConfig::default(),
    };
    let mut out = output(&a.csv)?;
    train::train_to_csv(a.steps, a.seed, &config, &mut *out)?;
    Ok(exit::SUCCESS)
}
