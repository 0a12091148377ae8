use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

#[derive(Parser, Debug)]
#[command(name = "macfi", version, about = "Fault-injection emulator for an 8x8 int8 MAC array")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Print progress and plan details to stderr.
    #[arg(long, short, global = true)]
    verbose: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Classify dataset samples and report accuracy and throughput.
    Infer(InferArgs),
    /// Run a fault sweep or an exhaustive single-lane heatmap.
    Campaign(CampaignArgs),
    /// Print the execution plan and per-lane statistics.
    Plan(PlanArgs),
    /// Write a bundled model and dataset to disk.
    Fixture(FixtureArgs),
}

#[derive(Args, Debug)]
struct ModelArgs {
    /// Model manifest (JSON).
    #[arg(long)]
    model: PathBuf,
    /// Weight blob referenced by the manifest.
    #[arg(long)]
    weights: PathBuf,
}

/// `off,count` window over the dataset.
#[derive(Debug, Clone, Copy)]
struct SliceArg {
    offset: usize,
    count: usize,
}

fn parse_slice(s: &str) -> Result<SliceArg, String> {
    let (off, count) = s.split_once(',').ok_or("expected `offset,count`")?;
    let offset = off.trim().parse().map_err(|e| format!("offset `{off}`: {e}"))?;
    let count = count.trim().parse().map_err(|e| format!("count `{count}`: {e}"))?;
    Ok(SliceArg { offset, count })
}

#[derive(Args, Debug)]
struct InferArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Dataset file.
    #[arg(long)]
    dataset: PathBuf,
    /// Fault spec file (`unit,lane,mode[,value[,start,len]]` per line).
    #[arg(long)]
    faults: Option<PathBuf>,
    #[arg(long, value_parser = parse_slice, value_name = "OFF,COUNT")]
    slice: Option<SliceArg>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum Mode {
    Sweep,
    Heatmap,
}

#[derive(Args, Debug)]
struct CampaignArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_enum, default_value_t = Mode::Sweep)]
    mode: Mode,
    /// Numbers of simultaneously faulty lanes (sweep mode).
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 4, 16, 64])]
    k: Vec<usize>,
    /// Injected lane-output values; 0 means stuck-at-zero.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true, default_values_t = [0i32, 1, -1])]
    values: Vec<i32>,
    /// Repetitions per (k, value) pair (sweep mode).
    #[arg(long, default_value_t = 10)]
    reps: usize,
    #[arg(long, default_value_t = 2024)]
    seed: u64,
    /// Worker threads [default: available parallelism].
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_parser = parse_slice, value_name = "OFF,COUNT")]
    slice: Option<SliceArg>,
}

#[derive(Args, Debug)]
struct PlanArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Write the dump here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum FixtureKind {
    /// Stripe classifier with a residual block.
    Desk,
    /// Four-channel model that never drives lanes 4..7.
    HalfWidth,
}

#[derive(Args, Debug)]
struct FixtureArgs {
    #[arg(long, value_enum, default_value_t = FixtureKind::Desk)]
    kind: FixtureKind,
    /// Number of dataset samples.
    #[arg(long, default_value_t = 128)]
    samples: usize,
    /// Output directory; receives model.json, weights.bin and dataset.qds.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Infer(a) => commands::infer(&a, cli.verbose),
        Command::Campaign(a) => commands::campaign(&a, cli.verbose),
        Command::Plan(a) => commands::plan(&a, cli.verbose),
        Command::Fixture(a) => commands::fixture(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
