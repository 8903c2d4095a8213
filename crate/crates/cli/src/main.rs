use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use gplab::autodiff::OptLevel;
use gplab::harness::{self, CsvRow, RunSpec, Source, SweepGrid};
use gplab::metrics::Task;

#[derive(Parser)]
#[command(name = "gplab", version, about = "Mixed-precision GCN/GAE training laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a graph directory (generated BA graph or a re-serialized one).
    MakeDataset(MakeDataset),
    /// Train once and print the result as a CSV row plus a summary.
    Run(Run),
    /// Run a parameter grid, appending to a resumable CSV.
    Sweep(Sweep),
    /// Build delta tables and curve data from a sweep CSV.
    Report(Report),
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Ba,
    Load,
}

#[derive(Clone, Copy, ValueEnum)]
enum GridName {
    Desk,
    Full,
}

/// `--features` / `--identity` pair; neither means the default.
#[derive(Args, Clone, Copy)]
struct FeatureFlag {
    /// Use random sparse vertex features.
    #[arg(long, conflicts_with = "identity")]
    features: bool,
    /// Use identity features.
    #[arg(long)]
    identity: bool,
}

impl FeatureFlag {
    fn get(self) -> Option<bool> {
        match (self.features, self.identity) {
            (true, _) => Some(true),
            (_, true) => Some(false),
            _ => None,
        }
    }
}

#[derive(Args, Clone, Copy)]
struct PaddingFlag {
    /// Pad the vertex count to a multiple of 8.
    #[arg(long, conflicts_with = "no_padding")]
    padding: bool,
    #[arg(long)]
    no_padding: bool,
}

impl PaddingFlag {
    fn get(self) -> Option<bool> {
        match (self.padding, self.no_padding) {
            (true, _) => Some(true),
            (_, true) => Some(false),
            _ => None,
        }
    }
}

#[derive(Args)]
struct MakeDataset {
    #[arg(long, value_enum, default_value = "ba")]
    kind: Kind,
    /// Vertex count for `ba`.
    #[arg(long, default_value_t = 2048)]
    n: usize,
    /// Source directory for `load`.
    #[arg(long, required_if_eq("kind", "load"))]
    from: Option<PathBuf>,
    #[command(flatten)]
    features: FeatureFlag,
    #[arg(long, env = "GPLAB_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Run {
    #[arg(long, default_value = "classify")]
    task: Task,
    #[arg(long, default_value = "O0")]
    level: OptLevel,
    #[arg(long, default_value_t = 2048)]
    n: usize,
    /// Load this graph directory instead of generating one.
    #[arg(long, conflicts_with = "n")]
    graph: Option<PathBuf>,
    /// Hidden width `d`.
    #[arg(long, alias = "d", default_value_t = 16)]
    model_size: usize,
    #[command(flatten)]
    features: FeatureFlag,
    #[command(flatten)]
    padding: PaddingFlag,
    #[arg(long, env = "GPLAB_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long)]
    memory_budget_bytes: Option<u64>,
    /// Also append the row to this CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Sweep {
    #[arg(long, value_enum, default_value = "desk")]
    grid: GridName,
    /// Comma-separated overrides of the grid axes.
    #[arg(long, value_delimiter = ',')]
    task: Vec<Task>,
    #[arg(long, value_delimiter = ',')]
    level: Vec<OptLevel>,
    #[arg(long, value_delimiter = ',')]
    n: Vec<usize>,
    #[arg(long, value_delimiter = ',', alias = "d")]
    model_size: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    seed: Vec<u64>,
    #[command(flatten)]
    features: FeatureFlag,
    #[command(flatten)]
    padding: PaddingFlag,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    memory_budget_bytes: Option<u64>,
    /// Worker threads.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Report {
    /// Sweep CSV to summarize.
    csv: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn make_dataset(args: MakeDataset) -> Result<()> {
    let source = match args.kind {
        Kind::Ba => Source::Ba {
            n: args.n,
            features: args.features.get().unwrap_or(false),
            seed: args.seed,
        },
        Kind::Load => Source::Dir(args.from.context("--from is required with --kind load")?),
    };
    let g = harness::make_dataset(&source, &args.out)?;
    println!(
        "wrote {} ({} vertices, {} edges)",
        args.out.display(),
        g.n(),
        g.edge_count()
    );
    Ok(())
}

fn run(args: Run) -> Result<()> {
    let source = match args.graph {
        Some(dir) => Source::Dir(dir),
        None => Source::Ba {
            n: args.n,
            features: args.features.get().unwrap_or(false),
            seed: args.seed,
        },
    };
    let spec = RunSpec {
        task: args.task,
        level: args.level,
        source,
        model_size: args.model_size,
        padding: args.padding.get().unwrap_or(true),
        seed: args.seed,
        epochs: args.epochs,
        memory_budget: args.memory_budget_bytes,
    };
    let record = harness::run_single(&spec)?;
    let mut out = std::io::stdout().lock();
    out.write_all(&CsvRow::header())?;
    out.write_all(&CsvRow::from(&record).to_line()?)?;
    eprint!("{}", harness::describe(&record));
    if let Some(path) = args.out {
        harness::append_record(&path, &record)?;
    }
    Ok(())
}

fn sweep(args: Sweep) -> Result<()> {
    let mut grid = match args.grid {
        GridName::Desk => SweepGrid::desk(),
        GridName::Full => SweepGrid::full(),
    };
    if !args.task.is_empty() {
        grid.tasks = args.task;
    }
    if !args.level.is_empty() {
        grid.levels = args.level;
    }
    if !args.n.is_empty() {
        grid.vertex_counts = args.n;
    }
    if !args.model_size.is_empty() {
        grid.model_sizes = args.model_size;
    }
    if !args.seed.is_empty() {
        grid.seeds = args.seed;
    }
    if let Some(f) = args.features.get() {
        grid.use_features = vec![f];
    }
    if let Some(p) = args.padding.get() {
        grid.padding = vec![p];
    }
    if let Some(e) = args.epochs {
        grid.epochs = e;
    }
    if args.memory_budget_bytes.is_some() {
        grid.memory_budget_bytes = args.memory_budget_bytes;
    }
    let total = grid.cardinality();
    let mut done = 0usize;
    let outcome = harness::run_sweep(&grid, &args.out, args.jobs, |r| {
        done += 1;
        eprintln!(
            "[{done}] {} {} n={} d={} features={} seed={} wall_ms={:.0}{}",
            r.task,
            r.level,
            r.n,
            r.d,
            r.features,
            r.seed,
            r.wall_ms,
            if r.oom { " OOM" } else { "" }
        );
    })?;
    println!(
        "{}: {} rows written, {} resumed, {} in grid",
        args.out.display(),
        outcome.written.len(),
        outcome.resumed,
        total
    );
    Ok(())
}

fn report(args: Report) -> Result<()> {
    if !args.csv.exists() {
        bail!("{}: no such file", args.csv.display());
    }
    let files = harness::report(&args.csv, &args.out)?;
    for p in [
        &files.delta_table,
        &files.delta_summary,
        &files.speedup_table,
        &files.curves_full,
        &files.curves_by_n,
        &files.curves_by_d,
    ] {
        println!("{}", p.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::MakeDataset(a) => make_dataset(a),
        Command::Run(a) => run(a),
        Command::Sweep(a) => sweep(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
