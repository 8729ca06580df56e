use ate_universe::harness::{self, HarnessError, RunPlan, RunSummary};
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "ate-universe", version, about = "Benchmark ATE estimators over sampled data-generating processes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run plan (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides the plan's `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = default_workers())]
    workers: usize,
    /// Skip records already present in the estimates file.
    #[arg(long)]
    resume: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Sample and store every DGP.
    SampleDgps(Common),
    /// Simulate datasets and run the estimators.
    Simulate(Common),
    /// Aggregate estimates into per-DGP metrics.
    Summarize(Common),
    /// Reliability curves, coverage tables and plots from the summaries.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
    /// All stages in order.
    Run(Common),
}

fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn load(c: &Common) -> Result<(RunPlan, PathBuf), HarnessError> {
    let plan = RunPlan::load(&c.config)?;
    let out = c.out.clone().unwrap_or_else(|| plan.output_dir.clone());
    Ok((plan, out))
}

fn finish(summary: RunSummary) -> Result<i32, HarnessError> {
    println!("{}", serde_json::to_string(&summary).expect("summary serializes"));
    Ok(summary.exit_code())
}

fn dispatch(cli: Cli) -> Result<i32, HarnessError> {
    match cli.command {
        Command::SampleDgps(c) => {
            let (plan, out) = load(&c)?;
            finish(harness::sample_dgps(&plan, &out, c.workers)?)
        }
        Command::Simulate(c) => {
            let (plan, out) = load(&c)?;
            finish(harness::simulate(&plan, &out, c.workers, c.resume)?)
        }
        Command::Summarize(c) => {
            let (plan, out) = load(&c)?;
            let rows = harness::summarize(&plan, &out)?;
            println!("{} metric rows written to {}", rows.len(), harness::metrics_path(&out).display());
            Ok(0)
        }
        Command::Report { out } => {
            let files = harness::report(&out)?;
            println!("{} report files written to {}", files.len(), out.join(harness::REPORT_DIR).display());
            Ok(0)
        }
        Command::Run(c) => {
            let (plan, out) = load(&c)?;
            finish(harness::run(&plan, &out, c.workers, c.resume)?)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(Cli::parse()) {
        Ok(code) => ExitCode::from(code as u8),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
