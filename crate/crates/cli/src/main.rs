use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kinojgm_cli::{cmd_gp_train, cmd_plot, cmd_search_bench, cmd_tracking_bench, parse_seeds, Common};

#[derive(Parser)]
#[command(name = "kinojgm", version, about = "Route search and tracking benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Scenario TOML file; built-in defaults when omitted.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Seeds, e.g. `0..20` or `1,4,7`; overrides the scenario list.
    #[arg(long)]
    seeds: Option<String>,
    /// Worker threads.
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Kino-JSS vs baseline route search over the obstacle counts.
    SearchBench(CommonArgs),
    /// Closed-loop tracking over disturbances and methods.
    TrackingBench {
        #[command(flatten)]
        common: CommonArgs,
        /// Also write one trace CSV per episode.
        #[arg(long)]
        traces: bool,
    },
    /// Excitation flight, GP fit and held-out report.
    GpTrain(CommonArgs),
    /// SVG plots from a trace CSV.
    Plot {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long, default_value = "plots")]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> anyhow::Result<Vec<PathBuf>> {
    let common = |a: &CommonArgs| -> anyhow::Result<(Option<Vec<u64>>, usize)> {
        let seeds = a.seeds.as_deref().map(parse_seeds).transpose()?;
        let workers = a
            .workers
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
        if workers == 0 {
            anyhow::bail!("--workers must be positive");
        }
        Ok((seeds, workers))
    };
    match &cli.command {
        Command::SearchBench(a) => {
            let (seeds, workers) = common(a)?;
            cmd_search_bench(&Common { scenario: a.scenario.as_deref(), seeds, workers, out: &a.out })
        }
        Command::TrackingBench { common: a, traces } => {
            let (seeds, workers) = common(a)?;
            cmd_tracking_bench(&Common { scenario: a.scenario.as_deref(), seeds, workers, out: &a.out }, *traces)
        }
        Command::GpTrain(a) => {
            let (seeds, workers) = common(a)?;
            cmd_gp_train(&Common { scenario: a.scenario.as_deref(), seeds, workers, out: &a.out })
        }
        Command::Plot { trace, out } => cmd_plot(trace, out),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(files) => {
            for f in files {
                println!("{}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
