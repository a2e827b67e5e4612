use clap::{Args, Parser, Subcommand};
use seqlora_cli::config::Overrides;
use seqlora_cli::{commands, run};
use seqlora_core::strategies::StrategyKind;
use std::path::PathBuf;

/// Continual low-rank adapter toolkit: run strategy sweeps on the linear
/// testbed, merge adapter files, recompute metrics, inspect adapters.
#[derive(Parser)]
#[command(name = "seqlora", version, about)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the sweep: strategies x task orderings x run seeds.
    Run(RunArgs),
    /// Apply adapter files to base weights and write merged weights.
    Merge(MergeArgs),
    /// Recompute average score / forgetting from a scores.csv.
    Metrics(MetricsArgs),
    /// Print tensor shapes, norms, rank estimates and metadata of an
    /// adapter file.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Flat JSON config; flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated subset of naive,merge_init,merge_orth,magmax.
    #[arg(long, value_delimiter = ',')]
    strategies: Option<Vec<String>>,
    /// Worker pool size (default: available cores).
    #[arg(long)]
    jobs: Option<usize>,
    /// Output directory (default: results).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Task alignment override, in [0, 1].
    #[arg(long)]
    rho: Option<f64>,
    /// Task count override.
    #[arg(long)]
    tasks: Option<usize>,
    /// Print the fully-resolved config as JSON and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Args)]
struct MergeArgs {
    /// Base weights file.
    base: PathBuf,
    /// Adapter files, applied in order.
    adapters: Vec<PathBuf>,
    /// naive | merge_init | merge_orth (sequential sum) or magmax
    /// (largest-magnitude selection).
    #[arg(long, default_value = "merge_init")]
    strategy: StrategyKind,
    /// Output weights file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MetricsArgs {
    /// Heatmap CSV (task_j,after_k,score).
    scores_csv: PathBuf,
    /// Matrix size T.
    #[arg(long = "T", visible_alias = "tasks")]
    t: usize,
}

#[derive(Args)]
struct InspectArgs {
    /// Adapter file to describe.
    adapter: PathBuf,
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Run(a) => run::cmd_run(
            a.config,
            Overrides {
                strategies: a.strategies,
                out: a.out,
                seed: a.seed,
                rho: a.rho,
                tasks: a.tasks,
            },
            a.jobs,
            a.print_config,
        ),
        Cmd::Merge(a) => commands::cmd_merge(&a.base, &a.adapters, a.strategy, &a.out),
        Cmd::Metrics(a) => commands::cmd_metrics(&a.scores_csv, a.t),
        Cmd::Inspect(a) => commands::cmd_inspect(&a.adapter),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
