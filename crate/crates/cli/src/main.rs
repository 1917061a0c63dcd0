use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod workdir;

#[derive(Parser)]
#[command(name = "partfit", version, about = "Context-based part retrieval for point-cloud objects")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct Global {
    /// Directory holding every artifact of one run.
    #[arg(long, global = true, env = "PARTFIT_WORKDIR", default_value = "partfit-work")]
    pub workdir: PathBuf,
    /// Desk config as TOML or JSON; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; defaults to one per CPU.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate the synthetic raw corpus.
    GenData,
    /// Split groups into parts, normalize and write the dataset.
    Prepare,
    /// Train the part encoder (stage 1).
    TrainEncoder,
    /// Train the relation network on the frozen encoder (stage 2).
    TrainRelnet,
    /// Encode every warehouse part into the index.
    BuildIndex,
    /// Rank warehouse parts for one query.
    Retrieve(RetrieveArgs),
    /// Replay two-slot sessions on held-out objects.
    SessionReplay,
    /// Compare against the chamfer and encoder baselines and compute the desk metrics.
    Eval,
    /// Serve the session API.
    Serve(ServeArgs),
    /// Run the built-in numerical checks.
    Selftest(SelftestArgs),
}

#[derive(Args)]
pub struct RetrieveArgs {
    /// Dataset object to query with some parts removed.
    #[arg(long, conflicts_with = "query", requires = "remove")]
    pub object: Option<String>,
    /// Position of a part to remove; repeat for more slots.
    #[arg(long)]
    pub remove: Vec<usize>,
    /// JSON query: `{class, parts: [{points, label?}], slots: [{centroid, axis?, scale?}]}`.
    #[arg(long, required_unless_present = "object")]
    pub query: Option<PathBuf>,
    #[arg(long, short, default_value_t = 10)]
    pub k: usize,
    /// Write the ranking here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct ServeArgs {
    #[arg(long, env = "PARTFIT_LISTEN", default_value = "127.0.0.1:8080")]
    pub listen: SocketAddr,
    #[arg(long, default_value_t = 100)]
    pub max_k: usize,
}

#[derive(Args)]
pub struct SelftestArgs {
    #[arg(long, default_value_t = 100)]
    pub gradient_trials: usize,
    #[arg(long, default_value_t = 50)]
    pub invariance_cases: usize,
    #[arg(long, default_value_t = 200)]
    pub dbscan_instances: usize,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match commands::run(&cli.global, cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let category = commands::category(&e);
            let line = serde_json::json!({ "error": category, "message": format!("{e:#}") });
            eprintln!("{line}");
            ExitCode::from(if category == "usage" { 2 } else { 1 })
        }
    }
}
