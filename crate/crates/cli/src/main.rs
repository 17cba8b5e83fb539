mod cells;
mod commands;
mod config;
mod fetch;

use std::path::PathBuf;
use std::process::ExitCode;

use catx_core::data::{DatasetName, DATA_ROOT_ENV};
use catx_core::train::Pipeline;
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::RunOpts;

#[derive(Parser, Debug)]
#[command(name = "catx", version, about = "Explainable ViT with causal top-k patch selection")]
pub struct Cli {
    /// Directory holding <dataset>/ raw files
    #[arg(long, global = true, env = DATA_ROOT_ENV)]
    pub data_root: Option<PathBuf>,
    /// Where checkpoints, manifests, the ledger and tables go
    #[arg(long, global = true, default_value = "runs")]
    pub out_dir: PathBuf,
    /// TOML file with [run] and [sweep] tables; flags override it
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Repeat for more detail (-v info, -vv debug)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Download or check raw dataset files
    Data {
        #[command(subcommand)]
        action: DataAction,
    },
    /// Train one model
    Train {
        #[arg(value_enum)]
        pipeline: PipelineArg,
        #[command(flatten)]
        run: RunOpts,
        #[arg(long)]
        frac: Option<f64>,
        #[arg(long)]
        lambda: Option<f64>,
        /// Black-box checkpoint for post-hoc training
        #[arg(long)]
        blackbox: Option<PathBuf>,
        /// Retrain even if the run already exists
        #[arg(long)]
        force: bool,
    },
    /// Train and evaluate the black-box, post-hoc and expViT grid
    Sweep {
        #[command(flatten)]
        run: RunOpts,
        #[arg(long, value_delimiter = ',')]
        fracs: Option<Vec<f64>>,
        /// λ values tried at every frac; by default one tuned λ per frac
        #[arg(long, value_delimiter = ',')]
        lambdas: Option<Vec<f64>>,
        #[arg(long)]
        force: bool,
    },
    /// Evaluate a trained selector (post-hoc or expViT) on the test split
    Eval(EvalArgs),
    /// Render result tables from the ledger
    Report {
        /// Datasets to tabulate; all with ledger rows by default
        #[arg(long, value_delimiter = ',')]
        dataset: Option<Vec<DatasetName>>,
        #[arg(long, value_enum, default_value_t = Format::Both)]
        format: Format,
        #[arg(long, value_delimiter = ',')]
        fracs: Option<Vec<f64>>,
        /// Ledger path; defaults to <out-dir>/ledger.jsonl
        #[arg(long)]
        ledger: Option<PathBuf>,
    },
    /// Overlay the selected patches of one image for several fracs
    Explain(ExplainArgs),
    /// Print the resolved configuration and model size
    Describe {
        #[arg(value_enum, default_value_t = PipelineArg::Expvit)]
        pipeline: PipelineArg,
        #[command(flatten)]
        run: RunOpts,
        #[arg(long)]
        frac: Option<f64>,
        #[arg(long)]
        lambda: Option<f64>,
    },
}

#[derive(Subcommand, Debug)]
pub enum DataAction {
    Fetch {
        #[arg(long)]
        dataset: DatasetName,
        /// Base URL replacing the default download location
        #[arg(long)]
        mirror: Option<String>,
    },
    Verify {
        #[arg(long)]
        dataset: DatasetName,
        /// Record the current checksums in SHA256SUMS
        #[arg(long)]
        write_checksums: bool,
    },
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Scorer for a post-hoc selector; defaults to the one its manifest names
    #[arg(long)]
    pub blackbox: Option<PathBuf>,
    /// Defaults to the frac the model was trained with
    #[arg(long)]
    pub frac: Option<f64>,
    #[arg(long)]
    pub seed_eval: Option<u64>,
    /// Dataset, when the checkpoint has no run manifest next to it
    #[arg(long)]
    pub dataset: Option<DatasetName>,
    /// Print the metrics without appending to the ledger
    #[arg(long)]
    pub no_ledger: bool,
}

#[derive(Args, Debug)]
pub struct ExplainArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Image file whose size matches the model input
    #[arg(long, conflicts_with = "test_index", required_unless_present = "test_index")]
    pub image: Option<PathBuf>,
    /// Position in the filtered test split
    #[arg(long)]
    pub test_index: Option<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0.05,0.1,0.25,0.5")]
    pub fracs: Vec<f64>,
    #[arg(long, default_value = "explain")]
    pub out: PathBuf,
    /// Black out unselected patches instead of dimming them
    #[arg(long)]
    pub hard_black: bool,
    /// Outline the patch grid
    #[arg(long)]
    pub grid: bool,
    #[arg(long)]
    pub dataset: Option<DatasetName>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum PipelineArg {
    Blackbox,
    Posthoc,
    Expvit,
}

impl From<PipelineArg> for Pipeline {
    fn from(p: PipelineArg) -> Self {
        match p {
            PipelineArg::Blackbox => Pipeline::Blackbox,
            PipelineArg::Posthoc => Pipeline::Posthoc,
            PipelineArg::Expvit => Pipeline::Expvit,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Csv,
    Markdown,
    Both,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match commands::run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
