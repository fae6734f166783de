//! Command-line pipeline: turn a context file into adapter weights and
//! evaluate how much full-context behavior the result recovers.
//!
//! Exit codes: 0 success, 2 configuration error, 3 runtime/model error.
//! Diagnostics go to stderr; results go to files.

mod commands;

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "ctxdistill",
    version,
    about = "Distill a prompt context into low-rank parameter updates of a language model"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Create or pretrain the reference tiny transformer.
    #[command(subcommand)]
    Model(ModelCmd),
    /// Build a transfer set from a context.
    Elicit(ElicitArgs),
    /// Score a transfer set and keep the top-k entries.
    Select(SelectArgs),
    /// Train an adapter on a selected transfer set.
    Consolidate(ConsolidateArgs),
    /// Sequential multi-turn transformation for long contexts.
    Stream(StreamArgs),
    /// Generate a synthetic evaluation task.
    #[command(subcommand)]
    Task(TaskCmd),
    /// Evaluate a task under an experiment condition.
    Eval(EvalArgs),
    /// Render result records as a recovery-rate table.
    Report(ReportArgs),
}

#[derive(Subcommand)]
pub(crate) enum ModelCmd {
    /// Initialize random weights.
    Init(ModelInitArgs),
    /// Pretrain on a synthetic corpus (or a text file).
    Pretrain(ModelPretrainArgs),
}

#[derive(Args)]
pub(crate) struct ModelInitArgs {
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 128)]
    pub dim: usize,
    /// Feed-forward width; defaults to 4x dim.
    #[arg(long)]
    pub ff: Option<usize>,
    #[arg(long, default_value_t = 1024)]
    pub window: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub(crate) struct ModelPretrainArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Text file to train on; omitted = generated synthetic corpus.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1500)]
    pub fact_episodes: usize,
    #[arg(long, default_value_t = 1500)]
    pub icl_episodes: usize,
    #[arg(long, default_value_t = 500)]
    pub open_episodes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub(crate) struct ElicitArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub context_file: PathBuf,
    /// Adapter applied to the eliciting model (sequential turns).
    #[arg(long)]
    pub adapter: Option<PathBuf>,
    #[arg(long)]
    pub n_qa: Option<usize>,
    #[arg(long)]
    pub n_open: Option<usize>,
    #[arg(long)]
    pub entry_length: Option<usize>,
    #[arg(long)]
    pub queries_per_prompt: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    /// prompted | synthesized
    #[arg(long)]
    pub query_mode: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// JSON file with an elicitation config; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub(crate) struct SelectArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub transfer_set: PathBuf,
    /// Adapter defining the current student (sequential turns).
    #[arg(long)]
    pub adapter: Option<PathBuf>,
    /// ppl | kl | random
    #[arg(long)]
    pub strategy: Option<String>,
    #[arg(long)]
    pub k: Option<usize>,
    /// Divide the log-probability gap by response length.
    #[arg(long)]
    pub length_normalized: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub(crate) struct ConsolidateArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Scored-set file from `select`.
    #[arg(long)]
    pub selected: PathBuf,
    /// Continue training from this adapter checkpoint.
    #[arg(long)]
    pub prior_adapter: Option<PathBuf>,
    /// fkl | rkl | akl | dpkd | mse | seqkd
    #[arg(long)]
    pub loss: Option<String>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Comma-separated target matrices (attn_q,attn_v,attn_k,attn_o,mlp_up,mlp_down).
    #[arg(long)]
    pub targets: Option<String>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// sgd | adam
    #[arg(long)]
    pub optimizer: Option<String>,
    #[arg(long)]
    pub cache_teacher: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub(crate) struct StreamArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub context_file: PathBuf,
    #[arg(long)]
    pub chunk_length: Option<usize>,
    #[arg(long)]
    pub retention_ratio: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// JSON file with a full stream config; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Subcommand)]
pub(crate) enum TaskCmd {
    /// Entity-attribute document with cloze probes.
    FactRecall(TaskFactArgs),
    /// Label-mapping shots with held-out probes.
    ManyshotIcl(TaskIclArgs),
    /// Counterfactual edits with 1- or 2-hop probes.
    KnowledgeUpdate(TaskKuArgs),
    /// Context/continuation slice of a corpus file.
    TextGeneration(TaskTgArgs),
}

#[derive(Args)]
pub(crate) struct TaskFactArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub n_facts: usize,
    #[arg(long, default_value_t = 10)]
    pub n_probes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub(crate) struct TaskIclArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub n_classes: usize,
    #[arg(long, default_value_t = 300)]
    pub n_shots: usize,
    #[arg(long, default_value_t = 10)]
    pub n_probes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub(crate) struct TaskKuArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub n_edits: usize,
    #[arg(long, default_value_t = 1)]
    pub hops: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub(crate) struct TaskTgArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub(crate) struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub task_spec: PathBuf,
    /// full | none | local | consolidated
    #[arg(long)]
    pub condition: String,
    #[arg(long)]
    pub rho: Option<f64>,
    /// Adapter checkpoint (required for the consolidated condition).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub(crate) struct ReportArgs {
    /// Result files (JSONL records).
    #[arg(long, required = true, num_args = 1..)]
    pub results: Vec<PathBuf>,
    /// table | machine
    #[arg(long, default_value = "table")]
    pub format: String,
    /// Write here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Model(ModelCmd::Init(a)) => commands::model_init(a),
        Command::Model(ModelCmd::Pretrain(a)) => commands::model_pretrain(a),
        Command::Elicit(a) => commands::elicit(a),
        Command::Select(a) => commands::select(a),
        Command::Consolidate(a) => commands::consolidate(a),
        Command::Stream(a) => commands::stream(a),
        Command::Task(t) => commands::task(t),
        Command::Eval(a) => commands::eval(a),
        Command::Report(a) => commands::report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
