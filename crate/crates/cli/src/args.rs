use clap::{Args, Parser, Subcommand, ValueEnum};
use std::net::SocketAddr;
use std::path::PathBuf;

#[derive(Debug, Parser)]
#[command(name = "cbqa", version, about = "Closed-book question answering laboratory")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// JSON settings file, one object per subcommand name; flags take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Built-in defaults: desk-scale, or the published training sizes.
    #[arg(long, global = true, value_enum, default_value_t = Preset::Desk)]
    pub preset: Preset,

    /// Worker threads for decoding and the HTTP server.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u16).range(1..))]
    pub threads: u16,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Desk,
    Paper,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a byte-level BPE vocabulary.
    BuildVocab(BuildVocabArgs),
    /// Emit span-corruption pairs for a corpus.
    Corrupt(CorruptArgs),
    /// Mine salient sentences and emit one masked pair per sentence.
    MineSsm(MineSsmArgs),
    /// Pre-train (or continue pre-training) with span corruption or salient span masking.
    Pretrain(PretrainArgs),
    /// Fine-tune on one task or a task mixture with held-out checkpoint selection.
    Finetune(FinetuneArgs),
    /// Greedy-decode answers for a QA dataset.
    Decode(DecodeArgs),
    /// Score predictions by exact match or multi-answer recall.
    Evaluate(EvaluateArgs),
    /// Alternate pre-training blocks with fine-tuning probes for both objectives.
    CompareObjectives(CompareArgs),
    /// Sample, export or import human false-negative labels.
    #[command(subcommand)]
    Audit(AuditCommand),
    /// Serve the labeling API over an audit journal.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct BuildVocabArgs {
    /// Corpus JSONL files ({"doc_id","text"}).
    #[arg(long, required = true)]
    pub corpus: Vec<PathBuf>,
    /// QA datasets whose questions and answers join the training text, as NAME=PATH.
    #[arg(long)]
    pub qa: Vec<String>,
    /// Vocabulary size including pad, eos and sentinels.
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub sentinels: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CorruptArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub mask_rate: Option<f64>,
    /// Tokens per document chunk.
    #[arg(long)]
    pub chunk_len: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MineSsmArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// Pre-annotated spans JSONL; replaces the rule tagger.
    #[arg(long)]
    pub spans: Option<PathBuf>,
    /// Minimum sentence length in bytes.
    #[arg(long)]
    pub min_len: Option<usize>,
    /// Maximum sentence length in bytes.
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Start from this checkpoint's parameters (optimizer state is reset).
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Continue a run from one of its own checkpoints.
    #[arg(long, conflicts_with = "init")]
    pub resume: Option<PathBuf>,
    /// JSON model config for a fresh model (default: desk size for the vocabulary).
    #[arg(long, conflicts_with_all = ["init", "resume"])]
    pub model_config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub steps: Option<u64>,
    /// Token budget per batch (inputs plus targets).
    #[arg(long)]
    pub batch_tokens: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long, value_parser = ["sc", "ssm"])]
    pub objective: String,
    #[arg(long)]
    pub spans: Option<PathBuf>,
    #[arg(long)]
    pub mask_rate: Option<f64>,
    #[arg(long)]
    pub chunk_len: Option<usize>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    /// Task as NAME[:MODE]=PATH with NAME in nq|wq|tqa and MODE in first|all|random.
    #[arg(long, required = true)]
    pub task: Vec<String>,
    #[arg(long)]
    pub vocab: PathBuf,
    /// Comma-separated mixture rates, one per task (default: proportional to size).
    #[arg(long)]
    pub weights: Option<String>,
    /// Train WebQuestions with the same batch and dropout as the other tasks.
    #[arg(long)]
    pub no_task_overrides: bool,
    #[arg(long)]
    pub decode_max_len: Option<usize>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Task whose prefix precedes each question.
    #[arg(long, value_parser = ["nq", "wq", "tqa"])]
    pub task: String,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long, value_parser = ["em", "recall"])]
    pub mode: String,
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, value_parser = ["nq", "wq", "tqa"], default_value = "nq")]
    pub dataset_name: String,
    /// Report JSON (default: next to the predictions).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// Probe task as NAME[:MODE]=PATH; repeat for a mixture.
    #[arg(long, required = true)]
    pub task: Vec<String>,
    #[arg(long)]
    pub spans: Option<PathBuf>,
    #[arg(long)]
    pub blocks: Option<usize>,
    #[arg(long)]
    pub pretrain_block: Option<u64>,
    #[arg(long)]
    pub finetune_steps: Option<u64>,
    #[arg(long)]
    pub batch_tokens: Option<usize>,
    #[arg(long)]
    pub probe_batch_tokens: Option<usize>,
    #[arg(long)]
    pub probe_checkpoint_every: Option<u64>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub mask_rate: Option<f64>,
    #[arg(long)]
    pub chunk_len: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long, conflicts_with = "init")]
    pub model_config: Option<PathBuf>,
    /// CSV table objective,pretrain_step,max_val_em.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum AuditCommand {
    /// Sample unmatched predictions into a new audit journal.
    Sample(AuditSampleArgs),
    /// Write the journal's records as TSV.
    Export(AuditExportArgs),
    /// Create a journal from an exported TSV.
    Import(AuditImportArgs),
}

#[derive(Debug, Args)]
pub struct AuditSampleArgs {
    /// Report JSON written by `evaluate`.
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, value_parser = ["nq", "wq", "tqa"], default_value = "nq")]
    pub dataset_name: String,
    #[arg(long)]
    pub sample_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub journal: PathBuf,
}

#[derive(Debug, Args)]
pub struct AuditExportArgs {
    #[arg(long)]
    pub journal: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AuditImportArgs {
    #[arg(long)]
    pub tsv: PathBuf,
    #[arg(long)]
    pub base_correct: usize,
    #[arg(long)]
    pub base_total: usize,
    #[arg(long)]
    pub journal: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub journal: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
}
