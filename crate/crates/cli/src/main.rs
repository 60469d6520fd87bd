//! Batch command-line pipeline for desk-scale entity-aware dense retrieval.
//!
//! Subcommands cover the whole flow: synthetic corpus generation, dictionary
//! building, entity embedding, training, indexing, search, evaluation,
//! attention inspection, and the analytical cost report. Every command is
//! deterministic given its flags and seed; outputs are written atomically.
//! Exit codes: 0 success, 1 usage, 2 data, 3 numeric.

mod commands;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "kpr",
    version,
    about = "entity-aware dense passage retrieval",
    args_override_self = true,
    after_help = "A `key = value` file passed as --config <path> supplies defaults for any long \
                  flag of the subcommand; flags given on the command line take precedence."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ActivationArg {
    Sigmoid,
    Softmax,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SigmoidLengthArg {
    /// Bias by all attended rows including the no-op row.
    Rows,
    /// Bias by the number of entity rows only.
    Entities,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SimilarityArg {
    Dot,
    Cosine,
}

/// Toy encoder dimensions shared by training and entity embedding.
#[derive(Args, Clone, Debug)]
pub struct EncoderArgs {
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    #[arg(long, default_value_t = 64)]
    pub tokens: usize,
    #[arg(long, default_value_t = 2)]
    pub heads: usize,
    #[arg(long, default_value_t = 0.1)]
    pub dropout: f64,
    /// Words below this corpus count fall out of the encoder vocabulary.
    #[arg(long, default_value_t = 1)]
    pub min_token_freq: usize,
}

#[derive(Args, Clone, Debug)]
pub struct ModelArgs {
    #[arg(long, value_enum, default_value_t = ActivationArg::Sigmoid)]
    pub activation: ActivationArg,
    #[arg(long, value_enum, default_value_t = SigmoidLengthArg::Rows)]
    pub sigmoid_length: SigmoidLengthArg,
    #[arg(long, value_enum, default_value_t = SimilarityArg::Dot)]
    pub similarity: SimilarityArg,
    /// Defaults to 1.0 for dot similarity and 0.02 for cosine.
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Prefix prepended to every query before encoding.
    #[arg(long)]
    pub instruction: Option<String>,
    /// Skip the entity attention layer; embed with the context token alone.
    #[arg(long, default_value_t = false)]
    pub baseline: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with train and eval splits.
    Synth(SynthArgs),
    /// Build the anchor dictionary from a hyperlink corpus.
    BuildDict(BuildDictArgs),
    /// Compute entity embeddings from the corpus.
    EmbedEntities(EmbedEntitiesArgs),
    /// Train the retriever.
    Train(TrainArgs),
    /// Encode all corpus passages into a search index.
    Index(IndexArgs),
    /// Retrieve the top passages for one query.
    Search(SearchArgs),
    /// Run retrieval evaluation with frequency-binned reporting.
    Eval(EvalArgs),
    /// Report attention weights for one query.
    InspectAttention(InspectArgs),
    /// Analytical cost report for one forward pass.
    Flops(FlopsArgs),
}

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub entities: usize,
    #[arg(long, default_value_t = 50)]
    pub alias_groups: usize,
    #[arg(long, default_value_t = 1)]
    pub passages_per_entity: usize,
    #[arg(long, default_value_t = 200.0)]
    pub zipf_mass: f64,
    #[arg(long, default_value_t = 1.0)]
    pub zipf_exponent: f64,
    #[arg(long, default_value_t = 50)]
    pub heldout: usize,
    #[arg(long, default_value_t = 2)]
    pub queries_per_entity: usize,
    #[arg(long, default_value_t = 0.25)]
    pub alias_query_fraction: f64,
    #[arg(long, default_value_t = 5)]
    pub mentions_per_doc: usize,
    #[arg(long, default_value_t = 11)]
    pub seed: u64,
}

#[derive(Args)]
pub struct BuildDictArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out_dict: PathBuf,
    #[arg(long)]
    pub out_tsv: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    pub lp_threshold: f64,
    #[arg(long, default_value_t = 0.30)]
    pub commonness_threshold: f64,
}

#[derive(Args)]
pub struct EmbedEntitiesArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Reuse a trained checkpoint's encoder; otherwise a fresh encoder is
    /// built from the flags below.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Extra text whose words join the fresh encoder's vocabulary (pass the
    /// training set here to mirror the encoder the trainer will build).
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[command(flatten)]
    pub encoder: EncoderArgs,
    /// Encoder layer to read masked outputs from; defaults to the last.
    #[arg(long)]
    pub layer_index: Option<usize>,
    #[arg(long, default_value_t = 128)]
    pub cap: usize,
    /// Random vectors instead of masked inference.
    #[arg(long, default_value_t = false)]
    pub random: bool,
    #[arg(long, default_value_t = 0.5)]
    pub scale: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub dict: PathBuf,
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Checkpoint base path; writes <out>, <out>.cfg, <out>.vocab.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub encoder: EncoderArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 2e-5)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 40)]
    pub epochs: usize,
    /// Train only the attention layer; encoder parameters stay fixed.
    #[arg(long, default_value_t = false)]
    pub freeze_base: bool,
    /// Rescale the loaded embedding table to this encoder's reference norm.
    #[arg(long, default_value_t = false)]
    pub renormalize_embeddings: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args)]
pub struct IndexArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dict: PathBuf,
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Index base path; writes <out>, <out>.ids, <out>.cfg.
    #[arg(long)]
    pub out: PathBuf,
    /// Embed passages with the context token alone.
    #[arg(long, default_value_t = false)]
    pub baseline: bool,
}

#[derive(Args)]
pub struct SearchArgs {
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dict: PathBuf,
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long)]
    pub query: String,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    /// Embed the query with the context token alone.
    #[arg(long, default_value_t = false)]
    pub baseline: bool,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dict: PathBuf,
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long)]
    pub eval: PathBuf,
    /// May repeat; the first value drives the binned report.
    #[arg(long, required = true)]
    pub k: Vec<usize>,
    #[arg(long, default_value_t = false)]
    pub baseline: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Bin table as TSV (bin_low, bin_high, n, accuracy).
    #[arg(long)]
    pub out_tsv: Option<PathBuf>,
}

#[derive(Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dict: PathBuf,
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long)]
    pub query: String,
    /// Renormalize weights within each mention's candidate set.
    #[arg(long, default_value_t = false)]
    pub per_mention: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct FlopsArgs {
    #[arg(long, default_value_t = 12)]
    pub layers: u64,
    #[arg(long, default_value_t = 768)]
    pub dim: u64,
    #[arg(long, default_value_t = 128)]
    pub tokens: u64,
    #[arg(long, default_value_t = 16)]
    pub entities: u64,
}

/// Strips `--config <path>` from argv and splices the file's `key = value`
/// entries in as `--key value` flags right after the subcommand, so explicit
/// command-line flags (appearing later) override them.
fn merged_argv() -> Result<Vec<String>, String> {
    let mut argv: Vec<String> = std::env::args().collect();
    let mut config_path = None;
    let mut i = 0;
    while i < argv.len() {
        if argv[i] == "--config" {
            if i + 1 >= argv.len() {
                return Err("--config requires a path".into());
            }
            config_path = Some(argv.remove(i + 1));
            argv.remove(i);
        } else {
            i += 1;
        }
    }
    let Some(path) = config_path else {
        return Ok(argv);
    };
    let text = std::fs::read_to_string(&path).map_err(|e| format!("--config {path}: {e}"))?;
    let mut injected = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(format!("--config {path}: bad line {line:?}"));
        };
        let (key, value) = (key.trim(), value.trim());
        match value {
            "true" => injected.push(format!("--{key}")),
            "false" => {}
            _ => {
                injected.push(format!("--{key}"));
                injected.push(value.to_string());
            }
        }
    }
    let insert_at = argv
        .iter()
        .enumerate()
        .skip(1)
        .find(|(_, a)| !a.starts_with('-'))
        .map(|(i, _)| i + 1)
        .unwrap_or(argv.len());
    for (offset, arg) in injected.into_iter().enumerate() {
        argv.insert(insert_at + offset, arg);
    }
    Ok(argv)
}

fn main() {
    let argv = match merged_argv() {
        Ok(argv) => argv,
        Err(msg) => {
            eprintln!("kpr: usage error: {msg}");
            std::process::exit(1);
        }
    };
    commands::set_effective_args(argv[1..].to_vec());
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            // help and version requests are not usage errors
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let result = match cli.command {
        Command::Synth(args) => commands::synth(args),
        Command::BuildDict(args) => commands::build_dict(args),
        Command::EmbedEntities(args) => commands::embed_entities(args),
        Command::Train(args) => commands::train(args),
        Command::Index(args) => commands::index(args),
        Command::Search(args) => commands::search(args),
        Command::Eval(args) => commands::eval(args),
        Command::InspectAttention(args) => commands::inspect_attention(args),
        Command::Flops(args) => commands::flops(args),
    };
    if let Err(e) = result {
        eprintln!("kpr: {e}");
        std::process::exit(e.exit_category());
    }
}
