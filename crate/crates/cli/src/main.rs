mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use alignsup::corpus::PharaohOrder;
use alignsup::synth::SynthTask;

#[derive(Debug, Parser)]
#[command(
    name = "alignsup",
    version,
    about = "Attention NMT with alignment supervision"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Filter a parallel corpus and build vocabularies.
    Prepare(PrepareArgs),
    /// Turn Pharaoh alignments into supervision matrices.
    TransformAlign(TransformArgs),
    /// Train from a key=value config file.
    Train(TrainArgs),
    /// Greedy-decode source sentences.
    Translate(TranslateArgs),
    /// Write teacher-forced attention matrices (and extracted alignments).
    DumpAttn(DumpArgs),
    /// Micro-averaged alignment precision/recall/F1.
    ScoreAlign(ScoreAlignArgs),
    /// Corpus BLEU against a single reference.
    ScoreBleu(ScoreBleuArgs),
    /// Generate a synthetic corpus with gold alignments.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum OrderArg {
    /// "source-target" pairs
    SrcTgt,
    /// "target-source" pairs
    TgtSrc,
}

impl From<OrderArg> for PharaohOrder {
    fn from(o: OrderArg) -> Self {
        match o {
            OrderArg::SrcTgt => PharaohOrder::SourceTarget,
            OrderArg::TgtSrc => PharaohOrder::TargetSource,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Simple,
    Smooth,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum TaskArg {
    Copy,
    Reverse,
    LocalShuffle,
}

impl From<TaskArg> for SynthTask {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Copy => SynthTask::Copy,
            TaskArg::Reverse => SynthTask::Reverse,
            TaskArg::LocalShuffle => SynthTask::LocalShuffle,
        }
    }
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    #[arg(long)]
    pub src: PathBuf,
    #[arg(long)]
    pub tgt: PathBuf,
    /// Pharaoh alignments, line-aligned with the corpus.
    #[arg(long)]
    pub align: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "src-tgt")]
    pub order: OrderArg,
    /// Drop pairs with more words than this on either side.
    #[arg(long, default_value_t = 50)]
    pub max_len: usize,
    #[arg(long, default_value_t = 30000)]
    pub src_vocab_size: usize,
    #[arg(long, default_value_t = 30000)]
    pub tgt_vocab_size: usize,
    /// Directory for train.src, train.tgt, train.align, src.vocab, tgt.vocab.
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct TransformArgs {
    #[arg(long)]
    pub align: PathBuf,
    #[arg(long)]
    pub src: PathBuf,
    #[arg(long)]
    pub tgt: PathBuf,
    #[arg(long, value_enum, default_value = "smooth")]
    pub mode: ModeArg,
    #[arg(long, default_value_t = 2)]
    pub window: usize,
    #[arg(long, default_value_t = 0.5)]
    pub sigma: f64,
    #[arg(long, value_enum, default_value = "src-tgt")]
    pub order: OrderArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the config's worker count.
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub src_vocab: PathBuf,
    #[arg(long)]
    pub tgt_vocab: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
}

#[derive(Debug, Args)]
pub struct TranslateArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub input: PathBuf,
    /// Defaults to stdout.
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pub max_len: usize,
}

#[derive(Debug, Args)]
pub struct DumpArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub src: PathBuf,
    #[arg(long)]
    pub tgt: PathBuf,
    /// Attention matrices in the supervision text format; defaults to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write extracted Pharaoh alignments here.
    #[arg(long)]
    pub align_out: Option<PathBuf>,
    #[arg(long, default_value_t = 0.2)]
    pub threshold: f64,
    #[arg(long, value_enum, default_value = "src-tgt")]
    pub order: OrderArg,
}

#[derive(Debug, Args)]
pub struct ScoreAlignArgs {
    #[arg(long)]
    pub hyp: PathBuf,
    #[arg(long)]
    pub gold: PathBuf,
    #[arg(long, value_enum, default_value = "src-tgt")]
    pub order: OrderArg,
}

#[derive(Debug, Args)]
pub struct ScoreBleuArgs {
    #[arg(long)]
    pub hyp: PathBuf,
    #[arg(long = "ref")]
    pub reference: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, value_enum)]
    pub task: TaskArg,
    #[arg(long, default_value_t = 30)]
    pub vocab: usize,
    #[arg(long, default_value_t = 3)]
    pub min_len: usize,
    #[arg(long, default_value_t = 10)]
    pub max_len: usize,
    #[arg(long, default_value_t = 3000)]
    pub pairs: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Writes <prefix>.src, <prefix>.tgt and <prefix>.align.
    #[arg(long)]
    pub out_prefix: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_target(false)
        .init();
    let cli = Cli::parse();
    log::info!("command: {:?}", cli.command);
    let result = match &cli.command {
        Command::Prepare(a) => commands::prepare(a),
        Command::TransformAlign(a) => commands::transform_align(a),
        Command::Train(a) => commands::train(a),
        Command::Translate(a) => commands::translate(a),
        Command::DumpAttn(a) => commands::dump_attn(a),
        Command::ScoreAlign(a) => commands::score_align(a),
        Command::ScoreBleu(a) => commands::score_bleu(a),
        Command::Synth(a) => commands::synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
