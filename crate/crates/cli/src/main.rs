//! `recomp`: generate synthetic clips, ingest frame directories, train the
//! recomposition embedding, and run the evaluation protocols.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use recomp::config::DOCUMENTED_DEFAULTS;

#[derive(Debug, Parser)]
#[command(
    name = "recomp",
    version,
    about = "Unsupervised motion embeddings learned by recomposing image sequences",
    long_about = "Unsupervised motion embeddings learned by recomposing image sequences.\n\n\
        Runs read an optional TOML config (--config); flags override config keys, \
        which override the defaults below.",
    after_long_help = DOCUMENTED_DEFAULTS
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the default configuration with a comment on every key.
    Config,
    /// Generate a synthetic SE(2) digit dataset.
    Generate(GenerateArgs),
    /// Convert directories of video frames into a dataset.
    Ingest(IngestArgs),
    /// Train an embedding network on a dataset.
    Train(TrainArgs),
    /// Group-property errors of a checkpoint on held-out tuples.
    Eval(EvalArgs),
    /// Input-gradient saliency maps.
    Saliency(SaliencyArgs),
    /// Export one embedding per sequence to CSV.
    Embed(EmbedArgs),
    /// Nearest-neighbor completion of A _ C probes.
    Nn(NnArgs),
}

#[derive(Debug, Args)]
pub struct OutArgs {
    /// Output directory; must be empty or absent unless --force is given.
    #[arg(long)]
    pub out: PathBuf,
    /// Write into a non-empty output directory, replacing files of the same name.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// TOML run configuration; only the [data] section is used.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub out: OutArgs,
    /// Overrides data.seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides data.count.
    #[arg(long)]
    pub count: Option<usize>,
    /// Overrides data.num_frames.
    #[arg(long)]
    pub frames: Option<usize>,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Frame directories, one sequence each.
    #[arg(long = "input", required = true)]
    pub inputs: Vec<PathBuf>,
    #[command(flatten)]
    pub out: OutArgs,
    /// File-name template; `{n}` captures the frame number, `*` matches anything.
    #[arg(long, default_value = "*{n}.*")]
    pub pattern: String,
    /// Keep every k-th frame.
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
    /// Crop rectangle `x,y,w,h` applied before resizing.
    #[arg(long, value_parser = parse_crop)]
    pub crop: Option<(u32, u32, u32, u32)>,
    /// Output frame size `WxH`.
    #[arg(long, default_value = "224x224", value_parser = parse_size)]
    pub resize: (u32, u32),
    /// Mean absolute frame difference reported as a shot cut.
    #[arg(long, default_value_t = recomp::ingestion::DEFAULT_CUT_THRESHOLD)]
    pub cut_threshold: f64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory written by `generate` or `ingest`.
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub out: OutArgs,
    /// Continue from a checkpoint; epoch numbering carries on.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Overrides train.epochs.
    #[arg(long)]
    pub epochs: Option<u64>,
    /// Overrides train.lr.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Overrides train.batch_sequences.
    #[arg(long)]
    pub batch: Option<usize>,
    /// Overrides train.seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides model.input_mode.
    #[arg(long, value_enum)]
    pub input: Option<InputArg>,
    /// Overrides train.threads.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Single-threaded batch assembly.
    #[arg(long)]
    pub deterministic: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum InputArg {
    Pair,
    Single,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Trained model checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory to evaluate on.
    #[arg(long)]
    pub data: PathBuf,
    /// Restrict to the held-out sequences of a training run's split.json.
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// TOML run configuration; supplies the sampler and train.margin / train.distance.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub out: OutArgs,
    /// Seed for probe and tuple sampling.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Held-out tuples to score.
    #[arg(long, default_value_t = 1000)]
    pub tuples: usize,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SourceArg {
    Spatial,
    Temporal,
}

#[derive(Debug, Args)]
pub struct SaliencyArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Number of sequences to explain, from the start of the dataset.
    #[arg(long, default_value_t = 8)]
    pub sequences: usize,
    /// Frames fed to the network per sequence.
    #[arg(long, default_value_t = 5)]
    pub length: usize,
    #[arg(long, value_enum, default_value_t = SourceArg::Spatial)]
    pub source: SourceArg,
    /// Ink threshold of the localization mask.
    #[arg(long, default_value_t = 0.1)]
    pub threshold: f32,
    /// Mask dilation radius in pixels.
    #[arg(long, default_value_t = 2)]
    pub radius: usize,
    /// Also write PNG visualizations.
    #[arg(long)]
    pub png: bool,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Frames per sequence to embed (default: all).
    #[arg(long)]
    pub length: Option<usize>,
}

#[derive(Debug, Args)]
pub struct NnArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Distance between A and the true middle, and between the middle and C.
    #[arg(long, default_value_t = 1)]
    pub skip: usize,
    /// Sequences taken from the start of the dataset; they supply both the
    /// probes and the out-of-sequence candidates.
    #[arg(long, default_value_t = 20)]
    pub sequences: usize,
    /// Probes drawn per sequence.
    #[arg(long, default_value_t = 10)]
    pub probes_per_sequence: usize,
    /// Random candidate frames taken from each other sequence.
    #[arg(long, default_value_t = 20)]
    pub out_per_sequence: usize,
}

fn parse_crop(s: &str) -> Result<(u32, u32, u32, u32), String> {
    let v: Vec<u32> = s
        .split(',')
        .map(|p| p.trim().parse::<u32>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match v[..] {
        [x, y, w, h] => Ok((x, y, w, h)),
        _ => Err("expected x,y,w,h".into()),
    }
}

fn parse_size(s: &str) -> Result<(u32, u32), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or("expected WxH")?;
    Ok((
        w.parse().map_err(|e| format!("{w:?}: {e}"))?,
        h.parse().map_err(|e| format!("{h:?}: {e}"))?,
    ))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
