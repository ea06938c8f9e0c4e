use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use miditune::neural::Objective;
use miditune::representation::{EncodingScheme, Level};
use miditune::theory::MusicalContext;

#[derive(Debug, Parser)]
#[command(name = "miditune", version, about = "Real-time correction of wrong notes in MIDI performances")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Tokenize a directory of MIDI files into a training dataset
    Preprocess(PreprocessArgs),
    /// Train a next-note model on a dataset
    Train(TrainArgs),
    /// Inject wrong notes into a file and score the corrector on it
    Eval(EvalArgs),
    /// Correct a MIDI file offline
    Correct(CorrectArgs),
    /// Velocity and delta-time distributions of a directory of MIDI files
    Stats(StatsArgs),
    /// Serve live correction sessions over WebSocket or raw NDJSON
    Serve(ServeArgs),
}

fn parse_objective(s: &str) -> Result<Objective, String> {
    match s {
        "every-step" => Ok(Objective::EveryStep),
        "final-step" => Ok(Objective::FinalStep),
        _ => Err(format!("unknown objective `{s}` (every-step, final-step)")),
    }
}

fn parse_context(s: &str) -> Result<MusicalContext, String> {
    s.parse().map_err(|e| format!("{e}"))
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    /// Directory of .mid/.midi files (not searched recursively)
    #[arg(long = "in", value_name = "DIR", env = "MIDITUNE_IN")]
    pub input: PathBuf,
    /// Representation: basic, velocity, basic-delta or full
    #[arg(long, env = "MIDITUNE_LEVEL")]
    pub level: Level,
    /// Events per training window
    #[arg(long, value_name = "N", env = "MIDITUNE_SEQ_LEN")]
    pub seq_len: usize,
    /// Dataset file to write; a JSON summary is written next to it
    #[arg(long, value_name = "FILE", env = "MIDITUNE_OUT")]
    pub out: PathBuf,
    /// Encoding: one-hot, ordinal-in or ordinal
    #[arg(long, default_value = "one-hot", env = "MIDITUNE_SCHEME")]
    pub scheme: EncodingScheme,
    /// Events between consecutive window starts
    #[arg(long, value_name = "N", default_value_t = 1, env = "MIDITUNE_STRIDE")]
    pub stride: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset written by `preprocess`
    #[arg(long, value_name = "FILE", env = "MIDITUNE_DATA")]
    pub data: PathBuf,
    /// LSTM units per layer
    #[arg(long, value_name = "N", default_value_t = 256, env = "MIDITUNE_HIDDEN")]
    pub hidden: usize,
    /// Units of the dense layer
    #[arg(long, value_name = "N", default_value_t = 128, env = "MIDITUNE_DENSE")]
    pub dense: usize,
    /// Passes over the dataset
    #[arg(long, value_name = "N", default_value_t = 10, env = "MIDITUNE_EPOCHS")]
    pub epochs: usize,
    /// Windows per gradient step
    #[arg(long, value_name = "N", default_value_t = 32, env = "MIDITUNE_BATCH")]
    pub batch: usize,
    /// SGD learning rate
    #[arg(long, value_name = "F", default_value_t = 0.1, env = "MIDITUNE_LR")]
    pub lr: f64,
    /// Dropout rate on LSTM outputs
    #[arg(long, value_name = "F", default_value_t = 0.0, env = "MIDITUNE_DROPOUT")]
    pub dropout: f64,
    /// Seed for initialization, shuffling and dropout
    #[arg(long, value_name = "N", default_value_t = 0, env = "MIDITUNE_SEED")]
    pub seed: u64,
    /// Global gradient-norm clip
    #[arg(long, value_name = "F", default_value_t = 5.0, env = "MIDITUNE_CLIP")]
    pub clip: f64,
    /// Supervised steps per window: every-step or final-step
    #[arg(long, default_value = "every-step", value_parser = parse_objective, env = "MIDITUNE_OBJECTIVE")]
    pub objective: Objective,
    /// Model file to write; JSON metadata is written next to it
    #[arg(long, value_name = "FILE", env = "MIDITUNE_OUT")]
    pub out: PathBuf,
}

/// Engine settings shared by `eval` and `correct`.
#[derive(Debug, Args)]
pub struct EngineArgs {
    /// Detection threshold: notes below this probability are flagged
    #[arg(long, value_name = "F", default_value_t = 0.02, env = "MIDITUNE_THRESHOLD")]
    pub threshold: f64,
    /// Largest correction in semitones
    #[arg(long, value_name = "N", default_value_t = 3, env = "MIDITUNE_MAX_SHIFT")]
    pub max_shift: u8,
    /// Model events before overrides start [default: training sequence length]
    #[arg(long, value_name = "N", env = "MIDITUNE_WARMUP")]
    pub warmup: Option<usize>,
    /// Longest history the model conditions on, 0 for unbounded [default: training sequence length]
    #[arg(long, value_name = "N", env = "MIDITUNE_HISTORY")]
    pub history: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Model written by `train`
    #[arg(long, value_name = "FILE", env = "MIDITUNE_MODEL")]
    pub model: PathBuf,
    /// Clean MIDI file to corrupt and correct
    #[arg(long = "in", value_name = "MIDI", env = "MIDITUNE_IN")]
    pub input: PathBuf,
    /// Probability that an interior note is shifted
    #[arg(long, value_name = "F", default_value_t = 0.1, env = "MIDITUNE_INJECT_RATE")]
    pub inject_rate: f64,
    /// Seed for error injection
    #[arg(long, value_name = "N", default_value_t = 0, env = "MIDITUNE_SEED")]
    pub seed: u64,
    /// Aid level: how readily the model overrides, 0 to 1
    #[arg(long, value_name = "F", default_value_t = 0.5, env = "MIDITUNE_AID")]
    pub aid: f64,
    #[command(flatten)]
    pub engine: EngineArgs,
    /// Also write the metrics CSV to this file
    #[arg(long, value_name = "CSV", env = "MIDITUNE_REPORT")]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CorrectArgs {
    /// Model written by `train` (not needed with --context)
    #[arg(long, value_name = "FILE", required_unless_present = "context", env = "MIDITUNE_MODEL")]
    pub model: Option<PathBuf>,
    /// MIDI file to correct
    #[arg(long = "in", value_name = "MIDI", env = "MIDITUNE_IN")]
    pub input: PathBuf,
    /// Corrected MIDI file to write
    #[arg(long, value_name = "MIDI", env = "MIDITUNE_OUT")]
    pub out: PathBuf,
    /// Aid level: how readily the model overrides, 0 to 1
    #[arg(long, value_name = "F", default_value_t = 0.5, env = "MIDITUNE_AID")]
    pub aid: f64,
    /// Snap to a scale instead of using the model, e.g. c:ionian or 9:5
    #[arg(long, value_name = "KEY:MODE", value_parser = parse_context, env = "MIDITUNE_CONTEXT")]
    pub context: Option<MusicalContext>,
    #[command(flatten)]
    pub engine: EngineArgs,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    /// Directory of .mid/.midi files (not searched recursively)
    #[arg(long = "in", value_name = "DIR", env = "MIDITUNE_IN")]
    pub input: PathBuf,
    /// CSV report to write
    #[arg(long, value_name = "CSV", env = "MIDITUNE_OUT")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Model written by `train`
    #[arg(long, value_name = "FILE", env = "MIDITUNE_MODEL")]
    pub model: PathBuf,
    /// TCP port to listen on
    #[arg(long, value_name = "N", default_value_t = 8765, env = "MIDITUNE_PORT")]
    pub port: u16,
    /// Address to bind
    #[arg(long, value_name = "ADDR", default_value = "127.0.0.1", env = "MIDITUNE_HOST")]
    pub host: String,
    /// Speak newline-delimited JSON on a plain socket instead of WebSocket
    #[arg(long, env = "MIDITUNE_RAW_SOCKET")]
    pub raw_socket: bool,
    /// Default aid level for new sessions
    #[arg(long, value_name = "F", default_value_t = 0.5, env = "MIDITUNE_AID")]
    pub aid: f64,
    #[command(flatten)]
    pub engine: EngineArgs,
}
