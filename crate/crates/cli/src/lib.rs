//! The `miditune` command line.
//!
//! Exit status is 0 on success, 1 for usage errors and 2 when input data or
//! a model cannot be used. Diagnostics go to stderr.

mod args;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::error::ErrorKind;
use clap::Parser;
use sha2::{Digest, Sha256};

use miditune::engine::{correct_file, evaluate, Backend, CorrectionConfig, LatencyClock};
use miditune::midi::{parse_smf, serialize_smf, MidiTrack};
use miditune::neural::{load_model, save_model, train_with, Hyperparams, LstmModel, ModelMetadata};
use miditune::representation::{
    build_windows, compute_stats, read_dataset, tokenize, write_dataset, DatasetSummary, DatasetWindowSet,
};
use miditune_service::{Server, ServerOptions, Transport};

pub use args::{Cli, Command};
use args::{CorrectArgs, EngineArgs, EvalArgs, PreprocessArgs, ServeArgs, StatsArgs, TrainArgs};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) => f.write_str(m),
        }
    }
}

fn data(context: impl std::fmt::Display) -> impl FnOnce(String) -> CliError {
    move |e| CliError::Data(format!("{context}: {e}"))
}

fn usage(message: impl Into<String>) -> CliError {
    CliError::Usage(message.into())
}

/// Parses `args` (program name first) and runs the command, returning the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("miditune: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(command: Command) -> Result<(), CliError> {
    match command {
        Command::Preprocess(a) => preprocess(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Correct(a) => correct(a),
        Command::Stats(a) => stats(a),
        Command::Serve(a) => serve(a),
    }
}

/// Sidecar JSON written next to an output file: `<file>.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn midi_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let entries = fs::read_dir(dir).map_err(|e| data(dir.display())(e.to_string()))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| data(dir.display())(e.to_string()))?.path();
        let is_midi = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("mid") || e.eq_ignore_ascii_case("midi"));
        if is_midi && path.is_file() {
            files.push(path);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(CliError::Data(format!("{}: no .mid or .midi files", dir.display())));
    }
    Ok(files)
}

fn read_midi(path: &Path) -> Result<MidiTrack, CliError> {
    let bytes = fs::read(path).map_err(|e| data(path.display())(e.to_string()))?;
    parse_smf(&bytes).map_err(|e| data(path.display())(e.to_string()))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| data(path.display())(e.to_string()))
}

fn to_json(value: serde_json::Value) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(&value).expect("values serialize");
    out.push(b'\n');
    out
}

fn preprocess(a: PreprocessArgs) -> Result<(), CliError> {
    if a.seq_len == 0 || a.stride == 0 {
        return Err(usage("--seq-len and --stride must be positive"));
    }
    let mut set = DatasetWindowSet::empty(a.level, a.scheme, a.seq_len);
    let mut summary = DatasetSummary::new(a.level, a.scheme, a.seq_len, a.stride);
    for path in midi_files(&a.input)? {
        let track = read_midi(&path)?;
        let (tokens, report) = tokenize(&track, a.level);
        let windows = build_windows(&tokens, a.level, a.scheme, a.seq_len, a.stride);
        summary.add_file(&tokens, report, &windows);
        set.extend(windows);
    }
    let mut bytes = Vec::new();
    write_dataset(&set, &mut bytes).map_err(|e| data(a.out.display())(e.to_string()))?;
    write_file(&a.out, &bytes)?;
    write_file(&sidecar_path(&a.out), &to_json(serde_json::json!(summary)))?;
    eprintln!("{} files, {} tokens, {} windows", summary.files, summary.tokens, summary.windows);
    Ok(())
}

fn train(a: TrainArgs) -> Result<(), CliError> {
    let bytes = fs::read(&a.data).map_err(|e| data(a.data.display())(e.to_string()))?;
    let set = read_dataset(&bytes[..]).map_err(|e| data(a.data.display())(e.to_string()))?;
    let hp = Hyperparams {
        sequence_length: set.sequence_length,
        lstm_hidden: a.hidden,
        dense_size: a.dense,
        epochs: a.epochs,
        batch_size: a.batch,
        dropout: a.dropout,
        learning_rate: a.lr,
        seed: a.seed,
        clip_norm: a.clip,
        objective: a.objective,
    };
    hp.validate().map_err(|e| usage(e.to_string()))?;
    let width = set.scheme.input_width(set.level);
    let model = LstmModel::random(set.level, width, a.hidden, a.dense, a.seed);
    let (model, history) = train_with(model, &set, &hp, |s| {
        println!("epoch {} loss {:.6} accuracy {:.6}", s.epoch, s.loss, s.accuracy);
    })
    .map_err(|e| data(a.data.display())(e.to_string()))?;
    let mut out = Vec::new();
    save_model(&model, &mut out).map_err(|e| data(a.out.display())(e.to_string()))?;
    write_file(&a.out, &out)?;
    let meta = ModelMetadata {
        level: set.level,
        scheme: set.scheme,
        hyperparams: hp,
        dataset_fingerprint: format!("sha256:{:x}", Sha256::digest(&bytes)),
        history,
    };
    write_file(&sidecar_path(&a.out), &to_json(serde_json::json!(meta)))
}

/// A model and, when present, the metadata written beside it.
fn load(path: &Path) -> Result<(Arc<LstmModel>, Option<ModelMetadata>), CliError> {
    let bytes = fs::read(path).map_err(|e| data(path.display())(e.to_string()))?;
    let model = load_model(&bytes[..]).map_err(|e| data(path.display())(e.to_string()))?;
    let side = sidecar_path(path);
    let meta = match fs::read(&side) {
        Ok(b) => Some(serde_json::from_slice::<ModelMetadata>(&b).map_err(|e| data(side.display())(e.to_string()))?),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
        Err(e) => return Err(data(side.display())(e.to_string())),
    };
    if let Some(m) = &meta {
        if m.level != model.level {
            return Err(CliError::Data(format!("{}: metadata level {} does not match model level {}", side.display(), m.level, model.level)));
        }
    }
    Ok((Arc::new(model), meta))
}

fn engine_config(aid: f64, e: &EngineArgs, meta: Option<&ModelMetadata>) -> Result<CorrectionConfig, CliError> {
    let defaults = CorrectionConfig::default();
    let seq_len = meta.map(|m| m.hyperparams.sequence_length);
    let cfg = CorrectionConfig {
        backend: Backend::Model,
        aid_level: aid,
        detection_threshold: e.threshold,
        max_shift: e.max_shift,
        context: None,
        warmup: e.warmup.or(seq_len).unwrap_or(defaults.warmup),
        history: e.history.or(seq_len).unwrap_or(defaults.history),
    };
    cfg.validate().map_err(|err| usage(err.to_string()))?;
    Ok(cfg)
}

fn eval(a: EvalArgs) -> Result<(), CliError> {
    let (model, meta) = load(&a.model)?;
    let cfg = engine_config(a.aid, &a.engine, meta.as_ref())?;
    if !(0.0..=1.0).contains(&a.inject_rate) {
        return Err(usage("--inject-rate must be in [0, 1]"));
    }
    let track = read_midi(&a.input)?;
    let (metrics, _, _) =
        evaluate(&track, &cfg, Some(model), a.inject_rate, a.seed).map_err(|e| data(a.input.display())(e.to_string()))?;
    let csv = metrics.to_csv();
    print!("{csv}");
    if let Some(report) = &a.report {
        write_file(report, csv.as_bytes())?;
    }
    Ok(())
}

fn correct(a: CorrectArgs) -> Result<(), CliError> {
    let (model, mut cfg) = match &a.model {
        Some(path) => {
            let (model, meta) = load(path)?;
            (Some(model), engine_config(a.aid, &a.engine, meta.as_ref())?)
        }
        None => (None, engine_config(a.aid, &a.engine, None)?),
    };
    if let Some(ctx) = a.context {
        cfg.backend = Backend::Context;
        cfg.context = Some(ctx);
    }
    let track = read_midi(&a.input)?;
    let (out, decisions) = correct_file(&track, &cfg, model).map_err(|e| data(a.input.display())(e.to_string()))?;
    write_file(&a.out, &serialize_smf(&out))?;
    let ons = decisions.iter().filter(|d| d.kind == miditune::midi::NoteKind::NoteOn);
    let (notes, changed) = ons.fold((0, 0), |(n, c), d| (n + 1, c + usize::from(d.overridden)));
    eprintln!("{notes} notes, {changed} corrected");
    Ok(())
}

fn stats(a: StatsArgs) -> Result<(), CliError> {
    let tracks = midi_files(&a.input)?.iter().map(|p| read_midi(p)).collect::<Result<Vec<_>, _>>()?;
    write_file(&a.out, compute_stats(&tracks).to_csv().as_bytes())
}

fn serve(a: ServeArgs) -> Result<(), CliError> {
    let (model, meta) = load(&a.model)?;
    let opts = ServerOptions {
        defaults: engine_config(a.aid, &a.engine, meta.as_ref())?,
        clock: LatencyClock::Measured,
        transport: if a.raw_socket { Transport::Ndjson } else { Transport::WebSocket },
    };
    let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::Data(format!("cannot start runtime: {e}")))?;
    runtime.block_on(async {
        let server = Server::bind((a.host.as_str(), a.port), Some(model), opts)
            .await
            .map_err(|e| CliError::Data(e.to_string()))?;
        let addr = server.local_addr().map_err(|e| CliError::Data(e.to_string()))?;
        let scheme = if a.raw_socket { "tcp" } else { "ws" };
        eprintln!("listening on {scheme}://{addr}");
        server.run().await.map_err(|e| CliError::Data(format!("server stopped: {e}")))
    })
}
