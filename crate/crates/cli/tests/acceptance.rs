//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use miditune::engine::{correct_file, evaluate, CorrectionConfig, LatencyClock, Session};
use miditune::midi::{parse_smf, serialize_smf, NoteKind};
use miditune::neural::{train_with, Hyperparams, LstmModel, Objective, RecurrentState, Workspace};
use miditune::representation::{
    bucket_delta, bucket_velocity, build_windows, encode, tokenize, EncodingScheme, Level, TokenizedEvent,
};
use miditune::theory::{Mode, MusicalContext};
use miditune::toy;
use miditune_service::{Server, ServerOptions, Transport};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
/// Name, time budget in seconds, check.
type Criterion<'a> = (&'static str, f64, Box<dyn FnOnce() -> Outcome + 'a>);

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn manifest() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

// Bucket tables as printed: (lower bound inclusive, bucket), scanned top down.
const VELOCITY_TABLE: [(u32, u8); 8] = [(86, 7), (78, 6), (71, 5), (65, 4), (58, 3), (50, 2), (40, 1), (0, 0)];
const DELTA_TABLE: [(u64, u8); 12] =
    [(1024, 11), (512, 10), (256, 9), (128, 8), (64, 7), (32, 6), (16, 5), (8, 4), (4, 3), (2, 2), (1, 1), (0, 0)];

fn buckets() -> Outcome {
    let v_bad = (0..128u32).filter(|&v| bucket_velocity(v).ok() != VELOCITY_TABLE.iter().find(|r| v >= r.0).map(|r| r.1)).count();
    let d_bad = (0..=4096u64).filter(|&d| bucket_delta(d, 480).ok() != DELTA_TABLE.iter().find(|r| d >= r.0).map(|r| r.1)).count();
    check(v_bad == 0 && d_bad == 0, format!("{v_bad} velocity and {d_bad} delta mismatches"))
}

fn theory() -> Outcome {
    let steps = [2u8, 2, 1, 2, 2, 2, 1];
    let mut bad = 0;
    for key in 0..12u8 {
        for (m, mode) in Mode::ALL.iter().enumerate() {
            let mut pcs = [false; 12];
            let mut pc = key;
            for i in 0..7 {
                pcs[usize::from(pc)] = true;
                pc = (pc + steps[(m + i) % 7]) % 12;
            }
            let ctx = MusicalContext::new(key, *mode).unwrap();
            for p in 0..128u8 {
                let s = ctx.snap_to_scale(p);
                let ok = pcs[usize::from(s % 12)] && s.abs_diff(p) <= 1 && ctx.snap_to_scale(s) == s;
                bad += usize::from(!ok);
            }
        }
    }
    check(bad == 0, format!("{bad} of 10752 cases unsound"))
}

fn round_trip() -> Outcome {
    let dir = manifest().join("../core/data/toy_corpus");
    let mut files: Vec<PathBuf> = std::fs::read_dir(&dir).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    let mut bad = Vec::new();
    for f in &files {
        let first = parse_smf(&std::fs::read(f).unwrap()).unwrap();
        if parse_smf(&serialize_smf(&first)).as_ref() != Ok(&first) {
            bad.push(f.file_name().unwrap().to_string_lossy().into_owned());
        }
    }
    let named = |s: &str| files.iter().any(|f| f.to_string_lossy().contains(s));
    check(
        files.len() >= 20 && bad.is_empty() && named("running_status") && named("format1"),
        format!("{} files, failures {bad:?}", files.len()),
    )
}

fn gradient() -> Outcome {
    let mut m = LstmModel::random(Level::Full, EncodingScheme::OneHotBoth.input_width(Level::Full), 8, 8, 11);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let evs: Vec<TokenizedEvent> = (0..5)
        .map(|_| TokenizedEvent {
            kind: if rng.gen_bool(0.5) { NoteKind::NoteOn } else { NoteKind::NoteOff },
            key: rng.gen_range(0..88),
            velocity_bucket: Some(rng.gen_range(0..8)),
            delta_bucket: Some(rng.gen_range(0..12)),
        })
        .collect();
    let w = encode(&evs, EncodingScheme::OneHotBoth, Level::Full).unwrap();
    let target = 40;
    let (grad, _) = m.backward(&w, target).unwrap();
    let analytic: Vec<f64> = grad.tensors().iter().flat_map(|t| t.iter().copied()).collect();
    let loss = |m: &LstmModel| -m.forward(&w).unwrap()[target].ln();
    let eps = 1e-5;
    let (mut idx, mut worst) = (0, 0.0f64);
    for b in 0..8 {
        for i in 0..m.tensors()[b].len() {
            let orig = m.tensors()[b][i];
            m.tensors_mut()[b][i] = orig + eps;
            let up = loss(&m);
            m.tensors_mut()[b][i] = orig - eps;
            let down = loss(&m);
            m.tensors_mut()[b][i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[idx];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
            idx += 1;
        }
    }
    check(worst < 1e-4, format!("{idx} parameters, worst relative error {worst:.2e}"))
}

fn streaming() -> Outcome {
    let track = toy::scale_corpus();
    let (tokens, _) = tokenize(&track, Level::Full);
    let window = encode(&tokens[..64], EncodingScheme::OneHotBoth, Level::Full).unwrap();
    let m = LstmModel::random(Level::Full, window.width, 32, 16, 5);
    let batch = m.forward(&window).unwrap();
    let mut state = RecurrentState::zeros(&m);
    let mut ws = Workspace::new(&m);
    let mut last = Vec::new();
    for t in 0..window.rows() {
        last = m.forward_streaming(&mut state, window.row(t), &mut ws).unwrap();
    }
    let differing = batch.iter().zip(&last).filter(|(a, b)| a.to_bits() != b.to_bits()).count();
    check(differing == 0, format!("{differing} of 88 probabilities differ"))
}

const SEQ_LEN: usize = 16;

fn learnability(slot: &mut Option<Arc<LstmModel>>) -> Outcome {
    let (tokens, _) = tokenize(&toy::scale_corpus(), Level::Basic);
    let data = build_windows(&tokens, Level::Basic, EncodingScheme::OneHotBoth, SEQ_LEN, 1);
    let hp = Hyperparams {
        sequence_length: SEQ_LEN,
        lstm_hidden: 32,
        dense_size: 32,
        epochs: 15,
        batch_size: 16,
        learning_rate: 0.5,
        seed: 1,
        objective: Objective::EveryStep,
        ..Default::default()
    };
    let model = LstmModel::random(Level::Basic, EncodingScheme::OneHotBoth.input_width(Level::Basic), 32, 32, hp.seed);
    let (model, history) = train_with(model, &data, &hp, |_| {}).unwrap();
    let reached = history.iter().find(|s| s.accuracy >= 0.9).map(|s| s.epoch);
    let last = history.last().unwrap().accuracy;
    *slot = Some(Arc::new(model));
    check(
        reached.is_some() && last >= 0.9,
        format!("{} events, accuracy {last:.4} after {} epochs, first >= 0.9 at epoch {reached:?}", tokens.len(), history.len()),
    )
}

fn engine_cfg(aid: f64, threshold: f64) -> CorrectionConfig {
    CorrectionConfig { aid_level: aid, detection_threshold: threshold, warmup: SEQ_LEN, history: SEQ_LEN, ..Default::default() }
}

// Recorded from the first run of this suite with the model above.
const RECORDED_RECALL: f64 = 1.0;
const RECORDED_CORRECTION: f64 = 1.0;

fn injection(model: &Option<Arc<LstmModel>>) -> Outcome {
    let model = model.clone().ok_or("no trained model")?;
    let (m, _, _) = evaluate(&toy::scale_corpus(), &engine_cfg(1.0, 0.05), Some(model), 0.1, 0).unwrap();
    let ok = m.detection_recall >= 0.9
        && m.correction_accuracy >= 0.8
        && (m.detection_recall - RECORDED_RECALL).abs() <= 0.05
        && (m.correction_accuracy - RECORDED_CORRECTION).abs() <= 0.05;
    check(
        ok,
        format!(
            "{} injected, recall {:.4}, correction accuracy {:.4}, precision {:.4}, false overrides {:.4}",
            m.injected, m.detection_recall, m.correction_accuracy, m.detection_precision, m.false_override_rate
        ),
    )
}

fn pass_through(model: &Option<Arc<LstmModel>>) -> Outcome {
    let model = model.clone().ok_or("no trained model")?;
    let dir = manifest().join("../core/data/toy_corpus");
    let mut checked = 0;
    let mut bad = Vec::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let track = parse_smf(&std::fs::read(&path).unwrap()).unwrap();
        let (out, _) = correct_file(&track, &engine_cfg(0.0, 0.0), Some(model.clone())).unwrap();
        if serialize_smf(&out) != serialize_smf(&track) {
            bad.push(path.file_name().unwrap().to_string_lossy().into_owned());
        }
        checked += 1;
    }
    check(bad.is_empty(), format!("{checked} files, differing {bad:?}"))
}

fn latency() -> Outcome {
    let width = EncodingScheme::OneHotBoth.input_width(Level::Full);
    let model = Arc::new(LstmModel::random(Level::Full, width, 256, 128, 3));
    let cfg = CorrectionConfig { warmup: 0, ..Default::default() };
    let track = toy::scale_corpus();
    let mut session = Session::new(cfg, Some(model), u32::from(track.ticks_per_beat)).unwrap().with_clock(LatencyClock::Measured);
    let mut lat: Vec<u64> = track.events[..10_000].iter().map(|&e| session.process_event(e).unwrap().latency_us).collect();
    lat.sort_unstable();
    let p99 = lat[(lat.len() * 99).div_ceil(100) - 1];
    let mean = lat.iter().sum::<u64>() as f64 / lat.len() as f64;
    check(p99 < 10_000, format!("10000 events, p99 {p99} us, mean {mean:.0} us, max {} us", lat[lat.len() - 1]))
}

fn protocol() -> Outcome {
    let golden = manifest().join("../service/tests/golden");
    let script = std::fs::read_to_string(golden.join("session.client.jsonl")).unwrap();
    let want = std::fs::read_to_string(golden.join("session.server.jsonl")).unwrap();
    let opts = ServerOptions {
        defaults: CorrectionConfig { warmup: 4, history: 8, ..Default::default() },
        clock: LatencyClock::Fixed(0),
        transport: Transport::Ndjson,
    };
    let model = Arc::new(LstmModel::random(Level::Full, 110, 16, 16, 7));
    let runtime = tokio::runtime::Runtime::new().unwrap();
    let server = runtime.block_on(Server::bind("127.0.0.1:0", Some(model), opts)).unwrap();
    let addr = server.local_addr().unwrap();
    runtime.spawn(server.run());

    let stream = TcpStream::connect(addr).unwrap();
    stream.set_read_timeout(Some(Duration::from_secs(10))).unwrap();
    let mut writer = stream.try_clone().unwrap();
    let mut reader = BufReader::new(stream);
    let mut got = String::new();
    for frame in script.lines() {
        writeln!(writer, "{frame}").unwrap();
        if !frame.contains(r#""type":"note_off""#) {
            reader.read_line(&mut got).unwrap();
        }
    }
    let frames = want.lines().count();
    check(got == want, format!("{frames} server frames, byte-identical: {}", got == want))
}

fn main() {
    let mut model = None;
    let criteria: Vec<Criterion> = vec![
        ("bucketization exactness", 1.0, Box::new(buckets)),
        ("theory corrector soundness", 1.0, Box::new(theory)),
        ("SMF round-trip", 5.0, Box::new(round_trip)),
        ("gradient check", 30.0, Box::new(gradient)),
        ("streaming equivalence", 1.0, Box::new(streaming)),
        ("desk-scale learnability", 600.0, Box::new(|| learnability(&mut model))),
    ];
    let mut failed = run(criteria);
    let later: Vec<Criterion> = vec![
        ("injection/correction harness", 60.0, Box::new(|| injection(&model))),
        ("pass-through identity", f64::INFINITY, Box::new(|| pass_through(&model))),
        ("latency budget", f64::INFINITY, Box::new(latency)),
        ("protocol goldens", f64::INFINITY, Box::new(protocol)),
    ];
    failed += run(later);
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

fn run(criteria: Vec<Criterion>) -> usize {
    let mut failed = 0;
    for (name, budget_s, f) in criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        let outcome = match outcome {
            Ok(d) if secs > budget_s => Err(format!("{d}; took {secs:.1} s, budget {budget_s} s")),
            o => o,
        };
        match outcome {
            Ok(d) => println!("PASS {name}: {d} ({secs:.2} s)"),
            Err(d) => {
                failed += 1;
                println!("FAIL {name}: {d} ({secs:.2} s)");
            }
        }
    }
    failed
}
