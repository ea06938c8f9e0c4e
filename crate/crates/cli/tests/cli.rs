use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use clap::CommandFactory;
use miditune::midi::{parse_smf, serialize_smf};
use miditune::theory::MusicalContext;
use miditune_cli::Cli;
use tempfile::TempDir;

fn corpus() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/data/toy_corpus")
}

fn miditune(args: &[&str]) -> Output {
    miditune_env(args, &[])
}

fn miditune_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_miditune"));
    cmd.args(args);
    for (k, _) in std::env::vars() {
        if k.starts_with("MIDITUNE_") {
            cmd.env_remove(k);
        }
    }
    cmd.envs(env.iter().copied());
    cmd.output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A small model trained on the bundled corpus.
fn trained(dir: &TempDir) -> (PathBuf, Output) {
    let data = dir.path().join("toy.mtds");
    let model = dir.path().join("toy.mtrn");
    let pre = miditune(&["preprocess", "--in", s(&corpus()), "--level", "basic", "--seq-len", "8", "--stride", "4", "--out", s(&data)]);
    assert!(pre.status.success(), "{}", String::from_utf8_lossy(&pre.stderr));
    let train = miditune(&[
        "train", "--data", s(&data), "--hidden", "16", "--dense", "16", "--epochs", "20", "--batch", "16", "--lr", "0.5", "--seed", "3",
        "--out", s(&model),
    ]);
    assert!(train.status.success(), "{}", String::from_utf8_lossy(&train.stderr));
    (model, train)
}

#[test]
fn help_documents_every_flag() {
    let cli = Cli::command();
    for sub in cli.get_subcommands() {
        let name = sub.get_name();
        let out = miditune(&[name, "--help"]);
        assert!(out.status.success());
        let help = stdout(&out);
        for arg in sub.get_arguments() {
            let Some(long) = arg.get_long() else { continue };
            assert!(help.contains(&format!("--{long}")), "{name} --help lacks --{long}");
            assert!(arg.get_help().is_some(), "{name} --{long} has no description");
        }
    }
}

#[test]
fn exit_codes() {
    assert_eq!(miditune(&[]).status.code(), Some(1));
    assert_eq!(miditune(&["train", "--bogus"]).status.code(), Some(1));
    assert_eq!(miditune(&["--version"]).status.code(), Some(0));
    let dir = TempDir::new().unwrap();
    let junk = dir.path().join("junk.mid");
    std::fs::write(&junk, b"MThd not really").unwrap();
    let out = dir.path().join("o.mid");
    let bad_file = miditune(&["correct", "--context", "c:ionian", "--in", s(&junk), "--out", s(&out)]);
    assert_eq!(bad_file.status.code(), Some(2));
    let missing = miditune(&["stats", "--in", s(&dir.path().join("nowhere")), "--out", s(&out)]);
    assert_eq!(missing.status.code(), Some(2));
    let in_file = corpus().join("01_c_major_format0.mid");
    let bad_aid = miditune(&["correct", "--context", "c:ionian", "--aid", "1.5", "--in", s(&in_file), "--out", s(&out)]);
    assert_eq!(bad_aid.status.code(), Some(1));
    let bad_ctx = miditune(&["correct", "--context", "h:ionian", "--in", s(&in_file), "--out", s(&out)]);
    assert_eq!(bad_ctx.status.code(), Some(1));
}

#[test]
fn pipeline_from_corpus_to_corrected_file() {
    let dir = TempDir::new().unwrap();
    let (model, train) = trained(&dir);
    let lines: Vec<String> = stdout(&train).lines().map(str::to_string).collect();
    assert_eq!(lines.len(), 20);
    let last: f64 = lines[19].rsplit(' ').next().unwrap().parse().unwrap();
    // Recorded from a reference run with these flags.
    assert!((last - 0.840547).abs() <= 0.02, "final accuracy {last}");

    let meta: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("toy.mtrn.json")).unwrap()).unwrap();
    assert_eq!(meta["hyperparams"]["sequence_length"], 8);
    assert!(meta["dataset_fingerprint"].as_str().unwrap().starts_with("sha256:"));
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("toy.mtds.json")).unwrap()).unwrap();
    assert_eq!(summary["files"], 23);

    // Determinism: same flags, same model bytes.
    let again = TempDir::new().unwrap();
    let (model2, _) = trained(&again);
    assert_eq!(std::fs::read(&model).unwrap(), std::fs::read(model2).unwrap());

    let scale = corpus().join("23_scale_corpus.mid");
    let report = dir.path().join("report.csv");
    let eval = miditune(&["eval", "--model", s(&model), "--in", s(&scale), "--inject-rate", "0", "--report", s(&report)]);
    assert!(eval.status.success());
    let csv = stdout(&eval);
    assert!(csv.starts_with("metric,value\nnote_ons,5040\ninjected,0\n"), "{csv}");
    assert_eq!(std::fs::read_to_string(&report).unwrap(), csv);

    for f in std::fs::read_dir(corpus()).unwrap() {
        let path = f.unwrap().path();
        let out = dir.path().join("out.mid");
        let run = miditune(&["correct", "--model", s(&model), "--in", s(&path), "--out", s(&out), "--aid", "0", "--threshold", "0"]);
        assert!(run.status.success());
        let round_tripped = serialize_smf(&parse_smf(&std::fs::read(&path).unwrap()).unwrap());
        assert_eq!(std::fs::read(&out).unwrap(), round_tripped, "{}", path.display());
    }
}

#[test]
fn context_correction_needs_no_model() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("out.mid");
    let input = corpus().join("17_minor_arpeggios.mid");
    let run = miditune(&["correct", "--context", "c:ionian", "--in", s(&input), "--out", s(&out)]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let ctx: MusicalContext = "c:ionian".parse().unwrap();
    let before = parse_smf(&std::fs::read(&input).unwrap()).unwrap();
    let after = parse_smf(&std::fs::read(&out).unwrap()).unwrap();
    assert_eq!(before.events.len(), after.events.len());
    for (a, b) in before.events.iter().zip(&after.events) {
        assert_eq!(b.pitch, ctx.snap_to_scale(a.pitch));
    }
    assert!(String::from_utf8_lossy(&run.stderr).contains("corrected"));
}

#[test]
fn flags_override_environment() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("out.mid");
    let input = corpus().join("17_minor_arpeggios.mid");
    let ctx = [("MIDITUNE_CONTEXT", "c:ionian"), ("MIDITUNE_IN", s(&input))];
    let from_env = miditune_env(&["correct", "--out", s(&out)], &ctx);
    assert!(from_env.status.success(), "{}", String::from_utf8_lossy(&from_env.stderr));
    let env_result = std::fs::read(&out).unwrap();
    let flag = miditune_env(&["correct", "--out", s(&out), "--context", "a:aeolian"], &[("MIDITUNE_CONTEXT", "d:ionian"), ctx[1]]);
    assert!(flag.status.success());
    // A minor and C major share a scale, D major does not.
    assert_eq!(std::fs::read(&out).unwrap(), env_result);
    assert!(miditune_env(&["correct", "--out", s(&out)], &[("MIDITUNE_CONTEXT", "d:ionian"), ctx[1]]).status.success());
    assert_ne!(std::fs::read(&out).unwrap(), env_result);
    assert_eq!(miditune_env(&["correct", "--out", s(&out)], &[ctx[0], ctx[1], ("MIDITUNE_AID", "7")]).status.code(), Some(1));
}

#[test]
fn stats_report() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("stats.csv");
    assert!(miditune(&["stats", "--in", s(&corpus()), "--out", s(&out)]).status.success());
    let csv = std::fs::read_to_string(&out).unwrap();
    assert!(csv.lines().count() > 20, "{csv}");
}
