use std::fs;
use std::path::Path;
use std::process::Command;

use depthprior::model::ModelConfig;
use depthprior::scenegen::read_dataset;
use depthprior::trainer::{Checkpoint, TrainConfig};
use depthprior_cli::dispatch;
use depthprior_cli::export::decode_raw32;
use serde_json::Value;

struct Run {
    code: i32,
    stdout: String,
    stderr: String,
}

impl Run {
    fn lines(&self) -> Vec<Value> {
        self.stdout.lines().map(|l| serde_json::from_str(l).unwrap()).collect()
    }

    fn error(&self) -> Value {
        let line = self.stderr.lines().last().expect("an error line");
        serde_json::from_str(line).unwrap()
    }
}

fn run(args: &[&str]) -> Run {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("depthprior").chain(args.iter().copied());
    let code = dispatch(argv, &mut out, &mut err);
    Run {
        code,
        stdout: String::from_utf8(out).unwrap(),
        stderr: String::from_utf8(err).unwrap(),
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// 8×8 toy model so training in tests takes well under a second.
fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 4,
        model: ModelConfig {
            embed_seed: 17,
            ..ModelConfig::toy()
        },
        ..TrainConfig::default()
    };
    let path = dir.join("tiny.json");
    fs::write(&path, serde_json::to_string(&cfg).unwrap()).unwrap();
    path
}

fn gen_small(dir: &Path, name: &str, seed: u64, count: usize) -> std::path::PathBuf {
    let path = dir.join(name);
    let r = run(&[
        "gen",
        "--seed",
        &seed.to_string(),
        "--count",
        &count.to_string(),
        "--height",
        "8",
        "--width",
        "8",
        "--out",
        s(&path),
    ]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    path
}

#[test]
fn gen_writes_the_requested_count_and_echoes_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d.wdph");
    let r = run(&["gen", "--seed", "7", "--count", "100", "--out", s(&out)]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let echo = &r.lines()[0];
    assert_eq!(echo["seed"], 7);
    assert_eq!(echo["count"], 100);
    assert_eq!(read_dataset(&out).unwrap().len(), 100);
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("gen.json");
    fs::write(&cfg, r#"{"seed": 5, "count": 3, "generator": {"max_objects": 2}}"#).unwrap();
    let out = dir.path().join("d.wdph");
    let r = run(&["gen", "--config", s(&cfg), "--seed", "9", "--out", s(&out)]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let echo = &r.lines()[0];
    assert_eq!(echo["seed"], 9);
    assert_eq!(echo["count"], 3);
    assert_eq!(echo["generator"]["max_objects"], 2);
}

#[test]
fn unknown_flags_and_fields_are_config_errors() {
    let r = run(&["gen", "--out", "x.wdph", "--bogus", "1"]);
    assert_eq!(r.code, 1);
    assert_eq!(r.error()["error"]["kind"], "config");

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"seed": 1, "colour": "red"}"#).unwrap();
    let r = run(&["gen", "--config", s(&cfg), "--out", s(&dir.path().join("d.wdph"))]);
    assert_eq!(r.code, 1);
    assert_eq!(r.error()["error"]["kind"], "config");
}

#[test]
fn missing_dataset_is_reported_with_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let r = run(&[
        "train",
        "--data",
        s(&dir.path().join("nope.wdph")),
        "--val",
        s(&dir.path().join("nope.wdph")),
        "--out-ckpt",
        s(&dir.path().join("c.wdck")),
    ]);
    assert_eq!(r.code, 1);
    assert_eq!(r.error()["error"]["kind"], "io");
}

#[test]
fn train_eval_sample_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let train = gen_small(d, "train.wdph", 0, 16);
    let val = gen_small(d, "val.wdph", 1, 6);
    let cfg = tiny_config(d);
    let ckpt = d.join("c.wdck");

    let r = run(&[
        "train",
        "--config",
        s(&cfg),
        "--data",
        s(&train),
        "--val",
        s(&val),
        "--out-ckpt",
        s(&ckpt),
    ]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let lines = r.lines();
    // Config echo, one line per epoch, then a summary.
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[1]["epoch"], 1);
    assert!(lines[2]["val"]["abs_rel"].is_number());

    // The echoed config reproduces the run bit-exactly.
    let echo_path = d.join("echo.json");
    fs::write(&echo_path, r.stdout.lines().next().unwrap()).unwrap();
    let ckpt2 = d.join("c2.wdck");
    let again = run(&["train", "--config", s(&echo_path), "--out-ckpt", s(&ckpt2)]);
    assert_eq!(again.code, 0, "{}", again.stderr);
    let epochs = |run: &Run| run.stdout.lines().skip(1).take(2).map(String::from).collect::<Vec<_>>();
    assert_eq!(epochs(&r), epochs(&again));
    assert_eq!(fs::read(&ckpt).unwrap(), fs::read(&ckpt2).unwrap());

    let report = d.join("r.json");
    let maps = d.join("maps");
    let r = run(&[
        "eval",
        "--ckpt",
        s(&ckpt),
        "--data",
        s(&val),
        "--report",
        s(&report),
        "--error-maps",
        s(&maps),
    ]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let metrics: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    for key in ["abs_rel", "rmse", "log10", "rmse_log", "delta1", "delta2", "delta3"] {
        assert!(metrics[key].is_number(), "missing {key}");
    }
    assert_eq!(fs::read_dir(&maps).unwrap().count(), 6);
    let pgm = fs::read(maps.join("error_00000.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n# meters_per_unit 0.001\n8 8\n65535\n"));

    let out = d.join("samples");
    let r = run(&[
        "sample",
        "--ckpt",
        s(&ckpt),
        "--caption",
        "a large room with a chair",
        "--n",
        "3",
        "--seed",
        "4",
        "--out-dir",
        s(&out),
        "--format",
        "raw32",
    ]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let summary: Value = serde_json::from_str(&fs::read_to_string(out.join("latent.json")).unwrap()).unwrap();
    assert_eq!(summary["mu"].as_array().unwrap().len(), ModelConfig::toy().latent_dim);
    assert_eq!(summary["files"].as_array().unwrap().len(), 3);
    let (h, w, values) = decode_raw32(&fs::read(out.join("sample_000.raw")).unwrap()).unwrap();
    assert_eq!((h, w, values.len()), (8, 8, 64));
    assert!(values.iter().all(|&v| v > 1e-3));

    let r = run(&[
        "sample",
        "--ckpt",
        s(&ckpt),
        "--caption",
        "a chair",
        "--out-dir",
        s(&out),
        "--meters-per-unit",
        "-0.001",
    ]);
    assert_eq!(r.code, 1);
    assert_eq!(r.error()["error"]["kind"], "config");
}

#[test]
fn non_finite_parameters_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let val = gen_small(d, "val.wdph", 1, 4);
    let vocab = read_dataset(&val).unwrap().header.vocabulary.len();
    let cfg = TrainConfig {
        model: ModelConfig::toy(),
        ..TrainConfig::default()
    };
    let trainer = depthprior::Trainer32::new(cfg, vocab).unwrap();
    let mut ckpt: Checkpoint = trainer.to_checkpoint();
    ckpt.params.get_mut("decoder.head.b").unwrap().data_mut()[0] = f32::NAN;
    let path = d.join("bad.wdck");
    ckpt.save(&path).unwrap();
    let r = run(&["eval", "--ckpt", s(&path), "--data", s(&val)]);
    assert_eq!(r.code, 2, "{}", r.stderr);
    assert_eq!(r.error()["error"]["kind"], "numeric");
}

#[test]
fn gradcheck_passes_and_binary_exit_codes_match() {
    let bin = env!("CARGO_BIN_EXE_depthprior");
    let ok = Command::new(bin).args(["gradcheck", "--trials", "1"]).output().unwrap();
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stderr));
    let stdout = String::from_utf8(ok.stdout).unwrap();
    let reports: Vec<Value> = stdout
        .lines()
        .skip(1)
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(reports.len(), 2);
    assert!(reports.iter().all(|r| r["pass"] == true));

    let bad = Command::new(bin)
        .args(["gradcheck", "--step", "1e-2"])
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(1));
    let bad = Command::new(bin).arg("frobnicate").output().unwrap();
    assert_eq!(bad.status.code(), Some(1));
    let line = String::from_utf8(bad.stderr).unwrap();
    let err: Value = serde_json::from_str(line.trim()).unwrap();
    assert_eq!(err["error"]["code"], 1);
}
