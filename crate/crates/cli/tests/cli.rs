use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use efv_cli::commands::{manifest_path, CACHE_FILE, MANIFEST_FILE};
use efv_cli::manifest::RunManifest;
use efv_core::cache::read_cache_file;
use efv_core::config::RunConfig;
use efv_core::event_io::{parse_nmnist_bin, write_nmnist_bin};
use efv_core::representations::prepare_sample;
use efv_core::synthetic::{saccade_digits, SaccadeConfig};

fn efv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_efv")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout_json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).unwrap()
}

fn stderr_json(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(text.lines().last().unwrap()).unwrap()
}

const SMALL: &str = r#"
[representation]
frames = 2
frame_height = 16
frame_width = 16
t_span = 8.0
top_k = 16

[model]
width = 8
heads = 2
grid = [2, 2]
stem_channels = [4]
gmm_hidden = 8
head_hidden = 16

[train]
batch_size = 4
"#;

fn synth(dir: &Path, count: usize, seed: u64) {
    let out = efv(&["synth", "--count", &count.to_string(), "--output", s(dir), "--seed", &seed.to_string()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn convert_roundtrip_is_canonical() {
    let dir = tempfile::tempdir().unwrap();
    let stream = &saccade_digits(1, 4, &SaccadeConfig::default()).unwrap()[0];
    let bin = dir.path().join("a.bin");
    fs::write(&bin, write_nmnist_bin(stream).unwrap()).unwrap();
    let csv = dir.path().join("a.csv");
    let out = efv(&["convert", "--input", s(&bin), "--output", s(&csv)]);
    assert!(out.status.success());
    let info = stdout_json(&out);
    assert_eq!(info["events"], stream.len());
    assert_eq!(info["duration_us"], stream.duration());

    let back = dir.path().join("b.bin");
    let csv2 = dir.path().join("b.csv");
    assert!(efv(&["convert", "--input", s(&csv), "--output", s(&back), "--format", "csv"]).status.success());
    assert!(efv(&["convert", "--input", s(&back), "--output", s(&csv2)]).status.success());
    assert_eq!(fs::read(&csv).unwrap(), fs::read(&csv2).unwrap());
    let reparsed = parse_nmnist_bin(&fs::read(&back).unwrap(), 34, 34).unwrap();
    assert_eq!(reparsed.events(), stream.events());
}

#[test]
fn corrupt_input_exits_2_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.bin");
    fs::write(&bad, [0u8; 7]).unwrap();
    let out_path = dir.path().join("out.csv");
    let out = efv(&["convert", "--input", s(&bad), "--output", s(&out_path)]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr_json(&out);
    assert_eq!(err["error"], "truncated_record");
    assert_eq!(err["file"], s(&bad));
    assert!(err["message"].as_str().unwrap().contains("offset 5"));
    assert!(!out_path.exists());

    let csv = dir.path().join("bad.csv");
    fs::write(&csv, "1,2,3,1\n4,5,x,0\n").unwrap();
    let out = efv(&["convert", "--input", s(&csv), "--output", s(&out_path), "--format", "csv"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["error"], "malformed_line");
    assert!(stderr_json(&out)["message"].as_str().unwrap().contains("line 2"));
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 2);
}

#[test]
fn preprocess_is_deterministic_and_matches_recomputation() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, 10, 2);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let r = efv(&["preprocess", "--input", s(&data), "--output", s(out)]);
        assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
        assert_eq!(stdout_json(&r)["samples"], 10);
    }
    let cache = fs::read(a.join(CACHE_FILE)).unwrap();
    assert_eq!(cache, fs::read(b.join(CACHE_FILE)).unwrap());
    assert_eq!(
        fs::read(a.join(MANIFEST_FILE)).unwrap().len(),
        fs::read(b.join(MANIFEST_FILE)).unwrap().len()
    );

    let cached = read_cache_file(&a.join(CACHE_FILE)).unwrap();
    let mut streams = saccade_digits(10, 2, &SaccadeConfig::default()).unwrap();
    streams.sort_by_key(|s| s.label);
    let cfg = RunConfig::default().representation;
    assert_eq!(cached.len(), 10);
    for (c, stream) in cached.iter().zip(&streams) {
        assert_eq!(c, &prepare_sample(stream, &cfg).unwrap());
        assert_eq!(c.event_count, stream.len() as u64);
    }

    let m = RunManifest::read(&a.join(MANIFEST_FILE)).unwrap();
    assert!(m.complete);
    assert_eq!(m.config, RunConfig::default());
    assert_eq!(m.outputs.len(), 1);
    assert_eq!(m.outputs[0].sha256, efv_cli::manifest::sha256_hex(&cache));
}

#[test]
fn train_eval_plot_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    fs::write(p("small.toml"), SMALL).unwrap();
    synth(&p("data"), 12, 3);
    assert!(efv(&["preprocess", "--input", s(&p("data")), "--output", s(&p("prep")), "--config", s(&p("small.toml"))])
        .status
        .success());
    let cache = p("prep").join(CACHE_FILE);
    // outputs may name directories that do not exist yet
    let ckpt = p("run/model.efvw");
    let out = efv(&[
        "train", "--input", s(&cache), "--eval", s(&cache), "--config", s(&p("small.toml")),
        "--epochs", "2", "--checkpoint", s(&ckpt), "--seed", "1",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let metrics = ckpt.with_extension("csv");
    assert_eq!(fs::read_to_string(&metrics).unwrap().lines().count(), 3);
    let manifest = RunManifest::read(&manifest_path(&ckpt)).unwrap();
    assert!(manifest.complete);
    assert_eq!(manifest.config.train.epochs, 2);
    assert_eq!(manifest.inputs.len(), 2);

    let report = p("reports/eval.json");
    let out = efv(&[
        "eval", "--input", s(&cache), "--config", s(&p("small.toml")), "--checkpoint", s(&ckpt),
        "--output", s(&report),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r = stdout_json(&out);
    let confusion = r["confusion"].as_array().unwrap();
    assert_eq!(confusion.len(), 10);
    let total: u64 = confusion.iter().flat_map(|row| row.as_array().unwrap()).map(|v| v.as_u64().unwrap()).sum();
    assert_eq!(total, 12);

    let out = efv(&["plot", "--metrics", s(&metrics), "--input", s(&report), "--output", s(&p("plots"))]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["curves.csv", "curves.svg", "confusion.csv", "confusion.svg"] {
        assert!(p("plots").join(f).is_file(), "{f}");
    }

    // A checkpoint used with a different architecture is rejected.
    let out = efv(&["eval", "--input", s(&cache), "--checkpoint", s(&ckpt)]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["file"], s(&ckpt));
}

fn strip_seconds(log: &str) -> Vec<String> {
    log.lines().map(|l| l.rsplit_once(',').unwrap().0.to_string()).collect()
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    fs::write(p("small.toml"), SMALL).unwrap();
    synth(&p("data"), 8, 5);
    assert!(efv(&["preprocess", "--input", s(&p("data")), "--output", s(&p("prep")), "--config", s(&p("small.toml"))])
        .status
        .success());
    let cache = p("prep").join(CACHE_FILE);
    let config = p("small.toml");
    let train = |ckpt: &Path, epochs: &str, resume: bool| {
        let mut args = vec![
            "train", "--input", s(&cache), "--config", s(&config), "--epochs", epochs, "--checkpoint",
            s(ckpt), "--seed", "3",
        ];
        if resume {
            args.push("--resume");
        }
        let out = efv(&args);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    };
    train(&p("full.efvw"), "3", false);
    train(&p("part.efvw"), "1", false);
    train(&p("part.efvw"), "3", true);
    assert_eq!(fs::read(p("full.efvw")).unwrap(), fs::read(p("part.efvw")).unwrap());
    let logs = |n: &str| strip_seconds(&fs::read_to_string(p(n)).unwrap());
    assert_eq!(logs("full.csv"), logs("part.csv"));
    assert_eq!(logs("full.csv").len(), 4);
}

#[test]
fn failed_training_leaves_incomplete_manifest_and_no_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("junk.efvc");
    fs::write(&cache, b"EFVC\x01garbage").unwrap();
    let ckpt = dir.path().join("m.efvw");
    let out = efv(&["train", "--input", s(&cache), "--checkpoint", s(&ckpt)]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["error"], "format_mismatch");
    assert!(!ckpt.exists());
    assert!(!RunManifest::read(&manifest_path(&ckpt)).unwrap().complete);
}

#[test]
fn plot_rejects_empty_log() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("empty.csv");
    fs::write(&log, "").unwrap();
    let out_dir: PathBuf = dir.path().join("plots");
    let out = efv(&["plot", "--metrics", s(&log), "--output", s(&out_dir)]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["error"], "empty_dataset");
    assert!(!out_dir.exists());
}

#[test]
fn bad_config_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "[model]\nwidht = 3\n").unwrap();
    let out = efv(&["preprocess", "--input", s(dir.path()), "--output", s(&dir.path().join("o")), "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr_json(&out);
    assert_eq!(err["error"], "invalid_config");
    assert_eq!(err["file"], s(&cfg));
}
