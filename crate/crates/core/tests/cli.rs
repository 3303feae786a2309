//! End-to-end tests of the `mfr` binary: exit codes, determinism, config
//! echo and the extract / eval artifacts.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mfr_core::config::RunConfig;
use mfr_core::data::load_manifest;
use mfr_core::eval::{EmbeddingSet, MetricReport};
use mfr_core::optim::lr_at;

fn mfr(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mfr"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("run mfr")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = mfr(dir, args);
    assert!(
        out.status.success(),
        "mfr {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

const TINY: [&str; 12] = [
    "--set",
    "synth.identities=4",
    "--set",
    "synth.images_per_identity=8",
    "--set",
    "synth.test_per_identity=2",
    "--set",
    "optim.total_epochs=2",
    "--set",
    "optim.decay_epochs=2",
    "--set",
    "optim.restart_len=0",
];

fn with_tiny<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v = args.to_vec();
    v.extend_from_slice(&TINY);
    v
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(dir).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(code(&mfr(d, &["--help"])), 0);
    assert_eq!(code(&mfr(d, &[])), 1, "missing subcommand is a usage error");
    assert_eq!(code(&mfr(d, &["train", "--set", "no.such_key=1"])), 1);
    assert_eq!(code(&mfr(d, &["train", "--set", "train.batch_size=1"])), 1);
    // No manifest on disk: a runtime I/O failure.
    assert_eq!(code(&mfr(d, &["train", "--out", "run"])), 2);
    std::fs::create_dir(d.join("full")).unwrap();
    std::fs::write(d.join("full/x"), "x").unwrap();
    let refused = mfr(d, &with_tiny(&["synth-data", "--out", "full"]));
    assert_eq!(code(&refused), 1);
    assert!(String::from_utf8_lossy(&refused.stderr).contains("--force"));
    assert_eq!(code(&mfr(d, &with_tiny(&["synth-data", "--out", "full", "--force"]))), 0);
}

#[test]
fn synth_data_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &with_tiny(&["synth-data", "--out", "a", "--seed", "3"]));
    ok(d, &with_tiny(&["synth-data", "--out", "b", "--seed", "3"]));
    ok(d, &with_tiny(&["synth-data", "--out", "c", "--seed", "4"]));
    let files = files_under(&d.join("a"));
    assert_eq!(files, files_under(&d.join("b")));
    for f in &files {
        assert_eq!(std::fs::read(d.join("a").join(f)).unwrap(), std::fs::read(d.join("b").join(f)).unwrap(), "{f:?}");
    }
    let manifest = std::fs::read(d.join("a/manifest.csv")).unwrap();
    assert_ne!(manifest, std::fs::read(d.join("c/manifest.csv")).unwrap());
    let records = load_manifest(d.join("a/manifest.csv")).unwrap();
    assert_eq!(records.len(), 32);
    let masked = records.iter().filter(|r| r.masked).count();
    assert!((masked as f64 / 32.0 - 0.3).abs() <= 0.5 / 32.0 + 1e-12, "{masked} of 32 masked");
}

#[test]
fn train_extract_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &with_tiny(&["synth-data", "--out", "data"]));
    ok(d, &with_tiny(&["train", "--out", "run"]));

    // The echoed config reproduces the run byte for byte.
    let echoed = RunConfig::load(d.join("run/config.txt")).unwrap();
    assert_eq!(echoed.schedule.total_epochs, 2.0);
    ok(d, &["train", "--config", "run/config.txt", "--out", "rerun"]);
    for f in ["model.mfrw", "model_ema.mfrw", "train_log.csv", "config.txt"] {
        assert_eq!(std::fs::read(d.join("run").join(f)).unwrap(), std::fs::read(d.join("rerun").join(f)).unwrap(), "{f}");
    }

    // The log's lr column is the schedule itself; masked share stays under the cap.
    let log = std::fs::read_to_string(d.join("run/train_log.csv")).unwrap();
    let rows: Vec<Vec<f64>> = log.lines().skip(1).map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    let per_epoch = rows.iter().filter(|r| r[0] == 0.0).count();
    let schedule = mfr_core::optim::ScheduleConfig {
        steps_per_epoch: per_epoch,
        ..echoed.schedule
    };
    assert_eq!(rows.len(), 2 * per_epoch);
    for r in &rows {
        assert_eq!(r[2], lr_at(r[1] as usize, &schedule).unwrap());
        assert!(r[4] <= echoed.sampler.mask_ratio_cap);
        assert!(r[3].is_finite());
    }

    // Extraction is deterministic and yields 512-d embeddings.
    ok(d, &["extract", "--run", "run", "--out", "ex1"]);
    ok(d, &["extract", "--run", "run", "--out", "ex2"]);
    ok(d, &["extract", "--run", "run", "--use-ema", "--out", "ex_ema"]);
    ok(d, &["extract", "--run", "run", "--manifest", "data/train.csv", "--out", "gallery"]);
    let e1 = std::fs::read(d.join("ex1/embeddings.mfre")).unwrap();
    assert_eq!(e1, std::fs::read(d.join("ex2/embeddings.mfre")).unwrap());
    let set = EmbeddingSet::read(d.join("ex1/embeddings.mfre")).unwrap();
    assert_eq!(set.dim(), 512);
    assert_eq!(set.len(), 8);
    assert_eq!(u32::from_le_bytes(e1[8..12].try_into().unwrap()), 512);
    assert_ne!(e1, std::fs::read(d.join("ex_ema/embeddings.mfre")).unwrap());

    ok(d, &["extract", "--concat", "ex1/embeddings.mfre", "ex_ema/embeddings.mfre", "--out", "cat"]);
    assert_eq!(EmbeddingSet::read(d.join("cat/embeddings.mfre")).unwrap().dim(), 1024);

    let text = ok(d, &["eval", "--embeddings", "ex1/embeddings.mfre", "--gallery", "gallery/embeddings.mfre", "--out", "ev"]);
    assert!(text.contains("TAR"), "{text}");
    let report: MetricReport = serde_json::from_str(&std::fs::read_to_string(d.join("ev/report.json")).unwrap()).unwrap();
    let (m, u) = (report.mfr_masked_old.unwrap(), report.sfr_all.unwrap());
    assert!((report.mfr_weighted.unwrap() - (0.25 * m + 0.75 * u)).abs() <= 1e-12);
    assert!(report.top1.is_some_and(|t| (0.0..=1.0).contains(&t)));
    assert_eq!(code(&mfr(d, &["eval", "--embeddings", "ex1/embeddings.mfre", "--out", "ev"])), 1, "existing report");

    // Pairs naming images outside the embedding set are a validation error.
    let missing = mfr(d, &["eval", "--embeddings", "gallery/embeddings.mfre", "--out", "ev_missing"]);
    assert_eq!(code(&missing), 1);
    assert!(String::from_utf8_lossy(&missing.stderr).contains("missing"));
}

#[test]
fn one_epoch_lowers_the_loss() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["synth-data", "--out", "data"]);
    let one_epoch = [
        "--set",
        "optim.total_epochs=1",
        "--set",
        "optim.decay_epochs=1",
        "--set",
        "optim.warmup_epochs=0.2",
        "--set",
        "optim.restart_len=0",
    ];
    let mut args = vec!["train", "--out", "run"];
    args.extend_from_slice(&one_epoch);
    ok(d, &args);
    let log = std::fs::read_to_string(d.join("run/train_log.csv")).unwrap();
    let losses: Vec<f64> = log.lines().skip(1).map(|l| l.split(',').nth(3).unwrap().parse().unwrap()).collect();
    assert!(losses.len() > 5);
    assert!(losses.last().unwrap() < losses.first().unwrap(), "losses {losses:?}");
}
