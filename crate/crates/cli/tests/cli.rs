//! Command-line behaviour, run against the built binary with tiny step counts.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: [&str; 12] = [
    "--set",
    "train.stage1_steps=2",
    "--set",
    "train.stage2_steps=2",
    "--set",
    "train.warmup_steps=1",
    "--set",
    "train.codec_steps=2",
    "--set",
    "gen.steps=3",
    "--set",
    "gen.warmup_steps=1",
];

fn hivae(cache: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hivae"))
        .arg("--cache")
        .arg(cache)
        .args(args)
        .env_remove("HIVAE_CACHE")
        .output()
        .expect("spawn hivae")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn err(out: &Output) -> String {
    assert!(!out.status.success(), "expected failure, got stdout:\n{}", String::from_utf8_lossy(&out.stdout));
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn train(cache: &Path, stage: &str, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--stage", stage];
    args.extend_from_slice(extra);
    args.extend_from_slice(&TINY);
    hivae(cache, &args)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn stage_order_and_validation() {
    let dir = tempfile::tempdir().unwrap();
    let msg = err(&train(dir.path(), "2", &[]));
    assert!(msg.contains("hivae train --stage 1"), "{msg}");
    err(&train(dir.path(), "3", &[]));
    let msg = err(&hivae(dir.path(), &["train", "--stage", "0", "--set", "train.bogus=1"]));
    assert!(msg.contains("bogus"), "{msg}");
    let msg = err(&train(dir.path(), "0", &["--joint"]));
    assert!(msg.contains("--joint"), "{msg}");
}

#[test]
fn full_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path();

    // Seeded stage 0 twice gives the same checkpoint bytes.
    let a = cache.join("a.hvae");
    let b = cache.join("b.hvae");
    let hash = |out: &str| out.lines().find(|l| l.contains("sha256")).unwrap().split_whitespace().last().unwrap().to_string();
    let h1 = hash(&ok(&train(cache, "0", &["--seed", "7", "--out", s(&a)])));
    let h2 = hash(&ok(&train(cache, "0", &["--seed", "7", "--out", s(&b)])));
    assert_eq!(h1, h2);

    ok(&train(cache, "0", &["--seed", "7"]));
    ok(&train(cache, "1", &[]));
    let out = ok(&train(cache, "2", &[]));
    assert!(out.contains("stage2_full"), "{out}");
    for ext in ["hvae", "csv", "png"] {
        assert!(cache.join(format!("stage2.{ext}")).exists(), "missing stage2.{ext}");
    }
    let csv = std::fs::read_to_string(cache.join("stage2.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "step,stage,fm_loss,kl_loss,lr,wall_time");
    assert_eq!(csv.lines().count(), 3);

    // Joint ablation from the stage-0 checkpoint.
    ok(&train(cache, "1", &["--joint", "--from", s(&cache.join("stage0.hvae"))]));
    assert!(cache.join("one_stage.hvae").exists());

    // Reconstruction with a sidecar.
    let ck = cache.join("stage2.hvae");
    let rec = cache.join("rec.hvae");
    ok(&hivae(
        cache,
        &["reconstruct", "--checkpoint", s(&ck), "--input", "fixture:mixed", "--steps", "1", "--mode", "global_only", "--out", s(&rec)],
    ));
    let side: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(rec.with_extension("json")).unwrap()).unwrap();
    for k in ["psnr", "ssim", "spectral_ratio"] {
        assert!(side[k].as_f64().is_some(), "sidecar lacks {k}: {side}");
    }
    err(&hivae(cache, &["reconstruct", "--checkpoint", s(&ck), "--input", "/no/such/file", "--out", s(&rec)]));
    err(&hivae(cache, &["reconstruct", "--checkpoint", "/no/such.hvae", "--input", "fixture:static", "--out", s(&rec)]));

    let out = ok(&hivae(cache, &["ablate", "--checkpoint", s(&ck), "--input", "fixture:static", "--steps", "1"]));
    assert_eq!(out.lines().count(), 3);

    // Generator.
    ok(&hivae(cache, &["gen-train", "--set", "gen.steps=3", "--set", "gen.warmup_steps=1"]));
    let v1 = cache.join("g1.hvae");
    let v2 = cache.join("g2.hvae");
    ok(&hivae(cache, &["generate", "--class", "1", "--seed", "4", "--out", s(&v1)]));
    ok(&hivae(cache, &["generate", "--class", "1", "--seed", "4", "--out", s(&v2)]));
    assert_eq!(std::fs::read(&v1).unwrap(), std::fs::read(&v2).unwrap());
    err(&hivae(cache, &["generate", "--class", "5", "--out", s(&v1)]));

    // Report over one checkpoint.
    let rep = cache.join("report");
    let out = ok(&hivae(cache, &["report", s(&ck), "--out-dir", s(&rep), "--steps", "1"]));
    assert!(out.contains("0.14"), "{out}");
    let csv = std::fs::read_to_string(rep.join("report.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "checkpoint,latent_size,motion_elements,rate_percent,desk_rate_percent,psnr,ssim");
    assert_eq!(csv.lines().count(), 2);
    assert!(rep.join("report.png").exists() && rep.join("report.md").exists());
}

#[test]
fn report_needs_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    err(&hivae(dir.path(), &["report"]));
}

#[test]
fn flops_compares_token_counts() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&hivae(dir.path(), &["flops"]));
    let rows: Vec<Vec<u128>> =
        out.lines().skip(1).map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!((rows[0][0], rows[1][0]), (4608, 65536));
    assert!(rows[0][1] < rows[1][1] && rows[0][3] < rows[1][3]);
}

#[test]
fn data_commands() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let clip = d.join("clip.hvae");
    ok(&hivae(d, &["data", "synth", "--out", s(&clip), "--frames", "4", "--height", "16", "--width", "16", "--drift", "1,0.5"]));
    assert!(clip.exists());
    err(&hivae(d, &["data", "synth", "--out", s(&clip), "--drift", "99,0"]));
    let fx: PathBuf = d.join("fx");
    ok(&hivae(d, &["data", "fixtures", "--out-dir", s(&fx)]));
    assert_eq!(std::fs::read_dir(&fx).unwrap().count(), 4);
    err(&hivae(d, &["data", "ingest", "--dir", s(&d.join("missing")), "--out", s(&d.join("x.hvae"))]));
}
