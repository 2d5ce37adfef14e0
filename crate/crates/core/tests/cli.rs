//! End-to-end runs of the `oilca` binary on a tiny configuration.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
# small enough to run in a few seconds
env.episode_len = 40
datagen.episodes_per_class = 20
datagen.expert_prob = 1.0
vae.epochs = 3
vae.kl_warmup_epochs = 1
vae.train_transitions = 600
sampler.steps = 60
augment.batch_size = 500
bc.steps = 60
dwbc.total_steps = 250
eval.n_episodes = 6
";

fn oilca(dir: &Path, args: &[&str]) -> Output {
    let cfg = dir.join("tiny.cfg");
    if !cfg.exists() {
        fs::write(&cfg, TINY).unwrap();
    }
    Command::new(env!("CARGO_BIN_EXE_oilca"))
        .arg("--config")
        .arg(&cfg)
        .arg("--workdir")
        .arg(dir.join("work"))
        .args(args)
        .env_remove("OILCA_WORKDIR")
        .output()
        .unwrap()
}

fn ok(out: &Output) {
    assert!(out.status.success(), "exit {:?}\nstdout:\n{}\nstderr:\n{}", out.status.code(), String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr));
}

fn read(dir: &Path, rel: &str) -> Vec<u8> {
    fs::read(dir.join("work").join(rel)).unwrap()
}

#[test]
fn run_all_is_reproducible_and_matches_the_manual_sequence() {
    let (a, b, m) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    ok(&oilca(a.path(), &["run-all"]));
    ok(&oilca(b.path(), &["run-all"]));
    let report = read(a.path(), "reports/report.csv");
    assert_eq!(report, read(b.path(), "reports/report.csv"));
    assert!(String::from_utf8_lossy(&report).starts_with("method,seed,mean_return,stderr,n_episodes,config_hash\noilca,0,"));

    for stage in [&["gen-data"][..], &["train-vae"], &["train-sampler"], &["augment"], &["train-policy", "--algo", "oilca"], &["evaluate", "--algo", "oilca"]] {
        ok(&oilca(m.path(), stage));
    }
    for rel in ["data/dataset.bin", "data/augmented.bin", "data/augmented.bin.prov", "ckpt/cvae.ckpt", "ckpt/sampler.ckpt", "ckpt/policy-oilca.ckpt", "reports/report.csv"] {
        assert_eq!(read(a.path(), rel), read(m.path(), rel), "{rel} differs between run-all and manual stages");
    }
    let manifest = String::from_utf8(read(a.path(), "manifest")).unwrap();
    let stages: Vec<&str> = manifest.lines().map(|l| l.split_whitespace().next().unwrap()).collect();
    assert_eq!(stages, ["stage=gen-data", "stage=train-vae", "stage=train-sampler", "stage=augment", "stage=train-policy", "stage=evaluate"]);
    assert!(manifest.lines().all(|l| l.contains(" config=") && l.contains(" outputs=") && l.contains(" wall_ms=")));
}

#[test]
fn baselines_train_and_evaluate_together() {
    let d = tempfile::tempdir().unwrap();
    ok(&oilca(d.path(), &["gen-data"]));
    for algo in ["bc-exp", "bc-all", "dwbc"] {
        ok(&oilca(d.path(), &["train-policy", "--algo", algo]));
    }
    ok(&oilca(d.path(), &["evaluate"]));
    let report = String::from_utf8(read(d.path(), "reports/report.csv")).unwrap();
    let methods: Vec<&str> = report.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(methods, ["bc-exp", "bc-all", "dwbc"]);
    let curve = String::from_utf8(read(d.path(), "reports/loss-dwbc.csv")).unwrap();
    assert!(curve.starts_with("step,loss,component\n"));
    assert!(d.path().join("work/ckpt/disc-dwbc.ckpt").exists());
}

#[test]
fn oilca_without_augment_names_the_missing_stage() {
    let d = tempfile::tempdir().unwrap();
    ok(&oilca(d.path(), &["gen-data"]));
    let out = oilca(d.path(), &["train-policy", "--algo", "oilca"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("`augment`"), "{}", String::from_utf8_lossy(&out.stderr));

    let fresh = tempfile::tempdir().unwrap();
    let out = oilca(fresh.path(), &["train-vae"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("gen-data"));
}

#[test]
fn stale_checkpoints_are_rejected() {
    let d = tempfile::tempdir().unwrap();
    ok(&oilca(d.path(), &["gen-data"]));
    ok(&oilca(d.path(), &["train-vae"]));
    ok(&oilca(d.path(), &["train-sampler"]));
    ok(&oilca(d.path(), &["--seed", "5", "gen-data"]));
    let out = oilca(d.path(), &["--seed", "5", "augment"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train-vae"));
}

#[test]
fn config_errors_report_the_line() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("bad.cfg");
    fs::write(&cfg, "env.episode_len = 40\n\n# comment\nvae.epoch = 3\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_oilca")).arg("--config").arg(&cfg).arg("show-config").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 4") && err.contains("vae.epoch"), "{err}");

    fs::write(&cfg, "dwbc.alpha = 0.5\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_oilca")).arg("--config").arg(&cfg).arg("gen-data").arg("--help").output().unwrap();
    assert!(out.status.success());
    let out = Command::new(env!("CARGO_BIN_EXE_oilca")).arg("--config").arg(&cfg).arg("--workdir").arg(d.path().join("w")).arg("gen-data").output().unwrap();
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn seed_flag_and_workdir_variable() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("tiny.cfg"), TINY).unwrap();
    let work = d.path().join("from-env");
    let run = |seed: &str| {
        let out = Command::new(env!("CARGO_BIN_EXE_oilca"))
            .arg("--config")
            .arg(d.path().join("tiny.cfg"))
            .args(["--seed", seed, "gen-data"])
            .env("OILCA_WORKDIR", &work)
            .output()
            .unwrap();
        ok(&out);
        fs::read(work.join("data/dataset.bin")).unwrap()
    };
    let s1 = run("1");
    let s2 = run("2");
    assert_ne!(s1, s2);
    assert_eq!(run("1"), s1);

    let out = Command::new(env!("CARGO_BIN_EXE_oilca")).arg("--config").arg(d.path().join("tiny.cfg")).args(["--seed", "7", "show-config"]).output().unwrap();
    assert!(String::from_utf8_lossy(&out.stdout).contains("master_seed = 7"));
}
