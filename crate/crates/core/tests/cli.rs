use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use dpdepth::dpsim::{fmap, read_sample, MANIFEST_NAME};

const SMALL: [&str; 8] = ["--set", "model.base_channels=4", "--set", "model.expansion=2", "--set", "optim.steps=2", "--set", "optim.log_every=1"];

fn dpdepth(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dpdepth")).args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(dpdepth(&[]).status.code(), Some(1));
    assert_eq!(dpdepth(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(dpdepth(&["synth", "--n"]).status.code(), Some(1));
    assert_eq!(dpdepth(&["--help"]).status.code(), Some(0));
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    let r = dpdepth(&["synth", "--n", "2", "--out", s(&out), "--set", "model.colour=red"]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("model.colour"));
    let cfg = dir.path().join("bad.txt");
    fs::write(&cfg, "sim.height = 48\n").unwrap();
    assert_eq!(dpdepth(&["synth", "--n", "2", "--out", s(&out), "--config", s(&cfg)]).status.code(), Some(2));
    assert_eq!(dpdepth(&["eval", "--checkpoint", "/nonexistent.dpck", "--data", s(&out)]).status.code(), Some(2));
}

#[test]
fn synth_train_eval_infer() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let r = dpdepth(&["synth", "--n", "10", "--seed", "7", "--out", s(&data)]);
    assert_eq!(r.status.code(), Some(0), "{}", String::from_utf8_lossy(&r.stderr));
    assert_eq!(fs::read_to_string(data.join(MANIFEST_NAME)).unwrap().lines().count(), 10);

    let cfg = dir.path().join("run.txt");
    fs::write(&cfg, "# overridden below\noptim.steps = 50\n").unwrap();
    let runs = dir.path().join("runs");
    let mut args = vec!["train", "--data", s(&data), "--stage", "no-cmtl", "--out", s(&runs), "--config", s(&cfg)];
    args.extend(SMALL);
    let r = dpdepth(&args);
    assert_eq!(r.status.code(), Some(0), "{}", String::from_utf8_lossy(&r.stderr));
    let stdout = String::from_utf8_lossy(&r.stdout);
    assert!(stdout.lines().any(|l| l.starts_with("1\t") && l[2..].parse::<f64>().is_ok()));
    assert!(String::from_utf8_lossy(&r.stderr).contains("# optim.steps = 2"));
    assert!(fs::read_to_string(runs.join("config.txt")).unwrap().contains("model.base_channels = 4"));
    let log = fs::read_to_string(runs.join("stage3.log")).unwrap();
    assert_eq!(log.lines().count(), 2);

    let ckpt = runs.join("stage3.dpck");
    let mut args = vec!["eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--split", "all"];
    args.extend(SMALL);
    let r = dpdepth(&args);
    assert_eq!(r.status.code(), Some(0));
    let table = String::from_utf8_lossy(&r.stdout).to_string();
    assert_eq!(table.lines().count(), 2);
    assert!(table.lines().nth(1).unwrap().ends_with(",10"));

    // The default-size network does not match the checkpoint.
    assert_eq!(dpdepth(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data)]).status.code(), Some(2));

    let sample = data.join("sample_00000");
    let mut args = vec!["infer", "--checkpoint", s(&ckpt), "--sample", s(&sample)];
    args.extend(SMALL);
    assert_eq!(dpdepth(&args).status.code(), Some(0));
    let depth = fmap::read(&sample.join("depth.fmap")).unwrap();
    assert_eq!(depth.shape(), &[64, 64, 1]);
    assert!(read_sample(&sample).is_ok());
}

#[test]
fn train_on_missing_data_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let r = dpdepth(&["train", "--data", s(&dir.path().join("none")), "--out", s(dir.path())]);
    assert_eq!(r.status.code(), Some(2));
}
