use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hardmask"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// A quick profile: twelve synthetic utterances, six steps.
fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("run.toml");
    let text = format!(
        "out_dir = {out:?}\n\
         [synth]\nnum_utterances = 12\n\
         [train]\ntotal_steps = 6\nbatch_size = 4\n\
         [train.optim]\nwarmup_steps = 2\n\
         [train.mask]\ntotal_epochs = 3\n\
         [harness.probe]\nepochs = 20\n\
         {extra}",
        out = dir.join("out").display().to_string(),
    );
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn missing_config_exits_one_and_names_the_path() {
    let o = run(&["pretrain", "--config", "/no/such/dir/run.toml"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("/no/such/dir/run.toml"), "{}", stderr(&o));
}

#[test]
fn unknown_key_exits_one_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[train.extra]\nfoo = 1\n");
    let o = run(&["pretrain", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn bad_usage_exits_one() {
    assert_eq!(run(&["pretrain", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn zero_steps_gives_an_empty_metrics_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let o = run(&["pretrain", "--config", cfg.to_str().unwrap(), "--total-steps", "0"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let metrics = std::fs::read(dir.path().join("out/metrics.jsonl")).unwrap();
    assert!(metrics.is_empty());
}

#[test]
fn numerical_blow_up_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let o = run(&["pretrain", "--config", cfg.to_str().unwrap(), "--set", "train.optim.lr=1e30"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn repeated_runs_and_snapshot_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let c = dir.path().join("c");
    for out in [&a, &b] {
        let o = run(&["pretrain", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "4"]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    let ma = std::fs::read(a.join("metrics.jsonl")).unwrap();
    assert_eq!(ma, std::fs::read(b.join("metrics.jsonl")).unwrap());
    assert_eq!(String::from_utf8_lossy(&ma).lines().count(), 6);

    let snap = a.join("config.snapshot");
    let o = run(&["pretrain", "--config", snap.to_str().unwrap(), "--out", c.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(ma, std::fs::read(c.join("metrics.jsonl")).unwrap());
    assert!(a.join("checkpoints").read_dir().unwrap().count() >= 1);
    assert!(a.join("reports/loss_landscape.csv").exists());
}

#[test]
fn resume_continues_the_metrics_stream() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let cfg_s = cfg.to_str().unwrap();
    let full = dir.path().join("full");
    let part = dir.path().join("part");
    let common = ["--set", "train.checkpoint_every=3"];
    let o = run(&[&["pretrain", "--config", cfg_s, "--out", full.to_str().unwrap()][..], &common].concat());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = run(&[&["pretrain", "--config", cfg_s, "--out", part.to_str().unwrap()][..], &common].concat());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    // pretend the second run stopped after step 3, then resume it
    let ckpt = part.join("checkpoints/step_0000003.bin");
    assert!(ckpt.exists());
    let mut lines: Vec<String> = std::fs::read_to_string(part.join("metrics.jsonl"))
        .unwrap()
        .lines()
        .map(str::to_string)
        .collect();
    lines.truncate(5);
    std::fs::write(part.join("metrics.jsonl"), lines.join("\n") + "\n").unwrap();
    let o = run(&[
        &["pretrain", "--config", cfg_s, "--out", part.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap()][..],
        &common,
    ]
    .concat());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(
        std::fs::read(full.join("metrics.jsonl")).unwrap(),
        std::fs::read(part.join("metrics.jsonl")).unwrap()
    );
}

#[test]
fn evaluation_commands_write_their_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let cfg_s = cfg.to_str().unwrap();
    let o = run(&["pretrain", "--config", cfg_s]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let ckpt = dir.path().join("out/checkpoints/step_0000006.bin");
    let ck = ckpt.to_str().unwrap();

    let o = run(&["degrade", "--config", cfg_s, "--checkpoint", ck, "--percentages", "0.1,0.2,0.3,0.4,0.5"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("out/reports/degrade.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "percentage,random,selective");
    assert_eq!(lines.len(), 6);
    assert!(lines[1..].iter().all(|l| l.split(',').count() == 3));
    assert!(dir.path().join("out/reports/ranking.json").exists());

    let o = run(&["mask-report", "--config", cfg_s, "--checkpoint", ck]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("out/reports/mask_report.csv")).unwrap();
    // 3 epochs x batch of 4, plus the header
    assert_eq!(csv.lines().count(), 1 + 3 * 4);

    let o = run(&["probe", "--config", cfg_s, "--checkpoint", ck]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let probe: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("out/reports/probe.json")).unwrap()).unwrap();
    assert!(probe["accuracy"].as_f64().unwrap() >= 0.0);

    let o = run(&["gradcheck", "--checkpoint", ck, "--config", cfg_s, "--coords", "8"]);
    assert!(matches!(o.status.code(), Some(0) | Some(2)), "{}", stderr(&o));
}

#[test]
fn mask_report_over_ten_epochs_has_ten_b_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let cfg_s = cfg.to_str().unwrap();
    let o = run(&["pretrain", "--config", cfg_s, "--set", "train.mask.total_epochs=10", "--total-steps", "10"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let ck = dir.path().join("out/checkpoints/step_0000010.bin");
    let o = run(&[
        "mask-report",
        "--config",
        cfg_s,
        "--set",
        "train.mask.total_epochs=10",
        "--total-steps",
        "10",
        "--checkpoint",
        ck.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("out/reports/mask_report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 10 * 4);
}

#[test]
fn incompatible_checkpoint_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let cfg_s = cfg.to_str().unwrap();
    assert_eq!(run(&["pretrain", "--config", cfg_s]).status.code(), Some(0));
    let ck = dir.path().join("out/checkpoints/step_0000006.bin");
    let o = run(&["probe", "--config", cfg_s, "--checkpoint", ck.to_str().unwrap(), "--set", "train.model.ff_dim=96"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn gradcheck_on_the_tiny_profile_passes() {
    let o = run(&["gradcheck"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = String::from_utf8_lossy(&o.stdout);
    let err: f64 = text
        .split_whitespace()
        .nth(3)
        .and_then(|v| v.parse().ok())
        .unwrap_or_else(|| panic!("unexpected output {text}"));
    assert!(err < 1e-3);
}
