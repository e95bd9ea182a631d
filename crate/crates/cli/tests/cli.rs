use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use spdpose::train::{Checkpoint, TRAIN_LOG_HEADER};

const TINY: [&str; 10] = ["--n-train", "16", "--n-val", "4", "--n-test", "6", "--batch-size", "4", "--n-pairs", "200"];

fn spdpose(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spdpose"))
        .args(args)
        .args(TINY)
        .arg("--out")
        .arg(out)
        .env_remove("SPDPOSE_OUT_DIR")
        .output()
        .expect("spawn spdpose")
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = spdpose(out, args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn error_line(o: &Output) -> String {
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    let line = err.lines().last().unwrap_or_default().to_string();
    assert!(line.starts_with("error["), "not a classed error: {err}");
    line
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    fs::read(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

#[test]
fn generate_writes_counts_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let stdout = ok(&a, &["generate"]);
    assert!(stdout.contains("train 16 val 4 test 6"), "{stdout}");
    ok(&b, &["generate"]);
    assert_eq!(read(a.join("dataset/manifest.txt")), read(b.join("dataset/manifest.txt")));
    assert_eq!(fs::read_dir(a.join("dataset/images")).unwrap().count(), 26);
}

#[test]
fn default_dataset_has_documented_split_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_spdpose"))
        .args(["generate", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("train 2000 val 200 test 500"));
    assert_eq!(fs::read_dir(dir.path().join("dataset/images")).unwrap().count(), 2700);
}

#[test]
fn unwritable_output_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let line = error_line(&spdpose(&blocker.join("sub"), &["generate"]));
    assert!(line.starts_with("error[IoError]"), "{line}");
}

#[test]
fn bad_config_values_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "lr_adam = -1.0\n").unwrap();
    let line = error_line(&spdpose(dir.path(), &["train", "--config", cfg.to_str().unwrap()]));
    assert!(line.starts_with("error[ConfigError]"), "{line}");
    let line = error_line(&spdpose(dir.path(), &["train", "--variant", "nope"]));
    assert!(line.starts_with("error[ConfigError]"), "{line}");
}

#[test]
fn config_file_and_flags_combine() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "variant = \"euler_spd3\"\nepochs = 1\nseed = 5\n").unwrap();
    let out = dir.path().join("run");
    let stdout = ok(&out, &["train", "--config", cfg.to_str().unwrap(), "--seed", "6"]);
    assert!(stdout.contains("variant euler_spd3 epochs 1"), "{stdout}");
    let ck = Checkpoint::load(&out.join("checkpoint_last.json")).unwrap();
    assert_eq!(ck.config.seed, 6);
}

#[test]
fn train_smoke_run_writes_log_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["train", "--epochs", "1"]);
    let log = String::from_utf8(read(dir.path().join("train_log.csv"))).unwrap();
    let mut lines = log.lines();
    assert_eq!(lines.next().unwrap(), TRAIN_LOG_HEADER.join(","));
    assert_eq!(lines.count(), 1);
    let last = Checkpoint::load(&dir.path().join("checkpoint_last.json")).unwrap();
    let best = Checkpoint::load(&dir.path().join("checkpoint_best.json")).unwrap();
    assert_eq!(last.state.epoch, 1);
    assert_eq!(best.state.best_epoch, Some(0));
}

#[test]
fn variant_flag_selects_the_head() {
    let dir = tempfile::tempdir().unwrap();
    let (spd, mlp) = (dir.path().join("spd"), dir.path().join("mlp"));
    ok(&spd, &["train", "--epochs", "1"]);
    ok(&mlp, &["train", "--epochs", "1", "--variant", "mlp_head"]);
    let spd = Checkpoint::load(&spd.join("checkpoint_last.json")).unwrap();
    let mlp = Checkpoint::load(&mlp.join("checkpoint_last.json")).unwrap();
    assert_eq!(spd.state.params.stiefel.len(), 4);
    assert!(mlp.state.params.stiefel.is_empty());
    assert!(mlp.state.params.euclidean.iter().any(|t| t.name.starts_with("mlp.")));
}

#[test]
fn training_is_byte_reproducible_and_resume_matches() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    ok(&a, &["train", "--epochs", "2"]);
    ok(&b, &["train", "--epochs", "2"]);
    for f in ["train_log.csv", "checkpoint_last.json", "checkpoint_best.json"] {
        assert_eq!(read(a.join(f)), read(b.join(f)), "{f}");
    }
    ok(&c, &["train", "--epochs", "1"]);
    let ck = c.join("checkpoint_last.json");
    ok(&c, &["train", "--resume", ck.to_str().unwrap(), "--epochs", "2"]);
    assert_eq!(read(a.join("train_log.csv")), read(c.join("train_log.csv")));
    assert_eq!(read(a.join("checkpoint_last.json")), read(c.join("checkpoint_last.json")));
}

#[test]
fn eval_writes_metrics_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["train", "--epochs", "1"]);
    let ck = dir.path().join("checkpoint_best.json");
    let (e1, e2) = (dir.path().join("e1"), dir.path().join("e2"));
    let stdout = ok(&e1, &["eval", "--checkpoint", ck.to_str().unwrap(), "--split", "test"]);
    assert!(stdout.contains("split test n 6"), "{stdout}");
    ok(&e2, &["eval", "--checkpoint", ck.to_str().unwrap()]);
    let text = String::from_utf8(read(e1.join("metrics_test.csv"))).unwrap();
    assert_eq!(text, String::from_utf8(read(e2.join("metrics_test.csv"))).unwrap());
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "kind,id,add_m,adds_m,rotation_err_deg,translation_err_m,add_accuracy,auc_add");
    assert_eq!(lines.len(), 1 + 6 + 1);
    assert!(lines[7].starts_with("summary,"));

    let line = error_line(&spdpose(dir.path(), &["eval", "--checkpoint", "/definitely/missing.json"]));
    assert!(line.starts_with("error[IoError]") && line.contains("missing.json"), "{line}");
    let junk = dir.path().join("junk.json");
    fs::write(&junk, "{}").unwrap();
    let line = error_line(&spdpose(dir.path(), &["eval", "--checkpoint", junk.to_str().unwrap()]));
    assert!(line.starts_with("error[FormatError]"), "{line}");
}

#[test]
fn analyze_writes_correlation_csv() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let stdout = ok(&a, &["analyze"]);
    ok(&b, &["analyze"]);
    let text = String::from_utf8(read(a.join("correlation.csv"))).unwrap();
    assert_eq!(text.as_bytes(), read(b.join("correlation.csv")));
    assert_eq!(text.lines().next().unwrap(), "bin_center,mean_cov_dist,mean_cosine_dist,mean_euclid_dist,count");
    let counts: usize = text.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse::<usize>().unwrap()).sum();
    assert_eq!(counts, 200);
    let nums: Vec<f64> = stdout
        .lines()
        .next()
        .unwrap()
        .split_whitespace()
        .filter_map(|w| w.parse().ok())
        .collect();
    assert_eq!(nums.len(), 3);
    assert!(nums.iter().all(|r| (-1.0..=1.0).contains(r)), "{stdout}");
}

#[test]
fn ablate_writes_one_row_per_variant() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["ablate", "--epochs", "1"]);
    let text = String::from_utf8(read(dir.path().join("ablation.csv"))).unwrap();
    let rows: Vec<Vec<&str>> = text.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 5);
    let names: Vec<&str> = rows.iter().map(|r| r[0]).collect();
    assert_eq!(names, ["full_6d", "euler_spd3", "mlp_head", "channel_cov", "log_tangent"]);
    assert_eq!(rows.iter().filter(|r| r[1] == "true").map(|r| r[0]).collect::<Vec<_>>(), ["full_6d"]);
    assert!(rows.iter().all(|r| r[3] == rows[0][3] && r[3].len() == 64));
}

#[test]
fn output_dir_defaults_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let target = dir.path().join("from-env");
    let o = Command::new(env!("CARGO_BIN_EXE_spdpose"))
        .args(["analyze"])
        .args(TINY)
        .env("SPDPOSE_OUT_DIR", &target)
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(target.join("correlation.csv").exists());
}
