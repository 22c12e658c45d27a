use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 3
epochs = 2
batch_size = 32

[dataset]
kind = "blobs"
n = 256
test_n = 128
noise = 0.25

[model]
kind = "mlp"
hidden = [8]

[optimizer]
lr = 0.05
momentum = 0.9

[loss]
kind = "at"

[attack]
epsilon = 0.15
step_size = 0.0375
steps = 4

[budget]
n_o = 0
n_r = 1
n_b = 4

[eval]
steps = 5
"#;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bullettrain")).args(args).output().unwrap()
}

fn write_config(dir: &Path, body: &str) -> String {
    let p = dir.join("cfg.toml");
    fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn train_writes_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("run");
    let o = bin(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["metrics.csv", "summary.json", "manifest.json", "checkpoint.json"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let summary: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(summary["mode"], "bullettrain");
    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);

    let o = bin(&[
        "eval",
        "--config",
        &cfg,
        "--checkpoint",
        out.join("checkpoint.json").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let eval: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(eval["clean_acc"], summary["clean_acc"]);
    assert_eq!(eval["robust_acc"], summary["robust_acc"]);
}

#[test]
fn same_seed_gives_identical_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = bin(&["train", "--config", &cfg, "--seed", "11", "--out", out.to_str().unwrap()]);
        assert_eq!(code(&o), 0);
    }
    assert_eq!(fs::read(a.join("metrics.csv")).unwrap(), fs::read(b.join("metrics.csv")).unwrap());
    assert_eq!(
        fs::read(a.join("checkpoint.json")).unwrap(),
        fs::read(b.join("checkpoint.json")).unwrap()
    );
}

#[test]
fn compare_requires_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("cmp");
    let o = bin(&["compare", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 2);

    let o = bin(&["compare", "--config", &cfg, "--seed", "5", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let cmp: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let base = cmp["baseline"]["cost_units"].as_f64().unwrap();
    let bt = cmp["bullettrain"]["cost_units"].as_f64().unwrap();
    assert_eq!(cmp["measured_speedup"].as_f64().unwrap(), base / bt);
    assert!(out.join("comparison.json").exists());
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("x");
    let out = out.to_str().unwrap();
    assert_eq!(code(&bin(&["train", "--config", &cfg, "--out", out, "--set", "bogus=1"])), 2);
    assert_eq!(code(&bin(&["train", "--config", &cfg, "--out", out, "--set", "attack.epsilon=-1"])), 2);
    assert_eq!(code(&bin(&["train", "--config", &cfg])), 2);
    let bad = write_config(dir.path(), &TINY.replace("[budget]", "[budget]\nextra = 1"));
    assert_eq!(code(&bin(&["train", "--config", &bad, "--out", out])), 2);
}

#[test]
fn divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("x");
    let o = bin(&["train", "--config", &cfg, "--out", out.to_str().unwrap(), "--set", "optimizer.lr=1e12"]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn io_errors_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    let missing = dir.path().join("missing.toml");
    assert_eq!(code(&bin(&["train", "--config", missing.to_str().unwrap(), "--out", out.to_str().unwrap()])), 4);

    let mnist = TINY.replace(
        "kind = \"blobs\"\nn = 256\ntest_n = 128\nnoise = 0.25",
        &format!("kind = \"mnist\"\ndir = \"{}\"", dir.path().join("nothing").display()),
    );
    let cfg = write_config(dir.path(), &mnist);
    let o = bin(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nothing"));
}

#[test]
fn sweep_and_leaveoneout_write_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &TINY.replace("epochs = 2", "epochs = 1"));
    let out = dir.path().join("sweep");
    let o = bin(&[
        "sweep", "--config", &cfg, "--key", "mining.gamma", "--values", "0.7,0.9", "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);

    let out = dir.path().join("loo");
    let o = bin(&[
        "leaveoneout", "--config", &cfg, "--values", "2", "--left-out", "boundary,outlier",
        "--oracle-steps", "3", "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("leaveoneout.csv")).unwrap();
    assert!(csv.lines().count() >= 3, "{csv}");
}
