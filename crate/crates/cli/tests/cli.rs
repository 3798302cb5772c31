use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use scoregen::models::Checkpoint;
use scoregen_cli::config::{MethodKey, RunConfig};
use scoregen_cli::pipeline;

/// Small Lorenz63 run: 1000 recorded rows, narrow nets, few epochs.
const TINY: &str = r#"
seed = 3
[data]
duration = 300.0
[model]
hidden = [8, 8]
[train]
epochs = 2
batch_size = 100
members = 4
lr_grid = [0.01, 0.001]
lr_disc_grid = [0.01, 0.001]
[eval]
members = 20
"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_scoregen"));
    c.env_remove("SCOREGEN_OUT");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn tiny_config(dir: &Path, extra: &str) -> PathBuf {
    let p = dir.join("run.toml");
    std::fs::write(&p, format!("{TINY}{extra}")).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn print_defaults_parses_back() {
    for preset in ["lorenz63-paper", "lorenz96-paper"] {
        let o = run(&["--print-defaults", "--preset", preset]);
        assert!(o.status.success());
        let cfg = RunConfig::from_toml(&String::from_utf8(o.stdout).unwrap()).unwrap();
        assert_eq!(cfg, RunConfig::defaults_for(preset).unwrap());
    }
}

#[test]
fn config_errors_exit_2_without_output() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "[train]\nlearnin_rate = 0.1\n").unwrap();
    let out = tmp.path().join("out");
    let o = run(&["--config", s(&bad), "--out", s(&out), "train"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("learnin_rate"));
    assert!(!out.exists());

    let o = run(&["--out", s(&out), "simulate", "--preset", "lorenz84"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());

    let cfg = tiny_config(tmp.path(), "");
    let o = run(&["--config", s(&cfg), "--out", s(&out), "train", "--method", "variogram"]);
    // a one-component series has no component pairs for the variogram
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(!out.exists());

    let o = run(&["--out", s(&out), "reproduce", "lorenz63"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--accept-compute-budget"));
    assert!(!out.exists());
}

#[test]
fn simulate_is_byte_identical_and_honours_env_output() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let o = run(&["--out", s(&a), "simulate", "--preset", "lorenz63-paper", "--duration", "300"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("1000 rows x 1 components"));
    let o = bin()
        .env("SCOREGEN_OUT", &b)
        .args(["simulate", "--preset", "lorenz63-paper", "--duration", "300"])
        .output()
        .unwrap();
    assert!(o.status.success());
    let read = |d: &Path| std::fs::read(d.join("series.txt")).unwrap();
    assert_eq!(read(&a), read(&b));
}

#[test]
fn zero_learning_rate_keeps_initial_parameters() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tiny_config(tmp.path(), "");
    let out = tmp.path().join("t");
    let o = run(&["--config", s(&cfg_path), "--out", s(&out), "train", "--lr", "0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ckpt = Checkpoint::load(&out.join("generator.ckpt")).unwrap();
    let cfg = RunConfig::from_toml(TINY).unwrap();
    let (init, _) = pipeline::initial_models(&cfg, MethodKey::Energy, 1, cfg.seed).unwrap();
    assert_eq!(&ckpt.net, init.net());
    let curve = std::fs::read_to_string(out.join("val_curve.csv")).unwrap();
    assert_eq!(curve.lines().next().unwrap(), "epoch,train_loss,val_score");
    assert_eq!(curve.lines().count(), 3);
}

#[test]
fn sweeps_cover_the_grids() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), "");
    for (method, count) in [("energy", 2), ("gan", 4)] {
        let out = tmp.path().join(method);
        let o = run(&["--config", s(&cfg), "--out", s(&out), "train", "--method", method, "--sweep", "--jobs", "2"]);
        assert!(o.status.success(), "{}", stderr(&o));
        let sweep: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("sweep.json")).unwrap()).unwrap();
        assert_eq!(sweep.as_array().unwrap().len(), count);
        assert_eq!(out.join("discriminator.ckpt").exists(), method == "gan");
    }
}

#[test]
fn evaluate_oracle_checkpoint_and_mismatch() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), "");
    let o = run(&["--config", s(&cfg), "--out", s(&tmp.path().join("or")), "evaluate", "--oracle"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(tmp.path().join("or/evaluation.csv")).unwrap();
    assert_eq!(csv, "method,cal_error,nrmse,r2\nOracle,0.5000,0.0000,1.0000\n");

    let tr = tmp.path().join("tr");
    assert!(run(&["--config", s(&cfg), "--out", s(&tr), "train"]).status.success());
    let ckpt = tr.join("generator.ckpt");
    let mut reports = Vec::new();
    for name in ["e1", "e2"] {
        let dir = tmp.path().join(name);
        let o = run(&["--config", s(&cfg), "--out", s(&dir), "evaluate", "--checkpoint", s(&ckpt)]);
        assert!(o.status.success(), "{}", stderr(&o));
        let header = std::fs::read_to_string(dir.join("forecasts.csv")).unwrap().lines().next().unwrap().to_string();
        assert_eq!(header, "case,verification_0,mean_0,median_0,lower_0,upper_0");
        reports.push(std::fs::read(dir.join("evaluation.json")).unwrap());
    }
    assert_eq!(reports[0], reports[1]);

    let bad = tmp.path().join("bad");
    let o = run(&["--config", s(&cfg), "--out", s(&bad), "evaluate", "--checkpoint", s(&ckpt), "--preset", "lorenz96-paper", "--duration", "100"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("[10, 1]") && err.contains("[10, 8]"), "{err}");
    assert!(!bad.exists());
}

#[test]
fn reproduce_writes_deterministic_partial_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), "");
    let mut texts = Vec::new();
    for name in ["r1", "r2"] {
        let out = tmp.path().join(name);
        let o = run(&[
            "--config",
            s(&cfg),
            "--out",
            s(&out),
            "reproduce",
            "lorenz63",
            "--accept-compute-budget",
            "--methods",
            "energy,gan",
        ]);
        // two epochs of training cannot meet the tolerances
        assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
        for f in ["report.md", "report.csv", "report.json", "energy/generator.ckpt", "gan/evaluation.json"] {
            assert!(out.join(f).exists(), "{f}");
        }
        texts.push(std::fs::read(out.join("report.md")).unwrap());
        texts.push(std::fs::read(out.join("report.json")).unwrap());
    }
    assert_eq!(texts[0], texts[2]);
    assert_eq!(texts[1], texts[3]);
    let md = String::from_utf8(texts[0].clone()).unwrap();
    assert!(md.contains("| Energy |") && md.contains("| GAN |") && !md.contains("| Kernel |"));
    assert!(md.contains("Energy cal_error < GAN cal_error"));
}
