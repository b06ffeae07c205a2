use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn flatgrad(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flatgrad"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn mnist_dir() -> Option<PathBuf> {
    let dir = std::env::var_os("FLATGRAD_DATA")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"));
    dir.join("t10k-images-idx3-ubyte").exists().then_some(dir)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gradcheck_passes_on_toy_models() {
    let o = flatgrad(&["gradcheck", "--models", "20"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    assert_eq!(out.matches(": pass").count(), 3, "{out}");
}

#[test]
fn conflicting_config_is_rejected() {
    let o = flatgrad(&[
        "train",
        "--arch",
        "C",
        "--mode",
        "adv_train",
        "--lambda",
        "5",
    ]);
    assert!(!o.status.success());
    let o = flatgrad(&[
        "train",
        "--arch",
        "C",
        "--mode",
        "plain",
        "--precision",
        "32",
    ]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("precision"));
}

#[test]
fn fetch_data_verifies_installed_files() {
    let Some(dir) = mnist_dir() else { return };
    let tmp = tempfile::tempdir().unwrap();
    let o = flatgrad(&["fetch-data", "--dir", s(tmp.path()), "--source", s(&dir)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o).matches("installed, checksum ok").count(), 4);
    let o = flatgrad(&["fetch-data", "--dir", s(tmp.path()), "--source", s(&dir)]);
    assert_eq!(stdout(&o).matches("present, checksum ok").count(), 4);
}

#[test]
fn train_attack_eval_and_lock_rerun() {
    let Some(dir) = mnist_dir() else { return };
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let cfg = tmp.path().join("small.cfg");
    std::fs::write(
        &cfg,
        "# two-cell grid\narch = C\nmode = adv_train_gp\nlambda = 0, 1\npenalty = colsum_abs\nepochs = 1\nstop_rule = off\ntrain_subset = 128\n",
    )
    .unwrap();
    let o = flatgrad(&[
        "train",
        "--config",
        s(&cfg),
        "--data-dir",
        s(&dir),
        "--out-dir",
        s(&out),
        "--batch-size",
        "64",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o).matches("cell ").count(), 2);
    for f in [
        "results.csv",
        "table.txt",
        "config.lock",
        "models/cell1_seed0.ckpt",
        "models/cell2_seed0.ckpt",
    ] {
        assert!(out.join(f).exists(), "{f}");
    }

    let ckpt = out.join("models/cell2_seed0.ckpt");
    let o = flatgrad(&[
        "attack",
        "--model",
        s(&ckpt),
        "--data-dir",
        s(&dir),
        "--limit",
        "200",
        "--epsilon",
        "0.05",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("invariant violations 0"));
    let o = flatgrad(&["eval", "--model", s(&ckpt), "--data-dir", s(&dir)]);
    assert!(o.status.success());
    assert!(stdout(&o).starts_with("clean "));

    let again = tmp.path().join("again");
    let o = flatgrad(&[
        "repro",
        "--lock",
        s(&out.join("config.lock")),
        "--data-dir",
        s(&dir),
        "--out-dir",
        s(&again),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in [
        "results.csv",
        "diagnostics/cell1_seed0.csv",
        "diagnostics/cell2_seed0.csv",
    ] {
        assert_eq!(
            std::fs::read(out.join(f)).unwrap(),
            std::fs::read(again.join(f)).unwrap(),
            "{f}"
        );
    }
}
