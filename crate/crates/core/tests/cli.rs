use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bmn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bmn"))
        .args(args)
        .env("BMN_LOG_LEVEL", "error")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Generates a split benchmark-style dataset and trains a small model on it.
fn trained_run(dir: &Path) -> std::path::PathBuf {
    let out = bmn(&[
        "generate", "--out-dir", s(dir), "--identities", "12", "--images", "8", "--held-out", "4", "--pairs-per-class", "40",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    fs::write(
        dir.join("run.toml"),
        "dataset = \"train.bmnds\"\noutput = \"run\"\n\n[model]\ninput_dim = 16\nd = 16\np = 1\nencoder_hidden = [32]\n\n[train]\nmax_iterations = 12\ncheckpoint_every = 5\n",
    )
    .unwrap();
    let out = bmn(&["train", "--config", s(&dir.join("run.toml"))]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let ckpt = dir.join("run/ckpt-00000012.bmnck");
    assert!(ckpt.exists());
    assert!(dir.join("run/ckpt-00000005.bmnck").exists());
    ckpt
}

#[test]
fn train_eval_verify_plot() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let ckpt = trained_run(d);
    let test = d.join("test.bmnds");

    let out = bmn(&["eval", "--ckpt", s(&ckpt), "--pairs", s(&d.join("pairs.txt")), "--dataset", s(&test), "--out", s(&d.join("report"))]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("accuracy:"));
    for f in ["roc.csv", "moments.csv", "histogram_z.csv", "histogram_zbar.csv", "summary.csv", "scores.csv"] {
        assert!(d.join("report").join(f).exists(), "{f}");
    }

    let out = bmn(&["verify", "--ckpt", s(&ckpt), "--dataset", s(&test), "--a", "0", "--b", "1"]);
    let label_line = stdout(&out).lines().next().unwrap_or("").to_string();
    match code(&out) {
        0 => assert_eq!(label_line, "label: matching"),
        1 => assert_eq!(label_line, "label: non-matching"),
        c => panic!("verify exited {c}"),
    }
    assert!(stdout(&out).contains("margin: "));
    assert!(stdout(&out).contains("z_bar: "));

    let out = bmn(&["plot", "--report", s(&d.join("report"))]);
    assert_eq!(code(&out), 0);
    for f in ["roc.svg", "histogram_z.svg", "histogram_zbar.svg"] {
        let svg = fs::read_to_string(d.join("report").join(f)).unwrap();
        assert!(svg.starts_with("<svg"), "{f}");
    }
}

#[test]
fn error_paths_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let ckpt = trained_run(d);
    let test = d.join("test.bmnds");

    assert_eq!(code(&bmn(&["verify", "--ckpt", s(&ckpt), "--dataset", s(&test), "--a", "0", "--b", "100000"])), 2);
    assert_eq!(code(&bmn(&["verify", "--ckpt", "/nonexistent.bmnck", "--dataset", s(&test), "--a", "0", "--b", "1"])), 2);
    assert_eq!(code(&bmn(&["verify", "--bogus"])), 2);
    assert_eq!(code(&bmn(&["frobnicate"])), 2);
    assert_eq!(code(&bmn(&[])), 2);

    fs::write(d.join("empty.txt"), "").unwrap();
    let out = bmn(&["eval", "--ckpt", s(&ckpt), "--pairs", s(&d.join("empty.txt")), "--dataset", s(&test)]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("empty class"));

    fs::write(d.join("bad.toml"), "dataset = \"x\"\noutput = \"y\"\nsurprise = 1\n[model]\ninput_dim = 16\nd = 16\np = 1\n").unwrap();
    assert_eq!(code(&bmn(&["train", "--config", s(&d.join("bad.toml"))])), 2);
    assert_eq!(code(&bmn(&["plot", "--report", s(d)])), 2);
    assert_eq!(code(&bmn(&["diagnose", "--config", s(&d.join("run.toml")), "--w-grid", "0,40"])), 2);
}

#[test]
fn help_exits_zero() {
    assert_eq!(code(&bmn(&["--help"])), 0);
    assert_eq!(code(&bmn(&["verify", "--help"])), 0);
}

#[test]
fn training_twice_gives_identical_checkpoints() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ca = fs::read(trained_run(a.path())).unwrap();
    let cb = fs::read(trained_run(b.path())).unwrap();
    assert_eq!(ca, cb);
}

#[test]
fn diagnose_writes_sweep_csv() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    trained_run(d);
    let out = bmn(&[
        "diagnose", "--config", s(&d.join("run.toml")), "--w-grid", "5,40", "--iterations", "4", "--held-out", "2", "--pairs-per-class", "10",
        "--out", s(&d.join("sw/sweep.csv")),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(d.join("sw/sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("w,status,steps,accuracy"));
    assert!(lines[1].starts_with("5,ok,4,"));
    let out = bmn(&["plot", "--report", s(&d.join("sw"))]);
    assert_eq!(code(&out), 0);
    assert!(d.join("sw/sweep_accuracy.svg").exists() && d.join("sw/sweep_moments.svg").exists());
}
