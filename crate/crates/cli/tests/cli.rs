use std::path::Path;
use std::process::{Command, Output};

fn cef(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cef"))
        .args(args)
        .env_remove("CEF_THREADS")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn build_toy(dir: &Path, scenario: &str) -> String {
    let out = dir.join(scenario);
    let o = cef(&[
        "dataset", "build", "--out", out.to_str().unwrap(), "--scenario", scenario, "--gammas", "0.6",
        "--qualities", "50", "--patch-size", "32", "--train-size", "12", "--val-size", "4", "--test-size", "4",
        "--seed", "2",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("entries 40"), "{}", stdout(&o));
    out.join("manifest.csv").to_string_lossy().into_owned()
}

#[test]
fn no_arguments_prints_usage() {
    let o = cef(&[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage"));
}

#[test]
fn help_succeeds() {
    let o = cef(&["--help"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("gradcheck"));
}

#[test]
fn unknown_command_and_bad_flag_codes() {
    let o = cef(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(3));
    let o = cef(&["analyze", "dmax-curve", "--from", "x", "--to", "3", "--steps", "4"]);
    assert_eq!(o.status.code(), Some(4));
    assert_eq!(stderr(&o).lines().count(), 1, "{}", stderr(&o));
}

#[test]
fn dmax_curve_table() {
    let o = cef(&["analyze", "dmax-curve", "--from", "0.2", "--to", "3", "--steps", "100"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "gamma,dmax");
    assert_eq!(lines.len(), 101);
    assert!(lines[1].starts_with("0.200000,"));
    assert!(lines[100].starts_with("3.000000,"));
}

#[test]
fn module_errors_exit_one() {
    let o = cef(&["analyze", "dmax-curve", "--from", "2", "--to", "1", "--steps", "3"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error:"));
    assert_eq!(stderr(&o).lines().count(), 1);
    let o = cef(&["baseline", "--manifest", "/nonexistent/manifest.csv"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn config_file_keys() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.conf");
    std::fs::write(&bad, "colour = red\n").unwrap();
    let o = cef(&["--config", bad.to_str().unwrap(), "analyze", "dmax-curve", "--from", "0.5", "--to", "2", "--steps", "3"]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("colour"));
}

#[test]
fn bad_thread_count() {
    let o = Command::new(env!("CARGO_BIN_EXE_cef"))
        .args(["analyze", "dmax-curve", "--from", "0.5", "--to", "2", "--steps", "3"])
        .env("CEF_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn gradcheck_hcnn() {
    let o = cef(&["gradcheck", "--model", "hcnn", "--seed", "1"]);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    let line = stdout(&o).lines().find(|l| l.starts_with("max_rel_error")).unwrap().to_string();
    let v: f64 = line.split_whitespace().nth(1).unwrap().parse().unwrap();
    assert!(v < 1e-4);
}

#[test]
fn pipeline_wiring() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = build_toy(dir.path(), "plain");
    let conf = dir.path().join("train.conf");
    std::fs::write(&conf, "batch_size = 8\nmax_iter = 6\nval_every = 3\nbase_lr = 0.01\n").unwrap();
    let ckpt = dir.path().join("h.cef");
    let log = dir.path().join("log.csv");
    let o = cef(&[
        "--config", conf.to_str().unwrap(), "train", "--model", "hcnn", "--manifest", &manifest, "--out",
        ckpt.to_str().unwrap(), "--log", log.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().next(), Some("iteration,val_accuracy,val_loss"));
    assert_eq!(stdout(&o).lines().count(), 4);
    assert_eq!(std::fs::read_to_string(&log).unwrap().lines().count(), 7);
    assert!(dir.path().join("h.best.cef").exists());

    let o = cef(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--manifest", &manifest, "--split", "test"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("model,hcnn"));
    assert!(stdout(&o).contains("split,test"));
    let again = cef(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--manifest", &manifest, "--split", "test"]);
    assert_eq!(o.stdout, again.stdout);

    let root = Path::new(&manifest).parent().unwrap();
    let first = std::fs::read_to_string(&manifest).unwrap().lines().nth(1).unwrap().split(',').nth(1).unwrap().to_string();
    let img = root.join(first);
    let img = img.to_str().unwrap();
    let o = cef(&["detect", "--checkpoint", ckpt.to_str().unwrap(), "--mode", "histogram", img, img]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().count(), 3);
    let o = cef(&["detect", "--checkpoint", ckpt.to_str().unwrap(), "--mode", "pixel", img]);
    assert_eq!(o.status.code(), Some(1));

    let o = cef(&["baseline", "--manifest", &manifest]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("model,gap_baseline"));

    let o = cef(&["analyze", "gap-stats", "--manifest", &manifest]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().next(), Some("gap_count,original,gamma_0.6"));
}

#[test]
fn seed_determines_dataset() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ma = build_toy(a.path(), "anti");
    let mb = build_toy(b.path(), "anti");
    assert_eq!(std::fs::read(ma).unwrap(), std::fs::read(mb).unwrap());
}
