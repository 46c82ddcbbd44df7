use std::path::Path;
use std::process::{Command, Output};

fn gean(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gean")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn value<'a>(text: &'a str, key: &str) -> Option<&'a str> {
    text.lines().find_map(|l| l.strip_prefix(key)?.strip_prefix('='))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn synth_train_infer_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ckpt, ced) = (dir.path().join("d"), dir.path().join("ckpt"), dir.path().join("ced.csv"));

    let out = gean(&["synth", "--n", "12", "--seed", "0", "--size", "32", "--out", p(&data)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));

    let out = gean(&["train", "--data", p(&data), "--epochs", "2", "--out", p(&ckpt)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(value(&stdout(&out), "epoch.1.loss").is_some());
    assert!(ckpt.exists());

    let out = gean(&["eval", "--checkpoint", p(&ckpt), "--data", p(&data), "--ced", p(&ced)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let nme: f64 = value(&stdout(&out), "nme").unwrap().parse().unwrap();
    assert!(nme.is_finite() && nme >= 0.0);
    let csv = std::fs::read_to_string(&ced).unwrap();
    assert!(csv.starts_with("threshold,fraction\n"));
    assert_eq!(csv.lines().count(), 52);

    let lm = dir.path().join("pred.lm");
    let out = gean(&[
        "infer", "--checkpoint", p(&ckpt), "--image", p(&data.join("00000.pgm")), "--out", p(&lm), "--k-test", "2",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(value(&stdout(&out), "landmark.20").is_some());
    assert_eq!(gean::LandmarkSet::load(&lm).unwrap().len(), 21);
}

#[test]
fn generate_writes_faces_and_displacements() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    assert_eq!(gean(&["synth", "--n", "1", "--size", "32", "--out", p(&data)]).status.code(), Some(0));
    let out_dir = dir.path().join("faces");
    let out = gean(&[
        "generate",
        "--image", p(&data.join("00000.pgm")),
        "--landmarks", p(&data.join("00000.lm")),
        "--k", "3",
        "--variant", "adv",
        "--out", p(&out_dir),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(value(&stdout(&out), "branches"), Some("3"));
    for i in 0..3 {
        assert!(out_dir.join(format!("face_{i}.pgm")).exists());
        assert!(out_dir.join(format!("face_{i}.lm")).exists());
        assert!(out_dir.join(format!("displacement_{i}.txt")).exists());
    }
}

#[test]
fn config_file_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    assert_eq!(gean(&["synth", "--n", "4", "--size", "32", "--out", p(&data)]).status.code(), Some(0));
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# tiny run\nepochs = 1\nbatch_size = 2\ndetector_widths = 4,6\n").unwrap();
    let ckpt = dir.path().join("ckpt");
    let out = gean(&["--config", p(&cfg), "--set", "k_train=1", "train", "--data", p(&data), "--out", p(&ckpt)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let ck = gean::detector::Checkpoint::load(&ckpt).unwrap();
    assert_eq!(ck.meta("config.epochs"), Some("1"));
    assert_eq!(ck.meta("config.k_train"), Some("1"));
    assert_eq!(ck.detector.config().widths, [4, 6]);

    std::fs::write(&cfg, "no_such_key = 3\n").unwrap();
    let out = gean(&["--config", p(&cfg), "train", "--data", p(&data), "--out", p(&ckpt)]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(gean(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(gean(&["train", "--bogus"]).status.code(), Some(1));
    assert_eq!(gean(&["eval", "--checkpoint", "/nonexistent/ckpt", "--data", "/nonexistent/d"]).status.code(), Some(1));
    assert_eq!(gean(&["train", "--data", "/tmp", "--out", "x", "--variant", "nope"]).status.code(), Some(1));
    assert_eq!(gean(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_failures_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("ckpt");
    std::fs::write(&bad, b"not a checkpoint").unwrap();
    let data = dir.path().join("d");
    assert_eq!(gean(&["synth", "--n", "1", "--size", "32", "--out", p(&data)]).status.code(), Some(0));
    let out = gean(&["eval", "--checkpoint", p(&bad), "--data", p(&data)]);
    assert_eq!(out.status.code(), Some(2));
}
