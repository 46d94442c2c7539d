//! Exit codes and an end-to-end run of the `adkd` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn adkd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_adkd"))
        .args(args)
        .env("ADKD_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn text(o: &Output) -> (String, String) {
    (
        String::from_utf8_lossy(&o.stdout).into_owned(),
        String::from_utf8_lossy(&o.stderr).into_owned(),
    )
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gradcheck_exits_zero() {
    let o = adkd(&["gradcheck", "--instances", "2"]);
    let (out, err) = text(&o);
    assert_eq!(o.status.code(), Some(0), "{out}{err}");
    assert!(out.contains("all passed"));
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(adkd(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(adkd(&["gradcheck", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(adkd(&["infer"]).status.code(), Some(2));
    assert_eq!(adkd(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_checkpoint_exits_one_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("absent.adkd");
    let o = adkd(&["infer", "--checkpoint", arg(&ckpt), "x.ppm"]);
    let (_, err) = text(&o);
    assert_eq!(o.status.code(), Some(1));
    assert!(err.contains("absent.adkd"), "{err}");
}

#[test]
fn gen_train_infer_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let spec = root.join("corpus.txt");
    fs::write(&spec, "train = 6\ntest_normal = 1\ntest_anomalous = 1\n").unwrap();
    let run_cfg = root.join("run.txt");
    fs::write(&run_cfg, "epochs = 2\n").unwrap();
    let (data, ckpt, out) = (root.join("data"), root.join("best.adkd"), root.join("out"));

    let o = adkd(&["gen", "--config", arg(&spec), "--out", arg(&data)]);
    assert_eq!(o.status.code(), Some(0), "{:?}", text(&o));

    let o = adkd(&[
        "train",
        "--config",
        arg(&run_cfg),
        "--data",
        arg(&data),
        "--checkpoint",
        arg(&ckpt),
    ]);
    let (stdout, stderr) = text(&o);
    assert_eq!(o.status.code(), Some(0), "{stdout}{stderr}");
    assert!(stdout.contains("best epoch"));
    assert!(ckpt.is_file());

    let class = fs::read_dir(&data)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.is_dir())
        .unwrap();
    let image = class.join("test/good/000.ppm");
    let o = adkd(&["infer", "--checkpoint", arg(&ckpt), "--out", arg(&out), arg(&image)]);
    assert_eq!(o.status.code(), Some(0), "{:?}", text(&o));
    assert!(out.join("000.adam").is_file());
    assert!(out.join("000_map.pgm").is_file());

    let o = adkd(&["eval", "--checkpoint", arg(&ckpt), "--out", arg(&out)]);
    let (stdout, stderr) = text(&o);
    assert_eq!(o.status.code(), Some(0), "{stdout}{stderr}");
    assert!(stdout.lines().any(|l| l.starts_with("MEAN")), "{stdout}");
    assert!(out.join("report.txt").is_file() && out.join("report.tsv").is_file());

    let changed = root.join("changed.txt");
    fs::write(&changed, "epochs = 3\nlr = 0.5\n").unwrap();
    let o = adkd(&[
        "train",
        "--config",
        arg(&changed),
        "--data",
        arg(&data),
        "--checkpoint",
        arg(&ckpt),
        "--resume",
    ]);
    let (_, stderr) = text(&o);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr.contains("lr"), "{stderr}");
}
