use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_explainer"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn explainer")
}

fn ok(args: &[&str]) {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn first_ppm(dir: &Path) -> PathBuf {
    let mut v: Vec<PathBuf> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    v.sort();
    v.into_iter()
        .find(|p| p.extension().is_some_and(|e| e == "ppm"))
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn pipeline_smoke() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let (data, perf, expl, eval, vis) = (
        t.join("data"),
        t.join("perf.xpln"),
        t.join("expl.xpln"),
        t.join("eval"),
        t.join("vis"),
    );

    ok(&[
        "gen-data",
        "--out",
        s(&data),
        "--num-train",
        "48",
        "--num-test",
        "16",
        "--seed",
        "3",
    ]);
    assert!(data.join("samples.csv").exists() && data.join("landmarks.csv").exists());
    ok(&[
        "train-performer",
        "--data",
        s(&data),
        "--out",
        s(&perf),
        "--epochs",
        "3",
    ]);
    ok(&[
        "train-explainer",
        "--performer",
        s(&perf),
        "--data",
        s(&data),
        "--out",
        s(&expl),
        "--epochs",
        "3",
    ]);
    let metrics = fs::read_to_string(t.join("expl.xpln.metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 4);
    assert!(metrics.starts_with("epoch,recon_fc1,recon_fc2,neg_log_p,filter_loss_total,total"));

    ok(&[
        "eval",
        "--performer",
        s(&perf),
        "--explainer",
        s(&expl),
        "--data",
        s(&data),
        "--out",
        s(&eval),
    ]);
    for f in [
        "instability_summary.csv",
        "classification.csv",
        "instability_explainer_conv_interp_2.csv",
        "instability_performer_top_conv.csv",
        "instability_performer_target.csv",
    ] {
        assert!(eval.join(f).exists(), "{f}");
    }

    let image = first_ppm(&data.join("test"));
    ok(&[
        "visualize",
        "--performer",
        s(&perf),
        "--explainer",
        s(&expl),
        "--image",
        s(&image),
        "--filters",
        "0,5",
        "--out",
        s(&vis),
    ]);
    for f in [
        "filter_00.pgm",
        "filter_05_overlay.ppm",
        "filter_05_rf.ppm",
        "gradcam.pgm",
        "gradcam_overlay.ppm",
    ] {
        assert!(vis.join(f).exists(), "{f}");
    }
    let out = run(&[
        "visualize",
        "--performer",
        s(&perf),
        "--explainer",
        s(&expl),
        "--image",
        s(&image),
        "--filters",
        "999",
        "--out",
        s(&vis),
    ]);
    assert!(!out.status.success());

    // an untrained explainer still yields a well-formed report
    let raw = t.join("raw.xpln");
    ok(&[
        "train-explainer",
        "--performer",
        s(&perf),
        "--data",
        s(&data),
        "--out",
        s(&raw),
        "--epochs",
        "0",
    ]);
    let raw_eval = t.join("raw_eval");
    ok(&[
        "eval",
        "--performer",
        s(&perf),
        "--explainer",
        s(&raw),
        "--data",
        s(&data),
        "--out",
        s(&raw_eval),
    ]);
    let summary = fs::read_to_string(raw_eval.join("instability_summary.csv")).unwrap();
    assert_eq!(summary.lines().next(), Some("layer,instability"));
    assert_eq!(summary.lines().count(), 4);

    // conflicting flags
    let out = run(&[
        "train-explainer",
        "--performer",
        s(&perf),
        "--data",
        s(&data),
        "--out",
        s(&t.join("x.xpln")),
        "--with-cls-loss",
        "--lambda-fc1",
        "1",
        "--lambda-fc2",
        "1",
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("conflicts"));

    // truncated and corrupted checkpoints
    let bytes = fs::read(&expl).unwrap();
    let bad = t.join("bad.xpln");
    fs::write(&bad, &bytes[..bytes.len() / 2]).unwrap();
    let out = run(&[
        "eval",
        "--performer",
        s(&perf),
        "--explainer",
        s(&bad),
        "--data",
        s(&data),
        "--out",
        s(&eval),
    ]);
    assert!(!out.status.success());
    let mut flipped = bytes.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 0x40;
    fs::write(&bad, &flipped).unwrap();
    let out = run(&[
        "eval",
        "--performer",
        s(&perf),
        "--explainer",
        s(&bad),
        "--data",
        s(&data),
        "--out",
        s(&eval),
    ]);
    assert!(!out.status.success());
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}

#[test]
fn missing_inputs_are_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let out = run(&[
        "train-performer",
        "--data",
        s(&t.join("nope")),
        "--out",
        s(&t.join("p.xpln")),
    ]);
    assert!(!out.status.success());
    let out = run(&["gen-data", "--out", s(&t.join("d")), "--num-train", "0"]);
    assert!(!out.status.success());
}

#[test]
fn config_file_and_unknown_keys() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let cfg = t.join("gen.cfg");
    fs::write(&cfg, "# small\nnum_train = 8\nnum-test = 4\nseed = 9\n").unwrap();
    ok(&["gen-data", "--out", s(&t.join("d")), "--config", s(&cfg)]);
    let ids = fs::read_to_string(t.join("d/samples.csv")).unwrap();
    assert_eq!(ids.lines().count(), 1 + 12);
    fs::write(&cfg, "frobnicate = 1\n").unwrap();
    let out = run(&["gen-data", "--out", s(&t.join("e")), "--config", s(&cfg)]);
    assert!(!out.status.success());
}
