//! End-to-end behaviour of the `stitchlab` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const PLOT_CONFIG: &str = r#"
experiment = "stitch-plot"
seed = 5

[data]
source = "synthetic"
resolution = 8
train_size = 192
test_size = 64

[front]
arch = "small-residual"
width = 0.0625
seed = 1
train = { epochs = 1, lr = 0.05 }

[end]
arch = "small-residual"
width = 0.0625
seed = 2
train = { epochs = 1, lr = 0.05 }

[stitch]
epochs = 1
batch = 64
n_init = 64
objectives = ["tlm", "hint"]
taps = [2, 9]

[eval]
robust_samples = 0
"#;

fn stitchlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stitchlab")).args(args).output().unwrap()
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn unknown_keys_are_schema_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.toml", &PLOT_CONFIG.replace("n_init = 64", "n_init = 64\nlearning_rate = 3"));
    let out = stitchlab(&["run", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("stitch") && err.contains("learning_rate"), "{err}");
}

#[test]
fn rendering_a_missing_run_reports_the_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let out = stitchlab(&["render", dir.path().join("nothing").to_str().unwrap(), "--format", "csv"]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn reruns_are_byte_identical_and_render() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "plot.toml", PLOT_CONFIG);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let out = stitchlab(&["run", &cfg, "--output-dir", a.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = stitchlab(&["run", &cfg, "--workers", "2", "--output-dir", b.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read(a.join("results.json")).unwrap(), fs::read(b.join("results.json")).unwrap());

    for format in ["csv", "png", "md-table"] {
        let out = stitchlab(&["render", a.to_str().unwrap(), "--format", format]);
        assert!(out.status.success(), "{format}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let csvs: Vec<_> = fs::read_dir(a.join("render"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv") && p.file_name().unwrap() != "jobs.csv")
        .collect();
    assert_eq!(csvs.len(), 1, "{csvs:?}");
    let plot = fs::read_to_string(&csvs[0]).unwrap();
    // header, two baselines and two objectives at two taps
    assert_eq!(plot.lines().count(), 1 + 2 + 4, "{plot}");
    assert!(fs::read_to_string(a.join("render/report.md")).unwrap().contains('|'));
}
