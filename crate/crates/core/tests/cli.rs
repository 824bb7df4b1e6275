use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const MICRO: &str = r#"
[arch]
layers = ["4c3p1s2", "4c3p1s1", "4c3p1s1"]
bridge_position = 2
bridge_kernel = 3
head_hidden = 4
lstm_positions = []

[simulation]
height = 16
width = 16
bin_ms = 10
steps = 3
window_ms = 30

[training]
steps = 4
batch = 2
train_samples = 4
val_samples = 2

[synthetic]
size_min = 4.0
size_max = 6.0
speed_min = 30.0
speed_max = 60.0
duration_ms = 90
"#;

fn evdet(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_evdet"))
        .arg("--config")
        .arg(dir.join("micro.toml"))
        .arg("--out")
        .arg(dir.join("out"))
        .args(args)
        .output()
        .expect("spawn evdet")
}

fn setup() -> TempDir {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("micro.toml"), MICRO).unwrap();
    dir
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// The error line printed on failure; warnings may precede it.
fn error_line(o: &Output) -> String {
    stderr(o).lines().last().unwrap_or_default().to_string()
}

#[test]
fn gen_then_infer_writes_detections_and_profile() {
    let dir = setup();
    let g = evdet(dir.path(), &["gen", "--format", "csv"]);
    assert!(g.status.success(), "{}", stderr(&g));
    let events = dir.path().join("out/events.csv");
    let i = evdet(dir.path(), &["infer", events.to_str().unwrap()]);
    assert!(i.status.success(), "{}", stderr(&i));
    assert!(stderr(&i).contains("warning: no checkpoint"));
    let det = fs::read_to_string(dir.path().join("out/detections.csv")).unwrap();
    assert!(det.starts_with("t_end_us,x0,y0,x1,y1,score"));
    let profile = fs::read_to_string(dir.path().join("out/profile.txt")).unwrap();
    assert!(
        profile.contains("energy_j: ") && profile.contains("windows: "),
        "{profile}"
    );
}

#[test]
fn empty_stream_gives_no_detections() {
    let dir = setup();
    let events = dir.path().join("empty.csv");
    fs::write(&events, "t_us,x,y,p\n").unwrap();
    let i = evdet(dir.path(), &["infer", events.to_str().unwrap()]);
    assert!(i.status.success(), "{}", stderr(&i));
    let det = fs::read_to_string(dir.path().join("out/detections.csv")).unwrap();
    assert_eq!(det.lines().count(), 1, "{det}");
}

#[test]
fn trained_checkpoint_feeds_infer_and_quantize() {
    let dir = setup();
    let t = evdet(dir.path(), &["train"]);
    assert!(t.status.success(), "{}", stderr(&t));
    let ckpt = dir.path().join("out/model.ckpt");
    assert!(ckpt.exists());
    let losses = fs::read_to_string(dir.path().join("out/loss.csv")).unwrap();
    assert_eq!(losses.lines().count(), 5);

    assert!(evdet(dir.path(), &["gen"]).status.success());
    let events = dir.path().join("out/events.evs");
    let i = evdet(dir.path(), &["infer", events.to_str().unwrap()]);
    assert!(i.status.success(), "{}", stderr(&i));
    assert!(!stderr(&i).contains("warning: no checkpoint"));

    let q = evdet(dir.path(), &["quantize", "--bits", "4"]);
    assert!(q.status.success(), "{}", stderr(&q));
    let qdir = dir.path().join("out/quant-int4");
    assert!(qdir.join("manifest.toml").exists());
    assert!(fs::read_to_string(qdir.join("fidelity.txt"))
        .unwrap()
        .contains("match"));
}

#[test]
fn config_errors_are_categorised() {
    let dir = setup();
    fs::write(
        dir.path().join("micro.toml"),
        "[arch]\nlayers = [\"8c3x1s2\"]\nbridge_position = 1\nlstm_positions = []\n",
    )
    .unwrap();
    let o = evdet(dir.path(), &["gen"]);
    assert!(!o.status.success());
    let e = error_line(&o);
    assert!(e.starts_with("error[config]") && e.contains("layers[0]"), "{e}");
}

#[test]
fn malformed_events_report_the_line() {
    let dir = setup();
    let events = dir.path().join("bad.csv");
    fs::write(&events, "t_us,x,y,p\n10,1,1,1\n20,1,one,0\n").unwrap();
    let o = evdet(dir.path(), &["infer", events.to_str().unwrap()]);
    assert!(!o.status.success());
    let e = error_line(&o);
    assert!(e.starts_with("error[parse]") && e.contains("line 3"), "{e}");
}

#[test]
fn missing_explicit_checkpoint_is_an_error() {
    let dir = setup();
    let o = evdet(
        dir.path(),
        &["quantize", "--checkpoint", "/nonexistent/model.ckpt"],
    );
    assert!(!o.status.success());
    assert!(
        error_line(&o).starts_with("error[checkpoint]"),
        "{}",
        stderr(&o)
    );
}

#[test]
fn unsupported_bit_width_is_rejected() {
    let dir = setup();
    let o = evdet(dir.path(), &["quantize", "--bits", "5"]);
    assert!(!o.status.success());
    assert!(
        error_line(&o).starts_with("error[argument]"),
        "{}",
        stderr(&o)
    );
}
