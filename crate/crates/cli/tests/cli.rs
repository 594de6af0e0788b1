use std::path::Path;
use std::process::{Command, Output};

use gtpro::uncertainty::synthetic::{write_tracks, TrackFixture};
use gtpro::VarianceCurve;

fn gtpro(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gtpro")).args(args).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn short_scenario(dir: &Path) -> String {
    let path = dir.join("short.toml");
    std::fs::write(&path, "name = \"short\"\n[sim]\ntotal_time = 3.0\n[ov]\nmode = \"aggressive\"\n").unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn run_then_metrics_then_validate() {
    let dir = tempfile::tempdir().unwrap();
    let config = short_scenario(dir.path());
    let run_dir = dir.path().join("run");
    let run_dir = run_dir.to_str().unwrap();

    let text = stdout(&gtpro(&["run", "--config", &config, "--out", run_dir]));
    assert!(text.contains("30 steps"), "{text}");
    assert!(Path::new(run_dir).join("trace.csv").exists());
    assert!(Path::new(run_dir).join("summary.json").exists());

    // Metrics recomputed from the stored trace match the ones printed by the run.
    let metrics = stdout(&gtpro(&["metrics", "--trace", run_dir]));
    let pick = |s: &str| s.lines().find(|l| l.starts_with("min headway time")).map(str::to_owned);
    assert_eq!(pick(&metrics), pick(&text));

    let report = stdout(&gtpro(&["validate", "--trace", &format!("{run_dir}/trace.csv")]));
    assert!(!report.contains("FAILED"), "{report}");
}

#[test]
fn validate_rejects_a_tampered_trace() {
    let dir = tempfile::tempdir().unwrap();
    let config = short_scenario(dir.path());
    let run_dir = dir.path().join("run");
    stdout(&gtpro(&["run", "--config", &config, "--out", run_dir.to_str().unwrap()]));
    let csv = run_dir.join("trace.csv");
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_owned).collect();
    lines.swap(3, 4);
    std::fs::write(&csv, lines.join("\n") + "\n").unwrap();
    let out = gtpro(&["validate", "--trace", run_dir.to_str().unwrap()]);
    assert!(!out.status.success());
}

#[test]
fn json_format_writes_a_trace_document() {
    let dir = tempfile::tempdir().unwrap();
    let config = short_scenario(dir.path());
    let run_dir = dir.path().join("json");
    stdout(&gtpro(&["run", "--config", &config, "--out", run_dir.to_str().unwrap(), "--format", "json"]));
    let doc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("trace.json")).unwrap()).unwrap();
    assert_eq!(doc["records"].as_array().unwrap().len(), 30);
}

#[test]
fn fit_variance_recovers_the_generating_curve() {
    let dir = tempfile::tempdir().unwrap();
    let tracks = dir.path().join("tracks.csv");
    let truth = VarianceCurve::default();
    let fixture = TrackFixture { pairs: 40, ..TrackFixture::default() };
    write_tracks(std::fs::File::create(&tracks).unwrap(), &truth, &fixture).unwrap();
    let out = dir.path().join("curve.json");
    let text = stdout(&gtpro(&[
        "fit-variance",
        "--tracks",
        tracks.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--min-count",
        "20",
    ]));
    assert!(text.contains("40 overtaking pairs"), "{text}");
    let fitted = VarianceCurve::load(&out).unwrap();
    for t in [-0.5, 0.0, 0.5, 1.5, 2.5] {
        let rel = (fitted.lookup(t) - truth.lookup(t)).abs() / truth.lookup(t);
        assert!(rel < 0.25, "t = {t}: relative error {rel}");
    }
}

#[test]
fn unknown_files_fail_cleanly() {
    let out = gtpro(&["metrics", "--trace", "/nonexistent/trace.csv"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nonexistent"));
}
