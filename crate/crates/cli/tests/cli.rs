use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn selfcheck(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_selfcheck")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Desk image model with raw PPM test files.
fn synth(root: &Path) {
    let out = selfcheck(&["synth", "--kind", "image", "--out", s(root), "--calibration", "8", "--test", "1", "--raw"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn detect_on_empty_dir_fails_without_reports() {
    let root = tempfile::tempdir().unwrap();
    synth(root.path());
    let prof = root.path().join("prof");
    let out = selfcheck(&[
        "profile", "--model", s(&root.path().join("model")), "--calibration", s(&root.path().join("calibration")),
        "--out", s(&prof), "--min-samples", "1",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let empty = root.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let out = selfcheck(&["detect", "--model", s(&root.path().join("model")), "--profiles", s(&prof), "--input", s(&empty)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(out.stdout.is_empty());
}

#[test]
fn natural_fixture_with_its_own_profile_is_natural() {
    let root = tempfile::tempdir().unwrap();
    synth(root.path());
    let raw = root.path().join("raw/spot");
    let fixture = fs::read_dir(&raw).unwrap().next().unwrap().unwrap().path();
    let one = root.path().join("one");
    fs::create_dir(&one).unwrap();
    fs::copy(&fixture, one.join(fixture.file_name().unwrap())).unwrap();

    let model = root.path().join("model");
    let prof = root.path().join("prof");
    let out = selfcheck(&["profile", "--model", s(&model), "--calibration", s(&one), "--out", s(&prof), "--min-samples", "1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = selfcheck(&["detect", "--model", s(&model), "--profiles", s(&prof), "--input", s(&one)]);
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert_eq!(out.status.code(), Some(0), "{stdout}");
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines.len(), 1);
    assert!(lines[0].contains(r#""verdict":"natural""#), "{}", lines[0]);
}

#[test]
fn profiles_from_another_model_are_refused() {
    let a = tempfile::tempdir().unwrap();
    synth(a.path());
    let other = a.path().join("other");
    let out = selfcheck(&["synth", "--kind", "image", "--out", s(&other), "--seed", "8", "--calibration", "1", "--test", "1"]);
    assert!(out.status.success());
    let prof = a.path().join("prof");
    let out = selfcheck(&[
        "profile", "--model", s(&a.path().join("model")), "--calibration", s(&a.path().join("calibration")),
        "--out", s(&prof), "--min-samples", "1",
    ]);
    assert!(out.status.success());
    let out = selfcheck(&["detect", "--model", s(&other.join("model")), "--profiles", s(&prof), "--input", s(&other.join("test"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("different model"));
}

#[test]
fn visualize_writes_one_pattern_per_channel() {
    let root = tempfile::tempdir().unwrap();
    synth(root.path());
    let vis = root.path().join("vis");
    let out = selfcheck(&["visualize", "--model", s(&root.path().join("model")), "--out", s(&vis), "--steps", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let names: Vec<String> = fs::read_dir(&vis)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    let patterns = names.iter().filter(|n| n.ends_with(".ppm") || n.ends_with(".pgm")).count();
    let sidecars: Vec<&String> = names.iter().filter(|n| n.ends_with(".txt")).collect();
    assert_eq!(patterns, 16);
    assert_eq!(sidecars.len(), 16);
    let text = fs::read_to_string(vis.join(sidecars[0])).unwrap();
    assert!(text.lines().any(|l| l.starts_with("mean_activation ")));
}

#[test]
fn evaluate_rejects_a_bad_grid() {
    let root = tempfile::tempdir().unwrap();
    let out = selfcheck(&[
        "evaluate", "--model", "m", "--profiles", "p", "--naturals", "n", "--attacks", "a", "--out", s(root.path()),
        "--grid", "0:1",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("grid"));
}
