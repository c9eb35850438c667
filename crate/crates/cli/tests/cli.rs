use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join("fixtures")
}

fn hls_fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../hls/tests/fixtures")
}

fn p2s(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_p2s")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_and_config_errors_exit_1() {
    assert_eq!(code(&p2s(&["run"])), 1);
    assert_eq!(code(&p2s(&["frobnicate"])), 1);
    assert_eq!(code(&p2s(&["run", "--config", "/nonexistent/p2s.toml"])), 1);
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[backend]\nkind = \"scripted\"\nnot_a_key = 1\n").unwrap();
    assert_eq!(code(&p2s(&["run", "--config", s(&bad)])), 1);
    assert_eq!(code(&p2s(&["--help"])), 0);
}

#[test]
fn run_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixtures().join("suite10/suite.toml");
    let o = p2s(&["run", "--config", s(&cfg), "--output-dir", s(dir.path()), "--run-id", "fb"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("fb/funnel.json").is_file());
    let o = p2s(&["baseline", "--config", s(&cfg), "--feedback", "off", "--output-dir", s(dir.path())]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = p2s(&["report", "fb", "--runs-dir", s(dir.path())]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.contains("50.0"), "{out}");
}

#[test]
fn transpile_reports_rejections_with_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = p2s(&[
        "transpile",
        s(&hls_fixtures().join("compiled")),
        "--out",
        s(dir.path()),
        "--vectors",
        s(&hls_fixtures().join("vectors")),
    ]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("Cube/cube.c").is_file());
    assert!(dir.path().join("Cube/cube_tb.c").is_file());
    assert!(String::from_utf8_lossy(&o.stdout).contains("rejected (RECURSION)"));
}

#[test]
fn mock_synth_of_known_kernel() {
    let dir = tempfile::tempdir().unwrap();
    let kernel = dir.path().join("cube.c");
    std::fs::copy(hls_fixtures().join("golden/cube.c"), &kernel).unwrap();
    let o = p2s(&[
        "synth",
        s(&kernel),
        "--config",
        s(&fixtures().join("suite10/suite.toml")),
        "--out",
        s(&dir.path().join("out")),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("SYNTHESIZED"));
}

#[test]
fn gradcheck_passes() {
    let o = p2s(&["gradcheck", "--seeds", "2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}
