use std::path::PathBuf;
use std::process::{Command, Output};

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_koopman-parabolic"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn scratch(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("koopman-cli-{tag}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    dir
}

#[test]
fn config_errors_exit_with_2() {
    assert_eq!(bin(&["--config", "/nonexistent.toml", "collect"]).status.code(), Some(2));
    assert_eq!(bin(&["--stage", "fit", "reproduce-paper"]).status.code(), Some(2));
    let dir = scratch("cfg");
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("bad.toml");
    std::fs::write(&path, "[synthesis]\ntargets = [-1.0]\n").unwrap();
    assert_eq!(bin(&["--config", path.to_str().unwrap(), "collect"]).status.code(), Some(2));
    let _ = std::fs::remove_dir_all(dir);
}

#[test]
fn open_loop_simulation_reports_blowup() {
    let dir = scratch("sim");
    let out = bin(&["--out", dir.to_str().unwrap(), "simulate", "--horizon", "2"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("blow-up at t = "), "{text}");
    let surface = std::fs::read_to_string(dir.join("simulate.dat")).unwrap();
    // header row of times plus one row per grid node
    assert_eq!(surface.lines().count(), 102);
    let _ = std::fs::remove_dir_all(dir);
}

#[test]
fn partial_reproduction_stops_at_stage() {
    let dir = scratch("stage");
    let out = bin(&["--out", dir.to_str().unwrap(), "--stage", "edmd", "reproduce-paper"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.join("fig1_spectrum.csv").exists());
    assert!(!dir.join("model.toml").exists());
    let manifest = std::fs::read_to_string(dir.join("manifest.json")).unwrap();
    assert!(manifest.contains("\"acceptance\": []"), "{manifest}");
    let _ = std::fs::remove_dir_all(dir);
}
