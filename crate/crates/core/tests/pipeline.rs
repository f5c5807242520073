use std::path::PathBuf;

use koopman_parabolic::config::ExperimentConfig;
use koopman_parabolic::pipeline::{reproduce, run, RunManifest, Stage};

fn scratch(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("koopman-parabolic-{tag}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    dir
}

fn fingerprint(m: &RunManifest) -> (String, Vec<(String, String)>, Vec<serde_json::Value>) {
    (
        m.config_sha256.clone(),
        m.files.iter().map(|f| (f.path.clone(), f.sha256.clone())).collect(),
        m.stages.iter().map(|s| s.outputs.clone()).collect(),
    )
}

#[test]
fn identical_config_gives_identical_outputs() {
    let cfg = ExperimentConfig::default();
    let (a, b) = (scratch("det-a"), scratch("det-b"));
    let ma = reproduce(&cfg, Stage::Lift, &a, false).unwrap();
    let mb = reproduce(&cfg, Stage::Lift, &b, false).unwrap();
    assert_eq!(fingerprint(&ma), fingerprint(&mb));
    let names: Vec<&str> = ma.files.iter().map(|f| f.path.as_str()).collect();
    assert!(names.contains(&"model.toml") && names.contains(&"fig1_spectrum.csv"), "{names:?}");
    assert!(!names.contains(&"map.toml"));
    assert!(a.join("manifest.json").exists());

    let other = ExperimentConfig {
        data: koopman_parabolic::config::DataConfig { seed: 2, ..cfg.data.clone() },
        ..cfg
    };
    let c = scratch("det-c");
    let mc = reproduce(&other, Stage::Collect, &c, false).unwrap();
    assert_ne!(mc.config_sha256, ma.config_sha256);
    let snap = |m: &RunManifest| m.files.iter().find(|f| f.path == "snapshots.csv").map(|f| f.sha256.clone());
    assert_ne!(snap(&mc), snap(&ma));
    for d in [a, b, c] {
        let _ = std::fs::remove_dir_all(d);
    }
}

/// Gramian over the hull of training coefficients against the sample fit.
#[test]
fn gramian_agrees_with_least_squares() {
    let r = run(&ExperimentConfig::default(), Stage::Lift).unwrap();
    let lift = r.lift.as_ref().unwrap();
    let (gb, gn) = lift.gramian.as_ref().expect("Gramian fit");
    let worst = (gb - &lift.fit.b).amax().max((gn - &lift.fit.n).amax());
    assert!(worst <= 0.2, "Gramian vs least squares differ by {worst}");
    assert!(r.synthesis.is_none());
}
