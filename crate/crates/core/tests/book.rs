//! The guide's configuration listing must stay equal to the defaults.

use koopman_parabolic::config::ExperimentConfig;

#[test]
fn configuration_chapter_lists_the_defaults() {
    let text = include_str!("../../../book/src/configuration.md");
    let start = text.find("```toml\n").expect("toml block") + 8;
    let end = start + text[start..].find("```").expect("closing fence");
    let cfg = ExperimentConfig::from_toml(&text[start..end]).unwrap();
    assert_eq!(cfg, ExperimentConfig::default());
}

#[test]
fn summary_lists_every_chapter() {
    let summary = include_str!("../../../book/src/SUMMARY.md");
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/../../book/src");
    for entry in std::fs::read_dir(dir).unwrap() {
        let name = entry.unwrap().file_name().into_string().unwrap();
        if name.ends_with(".md") && name != "SUMMARY.md" {
            assert!(summary.contains(&format!("({name})")), "{name} missing from SUMMARY.md");
        }
    }
}
