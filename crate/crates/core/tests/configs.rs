use std::path::PathBuf;

use srdet::config::parse_config;
use srdet::ExperimentConfig;

fn shipped(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

#[test]
fn desk_file_matches_preset() {
    assert_eq!(parse_config(&shipped("desk.toml")).unwrap(), ExperimentConfig::desk());
}

#[test]
fn smoke_file_is_valid() {
    let c = parse_config(&shipped("smoke.toml")).unwrap();
    c.validate().unwrap();
    assert_eq!(c.eval.seeds, vec![0]);
}
