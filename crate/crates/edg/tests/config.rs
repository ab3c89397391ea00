use std::path::Path;

use edg::config::ExperimentConfig;

fn repo(p: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(p)
}

#[test]
fn committed_configs_parse_and_validate() {
    for dir in ["configs/desk", "configs/paper"] {
        for entry in std::fs::read_dir(repo(dir)).unwrap() {
            let path = entry.unwrap().path();
            let cfg = ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{e}"));
            if let edg::config::TargetSpec::Logistic { .. } = cfg.target {
                continue;
            }
            cfg.validate(&path).unwrap_or_else(|e| panic!("{e}"));
        }
    }
}
