//! The checked-in configs/ files are the presets, verbatim.
//! Regenerate with `KVDISTILL_BLESS=1 cargo test -p kvdistill --test configs`.

use std::fs;
use std::path::PathBuf;

use kvdistill::train::PRESETS;
use kvdistill::{EvalConfig, RunConfig};

fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn check(name: &str, expected: &str) {
    let path = configs_dir().join(name);
    if std::env::var_os("KVDISTILL_BLESS").is_some() {
        fs::create_dir_all(configs_dir()).unwrap();
        fs::write(&path, expected).unwrap();
        return;
    }
    let found = fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert_eq!(found, expected, "{name} is stale; rerun with KVDISTILL_BLESS=1");
}

#[test]
fn run_configs_match_presets() {
    for preset in PRESETS {
        let cfg = RunConfig::preset(preset).unwrap();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
        check(&format!("{preset}.toml"), &text);
    }
}

#[test]
fn eval_config_matches_default() {
    let cfg = EvalConfig::default();
    let text = cfg.to_toml().unwrap();
    assert_eq!(EvalConfig::from_toml(&text).unwrap(), cfg);
    check("eval.toml", &text);
}
