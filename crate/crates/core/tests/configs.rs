use std::path::{Path, PathBuf};

use rrlab::datagen::GeneratorConfig;
use rrlab::harness::GridSpec;

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

#[test]
fn every_shipped_config_loads() {
    let mut grids = 0;
    for entry in std::fs::read_dir(configs_dir()).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().and_then(|e| e.to_str()) != Some("toml") {
            continue;
        }
        if path.file_stem().unwrap() == "generator_default" {
            GeneratorConfig::load(&path).unwrap();
            continue;
        }
        let grid = GridSpec::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert!(!grid.cells().is_empty(), "{}", path.display());
        grids += 1;
    }
    assert!(grids >= 6);
}

#[test]
fn shipped_grids_round_trip_through_toml() {
    for name in ["heterogeneity", "shift_intensity", "sample_efficiency", "density", "desk", "smoke"] {
        let grid = GridSpec::load(&configs_dir().join(format!("{name}.toml"))).unwrap();
        let back = GridSpec::from_toml_str(&grid.to_toml_string().unwrap()).unwrap();
        assert_eq!(back.version_hash().unwrap(), grid.version_hash().unwrap(), "{name}");
    }
}
