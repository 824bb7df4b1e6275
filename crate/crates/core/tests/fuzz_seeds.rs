//! Replays the checked-in fuzz corpus seeds through the parsers they target.

use std::fs;
use std::path::PathBuf;

use evdet::checkpoint::decode_checkpoint;
use evdet::config::parse_config;
use evdet::event_io::{parse_csv, parse_evs, write_evs};
use evdet::layer_spec::LayerSpec;
use evdet::quant::parse_manifest;

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fuzz/corpus")
        .join(target);
    let mut out: Vec<_> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| e.unwrap().path())
        .filter(|p| {
            p.file_name()
                .unwrap()
                .to_string_lossy()
                .starts_with("seed-")
        })
        .map(|p| (p.display().to_string(), fs::read(&p).unwrap()))
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

fn text(bytes: &[u8]) -> &str {
    std::str::from_utf8(bytes).unwrap()
}

#[test]
fn csv_seeds_parse() {
    for (name, bytes) in seeds("csv_events") {
        let loaded = parse_csv(text(&bytes), 64, 64).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert!(loaded.stream.is_time_ordered(), "{name}");
    }
}

#[test]
fn evs_seeds_round_trip() {
    for (name, bytes) in seeds("evs_events") {
        let loaded = parse_evs(&bytes).unwrap_or_else(|e| panic!("{name}: {e}"));
        let mut again = Vec::new();
        write_evs(&loaded.stream, &mut again).unwrap();
        assert_eq!(again, bytes, "{name}");
    }
}

#[test]
fn layer_spec_seeds_round_trip() {
    for (name, bytes) in seeds("layer_spec") {
        let spec: LayerSpec = text(&bytes)
            .parse()
            .unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(spec.to_string(), text(&bytes), "{name}");
    }
}

#[test]
fn config_seeds_validate() {
    for (name, bytes) in seeds("run_config") {
        let cfg = parse_config(text(&bytes)).unwrap_or_else(|e| panic!("{name}: {e}"));
        cfg.model_spec().unwrap_or_else(|e| panic!("{name}: {e}"));
    }
}

#[test]
fn checkpoint_seeds_decode() {
    for (name, bytes) in seeds("checkpoint") {
        let ck = decode_checkpoint(&bytes).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(ck.encode(), bytes, "{name}");
    }
}

#[test]
fn manifest_seeds_parse() {
    for (name, bytes) in seeds("quant_manifest") {
        let m = parse_manifest(text(&bytes)).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(
            parse_manifest(&m.to_toml()).unwrap().to_toml(),
            m.to_toml(),
            "{name}"
        );
    }
}
