//! The checked-in fuzz seeds go through the same entry points as the fuzz
//! targets. Every seed is a valid input, so each must parse.

use std::path::PathBuf;

use vapf::attribute::{parse_tabular_csv, AttributeSchema};
use vapf::checkpoint::Checkpoint;
use vapf::config::ExperimentConfig;
use vapf::visual::{decode_volume, parse_volume_header};

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<(String, Vec<u8>)> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let path = e.unwrap().path();
            (path.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&path).unwrap())
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

#[test]
fn checkpoint_seeds_decode_and_reencode() {
    for (name, bytes) in seeds("checkpoint") {
        let ckpt = Checkpoint::from_bytes(&bytes).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(ckpt.to_bytes(), bytes, "{name}");
    }
}

#[test]
fn volume_seeds_parse() {
    for (name, bytes) in seeds("volume") {
        let split = bytes.iter().position(|&b| b == 0).unwrap_or(bytes.len());
        let header = std::str::from_utf8(&bytes[..split]).unwrap();
        let dims = parse_volume_header(header).unwrap_or_else(|e| panic!("{name}: {e}"));
        if let Some(payload) = bytes.get(split + 1..) {
            let vol = decode_volume(header, payload).unwrap_or_else(|e| panic!("{name}: {e}"));
            assert_eq!(vol.dims, dims);
        }
    }
}

#[test]
fn tabular_seeds_parse() {
    let schema = AttributeSchema::clinical_default();
    for (name, bytes) in seeds("tabular_csv") {
        let rows = parse_tabular_csv(&bytes, &schema).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert!(!rows.is_empty(), "{name}");
    }
}

#[test]
fn schema_seeds_parse() {
    for (name, bytes) in seeds("schema_json") {
        let schema = AttributeSchema::from_json(std::str::from_utf8(&bytes).unwrap()).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(schema, AttributeSchema::clinical_default(), "{name}");
    }
}

#[test]
fn config_seeds_parse() {
    for (name, bytes) in seeds("config_json") {
        ExperimentConfig::from_json(std::str::from_utf8(&bytes).unwrap()).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
}

#[test]
fn shipped_configs_parse() {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let reference = ExperimentConfig::load(&dir.join("reference.json")).unwrap();
    assert_eq!(reference, ExperimentConfig::default());
    let desk = ExperimentConfig::load(&dir.join("desk.json")).unwrap();
    assert_eq!(desk, ExperimentConfig::desk_experiment());
    ExperimentConfig::load(&dir.join("smoke.json")).unwrap();
}

mod mutated {
    use super::*;
    use proptest::prelude::*;

    /// Seeds with bytes overwritten, inserted or cut, as a fuzzer would.
    fn mutations(target: &'static str) -> impl Strategy<Value = Vec<u8>> {
        let all = seeds(target);
        (0..all.len(), proptest::collection::vec((any::<u16>(), any::<u8>(), 0u8..3), 1..8)).prop_map(
            move |(pick, edits)| {
                let mut bytes = all[pick].1.clone();
                for (pos, byte, kind) in edits {
                    let at = if bytes.is_empty() { 0 } else { pos as usize % bytes.len() };
                    match kind {
                        0 if !bytes.is_empty() => bytes[at] = byte,
                        1 => bytes.insert(at, byte),
                        _ => bytes.truncate(at),
                    }
                }
                bytes
            },
        )
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(512))]

        #[test]
        fn checkpoint_decoder_never_panics(bytes in mutations("checkpoint")) {
            if let Ok(c) = Checkpoint::from_bytes(&bytes) {
                let again = c.to_bytes();
                prop_assert_eq!(Checkpoint::from_bytes(&again).unwrap().to_bytes(), again);
            }
        }

        #[test]
        fn volume_decoder_never_panics(bytes in mutations("volume")) {
            let split = bytes.iter().position(|&b| b == 0).unwrap_or(bytes.len());
            if let Ok(header) = std::str::from_utf8(&bytes[..split]) {
                let _ = parse_volume_header(header);
                let _ = decode_volume(header, bytes.get(split + 1..).unwrap_or(&[]));
            }
        }

        #[test]
        fn csv_parser_never_panics(bytes in mutations("tabular_csv")) {
            let _ = parse_tabular_csv(&bytes, &AttributeSchema::clinical_default());
        }

        #[test]
        fn json_parsers_never_panic(schema in mutations("schema_json"), config in mutations("config_json")) {
            if let Ok(text) = std::str::from_utf8(&schema) {
                let _ = AttributeSchema::from_json(text);
            }
            if let Ok(text) = std::str::from_utf8(&config) {
                let _ = ExperimentConfig::from_json(text);
            }
        }
    }
}
