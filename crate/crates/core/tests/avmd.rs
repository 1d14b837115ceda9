mod common;

use std::fs;

use avm_autodiff::Tensor;
use avm_core::avmd::{self, AvmdError, Container};
use proptest::prelude::*;
use rand::Rng;
use serde_json::json;

fn random_container(seed: u64) -> Container {
    let mut rng = common::rng(seed);
    let mut c = Container::new("test", json!({ "seed": seed, "note": "random" }));
    for b in 0..rng.random_range(1..5) {
        let rank = rng.random_range(0..4);
        let shape: Vec<usize> = (0..rank).map(|_| rng.random_range(1..6)).collect();
        let numel = shape.iter().product();
        let values = (0..numel)
            .map(|_| match rng.random_range(0..10) {
                0 => -0.0,
                1 => f64::MIN_POSITIVE / 3.0,
                2 => f64::MAX,
                _ => rng.random_range(-1e6..1e6),
            })
            .collect();
        c.push(format!("blob{b}"), Tensor::new(&shape, values).unwrap());
    }
    c
}

fn bits(c: &Container) -> Vec<(String, Vec<usize>, Vec<u64>)> {
    c.blobs
        .iter()
        .map(|(n, t)| (n.clone(), t.shape().to_vec(), t.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

#[test]
fn round_trip_is_bit_identical() {
    for seed in 0..20 {
        let dir = tempfile::tempdir().unwrap();
        let c = random_container(seed);
        avmd::write(dir.path(), &c).unwrap();
        let back = avmd::read(dir.path()).unwrap();
        assert_eq!(bits(&back), bits(&c));
        assert_eq!(back.meta, c.meta);
        assert_eq!(back.kind, "test");
    }
}

#[test]
fn truncated_data_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    avmd::write(dir.path(), &random_container(3)).unwrap();
    let data = dir.path().join(avmd::DATA_FILE);
    let bytes = fs::read(&data).unwrap();
    fs::write(&data, &bytes[..bytes.len() - 3]).unwrap();
    match avmd::read(dir.path()) {
        Err(AvmdError::Truncated { available, .. }) => assert_eq!(available as usize, bytes.len() - 3),
        other => panic!("expected truncation, got {other:?}"),
    }
}

#[test]
fn flipped_byte_fails_checksum() {
    let dir = tempfile::tempdir().unwrap();
    avmd::write(dir.path(), &random_container(4)).unwrap();
    let data = dir.path().join(avmd::DATA_FILE);
    let mut bytes = fs::read(&data).unwrap();
    bytes[0] ^= 0x10;
    fs::write(&data, &bytes).unwrap();
    assert!(matches!(avmd::read(dir.path()), Err(AvmdError::ChecksumMismatch { .. })));
}

#[test]
fn newer_version_names_both_versions() {
    let dir = tempfile::tempdir().unwrap();
    avmd::write(dir.path(), &random_container(5)).unwrap();
    let path = dir.path().join(avmd::MANIFEST_FILE);
    let text = fs::read_to_string(&path).unwrap().replace("\"version\": 1", "\"version\": 2");
    fs::write(&path, text).unwrap();
    let err = avmd::read(dir.path()).unwrap_err();
    assert!(matches!(err, AvmdError::VersionMismatch { found: 2, supported: 1 }));
    let msg = err.to_string();
    assert!(msg.contains('2') && msg.contains('1'), "{msg}");
}

#[test]
fn malformed_manifests_are_manifest_errors() {
    let dir = tempfile::tempdir().unwrap();
    avmd::write(dir.path(), &random_container(6)).unwrap();
    let path = dir.path().join(avmd::MANIFEST_FILE);
    let original = fs::read_to_string(&path).unwrap();
    for broken in [
        "{ not json".to_string(),
        original.replace("\"AVMD\"", "\"ZIP\""),
        original.replace("\"f64\"", "\"f32\""),
        original.replacen("\"length\": ", "\"length\": 1", 1),
    ] {
        fs::write(&path, broken).unwrap();
        assert!(matches!(avmd::read(dir.path()), Err(AvmdError::Manifest(_))));
    }
}

#[test]
fn missing_files_are_io_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(avmd::read(&dir.path().join("absent")), Err(AvmdError::Io { .. })));
    avmd::write(dir.path(), &random_container(7)).unwrap();
    fs::remove_file(dir.path().join(avmd::DATA_FILE)).unwrap();
    assert!(matches!(avmd::read(dir.path()), Err(AvmdError::Io { .. })));
}

#[test]
fn kind_and_blob_lookups_fail_cleanly() {
    let mut c = random_container(8);
    assert!(matches!(c.expect_kind("dataset"), Err(AvmdError::KindMismatch { .. })));
    assert!(matches!(c.take("nope"), Err(AvmdError::MissingBlob(_))));
    assert!(c.take("blob0").is_ok());
    assert!(c.blob("blob0").is_err());
}

proptest! {
    #[test]
    fn arbitrary_truncation_never_panics(seed in 0u64..200, cut in 0usize..400) {
        let dir = tempfile::tempdir().unwrap();
        avmd::write(dir.path(), &random_container(seed)).unwrap();
        let data = dir.path().join(avmd::DATA_FILE);
        let bytes = fs::read(&data).unwrap();
        let keep = cut.min(bytes.len());
        fs::write(&data, &bytes[..keep]).unwrap();
        let result = avmd::read(dir.path());
        if keep < bytes.len() {
            let truncated = matches!(result, Err(AvmdError::Truncated { .. }));
            prop_assert!(truncated);
        } else {
            prop_assert!(result.is_ok());
        }
    }
}
