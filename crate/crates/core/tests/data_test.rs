//! On-disk format, checksums, grouping round-trips, and generator
//! statistics.

use lczlab_core::data::{
    apply_band_grouping, generate_synthetic, load_dataset, reconstruct_from_groups, sha256_hex,
    store_dataset, BandGroupMap, DatasetManifest, ModalityMode, PatchPair, SplitCounts,
    SyntheticConfig, MSI_BANDS, PATCH_SIZE, RECORD_BYTES, SAR_BANDS,
};
use lczlab_core::{Error, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fs;

#[test]
fn store_then_load_round_trips_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = generate_synthetic(&SyntheticConfig::new(3, 6, 11)).unwrap();
    let manifest = store_dataset(dir.path(), &dataset).unwrap();
    assert_eq!(
        manifest.counts,
        SplitCounts {
            train: 12,
            val: 0,
            test: 6
        }
    );
    let loaded = load_dataset(dir.path()).unwrap();
    assert_eq!(loaded.train, dataset.train);
    assert_eq!(loaded.val, dataset.val);
    assert_eq!(loaded.test, dataset.test);
    assert_eq!(loaded.manifest, manifest);
}

#[test]
fn corrupted_payload_fails_the_checksum() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = generate_synthetic(&SyntheticConfig::new(2, 3, 1)).unwrap();
    store_dataset(dir.path(), &dataset).unwrap();
    let path = dir.path().join("train.bin");
    let mut bytes = fs::read(&path).unwrap();
    bytes[100] ^= 0xff;
    fs::write(&path, bytes).unwrap();
    match load_dataset(dir.path()) {
        Err(Error::Corruption(msg)) => assert!(msg.contains("train.bin")),
        other => panic!("expected corruption error, got {other:?}"),
    }
}

#[test]
fn truncated_payload_is_a_format_error_naming_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = generate_synthetic(&SyntheticConfig::new(2, 5, 1)).unwrap();
    let stored = store_dataset(dir.path(), &dataset).unwrap();
    // drop one record from the payload and re-stamp the checksum so the
    // count check (10 vs 9 here: manifest 14 train... use val) fires
    let path = dir.path().join("train.bin");
    let mut bytes = fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - RECORD_BYTES);
    let mut manifest = stored.clone();
    manifest.checksums.train = sha256_hex(&bytes);
    fs::write(&path, bytes).unwrap();
    fs::write(
        dir.path().join("manifest.json"),
        serde_json::to_string_pretty(&manifest).unwrap(),
    )
    .unwrap();
    match load_dataset(dir.path()) {
        Err(Error::Format(msg)) => {
            assert!(msg.contains("train.bin"), "{msg}");
            assert!(msg.contains("manifest says"), "{msg}");
        }
        other => panic!("expected format error, got {other:?}"),
    }
}

#[test]
fn manifest_echoes_corpus_scale_counts() {
    // The full-corpus split fits in the manifest structure as-is.
    let dataset = generate_synthetic(&SyntheticConfig::new(2, 2, 0)).unwrap();
    let mut manifest = dataset.manifest.clone();
    manifest.counts = SplitCounts {
        train: 352_366,
        val: 24_119,
        test: 24_188,
    };
    let json = serde_json::to_string(&manifest).unwrap();
    let parsed: DatasetManifest = serde_json::from_str(&json).unwrap();
    assert_eq!(parsed.counts.train, 352_366);
    assert_eq!(parsed.counts.val, 24_119);
    assert_eq!(parsed.counts.test, 24_188);
}

#[test]
fn empty_splits_load_without_error() {
    let dir = tempfile::tempdir().unwrap();
    // per_class=1 puts the single patch in train; val and test stay empty
    let dataset = generate_synthetic(&SyntheticConfig::new(4, 1, 9)).unwrap();
    assert!(dataset.test.is_empty());
    store_dataset(dir.path(), &dataset).unwrap();
    let loaded = load_dataset(dir.path()).unwrap();
    assert!(loaded.test.is_empty());
    assert!(loaded.val.is_empty());
    assert_eq!(loaded.train.len(), 4);
}

#[test]
fn grouping_round_trips_100_random_patches_bit_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let map = BandGroupMap::default_grouping();
    for i in 0..100 {
        let patch = PatchPair::new(
            Tensor::randn(&[SAR_BANDS, PATCH_SIZE, PATCH_SIZE], &mut rng),
            Tensor::randn(&[MSI_BANDS, PATCH_SIZE, PATCH_SIZE], &mut rng),
            (i % 17) as u16,
        )
        .unwrap();
        let grouped = apply_band_grouping(&patch, &map).unwrap();
        let back = reconstruct_from_groups(&grouped, &map, patch.label).unwrap();
        assert_eq!(back, patch, "patch {i}");
    }
}

#[test]
fn normalized_train_split_is_standardized_per_band() {
    let dataset = generate_synthetic(&SyntheticConfig::new(4, 20, 3)).unwrap();
    let normalized = dataset.normalized_split(&dataset.train);
    let plane = PATCH_SIZE * PATCH_SIZE;
    for b in 0..SAR_BANDS {
        let vals: Vec<f64> = normalized
            .iter()
            .flat_map(|p| p.sar.data[b * plane..(b + 1) * plane].iter().map(|&v| v as f64))
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-3, "band {b} mean {mean}");
        assert!((var - 1.0).abs() < 1e-2, "band {b} var {var}");
    }
}

#[test]
fn generation_is_idempotent_across_stores() {
    let cfg = SyntheticConfig {
        modality: ModalityMode::MsiOnly,
        ..SyntheticConfig::new(5, 4, 42)
    };
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let m_a = store_dataset(dir_a.path(), &generate_synthetic(&cfg).unwrap()).unwrap();
    let m_b = store_dataset(dir_b.path(), &generate_synthetic(&cfg).unwrap()).unwrap();
    assert_eq!(m_a.checksums, m_b.checksums);
    assert_eq!(
        fs::read(dir_a.path().join("manifest.json")).unwrap(),
        fs::read(dir_b.path().join("manifest.json")).unwrap()
    );
}
