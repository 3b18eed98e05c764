//! On-disk dataset format.
//!
//! A dataset directory holds `manifest.json` plus three payload files
//! (`train.bin`, `val.bin`, `test.bin`). Each payload is a contiguous
//! sequence of records: 8*32*32 little-endian f32 SAR values, then
//! 10*32*32 little-endian f32 MSI values, then one little-endian u16 label.

use super::{Dataset, PatchPair, MSI_BANDS, PATCH_SIZE, SAR_BANDS};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::path::Path;

pub const FORMAT_VERSION: &str = "lczlab/1";

const SAR_VALUES: usize = SAR_BANDS * PATCH_SIZE * PATCH_SIZE;
const MSI_VALUES: usize = MSI_BANDS * PATCH_SIZE * PATCH_SIZE;
pub const RECORD_BYTES: usize = 4 * (SAR_VALUES + MSI_VALUES) + 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// Per-band normalization statistics, computed on the train split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandStat {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: String,
    pub counts: SplitCounts,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub sar_bands: usize,
    pub msi_bands: usize,
    pub patch_size: usize,
    pub sar_stats: Vec<BandStat>,
    pub msi_stats: Vec<BandStat>,
    pub checksums: Checksums,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Checksums {
    pub train: String,
    pub val: String,
    pub test: String,
}

fn encode_split(patches: &[PatchPair]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(patches.len() * RECORD_BYTES);
    for p in patches {
        for &v in &p.sar.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for &v in &p.msi.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&p.label.to_le_bytes());
    }
    buf
}

fn decode_split(bytes: &[u8], expected: usize, file: &str) -> Result<Vec<PatchPair>> {
    if bytes.len() % RECORD_BYTES != 0 || bytes.len() / RECORD_BYTES != expected {
        return Err(Error::Format(format!(
            "{file}: holds {} bytes ({} complete records), manifest says {expected}",
            bytes.len(),
            bytes.len() / RECORD_BYTES,
        )));
    }
    let mut out = Vec::with_capacity(expected);
    for rec in bytes.chunks_exact(RECORD_BYTES) {
        let mut cursor = 0;
        let mut read_f32s = |n: usize| {
            let vals: Vec<f32> = rec[cursor..cursor + 4 * n]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            cursor += 4 * n;
            vals
        };
        let sar = read_f32s(SAR_VALUES);
        let msi = read_f32s(MSI_VALUES);
        let label = u16::from_le_bytes([rec[cursor], rec[cursor + 1]]);
        out.push(PatchPair::new(
            Tensor::new(&[SAR_BANDS, PATCH_SIZE, PATCH_SIZE], sar)?,
            Tensor::new(&[MSI_BANDS, PATCH_SIZE, PATCH_SIZE], msi)?,
            label,
        )?);
    }
    Ok(out)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut hex = String::with_capacity(64);
    for b in digest {
        hex.push_str(&format!("{b:02x}"));
    }
    hex
}

/// Write the dataset to `dir`, replacing any existing payloads. The stored
/// manifest's counts and checksums are recomputed from the splits.
pub fn store_dataset(dir: &Path, dataset: &Dataset) -> Result<DatasetManifest> {
    fs::create_dir_all(dir)?;
    let train = encode_split(&dataset.train);
    let val = encode_split(&dataset.val);
    let test = encode_split(&dataset.test);
    let mut manifest = dataset.manifest.clone();
    manifest.version = FORMAT_VERSION.to_string();
    manifest.counts = SplitCounts {
        train: dataset.train.len(),
        val: dataset.val.len(),
        test: dataset.test.len(),
    };
    manifest.checksums = Checksums {
        train: sha256_hex(&train),
        val: sha256_hex(&val),
        test: sha256_hex(&test),
    };
    fs::write(dir.join("train.bin"), &train)?;
    fs::write(dir.join("val.bin"), &val)?;
    fs::write(dir.join("test.bin"), &test)?;
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(manifest)
}

/// Load a dataset directory, verifying payload checksums and counts.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.json");
    let manifest: DatasetManifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;
    if manifest.version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported dataset version {:?}, expected {FORMAT_VERSION:?}",
            manifest.version
        )));
    }
    let mut splits = Vec::new();
    for (name, count, checksum) in [
        ("train.bin", manifest.counts.train, &manifest.checksums.train),
        ("val.bin", manifest.counts.val, &manifest.checksums.val),
        ("test.bin", manifest.counts.test, &manifest.checksums.test),
    ] {
        let bytes = fs::read(dir.join(name))?;
        let got = sha256_hex(&bytes);
        if &got != checksum {
            return Err(Error::Corruption(format!(
                "{name}: checksum {got} does not match manifest {checksum}"
            )));
        }
        splits.push(decode_split(&bytes, count, name)?);
    }
    let test = splits.pop().unwrap();
    let val = splits.pop().unwrap();
    let train = splits.pop().unwrap();
    Ok(Dataset {
        train,
        val,
        test,
        manifest,
    })
}
