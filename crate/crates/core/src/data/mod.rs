//! Dataset representation: co-registered SAR/MSI patch pairs, band
//! grouping, label spaces, on-disk format, and the synthetic generator.

mod bands;
mod format;
mod labels;
mod synthetic;

pub use bands::{
    apply_band_grouping, expand_for_scales, reconstruct_from_groups, BandGroupMap, GroupedPatch,
};
pub use format::{
    load_dataset, sha256_hex, store_dataset, BandStat, Checksums, DatasetManifest, SplitCounts,
    FORMAT_VERSION, RECORD_BYTES,
};
pub use labels::{merge_label, LabelSpace, LCZ_NAMES, MERGED_NAMES, MERGE_MAP};
pub use synthetic::{generate_synthetic, train_stats, ModalityMode, SyntheticConfig};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SAR_BANDS: usize = 8;
pub const MSI_BANDS: usize = 10;
pub const PATCH_SIZE: usize = 32;
pub const LCZ_CLASSES: usize = 17;

/// One 32x32 SAR patch (8 bands), its co-registered 32x32 MSI patch
/// (10 bands), and the ground-truth class index.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchPair {
    pub sar: Tensor,
    pub msi: Tensor,
    pub label: u16,
}

impl PatchPair {
    pub fn new(sar: Tensor, msi: Tensor, label: u16) -> Result<Self> {
        if sar.shape != [SAR_BANDS, PATCH_SIZE, PATCH_SIZE] {
            return Err(Error::shape(
                "patch: sar",
                &[SAR_BANDS, PATCH_SIZE, PATCH_SIZE],
                &sar.shape,
            ));
        }
        if msi.shape != [MSI_BANDS, PATCH_SIZE, PATCH_SIZE] {
            return Err(Error::shape(
                "patch: msi",
                &[MSI_BANDS, PATCH_SIZE, PATCH_SIZE],
                &msi.shape,
            ));
        }
        if usize::from(label) >= LCZ_CLASSES {
            return Err(Error::Data(format!(
                "label {label} out of range 0..{LCZ_CLASSES}"
            )));
        }
        Ok(PatchPair { sar, msi, label })
    }

    pub fn is_finite(&self) -> bool {
        self.sar.is_finite() && self.msi.is_finite()
    }
}

/// A full dataset: the three splits plus the manifest that describes them.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<PatchPair>,
    pub val: Vec<PatchPair>,
    pub test: Vec<PatchPair>,
    pub manifest: DatasetManifest,
}

impl Dataset {
    /// Per-band z-score of one patch using the manifest's train-split stats.
    pub fn normalize(&self, patch: &PatchPair) -> PatchPair {
        normalize_patch(patch, &self.manifest.sar_stats, &self.manifest.msi_stats)
    }

    pub fn normalized_split(&self, split: &[PatchPair]) -> Vec<PatchPair> {
        split.iter().map(|p| self.normalize(p)).collect()
    }
}

pub fn normalize_patch(
    patch: &PatchPair,
    sar_stats: &[BandStat],
    msi_stats: &[BandStat],
) -> PatchPair {
    let plane = PATCH_SIZE * PATCH_SIZE;
    let norm = |t: &Tensor, stats: &[BandStat]| {
        let mut data = t.data.clone();
        for (b, stat) in stats.iter().enumerate() {
            let mean = stat.mean as f32;
            let std = stat.std as f32;
            for v in &mut data[b * plane..(b + 1) * plane] {
                *v = (*v - mean) / std;
            }
        }
        Tensor {
            shape: t.shape.clone(),
            data,
            requires_grad: false,
            grad: None,
        }
    };
    PatchPair {
        sar: norm(&patch.sar, sar_stats),
        msi: norm(&patch.msi, msi_stats),
        label: patch.label,
    }
}
