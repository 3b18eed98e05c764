//! Spectral band grouping: SAR bands by polarization, MSI bands by
//! spectral correlation.
//!
//! MSI band order in the 10-band patches is B2, B3, B4, B5, B6, B7, B8,
//! B8a, B11, B12 (indices 0-9).

use super::{PatchPair, MSI_BANDS, PATCH_SIZE, SAR_BANDS};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Ordered group-name -> band-index assignment for both modalities. Each
/// modality's groups must partition its band index set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BandGroupMap {
    pub sar_groups: Vec<(String, Vec<usize>)>,
    pub msi_groups: Vec<(String, Vec<usize>)>,
}

impl BandGroupMap {
    /// The published grouping: VH={1,2,5}, VV={3,4,6}, CMOE={7,8} by 1-based
    /// SAR band number; RGB={B2,B3,B4}, VRE={B5,B6,B7,B8a}, SWIR={B11,B12},
    /// NIR={B8}.
    pub fn default_grouping() -> Self {
        BandGroupMap {
            sar_groups: vec![
                ("VH".into(), vec![0, 1, 4]),
                ("VV".into(), vec![2, 3, 5]),
                ("CMOE".into(), vec![6, 7]),
            ],
            msi_groups: vec![
                ("RGB".into(), vec![0, 1, 2]),
                ("VRE".into(), vec![3, 4, 5, 7]),
                ("SWIR".into(), vec![8, 9]),
                ("NIR".into(), vec![6]),
            ],
        }
    }

    /// Every band in its own singleton group.
    pub fn identity() -> Self {
        BandGroupMap {
            sar_groups: (0..SAR_BANDS).map(|b| (format!("sar{b}"), vec![b])).collect(),
            msi_groups: (0..MSI_BANDS).map(|b| (format!("msi{b}"), vec![b])).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_partition("sar", &self.sar_groups, SAR_BANDS)?;
        check_partition("msi", &self.msi_groups, MSI_BANDS)
    }
}

fn check_partition(modality: &str, groups: &[(String, Vec<usize>)], bands: usize) -> Result<()> {
    let mut seen = vec![0usize; bands];
    let mut out_of_range = Vec::new();
    for (_, idxs) in groups {
        for &b in idxs {
            if b >= bands {
                out_of_range.push(b);
            } else {
                seen[b] += 1;
            }
        }
    }
    let missing: Vec<usize> = (0..bands).filter(|&b| seen[b] == 0).collect();
    let duplicated: Vec<usize> = (0..bands).filter(|&b| seen[b] > 1).collect();
    if !missing.is_empty() || !duplicated.is_empty() || !out_of_range.is_empty() {
        return Err(Error::Config(format!(
            "{modality} groups do not partition 0..{bands}: missing {missing:?}, \
             duplicated {duplicated:?}, out of range {out_of_range:?}"
        )));
    }
    Ok(())
}

/// A patch split into its band groups, in map order.
#[derive(Debug, Clone)]
pub struct GroupedPatch {
    pub sar: Vec<Tensor>,
    pub msi: Vec<Tensor>,
}

/// Stack each group's member bands (in map order) into its own tensor.
/// Total channels are conserved: 8 across SAR groups, 10 across MSI groups.
pub fn apply_band_grouping(patch: &PatchPair, map: &BandGroupMap) -> Result<GroupedPatch> {
    map.validate()?;
    let take = |src: &Tensor, idxs: &[usize]| {
        let plane = PATCH_SIZE * PATCH_SIZE;
        let mut data = Vec::with_capacity(idxs.len() * plane);
        for &b in idxs {
            data.extend_from_slice(&src.data[b * plane..(b + 1) * plane]);
        }
        Tensor::new(&[idxs.len(), PATCH_SIZE, PATCH_SIZE], data).expect("validated group")
    };
    Ok(GroupedPatch {
        sar: map.sar_groups.iter().map(|(_, idxs)| take(&patch.sar, idxs)).collect(),
        msi: map.msi_groups.iter().map(|(_, idxs)| take(&patch.msi, idxs)).collect(),
    })
}

/// Inverse of [`apply_band_grouping`]: scatter the group channels back onto
/// their original band positions.
pub fn reconstruct_from_groups(
    grouped: &GroupedPatch,
    map: &BandGroupMap,
    label: u16,
) -> Result<PatchPair> {
    map.validate()?;
    let plane = PATCH_SIZE * PATCH_SIZE;
    let put = |tensors: &[Tensor], groups: &[(String, Vec<usize>)], bands: usize| {
        let mut data = vec![0.0f32; bands * plane];
        for (t, (_, idxs)) in tensors.iter().zip(groups) {
            for (slot, &b) in idxs.iter().enumerate() {
                data[b * plane..(b + 1) * plane]
                    .copy_from_slice(&t.data[slot * plane..(slot + 1) * plane]);
            }
        }
        Tensor::new(&[bands, PATCH_SIZE, PATCH_SIZE], data).expect("validated bands")
    };
    PatchPair::new(
        put(&grouped.sar, &map.sar_groups, SAR_BANDS),
        put(&grouped.msi, &map.msi_groups, MSI_BANDS),
        label,
    )
}

/// Expand base-band group indices onto a scale-major multi-scale stack:
/// band b at scale s lives at channel s*bands + b.
pub fn expand_for_scales(indices: &[usize], bands: usize, scales: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(indices.len() * scales);
    for s in 0..scales {
        for &b in indices {
            out.push(s * bands + b);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn patch_with_constant_bands() -> PatchPair {
        let plane = PATCH_SIZE * PATCH_SIZE;
        let mut sar = vec![0.0f32; SAR_BANDS * plane];
        for b in 0..SAR_BANDS {
            sar[b * plane..(b + 1) * plane].fill(b as f32);
        }
        let mut msi = vec![0.0f32; MSI_BANDS * plane];
        for b in 0..MSI_BANDS {
            msi[b * plane..(b + 1) * plane].fill(100.0 + b as f32);
        }
        PatchPair::new(
            Tensor::new(&[SAR_BANDS, PATCH_SIZE, PATCH_SIZE], sar).unwrap(),
            Tensor::new(&[MSI_BANDS, PATCH_SIZE, PATCH_SIZE], msi).unwrap(),
            3,
        )
        .unwrap()
    }

    #[test]
    fn table_grouping_has_published_channel_counts() {
        let map = BandGroupMap::default_grouping();
        map.validate().unwrap();
        let g = apply_band_grouping(&patch_with_constant_bands(), &map).unwrap();
        let sar_counts: Vec<usize> = g.sar.iter().map(|t| t.shape[0]).collect();
        let msi_counts: Vec<usize> = g.msi.iter().map(|t| t.shape[0]).collect();
        assert_eq!(sar_counts, [3, 3, 2]);
        assert_eq!(msi_counts, [3, 4, 2, 1]);
    }

    #[test]
    fn vh_group_stacks_member_bands_in_map_order() {
        let plane = PATCH_SIZE * PATCH_SIZE;
        let mut patch = patch_with_constant_bands();
        patch.sar.data[0..plane].fill(7.0);
        patch.sar.data[plane..2 * plane].fill(8.0);
        patch.sar.data[4 * plane..5 * plane].fill(9.0);
        let g = apply_band_grouping(&patch, &BandGroupMap::default_grouping()).unwrap();
        let vh = &g.sar[0];
        assert!(vh.data[0..plane].iter().all(|&v| v == 7.0));
        assert!(vh.data[plane..2 * plane].iter().all(|&v| v == 8.0));
        assert!(vh.data[2 * plane..3 * plane].iter().all(|&v| v == 9.0));
    }

    #[test]
    fn identity_map_yields_singleton_bands() {
        let patch = patch_with_constant_bands();
        let g = apply_band_grouping(&patch, &BandGroupMap::identity()).unwrap();
        assert_eq!(g.sar.len() + g.msi.len(), 18);
        let plane = PATCH_SIZE * PATCH_SIZE;
        for (b, t) in g.sar.iter().enumerate() {
            assert_eq!(t.shape, [1, PATCH_SIZE, PATCH_SIZE]);
            assert_eq!(t.data, patch.sar.data[b * plane..(b + 1) * plane]);
        }
    }

    #[test]
    fn non_partition_map_reports_missing_and_duplicated() {
        let mut map = BandGroupMap::default_grouping();
        map.sar_groups[0].1 = vec![0, 1, 3]; // drops 4, duplicates 3
        let err = apply_band_grouping(&patch_with_constant_bands(), &map).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("missing [4]"), "{msg}");
        assert!(msg.contains("duplicated [3]"), "{msg}");
    }

    #[test]
    fn group_then_reconstruct_is_bit_exact() {
        let patch = patch_with_constant_bands();
        let map = BandGroupMap::default_grouping();
        let g = apply_band_grouping(&patch, &map).unwrap();
        let back = reconstruct_from_groups(&g, &map, patch.label).unwrap();
        assert_eq!(back, patch);
    }

    #[test]
    fn scale_expansion_is_scale_major() {
        assert_eq!(expand_for_scales(&[0, 1, 4], 8, 2), [0, 1, 4, 8, 9, 12]);
    }
}
