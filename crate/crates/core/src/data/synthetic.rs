//! Deterministic synthetic SAR-MSI generator.
//!
//! Every class gets a distinct template: a per-band mean profile plus a 2-D
//! sinusoidal texture, with seeded Gaussian noise on top. The class signal
//! is factorized across the modalities — SAR encodes one factor of the
//! class index, MSI the other — so on the full dataset neither modality
//! alone identifies the class and fusion carries real signal. The ablated
//! modes keep one modality's factor and silence the other, which is what
//! the fusion-value experiments compare against.

use super::format::{BandStat, Checksums, DatasetManifest, SplitCounts};
use super::{Dataset, PatchPair, LCZ_CLASSES, MSI_BANDS, PATCH_SIZE, SAR_BANDS};
use crate::error::{Error, Result};
use crate::tensor::{sample_normal, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;

/// Which modality carries its share of the class signal. The factorization
/// itself is fixed; ablation silences one side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModalityMode {
    Both,
    SarOnly,
    MsiOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub per_class: usize,
    pub seed: u64,
    pub noise: f64,
    pub modality: ModalityMode,
}

impl SyntheticConfig {
    pub fn new(classes: usize, per_class: usize, seed: u64) -> Self {
        SyntheticConfig {
            classes,
            per_class,
            seed,
            noise: 0.3,
            modality: ModalityMode::Both,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.per_class == 0 {
            return Err(Error::Parameter("per-class count must be >= 1".into()));
        }
        if self.classes == 0 || self.classes > LCZ_CLASSES {
            return Err(Error::Parameter(format!(
                "class count must be in 1..={LCZ_CLASSES}, got {}",
                self.classes
            )));
        }
        if !self.noise.is_finite() || self.noise < 0.0 {
            return Err(Error::Parameter(format!(
                "noise level must be non-negative, got {}",
                self.noise
            )));
        }
        Ok(())
    }
}

/// Class index factorization: k -> (k mod a, k div a) with a = ceil(sqrt(K)).
fn factor_codes(k: usize, classes: usize) -> (usize, usize) {
    let a = (classes as f64).sqrt().ceil() as usize;
    (k % a, k / a)
}

fn band_mean(code: usize, band: usize, modality: usize) -> f64 {
    1.5 * ((code as f64 + 1.0) * (band as f64 + 2.0) * 0.7 + modality as f64 * 1.9).sin()
}

fn texture(code: usize, modality: usize, y: usize, x: usize) -> f64 {
    let fx = 1.0 + (code % 3) as f64;
    let fy = 1.0 + ((code / 3) % 3) as f64;
    let phase = 0.6 * code as f64 + 0.35 * modality as f64;
    0.8 * (TAU * (fx * x as f64 + fy * y as f64) / PATCH_SIZE as f64 + phase).sin()
}

fn render(code: usize, modality: usize, bands: usize, noise: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let plane = PATCH_SIZE * PATCH_SIZE;
    let mut data = Vec::with_capacity(bands * plane);
    for b in 0..bands {
        let mean = band_mean(code, b, modality);
        for y in 0..PATCH_SIZE {
            for x in 0..PATCH_SIZE {
                let v = mean + texture(code, modality, y, x) + noise * sample_normal(rng);
                data.push(v as f32);
            }
        }
    }
    Tensor::new(&[bands, PATCH_SIZE, PATCH_SIZE], data).expect("render shape")
}

/// 70/15/15 per class, with at least one training patch per class.
fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = (7 * n / 10).max(1).min(n);
    let val = (15 * n / 100).min(n - train);
    let test = n - train - val;
    (train, val, test)
}

pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    for k in 0..cfg.classes {
        let (sar_code, msi_code) = factor_codes(k, cfg.classes);
        let (sar_code, msi_code) = match cfg.modality {
            ModalityMode::Both => (sar_code, msi_code),
            ModalityMode::SarOnly => (sar_code, 0),
            ModalityMode::MsiOnly => (0, msi_code),
        };
        let (n_tr, n_val, _) = split_sizes(cfg.per_class);
        for i in 0..cfg.per_class {
            let patch = PatchPair::new(
                render(sar_code, 0, SAR_BANDS, cfg.noise, &mut rng),
                render(msi_code, 1, MSI_BANDS, cfg.noise, &mut rng),
                k as u16,
            )?;
            if i < n_tr {
                train.push(patch);
            } else if i < n_tr + n_val {
                val.push(patch);
            } else {
                test.push(patch);
            }
        }
    }
    let (sar_stats, msi_stats) = train_stats(&train);
    let manifest = DatasetManifest {
        version: super::format::FORMAT_VERSION.to_string(),
        counts: SplitCounts {
            train: train.len(),
            val: val.len(),
            test: test.len(),
        },
        num_classes: cfg.classes,
        class_names: class_names(cfg.classes),
        sar_bands: SAR_BANDS,
        msi_bands: MSI_BANDS,
        patch_size: PATCH_SIZE,
        sar_stats,
        msi_stats,
        checksums: Checksums {
            train: String::new(),
            val: String::new(),
            test: String::new(),
        },
    };
    Ok(Dataset {
        train,
        val,
        test,
        manifest,
    })
}

fn class_names(classes: usize) -> Vec<String> {
    if classes == LCZ_CLASSES {
        super::labels::LCZ_NAMES.iter().map(|s| s.to_string()).collect()
    } else {
        (0..classes).map(|k| format!("class_{k}")).collect()
    }
}

/// Per-band mean/std over the train split. Constant bands get unit std so
/// z-scoring stays finite.
pub fn train_stats(train: &[PatchPair]) -> (Vec<BandStat>, Vec<BandStat>) {
    let plane = PATCH_SIZE * PATCH_SIZE;
    let stats = |bands: usize, get: &dyn Fn(&PatchPair) -> &Tensor| {
        (0..bands)
            .map(|b| {
                let mut sum = 0.0f64;
                let mut count = 0usize;
                for p in train {
                    for &v in &get(p).data[b * plane..(b + 1) * plane] {
                        sum += v as f64;
                    }
                    count += plane;
                }
                let mean = if count > 0 { sum / count as f64 } else { 0.0 };
                let mut var = 0.0f64;
                for p in train {
                    for &v in &get(p).data[b * plane..(b + 1) * plane] {
                        let d = v as f64 - mean;
                        var += d * d;
                    }
                }
                let var = if count > 0 { var / count as f64 } else { 1.0 };
                let std = if var.sqrt() < 1e-12 { 1.0 } else { var.sqrt() };
                BandStat { mean, std }
            })
            .collect::<Vec<_>>()
    };
    (
        stats(SAR_BANDS, &|p| &p.sar),
        stats(MSI_BANDS, &|p| &p.msi),
    )
}
