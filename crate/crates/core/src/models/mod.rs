//! The fusion model zoo: FM1-FM4 and their ablation variants, built from a
//! declarative [`ModelSpec`].

mod checkpoint;
mod network;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest};
pub use network::{
    argmax_rows, normalize_batch, one_hot, ForwardOutput, FusionNetwork, GraphRun, ParamId,
};

use crate::data::LabelSpace;
use crate::error::{Error, Result};
use crate::scalespace::ScaleSpec;
use serde::{Deserialize, Serialize};

pub const FEATURE_CHANNELS: usize = 32;
pub const FUSION_CHANNELS: usize = 64;
pub const HEAD_WIDTH: usize = 64;
pub const DEFAULT_ATTENTION_HEADS: usize = 8;
pub const DEFAULT_ALPHA: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Fm1,
    Fm1a,
    Fm1b,
    Fm2,
    Fm2b,
    Fm3,
    Fm3a,
    Fm3b,
    Fm4,
}

pub const ALL_VARIANTS: [Variant; 9] = [
    Variant::Fm1,
    Variant::Fm1a,
    Variant::Fm1b,
    Variant::Fm2,
    Variant::Fm2b,
    Variant::Fm3,
    Variant::Fm3a,
    Variant::Fm3b,
    Variant::Fm4,
];

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Fm1 => "fm1",
            Variant::Fm1a => "fm1a",
            Variant::Fm1b => "fm1b",
            Variant::Fm2 => "fm2",
            Variant::Fm2b => "fm2b",
            Variant::Fm3 => "fm3",
            Variant::Fm3a => "fm3a",
            Variant::Fm3b => "fm3b",
            Variant::Fm4 => "fm4",
        }
    }

    pub fn has_pixel_branch(self) -> bool {
        matches!(
            self,
            Variant::Fm1 | Variant::Fm1a | Variant::Fm2 | Variant::Fm3 | Variant::Fm3a
        )
    }

    pub fn has_feature_branch(self) -> bool {
        matches!(
            self,
            Variant::Fm1
                | Variant::Fm1b
                | Variant::Fm2
                | Variant::Fm2b
                | Variant::Fm3
                | Variant::Fm3b
        )
    }

    pub fn has_attention(self) -> bool {
        matches!(self, Variant::Fm2 | Variant::Fm2b)
    }

    pub fn has_scales(self) -> bool {
        matches!(self, Variant::Fm3 | Variant::Fm3a | Variant::Fm3b)
    }

    pub fn is_late_fusion(self) -> bool {
        matches!(self, Variant::Fm4)
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ALL_VARIANTS
            .into_iter()
            .find(|v| v.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Declarative description of one fusion model. Variant-specific fields must
/// be present exactly for the variants that use them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub variant: Variant,
    pub band_grouping: bool,
    pub label_space: LabelSpace,
    pub num_classes: usize,
    pub attention_heads: Option<usize>,
    pub scale_spec: Option<ScaleSpec>,
    pub alpha: Option<f64>,
}

impl ModelSpec {
    pub fn new(variant: Variant, band_grouping: bool, label_space: LabelSpace) -> Self {
        ModelSpec {
            variant,
            band_grouping,
            label_space,
            num_classes: label_space.num_classes(),
            attention_heads: variant.has_attention().then_some(DEFAULT_ATTENTION_HEADS),
            scale_spec: variant.has_scales().then(ScaleSpec::default),
            alpha: variant.is_late_fusion().then_some(DEFAULT_ALPHA),
        }
    }

    /// Override the class count for synthetic datasets with fewer raw
    /// classes; only meaningful in the original label space.
    pub fn with_classes(mut self, num_classes: usize) -> Self {
        self.num_classes = num_classes;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.variant;
        match (&self.attention_heads, v.has_attention()) {
            (Some(h), true) => crate::tensor::check_heads(FEATURE_CHANNELS, *h)?,
            (Some(_), false) => {
                return Err(Error::Config(format!(
                    "attention_heads set for non-attention variant {v}"
                )))
            }
            (None, true) => {
                return Err(Error::Config(format!("variant {v} needs attention_heads")))
            }
            (None, false) => {}
        }
        match (&self.scale_spec, v.has_scales()) {
            (Some(s), true) => s.validate()?,
            (Some(_), false) => {
                return Err(Error::Config(format!(
                    "scale_spec set for non-multiscale variant {v}"
                )))
            }
            (None, true) => return Err(Error::Config(format!("variant {v} needs a scale_spec"))),
            (None, false) => {}
        }
        match (&self.alpha, v.is_late_fusion()) {
            (Some(a), true) => {
                if !(0.0..=1.0).contains(a) {
                    return Err(Error::Config(format!("alpha must be in [0,1], got {a}")));
                }
            }
            (Some(_), false) => {
                return Err(Error::Config(format!(
                    "alpha set for non-late-fusion variant {v}"
                )))
            }
            (None, true) => return Err(Error::Config(format!("variant {v} needs alpha"))),
            (None, false) => {}
        }
        match self.label_space {
            LabelSpace::Merged8 => {
                if self.num_classes != 8 {
                    return Err(Error::Config(format!(
                        "merged label space requires 8 classes, got {}",
                        self.num_classes
                    )));
                }
            }
            LabelSpace::Original17 => {
                if self.num_classes == 0 || self.num_classes > 17 {
                    return Err(Error::Config(format!(
                        "num_classes must be in 1..=17, got {}",
                        self.num_classes
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn num_scales(&self) -> usize {
        self.scale_spec.as_ref().map_or(1, |s| s.num_scales())
    }
}
