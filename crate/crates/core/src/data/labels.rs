//! Label spaces: the 17 LCZ classes and the 8-way albedo/semantics merge.
//!
//! Class index convention: LCZ classes 1-10 map to indices 0-9 (the
//! built-up block), classes A-G to indices 10-16 (the natural block).

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

pub const LCZ_NAMES: [&str; 17] = [
    "1", "2", "3", "4", "5", "6", "7", "8", "9", "10", "A", "B", "C", "D", "E", "F", "G",
];

pub const MERGED_NAMES: [&str; 8] = [
    "Compact built types",
    "Open built types",
    "Low-rise built types",
    "Heavy industry",
    "Dense vegetation",
    "Low vegetation",
    "Bare surfaces",
    "Water",
];

/// {1,2,3}->0, {4,5,6}->1, {7,8,9}->2, {10}->3, {A,B}->4, {C,D}->5,
/// {E,F}->6, {G}->7 under the 0-based index convention.
pub const MERGE_MAP: [usize; 17] = [0, 0, 0, 1, 1, 1, 2, 2, 2, 3, 4, 4, 5, 5, 6, 6, 7];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSpace {
    Original17,
    Merged8,
}

impl LabelSpace {
    pub fn num_classes(self) -> usize {
        match self {
            LabelSpace::Original17 => 17,
            LabelSpace::Merged8 => 8,
        }
    }

    pub fn class_names(self) -> Vec<String> {
        match self {
            LabelSpace::Original17 => LCZ_NAMES.iter().map(|s| s.to_string()).collect(),
            LabelSpace::Merged8 => MERGED_NAMES.iter().map(|s| s.to_string()).collect(),
        }
    }

    /// Index sets of the built-up / natural partition in this space.
    pub fn built_up_indices(self) -> Vec<usize> {
        match self {
            LabelSpace::Original17 => (0..10).collect(),
            LabelSpace::Merged8 => (0..4).collect(),
        }
    }

    pub fn natural_indices(self) -> Vec<usize> {
        match self {
            LabelSpace::Original17 => (10..17).collect(),
            LabelSpace::Merged8 => (4..8).collect(),
        }
    }
}

/// Map a raw 17-space label into the given space (identity for Original17).
pub fn merge_label(label: usize, space: LabelSpace) -> Result<usize> {
    if label >= 17 {
        return Err(Error::Data(format!("label {label} out of range 0..17")));
    }
    Ok(match space {
        LabelSpace::Original17 => label,
        LabelSpace::Merged8 => MERGE_MAP[label],
    })
}
