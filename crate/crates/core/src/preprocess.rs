//! Dataset variants #01..#05, bone-mask derivation, universal-mask
//! coverage and mask dissimilarity.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::eda::{ClinicalRecord, Label};
use crate::error::{Error, Result};
use crate::imaging::{apply_mask, check_same, combine_masks, point_in_mask, BinaryMask, ImageGrid, MaskOp};

/// Fraction of cases removed as mask outliers for variant 05.
pub const OUTLIER_FRACTION: f64 = 0.05;

/// Nodule coordinates in clinical metadata refer to this resolution.
pub const METADATA_RESOLUTION: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetVariant {
    /// Original radiographs.
    V01,
    /// Bone-shadow-excluded radiographs.
    V02,
    /// Originals cut to the lung field.
    V03,
    /// Bone-shadow-excluded radiographs cut to the lung field.
    V04,
    /// V04 without the cases whose lung masks are outliers.
    V05,
}

impl DatasetVariant {
    pub const ALL: [DatasetVariant; 5] = [Self::V01, Self::V02, Self::V03, Self::V04, Self::V05];

    pub fn needs_masks(self) -> bool {
        matches!(self, Self::V03 | Self::V04 | Self::V05)
    }

    pub fn needs_bse(self) -> bool {
        matches!(self, Self::V02 | Self::V04 | Self::V05)
    }

    pub fn needs_originals(self) -> bool {
        matches!(self, Self::V01 | Self::V03)
    }

    pub fn needs_exclusions(self) -> bool {
        self == Self::V05
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::V01 => "v01",
            Self::V02 => "v02",
            Self::V03 => "v03",
            Self::V04 => "v04",
            Self::V05 => "v05",
        }
    }
}

impl fmt::Display for DatasetVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown variant {s:?} (expected v01..v05)")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub case_id: String,
    pub image: ImageGrid,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProcessedDataset {
    pub variant: DatasetVariant,
    pub samples: Vec<Sample>,
    pub excluded_ids: Vec<String>,
}

/// Inputs keyed by case id. Collections a variant does not need may be empty.
#[derive(Debug, Clone, Default)]
pub struct VariantInputs {
    pub originals: BTreeMap<String, ImageGrid>,
    pub bse: BTreeMap<String, ImageGrid>,
    pub lung_masks: BTreeMap<String, BinaryMask>,
    pub labels: BTreeMap<String, Label>,
    pub exclusions: Vec<String>,
}

/// Number of cases removed when excluding `fraction` of `n`.
pub fn exclusion_count(n: usize, fraction: f64) -> usize {
    (fraction * n as f64).floor() as usize
}

/// Set where `original - bse >= threshold` inside the lung field.
pub fn derive_bone_mask(original: &ImageGrid, bse: &ImageGrid, lung_mask: &BinaryMask, threshold: u16) -> Result<BinaryMask> {
    check_same(original.dims(), bse.dims())?;
    check_same(original.dims(), lung_mask.dims())?;
    if threshold == 0 {
        return Err(Error::InvalidArgument("bone threshold must be positive".into()));
    }
    let bits = original
        .pixels()
        .iter()
        .zip(bse.pixels())
        .zip(lung_mask.bits())
        .map(|((&o, &b), &lung)| u8::from(lung == 1 && o.saturating_sub(b) >= threshold))
        .collect();
    BinaryMask::new(original.width(), original.height(), bits)
}

fn same_ids<A, B>(a: &BTreeMap<String, A>, b: &BTreeMap<String, B>, what: &str) -> Result<()> {
    if a.len() != b.len() || a.keys().zip(b.keys()).any(|(x, y)| x != y) {
        let left: BTreeSet<_> = a.keys().collect();
        let right: BTreeSet<_> = b.keys().collect();
        let diff: Vec<_> = left.symmetric_difference(&right).take(5).collect();
        return Err(Error::IdMismatch(format!("{what}: {diff:?}")));
    }
    Ok(())
}

pub fn build_variant(variant: DatasetVariant, inputs: &VariantInputs) -> Result<ProcessedDataset> {
    let name = variant.as_str();
    let missing = |what| Error::MissingInput { variant: name, missing: what };
    let base = if variant.needs_bse() {
        if inputs.bse.is_empty() {
            return Err(missing("bone-shadow-excluded images"));
        }
        &inputs.bse
    } else {
        if inputs.originals.is_empty() {
            return Err(missing("original images"));
        }
        &inputs.originals
    };
    if variant.needs_masks() {
        if inputs.lung_masks.is_empty() {
            return Err(missing("lung masks"));
        }
        same_ids(base, &inputs.lung_masks, "images vs lung masks")?;
    }
    if variant.needs_exclusions() && inputs.exclusions.is_empty() {
        return Err(missing("an exclusion list"));
    }
    same_ids(base, &inputs.labels, "images vs labels")?;

    let excluded: BTreeSet<&str> = if variant.needs_exclusions() {
        inputs.exclusions.iter().map(String::as_str).collect()
    } else {
        BTreeSet::new()
    };
    if let Some(unknown) = excluded.iter().find(|id| !base.contains_key(**id)) {
        return Err(Error::IdMismatch(format!("excluded id {unknown} not in dataset")));
    }

    let mut samples = Vec::with_capacity(base.len());
    for (case_id, image) in base {
        if excluded.contains(case_id.as_str()) {
            continue;
        }
        let image = if variant.needs_masks() {
            apply_mask(image, &inputs.lung_masks[case_id])?
        } else {
            image.clone()
        };
        samples.push(Sample {
            case_id: case_id.clone(),
            image,
            label: inputs.labels[case_id],
        });
    }
    Ok(ProcessedDataset {
        variant,
        samples,
        excluded_ids: excluded.into_iter().map(str::to_string).collect(),
    })
}

/// Scales a metadata coordinate to a grid of side `side`.
pub fn rescale_coordinate(value: u32, side: usize) -> usize {
    (value as usize * side) / METADATA_RESOLUTION
}

/// Nodule cases whose location falls outside the mask combined with `op`.
pub fn universal_mask_coverage(masks: &[BinaryMask], records: &[ClinicalRecord], op: MaskOp) -> Result<Vec<String>> {
    let universal = combine_masks(masks, op)?;
    let mut uncovered = Vec::new();
    for r in records.iter().filter(|r| r.has_nodule) {
        let (Some(x), Some(y)) = (r.nodule_x, r.nodule_y) else {
            continue;
        };
        let (x, y) = (rescale_coordinate(x, universal.width()), rescale_coordinate(y, universal.height()));
        if !point_in_mask(&universal, x, y)? {
            uncovered.push(r.case_id.clone());
        }
    }
    Ok(uncovered)
}

/// Jaccard distance; two empty masks are identical.
pub fn mask_dissimilarity(m1: &BinaryMask, m2: &BinaryMask) -> Result<f64> {
    check_same(m1.dims(), m2.dims())?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&a, &b) in m1.bits().iter().zip(m2.bits()) {
        inter += usize::from(a & b);
        union += usize::from(a | b);
    }
    if union == 0 {
        return Ok(0.0);
    }
    Ok(1.0 - inter as f64 / union as f64)
}
