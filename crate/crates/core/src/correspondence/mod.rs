//! Nearest-neighbour correspondence between context and reference features,
//! attention-derived region masks and PCA feature visualisation.

mod clustering;
mod matching;
mod pca;
mod positional;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use clustering::{cluster_masks, resample_mask, ClusterMask, KMeansOptions};
pub use matching::{match_features, rearrange, recompute_distances, shuffle_assignment};
pub use pca::{pca_visualize, pca_visualize_frame, PcaImage};
pub use positional::{add_positional_encoding, make_positional_field, PositionalField};

/// Positional encoding layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum PeMode {
    #[default]
    #[serde(rename = "2d")]
    TwoD,
    #[serde(rename = "3d")]
    ThreeD,
}

impl std::fmt::Display for PeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PeMode::TwoD => "2d",
            PeMode::ThreeD => "3d",
        })
    }
}

impl std::str::FromStr for PeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "2d" => Ok(PeMode::TwoD),
            "3d" => Ok(PeMode::ThreeD),
            other => Err(Error::Config(format!("unknown positional encoding mode `{other}`"))),
        }
    }
}

/// Foreground masks `[frames, rows, cols]` for the context and the reference.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionMask {
    pub context: Array3<bool>,
    pub reference: Array3<bool>,
}

impl RegionMask {
    pub fn new(context: Array3<bool>, reference: Array3<bool>) -> Result<Self> {
        for f in 0..context.dim().0 {
            if !context.index_axis(ndarray::Axis(0), f).iter().any(|&v| v) {
                return Err(Error::EmptyMask("context"));
            }
        }
        for f in 0..reference.dim().0 {
            if !reference.index_axis(ndarray::Axis(0), f).iter().any(|&v| v) {
                return Err(Error::EmptyMask("reference"));
            }
        }
        Ok(RegionMask { context, reference })
    }

    /// All-true masks.
    pub fn full(frames: usize, context: (usize, usize), reference: (usize, usize)) -> Self {
        RegionMask {
            context: Array3::from_elem((frames, context.0, context.1), true),
            reference: Array3::from_elem((frames, reference.0, reference.1), true),
        }
    }
}

/// Per-frame assignment of context positions to reference positions.
///
/// Positions are row-major linear indices.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceMap {
    /// `[frames, context positions]`.
    pub assignment: Array2<usize>,
    /// Squared L2 distance to the assigned reference vector.
    pub distances: Array2<f64>,
    /// Inside the context mask.
    pub valid: Array2<bool>,
    /// Context grid.
    pub rows: usize,
    pub cols: usize,
}

impl CorrespondenceMap {
    pub fn frames(&self) -> usize {
        self.assignment.nrows()
    }

    pub fn positions(&self) -> usize {
        self.rows * self.cols
    }
}
