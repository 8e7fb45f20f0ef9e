//! Gradient-alignment ("stiffness") statistics.
//!
//! Two datapoints are stiff when a small gradient step taken on one lowers the
//! loss on the other. To first order in the step size the loss change on the
//! second point is `-ε g₁·g₂`, so stiffness reduces to the alignment of the two
//! per-example loss gradients, measured either by the sign of their dot product
//! or by their cosine.
//!
//! All statistics are computed from a [`GradientSnapshot`]: gradients at one
//! frozen parameter vector for a fixed evaluation subset.

mod analysis;
mod snapshot;

pub use analysis::{
    bin_profile, estimate_xi, input_distance, within_between, Analyzer,
    ClassStiffnessMatrix, DistanceProfile, HierarchySummary, ModeAnalysis, ProfileBin,
    ProfileSample, Stat, WithinBetween, XiEstimate, XiInvalid, PROFILE_BINS,
};
pub use snapshot::{
    collect_snapshot, decode_snapshot, encode_snapshot, read_snapshot, write_snapshot,
    GradientRecord, GradientSnapshot, SnapshotMeta, Split,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, LinalgError, DEFAULT_EPS};
use crate::model::ModelError;

#[derive(Debug, Error)]
pub enum StiffnessError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("no eligible pairs for {0}")]
    NoPairs(String),
    #[error("class matrix cells without pairs: {0:?}")]
    MissingCells(Vec<(usize, usize)>),
    #[error("need at least 2 classes for a between-class summary")]
    TooFewClasses,
    #[error("input vector is not unit norm (|x| = {0})")]
    NonUnitInput(f64),
    #[error("snapshot records lack super-class ids")]
    NoHierarchy,
    #[error("subset index {index} out of range for the {split} split")]
    SubsetIndex { split: &'static str, index: usize },
    #[error("snapshot format error in {path} at byte {offset}: {detail}")]
    Format {
        path: String,
        offset: usize,
        detail: String,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StiffnessMetric {
    Sign,
    Cosine,
}

impl StiffnessMetric {
    pub const ALL: [StiffnessMetric; 2] = [StiffnessMetric::Sign, StiffnessMetric::Cosine];

    pub fn name(self) -> &'static str {
        match self {
            Self::Sign => "sign",
            Self::Cosine => "cosine",
        }
    }

    /// Pair value from the inner products `g₁·g₂`, `g₁·g₁`, `g₂·g₂`.
    pub fn from_dots(self, ab: f64, aa: f64, bb: f64) -> f64 {
        let eps2 = DEFAULT_EPS * DEFAULT_EPS;
        match self {
            Self::Sign if aa < eps2 || bb < eps2 => 0.0,
            Self::Sign if ab > 0.0 => 1.0,
            Self::Sign if ab < 0.0 => -1.0,
            Self::Sign => 0.0,
            Self::Cosine => linalg::cosine_from_dots(ab, aa, bb, DEFAULT_EPS),
        }
    }
}

impl std::str::FromStr for StiffnessMetric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sign" => Ok(Self::Sign),
            "cosine" => Ok(Self::Cosine),
            other => Err(format!("unknown metric '{other}' (expected sign|cosine)")),
        }
    }
}

/// Which splits the two endpoints of a pair come from. In `TrainVal` the
/// first endpoint is a training example and the second a validation example.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PairMode {
    #[serde(rename = "train-train")]
    TrainTrain,
    #[serde(rename = "train-val")]
    TrainVal,
    #[serde(rename = "val-val")]
    ValVal,
}

impl PairMode {
    pub const ALL: [PairMode; 3] = [PairMode::TrainTrain, PairMode::TrainVal, PairMode::ValVal];

    pub fn name(self) -> &'static str {
        match self {
            Self::TrainTrain => "train-train",
            Self::TrainVal => "train-val",
            Self::ValVal => "val-val",
        }
    }

    /// Both endpoints come from the same split, so pairs are unordered.
    pub fn is_symmetric(self) -> bool {
        !matches!(self, Self::TrainVal)
    }
}

impl std::str::FromStr for PairMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train-train" => Ok(Self::TrainTrain),
            "train-val" => Ok(Self::TrainVal),
            "val-val" => Ok(Self::ValVal),
            other => Err(format!(
                "unknown mode '{other}' (expected train-train|train-val|val-val)"
            )),
        }
    }
}

/// Stiffness of a single pair of gradients.
///
/// Sign stiffness is `sign(g₁·g₂)` with `sign(0) = 0`; cosine stiffness is
/// the clamped cosine. Either is 0 when a gradient has norm below
/// [`DEFAULT_EPS`].
pub fn pair_stiffness(g1: &[f64], g2: &[f64], metric: StiffnessMetric) -> Result<f64, StiffnessError> {
    let ab = linalg::dot(g1, g2)?;
    Ok(metric.from_dots(ab, linalg::dot_unchecked(g1, g1), linalg::dot_unchecked(g2, g2)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn self_pair_is_one() {
        let g = [0.3, -0.2, 5.0, 1e-3];
        for m in StiffnessMetric::ALL {
            assert_eq!(pair_stiffness(&g, &g, m).unwrap(), 1.0);
        }
        let neg: Vec<f64> = g.iter().map(|v| -v).collect();
        assert_eq!(pair_stiffness(&g, &neg, StiffnessMetric::Sign).unwrap(), -1.0);
    }

    #[test]
    fn cosine_by_hand() {
        let g1 = [1.0, 2.0, 2.0];
        let g2 = [2.0, -1.0, 2.0];
        // dot = 4, |g1| = 3, |g2| = 3
        let c = pair_stiffness(&g1, &g2, StiffnessMetric::Cosine).unwrap();
        assert!((c - 4.0 / 9.0).abs() < 1e-15);
        assert_eq!(pair_stiffness(&g1, &g2, StiffnessMetric::Sign).unwrap(), 1.0);
    }

    #[test]
    fn zero_gradient_and_orthogonal_pairs_are_zero() {
        let z = [0.0; 3];
        let g = [1.0, 0.0, 0.0];
        let h = [0.0, 1.0, 0.0];
        for m in StiffnessMetric::ALL {
            assert_eq!(pair_stiffness(&z, &g, m).unwrap(), 0.0);
            assert_eq!(pair_stiffness(&g, &h, m).unwrap(), 0.0);
        }
        assert!(pair_stiffness(&g, &[1.0], StiffnessMetric::Sign).is_err());
    }

    #[test]
    fn names_parse_back() {
        for m in StiffnessMetric::ALL {
            assert_eq!(m.name().parse::<StiffnessMetric>().unwrap(), m);
        }
        for m in PairMode::ALL {
            assert_eq!(m.name().parse::<PairMode>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.name()));
        }
        assert!("tanh".parse::<StiffnessMetric>().is_err());
    }

    proptest! {
        #[test]
        fn pair_stiffness_is_symmetric(
            a in prop::collection::vec(-3.0f64..3.0, 12),
            b in prop::collection::vec(-3.0f64..3.0, 12),
        ) {
            for m in StiffnessMetric::ALL {
                let ab = pair_stiffness(&a, &b, m).unwrap();
                let ba = pair_stiffness(&b, &a, m).unwrap();
                prop_assert_eq!(ab.to_bits(), ba.to_bits());
                prop_assert!((-1.0..=1.0).contains(&ab));
            }
        }
    }
}
