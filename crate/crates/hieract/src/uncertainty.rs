//! Label-wise uncertainty, recursive coarse-to-fine propagation along the
//! label tree, and globally aligned per-point selection scores.
//!
//! All arithmetic is f64; the propagation oracle tolerance in the test
//! suite is far below f32 resolution.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hierarchy::LabelHierarchy;

#[derive(Debug, Error)]
pub enum UncertaintyError {
    #[error("probability {0} outside [0,1]")]
    DomainError(f64),
    #[error("level {level}: expected {expected} probabilities, got {got}")]
    ShapeMismatch {
        level: usize,
        expected: usize,
        got: usize,
    },
    #[error("expected {expected} levels, got {got}")]
    LevelCountMismatch { expected: usize, got: usize },
    #[error("level {level} sums to {sum}, beyond the 1e-6 tolerance")]
    NotNormalized { level: usize, sum: f64 },
    #[error("vector length {got} does not match profile length {expected}")]
    VectorMismatch { expected: usize, got: usize },
    #[error("cannot build a profile from an empty population")]
    EmptyPopulation,
    #[error("decay factor must be non-negative and finite, got {0}")]
    BadOmega(f64),
    #[error("per-level decay list has {got} entries, expected {expected}")]
    OmegaLengthMismatch { expected: usize, got: usize },
}

/// Slack allowed before a probability is rejected as out of domain.
const DOMAIN_SLACK: f64 = 1e-9;
/// How far a level may drift from unit mass before it is rejected rather
/// than renormalized.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-6;

/// Decay applied when injecting a parent's propagated uncertainty into its
/// children. A per-level list indexes child levels `1..=n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Omega {
    Uniform(f64),
    PerLevel(Vec<f64>),
}

impl Default for Omega {
    fn default() -> Self {
        Omega::Uniform(0.1)
    }
}

impl Omega {
    pub fn validate(&self, num_levels: usize) -> Result<(), UncertaintyError> {
        let check = |v: f64| {
            if !v.is_finite() || v < 0.0 {
                Err(UncertaintyError::BadOmega(v))
            } else {
                Ok(())
            }
        };
        match self {
            Omega::Uniform(v) => check(*v),
            Omega::PerLevel(vs) => {
                if vs.len() != num_levels.saturating_sub(1) {
                    return Err(UncertaintyError::OmegaLengthMismatch {
                        expected: num_levels.saturating_sub(1),
                        got: vs.len(),
                    });
                }
                vs.iter().try_for_each(|&v| check(v))
            }
        }
    }

    /// Decay used when propagating into `child_level` (>= 1).
    pub fn at(&self, child_level: usize) -> f64 {
        match self {
            Omega::Uniform(v) => *v,
            Omega::PerLevel(vs) => vs[child_level - 1],
        }
    }
}

/// How a single label probability maps to a label-wise uncertainty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelUncertainty {
    /// `1 - 2|p - 0.5|`: maximal at p = 0.5, zero at both endpoints.
    FlipDistance,
    /// `-p ln p`: the label's contribution to Shannon entropy.
    Entropy,
}

impl LabelUncertainty {
    pub fn eval(self, p: f64) -> f64 {
        match self {
            LabelUncertainty::FlipDistance => 1.0 - 2.0 * (p - 0.5).abs(),
            LabelUncertainty::Entropy => {
                if p <= 0.0 {
                    0.0
                } else {
                    -p * p.ln()
                }
            }
        }
    }
}

/// One point's softmax vector per hierarchy level, coarse to fine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiLevelDistribution {
    pub per_level: Vec<Vec<f64>>,
}

impl MultiLevelDistribution {
    pub fn new(per_level: Vec<Vec<f64>>) -> Self {
        Self { per_level }
    }

    /// Check shapes against a hierarchy and unit mass per level.
    /// Levels off by at most [`NORMALIZATION_TOLERANCE`] are renormalized
    /// in place; anything further off is rejected as corrupt.
    pub fn validate_and_renormalize(
        &mut self,
        h: &LabelHierarchy,
    ) -> Result<(), UncertaintyError> {
        self.check_shape(h)?;
        for (level, probs) in self.per_level.iter_mut().enumerate() {
            for &p in probs.iter() {
                if !(-DOMAIN_SLACK..=1.0 + DOMAIN_SLACK).contains(&p) || !p.is_finite() {
                    return Err(UncertaintyError::DomainError(p));
                }
            }
            let sum: f64 = probs.iter().sum();
            if (sum - 1.0).abs() > NORMALIZATION_TOLERANCE {
                return Err(UncertaintyError::NotNormalized { level, sum });
            }
            if sum != 1.0 && sum > 0.0 {
                for p in probs.iter_mut() {
                    *p /= sum;
                }
            }
        }
        Ok(())
    }

    fn check_shape(&self, h: &LabelHierarchy) -> Result<(), UncertaintyError> {
        if self.per_level.len() != h.num_levels() {
            return Err(UncertaintyError::LevelCountMismatch {
                expected: h.num_levels(),
                got: self.per_level.len(),
            });
        }
        for (level, probs) in self.per_level.iter().enumerate() {
            let expected = h.level(level).len();
            if probs.len() != expected {
                return Err(UncertaintyError::ShapeMismatch {
                    level,
                    expected,
                    got: probs.len(),
                });
            }
        }
        Ok(())
    }
}

/// Per-leaf-path cumulative uncertainty for one point, plus the raw
/// per-level values it was built from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropagatedUncertainty {
    /// One entry per leaf, in leaf-level order.
    pub per_path: Vec<f64>,
    /// Raw label-wise uncertainties per level, before propagation.
    pub per_level_raw: Vec<Vec<f64>>,
    pub omega: Omega,
}

/// Mean uncertainty vector over the unlabeled population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalProfile {
    pub mean_vector: Vec<f64>,
    pub population: usize,
}

/// Label-wise uncertainty of a single probability: `1 - 2|p - 0.5|`.
pub fn label_uncertainty(p: f64) -> Result<f64, UncertaintyError> {
    if !p.is_finite() || !(-DOMAIN_SLACK..=1.0 + DOMAIN_SLACK).contains(&p) {
        return Err(UncertaintyError::DomainError(p));
    }
    Ok(LabelUncertainty::FlipDistance.eval(p.clamp(0.0, 1.0)))
}

/// Recursive coarse-to-fine propagation with the default label-wise
/// uncertainty. See [`propagate_with`].
pub fn propagate(
    h: &LabelHierarchy,
    d: &MultiLevelDistribution,
    omega: &Omega,
) -> Result<PropagatedUncertainty, UncertaintyError> {
    propagate_with(h, d, omega, LabelUncertainty::FlipDistance)
}

/// Propagate uncertainty down the tree.
///
/// Level-0 values are the raw label-wise uncertainties. Each deeper node
/// adds the parent's propagated value, damped by the level's decay and
/// weighted by the node's share of its sibling uncertainty mass. When an
/// entire sibling set has zero uncertainty the parent's contribution is
/// split uniformly across it.
pub fn propagate_with(
    h: &LabelHierarchy,
    d: &MultiLevelDistribution,
    omega: &Omega,
    kind: LabelUncertainty,
) -> Result<PropagatedUncertainty, UncertaintyError> {
    d.check_shape(h)?;
    omega.validate(h.num_levels())?;

    let mut raw = vec![0.0f64; h.num_nodes()];
    let mut per_level_raw = Vec::with_capacity(h.num_levels());
    for level in 0..h.num_levels() {
        let probs = &d.per_level[level];
        let mut level_values = Vec::with_capacity(probs.len());
        for (&node_id, &p) in h.level(level).iter().zip(probs.iter()) {
            if !p.is_finite() || !(-DOMAIN_SLACK..=1.0 + DOMAIN_SLACK).contains(&p) {
                return Err(UncertaintyError::DomainError(p));
            }
            let u = kind.eval(p.clamp(0.0, 1.0));
            raw[node_id] = u;
            level_values.push(u);
        }
        per_level_raw.push(level_values);
    }

    let mut propagated = vec![0.0f64; h.num_nodes()];
    for &root in h.level(0) {
        propagated[root] = raw[root];
    }
    for level in 1..h.num_levels() {
        let decay = omega.at(level);
        for &parent in h.level(level - 1) {
            let siblings = h.sub_labels(parent).expect("non-leaf by construction");
            let sibling_sum: f64 = siblings.iter().map(|&c| raw[c]).sum();
            for &child in siblings {
                let share = if sibling_sum > 0.0 {
                    raw[child] / sibling_sum
                } else {
                    1.0 / siblings.len() as f64
                };
                propagated[child] = raw[child] + decay * propagated[parent] * share;
            }
        }
    }

    let per_path = h
        .leaf_paths()
        .iter()
        .map(|p| propagated[p.leaf_id])
        .collect();
    Ok(PropagatedUncertainty {
        per_path,
        per_level_raw,
        omega: omega.clone(),
    })
}

/// Elementwise mean over the unlabeled population.
pub fn global_profile(points: &[PropagatedUncertainty]) -> Result<GlobalProfile, UncertaintyError> {
    let first = points.first().ok_or(UncertaintyError::EmptyPopulation)?;
    let dim = first.per_path.len();
    let mut mean = vec![0.0f64; dim];
    for p in points {
        if p.per_path.len() != dim {
            return Err(UncertaintyError::VectorMismatch {
                expected: dim,
                got: p.per_path.len(),
            });
        }
        for (acc, v) in mean.iter_mut().zip(&p.per_path) {
            *acc += v;
        }
    }
    let n = points.len() as f64;
    for v in mean.iter_mut() {
        *v /= n;
    }
    Ok(GlobalProfile {
        mean_vector: mean,
        population: points.len(),
    })
}

/// Inner product of a point's path-uncertainty vector with the global mean.
pub fn score(point: &PropagatedUncertainty, g: &GlobalProfile) -> Result<f64, UncertaintyError> {
    if point.per_path.len() != g.mean_vector.len() {
        return Err(UncertaintyError::VectorMismatch {
            expected: g.mean_vector.len(),
            got: point.per_path.len(),
        });
    }
    Ok(point
        .per_path
        .iter()
        .zip(&g.mean_vector)
        .map(|(a, b)| a * b)
        .sum())
}

#[derive(Debug, Clone)]
pub struct SceneScores {
    /// One score per input point, in input order.
    pub scores: Vec<f64>,
    pub profile: GlobalProfile,
    pub propagated: Vec<PropagatedUncertainty>,
}

/// Score a whole unlabeled pool: propagate every point, average into the
/// global profile, then take inner products. Input order is preserved.
pub fn score_scene(
    h: &LabelHierarchy,
    distributions: &[MultiLevelDistribution],
    omega: &Omega,
) -> Result<SceneScores, UncertaintyError> {
    use rayon::prelude::*;
    if distributions.is_empty() {
        return Err(UncertaintyError::EmptyPopulation);
    }
    let propagated: Vec<PropagatedUncertainty> = distributions
        .par_iter()
        .map(|d| propagate(h, d, omega))
        .collect::<Result<_, _>>()?;
    // Sequential reduction keeps the profile bit-reproducible.
    let profile = global_profile(&propagated)?;
    let scores = propagated
        .iter()
        .map(|p| score(p, &profile))
        .collect::<Result<_, _>>()?;
    Ok(SceneScores {
        scores,
        profile,
        propagated,
    })
}
