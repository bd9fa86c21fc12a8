//! Worst-case bounds on smoothed scores within a threat model.
//!
//! Two bound families exist. Mean bounds only use the smoothed mean; CDF
//! bounds use the whole binned distribution and are never looser.

mod gaussian;
mod regions;
mod sparse;

pub use gaussian::{gaussian_cdf_lower, gaussian_cdf_upper, gaussian_mean_lower, gaussian_mean_upper};
pub use regions::{build_region_table, RegionTable};
pub use sparse::{sparse_cdf_lower, sparse_cdf_upper, sparse_mean_lower, sparse_mean_upper};

use serde::{Deserialize, Serialize};

use crate::error::{config, domain, Result};
use crate::smoothing::{ScoreDistribution, SmoothingScheme};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ThreatModel {
    L2Ball { r: f64 },
    /// Up to `r_a` zeros turned on and `r_d` ones turned off.
    BinaryBall { r_a: u32, r_d: u32 },
}

impl ThreatModel {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ThreatModel::L2Ball { r } if !(r >= 0.0 && r.is_finite()) => {
                Err(domain(format!("radius {r} must be finite and nonnegative")))
            }
            _ => Ok(()),
        }
    }

    /// Checks that the model can be certified under `scheme`.
    pub fn check_compatible(&self, scheme: &SmoothingScheme) -> Result<()> {
        self.validate()?;
        scheme.validate()?;
        match (self, scheme) {
            (ThreatModel::L2Ball { .. }, SmoothingScheme::Gaussian { .. })
            | (ThreatModel::BinaryBall { .. }, SmoothingScheme::SparseFlip { .. }) => Ok(()),
            _ => Err(config(format!(
                "threat model {self:?} cannot be certified with smoothing {scheme:?}"
            ))),
        }
    }

    /// The ball seen from the other end: if `x'` is in the ball around `x`,
    /// then `x` is in the mirrored ball around `x'`.
    pub fn mirrored(self) -> Self {
        match self {
            ThreatModel::BinaryBall { r_a, r_d } => ThreatModel::BinaryBall { r_a: r_d, r_d: r_a },
            l2 => l2,
        }
    }

    pub fn is_trivial(&self) -> bool {
        match *self {
            ThreatModel::L2Ball { r } => r == 0.0,
            ThreatModel::BinaryBall { r_a, r_d } => r_a == 0 && r_d == 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Upper,
    Lower,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundKind {
    /// Mean-only bound (RSCP).
    Mean,
    /// Binned-CDF bound (CAS).
    Cdf,
}

/// Whether the distribution was estimated at a clean input (bounding what
/// an attacker can reach) or at a possibly perturbed one (bounding the
/// unseen clean input). Only binary balls care: the radii swap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Perspective {
    Clean,
    Observed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundPair {
    pub lower: f64,
    pub upper: f64,
}

/// A threat model bound to a smoothing scheme, with the region table built
/// once and reused for every bound.
#[derive(Debug, Clone, PartialEq)]
pub struct Certifier {
    scheme: SmoothingScheme,
    model: ThreatModel,
    regions: Option<RegionTable>,
}

impl Certifier {
    pub fn new(scheme: SmoothingScheme, model: ThreatModel, perspective: Perspective) -> Result<Self> {
        model.check_compatible(&scheme)?;
        let effective = match perspective {
            Perspective::Clean => model,
            Perspective::Observed => model.mirrored(),
        };
        let regions = match (effective, scheme) {
            (ThreatModel::BinaryBall { r_a, r_d }, SmoothingScheme::SparseFlip { p0, p1 }) => {
                Some(build_region_table(r_a, r_d, p0, p1)?)
            }
            _ => None,
        };
        Ok(Self { scheme, model: effective, regions })
    }

    /// The ball actually certified, after any perspective swap.
    pub fn effective_model(&self) -> ThreatModel {
        self.model
    }

    pub fn regions(&self) -> Option<&RegionTable> {
        self.regions.as_ref()
    }

    pub fn mean_bound(&self, p: f64, direction: Direction) -> f64 {
        let p = p.clamp(0.0, 1.0);
        match (&self.regions, self.model, self.scheme, direction) {
            (Some(t), _, _, Direction::Upper) => sparse_mean_upper(p, t),
            (Some(t), _, _, Direction::Lower) => sparse_mean_lower(p, t),
            (None, ThreatModel::L2Ball { r }, SmoothingScheme::Gaussian { sigma }, Direction::Upper) => {
                gaussian_mean_upper(p, r, sigma)
            }
            (None, ThreatModel::L2Ball { r }, SmoothingScheme::Gaussian { sigma }, Direction::Lower) => {
                gaussian_mean_lower(p, r, sigma)
            }
            _ => unreachable!("compatibility is checked at construction"),
        }
    }

    /// CDF bound from explicit edges and inner CDF values, so that
    /// confidence bands can be plugged in place of the empirical CDF.
    pub fn cdf_bound_raw(&self, edges: &[f64], cdf: &[f64], direction: Direction) -> f64 {
        match (&self.regions, self.model, self.scheme, direction) {
            (Some(t), _, _, Direction::Upper) => sparse::sparse_cdf_upper_raw(edges, cdf, t),
            (Some(t), _, _, Direction::Lower) => sparse::sparse_cdf_lower_raw(edges, cdf, t),
            (None, ThreatModel::L2Ball { r }, SmoothingScheme::Gaussian { sigma }, Direction::Upper) => {
                gaussian::gaussian_cdf_upper_raw(edges, cdf, r, sigma)
            }
            (None, ThreatModel::L2Ball { r }, SmoothingScheme::Gaussian { sigma }, Direction::Lower) => {
                gaussian::gaussian_cdf_lower_raw(edges, cdf, r, sigma)
            }
            _ => unreachable!("compatibility is checked at construction"),
        }
    }

    pub fn bound(&self, dist: &ScoreDistribution, kind: BoundKind, direction: Direction) -> f64 {
        match kind {
            BoundKind::Mean => self.mean_bound(dist.mean(), direction),
            BoundKind::Cdf => self.cdf_bound_raw(dist.grid().edges(), dist.inner_cdf(), direction),
        }
    }

    pub fn pair(&self, dist: &ScoreDistribution, kind: BoundKind) -> BoundPair {
        BoundPair {
            lower: self.bound(dist, kind, Direction::Lower),
            upper: self.bound(dist, kind, Direction::Upper),
        }
    }
}

/// Bound for a distribution estimated at a possibly perturbed input.
pub fn bound_for_observed(
    dist: &ScoreDistribution,
    model: ThreatModel,
    scheme: SmoothingScheme,
    kind: BoundKind,
    direction: Direction,
) -> Result<f64> {
    Ok(Certifier::new(scheme, model, Perspective::Observed)?.bound(dist, kind, direction))
}

/// Bound on what an attacker can reach from a clean input.
pub fn bound_for_clean(
    dist: &ScoreDistribution,
    model: ThreatModel,
    scheme: SmoothingScheme,
    kind: BoundKind,
    direction: Direction,
) -> Result<f64> {
    Ok(Certifier::new(scheme, model, Perspective::Clean)?.bound(dist, kind, direction))
}
