//! Finite-sample corrections for Monte-Carlo estimates of smoothed scores.
//!
//! Every interval here holds with probability at least `1 - eta_part` for
//! the `eta_part` it was built with; composite procedures record their
//! spending in a [`BudgetLedger`].

use serde::{Deserialize, Serialize};

use crate::bounds::{BoundKind, Certifier, Direction, Perspective, ThreatModel};
use crate::error::{config, domain, Error, Result};
use crate::smoothing::{ScoreDistribution, SmoothingScheme};

fn check_eta(eta: f64) -> Result<()> {
    if eta > 0.0 && eta < 1.0 {
        Ok(())
    } else {
        Err(domain(format!("failure probability {eta} outside (0, 1)")))
    }
}

/// Two-sided Hoeffding radius `sqrt(ln(2 / eta) / (2 m))` for a mean of
/// `m` samples in `[0, 1]`.
pub fn hoeffding_radius(m: usize, eta: f64) -> Result<f64> {
    check_eta(eta)?;
    if m == 0 {
        return Err(domain("sample count must be at least 1"));
    }
    Ok(((2.0 / eta).ln() / (2.0 * m as f64)).sqrt())
}

/// Empirical-Bernstein radius
/// `sqrt(2 var ln(4 / eta) / m) + 7 ln(4 / eta) / (3 (m - 1))`.
pub fn bernstein_radius(m: usize, sample_variance: f64, eta: f64) -> Result<f64> {
    check_eta(eta)?;
    if m < 2 {
        return Err(domain("empirical Bernstein needs at least 2 samples"));
    }
    if !(sample_variance >= 0.0) {
        return Err(domain(format!("variance {sample_variance} is negative")));
    }
    let log_term = (4.0 / eta).ln();
    let m = m as f64;
    Ok((2.0 * sample_variance * log_term / m).sqrt() + 7.0 * log_term / (3.0 * (m - 1.0)))
}

/// Dvoretzky-Kiefer-Wolfowitz band half-width, valid for every edge at once.
pub fn dkw_radius(m: usize, eta: f64) -> Result<f64> {
    hoeffding_radius(m, eta)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrectionFlavor {
    /// Bernstein interval on the mean; the CDF is left uncorrected.
    MeanBernstein,
    /// DKW band on the CDF; the mean is left uncorrected.
    CdfDkw,
    /// Both, each built with half of the failure budget.
    Both,
}

impl CorrectionFlavor {
    pub fn for_kind(kind: BoundKind) -> Self {
        match kind {
            BoundKind::Mean => CorrectionFlavor::MeanBernstein,
            BoundKind::Cdf => CorrectionFlavor::CdfDkw,
        }
    }
}

/// An empirical distribution with confidence intervals on its statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectedDistribution {
    pub base: ScoreDistribution,
    pub mean_lo: f64,
    pub mean_hi: f64,
    /// Lower CDF band at the inner edges.
    pub cdf_lo: Vec<f64>,
    /// Upper CDF band at the inner edges.
    pub cdf_hi: Vec<f64>,
}

pub fn corrected_distribution(
    dist: &ScoreDistribution,
    eta_part: f64,
    flavor: CorrectionFlavor,
) -> Result<CorrectedDistribution> {
    check_eta(eta_part)?;
    let m = dist.sample_count();
    let (mean_eps, cdf_eps) = match flavor {
        CorrectionFlavor::MeanBernstein => (bernstein_radius(m, dist.variance(), eta_part)?, 0.0),
        CorrectionFlavor::CdfDkw => (0.0, dkw_radius(m, eta_part)?),
        CorrectionFlavor::Both => (
            bernstein_radius(m, dist.variance(), eta_part / 2.0)?,
            dkw_radius(m, eta_part / 2.0)?,
        ),
    };
    Ok(corrected_distribution_with_radii(dist, mean_eps, cdf_eps))
}

/// Builds the bands from explicit half-widths.
pub fn corrected_distribution_with_radii(
    dist: &ScoreDistribution,
    mean_eps: f64,
    cdf_eps: f64,
) -> CorrectedDistribution {
    let mean = dist.mean();
    let mut cdf_lo: Vec<f64> = dist.inner_cdf().iter().map(|p| (p - cdf_eps).max(0.0)).collect();
    let mut cdf_hi: Vec<f64> = dist.inner_cdf().iter().map(|p| (p + cdf_eps).min(1.0)).collect();
    // Clipping keeps order already, but enforce it so rounding never breaks it.
    for j in 1..cdf_lo.len() {
        cdf_lo[j] = cdf_lo[j].max(cdf_lo[j - 1]);
        cdf_hi[j] = cdf_hi[j].max(cdf_hi[j - 1]);
    }
    CorrectedDistribution {
        base: dist.clone(),
        mean_lo: (mean - mean_eps).max(0.0),
        mean_hi: (mean + mean_eps).min(1.0),
        cdf_lo,
        cdf_hi,
    }
}

impl CorrectedDistribution {
    /// The conservative side of each interval: an upper bound is fed the
    /// high mean or the low CDF (the CDF enters with a negative sign), and
    /// vice versa.
    pub fn bound(&self, certifier: &Certifier, kind: BoundKind, direction: Direction) -> f64 {
        let edges = self.base.grid().edges();
        match (kind, direction) {
            (BoundKind::Mean, Direction::Upper) => certifier.mean_bound(self.mean_hi, direction),
            (BoundKind::Mean, Direction::Lower) => certifier.mean_bound(self.mean_lo, direction),
            (BoundKind::Cdf, Direction::Upper) => certifier.cdf_bound_raw(edges, &self.cdf_lo, direction),
            (BoundKind::Cdf, Direction::Lower) => certifier.cdf_bound_raw(edges, &self.cdf_hi, direction),
        }
    }
}

/// Corrected bound at a possibly perturbed input: Bernstein for mean bounds,
/// DKW for CDF bounds.
pub fn corrected_bound(
    dist: &ScoreDistribution,
    model: ThreatModel,
    scheme: SmoothingScheme,
    kind: BoundKind,
    direction: Direction,
    eta_part: f64,
) -> Result<f64> {
    let certifier = Certifier::new(scheme, model, Perspective::Observed)?;
    let corrected = corrected_distribution(dist, eta_part, CorrectionFlavor::for_kind(kind))?;
    Ok(corrected.bound(&certifier, kind, direction))
}

/// Total failure probability a procedure may spend.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct ConfidenceBudget {
    eta: f64,
}

impl ConfidenceBudget {
    pub fn new(eta: f64) -> Result<Self> {
        check_eta(eta).map_err(|_| config(format!("eta = {eta} outside (0, 1)")))?;
        Ok(Self { eta })
    }

    pub fn eta(self) -> f64 {
        self.eta
    }

    pub fn ledger(self) -> BudgetLedger {
        BudgetLedger { eta: self.eta, entries: Vec::new() }
    }
}

impl TryFrom<f64> for ConfidenceBudget {
    type Error = Error;

    fn try_from(value: f64) -> Result<Self> {
        Self::new(value)
    }
}

impl From<ConfidenceBudget> for f64 {
    fn from(value: ConfidenceBudget) -> Self {
        value.eta
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub label: String,
    pub count: usize,
    pub each: f64,
}

/// Record of how a failure budget was split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetLedger {
    eta: f64,
    entries: Vec<LedgerEntry>,
}

impl BudgetLedger {
    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn spent(&self) -> f64 {
        self.entries.iter().map(|e| e.count as f64 * e.each).sum()
    }

    /// Charges `count` events of `each`; fails without recording if the
    /// total would exceed the budget (up to rounding).
    pub fn spend(&mut self, label: &str, count: usize, each: f64) -> Result<f64> {
        if !(each >= 0.0) {
            return Err(domain(format!("negative spend {each}")));
        }
        let spent = self.spent() + count as f64 * each;
        if spent > self.eta * (1.0 + 1e-12) {
            return Err(Error::BudgetExceeded { spent, eta: self.eta });
        }
        self.entries.push(LedgerEntry { label: label.to_string(), count, each });
        Ok(each)
    }
}
