//! Prediction sets that keep their coverage when the test input is
//! adversarially perturbed inside a threat model.
//!
//! Two placements of the certificate are supported:
//!
//! * test time: upper-bound every class score of the observed input and
//!   compare against the ordinary threshold;
//! * calibration time: lower-bound the true-label score of every clean
//!   calibration point, take the quantile of those bounds, and compare plain
//!   smoothed test scores against it.
//!
//! Both optionally account for Monte-Carlo error with an explicit failure
//! budget.

use serde::{Deserialize, Serialize};

use crate::bounds::{BoundKind, Certifier, Direction, Perspective, ThreatModel};
use crate::conformal::{
    conformal_quantile, inverse_quantile, prediction_set, threshold_serde, PredictionSet,
    QuantileSpec,
};
use crate::correction::{
    bernstein_radius, corrected_distribution, hoeffding_radius, BudgetLedger, ConfidenceBudget,
    CorrectionFlavor,
};
use crate::error::{config, domain, Result};
use crate::smoothing::{ScoreDistribution, SmoothingScheme};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvasionMode {
    TestTime,
    CalibrationTime,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvasionConfig {
    pub scheme: SmoothingScheme,
    pub model: ThreatModel,
    pub mode: EvasionMode,
    pub bound_kind: BoundKind,
    pub correction: Option<ConfidenceBudget>,
}

impl EvasionConfig {
    pub fn new(scheme: SmoothingScheme, model: ThreatModel, bound_kind: BoundKind) -> Self {
        Self { scheme, model, mode: EvasionMode::TestTime, bound_kind, correction: None }
    }

    /// Calibration-time placement, the default once a correction budget is set.
    pub fn with_correction(mut self, budget: ConfidenceBudget) -> Self {
        self.correction = Some(budget);
        self.mode = EvasionMode::CalibrationTime;
        self
    }

    pub fn with_mode(mut self, mode: EvasionMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.model.check_compatible(&self.scheme)
    }

    fn check_alpha(&self, alpha: f64) -> Result<QuantileSpec> {
        match self.correction {
            Some(b) if alpha <= b.eta() => Err(config(format!(
                "alpha = {alpha} must exceed the correction budget eta = {}",
                b.eta()
            ))),
            Some(b) => QuantileSpec::new(alpha - b.eta()),
            None => QuantileSpec::new(alpha),
        }
    }
}

/// Per calibration point statistics of the true-label smoothed score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRow {
    pub dist: ScoreDistribution,
    pub smooth_mean: f64,
    /// Certified lower bound on the score any perturbation can reach.
    pub lower: f64,
    /// The same bound with Monte-Carlo error accounted for.
    pub corrected_lower: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationTable {
    pub config: EvasionConfig,
    pub rows: Vec<CalibrationRow>,
}

impl CalibrationTable {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn smooth_means(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.smooth_mean).collect()
    }

    pub fn lowers(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.lower).collect()
    }

    pub fn corrected_lowers(&self) -> Option<Vec<f64>> {
        self.rows.iter().map(|r| r.corrected_lower).collect()
    }
}

/// Lower bound on what an attacker can reach from a clean calibration point.
/// With no perturbation the bound is the smoothed mean itself.
fn clean_lower(certifier: &Certifier, model: ThreatModel, dist: &ScoreDistribution, kind: BoundKind) -> f64 {
    if model.is_trivial() {
        dist.mean()
    } else {
        certifier.bound(dist, kind, Direction::Lower)
    }
}

/// Builds the calibration table from the true-label distributions of the
/// calibration points and returns it with the clean threshold (the quantile
/// of the smoothed means).
pub fn calibrate_smooth(
    cal_dists: &[ScoreDistribution],
    alpha: f64,
    config: &EvasionConfig,
) -> Result<(CalibrationTable, f64)> {
    config.validate()?;
    if cal_dists.is_empty() {
        return Err(domain("calibration set is empty"));
    }
    let spec = QuantileSpec::new(alpha)?;
    let certifier = Certifier::new(config.scheme, config.model, Perspective::Clean)?;
    let n = cal_dists.len();
    let eta_point = config.correction.map(|b| b.eta() / (2.0 * n as f64));
    let rows = cal_dists
        .iter()
        .map(|d| {
            let corrected_lower = match eta_point {
                Some(eta) => {
                    let flavor = CorrectionFlavor::for_kind(config.bound_kind);
                    let c = corrected_distribution(d, eta, flavor)?;
                    Some(c.bound(&certifier, config.bound_kind, Direction::Lower))
                }
                None => None,
            };
            Ok(CalibrationRow {
                dist: d.clone(),
                smooth_mean: d.mean(),
                lower: clean_lower(&certifier, config.model, d, config.bound_kind),
                corrected_lower,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let table = CalibrationTable { config: *config, rows };
    let q = conformal_quantile(&table.smooth_means(), spec)?;
    Ok((table, q))
}

/// Conservative threshold: the quantile of the certified lower bounds.
pub fn calibration_time_threshold(table: &CalibrationTable, alpha: f64) -> Result<f64> {
    conformal_quantile(&table.lowers(), QuantileSpec::new(alpha)?)
}

/// `1 - beta`, a lower bound on the coverage of non-robust sets with
/// threshold `q_alpha` under any attack in the table's threat model.
pub fn vanilla_worst_case_coverage(table: &CalibrationTable, q_alpha: f64) -> Result<f64> {
    Ok(1.0 - inverse_quantile(q_alpha, &table.lowers())?)
}

/// Plain smoothed-score set `{y : mean_y >= threshold}`.
pub fn smooth_set(class_dists: &[ScoreDistribution], threshold: f64) -> PredictionSet {
    let means: Vec<f64> = class_dists.iter().map(ScoreDistribution::mean).collect();
    prediction_set(&means, threshold)
}

/// Conservative set at an observed (possibly perturbed) input: classes
/// whose certified upper bound reaches `q_alpha`.
pub fn test_time_set(
    class_dists: &[ScoreDistribution],
    q_alpha: f64,
    config: &EvasionConfig,
) -> Result<PredictionSet> {
    let certifier = Certifier::new(config.scheme, config.model, Perspective::Observed)?;
    Ok(prediction_set(&upper_bounds(&certifier, config, class_dists), q_alpha))
}

fn upper_bounds(certifier: &Certifier, config: &EvasionConfig, class_dists: &[ScoreDistribution]) -> Vec<f64> {
    class_dists
        .iter()
        .map(|d| {
            if config.model.is_trivial() {
                d.mean()
            } else {
                certifier.bound(d, config.bound_kind, Direction::Upper)
            }
        })
        .collect()
}

/// Threshold and sets with Monte-Carlo error accounted for at calibration
/// time.
///
/// Each calibration lower bound is corrected at `eta / (2 n)`, the quantile
/// is taken at `alpha - eta`, and each test class score is raised by a
/// Bernstein radius at `eta / (2 |Y|)`.
pub fn corrected_calibration_threshold(
    table: &CalibrationTable,
    alpha: f64,
    budget: ConfidenceBudget,
    ledger: &mut BudgetLedger,
) -> Result<f64> {
    if alpha <= budget.eta() {
        return Err(config(format!("alpha = {alpha} must exceed eta = {}", budget.eta())));
    }
    let lowers = table
        .corrected_lowers()
        .ok_or_else(|| config("calibration table was built without a correction budget"))?;
    let n = lowers.len();
    ledger.spend("calibration lower bounds", n, budget.eta() / (2.0 * n as f64))?;
    conformal_quantile(&lowers, QuantileSpec::new(alpha - budget.eta())?)
}

pub fn corrected_calibration_set(
    class_dists: &[ScoreDistribution],
    threshold: f64,
    budget: ConfidenceBudget,
    ledger: &mut BudgetLedger,
) -> Result<PredictionSet> {
    let k = class_dists.len();
    let eta_class = budget.eta() / (2.0 * k as f64);
    ledger.spend("test class means", k, eta_class)?;
    let raised = class_dists
        .iter()
        .map(|d| Ok((d.mean() + bernstein_radius(d.sample_count(), d.variance(), eta_class)?).min(1.0)))
        .collect::<Result<Vec<_>>>()?;
    Ok(prediction_set(&raised, threshold))
}

/// One-shot corrected pipeline for a single test input.
pub fn corrected_sets(
    cal_dists: &[ScoreDistribution],
    test_class_dists: &[ScoreDistribution],
    alpha: f64,
    budget: ConfidenceBudget,
    config: &EvasionConfig,
) -> Result<(PredictionSet, BudgetLedger)> {
    let cfg = config.with_correction(budget);
    let (table, _) = calibrate_smooth(cal_dists, alpha, &cfg)?;
    let mut ledger = budget.ledger();
    let q = corrected_calibration_threshold(&table, alpha, budget, &mut ledger)?;
    let set = corrected_calibration_set(test_class_dists, q, budget, &mut ledger)?;
    Ok((set, ledger))
}

/// A calibrated predictor covering every mode: test-time or
/// calibration-time certificates, with or without Monte-Carlo correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertifiedPredictor {
    pub config: EvasionConfig,
    pub alpha: f64,
    /// Quantile of the calibration smoothed means at `alpha`.
    #[serde(with = "threshold_serde")]
    pub clean_threshold: f64,
    /// The threshold test scores (or their bounds) are compared against.
    #[serde(with = "threshold_serde")]
    pub threshold: f64,
    pub calibration_size: usize,
}

impl CertifiedPredictor {
    pub fn calibrate(
        cal_dists: &[ScoreDistribution],
        alpha: f64,
        config: &EvasionConfig,
    ) -> Result<(Self, CalibrationTable)> {
        let spec = config.check_alpha(alpha)?;
        let (table, clean_threshold) = calibrate_smooth(cal_dists, alpha, config)?;
        let scores = match (config.mode, config.correction) {
            (EvasionMode::TestTime, _) => table.smooth_means(),
            (EvasionMode::CalibrationTime, None) => table.lowers(),
            (EvasionMode::CalibrationTime, Some(_)) => table.corrected_lowers().expect("built with correction"),
        };
        let threshold = conformal_quantile(&scores, spec)?;
        let predictor = Self {
            config: *config,
            alpha,
            clean_threshold,
            threshold,
            calibration_size: table.len(),
        };
        Ok((predictor, table))
    }

    /// Prediction set for an observed input given its per-class smoothed
    /// score distributions.
    pub fn predict(&self, class_dists: &[ScoreDistribution]) -> Result<PredictionSet> {
        let cfg = &self.config;
        match (cfg.mode, cfg.correction) {
            (EvasionMode::CalibrationTime, None) => Ok(smooth_set(class_dists, self.threshold)),
            (EvasionMode::CalibrationTime, Some(b)) => {
                corrected_calibration_set(class_dists, self.threshold, b, &mut b.ledger())
            }
            (EvasionMode::TestTime, None) => test_time_set(class_dists, self.threshold, cfg),
            (EvasionMode::TestTime, Some(b)) => {
                let certifier = Certifier::new(cfg.scheme, cfg.model, Perspective::Observed)?;
                let k = class_dists.len();
                let eta_class = b.eta() / (2.0 * k as f64);
                let flavor = CorrectionFlavor::for_kind(cfg.bound_kind);
                let raised = class_dists
                    .iter()
                    .map(|d| {
                        let c = corrected_distribution(d, eta_class, flavor)?;
                        let up = c.bound(&certifier, cfg.bound_kind, Direction::Upper);
                        Ok(up + hoeffding_radius(d.sample_count(), b.eta() / 2.0)?)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(prediction_set(&raised, self.threshold))
            }
        }
    }

    /// The full failure-budget split behind one prediction, or `None` when
    /// no correction is configured.
    pub fn budget_ledger(&self, num_classes: usize) -> Result<Option<BudgetLedger>> {
        let Some(b) = self.config.correction else {
            return Ok(None);
        };
        let mut ledger = b.ledger();
        let eta = b.eta();
        match self.config.mode {
            EvasionMode::CalibrationTime => {
                let n = self.calibration_size;
                ledger.spend("calibration lower bounds", n, eta / (2.0 * n as f64))?;
                ledger.spend("test class means", num_classes, eta / (2.0 * num_classes as f64))?;
            }
            EvasionMode::TestTime => {
                ledger.spend("clean test mean (Hoeffding)", 1, eta / 2.0)?;
                ledger.spend("test class bounds", num_classes, eta / (2.0 * num_classes as f64))?;
            }
        }
        Ok(Some(ledger))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::smoothing::BinGrid;
    use proptest::prelude::*;

    fn constant(c: f64) -> ScoreDistribution {
        ScoreDistribution::from_samples(&[c; 50], &BinGrid::default()).unwrap()
    }

    fn from_seq(seed: usize, m: usize) -> ScoreDistribution {
        let samples: Vec<f64> = (0..m)
            .map(|i| (((i * 7919 + seed * 104_729) % 1000) as f64 / 999.0).powi(1 + (seed % 3) as i32))
            .collect();
        ScoreDistribution::from_samples(&samples, &BinGrid::default()).unwrap()
    }

    fn gaussian(r: f64, kind: BoundKind) -> EvasionConfig {
        EvasionConfig::new(SmoothingScheme::Gaussian { sigma: 0.25 }, ThreatModel::L2Ball { r }, kind)
    }

    #[test]
    fn calibration_examples() {
        let cfg = gaussian(0.1, BoundKind::Cdf);
        let dists: Vec<_> = (0..20).map(|_| constant(0.4)).collect();
        let (_, q) = calibrate_smooth(&dists, 0.1, &cfg).unwrap();
        assert_eq!(q, 0.4);
        let dists = [constant(0.1), constant(0.2), constant(0.3)];
        let (table, q) = calibrate_smooth(&dists, 0.5, &cfg).unwrap();
        assert!((q - 0.2).abs() < 1e-15);
        assert_eq!(table.len(), 3);
        assert!(calibrate_smooth(&[], 0.5, &cfg).is_err());
    }

    #[test]
    fn zero_radius_collapses_every_mode() {
        let cal: Vec<_> = (0..30).map(|i| from_seq(i, 200)).collect();
        let test: Vec<_> = (30..34).map(|i| from_seq(i, 200)).collect();
        for kind in [BoundKind::Mean, BoundKind::Cdf] {
            let cfg = gaussian(0.0, kind);
            let (table, q) = calibrate_smooth(&cal, 0.1, &cfg).unwrap();
            assert_eq!(calibration_time_threshold(&table, 0.1).unwrap(), q);
            let vanilla = smooth_set(&test, q);
            assert_eq!(test_time_set(&test, q, &cfg).unwrap(), vanilla);
            let (p, _) =
                CertifiedPredictor::calibrate(&cal, 0.1, &cfg.with_mode(EvasionMode::CalibrationTime)).unwrap();
            assert_eq!(p.predict(&test).unwrap(), vanilla);
            let beta_cov = vanilla_worst_case_coverage(&table, q).unwrap();
            let grid = QuantileSpec::new(0.1).unwrap().rank(30) as f64 / 31.0;
            assert!((beta_cov - (1.0 - grid)).abs() < 1e-12);
        }
    }

    #[test]
    fn vacuous_worst_case_coverage() {
        let cfg = gaussian(5.0, BoundKind::Mean);
        let cal: Vec<_> = (0..10).map(|_| constant(0.0)).collect();
        let (table, _) = calibrate_smooth(&cal, 0.1, &cfg).unwrap();
        assert_eq!(vanilla_worst_case_coverage(&table, 0.3).unwrap(), 0.0);
    }

    #[test]
    fn corrected_pipeline_accounts_for_budget() {
        let cal: Vec<_> = (0..40).map(|i| from_seq(i, 500)).collect();
        let test: Vec<_> = (40..45).map(|i| from_seq(i, 500)).collect();
        let budget = ConfidenceBudget::new(0.01).unwrap();
        let cfg = gaussian(0.125, BoundKind::Cdf);
        let (set, ledger) = corrected_sets(&cal, &test, 0.1, budget, &cfg).unwrap();
        assert!(ledger.spent() <= 0.01 * (1.0 + 1e-12));
        assert!((ledger.spent() - 0.01).abs() < 1e-15);

        // alpha - eta quantile of corrected bounds sits below the alpha - eta/2
        // quantile of plain bounds.
        let ccfg = cfg.with_correction(budget);
        let (table, _) = calibrate_smooth(&cal, 0.1, &ccfg).unwrap();
        let q_plus = corrected_calibration_threshold(&table, 0.1, budget, &mut budget.ledger()).unwrap();
        let q_half = calibration_time_threshold(&table, 0.1 - 0.005).unwrap();
        assert!(q_plus <= q_half);

        let (pred, _) = CertifiedPredictor::calibrate(&cal, 0.1, &ccfg).unwrap();
        assert_eq!(pred.threshold, q_plus);
        assert_eq!(pred.predict(&test).unwrap(), set);
        let l = pred.budget_ledger(test.len()).unwrap().unwrap();
        assert!(l.spent() <= 0.01 * (1.0 + 1e-12));

        let err = corrected_sets(&cal, &test, 0.005, budget, &cfg).unwrap_err();
        assert!(matches!(err, crate::Error::Config(_)));
    }

    #[test]
    fn test_time_correction_ledger() {
        let cal: Vec<_> = (0..40).map(|i| from_seq(i, 500)).collect();
        let budget = ConfidenceBudget::new(0.02).unwrap();
        let cfg = gaussian(0.125, BoundKind::Mean).with_correction(budget).with_mode(EvasionMode::TestTime);
        let (pred, _) = CertifiedPredictor::calibrate(&cal, 0.1, &cfg).unwrap();
        let l = pred.budget_ledger(6).unwrap().unwrap();
        assert!((l.spent() - 0.02).abs() < 1e-15);
        let (plain, _) = CertifiedPredictor::calibrate(&cal, 0.1, &cfg.with_mode(EvasionMode::TestTime)).unwrap();
        assert!(pred.threshold <= plain.clean_threshold);
    }

    proptest! {
        #[test]
        fn sets_nest_and_thresholds_order(seed in 0usize..500, r in 0.0f64..0.5) {
            let cal: Vec<_> = (0..25).map(|i| from_seq(seed + i, 60)).collect();
            let test: Vec<_> = (0..5).map(|i| from_seq(seed + 100 + i, 60)).collect();
            for kind in [BoundKind::Mean, BoundKind::Cdf] {
                let cfg = gaussian(r, kind);
                let (table, q) = calibrate_smooth(&cal, 0.2, &cfg).unwrap();
                let vanilla = smooth_set(&test, q);
                prop_assert!(vanilla.is_subset(&test_time_set(&test, q, &cfg).unwrap()));
                let q_low = calibration_time_threshold(&table, 0.2).unwrap();
                prop_assert!(q_low <= q);
                prop_assert!(vanilla.is_subset(&smooth_set(&test, q_low)));
                for row in &table.rows {
                    prop_assert!(row.lower <= row.smooth_mean + 1e-12);
                }
            }
        }
    }
}
