//! Split conformal prediction over conformity scores.
//!
//! Scores follow the conformity orientation: larger means the label agrees
//! more with the input. A label enters the prediction set when its score is
//! at least the calibrated threshold, which is the `k`-th smallest true-label
//! calibration score with `k = floor(alpha * (n + 1))`. When `k = 0` the
//! threshold is `f64::NEG_INFINITY` and every label is accepted.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};

/// Slack added before flooring `alpha * (n + 1)` so that products such as
/// `0.29 * 100 = 28.999999999999996` land on the intended integer.
const RANK_EPS: f64 = 1e-9;

/// Class-probability vector of a classifier output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(domain("probability vector is empty"));
        }
        if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(domain(format!("probability {p} outside [0, 1]")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(domain(format!("probabilities sum to {total}, expected 1")));
        }
        Ok(Self(probs))
    }

    /// Numerically stable softmax of a logit vector.
    pub fn softmax(logits: &[f64]) -> Result<Self> {
        if logits.is_empty() {
            return Err(domain("logit vector is empty"));
        }
        let mut probs = logits.to_vec();
        softmax_in_place(&mut probs);
        Self::new(probs)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn num_classes(&self) -> usize {
        self.0.len()
    }
}

impl TryFrom<Vec<f64>> for ProbVector {
    type Error = Error;

    fn try_from(value: Vec<f64>) -> Result<Self> {
        Self::new(value)
    }
}

impl From<ProbVector> for Vec<f64> {
    fn from(value: ProbVector) -> Self {
        value.0
    }
}

/// Replaces `values` with their softmax. Used on hot Monte-Carlo paths where
/// allocating a [`ProbVector`] per sample is too costly.
pub fn softmax_in_place(values: &mut [f64]) {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in values.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in values.iter_mut() {
        *v /= total;
    }
}

/// Which conformity score to compute from class probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreFunction {
    /// Threshold prediction sets: the class probability itself.
    Tps,
    /// Adaptive prediction sets, shifted from `[-1, 0]` to `[0, 1]`.
    Aps,
}

impl ScoreFunction {
    /// Scores of every class for one probability vector. `u` is the APS
    /// tie-break draw and is ignored by TPS.
    pub fn score_all(self, probs: &[f64], u: f64, out: &mut [f64]) {
        match self {
            ScoreFunction::Tps => out.copy_from_slice(probs),
            ScoreFunction::Aps => aps_scores_unchecked(probs, u, out),
        }
    }
}

/// TPS score `p[y]`.
pub fn tps_score(p: &ProbVector, y: usize) -> Result<f64> {
    p.0.get(y).copied().ok_or(Error::IndexOutOfRange {
        index: y,
        len: p.num_classes(),
    })
}

/// APS score `1 - rho(p, y) - u * p[y]`, where `rho` sums the probabilities
/// strictly larger than `p[y]`.
pub fn aps_score(p: &ProbVector, y: usize, u: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&u) {
        return Err(domain(format!("tie-break u = {u} outside [0, 1]")));
    }
    let py = tps_score(p, y)?;
    let rho: f64 = p.0.iter().filter(|&&c| c > py).sum();
    Ok((1.0 - rho - u * py).clamp(0.0, 1.0))
}

fn aps_scores_unchecked(probs: &[f64], u: f64, out: &mut [f64]) {
    for (y, slot) in out.iter_mut().enumerate() {
        let py = probs[y];
        let rho: f64 = probs.iter().filter(|&&c| c > py).sum();
        *slot = (1.0 - rho - u * py).clamp(0.0, 1.0);
    }
}

/// Miscoverage level `alpha` with the fixed rank rule `k = floor(alpha * (n + 1))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct QuantileSpec {
    alpha: f64,
}

impl QuantileSpec {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(domain(format!("alpha = {alpha} outside (0, 1)")));
        }
        Ok(Self { alpha })
    }

    pub fn alpha(self) -> f64 {
        self.alpha
    }

    /// One-based order-statistic rank for `n` calibration scores; zero means
    /// the threshold is minus infinity.
    pub fn rank(self, n: usize) -> usize {
        quantile_rank(n, self.alpha)
    }
}

impl TryFrom<f64> for QuantileSpec {
    type Error = Error;

    fn try_from(value: f64) -> Result<Self> {
        Self::new(value)
    }
}

impl From<QuantileSpec> for f64 {
    fn from(value: QuantileSpec) -> Self {
        value.alpha
    }
}

pub(crate) fn quantile_rank(n: usize, alpha: f64) -> usize {
    let k = (alpha * (n as f64 + 1.0) + RANK_EPS).floor();
    (k.max(0.0) as usize).min(n)
}

fn check_scores(scores: &[f64]) -> Result<()> {
    if scores.is_empty() {
        return Err(domain("score list is empty"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(domain("score list contains NaN"));
    }
    Ok(())
}

/// `k`-th smallest of `scores` (one-based), or minus infinity for `k = 0`.
pub(crate) fn order_statistic(scores: &[f64], k: usize) -> f64 {
    if k == 0 {
        return f64::NEG_INFINITY;
    }
    let mut buf = scores.to_vec();
    let (_, kth, _) = buf.select_nth_unstable_by(k - 1, f64::total_cmp);
    *kth
}

/// Conformal threshold: the `floor(alpha (n + 1))`-th smallest score.
pub fn conformal_quantile(scores: &[f64], spec: QuantileSpec) -> Result<f64> {
    check_scores(scores)?;
    Ok(order_statistic(scores, spec.rank(scores.len())))
}

/// Smallest level `tau` on the grid `{k / (n + 1)}` whose conformal quantile
/// is at least `t`; `1` when no level below one qualifies.
pub fn inverse_quantile(t: f64, scores: &[f64]) -> Result<f64> {
    check_scores(scores)?;
    let n = scores.len();
    if t == f64::NEG_INFINITY {
        return Ok(0.0);
    }
    let mut sorted = scores.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    // sorted[k - 1] >= t first holds at k = (#scores < t) + 1.
    let below = sorted.partition_point(|&s| s < t);
    if below >= n {
        return Ok(1.0);
    }
    Ok((below + 1) as f64 / (n as f64 + 1.0))
}

/// Serde adapter writing minus infinity as the string `"-inf"`.
pub mod threshold_serde {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Value(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(value: &f64, s: S) -> Result<S::Ok, S::Error> {
        if *value == f64::NEG_INFINITY {
            Repr::Text("-inf".into()).serialize(s)
        } else {
            Repr::Value(*value).serialize(s)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Value(v) => Ok(v),
            Repr::Text(t) if t == "-inf" => Ok(f64::NEG_INFINITY),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("bad threshold {t:?}"))),
        }
    }
}

/// Labels whose score clears a threshold, together with that threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub members: Vec<usize>,
    #[serde(with = "threshold_serde")]
    pub threshold: f64,
}

impl PredictionSet {
    pub fn contains(&self, label: usize) -> bool {
        self.members.binary_search(&label).is_ok()
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn is_subset(&self, other: &PredictionSet) -> bool {
        self.members.iter().all(|&m| other.contains(m))
    }
}

/// `{y : class_scores[y] >= threshold}`. Members are sorted ascending.
pub fn prediction_set(class_scores: &[f64], threshold: f64) -> PredictionSet {
    PredictionSet {
        members: class_scores
            .iter()
            .enumerate()
            .filter(|(_, &s)| s >= threshold)
            .map(|(y, _)| y)
            .collect(),
        threshold,
    }
}

/// Coverage and efficiency of a batch of prediction sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub count: usize,
    pub empirical_coverage: f64,
    pub avg_set_size: f64,
    pub singleton_hit_ratio: f64,
    /// `set_size_histogram[s]` counts sets of size `s`.
    pub set_size_histogram: Vec<usize>,
}

pub fn evaluate(sets: &[PredictionSet], labels: &[usize]) -> Result<MetricsReport> {
    if sets.len() != labels.len() {
        return Err(domain(format!(
            "{} prediction sets but {} labels",
            sets.len(),
            labels.len()
        )));
    }
    let count = sets.len();
    let max_size = sets.iter().map(PredictionSet::len).max().unwrap_or(0);
    let mut histogram = vec![0usize; if count == 0 { 0 } else { max_size + 1 }];
    let (mut covered, mut singleton_hits, mut total_size) = (0usize, 0usize, 0usize);
    for (set, &label) in sets.iter().zip(labels) {
        let hit = set.contains(label);
        covered += usize::from(hit);
        singleton_hits += usize::from(hit && set.len() == 1);
        total_size += set.len();
        histogram[set.len()] += 1;
    }
    let frac = |x: usize| if count == 0 { 0.0 } else { x as f64 / count as f64 };
    Ok(MetricsReport {
        count,
        empirical_coverage: frac(covered),
        avg_set_size: frac(total_size),
        singleton_hit_ratio: frac(singleton_hits),
        set_size_histogram: histogram,
    })
}

/// Distribution of the marginal coverage of split CP conditional on the
/// calibration draw.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum CoverageDistribution {
    Beta { a: usize, b: usize },
    /// `floor((n + 1) alpha) = 0`: the threshold is minus infinity and
    /// coverage is identically one.
    Degenerate,
}

impl CoverageDistribution {
    pub fn mean(self) -> f64 {
        match self {
            CoverageDistribution::Beta { a, b } => a as f64 / (a + b) as f64,
            CoverageDistribution::Degenerate => 1.0,
        }
    }

    pub fn variance(self) -> f64 {
        match self {
            CoverageDistribution::Beta { a, b } => {
                let (a, b) = (a as f64, b as f64);
                a * b / ((a + b).powi(2) * (a + b + 1.0))
            }
            CoverageDistribution::Degenerate => 0.0,
        }
    }
}

/// `Beta(n + 1 - l, l)` with `l = floor((n + 1) alpha)`.
pub fn coverage_distribution(n: usize, spec: QuantileSpec) -> Result<CoverageDistribution> {
    if n == 0 {
        return Err(domain("calibration size must be at least 1"));
    }
    let l = spec.rank(n);
    Ok(if l == 0 {
        CoverageDistribution::Degenerate
    } else {
        CoverageDistribution::Beta { a: n + 1 - l, b: l }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(alpha: f64) -> QuantileSpec {
        QuantileSpec::new(alpha).unwrap()
    }

    fn pv(p: &[f64]) -> ProbVector {
        ProbVector::new(p.to_vec()).unwrap()
    }

    #[test]
    fn tps_examples() {
        let p = pv(&[0.7, 0.2, 0.1]);
        assert_eq!(tps_score(&p, 0).unwrap(), 0.7);
        assert_eq!(tps_score(&p, 2).unwrap(), 0.1);
        let uniform = pv(&[0.25; 4]);
        for y in 0..4 {
            assert_eq!(tps_score(&uniform, y).unwrap(), 0.25);
        }
        assert_eq!(
            tps_score(&p, 3),
            Err(Error::IndexOutOfRange { index: 3, len: 3 })
        );
    }

    #[test]
    fn aps_examples() {
        let p = pv(&[0.7, 0.2, 0.1]);
        assert_eq!(aps_score(&p, 0, 0.0).unwrap(), 1.0);
        assert!((aps_score(&p, 1, 1.0).unwrap() - 0.1).abs() < 1e-12);
        // tie: rho uses a strict inequality
        let tie = pv(&[0.5, 0.5]);
        assert_eq!(aps_score(&tie, 0, 0.5).unwrap(), 0.75);
        assert!(matches!(aps_score(&p, 0, 1.5), Err(Error::Domain(_))));
    }

    #[test]
    fn aps_batch_matches_single() {
        let p = pv(&[0.1, 0.45, 0.05, 0.4]);
        let mut out = [0.0; 4];
        ScoreFunction::Aps.score_all(p.as_slice(), 0.3, &mut out);
        for (y, &s) in out.iter().enumerate() {
            assert_eq!(s, aps_score(&p, y, 0.3).unwrap());
        }
    }

    #[test]
    fn prob_vector_validation() {
        assert!(ProbVector::new(vec![0.5, 0.4]).is_err());
        assert!(ProbVector::new(vec![1.2, -0.2]).is_err());
        assert!(ProbVector::new(vec![]).is_err());
        let s = ProbVector::softmax(&[1000.0, 0.0]).unwrap();
        assert!((s.as_slice()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn quantile_examples() {
        assert_eq!(conformal_quantile(&[0.3, 0.1, 0.2], spec(0.5)).unwrap(), 0.2);
        let nine = [0.9, 0.4, 0.7, 0.35, 0.8, 0.6, 0.5, 0.45, 0.65];
        assert_eq!(conformal_quantile(&nine, spec(0.1)).unwrap(), 0.35);
        assert_eq!(
            conformal_quantile(&[0.5; 5], spec(0.1)).unwrap(),
            f64::NEG_INFINITY
        );
        assert!(conformal_quantile(&[], spec(0.1)).is_err());
    }

    #[test]
    fn rank_rule_is_robust_to_float_products() {
        assert_eq!(quantile_rank(99, 0.29), 29);
        assert_eq!(quantile_rank(99, 0.1), 10);
        assert_eq!(quantile_rank(9, 0.3), 3);
        assert_eq!(quantile_rank(100, 0.1), 10);
    }

    #[test]
    fn inverse_quantile_examples() {
        let s = [0.1, 0.2, 0.3];
        assert_eq!(inverse_quantile(0.05, &s).unwrap(), 0.25);
        assert_eq!(inverse_quantile(0.1, &s).unwrap(), 0.25);
        assert_eq!(inverse_quantile(0.25, &s).unwrap(), 0.75);
        assert_eq!(inverse_quantile(0.31, &s).unwrap(), 1.0);
        assert_eq!(inverse_quantile(f64::NEG_INFINITY, &s).unwrap(), 0.0);
    }

    #[test]
    fn prediction_set_examples() {
        assert_eq!(prediction_set(&[0.9, 0.05, 0.05], 0.5).members, vec![0]);
        assert_eq!(
            prediction_set(&[0.9, 0.05, 0.05], f64::NEG_INFINITY).members,
            vec![0, 1, 2]
        );
        assert_eq!(prediction_set(&[0.3, 0.3, 0.1], 0.3).members, vec![0, 1]);
    }

    #[test]
    fn evaluate_examples() {
        let full: Vec<_> = (0..3).map(|_| prediction_set(&[1.0; 3], 0.0)).collect();
        let r = evaluate(&full, &[0, 1, 2]).unwrap();
        assert_eq!((r.empirical_coverage, r.singleton_hit_ratio), (1.0, 0.0));

        let singles: Vec<_> = (0..3)
            .map(|y| PredictionSet { members: vec![y], threshold: 0.5 })
            .collect();
        let r = evaluate(&singles, &[0, 1, 2]).unwrap();
        assert_eq!(
            (r.empirical_coverage, r.singleton_hit_ratio, r.avg_set_size),
            (1.0, 1.0, 1.0)
        );

        let mixed = [
            PredictionSet { members: vec![0], threshold: 0.5 },
            PredictionSet { members: vec![], threshold: 0.5 },
        ];
        let r = evaluate(&mixed, &[0, 1]).unwrap();
        assert_eq!(r.empirical_coverage, 0.5);
        assert_eq!(r.avg_set_size, 0.5);
        assert_eq!(r.singleton_hit_ratio, 0.5);
        assert_eq!(r.set_size_histogram, vec![1, 1]);

        assert!(evaluate(&mixed, &[0]).is_err());
        let empty = evaluate(&[], &[]).unwrap();
        assert_eq!(empty.count, 0);
    }

    #[test]
    fn coverage_distribution_examples() {
        let d = coverage_distribution(100, spec(0.1)).unwrap();
        assert_eq!(d, CoverageDistribution::Beta { a: 91, b: 10 });
        assert!((d.mean() - 0.900_990_099_009_901).abs() < 1e-12);
        assert_eq!(
            coverage_distribution(9, spec(0.05)).unwrap(),
            CoverageDistribution::Degenerate
        );
        let sym = coverage_distribution(19, spec(0.5)).unwrap();
        assert_eq!(sym, CoverageDistribution::Beta { a: 10, b: 10 });
        assert_eq!(sym.mean(), 0.5);
    }

    #[test]
    fn threshold_serde_round_trips_neg_infinity() {
        let set = prediction_set(&[0.2, 0.1], f64::NEG_INFINITY);
        let json = serde_json::to_string(&set).unwrap();
        assert!(json.contains("\"-inf\""));
        let back: PredictionSet = serde_json::from_str(&json).unwrap();
        assert_eq!(back, set);
    }

    proptest! {
        #[test]
        fn quantile_monotone_in_alpha(
            scores in prop::collection::vec(0.0f64..1.0, 1..60),
            a in 0.01f64..0.99,
            b in 0.01f64..0.99,
        ) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let q_lo = conformal_quantile(&scores, spec(lo)).unwrap();
            let q_hi = conformal_quantile(&scores, spec(hi)).unwrap();
            prop_assert!(q_lo <= q_hi);
        }

        #[test]
        fn sets_nest_as_threshold_rises(
            scores in prop::collection::vec(0.0f64..1.0, 1..12),
            t1 in 0.0f64..1.0,
            t2 in 0.0f64..1.0,
        ) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            prop_assert!(prediction_set(&scores, hi).is_subset(&prediction_set(&scores, lo)));
        }

        #[test]
        fn scores_stay_in_unit_interval(
            logits in prop::collection::vec(-8.0f64..8.0, 2..8),
            u in 0.0f64..=1.0,
        ) {
            let p = ProbVector::softmax(&logits).unwrap();
            let top = (0..p.num_classes())
                .max_by(|&i, &j| p.as_slice()[i].total_cmp(&p.as_slice()[j]))
                .unwrap();
            for y in 0..p.num_classes() {
                let a = aps_score(&p, y, u).unwrap();
                let t = tps_score(&p, y).unwrap();
                prop_assert!((0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&t));
            }
            prop_assert_eq!(aps_score(&p, top, 0.0).unwrap(), 1.0);
        }

        #[test]
        fn inverse_quantile_round_trip(
            scores in prop::collection::vec(0.0f64..1.0, 1..60),
            alpha in 0.01f64..0.99,
        ) {
            let n = scores.len();
            let q = conformal_quantile(&scores, spec(alpha)).unwrap();
            let tau = inverse_quantile(q, &scores).unwrap();
            let grid_alpha = quantile_rank(n, alpha) as f64 / (n as f64 + 1.0);
            prop_assert!(tau <= grid_alpha + 1e-12);
        }
    }
}
