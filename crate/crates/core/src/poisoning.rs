//! Conservative thresholds when up to `k` calibration points may have been
//! poisoned.
//!
//! The defender does not know which points were touched, so it takes the
//! smallest threshold any admissible modification could produce. With
//! per-point intervals `[l_i, u_i]` around each observed score `s_i`, the
//! minimum `K`-th order statistic is found by a rank search over the
//! candidate values `{s_i} u {l_i}`: a value `v` is reachable iff
//! `#{s_i <= v} + min(k, #{l_i <= v < s_i}) >= K`, and reachability is
//! monotone in `v`.

use serde::{Deserialize, Serialize};

use crate::bounds::{Certifier, Direction, Perspective};
use crate::conformal::{order_statistic, prediction_set, threshold_serde, PredictionSet, QuantileSpec};
use crate::correction::{hoeffding_radius, BudgetLedger, ConfidenceBudget};
use crate::error::{config, domain, Error, Result};
use crate::evasion::{test_time_set, EvasionConfig};
use crate::smoothing::ScoreDistribution;

/// Largest calibration set the exhaustive oracles accept.
pub const ORACLE_MAX_POINTS: usize = 10;
/// Largest label set the exhaustive label oracle accepts.
pub const ORACLE_MAX_CLASSES: usize = 4;

/// Observed true-label scores with per-point certified intervals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoisonInstance {
    pub scores: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Number of points the adversary may have modified.
    pub budget: usize,
    pub alpha: QuantileSpec,
}

impl PoisonInstance {
    pub fn new(scores: Vec<f64>, lower: Vec<f64>, upper: Vec<f64>, budget: usize, alpha: f64) -> Result<Self> {
        let inst = Self { scores, lower, upper, budget, alpha: QuantileSpec::new(alpha)? };
        inst.validate()?;
        Ok(inst)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.scores.len();
        if n == 0 {
            return Err(domain("calibration set is empty"));
        }
        if self.lower.len() != n || self.upper.len() != n {
            return Err(domain("score and bound vectors differ in length"));
        }
        if self.budget > n {
            return Err(domain(format!("budget {} exceeds calibration size {n}", self.budget)));
        }
        for i in 0..n {
            let (l, s, u) = (self.lower[i], self.scores[i], self.upper[i]);
            if !(l <= s && s <= u) {
                return Err(domain(format!("point {i}: bounds [{l}, {u}] do not contain score {s}")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Full score matrix of the calibration points with their observed labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelPoisonInstance {
    /// `matrix[i][c]` is the score of class `c` at point `i`.
    pub matrix: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub budget: usize,
    pub alpha: QuantileSpec,
}

impl LabelPoisonInstance {
    pub fn new(matrix: Vec<Vec<f64>>, labels: Vec<usize>, budget: usize, alpha: f64) -> Result<Self> {
        let inst = Self { matrix, labels, budget, alpha: QuantileSpec::new(alpha)? };
        inst.validate()?;
        Ok(inst)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.matrix.len();
        if n == 0 {
            return Err(domain("calibration set is empty"));
        }
        if self.labels.len() != n {
            return Err(domain("matrix rows and labels differ in length"));
        }
        let k = self.matrix[0].len();
        if k == 0 || self.matrix.iter().any(|row| row.len() != k) {
            return Err(domain("score matrix rows must share a nonzero width"));
        }
        if let Some(&y) = self.labels.iter().find(|&&y| y >= k) {
            return Err(Error::IndexOutOfRange { index: y, len: k });
        }
        if self.budget > n {
            return Err(domain(format!("budget {} exceeds calibration size {n}", self.budget)));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.matrix[0].len()
    }

    pub fn true_scores(&self) -> Vec<f64> {
        self.matrix.iter().zip(&self.labels).map(|(row, &y)| row[y]).collect()
    }
}

/// One modified calibration point in a witness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoisonChange {
    pub index: usize,
    pub from: f64,
    pub to: f64,
    /// New label, for label flips.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConservativeThreshold {
    #[serde(with = "threshold_serde")]
    pub q_lower: f64,
    pub witness: Vec<PoisonChange>,
}

impl ConservativeThreshold {
    /// Applies the witness to `scores` and recomputes the order statistic.
    pub fn replay(&self, scores: &[f64], alpha: QuantileSpec) -> f64 {
        let mut z = scores.to_vec();
        for c in &self.witness {
            z[c.index] = c.to;
        }
        order_statistic(&z, alpha.rank(z.len()))
    }
}

/// Smallest `rank`-th order statistic reachable by moving at most `budget`
/// points from `s_i` down to `l_i`. Returns the value and the moved points.
fn min_order_statistic(s: &[f64], l: &[f64], budget: usize, rank: usize) -> (f64, Vec<usize>) {
    if rank == 0 {
        return (f64::NEG_INFINITY, Vec::new());
    }
    let mut s_sorted = s.to_vec();
    s_sorted.sort_unstable_by(f64::total_cmp);
    let mut l_sorted = l.to_vec();
    l_sorted.sort_unstable_by(f64::total_cmp);
    let count_le = |sorted: &[f64], v: f64| sorted.partition_point(|&x| x <= v);
    // With l_i <= s_i, #{l_i <= v < s_i} = #{l_i <= v} - #{s_i <= v}.
    let reachable = |v: f64| {
        let at_or_below = count_le(&s_sorted, v);
        let movable = count_le(&l_sorted, v) - at_or_below;
        at_or_below + movable.min(budget) >= rank
    };

    let mut candidates: Vec<f64> = s.iter().chain(l).copied().collect();
    candidates.sort_unstable_by(f64::total_cmp);
    candidates.dedup();
    let first = candidates.partition_point(|&v| !reachable(v));
    let v = candidates[first];

    let need = rank.saturating_sub(count_le(&s_sorted, v));
    let mut movable: Vec<usize> = (0..s.len()).filter(|&i| l[i] <= v && v < s[i]).collect();
    movable.sort_by(|&a, &b| l[a].total_cmp(&l[b]).then(a.cmp(&b)));
    movable.truncate(need);
    movable.sort_unstable();
    (v, movable)
}

fn minimize(s: &[f64], l: &[f64], budget: usize, alpha: QuantileSpec) -> (f64, Vec<usize>) {
    min_order_statistic(s, l, budget, alpha.rank(s.len()))
}

/// Largest order statistic reachable by raising at most `budget` points to
/// `u_i`, via the same search on negated values.
fn maximize(s: &[f64], u: &[f64], budget: usize, alpha: QuantileSpec) -> (f64, Vec<usize>) {
    let n = s.len();
    let rank = alpha.rank(n);
    if rank == 0 {
        return (f64::NEG_INFINITY, Vec::new());
    }
    let neg_s: Vec<f64> = s.iter().map(|v| -v).collect();
    let neg_u: Vec<f64> = u.iter().map(|v| -v).collect();
    let (v, moved) = min_order_statistic(&neg_s, &neg_u, budget, n - rank + 1);
    (-v, moved)
}

fn witness(moved: &[usize], from: &[f64], to: &[f64], labels: Option<&[usize]>) -> Vec<PoisonChange> {
    moved
        .iter()
        .map(|&i| PoisonChange { index: i, from: from[i], to: to[i], label: labels.map(|l| l[i]) })
        .collect()
}

/// Most conservative threshold under feature poisoning of at most `budget`
/// calibration points.
pub fn feature_poison_threshold(inst: &PoisonInstance) -> Result<ConservativeThreshold> {
    inst.validate()?;
    let (q_lower, moved) = minimize(&inst.scores, &inst.lower, inst.budget, inst.alpha);
    Ok(ConservativeThreshold { q_lower, witness: witness(&moved, &inst.scores, &inst.lower, None) })
}

/// The attacker's side: the largest threshold reachable by modifying at
/// most `budget` points.
pub fn feature_poison_attack(inst: &PoisonInstance) -> Result<ConservativeThreshold> {
    inst.validate()?;
    let (q, moved) = maximize(&inst.scores, &inst.upper, inst.budget, inst.alpha);
    Ok(ConservativeThreshold { q_lower: q, witness: witness(&moved, &inst.scores, &inst.upper, None) })
}

fn row_extreme(inst: &LabelPoisonInstance, pick_max: bool) -> (Vec<f64>, Vec<usize>) {
    inst.matrix
        .iter()
        .map(|row| {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                let better = if pick_max { v > row[best] } else { v < row[best] };
                if better {
                    best = c;
                }
            }
            (row[best], best)
        })
        .unzip()
}

/// Most conservative threshold when at most `budget` labels were flipped.
pub fn label_poison_threshold(inst: &LabelPoisonInstance) -> Result<ConservativeThreshold> {
    inst.validate()?;
    let s = inst.true_scores();
    let (low, class) = row_extreme(inst, false);
    let (q_lower, moved) = minimize(&s, &low, inst.budget, inst.alpha);
    Ok(ConservativeThreshold { q_lower, witness: witness(&moved, &s, &low, Some(&class)) })
}

/// Label flips that push the threshold up as far as possible.
pub fn label_poison_attack(inst: &LabelPoisonInstance) -> Result<ConservativeThreshold> {
    inst.validate()?;
    let s = inst.true_scores();
    let (high, class) = row_extreme(inst, true);
    let (q, moved) = maximize(&s, &high, inst.budget, inst.alpha);
    Ok(ConservativeThreshold { q_lower: q, witness: witness(&moved, &s, &high, Some(&class)) })
}

/// Exhaustive search over every assignment `z_i in {s_i, l_i, u_i}` with at
/// most `budget` changed points.
pub fn brute_force_feature_oracle(inst: &PoisonInstance) -> Result<f64> {
    inst.validate()?;
    let n = inst.len();
    if n > ORACLE_MAX_POINTS {
        return Err(Error::TooLarge(format!("{n} points, limit {ORACLE_MAX_POINTS}")));
    }
    let rank = inst.alpha.rank(n);
    let mut z = inst.scores.clone();
    let mut best = f64::INFINITY;
    fn rec(inst: &PoisonInstance, i: usize, left: usize, rank: usize, z: &mut Vec<f64>, best: &mut f64) {
        if i == z.len() {
            *best = best.min(order_statistic(z, rank));
            return;
        }
        rec(inst, i + 1, left, rank, z, best);
        if left > 0 {
            for alt in [inst.lower[i], inst.upper[i]] {
                z[i] = alt;
                rec(inst, i + 1, left - 1, rank, z, best);
            }
            z[i] = inst.scores[i];
        }
    }
    rec(inst, 0, inst.budget, rank, &mut z, &mut best);
    Ok(best)
}

/// Exhaustive search over every pattern of at most `budget` label flips.
pub fn brute_force_label_oracle(inst: &LabelPoisonInstance) -> Result<f64> {
    inst.validate()?;
    let n = inst.matrix.len();
    let k = inst.num_classes();
    if n > ORACLE_MAX_POINTS || k > ORACLE_MAX_CLASSES {
        return Err(Error::TooLarge(format!(
            "{n} points and {k} classes, limits {ORACLE_MAX_POINTS} and {ORACLE_MAX_CLASSES}"
        )));
    }
    let rank = inst.alpha.rank(n);
    let mut z = inst.true_scores();
    let mut best = f64::INFINITY;
    fn rec(inst: &LabelPoisonInstance, i: usize, left: usize, rank: usize, z: &mut Vec<f64>, best: &mut f64) {
        if i == z.len() {
            *best = best.min(order_statistic(z, rank));
            return;
        }
        rec(inst, i + 1, left, rank, z, best);
        if left > 0 {
            for (c, &v) in inst.matrix[i].iter().enumerate() {
                if c != inst.labels[i] {
                    z[i] = v;
                    rec(inst, i + 1, left - 1, rank, z, best);
                }
            }
            z[i] = inst.matrix[i][inst.labels[i]];
        }
    }
    rec(inst, 0, inst.budget, rank, &mut z, &mut best);
    Ok(best)
}

/// Inputs of the Monte-Carlo corrected feature-poisoning certificate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectedPoisonInput {
    /// Monte-Carlo smoothed true-label scores of the observed calibration points.
    pub mc_scores: Vec<f64>,
    /// Lower bounds already corrected with a CDF band at `eta / (2 n)` each.
    pub corrected_lower: Vec<f64>,
    pub budget: usize,
    /// Target miscoverage; the solver runs at `alpha_prime - eta`.
    pub alpha_prime: f64,
    pub eta: f64,
    /// Sample count in the Hoeffding term `sqrt(ln(2 / eta) / (2 m))`.
    /// Defaults to the calibration size.
    pub hoeffding_count: Option<usize>,
}

/// Corrected threshold together with the budget split behind it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectedThreshold {
    pub threshold: ConservativeThreshold,
    pub hoeffding_eps: f64,
    pub ledger: BudgetLedger,
}

pub fn corrected_feature_poison_threshold(input: &CorrectedPoisonInput) -> Result<CorrectedThreshold> {
    let budget = ConfidenceBudget::new(input.eta)?;
    if input.alpha_prime <= input.eta {
        return Err(config(format!(
            "alpha' = {} must exceed eta = {}",
            input.alpha_prime, input.eta
        )));
    }
    let n = input.mc_scores.len();
    if n == 0 || input.corrected_lower.len() != n {
        return Err(domain("scores and corrected bounds must be nonempty and equally long"));
    }
    let mut ledger = budget.ledger();
    let each = input.eta / (2.0 * n as f64);
    ledger.spend("calibration CDF bands", n, each)?;
    ledger.spend("calibration Monte-Carlo means", n, each)?;
    let eps = hoeffding_radius(input.hoeffding_count.unwrap_or(n), input.eta)?;
    // Never above the observed score: a bound above it is no restriction.
    let lower: Vec<f64> = input
        .corrected_lower
        .iter()
        .zip(&input.mc_scores)
        .map(|(&l, &s)| (l - eps).min(s))
        .collect();
    let inst = PoisonInstance {
        scores: input.mc_scores.clone(),
        upper: input.mc_scores.clone(),
        lower,
        budget: input.budget.min(n),
        alpha: QuantileSpec::new(input.alpha_prime - input.eta)?,
    };
    Ok(CorrectedThreshold { threshold: feature_poison_threshold(&inst)?, hoeffding_eps: eps, ledger })
}

/// Sets robust to both poisoning and evasion: certified upper bounds at the
/// observed input compared against a poisoning-conservative threshold.
pub fn combined_robust_sets(
    class_dists: &[ScoreDistribution],
    q_lower: f64,
    config: &EvasionConfig,
) -> Result<PredictionSet> {
    test_time_set(class_dists, q_lower, config)
}

/// Plain sets against a poisoning-conservative threshold.
pub fn poisoning_robust_set(class_scores: &[f64], q_lower: f64) -> PredictionSet {
    prediction_set(class_scores, q_lower)
}

/// Conservative threshold when `k_feature` points may have perturbed
/// features and `k_label` points flipped labels.
///
/// `class_lower[i][c]` lower-bounds the score of class `c` at point `i` over
/// the feature ball. Each point is relaxed to its smallest bound over all
/// classes and the budgets are pooled, which is sound but can be loose when
/// one budget is much smaller than the other.
pub fn joint_poison_threshold(
    scores: &[f64],
    class_lower: &[Vec<f64>],
    k_feature: usize,
    k_label: usize,
    alpha: f64,
) -> Result<ConservativeThreshold> {
    let n = scores.len();
    if class_lower.len() != n {
        return Err(domain("scores and bound rows differ in length"));
    }
    let lower: Vec<f64> = class_lower
        .iter()
        .zip(scores)
        .map(|(row, &s)| row.iter().copied().fold(s, f64::min))
        .collect();
    let inst = PoisonInstance::new(scores.to_vec(), lower, scores.to_vec(), (k_feature + k_label).min(n), alpha)?;
    feature_poison_threshold(&inst)
}

/// Lower bound of every calibration point's true-label score for feature
/// poisoning, from distributions estimated at the observed points.
pub fn observed_lower_bounds(
    dists: &[ScoreDistribution],
    config: &EvasionConfig,
) -> Result<Vec<f64>> {
    let certifier = Certifier::new(config.scheme, config.model, Perspective::Observed)?;
    Ok(dists
        .iter()
        .map(|d| {
            if config.model.is_trivial() {
                d.mean()
            } else {
                certifier.bound(d, config.bound_kind, Direction::Lower).min(d.mean())
            }
        })
        .collect())
}
