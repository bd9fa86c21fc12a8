//! Calibration poisoning attacks: pick the points whose modification pushes
//! the conformal threshold up the most, then modify them.

use serde::{Deserialize, Serialize};

use rcp_core::bounds::ThreatModel;
use rcp_core::poisoning::{feature_poison_attack, label_poison_attack, LabelPoisonInstance, PoisonInstance};
use rcp_core::{Domain, RngStreams};

use crate::attack::{evasion_attack, AttackGoal, AttackObjective, AttackSettings};
use crate::task::{Dataset, SyntheticTask};
use crate::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoisonedCalibration {
    pub data: Dataset,
    /// Indices of modified points, ascending.
    pub changed: Vec<usize>,
    /// The attacker's estimate of the threshold after poisoning.
    pub target_threshold: f64,
}

fn clamp_budget(budget: usize, n: usize) -> usize {
    if budget > n {
        log::warn!("poisoning budget {budget} exceeds calibration size {n}; clamped");
    }
    budget.min(n)
}

/// Per-point attack results the feature poisoner chooses from.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureCandidates {
    /// Each calibration input pushed towards a higher true-label score.
    pub attacked: Vec<Vec<f64>>,
    /// The attacker's estimate of the true-label score after its attack.
    pub upper: Vec<f64>,
}

/// Attacks every calibration point towards a higher true-label score.
/// `scores` are the attacker's estimates of the clean true-label scores.
#[allow(clippy::too_many_arguments)]
pub fn feature_candidates(
    task: &SyntheticTask,
    cal: &Dataset,
    scores: &[f64],
    model: &ThreatModel,
    objective: AttackObjective,
    settings: &AttackSettings,
    streams: RngStreams,
) -> Result<FeatureCandidates> {
    let mut attacked = Vec::with_capacity(cal.len());
    let mut upper = Vec::with_capacity(cal.len());
    for (i, (x, &y)) in cal.x.iter().zip(&cal.y).enumerate() {
        let mut rng = streams.stream(Domain::Poison, i as u64, 0);
        let out = evasion_attack(x, y, task, model, objective, AttackGoal::Raise, settings, &mut rng)?;
        // the attacker compares like with like: its own estimate at both ends
        upper.push(scores[i].max(scores[i] + out.score - out.clean_score));
        attacked.push(out.x);
    }
    Ok(FeatureCandidates { attacked, upper })
}

/// Replaces at most `budget` points by their attacked versions, chosen by
/// the maximizing rank search.
pub fn apply_feature_poisoning(
    cal: &Dataset,
    scores: &[f64],
    candidates: &FeatureCandidates,
    budget: usize,
    alpha: f64,
) -> Result<PoisonedCalibration> {
    let budget = clamp_budget(budget, cal.len());
    let inst = PoisonInstance::new(scores.to_vec(), scores.to_vec(), candidates.upper.clone(), budget, alpha)?;
    let result = feature_poison_attack(&inst)?;
    let mut data = cal.clone();
    let changed: Vec<usize> = result.witness.iter().map(|c| c.index).collect();
    for &i in &changed {
        data.x[i] = candidates.attacked[i].clone();
    }
    Ok(PoisonedCalibration { data, changed, target_threshold: result.q_lower })
}

/// Feature poisoning of at most `budget` calibration points: attack every
/// point, then keep the attacks the maximizing rank search selects.
#[allow(clippy::too_many_arguments)]
pub fn poison_features(
    task: &SyntheticTask,
    cal: &Dataset,
    scores: &[f64],
    budget: usize,
    alpha: f64,
    model: &ThreatModel,
    objective: AttackObjective,
    settings: &AttackSettings,
    streams: RngStreams,
) -> Result<PoisonedCalibration> {
    if clamp_budget(budget, cal.len()) == 0 {
        let candidates = FeatureCandidates { attacked: cal.x.clone(), upper: scores.to_vec() };
        return apply_feature_poisoning(cal, scores, &candidates, 0, alpha);
    }
    let candidates = feature_candidates(task, cal, scores, model, objective, settings, streams)?;
    apply_feature_poisoning(cal, scores, &candidates, budget, alpha)
}

/// Label poisoning: flip at most `budget` labels, each to the class with the
/// highest score, choosing the points with the maximizing rank search.
///
/// `matrix[i][c]` is the score of class `c` at calibration point `i`.
pub fn poison_labels(cal: &Dataset, matrix: &[Vec<f64>], budget: usize, alpha: f64) -> Result<PoisonedCalibration> {
    let budget = clamp_budget(budget, cal.len());
    let inst = LabelPoisonInstance::new(matrix.to_vec(), cal.y.clone(), budget, alpha)?;
    let result = label_poison_attack(&inst)?;
    let mut data = cal.clone();
    let mut changed = Vec::new();
    for c in &result.witness {
        let label = c.label.expect("label flips record the new class");
        if label != data.y[c.index] {
            data.y[c.index] = label;
            changed.push(c.index);
        }
    }
    Ok(PoisonedCalibration { data, changed, target_threshold: result.q_lower })
}
