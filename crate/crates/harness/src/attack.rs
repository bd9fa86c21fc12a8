//! Best-effort evasion attacks on synthetic tasks.
//!
//! Certificates hold against every attack, so these only need to be strong
//! enough to show that unprotected sets lose coverage.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use rcp_core::bounds::ThreatModel;
use rcp_core::smoothing::{ClassScorer, SmoothingScheme};
use rcp_core::StreamRng;

use crate::task::SyntheticTask;
use crate::{HarnessError, Result};

/// Which score the attacker optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttackObjective {
    /// The unsmoothed classifier score.
    Base,
    /// A fixed-noise Monte-Carlo estimate of the smoothed score.
    Smoothed { scheme: SmoothingScheme, samples: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackGoal {
    /// Push the target class score down (evasion of the true label).
    Lower,
    /// Push it up (poisoning the calibration quantile upward).
    Raise,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackSettings {
    pub random_directions: usize,
    pub coordinate_rounds: usize,
    pub smooth_samples: usize,
}

impl Default for AttackSettings {
    fn default() -> Self {
        Self { random_directions: 16, coordinate_rounds: 4, smooth_samples: 64 }
    }
}

/// Noise drawn once and reused for every candidate, so that objective
/// values of nearby points are directly comparable.
enum FixedNoise {
    None { u: f64 },
    Gaussian { deltas: Vec<Vec<f64>>, u: Vec<f64> },
    Flips { p0: f64, p1: f64, draws: Vec<Vec<f64>>, u: Vec<f64> },
}

struct Objective<'a> {
    task: &'a SyntheticTask,
    label: usize,
    sign: f64,
    noise: FixedNoise,
    buf: Vec<f64>,
    scores: Vec<f64>,
    evaluations: usize,
}

impl<'a> Objective<'a> {
    fn new(task: &'a SyntheticTask, label: usize, objective: AttackObjective, goal: AttackGoal, rng: &mut StreamRng) -> Self {
        let d = task.spec.dim;
        let noise = match objective {
            AttackObjective::Base => FixedNoise::None { u: rng.gen() },
            AttackObjective::Smoothed { scheme, samples } => {
                let u = (0..samples).map(|_| rng.gen()).collect();
                match scheme {
                    SmoothingScheme::Gaussian { sigma } => FixedNoise::Gaussian {
                        deltas: (0..samples)
                            .map(|_| (0..d).map(|_| sigma * rng.sample::<f64, _>(StandardNormal)).collect())
                            .collect(),
                        u,
                    },
                    SmoothingScheme::SparseFlip { p0, p1 } => FixedNoise::Flips {
                        p0,
                        p1,
                        draws: (0..samples).map(|_| (0..d).map(|_| rng.gen()).collect()).collect(),
                        u,
                    },
                }
            }
        };
        let sign = match goal {
            AttackGoal::Lower => 1.0,
            AttackGoal::Raise => -1.0,
        };
        Self {
            task,
            label,
            sign,
            noise,
            buf: vec![0.0; d],
            scores: vec![0.0; task.spec.classes],
            evaluations: 0,
        }
    }

    /// Target score (mean over the fixed noise), signed so that smaller is
    /// better for the attacker.
    fn eval(&mut self, x: &[f64]) -> f64 {
        self.evaluations += 1;
        let raw = match &self.noise {
            FixedNoise::None { u } => {
                self.task.score_all(x, *u, &mut self.scores);
                self.scores[self.label]
            }
            FixedNoise::Gaussian { deltas, u } => {
                let mut total = 0.0;
                for (delta, &ui) in deltas.iter().zip(u) {
                    for ((b, &xi), &di) in self.buf.iter_mut().zip(x).zip(delta) {
                        *b = xi + di;
                    }
                    self.task.score_all(&self.buf, ui, &mut self.scores);
                    total += self.scores[self.label];
                }
                total / deltas.len() as f64
            }
            FixedNoise::Flips { p0, p1, draws, u } => {
                let mut total = 0.0;
                for (draw, &ui) in draws.iter().zip(u) {
                    for ((b, &xi), &v) in self.buf.iter_mut().zip(x).zip(draw) {
                        let flip = if xi > 0.5 { v < *p1 } else { v < *p0 };
                        *b = if flip { 1.0 - xi } else { xi };
                    }
                    self.task.score_all(&self.buf, ui, &mut self.scores);
                    total += self.scores[self.label];
                }
                total / draws.len() as f64
            }
        };
        self.sign * raw
    }
}

/// Result of one attack: the perturbed input and the attacker's estimate
/// of the target score there.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackOutcome {
    pub x: Vec<f64>,
    pub score: f64,
    pub clean_score: f64,
}

/// Searches the threat model around `x` for the input that moves the score
/// of class `label` furthest in the direction of `goal`.
///
/// Continuous balls: the finite-difference gradient direction, random
/// directions on the sphere, then projected coordinate search with a
/// shrinking step. Binary balls: greedy single flips within the add and
/// delete budgets. The clean input is always a candidate.
#[allow(clippy::too_many_arguments)]
pub fn evasion_attack(
    x: &[f64],
    label: usize,
    task: &SyntheticTask,
    model: &ThreatModel,
    objective: AttackObjective,
    goal: AttackGoal,
    settings: &AttackSettings,
    rng: &mut StreamRng,
) -> Result<AttackOutcome> {
    model.validate()?;
    if label >= task.spec.classes {
        return Err(rcp_core::Error::IndexOutOfRange { index: label, len: task.spec.classes }.into());
    }
    let mut f = Objective::new(task, label, objective, goal, rng);
    let clean = f.eval(x);
    let (best, value) = match *model {
        _ if model.is_trivial() => (x.to_vec(), clean),
        ThreatModel::L2Ball { r } => {
            if task.spec.is_binary() {
                return Err(HarnessError::Config("an L2 ball does not apply to binary features".into()));
            }
            continuous_search(x, r, clean, &mut f, settings, rng)
        }
        ThreatModel::BinaryBall { r_a, r_d } => {
            rcp_core::smoothing::check_binary(x)?;
            greedy_flips(x, r_a, r_d, clean, &mut f)
        }
    };
    check_in_ball(x, &best, model)?;
    Ok(AttackOutcome { x: best, score: f.sign * value, clean_score: f.sign * clean })
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt()
}

/// Fails if `candidate` lies outside the ball around `x`.
pub fn check_in_ball(x: &[f64], candidate: &[f64], model: &ThreatModel) -> Result<()> {
    let ok = match *model {
        ThreatModel::L2Ball { r } => l2(x, candidate) <= r * (1.0 + 1e-9) + 1e-12,
        ThreatModel::BinaryBall { r_a, r_d } => {
            let added = x.iter().zip(candidate).filter(|(a, b)| **a == 0.0 && **b == 1.0).count();
            let deleted = x.iter().zip(candidate).filter(|(a, b)| **a == 1.0 && **b == 0.0).count();
            let other = x.iter().zip(candidate).any(|(a, b)| a != b && !matches!((*a, *b), (0.0, 1.0) | (1.0, 0.0)));
            !other && added <= r_a as usize && deleted <= r_d as usize
        }
    };
    if ok {
        Ok(())
    } else {
        Err(HarnessError::Invariant(format!("attack left the threat model {model:?}")))
    }
}

fn project(x: &[f64], cand: &mut [f64], r: f64) {
    let dist = l2(x, cand);
    if dist > r {
        let scale = r / dist;
        for (c, &xi) in cand.iter_mut().zip(x) {
            *c = xi + (*c - xi) * scale;
        }
    }
}

fn continuous_search(
    x: &[f64],
    r: f64,
    clean: f64,
    f: &mut Objective,
    settings: &AttackSettings,
    rng: &mut StreamRng,
) -> (Vec<f64>, f64) {
    let d = x.len();
    let mut best = (x.to_vec(), clean);
    let consider = |cand: Vec<f64>, f: &mut Objective, best: &mut (Vec<f64>, f64)| {
        let v = f.eval(&cand);
        if v < best.1 {
            *best = (cand, v);
        }
    };

    let h = 1e-4 * r.max(1e-3);
    let mut grad = vec![0.0; d];
    let mut probe = x.to_vec();
    for j in 0..d {
        probe[j] = x[j] + h;
        let up = f.eval(&probe);
        probe[j] = x[j] - h;
        let down = f.eval(&probe);
        probe[j] = x[j];
        grad[j] = (up - down) / (2.0 * h);
    }
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > 0.0 {
        consider(x.iter().zip(&grad).map(|(xi, g)| xi - r * g / norm).collect(), f, &mut best);
    }
    for _ in 0..settings.random_directions {
        let dir: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let n = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            consider(x.iter().zip(&dir).map(|(xi, v)| xi + r * v / n).collect(), f, &mut best);
        }
    }

    let mut step = r / 2.0;
    for _ in 0..settings.coordinate_rounds {
        for j in 0..d {
            for sign in [1.0, -1.0] {
                let mut cand = best.0.clone();
                cand[j] += sign * step;
                project(x, &mut cand, r);
                consider(cand, f, &mut best);
            }
        }
        step /= 2.0;
    }
    best
}

fn greedy_flips(x: &[f64], r_a: u32, r_d: u32, clean: f64, f: &mut Objective) -> (Vec<f64>, f64) {
    let mut cur = x.to_vec();
    let mut cur_val = clean;
    let (mut adds, mut dels) = (r_a, r_d);
    let mut touched = vec![false; x.len()];
    while adds + dels > 0 {
        let mut choice: Option<(usize, f64)> = None;
        for j in 0..x.len() {
            let allowed = !touched[j] && if x[j] == 0.0 { adds > 0 } else { dels > 0 };
            if !allowed {
                continue;
            }
            cur[j] = 1.0 - x[j];
            let v = f.eval(&cur);
            cur[j] = x[j];
            if v < choice.map_or(cur_val, |c| c.1) {
                choice = Some((j, v));
            }
        }
        let Some((j, v)) = choice else { break };
        cur[j] = 1.0 - x[j];
        touched[j] = true;
        if x[j] == 0.0 {
            adds -= 1;
        } else {
            dels -= 1;
        }
        cur_val = v;
    }
    (cur, cur_val)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::{generate_task, TaskSpec};
    use rcp_core::{Domain, RngStreams};

    fn rng(i: u64) -> StreamRng {
        RngStreams::new(77).stream(Domain::Attack, i, 0)
    }

    #[test]
    fn zero_radius_is_identity() {
        let task = generate_task(&TaskSpec::gaussian_mixture(4, 3, 3.0, 1.0), 1).unwrap();
        let x = &task.test.x[0];
        let out = evasion_attack(
            x,
            task.test.y[0],
            &task,
            &ThreatModel::L2Ball { r: 0.0 },
            AttackObjective::Base,
            AttackGoal::Lower,
            &AttackSettings::default(),
            &mut rng(0),
        )
        .unwrap();
        assert_eq!(&out.x, x);
        assert_eq!(out.score, out.clean_score);
    }

    #[test]
    fn continuous_attack_stays_in_ball_and_never_helps() {
        let task = generate_task(&TaskSpec::gaussian_mixture(6, 4, 3.0, 1.0), 2).unwrap();
        let model = ThreatModel::L2Ball { r: 0.4 };
        let smoothed = AttackObjective::Smoothed { scheme: SmoothingScheme::Gaussian { sigma: 0.5 }, samples: 16 };
        for (i, (x, &y)) in task.test.x.iter().zip(&task.test.y).enumerate().take(20) {
            for objective in [AttackObjective::Base, smoothed] {
                for goal in [AttackGoal::Lower, AttackGoal::Raise] {
                    let out =
                        evasion_attack(x, y, &task, &model, objective, goal, &AttackSettings::default(), &mut rng(i as u64))
                            .unwrap();
                    assert!(l2(x, &out.x) <= 0.4 + 1e-12);
                    match goal {
                        AttackGoal::Lower => assert!(out.score <= out.clean_score),
                        AttackGoal::Raise => assert!(out.score >= out.clean_score),
                    }
                }
            }
            // for a linear softmax the base attack should find a real decrease
            let out = evasion_attack(x, y, &task, &model, AttackObjective::Base, AttackGoal::Lower, &AttackSettings::default(), &mut rng(0))
                .unwrap();
            let p = task.probs(x)[y];
            if p > 1e-6 && p < 1.0 - 1e-6 {
                assert!(out.score < out.clean_score, "point {i}");
            }
        }
    }

    #[test]
    fn binary_attack_respects_flip_budgets() {
        let task = generate_task(&TaskSpec::binary_linear(24, 3, 6, 0.8, 0.05), 4).unwrap();
        let model = ThreatModel::BinaryBall { r_a: 2, r_d: 1 };
        for (i, (x, &y)) in task.test.x.iter().zip(&task.test.y).enumerate().take(20) {
            let out = evasion_attack(x, y, &task, &model, AttackObjective::Base, AttackGoal::Lower, &AttackSettings::default(), &mut rng(i as u64))
                .unwrap();
            check_in_ball(x, &out.x, &model).unwrap();
            assert!(out.score <= out.clean_score);
        }
    }

    #[test]
    fn ball_check_rejects_violations() {
        let x = [0.0, 1.0, 0.0];
        let model = ThreatModel::BinaryBall { r_a: 1, r_d: 0 };
        assert!(check_in_ball(&x, &[1.0, 1.0, 0.0], &model).is_ok());
        assert!(check_in_ball(&x, &[1.0, 1.0, 1.0], &model).is_err());
        assert!(check_in_ball(&x, &[0.0, 0.0, 0.0], &model).is_err());
        assert!(check_in_ball(&[0.0, 0.0], &[0.3, 0.4], &ThreatModel::L2Ball { r: 0.5 }).is_ok());
        assert!(check_in_ball(&[0.0, 0.0], &[0.3, 0.5], &ThreatModel::L2Ball { r: 0.5 }).is_err());
    }
}
