//! Synthetic classification tasks with closed-form softmax classifiers.
//!
//! Both families are generative models whose Bayes posterior is a softmax
//! over linear logits, so the classifier needs no training and smoothed
//! scores are cheap to sample.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use rcp_core::rng::ALL_CLASSES;
use rcp_core::smoothing::ClassScorer;
use rcp_core::{Domain, RngStreams, ScoreFunction};

use crate::{HarnessError, Result};

pub const MAX_CONTINUOUS_DIM: usize = 16;
pub const MAX_CONTINUOUS_CLASSES: usize = 10;
pub const MAX_BINARY_DIM: usize = 64;
pub const MAX_CLASSES: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TaskFamily {
    /// Isotropic Gaussian clusters around random means `separation` apart
    /// (in expectation).
    GaussianMixture { separation: f64, noise: f64 },
    /// Independent Bernoulli features: each class switches on `active`
    /// features with probability `on_prob`, the rest fire with `off_prob`.
    BinaryLinear { active: usize, on_prob: f64, off_prob: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub family: TaskFamily,
    pub dim: usize,
    pub classes: usize,
    #[serde(default = "default_calibration")]
    pub n_cal: usize,
    #[serde(default = "default_calibration")]
    pub n_test: usize,
    #[serde(default = "default_score")]
    pub score: ScoreFunction,
    /// Logit multiplier; 1 gives the Bayes posterior.
    #[serde(default = "default_temperature")]
    pub temperature: f64,
}

fn default_calibration() -> usize {
    100
}

fn default_score() -> ScoreFunction {
    ScoreFunction::Tps
}

fn default_temperature() -> f64 {
    1.0
}

impl TaskSpec {
    pub fn gaussian_mixture(dim: usize, classes: usize, separation: f64, noise: f64) -> Self {
        Self {
            family: TaskFamily::GaussianMixture { separation, noise },
            dim,
            classes,
            n_cal: default_calibration(),
            n_test: default_calibration(),
            score: default_score(),
            temperature: default_temperature(),
        }
    }

    pub fn binary_linear(dim: usize, classes: usize, active: usize, on_prob: f64, off_prob: f64) -> Self {
        Self {
            family: TaskFamily::BinaryLinear { active, on_prob, off_prob },
            ..Self::gaussian_mixture(dim, classes, 1.0, 1.0)
        }
    }

    pub fn is_binary(&self) -> bool {
        matches!(self.family, TaskFamily::BinaryLinear { .. })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if !(2..=MAX_CLASSES).contains(&self.classes) {
            return bad(format!("need 2 to {MAX_CLASSES} classes, got {}", self.classes));
        }
        if self.dim == 0 || self.n_cal == 0 {
            return bad("dimension and calibration size must be positive".into());
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature {} must be positive", self.temperature));
        }
        match self.family {
            TaskFamily::GaussianMixture { separation, noise } => {
                if self.dim > MAX_CONTINUOUS_DIM || self.classes > MAX_CONTINUOUS_CLASSES {
                    return bad(format!(
                        "gaussian mixture limited to {MAX_CONTINUOUS_DIM} dims and {MAX_CONTINUOUS_CLASSES} classes"
                    ));
                }
                if !(noise > 0.0) || !(separation >= 0.0) {
                    return bad("noise must be positive and separation nonnegative".into());
                }
            }
            TaskFamily::BinaryLinear { active, on_prob, off_prob } => {
                if self.dim > MAX_BINARY_DIM {
                    return bad(format!("binary task limited to {MAX_BINARY_DIM} features"));
                }
                if active > self.dim {
                    return bad(format!("{active} active features exceed dimension {}", self.dim));
                }
                for p in [on_prob, off_prob] {
                    if !(p > 0.0 && p < 1.0) {
                        return bad(format!("feature probability {p} must lie in (0, 1)"));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Inputs and labels.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// Softmax over `w x + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearSoftmax {
    pub classes: usize,
    pub dim: usize,
    /// Row-major `classes x dim`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LinearSoftmax {
    pub fn probs_into(&self, x: &[f64], out: &mut [f64]) {
        for (c, o) in out.iter_mut().enumerate() {
            let row = &self.weights[c * self.dim..(c + 1) * self.dim];
            *o = self.bias[c] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
        rcp_core::conformal::softmax_in_place(out);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum Generator {
    Gaussian { means: Vec<Vec<f64>>, noise: f64 },
    Bernoulli { theta: Vec<Vec<f64>> },
}

/// A task: the data generator, its closed-form classifier, and one
/// calibration/test draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub spec: TaskSpec,
    pub seed: u64,
    pub model: LinearSoftmax,
    generator: Generator,
    pub calibration: Dataset,
    pub test: Dataset,
}

/// Builds the generator and classifier from `seed`, then draws calibration
/// and test splits from the same seed.
pub fn generate_task(spec: &TaskSpec, seed: u64) -> Result<SyntheticTask> {
    spec.validate()?;
    let streams = RngStreams::new(seed);
    let mut rng = streams.stream(Domain::Custom(0), 0, ALL_CLASSES);
    let (generator, model) = match spec.family {
        TaskFamily::GaussianMixture { separation, noise } => {
            // random directions scaled so that pairwise distances are
            // about `separation`
            let means: Vec<Vec<f64>> = (0..spec.classes)
                .map(|_| {
                    let v: Vec<f64> = (0..spec.dim).map(|_| rng.sample(StandardNormal)).collect();
                    let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
                    v.iter().map(|a| a * separation / (norm * std::f64::consts::SQRT_2)).collect()
                })
                .collect();
            let var = noise * noise;
            let weights = means.iter().flat_map(|m| m.iter().map(|v| spec.temperature * v / var)).collect();
            let bias = means
                .iter()
                .map(|m| -spec.temperature * m.iter().map(|v| v * v).sum::<f64>() / (2.0 * var))
                .collect();
            (Generator::Gaussian { means, noise }, LinearSoftmax { classes: spec.classes, dim: spec.dim, weights, bias })
        }
        TaskFamily::BinaryLinear { active, on_prob, off_prob } => {
            let theta: Vec<Vec<f64>> = (0..spec.classes)
                .map(|_| {
                    let on = rand::seq::index::sample(&mut rng, spec.dim, active);
                    let mut row = vec![off_prob; spec.dim];
                    for j in on.iter() {
                        row[j] = on_prob;
                    }
                    row
                })
                .collect();
            let t = spec.temperature;
            let weights = theta.iter().flat_map(|row| row.iter().map(move |p| t * (p / (1.0 - p)).ln())).collect();
            let bias = theta.iter().map(|row| t * row.iter().map(|p| (1.0 - p).ln()).sum::<f64>()).collect();
            (Generator::Bernoulli { theta }, LinearSoftmax { classes: spec.classes, dim: spec.dim, weights, bias })
        }
    };
    let mut task = SyntheticTask {
        spec: *spec,
        seed,
        model,
        generator,
        calibration: Dataset::default(),
        test: Dataset::default(),
    };
    let (cal, test) = task.draw_splits(streams.child(0));
    task.calibration = cal;
    task.test = test;
    Ok(task)
}

impl SyntheticTask {
    /// Fresh i.i.d. calibration and test splits; labels are uniform.
    pub fn draw_splits(&self, streams: RngStreams) -> (Dataset, Dataset) {
        let draw = |domain: Domain, n: usize| {
            let mut rng = streams.stream(domain, 0, ALL_CLASSES);
            let mut data = Dataset::default();
            for _ in 0..n {
                let y = rng.gen_range(0..self.spec.classes);
                data.x.push(self.sample_input(y, &mut rng));
                data.y.push(y);
            }
            data
        };
        (draw(Domain::Calibration, self.spec.n_cal), draw(Domain::Test, self.spec.n_test))
    }

    pub fn sample_input<R: Rng>(&self, y: usize, rng: &mut R) -> Vec<f64> {
        match &self.generator {
            Generator::Gaussian { means, noise } => {
                means[y].iter().map(|m| m + noise * rng.sample::<f64, _>(StandardNormal)).collect()
            }
            Generator::Bernoulli { theta } => {
                theta[y].iter().map(|&p| if rng.gen::<f64>() < p { 1.0 } else { 0.0 }).collect()
            }
        }
    }

    pub fn probs(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.spec.classes];
        self.model.probs_into(x, &mut out);
        out
    }

    /// Unsmoothed scores of every class.
    pub fn scores(&self, x: &[f64], u: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.spec.classes];
        self.score_all(x, u, &mut out);
        out
    }
}

impl ClassScorer for SyntheticTask {
    fn num_classes(&self) -> usize {
        self.spec.classes
    }

    fn score_all(&self, x: &[f64], u: f64, out: &mut [f64]) {
        let mut buf = [0.0; MAX_CLASSES];
        let probs = &mut buf[..self.spec.classes];
        self.model.probs_into(x, probs);
        self.spec.score.score_all(probs, u, out);
    }
}
