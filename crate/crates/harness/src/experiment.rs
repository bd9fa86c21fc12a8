//! Seeded experiments: each trial draws fresh calibration and test splits,
//! attacks them, and evaluates every method on the same data.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use rcp_core::bounds::{BoundKind, Certifier, Direction, Perspective, ThreatModel};
use rcp_core::conformal::threshold_serde;
use rcp_core::correction::{corrected_distribution, ConfidenceBudget, CorrectionFlavor};
use rcp_core::evasion::{CertifiedPredictor, EvasionConfig, EvasionMode};
use rcp_core::poisoning::{
    corrected_feature_poison_threshold, feature_poison_threshold, label_poison_threshold, observed_lower_bounds,
    CorrectedPoisonInput, LabelPoisonInstance, PoisonInstance,
};
use rcp_core::rng::ALL_CLASSES;
use rcp_core::smoothing::{estimate_class_distributions, BinGrid, ScoreDistribution, SmoothingScheme};
use rcp_core::{
    conformal_quantile, evaluate, inverse_quantile, prediction_set, Domain, MetricsReport, PredictionSet,
    QuantileSpec, RngStreams,
};

use crate::attack::{evasion_attack, AttackGoal, AttackObjective, AttackSettings};
use crate::poison::{apply_feature_poisoning, feature_candidates, poison_labels};
use crate::report::{aggregate, ExperimentReport};
use crate::task::{generate_task, Dataset, SyntheticTask, TaskSpec};
use crate::{worker_count, HarnessError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Study {
    /// Test inputs attacked inside each threat model in turn.
    Evasion { radii: Vec<ThreatModel> },
    /// Up to `budget` calibration inputs perturbed inside `model`.
    FeaturePoisoning { model: ThreatModel, budgets: Vec<usize> },
    /// Up to `budget` calibration labels flipped.
    LabelPoisoning { budgets: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub task: TaskSpec,
    pub scheme: SmoothingScheme,
    pub study: Study,
    pub alpha: f64,
    /// Further miscoverage levels, evaluated on the same trials.
    #[serde(default)]
    pub extra_alphas: Vec<f64>,
    pub trials: usize,
    pub seed: u64,
    /// Monte-Carlo samples per smoothed distribution.
    pub samples: usize,
    pub grid_edges: usize,
    /// Failure budget for the Monte-Carlo corrected methods.
    #[serde(default)]
    pub eta: Option<f64>,
    #[serde(default)]
    pub attack: AttackSettings,
    /// Store wall-clock time per trial (makes result files nondeterministic).
    #[serde(default)]
    pub record_runtime: bool,
}

impl ExperimentConfig {
    pub fn new(task: TaskSpec, scheme: SmoothingScheme, study: Study) -> Self {
        Self {
            task,
            scheme,
            study,
            alpha: 0.1,
            extra_alphas: Vec::new(),
            trials: 100,
            seed: 0,
            samples: rcp_core::smoothing::DEFAULT_SAMPLES,
            grid_edges: rcp_core::smoothing::DEFAULT_EDGES,
            eta: None,
            attack: AttackSettings::default(),
            record_runtime: false,
        }
    }

    pub fn alphas(&self) -> Vec<f64> {
        let mut all = vec![self.alpha];
        all.extend(self.extra_alphas.iter().copied().filter(|a| *a != self.alpha));
        all
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        for a in self.alphas() {
            QuantileSpec::new(a)?;
            if let Some(eta) = self.eta {
                if eta >= a {
                    return Err(HarnessError::Config(format!("eta = {eta} must be below alpha = {a}")));
                }
            }
        }
        if let Some(eta) = self.eta {
            ConfidenceBudget::new(eta)?;
        }
        BinGrid::uniform(self.grid_edges)?;
        if self.samples < 2 {
            return Err(HarnessError::Config("at least two Monte-Carlo samples are required".into()));
        }
        let models: Vec<ThreatModel> = match &self.study {
            Study::Evasion { radii } => radii.clone(),
            Study::FeaturePoisoning { model, .. } => vec![*model],
            Study::LabelPoisoning { .. } => Vec::new(),
        };
        if !matches!(self.study, Study::LabelPoisoning { .. }) {
            let binary_scheme = matches!(self.scheme, SmoothingScheme::SparseFlip { .. });
            if binary_scheme != self.task.is_binary() {
                return Err(HarnessError::Config(format!(
                    "smoothing {:?} does not match the task's feature type",
                    self.scheme
                )));
            }
        }
        for m in models {
            m.check_compatible(&self.scheme)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Split CP on the unsmoothed classifier.
    Vanilla,
    /// Split CP on smoothed means, no certificate.
    Smoothed,
    /// Test-time certificate with mean bounds.
    Rscp,
    /// Test-time certificate with CDF bounds.
    Cas,
    RscpCalibration,
    CasCalibration,
    /// Calibration-time certificate with Monte-Carlo correction.
    RscpCorrected,
    CasCorrected,
    /// Poisoning-conservative threshold.
    Robust,
    RobustCorrected,
}

impl Method {
    pub fn is_certified(self) -> bool {
        !matches!(self, Method::Vanilla | Method::Smoothed)
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Vanilla => "vanilla",
            Method::Smoothed => "smoothed",
            Method::Rscp => "rscp",
            Method::Cas => "cas",
            Method::RscpCalibration => "rscp_calibration",
            Method::CasCalibration => "cas_calibration",
            Method::RscpCorrected => "rscp_corrected",
            Method::CasCorrected => "cas_corrected",
            Method::Robust => "robust",
            Method::RobustCorrected => "robust_corrected",
        }
    }
}

/// One method evaluated at one setting of one trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRecord {
    pub method: Method,
    pub alpha: f64,
    /// Evasion radius or poisoning ball, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ThreatModel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget: Option<usize>,
    #[serde(with = "threshold_serde")]
    pub threshold: f64,
    /// Sets on clean test inputs with a clean calibration set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clean: Option<MetricsReport>,
    /// Sets under attack: perturbed test inputs, or a poisoned calibration set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attacked: Option<MetricsReport>,
    /// Certified lower bound on the worst-case coverage of unprotected
    /// smoothed sets (`1 - beta`), from this method's calibration bounds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coverage_bound: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget_spent: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum TrialStatus {
    Ok,
    Failed { message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub trial: usize,
    pub seed: u64,
    #[serde(flatten)]
    pub status: TrialStatus,
    pub records: Vec<MethodRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub violations: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub runtime_ms: Option<u64>,
}

/// Everything computed once per trial and shared across settings.
struct TrialData<'a> {
    config: &'a ExperimentConfig,
    task: &'a SyntheticTask,
    streams: RngStreams,
    grid: BinGrid,
    cal: Dataset,
    test: Dataset,
    violations: Vec<String>,
    records: Vec<MethodRecord>,
}

impl TrialData<'_> {
    fn dists_at(&self, x: &[f64], domain: Domain, point: u64, slot: u32) -> Result<Vec<ScoreDistribution>> {
        let mut rng = self.streams.stream(domain, point, slot);
        Ok(estimate_class_distributions(self.task, x, &self.config.scheme, self.config.samples, &self.grid, &mut rng)?)
    }

    fn tie_breaks(&self, domain: Domain, n: usize) -> Vec<f64> {
        use rand::Rng;
        let mut rng = self.streams.stream(Domain::Data, domain_slot(domain), ALL_CLASSES);
        (0..n).map(|_| rng.gen()).collect()
    }

    fn check(&mut self, ok: bool, what: impl FnOnce() -> String) {
        if !ok {
            self.violations.push(what());
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn push(
        &mut self,
        method: Method,
        alpha: f64,
        model: Option<ThreatModel>,
        budget: Option<usize>,
        threshold: f64,
        clean: Option<MetricsReport>,
        attacked: Option<MetricsReport>,
    ) -> &mut MethodRecord {
        self.records.push(MethodRecord {
            method,
            alpha,
            model,
            budget,
            threshold,
            clean,
            attacked,
            coverage_bound: None,
            budget_spent: None,
        });
        self.records.last_mut().expect("just pushed")
    }
}

fn domain_slot(domain: Domain) -> u64 {
    match domain {
        Domain::Calibration => 0,
        _ => 1,
    }
}

fn sets_from(scores: &[Vec<f64>], threshold: f64) -> Vec<PredictionSet> {
    scores.iter().map(|s| prediction_set(s, threshold)).collect()
}

fn metrics(scores: &[Vec<f64>], threshold: f64, labels: &[usize]) -> Result<MetricsReport> {
    Ok(evaluate(&sets_from(scores, threshold), labels)?)
}

fn means(dists: &[ScoreDistribution]) -> Vec<f64> {
    dists.iter().map(ScoreDistribution::mean).collect()
}

/// Per-class upper bounds at an observed input; plain means for a trivial
/// ball.
fn upper_bounds(certifier: &Certifier, model: &ThreatModel, dists: &[ScoreDistribution], kind: BoundKind) -> Vec<f64> {
    dists
        .iter()
        .map(|d| if model.is_trivial() { d.mean() } else { certifier.bound(d, kind, Direction::Upper) })
        .collect()
}

fn run_evasion(data: &mut TrialData, radii: &[ThreatModel]) -> Result<()> {
    let config = data.config;
    let task = data.task;
    let (n, t) = (data.cal.len(), data.test.len());
    let cal_u = data.tie_breaks(Domain::Calibration, n);
    let test_u = data.tie_breaks(Domain::Test, t);
    let cal_base: Vec<f64> = (0..n).map(|i| task.scores(&data.cal.x[i], cal_u[i])[data.cal.y[i]]).collect();
    let test_base: Vec<Vec<f64>> = (0..t).map(|j| task.scores(&data.test.x[j], test_u[j])).collect();
    let mut cal_dists = Vec::with_capacity(n);
    for i in 0..n {
        let mut all = data.dists_at(&data.cal.x[i], Domain::Calibration, i as u64, ALL_CLASSES)?;
        cal_dists.push(all.swap_remove(data.cal.y[i]));
    }
    let test_dists: Vec<Vec<ScoreDistribution>> = (0..t)
        .map(|j| data.dists_at(&data.test.x[j], Domain::Test, j as u64, ALL_CLASSES))
        .collect::<Result<_>>()?;
    let test_means: Vec<Vec<f64>> = test_dists.iter().map(|d| means(d)).collect();
    let smooth_cal = means(&cal_dists);
    let labels = data.test.y.clone();
    let classes = task.spec.classes;

    for (ri, model) in radii.iter().enumerate() {
        // attacked test inputs: one attack on the raw classifier, one on the
        // smoothed score
        let mut attacked_base = Vec::with_capacity(t);
        let mut attacked_dists = Vec::with_capacity(t);
        for j in 0..t {
            let (x, y) = (&data.test.x[j], data.test.y[j]);
            let mut rng = data.streams.stream(Domain::Attack, j as u64, 2 * ri as u32);
            let out = evasion_attack(x, y, task, model, AttackObjective::Base, AttackGoal::Lower, &config.attack, &mut rng)?;
            attacked_base.push(task.scores(&out.x, test_u[j]));
            if model.is_trivial() {
                attacked_dists.push(test_dists[j].clone());
            } else {
                let objective = AttackObjective::Smoothed { scheme: config.scheme, samples: config.attack.smooth_samples };
                let mut rng = data.streams.stream(Domain::Attack, j as u64, 2 * ri as u32 + 1);
                let out = evasion_attack(x, y, task, model, objective, AttackGoal::Lower, &config.attack, &mut rng)?;
                attacked_dists.push(data.dists_at(&out.x, Domain::AttackedTest, j as u64, ri as u32)?);
            }
        }
        let attacked_means: Vec<Vec<f64>> = attacked_dists.iter().map(|d| means(d)).collect();

        let observed = Certifier::new(config.scheme, *model, Perspective::Observed)?;
        let clean_side = Certifier::new(config.scheme, *model, Perspective::Clean)?;
        let kinds = [(BoundKind::Mean, Method::Rscp, Method::RscpCalibration, Method::RscpCorrected),
            (BoundKind::Cdf, Method::Cas, Method::CasCalibration, Method::CasCorrected)];
        let mut uppers_clean = Vec::new();
        let mut uppers_attacked = Vec::new();
        let mut lowers = Vec::new();
        for &(kind, ..) in &kinds {
            uppers_clean.push(test_dists.iter().map(|d| upper_bounds(&observed, model, d, kind)).collect::<Vec<_>>());
            uppers_attacked.push(attacked_dists.iter().map(|d| upper_bounds(&observed, model, d, kind)).collect::<Vec<_>>());
            lowers.push(
                cal_dists
                    .iter()
                    .map(|d| if model.is_trivial() { d.mean() } else { clean_side.bound(d, kind, Direction::Lower) })
                    .collect::<Vec<f64>>(),
            );
        }

        for alpha in config.alphas() {
            let spec = QuantileSpec::new(alpha)?;
            let m = Some(*model);
            let q_v = conformal_quantile(&cal_base, spec)?;
            let (c, a) = (metrics(&test_base, q_v, &labels)?, metrics(&attacked_base, q_v, &labels)?);
            data.push(Method::Vanilla, alpha, m, None, q_v, Some(c), Some(a));

            let q_s = conformal_quantile(&smooth_cal, spec)?;
            let (c, a) = (metrics(&test_means, q_s, &labels)?, metrics(&attacked_means, q_s, &labels)?);
            data.push(Method::Smoothed, alpha, m, None, q_s, Some(c), Some(a));
            let plain_clean = sets_from(&test_means, q_s);

            for (ki, &(kind, test_method, cal_method, corrected_method)) in kinds.iter().enumerate() {
                let robust_clean = sets_from(&uppers_clean[ki], q_s);
                let nested = plain_clean.iter().zip(&robust_clean).all(|(p, r)| p.is_subset(r));
                data.check(nested, || format!("{} set misses a smoothed-set label (alpha {alpha})", test_method.name()));
                let c = evaluate(&robust_clean, &labels)?;
                let a = metrics(&uppers_attacked[ki], q_s, &labels)?;
                let beta = inverse_quantile(q_s, &lowers[ki])?;
                data.push(test_method, alpha, m, None, q_s, Some(c), Some(a)).coverage_bound = Some(1.0 - beta);

                let q_l = conformal_quantile(&lowers[ki], spec)?;
                data.check(q_l <= q_s, || format!("{} threshold above the clean one", cal_method.name()));
                let (c, a) = (metrics(&test_means, q_l, &labels)?, metrics(&attacked_means, q_l, &labels)?);
                data.push(cal_method, alpha, m, None, q_l, Some(c), Some(a));

                if let Some(eta) = config.eta {
                    let budget = ConfidenceBudget::new(eta)?;
                    let cfg = EvasionConfig::new(config.scheme, *model, kind)
                        .with_correction(budget)
                        .with_mode(EvasionMode::CalibrationTime);
                    let (predictor, _) = CertifiedPredictor::calibrate(&cal_dists, alpha, &cfg)?;
                    let q_c = predictor.threshold;
                    data.check(q_c <= q_l, || format!("{} threshold {q_c} above uncorrected {q_l}", corrected_method.name()));
                    let clean_sets = test_dists.iter().map(|d| predictor.predict(d)).collect::<Result<Vec<_>, _>>()?;
                    let attacked_sets = attacked_dists.iter().map(|d| predictor.predict(d)).collect::<Result<Vec<_>, _>>()?;
                    let spent = predictor.budget_ledger(classes)?.map_or(0.0, |l| l.spent());
                    data.check(spent <= eta * (1.0 + 1e-12), || format!("budget {spent} exceeds eta {eta}"));
                    let (c, a) = (evaluate(&clean_sets, &labels)?, evaluate(&attacked_sets, &labels)?);
                    data.push(corrected_method, alpha, m, None, q_c, Some(c), Some(a)).budget_spent = Some(spent);
                }
            }
        }
    }
    Ok(())
}

fn run_feature_poisoning(data: &mut TrialData, model: &ThreatModel, budgets: &[usize]) -> Result<()> {
    let config = data.config;
    let task = data.task;
    let (n, t) = (data.cal.len(), data.test.len());
    let mut cal_dists = Vec::with_capacity(n);
    for i in 0..n {
        let mut all = data.dists_at(&data.cal.x[i], Domain::Calibration, i as u64, ALL_CLASSES)?;
        cal_dists.push(all.swap_remove(data.cal.y[i]));
    }
    let test_means: Vec<Vec<f64>> = (0..t)
        .map(|j| data.dists_at(&data.test.x[j], Domain::Test, j as u64, ALL_CLASSES).map(|d| means(&d)))
        .collect::<Result<_>>()?;
    let labels = data.test.y.clone();
    let clean_scores = means(&cal_dists);
    let objective = AttackObjective::Smoothed { scheme: config.scheme, samples: config.attack.smooth_samples };
    let candidates = if budgets.iter().any(|&k| k > 0) && !model.is_trivial() {
        Some(feature_candidates(task, &data.cal, &clean_scores, model, objective, &config.attack, data.streams)?)
    } else {
        None
    };
    let cfg = EvasionConfig::new(config.scheme, *model, BoundKind::Cdf);
    let observed = Certifier::new(config.scheme, *model, Perspective::Observed)?;

    for alpha in config.alphas() {
        let spec = QuantileSpec::new(alpha)?;
        for &k in budgets {
            let k = k.min(n);
            let poisoned = match &candidates {
                Some(c) if k > 0 => apply_feature_poisoning(&data.cal, &clean_scores, c, k, alpha)?,
                _ => crate::poison::PoisonedCalibration { data: data.cal.clone(), changed: Vec::new(), target_threshold: f64::NAN },
            };
            for &i in &poisoned.changed {
                if let Err(e) = crate::attack::check_in_ball(&data.cal.x[i], &poisoned.data.x[i], model) {
                    data.violations.push(e.to_string());
                }
            }
            let mut obs_dists = cal_dists.clone();
            for &i in &poisoned.changed {
                let mut all = data.dists_at(&poisoned.data.x[i], Domain::Poison, i as u64, ALL_CLASSES)?;
                obs_dists[i] = all.swap_remove(poisoned.data.y[i]);
            }
            let obs_scores = means(&obs_dists);
            let q_v = conformal_quantile(&obs_scores, spec)?;
            let a = metrics(&test_means, q_v, &labels)?;
            data.push(Method::Smoothed, alpha, Some(*model), Some(k), q_v, None, Some(a));

            let lower = observed_lower_bounds(&obs_dists, &cfg)?;
            let inst = PoisonInstance::new(obs_scores.clone(), lower, obs_scores.clone(), k, alpha)?;
            let q_r = feature_poison_threshold(&inst)?.q_lower;
            data.check(q_r <= q_v, || format!("robust threshold {q_r} above observed quantile {q_v}"));
            let a = metrics(&test_means, q_r, &labels)?;
            data.push(Method::Robust, alpha, Some(*model), Some(k), q_r, None, Some(a));

            if let Some(eta) = config.eta {
                let each = eta / (2.0 * n as f64);
                let corrected_lower = obs_dists
                    .iter()
                    .map(|d| {
                        if model.is_trivial() {
                            let c = corrected_distribution(d, each, CorrectionFlavor::MeanBernstein)?;
                            Ok(c.mean_lo)
                        } else {
                            let c = corrected_distribution(d, each, CorrectionFlavor::CdfDkw)?;
                            Ok(c.bound(&observed, BoundKind::Cdf, Direction::Lower))
                        }
                    })
                    .collect::<Result<Vec<f64>, rcp_core::Error>>()?;
                let input = CorrectedPoisonInput {
                    mc_scores: obs_scores.clone(),
                    corrected_lower,
                    budget: k,
                    alpha_prime: alpha,
                    eta,
                    hoeffding_count: None,
                };
                let out = corrected_feature_poison_threshold(&input)?;
                let q_c = out.threshold.q_lower;
                data.check(q_c <= q_r, || format!("corrected threshold {q_c} above uncorrected {q_r}"));
                let spent = out.ledger.spent();
                data.check(spent <= eta * (1.0 + 1e-12), || format!("budget {spent} exceeds eta {eta}"));
                let a = metrics(&test_means, q_c, &labels)?;
                data.push(Method::RobustCorrected, alpha, Some(*model), Some(k), q_c, None, Some(a)).budget_spent =
                    Some(spent);
            }
        }
    }
    Ok(())
}

fn run_label_poisoning(data: &mut TrialData, budgets: &[usize]) -> Result<()> {
    let task = data.task;
    let (n, t) = (data.cal.len(), data.test.len());
    let cal_u = data.tie_breaks(Domain::Calibration, n);
    let test_u = data.tie_breaks(Domain::Test, t);
    let matrix: Vec<Vec<f64>> = (0..n).map(|i| task.scores(&data.cal.x[i], cal_u[i])).collect();
    let test_scores: Vec<Vec<f64>> = (0..t).map(|j| task.scores(&data.test.x[j], test_u[j])).collect();
    let labels = data.test.y.clone();
    for alpha in data.config.alphas() {
        let spec = QuantileSpec::new(alpha)?;
        for &k in budgets {
            let k = k.min(n);
            let poisoned = poison_labels(&data.cal, &matrix, k, alpha)?;
            let flips = poisoned.data.y.iter().zip(&data.cal.y).filter(|(a, b)| a != b).count();
            data.check(flips <= k, || format!("{flips} labels flipped with budget {k}"));
            let observed: Vec<f64> = (0..n).map(|i| matrix[i][poisoned.data.y[i]]).collect();
            let q_v = conformal_quantile(&observed, spec)?;
            let a = metrics(&test_scores, q_v, &labels)?;
            data.push(Method::Vanilla, alpha, None, Some(k), q_v, None, Some(a));

            let inst = LabelPoisonInstance::new(matrix.clone(), poisoned.data.y.clone(), k, alpha)?;
            let q_r = label_poison_threshold(&inst)?.q_lower;
            data.check(q_r <= q_v, || format!("robust threshold {q_r} above observed quantile {q_v}"));
            let a = metrics(&test_scores, q_r, &labels)?;
            data.push(Method::Robust, alpha, None, Some(k), q_r, None, Some(a));
        }
    }
    Ok(())
}

/// Seed of trial `index` under the experiment seed.
pub fn trial_seed(config: &ExperimentConfig, index: usize) -> u64 {
    RngStreams::new(config.seed).child(index as u64 + 1).seed()
}

/// Runs one trial. Errors are returned; `run_experiment` turns them into
/// failed trials.
pub fn run_trial(config: &ExperimentConfig, task: &SyntheticTask, index: usize) -> Result<TrialResult> {
    let seed = trial_seed(config, index);
    let streams = RngStreams::new(seed);
    let (cal, test) = task.draw_splits(streams.child(0));
    let mut data = TrialData {
        config,
        task,
        streams,
        grid: BinGrid::uniform(config.grid_edges)?,
        cal,
        test,
        violations: Vec::new(),
        records: Vec::new(),
    };
    match &config.study {
        Study::Evasion { radii } => run_evasion(&mut data, radii)?,
        Study::FeaturePoisoning { model, budgets } => run_feature_poisoning(&mut data, model, budgets)?,
        Study::LabelPoisoning { budgets } => run_label_poisoning(&mut data, budgets)?,
    }
    Ok(TrialResult {
        trial: index,
        seed,
        status: TrialStatus::Ok,
        records: data.records,
        violations: data.violations,
        runtime_ms: None,
    })
}

/// Runs every trial on `RCP_WORKERS` threads and aggregates. A trial that
/// errors is recorded as failed and left out of the aggregate.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let task = generate_task(&config.task, config.seed)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_count())
        .build()
        .map_err(|e| HarnessError::Config(format!("thread pool: {e}")))?;
    let trials: Vec<TrialResult> = pool.install(|| {
        (0..config.trials)
            .into_par_iter()
            .map(|i| {
                let start = Instant::now();
                let mut result = run_trial(config, &task, i).unwrap_or_else(|e| {
                    log::warn!("trial {i} failed: {e}");
                    TrialResult {
                        trial: i,
                        seed: trial_seed(config, i),
                        status: TrialStatus::Failed { message: e.to_string() },
                        records: Vec::new(),
                        violations: match e {
                            HarnessError::Invariant(m) => vec![m],
                            _ => Vec::new(),
                        },
                        runtime_ms: None,
                    }
                });
                if config.record_runtime {
                    result.runtime_ms = Some(start.elapsed().as_millis() as u64);
                }
                result
            })
            .collect()
    });
    Ok(aggregate(config.clone(), trials))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(study: Study) -> ExperimentConfig {
        let mut task = TaskSpec::gaussian_mixture(4, 3, 3.0, 1.0);
        task.n_cal = 30;
        task.n_test = 20;
        let mut cfg = ExperimentConfig::new(task, SmoothingScheme::Gaussian { sigma: 0.5 }, study);
        cfg.trials = 3;
        cfg.samples = 200;
        cfg.attack = AttackSettings { random_directions: 4, coordinate_rounds: 1, smooth_samples: 8 };
        cfg
    }

    #[test]
    fn evasion_trial_produces_every_method() {
        let mut cfg = small(Study::Evasion { radii: vec![ThreatModel::L2Ball { r: 0.0 }, ThreatModel::L2Ball { r: 0.25 }] });
        cfg.eta = Some(0.02);
        let task = generate_task(&cfg.task, cfg.seed).unwrap();
        let r = run_trial(&cfg, &task, 0).unwrap();
        assert!(r.violations.is_empty(), "{:?}", r.violations);
        assert_eq!(r.records.len(), 2 * 8);
        // at r = 0 every smoothed method collapses to the plain smoothed set
        let at_zero: Vec<_> = r.records.iter().filter(|m| m.model == Some(ThreatModel::L2Ball { r: 0.0 })).collect();
        let smooth = at_zero.iter().find(|m| m.method == Method::Smoothed).unwrap();
        for m in &at_zero {
            if matches!(m.method, Method::Rscp | Method::Cas | Method::RscpCalibration | Method::CasCalibration) {
                assert_eq!(m.clean, smooth.clean, "{:?}", m.method);
                assert_eq!(m.attacked, smooth.attacked);
            }
        }
    }

    #[test]
    fn poisoning_trials_run() {
        let cfg = small(Study::FeaturePoisoning { model: ThreatModel::L2Ball { r: 0.25 }, budgets: vec![0, 2] });
        let task = generate_task(&cfg.task, cfg.seed).unwrap();
        let r = run_trial(&cfg, &task, 1).unwrap();
        assert!(r.violations.is_empty(), "{:?}", r.violations);
        assert_eq!(r.records.len(), 4);
        let cfg = small(Study::LabelPoisoning { budgets: vec![0, 1, 2] });
        let r = run_trial(&cfg, &task, 1).unwrap();
        assert_eq!(r.records.len(), 6);
    }

    #[test]
    fn rejects_mismatched_scheme() {
        let mut cfg = small(Study::Evasion { radii: vec![ThreatModel::BinaryBall { r_a: 1, r_d: 1 }] });
        assert!(cfg.validate().is_err());
        cfg.study = Study::Evasion { radii: vec![] };
        cfg.scheme = SmoothingScheme::SparseFlip { p0: 0.1, p1: 0.1 };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn experiments_are_deterministic() {
        let cfg = small(Study::Evasion { radii: vec![ThreatModel::L2Ball { r: 0.25 }] });
        let a = run_experiment(&cfg).unwrap();
        let b = run_experiment(&cfg).unwrap();
        assert_eq!(a, b);
    }
}
