//! The five subcommands. Each reads its inputs, runs the core or harness
//! routine, and writes its outputs atomically together with the resolved
//! configuration.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use rcp_core::correction::BudgetLedger;
use rcp_core::evasion::{smooth_set, vanilla_worst_case_coverage, CalibrationTable, CertifiedPredictor};
use rcp_core::poisoning::{
    brute_force_feature_oracle, brute_force_label_oracle, feature_poison_attack, feature_poison_threshold,
    label_poison_attack, label_poison_threshold, ConservativeThreshold, LabelPoisonInstance, PoisonInstance,
};
use rcp_core::smoothing::{BinGrid, ScoreDistribution};
use rcp_core::{conformal_quantile, evaluate, Domain, MetricsReport, PredictionSet, QuantileSpec, RngStreams};
use rcp_harness::report::write_atomic;
use rcp_harness::{run_experiment, write_results, ExperimentReport};

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::formats::{read_labels, Artifact, PoisonFile, ScoreTensor};

/// Where the resolved configuration of a file output goes:
/// `out/cal.json` gets `out/cal.config.toml`.
pub fn config_path_for(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}.config.toml"))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    Ok(write_atomic(path, bytes)?)
}

fn distributions(tensor: &ScoreTensor, point: usize, grid: &BinGrid) -> Result<Vec<ScoreDistribution>> {
    (0..tensor.classes)
        .map(|c| Ok(ScoreDistribution::from_samples(tensor.samples_of(point, c), grid)?))
        .collect()
}

fn check_labels(labels: &[usize], tensor: &ScoreTensor) -> Result<()> {
    if labels.len() != tensor.points {
        return Err(CliError::Input(format!("{} labels for {} scored points", labels.len(), tensor.points)));
    }
    if let Some(l) = labels.iter().find(|&&l| l >= tensor.classes) {
        return Err(CliError::Input(format!("label {l} out of range for {} classes", tensor.classes)));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationArtifact {
    pub config: RunConfig,
    pub classes: usize,
    pub grid: BinGrid,
    pub predictor: CertifiedPredictor,
    /// Worst-case coverage of the non-robust sets under the threat model.
    pub worst_case_coverage: f64,
    pub table: CalibrationTable,
}

impl Artifact for CalibrationArtifact {
    const SCHEMA: &'static str = "rcp.calibration";
    const VERSION: u32 = 1;
}

pub fn calibrate(cfg: &RunConfig, scores: &Path, labels: &Path, out: &Path) -> Result<CalibrationArtifact> {
    let tensor = ScoreTensor::read(scores)?;
    let labels = read_labels(labels)?;
    check_labels(&labels, &tensor)?;
    if tensor.points == 0 {
        return Err(CliError::Input(format!("{}: calibration set is empty", scores.display())));
    }
    let grid = cfg.grid()?;
    let ev = cfg.evasion_config()?;
    let cal: Vec<ScoreDistribution> = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| Ok(ScoreDistribution::from_samples(tensor.samples_of(i, y), &grid)?))
        .collect::<Result<_>>()?;
    let (predictor, table) = CertifiedPredictor::calibrate(&cal, cfg.alpha, &ev)?;
    let worst_case_coverage = vanilla_worst_case_coverage(&table, predictor.clean_threshold)?;
    let artifact =
        CalibrationArtifact { config: cfg.clone(), classes: tensor.classes, grid, predictor, worst_case_coverage, table };
    write(out, &artifact.to_json()?)?;
    write(&config_path_for(out), cfg.to_toml().as_bytes())?;
    Ok(artifact)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictReport {
    pub points: usize,
    pub classes: usize,
    #[serde(with = "rcp_core::conformal::threshold_serde")]
    pub threshold: f64,
    #[serde(with = "rcp_core::conformal::threshold_serde")]
    pub clean_threshold: f64,
    /// Present when labels were supplied.
    pub metrics: Option<MetricsReport>,
    pub vanilla_metrics: Option<MetricsReport>,
    /// Failure-budget split behind each prediction when corrected.
    pub ledger: Option<BudgetLedger>,
}

impl Artifact for PredictReport {
    const SCHEMA: &'static str = "rcp.predict-report";
    const VERSION: u32 = 1;
}

pub const SETS_CSV_HEADER: [&str; 3] = ["point_id", "members", "vanilla_members"];

/// Class ids joined by single spaces; an empty set is an empty field.
pub fn format_members(set: &PredictionSet) -> String {
    set.members.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
}

pub fn parse_members(field: &str) -> Result<Vec<usize>> {
    field
        .split_whitespace()
        .map(|t| t.parse().map_err(|e| CliError::Input(format!("member `{t}`: {e}"))))
        .collect()
}

pub fn predict(calibration: &Path, scores: &Path, labels: Option<&Path>, out: &Path) -> Result<PredictReport> {
    let art = CalibrationArtifact::read(calibration)?;
    let tensor = ScoreTensor::read(scores)?;
    if tensor.points > 0 && tensor.classes != art.classes {
        return Err(CliError::Input(format!(
            "test scores have {} classes, calibration has {}",
            tensor.classes, art.classes
        )));
    }
    let labels = labels.map(read_labels).transpose()?;
    if let Some(l) = &labels {
        check_labels(l, &tensor)?;
    }

    let mut robust = Vec::with_capacity(tensor.points);
    let mut vanilla = Vec::with_capacity(tensor.points);
    for i in 0..tensor.points {
        let dists = distributions(&tensor, i, &art.grid)?;
        let set = art.predictor.predict(&dists)?;
        let plain = smooth_set(&dists, art.predictor.clean_threshold);
        if !plain.is_subset(&set) {
            return Err(CliError::Invariant(format!("point {i}: vanilla set is not contained in the robust set")));
        }
        robust.push(set);
        vanilla.push(plain);
    }

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(SETS_CSV_HEADER)?;
    for (i, (r, v)) in robust.iter().zip(&vanilla).enumerate() {
        w.write_record([i.to_string(), format_members(r), format_members(v)])?;
    }
    let sets_csv = w.into_inner().map_err(|e| CliError::Input(e.to_string()))?;

    let classes = if tensor.points > 0 { tensor.classes } else { art.classes };
    let report = PredictReport {
        points: tensor.points,
        classes,
        threshold: art.predictor.threshold,
        clean_threshold: art.predictor.clean_threshold,
        metrics: labels.as_deref().map(|l| evaluate(&robust, l)).transpose()?,
        vanilla_metrics: labels.as_deref().map(|l| evaluate(&vanilla, l)).transpose()?,
        ledger: art.predictor.budget_ledger(classes)?,
    };
    std::fs::create_dir_all(out)?;
    write(&out.join("sets.csv"), &sets_csv)?;
    write(&out.join("report.json"), &report.to_json()?)?;
    write(&out.join("config.toml"), art.config.to_toml().as_bytes())?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoisonKind {
    Feature,
    Label,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleCheck {
    #[serde(with = "rcp_core::conformal::threshold_serde")]
    pub value: f64,
    pub agrees: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoisonCertificate {
    pub kind: PoisonKind,
    pub points: usize,
    pub budget: usize,
    pub alpha: f64,
    /// Quantile of the observed scores, the threshold with no poisoning.
    #[serde(with = "rcp_core::conformal::threshold_serde")]
    pub observed_quantile: f64,
    /// Conservative threshold with the modification that attains it.
    pub certified: ConservativeThreshold,
    /// Threshold recomputed after applying the witness.
    #[serde(with = "rcp_core::conformal::threshold_serde")]
    pub replayed: f64,
    pub replay_ok: bool,
    /// Largest threshold an attacker with the same budget can force.
    pub attack: ConservativeThreshold,
    pub oracle: Option<OracleCheck>,
}

impl Artifact for PoisonCertificate {
    const SCHEMA: &'static str = "rcp.poison-certificate";
    const VERSION: u32 = 1;
}

/// Solves a poisoning instance; the certificate is written even when the
/// replay or oracle check fails, and the failure is returned afterwards.
pub fn certify_poisoning(cfg: &RunConfig, instance: &Path, out: &Path, oracle: bool) -> Result<PoisonCertificate> {
    let file = PoisonFile::read(instance)?;
    let spec = QuantileSpec::new(cfg.alpha)?;
    let (kind, observed, certified, attack, oracle_value) = match file {
        PoisonFile::Feature { scores, lower, upper } => {
            let inst = PoisonInstance::new(scores, lower, upper, cfg.budget, cfg.alpha)?;
            let oracle_value = oracle.then(|| brute_force_feature_oracle(&inst)).transpose()?;
            (PoisonKind::Feature, inst.scores.clone(), feature_poison_threshold(&inst)?, feature_poison_attack(&inst)?, oracle_value)
        }
        PoisonFile::Label { labels, matrix } => {
            let inst = LabelPoisonInstance::new(matrix, labels, cfg.budget, cfg.alpha)?;
            let oracle_value = oracle.then(|| brute_force_label_oracle(&inst)).transpose()?;
            (PoisonKind::Label, inst.true_scores(), label_poison_threshold(&inst)?, label_poison_attack(&inst)?, oracle_value)
        }
    };
    let replayed = certified.replay(&observed, spec);
    let cert = PoisonCertificate {
        kind,
        points: observed.len(),
        budget: cfg.budget,
        alpha: cfg.alpha,
        observed_quantile: conformal_quantile(&observed, spec)?,
        replay_ok: replayed == certified.q_lower,
        replayed,
        oracle: oracle_value.map(|value| OracleCheck { value, agrees: value == certified.q_lower }),
        certified,
        attack,
    };
    write(out, &cert.to_json()?)?;
    write(&config_path_for(out), cfg.to_toml().as_bytes())?;
    if !cert.replay_ok {
        return Err(CliError::Invariant(format!(
            "witness replays to {} instead of {}",
            cert.replayed, cert.certified.q_lower
        )));
    }
    if let Some(o) = cert.oracle.as_ref().filter(|o| !o.agrees) {
        return Err(CliError::Invariant(format!(
            "solver threshold {} differs from exhaustive search {}",
            cert.certified.q_lower, o.value
        )));
    }
    Ok(cert)
}

/// Runs the configured study and writes the results directory. Invariant
/// violations are reported after everything is on disk.
pub fn simulate(cfg: &RunConfig, out: &Path) -> Result<ExperimentReport> {
    let report = run_experiment(&cfg.experiment())?;
    write_results(&report, out)?;
    write(&out.join("config.toml"), cfg.to_toml().as_bytes())?;
    if !report.violations.is_empty() {
        for v in &report.violations {
            log::error!("{v}");
        }
        return Err(CliError::Invariant(format!(
            "{} invariant violation(s), first: {}",
            report.violations.len(),
            report.violations[0]
        )));
    }
    if !report.failed_trials.is_empty() {
        return Err(CliError::Invariant(format!("{} trial(s) failed", report.failed_trials.len())));
    }
    Ok(report)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OracleTally {
    pub instances: usize,
    pub mismatches: usize,
    /// Up to ten disagreeing instances, for debugging.
    pub examples: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub seed: u64,
    pub feature: OracleTally,
    pub label: OracleTally,
}

impl Artifact for OracleReport {
    const SCHEMA: &'static str = "rcp.oracle-check";
    const VERSION: u32 = 1;
}

/// Scores on a coarse grid so that ties are common.
fn grid_value<R: Rng>(rng: &mut R) -> f64 {
    rng.gen_range(0..=16) as f64 / 16.0
}

fn tally(t: &mut OracleTally, solver: f64, oracle: f64, describe: impl FnOnce() -> String) {
    t.instances += 1;
    if solver != oracle {
        t.mismatches += 1;
        if t.examples.len() < 10 {
            t.examples.push(format!("{} (solver {solver}, oracle {oracle})", describe()));
        }
    }
}

/// Random instances with at most 8 points, budget 3 and 4 classes, solved
/// both ways. `alpha` is drawn per instance.
pub fn oracle_check(seed: u64, instances: usize, out: Option<&Path>) -> Result<OracleReport> {
    let streams = RngStreams::new(seed);
    let mut report = OracleReport { seed, feature: OracleTally::default(), label: OracleTally::default() };
    for i in 0..instances as u64 {
        let mut rng = streams.stream(Domain::Custom(1), i, 0);
        let n = rng.gen_range(1..=8);
        let k = rng.gen_range(0..=n.min(3));
        let alpha = rng.gen_range(0.05..0.95);
        let scores: Vec<f64> = (0..n).map(|_| grid_value(&mut rng)).collect();
        let lower = scores.iter().map(|&s| s * grid_value(&mut rng)).collect();
        let upper = scores.iter().map(|&s| s + (1.0 - s) * grid_value(&mut rng)).collect();
        let inst = PoisonInstance::new(scores, lower, upper, k, alpha)?;
        let solver = feature_poison_threshold(&inst)?.q_lower;
        tally(&mut report.feature, solver, brute_force_feature_oracle(&inst)?, || format!("{inst:?}"));

        let mut rng = streams.stream(Domain::Custom(2), i, 0);
        let n = rng.gen_range(1..=8);
        let classes = rng.gen_range(2..=4);
        let k = rng.gen_range(0..=n.min(3));
        let alpha = rng.gen_range(0.05..0.95);
        let matrix = (0..n).map(|_| (0..classes).map(|_| grid_value(&mut rng)).collect()).collect();
        let labels = (0..n).map(|_| rng.gen_range(0..classes)).collect();
        let inst = LabelPoisonInstance::new(matrix, labels, k, alpha)?;
        let solver = label_poison_threshold(&inst)?.q_lower;
        tally(&mut report.label, solver, brute_force_label_oracle(&inst)?, || format!("{inst:?}"));
    }
    if let Some(out) = out {
        write(out, &report.to_json()?)?;
    }
    let bad = report.feature.mismatches + report.label.mismatches;
    if bad > 0 {
        return Err(CliError::Invariant(format!("{bad} instance(s) disagree with exhaustive search")));
    }
    Ok(report)
}
