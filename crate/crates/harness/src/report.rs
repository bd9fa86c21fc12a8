//! Aggregation across trials and the results directory.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use rcp_core::bounds::ThreatModel;

use crate::experiment::{ExperimentConfig, Method, MethodRecord, Study, TrialResult, TrialStatus};
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, std })
    }
}

/// Mean and sample standard deviation over successful trials of one
/// method at one setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub method: Method,
    pub alpha: f64,
    pub model: Option<ThreatModel>,
    pub budget: Option<usize>,
    pub trials: usize,
    pub clean_coverage: Option<Summary>,
    pub clean_size: Option<Summary>,
    pub attacked_coverage: Option<Summary>,
    pub attacked_size: Option<Summary>,
    pub coverage_bound: Option<Summary>,
    pub threshold: Option<Summary>,
    pub budget_spent: Option<Summary>,
}

impl AggregateRow {
    /// Coverage of the attacked sets, or of the clean ones when the study has
    /// no attacked variant.
    pub fn robust_coverage(&self) -> Option<Summary> {
        self.attacked_coverage.or(self.clean_coverage)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub trials: Vec<TrialResult>,
    pub aggregate: Vec<AggregateRow>,
    /// Failed invariant checks, per trial and across trials.
    pub violations: Vec<String>,
    pub failed_trials: Vec<usize>,
}

impl ExperimentReport {
    pub fn row(&self, method: Method, alpha: f64, model: Option<ThreatModel>, budget: Option<usize>) -> Option<&AggregateRow> {
        self.aggregate
            .iter()
            .find(|r| r.method == method && r.alpha == alpha && r.model == model && r.budget == budget)
    }

    /// Records of one method and setting, one per successful trial.
    pub fn records(&self, method: Method, alpha: f64, model: Option<ThreatModel>, budget: Option<usize>) -> Vec<&MethodRecord> {
        self.trials
            .iter()
            .flat_map(|t| &t.records)
            .filter(|r| r.method == method && r.alpha == alpha && r.model == model && r.budget == budget)
            .collect()
    }
}

type Key = (Method, u64, Option<String>, Option<usize>);

fn key_of(r: &MethodRecord) -> Key {
    (r.method, r.alpha.to_bits(), r.model.map(|m| format!("{m:?}")), r.budget)
}

/// Groups records by method and setting (in order of first appearance) and
/// checks that certified methods keep coverage within three standard errors
/// of `1 - alpha`.
pub fn aggregate(config: ExperimentConfig, mut trials: Vec<TrialResult>) -> ExperimentReport {
    trials.sort_by_key(|t| t.trial);
    let mut order: Vec<Key> = Vec::new();
    let mut groups: HashMap<Key, Vec<&MethodRecord>> = HashMap::new();
    for t in trials.iter().filter(|t| t.status == TrialStatus::Ok) {
        for r in &t.records {
            let k = key_of(r);
            groups.entry(k.clone()).or_insert_with(|| {
                order.push(k.clone());
                Vec::new()
            });
            groups.get_mut(&k).expect("inserted").push(r);
        }
    }
    let mut violations: Vec<String> = trials
        .iter()
        .flat_map(|t| t.violations.iter().map(move |v| format!("trial {}: {v}", t.trial)))
        .collect();
    let failed_trials = trials.iter().filter(|t| t.status != TrialStatus::Ok).map(|t| t.trial).collect();

    let mut rows = Vec::new();
    for k in order {
        let recs = &groups[&k];
        let first = recs[0];
        let collect = |f: &dyn Fn(&MethodRecord) -> Option<f64>| -> Option<Summary> {
            let v: Vec<f64> = recs.iter().filter_map(|r| f(r)).collect();
            Summary::of(&v)
        };
        let row = AggregateRow {
            method: first.method,
            alpha: first.alpha,
            model: first.model,
            budget: first.budget,
            trials: recs.len(),
            clean_coverage: collect(&|r| r.clean.as_ref().map(|m| m.empirical_coverage)),
            clean_size: collect(&|r| r.clean.as_ref().map(|m| m.avg_set_size)),
            attacked_coverage: collect(&|r| r.attacked.as_ref().map(|m| m.empirical_coverage)),
            attacked_size: collect(&|r| r.attacked.as_ref().map(|m| m.avg_set_size)),
            coverage_bound: collect(&|r| r.coverage_bound),
            threshold: collect(&|r| r.threshold.is_finite().then_some(r.threshold)),
            budget_spent: collect(&|r| r.budget_spent),
        };
        if row.method.is_certified() && row.trials > 1 {
            if let Some(cov) = row.robust_coverage() {
                let slack = 3.0 * cov.std / (row.trials as f64).sqrt();
                if cov.mean < 1.0 - row.alpha - slack {
                    violations.push(format!(
                        "{} at alpha {} ({}): coverage {:.4} below {:.4}",
                        row.method.name(),
                        row.alpha,
                        setting_label(row.model, row.budget),
                        cov.mean,
                        1.0 - row.alpha - slack
                    ));
                }
            }
        }
        rows.push(row);
    }
    ExperimentReport { config, trials, aggregate: rows, violations, failed_trials }
}

/// Scalar radius used on plot axes: `r` for L2 balls, `r_a + r_d` for
/// binary ones.
pub fn radius_of(model: Option<ThreatModel>) -> f64 {
    match model {
        Some(ThreatModel::L2Ball { r }) => r,
        Some(ThreatModel::BinaryBall { r_a, r_d }) => f64::from(r_a + r_d),
        None => 0.0,
    }
}

fn setting_label(model: Option<ThreatModel>, budget: Option<usize>) -> String {
    let mut parts = Vec::new();
    match model {
        Some(ThreatModel::L2Ball { r }) => parts.push(format!("r={r}")),
        Some(ThreatModel::BinaryBall { r_a, r_d }) => parts.push(format!("r_a={r_a} r_d={r_d}")),
        None => {}
    }
    if let Some(k) = budget {
        parts.push(format!("k={k}"));
    }
    parts.join(" ")
}

fn fmt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x}"))
}

fn radii_cells(model: Option<ThreatModel>) -> [String; 3] {
    match model {
        Some(ThreatModel::L2Ball { r }) => [format!("{r}"), String::new(), String::new()],
        Some(ThreatModel::BinaryBall { r_a, r_d }) => [String::new(), r_a.to_string(), r_d.to_string()],
        None => [String::new(), String::new(), String::new()],
    }
}

/// Writes `bytes` to `path` through a temporary file in the same directory
/// and a rename, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

fn csv_bytes(header: &[&str], rows: Vec<Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.into_inner().map_err(|e| std::io::Error::other(e.to_string()).into())
}

pub const AGGREGATE_HEADER: [&str; 22] = [
    "method",
    "alpha",
    "r",
    "r_a",
    "r_d",
    "budget",
    "trials",
    "clean_coverage_mean",
    "clean_coverage_std",
    "clean_size_mean",
    "clean_size_std",
    "attacked_coverage_mean",
    "attacked_coverage_std",
    "attacked_size_mean",
    "attacked_size_std",
    "coverage_bound_mean",
    "coverage_bound_std",
    "threshold_mean",
    "threshold_std",
    "budget_spent_mean",
    "budget_spent_std",
    "failed_trials",
];

/// CSV encoding of the aggregate table.
pub fn aggregate_csv(report: &ExperimentReport) -> Result<Vec<u8>> {
    let failed = report.failed_trials.len().to_string();
    let rows = report
        .aggregate
        .iter()
        .map(|r| {
            let [rr, ra, rd] = radii_cells(r.model);
            let mut row = vec![
                r.method.name().to_string(),
                r.alpha.to_string(),
                rr,
                ra,
                rd,
                r.budget.map_or_else(String::new, |k| k.to_string()),
                r.trials.to_string(),
            ];
            for s in [r.clean_coverage, r.clean_size, r.attacked_coverage, r.attacked_size, r.coverage_bound, r.threshold, r.budget_spent] {
                row.push(fmt(s.map(|s| s.mean)));
                row.push(fmt(s.map(|s| s.std)));
            }
            row.push(failed.clone());
            row
        })
        .collect();
    csv_bytes(&AGGREGATE_HEADER, rows)
}

/// Plot tables: `(file name, bytes)`.
pub fn plot_tables(report: &ExperimentReport) -> Result<Vec<(String, Vec<u8>)>> {
    let alpha = report.config.alpha;
    let poisoning = !matches!(report.config.study, Study::Evasion { .. });
    let (axis, suffix) = if poisoning { ("budget", "k") } else { ("r", "r") };
    let primary: Vec<&AggregateRow> = report.aggregate.iter().filter(|r| r.alpha == alpha).collect();
    let x_of = |r: &AggregateRow| {
        if poisoning {
            r.budget.unwrap_or(0).to_string()
        } else {
            radius_of(r.model).to_string()
        }
    };
    let mean = |s: Option<Summary>| fmt(s.map(|s| s.mean));
    let std = |s: Option<Summary>| fmt(s.map(|s| s.std));

    let coverage = primary
        .iter()
        .map(|r| {
            vec![
                r.method.name().into(),
                x_of(r),
                mean(r.clean_coverage),
                std(r.clean_coverage),
                mean(r.attacked_coverage),
                std(r.attacked_coverage),
                mean(r.coverage_bound),
            ]
        })
        .collect();
    let size = primary
        .iter()
        .map(|r| {
            vec![
                r.method.name().into(),
                x_of(r),
                mean(r.clean_size),
                std(r.clean_size),
                mean(r.attacked_size),
                std(r.attacked_size),
            ]
        })
        .collect();
    let by_alpha = report
        .aggregate
        .iter()
        .map(|r| {
            vec![
                r.method.name().into(),
                x_of(r),
                r.alpha.to_string(),
                mean(r.clean_size),
                mean(r.attacked_size),
                mean(r.robust_coverage()),
            ]
        })
        .collect();
    Ok(vec![
        (
            format!("coverage_vs_{suffix}.csv"),
            csv_bytes(
                &["method", axis, "clean_coverage", "clean_coverage_std", "attacked_coverage", "attacked_coverage_std", "coverage_bound"],
                coverage,
            )?,
        ),
        (
            format!("size_vs_{suffix}.csv"),
            csv_bytes(&["method", axis, "clean_size", "clean_size_std", "attacked_size", "attacked_size_std"], size)?,
        ),
        (
            "size_vs_alpha.csv".to_string(),
            csv_bytes(&["method", axis, "alpha", "clean_size", "attacked_size", "coverage"], by_alpha)?,
        ),
    ])
}

/// Writes `trials.jsonl`, `aggregate.csv`, `plotdata/*.csv` and
/// `config.json` into `dir`.
pub fn write_results(report: &ExperimentReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("plotdata"))?;
    let mut jsonl = Vec::new();
    for t in &report.trials {
        serde_json::to_writer(&mut jsonl, t)?;
        jsonl.push(b'\n');
    }
    write_atomic(&dir.join("trials.jsonl"), &jsonl)?;
    write_atomic(&dir.join("aggregate.csv"), &aggregate_csv(report)?)?;
    for (name, bytes) in plot_tables(report)? {
        write_atomic(&dir.join("plotdata").join(name), &bytes)?;
    }
    let mut cfg = serde_json::to_vec_pretty(&report.config)?;
    cfg.push(b'\n');
    write_atomic(&dir.join("config.json"), &cfg)?;
    Ok(())
}
