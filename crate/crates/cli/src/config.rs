//! Flat key-value run configuration (TOML syntax, no tables) with
//! command-line overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};

use rcp_core::bounds::{BoundKind, ThreatModel};
use rcp_core::correction::ConfidenceBudget;
use rcp_core::evasion::{EvasionConfig, EvasionMode};
use rcp_core::smoothing::{BinGrid, SmoothingScheme};
use rcp_core::{QuantileSpec, ScoreFunction};
use rcp_harness::{AttackSettings, ExperimentConfig, Study, TaskSpec};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    GaussianMixture,
    BinaryLinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SmoothingKind {
    Gaussian,
    Sparse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThreatKind {
    L2,
    Binary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StudyKind {
    Evasion,
    FeaturePoisoning,
    LabelPoisoning,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub task: TaskKind,
    pub dim: usize,
    pub classes: usize,
    pub separation: f64,
    pub noise: f64,
    pub active: usize,
    pub on_prob: f64,
    pub off_prob: f64,
    pub temperature: f64,
    pub n_cal: usize,
    pub n_test: usize,
    pub score: ScoreFunction,

    pub smoothing: SmoothingKind,
    pub sigma: f64,
    pub p0: f64,
    pub p1: f64,
    pub samples: usize,
    pub grid_edges: usize,

    /// Derived from `smoothing` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threat: Option<ThreatKind>,
    pub radius: f64,
    /// L2 radii swept by `simulate`; empty means `[radius]`.
    pub radii: Vec<f64>,
    pub r_a: u32,
    pub r_d: u32,

    pub alpha: f64,
    pub alphas: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    pub bound: BoundKind,
    /// Calibration-time when `eta` is set, test-time otherwise.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<EvasionMode>,

    pub study: StudyKind,
    /// Poisoning budget for `certify-poisoning`.
    pub budget: usize,
    /// Poisoning budgets swept by `simulate`.
    pub budgets: Vec<usize>,

    pub trials: usize,
    pub seed: u64,
    pub attack_directions: usize,
    pub attack_rounds: usize,
    pub attack_samples: usize,
    pub record_runtime: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let attack = AttackSettings::default();
        Self {
            task: TaskKind::GaussianMixture,
            dim: 8,
            classes: 4,
            separation: 3.0,
            noise: 1.0,
            active: 8,
            on_prob: 0.7,
            off_prob: 0.05,
            temperature: 1.0,
            n_cal: 100,
            n_test: 100,
            score: ScoreFunction::Tps,
            smoothing: SmoothingKind::Gaussian,
            sigma: 0.25,
            p0: 0.01,
            p1: 0.6,
            samples: rcp_core::smoothing::DEFAULT_SAMPLES,
            grid_edges: rcp_core::smoothing::DEFAULT_EDGES,
            threat: None,
            radius: 0.125,
            radii: Vec::new(),
            r_a: 1,
            r_d: 1,
            alpha: 0.1,
            alphas: Vec::new(),
            eta: None,
            bound: BoundKind::Cdf,
            mode: None,
            study: StudyKind::Evasion,
            budget: 0,
            budgets: vec![0, 1, 2],
            trials: 100,
            seed: 0,
            attack_directions: attack.random_directions,
            attack_rounds: attack.coordinate_rounds,
            attack_samples: attack.smooth_samples,
            record_runtime: false,
        }
    }
}

/// Parses the right-hand side of `--set key=value` as a TOML value, falling
/// back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

impl RunConfig {
    /// Reads `path` (if any), applies `key=value` overrides in order, and
    /// validates the result.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?;
                toml::from_str::<toml::Table>(&text)
                    .map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        if let Some((k, _)) = table.iter().find(|(_, v)| v.is_table()) {
            return Err(CliError::Config(format!("nested table `{k}`: the configuration is flat")));
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("override `{o}` is not key=value")))?;
            table.insert(k.trim().to_string(), parse_value(v.trim()));
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string().trim().to_string()))?;
        let mut cfg = cfg;
        cfg.threat = Some(cfg.threat_kind());
        cfg.mode = Some(cfg.evasion_mode());
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    pub fn scheme(&self) -> SmoothingScheme {
        match self.smoothing {
            SmoothingKind::Gaussian => SmoothingScheme::Gaussian { sigma: self.sigma },
            SmoothingKind::Sparse => SmoothingScheme::SparseFlip { p0: self.p0, p1: self.p1 },
        }
    }

    pub fn threat_kind(&self) -> ThreatKind {
        self.threat.unwrap_or(match self.smoothing {
            SmoothingKind::Gaussian => ThreatKind::L2,
            SmoothingKind::Sparse => ThreatKind::Binary,
        })
    }

    pub fn threat_model(&self) -> ThreatModel {
        match self.threat_kind() {
            ThreatKind::L2 => ThreatModel::L2Ball { r: self.radius },
            ThreatKind::Binary => ThreatModel::BinaryBall { r_a: self.r_a, r_d: self.r_d },
        }
    }

    pub fn evasion_mode(&self) -> EvasionMode {
        self.mode.unwrap_or(if self.eta.is_some() { EvasionMode::CalibrationTime } else { EvasionMode::TestTime })
    }

    pub fn grid(&self) -> Result<BinGrid> {
        Ok(BinGrid::uniform(self.grid_edges)?)
    }

    pub fn budget_eta(&self) -> Result<Option<ConfidenceBudget>> {
        Ok(self.eta.map(ConfidenceBudget::new).transpose()?)
    }

    pub fn evasion_config(&self) -> Result<EvasionConfig> {
        let mut cfg = EvasionConfig::new(self.scheme(), self.threat_model(), self.bound);
        if let Some(b) = self.budget_eta()? {
            cfg = cfg.with_correction(b);
        }
        Ok(cfg.with_mode(self.evasion_mode()))
    }

    /// Every failure here is a configuration error.
    pub fn validate(&self) -> Result<()> {
        self.check().map_err(|e| match e {
            CliError::Input(m) | CliError::Invariant(m) => CliError::Config(m),
            c => c,
        })
    }

    fn check(&self) -> Result<()> {
        let conflict = |m: String| Err(CliError::Config(m));
        for a in std::iter::once(self.alpha).chain(self.alphas.iter().copied()) {
            QuantileSpec::new(a)?;
            if let Some(eta) = self.eta {
                if eta >= a {
                    return conflict(format!("eta = {eta} must be below alpha = {a}"));
                }
            }
        }
        self.budget_eta()?;
        self.scheme().validate()?;
        self.threat_model().check_compatible(&self.scheme())?;
        for &r in &self.radii {
            ThreatModel::L2Ball { r }.validate()?;
        }
        self.grid()?;
        if self.samples < 2 {
            return conflict("samples must be at least 2".into());
        }
        let binary_task = self.task == TaskKind::BinaryLinear;
        if self.study != StudyKind::LabelPoisoning && binary_task != (self.smoothing == SmoothingKind::Sparse) {
            return conflict(format!("task {:?} cannot be smoothed with {:?}", self.task, self.smoothing));
        }
        Ok(())
    }

    pub fn task_spec(&self) -> TaskSpec {
        let mut spec = match self.task {
            TaskKind::GaussianMixture => TaskSpec::gaussian_mixture(self.dim, self.classes, self.separation, self.noise),
            TaskKind::BinaryLinear => {
                TaskSpec::binary_linear(self.dim, self.classes, self.active, self.on_prob, self.off_prob)
            }
        };
        spec.n_cal = self.n_cal;
        spec.n_test = self.n_test;
        spec.score = self.score;
        spec.temperature = self.temperature;
        spec
    }

    pub fn experiment(&self) -> ExperimentConfig {
        let study = match self.study {
            StudyKind::Evasion => Study::Evasion {
                radii: match self.threat_kind() {
                    ThreatKind::L2 if !self.radii.is_empty() => {
                        self.radii.iter().map(|&r| ThreatModel::L2Ball { r }).collect()
                    }
                    _ => vec![self.threat_model()],
                },
            },
            StudyKind::FeaturePoisoning => {
                Study::FeaturePoisoning { model: self.threat_model(), budgets: self.budgets.clone() }
            }
            StudyKind::LabelPoisoning => Study::LabelPoisoning { budgets: self.budgets.clone() },
        };
        let mut cfg = ExperimentConfig::new(self.task_spec(), self.scheme(), study);
        cfg.alpha = self.alpha;
        cfg.extra_alphas = self.alphas.clone();
        cfg.trials = self.trials;
        cfg.seed = self.seed;
        cfg.samples = self.samples;
        cfg.grid_edges = self.grid_edges;
        cfg.eta = self.eta;
        cfg.attack = AttackSettings {
            random_directions: self.attack_directions,
            coordinate_rounds: self.attack_rounds,
            smooth_samples: self.attack_samples,
        };
        cfg.record_runtime = self.record_runtime;
        cfg
    }
}
