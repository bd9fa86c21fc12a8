//! Conformal prediction sets with certified coverage under evasion and
//! calibration-set poisoning, built on randomized smoothing.

pub mod bounds;
pub mod conformal;
pub mod correction;
pub mod error;
pub mod evasion;
pub mod normal;
pub mod poisoning;
pub mod rng;
pub mod smoothing;

pub use conformal::{
    aps_score, conformal_quantile, coverage_distribution, evaluate, inverse_quantile,
    prediction_set, tps_score, CoverageDistribution, MetricsReport, PredictionSet, ProbVector,
    QuantileSpec, ScoreFunction,
};
pub use error::{Error, Result};
pub use rng::{Domain, RngStreams, StreamRng};
