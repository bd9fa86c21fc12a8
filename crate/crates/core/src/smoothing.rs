//! Smoothing schemes and Monte-Carlo estimation of smoothed score
//! distributions.
//!
//! A smoothing scheme maps an input to a random nearby point: additive
//! isotropic Gaussian noise for continuous inputs, or independent bit flips
//! (zeros flip with `p0`, ones with `p1`) for binary inputs. Binary inputs are
//! carried as `f64` vectors whose entries are exactly `0.0` or `1.0`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{config, domain, Error, Result};
use crate::rng::StreamRng;

/// Default number of Monte-Carlo samples per estimate.
pub const DEFAULT_SAMPLES: usize = 10_000;

/// Default number of bin edges on `[0, 1]` (50 bins).
pub const DEFAULT_EDGES: usize = 51;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SmoothingScheme {
    Gaussian { sigma: f64 },
    SparseFlip { p0: f64, p1: f64 },
}

impl SmoothingScheme {
    pub fn validate(&self) -> Result<()> {
        match *self {
            SmoothingScheme::Gaussian { sigma } if !(sigma > 0.0 && sigma.is_finite()) => {
                Err(config(format!("gaussian sigma = {sigma} must be positive")))
            }
            SmoothingScheme::SparseFlip { p0, p1 }
                if !(0.0..1.0).contains(&p0) || !(0.0..1.0).contains(&p1) =>
            {
                Err(config(format!("flip probabilities ({p0}, {p1}) must lie in [0, 1)")))
            }
            _ => Ok(()),
        }
    }

    /// Writes one noisy copy of `x` into `out`.
    pub fn perturb_into(&self, x: &[f64], rng: &mut StreamRng, out: &mut [f64]) {
        match *self {
            SmoothingScheme::Gaussian { sigma } => {
                for (o, &xi) in out.iter_mut().zip(x) {
                    let z: f64 = rng.sample(StandardNormal);
                    *o = xi + sigma * z;
                }
            }
            SmoothingScheme::SparseFlip { p0, p1 } => {
                for (o, &xi) in out.iter_mut().zip(x) {
                    let u: f64 = rng.gen();
                    *o = if xi > 0.5 {
                        if u < p1 { 0.0 } else { 1.0 }
                    } else if u < p0 {
                        1.0
                    } else {
                        0.0
                    };
                }
            }
        }
    }
}

/// `x + delta` with `delta` i.i.d. `N(0, sigma^2)` per coordinate.
pub fn sample_gaussian(x: &[f64], sigma: f64, rng: &mut StreamRng) -> Result<Vec<f64>> {
    let scheme = SmoothingScheme::Gaussian { sigma };
    scheme.validate()?;
    let mut out = vec![0.0; x.len()];
    scheme.perturb_into(x, rng, &mut out);
    Ok(out)
}

/// Flips each zero with probability `p0` and each one with probability `p1`.
pub fn sample_sparse(x: &[f64], p0: f64, p1: f64, rng: &mut StreamRng) -> Result<Vec<f64>> {
    check_binary(x)?;
    let scheme = SmoothingScheme::SparseFlip { p0, p1 };
    scheme.validate()?;
    let mut out = vec![0.0; x.len()];
    scheme.perturb_into(x, rng, &mut out);
    Ok(out)
}

pub fn check_binary(x: &[f64]) -> Result<()> {
    match x.iter().position(|&v| v != 0.0 && v != 1.0) {
        Some(i) => Err(domain(format!("entry {i} = {} is not binary", x[i]))),
        None => Ok(()),
    }
}

/// Bin edges `0 = b_1 < b_2 <= ... <= b_{m-1} < b_m = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct BinGrid {
    edges: Vec<f64>,
}

impl BinGrid {
    pub fn new(edges: Vec<f64>) -> Result<Self> {
        let m = edges.len();
        if m < 3 {
            return Err(domain(format!("bin grid needs at least 3 edges, got {m}")));
        }
        if edges[0] != 0.0 || edges[m - 1] != 1.0 {
            return Err(domain("bin grid must start at 0 and end at 1"));
        }
        if edges.windows(2).any(|w| !(w[0] <= w[1])) {
            return Err(domain("bin edges must be nondecreasing"));
        }
        if !(edges[0] < edges[1] && edges[m - 2] < edges[m - 1]) {
            return Err(domain("first and last bins must have positive width"));
        }
        Ok(Self { edges })
    }

    /// `m` equally spaced edges on `[0, 1]`.
    pub fn uniform(m: usize) -> Result<Self> {
        if m < 3 {
            return Err(domain(format!("bin grid needs at least 3 edges, got {m}")));
        }
        let last = (m - 1) as f64;
        Self::new((0..m).map(|j| j as f64 / last).collect())
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Index of the first edge `>= s`.
    fn bucket(&self, s: f64) -> usize {
        self.edges.partition_point(|&b| b < s)
    }
}

impl Default for BinGrid {
    fn default() -> Self {
        Self::uniform(DEFAULT_EDGES).expect("default grid is valid")
    }
}

impl TryFrom<Vec<f64>> for BinGrid {
    type Error = Error;

    fn try_from(value: Vec<f64>) -> Result<Self> {
        Self::new(value)
    }
}

impl From<BinGrid> for Vec<f64> {
    fn from(value: BinGrid) -> Self {
        value.edges
    }
}

/// Empirical distribution of a smoothed score at one `(input, class)` pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreDistribution {
    sample_count: usize,
    mean: f64,
    variance: f64,
    grid: BinGrid,
    /// Fraction of samples `<= b_j` for the inner edges `j = 2..m-1`.
    inner_cdf: Vec<f64>,
}

impl ScoreDistribution {
    pub fn from_samples(samples: &[f64], grid: &BinGrid) -> Result<Self> {
        let mut acc = Accumulator::new(grid);
        for &s in samples {
            acc.push(s)?;
        }
        acc.finish()
    }

    /// Rebuilds a distribution from stored statistics, checking its invariants.
    pub fn from_parts(
        sample_count: usize,
        mean: f64,
        variance: f64,
        grid: BinGrid,
        inner_cdf: Vec<f64>,
    ) -> Result<Self> {
        if sample_count == 0 {
            return Err(domain("sample count must be at least 1"));
        }
        if !(0.0..=1.0).contains(&mean) {
            return Err(domain(format!("mean {mean} outside [0, 1]")));
        }
        if !(0.0..=0.25 + 1e-12).contains(&variance) {
            return Err(domain(format!("variance {variance} outside [0, 0.25]")));
        }
        if inner_cdf.len() + 2 != grid.len() {
            return Err(domain("cdf length does not match the bin grid"));
        }
        if inner_cdf.iter().any(|p| !(0.0..=1.0).contains(p))
            || inner_cdf.windows(2).any(|w| w[0] > w[1])
        {
            return Err(domain("cdf values must be nondecreasing in [0, 1]"));
        }
        Ok(Self { sample_count, mean, variance, grid, inner_cdf })
    }

    pub fn sample_count(&self) -> usize {
        self.sample_count
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Unbiased sample variance (zero for a single sample).
    pub fn variance(&self) -> f64 {
        self.variance
    }

    pub fn grid(&self) -> &BinGrid {
        &self.grid
    }

    pub fn inner_cdf(&self) -> &[f64] {
        &self.inner_cdf
    }

    /// Empirical CDF at edge `j` (zero-based), with `F(b_1) = 0`, `F(b_m) = 1`.
    pub fn cdf_at(&self, j: usize) -> f64 {
        let m = self.grid.len();
        match j {
            0 => 0.0,
            j if j + 1 >= m => 1.0,
            j => self.inner_cdf[j - 1],
        }
    }

    /// Mean bound that rounds each bin up to its right edge.
    pub fn anderson_upper(&self) -> f64 {
        anderson_upper(self.grid.edges(), &self.inner_cdf, |p| p)
    }

    /// Mean bound that rounds each bin down to its left edge.
    pub fn anderson_lower(&self) -> f64 {
        anderson_lower(self.grid.edges(), &self.inner_cdf, |p| p)
    }
}

/// `b_m - sum_{j=2}^{m-1} F(b_j) (b_{j+1} - b_j)` with `F = transform(cdf)`.
pub(crate) fn anderson_upper(edges: &[f64], cdf: &[f64], transform: impl Fn(f64) -> f64) -> f64 {
    let m = edges.len();
    let mut total = edges[m - 1];
    for (j, &p) in (1..m - 1).zip(cdf) {
        total -= transform(p) * (edges[j + 1] - edges[j]);
    }
    total.clamp(0.0, 1.0)
}

/// `b_{m-1} - sum_{j=2}^{m-1} F(b_j) (b_j - b_{j-1})` with `F = transform(cdf)`.
pub(crate) fn anderson_lower(edges: &[f64], cdf: &[f64], transform: impl Fn(f64) -> f64) -> f64 {
    let m = edges.len();
    let mut total = edges[m - 2];
    for (j, &p) in (1..m - 1).zip(cdf) {
        total -= transform(p) * (edges[j] - edges[j - 1]);
    }
    total.clamp(0.0, 1.0)
}

/// Streaming builder for a [`ScoreDistribution`].
#[derive(Debug, Clone)]
pub struct Accumulator {
    grid: BinGrid,
    buckets: Vec<u64>,
    count: u64,
    mean: f64,
    m2: f64,
}

impl Accumulator {
    pub fn new(grid: &BinGrid) -> Self {
        Self {
            grid: grid.clone(),
            buckets: vec![0; grid.len()],
            count: 0,
            mean: 0.0,
            m2: 0.0,
        }
    }

    pub fn push(&mut self, s: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&s) {
            return Err(Error::Contract(format!("score {s} outside [0, 1]")));
        }
        self.buckets[self.grid.bucket(s)] += 1;
        self.count += 1;
        let delta = s - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (s - self.mean);
        Ok(())
    }

    pub fn finish(self) -> Result<ScoreDistribution> {
        if self.count == 0 {
            return Err(domain("no samples"));
        }
        let n = self.count as f64;
        let m = self.grid.len();
        // A sample lies at or below edge j exactly when its bucket is <= j.
        let mut running = self.buckets[0];
        let mut inner_cdf = Vec::with_capacity(m - 2);
        for &b in &self.buckets[1..m - 1] {
            running += b;
            inner_cdf.push(running as f64 / n);
        }
        let variance = if self.count > 1 { self.m2 / (n - 1.0) } else { 0.0 };
        Ok(ScoreDistribution {
            sample_count: self.count as usize,
            mean: self.mean.clamp(0.0, 1.0),
            variance: variance.clamp(0.0, 0.25),
            grid: self.grid,
            inner_cdf,
        })
    }
}

/// Monte-Carlo estimate of the distribution of `oracle(xi(x))`.
///
/// The oracle also receives the stream, so randomized scores (APS) draw
/// their tie-break per noise sample.
pub fn estimate_distribution<F>(
    mut oracle: F,
    x: &[f64],
    scheme: &SmoothingScheme,
    samples: usize,
    grid: &BinGrid,
    rng: &mut StreamRng,
) -> Result<ScoreDistribution>
where
    F: FnMut(&[f64], &mut StreamRng) -> f64,
{
    scheme.validate()?;
    if samples < 2 {
        return Err(domain("at least two Monte-Carlo samples are required"));
    }
    if matches!(scheme, SmoothingScheme::SparseFlip { .. }) {
        check_binary(x)?;
    }
    let mut noisy = vec![0.0; x.len()];
    let mut acc = Accumulator::new(grid);
    for _ in 0..samples {
        scheme.perturb_into(x, rng, &mut noisy);
        acc.push(oracle(&noisy, rng))?;
    }
    acc.finish()
}

/// A black-box model producing conformity scores for every class at once.
pub trait ClassScorer: Sync {
    fn num_classes(&self) -> usize;

    /// Scores of all classes at `x`; `u` is the APS tie-break draw.
    fn score_all(&self, x: &[f64], u: f64, out: &mut [f64]);
}

/// Per-class distributions at `x`, sharing each noise sample (and its
/// tie-break draw) across classes.
pub fn estimate_class_distributions<S: ClassScorer + ?Sized>(
    scorer: &S,
    x: &[f64],
    scheme: &SmoothingScheme,
    samples: usize,
    grid: &BinGrid,
    rng: &mut StreamRng,
) -> Result<Vec<ScoreDistribution>> {
    scheme.validate()?;
    if samples < 2 {
        return Err(domain("at least two Monte-Carlo samples are required"));
    }
    if matches!(scheme, SmoothingScheme::SparseFlip { .. }) {
        check_binary(x)?;
    }
    let k = scorer.num_classes();
    let mut noisy = vec![0.0; x.len()];
    let mut scores = vec![0.0; k];
    let mut accs: Vec<_> = (0..k).map(|_| Accumulator::new(grid)).collect();
    for _ in 0..samples {
        scheme.perturb_into(x, rng, &mut noisy);
        let u: f64 = rng.gen();
        scorer.score_all(&noisy, u, &mut scores);
        for (acc, &s) in accs.iter_mut().zip(&scores) {
            acc.push(s)?;
        }
    }
    accs.into_iter().map(Accumulator::finish).collect()
}
