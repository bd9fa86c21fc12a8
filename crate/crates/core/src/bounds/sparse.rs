//! Worst-case bounds under sparse smoothing, via greedy solutions of the
//! region linear programs
//!
//! ```text
//! max / min  h . t~   subject to   h . t = p,  0 <= h <= 1.
//! ```

use super::regions::RegionTable;
use crate::smoothing::{anderson_lower, anderson_upper, ScoreDistribution};

/// Fills regions in the given order, spending `p` of `t`-mass. Regions
/// with `t_i = 0` are taken for free when `take_free` is set.
fn fill(regions: &RegionTable, order: impl Iterator<Item = usize>, p: f64, take_free: bool) -> f64 {
    let mut budget = p;
    let mut gain = 0.0;
    for i in order {
        let (cost, value) = (regions.t[i], regions.t_tilde[i]);
        if cost == 0.0 {
            if take_free {
                gain += value;
            }
            continue;
        }
        if budget <= 0.0 {
            continue;
        }
        if cost <= budget {
            gain += value;
            budget -= cost;
        } else {
            gain += value * (budget / cost);
            budget = 0.0;
        }
    }
    gain.clamp(0.0, 1.0)
}

fn free_mass(regions: &RegionTable) -> f64 {
    regions
        .t
        .iter()
        .zip(&regions.t_tilde)
        .filter(|(&t, _)| t == 0.0)
        .map(|(_, &tt)| tt)
        .sum()
}

/// Largest `h . t~` with `h . t = p`: spend the budget on the regions that
/// are cheapest under `x` relative to `x~`.
pub fn sparse_mean_upper(p: f64, regions: &RegionTable) -> f64 {
    if p <= 0.0 {
        return free_mass(regions).clamp(0.0, 1.0);
    }
    if p >= 1.0 {
        return 1.0;
    }
    fill(regions, regions.increasing_ratio_order().into_iter(), p, true)
}

/// Smallest `h . t~` with `h . t = p`.
pub fn sparse_mean_lower(p: f64, regions: &RegionTable) -> f64 {
    if p <= 0.0 {
        return 0.0;
    }
    if p >= 1.0 {
        return (1.0 - free_mass(regions)).clamp(0.0, 1.0);
    }
    fill(regions, regions.increasing_ratio_order().into_iter().rev(), p, false)
}

/// Upper bound from the binned CDF: every `F(b_j)` is replaced by its
/// smallest value at the shifted input, then recombined.
pub fn sparse_cdf_upper(dist: &ScoreDistribution, regions: &RegionTable) -> f64 {
    sparse_cdf_upper_raw(dist.grid().edges(), dist.inner_cdf(), regions)
}

pub fn sparse_cdf_lower(dist: &ScoreDistribution, regions: &RegionTable) -> f64 {
    sparse_cdf_lower_raw(dist.grid().edges(), dist.inner_cdf(), regions)
}

pub(crate) fn sparse_cdf_upper_raw(edges: &[f64], cdf: &[f64], regions: &RegionTable) -> f64 {
    anderson_upper(edges, cdf, |p| sparse_mean_lower(p, regions))
}

pub(crate) fn sparse_cdf_lower_raw(edges: &[f64], cdf: &[f64], regions: &RegionTable) -> f64 {
    anderson_lower(edges, cdf, |p| sparse_mean_upper(p, regions))
}
