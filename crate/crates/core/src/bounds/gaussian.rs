//! Closed-form worst-case bounds under Gaussian smoothing and an L2 ball.

use crate::normal;
use crate::smoothing::{anderson_lower, anderson_upper, ScoreDistribution};

/// `Phi(Phi^{-1}(p) + shift)`, exact at `p in {0, 1}` and `shift = 0`.
fn shifted(p: f64, shift: f64) -> f64 {
    let p = p.clamp(0.0, 1.0);
    if shift == 0.0 || p == 0.0 || p == 1.0 {
        return p;
    }
    normal::cdf(normal::quantile(p) + shift)
}

/// Largest smoothed mean reachable within radius `r` of an input whose
/// smoothed mean is `p`.
pub fn gaussian_mean_upper(p: f64, r: f64, sigma: f64) -> f64 {
    shifted(p, r / sigma)
}

pub fn gaussian_mean_lower(p: f64, r: f64, sigma: f64) -> f64 {
    shifted(p, -r / sigma)
}

/// Upper bound using every binned CDF value: each `p_j` is pushed down by
/// the worst-case shift before recombining.
pub fn gaussian_cdf_upper(dist: &ScoreDistribution, r: f64, sigma: f64) -> f64 {
    gaussian_cdf_upper_raw(dist.grid().edges(), dist.inner_cdf(), r, sigma)
}

pub fn gaussian_cdf_lower(dist: &ScoreDistribution, r: f64, sigma: f64) -> f64 {
    gaussian_cdf_lower_raw(dist.grid().edges(), dist.inner_cdf(), r, sigma)
}

pub(crate) fn gaussian_cdf_upper_raw(edges: &[f64], cdf: &[f64], r: f64, sigma: f64) -> f64 {
    let shift = r / sigma;
    anderson_upper(edges, cdf, |p| shifted(p, -shift))
}

pub(crate) fn gaussian_cdf_lower_raw(edges: &[f64], cdf: &[f64], r: f64, sigma: f64) -> f64 {
    let shift = r / sigma;
    anderson_lower(edges, cdf, |p| shifted(p, shift))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::smoothing::BinGrid;

    const PHI_1: f64 = 0.841_344_746_068_542_948_585;
    const PHI_HALF: f64 = 0.691_462_461_274_013_103_637;

    fn half_grid(p2: f64) -> ScoreDistribution {
        let grid = BinGrid::new(vec![0.0, 0.5, 1.0]).unwrap();
        ScoreDistribution::from_parts(100, 0.5, 0.1, grid, vec![p2]).unwrap()
    }

    #[test]
    fn mean_bounds() {
        assert_eq!(gaussian_mean_upper(0.37, 0.0, 0.25), 0.37);
        assert_eq!(gaussian_mean_lower(0.37, 0.0, 0.25), 0.37);
        assert!((gaussian_mean_upper(0.5, 0.25, 0.25) - PHI_1).abs() < 1e-15);
        assert!((gaussian_mean_lower(0.5, 0.25, 0.25) - (1.0 - PHI_1)).abs() < 1e-15);
        assert!((gaussian_mean_upper(0.5, 0.125, 0.25) - PHI_HALF).abs() < 1e-15);
        assert_eq!(gaussian_mean_upper(1.0, 3.0, 0.25), 1.0);
        assert_eq!(gaussian_mean_lower(0.0, 3.0, 0.25), 0.0);
        assert_eq!(gaussian_mean_upper(0.0, 3.0, 0.25), 0.0);
    }

    #[test]
    fn cdf_bounds_on_two_bins() {
        assert_eq!(gaussian_cdf_upper(&half_grid(1.0), 1.0, 1.0), 0.5);
        let up = gaussian_cdf_upper(&half_grid(0.5), 1.0, 1.0);
        assert!((up - 0.920_672_373_034_271_474).abs() < 1e-15);
        let lo = gaussian_cdf_lower(&half_grid(0.5), 1.0, 1.0);
        assert!((lo - 0.079_327_626_965_728_526).abs() < 1e-15);
        assert_eq!(gaussian_cdf_lower(&half_grid(0.5), 0.0, 1.0), 0.25);
        assert_eq!(gaussian_cdf_lower(&half_grid(0.0), 0.0, 1.0), 0.5);
    }

    #[test]
    fn zero_radius_cdf_bounds_are_anderson() {
        let samples: Vec<f64> = (0..200).map(|i| ((i * 37) % 101) as f64 / 100.0).collect();
        let d = ScoreDistribution::from_samples(&samples, &BinGrid::default()).unwrap();
        assert_eq!(gaussian_cdf_upper(&d, 0.0, 0.5), d.anderson_upper());
        assert_eq!(gaussian_cdf_lower(&d, 0.0, 0.5), d.anderson_lower());
    }

    #[test]
    fn quantile_shift_rephrasing() {
        for &p in &[0.05, 0.3, 0.5, 0.77, 0.95] {
            for &r in &[0.05, 0.125, 0.25] {
                let up = gaussian_mean_upper(p, r, 0.25);
                let lhs = normal::quantile(up) * 0.25;
                let rhs = normal::quantile(p) * 0.25 + r;
                assert!((lhs - rhs).abs() < 1e-12, "p {p} r {r}");
            }
        }
    }
}
