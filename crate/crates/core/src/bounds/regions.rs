//! Regions of constant likelihood ratio for sparse (bit-flip) smoothing.
//!
//! Only the `r_a + r_d` positions where the clean input `x` and the shifted
//! input `x~` differ matter. Region `i` collects the noise outcomes in which
//! exactly `i` of those positions agree with `x~`; on it the density ratio
//! between smoothing at `x` and at `x~` is a constant `c_i`.

use serde::{Deserialize, Serialize};

use crate::error::{config, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionTable {
    r_a: u32,
    r_d: u32,
    p0: f64,
    p1: f64,
    /// Mass of each region under smoothing at `x`.
    pub t: Vec<f64>,
    /// Mass of each region under smoothing at `x~`.
    pub t_tilde: Vec<f64>,
    /// `ln c_i`; `-inf` where only `t_i = 0`, `+inf` where only `t~_i = 0`,
    /// zero for regions empty under both.
    pub log_ratio: Vec<f64>,
}

impl RegionTable {
    pub fn radii(&self) -> (u32, u32) {
        (self.r_a, self.r_d)
    }

    pub fn flip_probs(&self) -> (f64, f64) {
        (self.p0, self.p1)
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn ratios(&self) -> Vec<f64> {
        self.log_ratio.iter().map(|l| l.exp()).collect()
    }

    /// `c_i` from the closed form, defined only when both flip probabilities
    /// are positive.
    pub fn closed_form_ratio(&self, i: usize) -> Option<f64> {
        let (p0, p1) = (self.p0, self.p1);
        if p0 <= 0.0 || p1 <= 0.0 {
            return None;
        }
        let i = i as f64;
        let ln = (i - self.r_d as f64) * (p0.ln() - (1.0 - p1).ln())
            + (i - self.r_a as f64) * (p1.ln() - (1.0 - p0).ln());
        Some(ln.exp())
    }

    /// Region indices sorted by increasing likelihood ratio. The ratio is
    /// monotone in `i`, so the order only depends on the sign of
    /// `ln(p0 p1) - ln((1 - p0)(1 - p1))`.
    pub(crate) fn increasing_ratio_order(&self) -> Vec<usize> {
        let n = self.len();
        if self.p0 + self.p1 < 1.0 {
            (0..n).rev().collect()
        } else {
            (0..n).collect()
        }
    }
}

/// Ratio table for a ball allowing `r_a` added and `r_d` deleted bits.
pub fn build_region_table(r_a: u32, r_d: u32, p0: f64, p1: f64) -> Result<RegionTable> {
    if !(0.0..1.0).contains(&p0) || !(0.0..1.0).contains(&p1) {
        return Err(config(format!("flip probabilities ({p0}, {p1}) must lie in [0, 1)")));
    }
    let (ra, rd) = (r_a as usize, r_d as usize);
    let regions = ra + rd + 1;
    let lf = log_factorials(ra.max(rd));
    let ln_choose = |n: usize, k: usize| lf[n] - lf[k] - lf[n - k];
    let (l_p0, l_q0, l_p1, l_q1) = (p0.ln(), (1.0 - p0).ln(), p1.ln(), (1.0 - p1).ln());

    // Deleted positions (x = 1, x~ = 0): `a` of them show a one.
    // Added positions (x = 0, x~ = 1): `b` of them show a one.
    let del_x: Vec<f64> = (0..=rd).map(|a| ln_choose(rd, a) + xlny(a, l_q1) + xlny(rd - a, l_p1)).collect();
    let add_x: Vec<f64> = (0..=ra).map(|b| ln_choose(ra, b) + xlny(b, l_p0) + xlny(ra - b, l_q0)).collect();
    let del_xt: Vec<f64> = (0..=rd).map(|a| ln_choose(rd, a) + xlny(a, l_p0) + xlny(rd - a, l_q0)).collect();
    let add_xt: Vec<f64> = (0..=ra).map(|b| ln_choose(ra, b) + xlny(b, l_q1) + xlny(ra - b, l_p1)).collect();

    let mut terms_x = vec![Vec::new(); regions];
    let mut terms_xt = vec![Vec::new(); regions];
    for a in 0..=rd {
        for b in 0..=ra {
            let i = rd - a + b;
            terms_x[i].push(del_x[a] + add_x[b]);
            terms_xt[i].push(del_xt[a] + add_xt[b]);
        }
    }
    let log_t: Vec<f64> = terms_x.iter().map(|v| log_sum_exp(v)).collect();
    let log_tt: Vec<f64> = terms_xt.iter().map(|v| log_sum_exp(v)).collect();

    let log_ratio = log_t
        .iter()
        .zip(&log_tt)
        .map(|(&lt, &ltt)| {
            if lt.is_finite() && ltt.is_finite() {
                lt - ltt
            } else if lt.is_finite() {
                f64::INFINITY
            } else if ltt.is_finite() {
                f64::NEG_INFINITY
            } else {
                // Empty under both measures; it never affects a bound.
                0.0
            }
        })
        .collect();

    Ok(RegionTable {
        r_a,
        r_d,
        p0,
        p1,
        t: log_t.iter().map(|l| l.exp()).collect(),
        t_tilde: log_tt.iter().map(|l| l.exp()).collect(),
        log_ratio,
    })
}

/// `k ln y` with `0 * ln 0 = 0`.
fn xlny(k: usize, ln_y: f64) -> f64 {
    if k == 0 {
        0.0
    } else {
        k as f64 * ln_y
    }
}

fn log_factorials(n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n + 1);
    out.push(0.0);
    for k in 1..=n {
        out.push(libm::lgamma(k as f64 + 1.0));
    }
    out
}

/// `ln sum exp(v)` with Neumaier-compensated accumulation.
fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for &x in v {
        let term = (x - max).exp();
        let t = sum + term;
        if sum.abs() >= term.abs() {
            comp += (sum - t) + term;
        } else {
            comp += (term - t) + sum;
        }
        sum = t;
    }
    max + (sum + comp).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trivial_ball() {
        let t = build_region_table(0, 0, 0.3, 0.1).unwrap();
        assert_eq!(t.t, vec![1.0]);
        assert_eq!(t.t_tilde, vec![1.0]);
        assert_eq!(t.ratios(), vec![1.0]);
    }

    #[test]
    fn single_added_bit() {
        let t = build_region_table(1, 0, 0.2, 0.2).unwrap();
        let expected = [(0.8, 0.2, 4.0), (0.2, 0.8, 0.25)];
        for (i, &(ti, tti, ci)) in expected.iter().enumerate() {
            assert!((t.t[i] - ti).abs() < 1e-14);
            assert!((t.t_tilde[i] - tti).abs() < 1e-14);
            assert!((t.ratios()[i] - ci).abs() < 1e-13);
        }
    }

    #[test]
    fn closed_form_ratio_matches() {
        for &(ra, rd, p0, p1) in &[(3, 2, 0.01, 0.6), (4, 4, 0.2, 0.2), (0, 5, 0.3, 0.1), (2, 0, 0.7, 0.5)] {
            let t = build_region_table(ra, rd, p0, p1).unwrap();
            let sum: f64 = t.t.iter().sum();
            let sum_t: f64 = t.t_tilde.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12 && (sum_t - 1.0).abs() < 1e-12);
            for (i, c) in t.ratios().into_iter().enumerate() {
                let closed = t.closed_form_ratio(i).unwrap();
                assert!(((c - closed) / closed).abs() < 1e-10, "i {i}: {c} vs {closed}");
                assert!((t.t_tilde[i] - t.t[i] / c).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ratios_strictly_monotone_when_flips_are_small() {
        let t = build_region_table(3, 4, 0.01, 0.6).unwrap();
        let r = t.ratios();
        assert!(r.windows(2).all(|w| w[0] > w[1]));
        let order = t.increasing_ratio_order();
        assert!(order.windows(2).all(|w| r[w[0]] < r[w[1]]));
    }

    #[test]
    fn zero_flip_probability_gives_empty_regions() {
        let t = build_region_table(2, 1, 0.0, 0.5).unwrap();
        // Under x no zero ever turns on, so regions with an added bit showing
        // are unreachable.
        assert_eq!(t.t[2], 0.0);
        assert_eq!(t.t[3], 0.0);
        assert!(t.t_tilde[3] > 0.0);
        assert_eq!(t.log_ratio[3], f64::NEG_INFINITY);
    }

    #[test]
    fn large_radius_stays_finite() {
        let t = build_region_table(200, 150, 0.01, 0.6).unwrap();
        let sum: f64 = t.t.iter().sum();
        assert!((sum - 1.0).abs() < 1e-10);
        assert!(t.t.iter().all(|v| v.is_finite()));
    }
}
