//! Independent reference implementations used only by tests.
#![allow(dead_code)]

use minilp::{ComparisonOp, LinearExpr, OptimizationDirection, Problem};

/// Region masses by enumerating every flip pattern of the `r_a + r_d`
/// differing positions, multiplying per-position probabilities directly.
pub fn enumerate_regions(r_a: u32, r_d: u32, p0: f64, p1: f64) -> (Vec<f64>, Vec<f64>) {
    let d = (r_a + r_d) as usize;
    let mut t = vec![0.0; d + 1];
    let mut tt = vec![0.0; d + 1];
    for pattern in 0u32..(1 << d) {
        let (mut px, mut pxt, mut agree) = (1.0, 1.0, 0);
        for pos in 0..d {
            let one = pattern >> pos & 1 == 1;
            // the first r_d positions are ones in x and zeros in x~
            let (x_bit, xt_bit) = if pos < r_d as usize { (true, false) } else { (false, true) };
            let prob = |bit: bool| match (bit, one) {
                (true, true) => 1.0 - p1,
                (true, false) => p1,
                (false, true) => p0,
                (false, false) => 1.0 - p0,
            };
            px *= prob(x_bit);
            pxt *= prob(xt_bit);
            if one == xt_bit {
                agree += 1;
            }
        }
        t[agree] += px;
        tt[agree] += pxt;
    }
    (t, tt)
}

/// `max` (or `min`) of `h . tt` subject to `h . t = p`, `0 <= h <= 1`,
/// solved with a general simplex implementation.
pub fn simplex_lp(t: &[f64], tt: &[f64], p: f64, maximize: bool) -> f64 {
    let dir = if maximize { OptimizationDirection::Maximize } else { OptimizationDirection::Minimize };
    let mut problem = Problem::new(dir);
    let vars: Vec<_> = tt.iter().map(|&c| problem.add_var(c, (0.0, 1.0))).collect();
    let mut expr = LinearExpr::empty();
    for (&v, &c) in vars.iter().zip(t) {
        expr.add(v, c);
    }
    problem.add_constraint(expr, ComparisonOp::Eq, p);
    let solution = problem.solve().expect("feasible LP");
    vars.iter().zip(tt).map(|(&v, &c)| solution[v] * c).sum()
}

/// Same LP by enumerating its vertices: every basic solution has at most
/// one fractional coordinate.
pub fn vertex_lp(t: &[f64], tt: &[f64], p: f64, maximize: bool) -> f64 {
    let n = t.len();
    let mut best: Option<f64> = None;
    let mut consider = |v: f64| {
        best = Some(match best {
            None => v,
            Some(b) if maximize => b.max(v),
            Some(b) => b.min(v),
        })
    };
    for mask in 0u32..(1 << n) {
        let on = |i: usize| mask >> i & 1 == 1;
        let cost: f64 = (0..n).filter(|&i| on(i)).map(|i| t[i]).sum();
        let value: f64 = (0..n).filter(|&i| on(i)).map(|i| tt[i]).sum();
        if (cost - p).abs() <= 1e-13 {
            consider(value);
        }
        for f in (0..n).filter(|&i| !on(i) && t[i] > 0.0) {
            let h = (p - cost) / t[f];
            if (0.0..=1.0).contains(&h) {
                consider(value + h * tt[f]);
            }
        }
    }
    best.expect("LP is feasible for p in [0, 1]")
}

/// `k`-th smallest with `k` one-based, minus infinity for `k = 0`.
pub fn kth(values: &[f64], k: usize) -> f64 {
    if k == 0 {
        return f64::NEG_INFINITY;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[k - 1]
}

/// `floor(alpha (n + 1))` computed in exact rational arithmetic for
/// alphas given as `num / den`.
pub fn rank_exact(n: usize, num: usize, den: usize) -> usize {
    (num * (n + 1) / den).min(n)
}

/// Every subset of at most `k` points, each moved to its lower value.
pub fn subset_search(s: &[f64], l: &[f64], k: usize, rank: usize) -> f64 {
    let n = s.len();
    let mut best = f64::INFINITY;
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize > k {
            continue;
        }
        let z: Vec<f64> = (0..n).map(|i| if mask >> i & 1 == 1 { l[i] } else { s[i] }).collect();
        best = best.min(kth(&z, rank));
    }
    best
}

/// Every assignment of labels with at most `k` differing from the truth.
pub fn label_search(matrix: &[Vec<f64>], labels: &[usize], k: usize, rank: usize) -> f64 {
    let n = matrix.len();
    let c = matrix[0].len();
    let mut best = f64::INFINITY;
    let mut assignment = vec![0usize; n];
    for code in 0..c.pow(n as u32) {
        let mut rest = code;
        for a in assignment.iter_mut() {
            *a = rest % c;
            rest /= c;
        }
        if assignment.iter().zip(labels).filter(|(a, y)| a != y).count() > k {
            continue;
        }
        let z: Vec<f64> = assignment.iter().enumerate().map(|(i, &a)| matrix[i][a]).collect();
        best = best.min(kth(&z, rank));
    }
    best
}

/// Standard normal CDF from the Maclaurin series of erf, summed until the
/// terms vanish. Accurate to a few ulps for `|x| <= 3`.
pub fn phi_series(x: f64) -> f64 {
    let z = x / std::f64::consts::SQRT_2;
    let (mut term, mut sum, mut n) = (z, 0.0f64, 0u32);
    while term.abs() > 1e-300 {
        let add = term / f64::from(2 * n + 1);
        if add.abs() < 1e-20 * sum.abs() {
            break;
        }
        sum += add;
        n += 1;
        term *= -z * z / f64::from(n);
    }
    0.5 + sum / std::f64::consts::PI.sqrt()
}
