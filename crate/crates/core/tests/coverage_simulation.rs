use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rcp_core::{conformal_quantile, coverage_distribution, CoverageDistribution, QuantileSpec};

/// Coverage of a fresh uniform score, averaged over resampled calibration
/// sets, against the Beta mean.
#[test]
fn empirical_coverage_matches_beta_mean() {
    let spec = QuantileSpec::new(0.1).unwrap();
    let n = 100;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let trials = 10_000;
    let mut total = 0.0;
    for _ in 0..trials {
        let cal: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
        let q = conformal_quantile(&cal, spec).unwrap();
        // P(U >= q) for U uniform on [0, 1]
        total += 1.0 - q;
    }
    let mean = total / trials as f64;
    let law = coverage_distribution(n, spec).unwrap();
    assert!(matches!(law, CoverageDistribution::Beta { .. }));
    let beta_mean = law.mean();
    assert!((beta_mean - 91.0 / 101.0).abs() < 1e-12);
    assert!((mean - beta_mean).abs() <= 0.005, "{mean} vs {beta_mean}");
}

#[test]
fn indicator_coverage_is_at_least_nominal() {
    let spec = QuantileSpec::new(0.2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut covered = 0usize;
    let trials = 20_000;
    for _ in 0..trials {
        let cal: Vec<f64> = (0..30).map(|_| rng.gen::<f64>().sqrt()).collect();
        let q = conformal_quantile(&cal, spec).unwrap();
        if rng.gen::<f64>().sqrt() >= q {
            covered += 1;
        }
    }
    let rate = covered as f64 / trials as f64;
    // floor(0.2 * 31) = 6, so coverage is 1 - 6/31
    assert!((rate - (1.0 - 6.0 / 31.0)).abs() < 0.01, "{rate}");
}
