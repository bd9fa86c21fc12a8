use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rcp_core::bounds::{BoundKind, ThreatModel};
use rcp_core::evasion::{calibrate_smooth, EvasionConfig};
use rcp_core::smoothing::{estimate_distribution, BinGrid, ScoreDistribution, SmoothingScheme};
use rcp_core::{conformal_quantile, Domain, QuantileSpec, RngStreams};

fn oracle(x: &[f64], _: &mut rcp_core::StreamRng) -> f64 {
    let z: f64 = x.iter().sum::<f64>() / x.len() as f64;
    1.0 / (1.0 + (-z).exp())
}

fn smoothed(points: &[Vec<f64>], seed: u64) -> Vec<ScoreDistribution> {
    let streams = RngStreams::new(seed);
    let scheme = SmoothingScheme::Gaussian { sigma: 0.5 };
    let grid = BinGrid::default();
    points
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let mut rng = streams.stream(Domain::Calibration, i as u64, 0);
            estimate_distribution(oracle, x, &scheme, 400, &grid, &mut rng).unwrap()
        })
        .collect()
}

#[test]
fn thresholds_ignore_calibration_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let points: Vec<Vec<f64>> = (0..40).map(|_| (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
    let dists = smoothed(&points, 11);
    let config = EvasionConfig::new(
        SmoothingScheme::Gaussian { sigma: 0.5 },
        ThreatModel::L2Ball { r: 0.25 },
        BoundKind::Cdf,
    );
    let (table, q) = calibrate_smooth(&dists, 0.1, &config).unwrap();
    let mut shuffled = dists.clone();
    shuffled.shuffle(&mut rng);
    let (table2, q2) = calibrate_smooth(&shuffled, 0.1, &config).unwrap();
    assert_eq!(q, q2);
    let mut a = table.lowers();
    let mut b = table2.lowers();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    assert_eq!(a, b);

    let mut means = table.smooth_means();
    let spec = QuantileSpec::new(0.1).unwrap();
    let base = conformal_quantile(&means, spec).unwrap();
    means.reverse();
    assert_eq!(conformal_quantile(&means, spec).unwrap(), base);
}

#[test]
fn estimates_depend_only_on_stream_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let points: Vec<Vec<f64>> = (0..5).map(|_| (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
    let a = smoothed(&points, 21);
    let b = smoothed(&points, 21);
    assert_eq!(a, b);
    let c = smoothed(&points, 22);
    assert_ne!(a, c);
}
