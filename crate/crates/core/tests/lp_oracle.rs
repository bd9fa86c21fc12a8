mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rcp_core::bounds::{build_region_table, sparse_cdf_lower, sparse_cdf_upper, sparse_mean_lower, sparse_mean_upper};
use rcp_core::smoothing::{BinGrid, ScoreDistribution};

fn random_instance(rng: &mut ChaCha8Rng) -> (u32, u32, f64, f64) {
    let total = rng.gen_range(0..=4u32);
    let r_a = rng.gen_range(0..=total);
    let p0 = [0.01, 0.05, 0.2, 0.3][rng.gen_range(0..4)];
    let p1 = [0.1, 0.2, 0.6, 0.8][rng.gen_range(0..4)];
    (r_a, total - r_a, p0, p1)
}

#[test]
fn greedy_mean_bounds_equal_lp_optimum() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..500 {
        let (r_a, r_d, p0, p1) = random_instance(&mut rng);
        let table = build_region_table(r_a, r_d, p0, p1).unwrap();
        let p: f64 = rng.gen();
        let up = sparse_mean_upper(p, &table);
        let lo = sparse_mean_lower(p, &table);
        for (greedy, maximize) in [(up, true), (lo, false)] {
            let simplex = common::simplex_lp(&table.t, &table.t_tilde, p, maximize);
            let vertex = common::vertex_lp(&table.t, &table.t_tilde, p, maximize);
            assert!((greedy - simplex).abs() <= 1e-9, "{r_a} {r_d} {p0} {p1} p={p}: {greedy} vs {simplex}");
            assert!((greedy - vertex).abs() <= 1e-9, "{r_a} {r_d} {p0} {p1} p={p}: {greedy} vs {vertex}");
        }
    }
}

#[test]
fn greedy_cdf_rows_equal_lp_optimum() {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let grid = BinGrid::uniform(6).unwrap();
    for _ in 0..200 {
        let (r_a, r_d, p0, p1) = random_instance(&mut rng);
        let table = build_region_table(r_a, r_d, p0, p1).unwrap();
        let samples: Vec<f64> = (0..30).map(|_| rng.gen::<f64>().powi(2)).collect();
        let dist = ScoreDistribution::from_samples(&samples, &grid).unwrap();
        let edges = grid.edges();
        let m = edges.len();
        let (mut up, mut lo) = (edges[m - 1], edges[m - 2]);
        for (j, &p) in (1..m - 1).zip(dist.inner_cdf()) {
            up -= common::vertex_lp(&table.t, &table.t_tilde, p, false) * (edges[j + 1] - edges[j]);
            lo -= common::vertex_lp(&table.t, &table.t_tilde, p, true) * (edges[j] - edges[j - 1]);
            let row_min = common::simplex_lp(&table.t, &table.t_tilde, p, false);
            assert!((row_min - sparse_mean_lower(p, &table)).abs() <= 1e-9);
        }
        assert!((sparse_cdf_upper(&dist, &table) - up.clamp(0.0, 1.0)).abs() <= 1e-9);
        assert!((sparse_cdf_lower(&dist, &table) - lo.clamp(0.0, 1.0)).abs() <= 1e-9);
    }
}
