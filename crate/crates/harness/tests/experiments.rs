use rcp_core::bounds::ThreatModel;
use rcp_core::smoothing::SmoothingScheme;
use rcp_core::{conformal_quantile, Domain, QuantileSpec, RngStreams};
use rcp_harness::attack::check_in_ball;
use rcp_harness::{
    evasion_attack, generate_task, poison_labels, run_experiment, write_results, AttackGoal, AttackObjective,
    AttackSettings, ExperimentConfig, Method, Study, TaskSpec,
};

fn small_evasion() -> ExperimentConfig {
    let mut task = TaskSpec::gaussian_mixture(4, 3, 3.0, 1.0);
    task.n_cal = 40;
    task.n_test = 30;
    let radii = vec![ThreatModel::L2Ball { r: 0.0 }, ThreatModel::L2Ball { r: 0.2 }];
    let mut cfg = ExperimentConfig::new(task, SmoothingScheme::Gaussian { sigma: 0.4 }, Study::Evasion { radii });
    cfg.trials = 4;
    cfg.samples = 200;
    cfg.eta = Some(0.05);
    cfg.extra_alphas = vec![0.2];
    cfg
}

#[test]
fn experiments_are_reproducible() {
    let cfg = small_evasion();
    let a = run_experiment(&cfg).unwrap();
    let b = run_experiment(&cfg).unwrap();
    assert_eq!(a, b);
    let (da, db) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    write_results(&a, da.path()).unwrap();
    write_results(&b, db.path()).unwrap();
    for f in ["trials.jsonl", "aggregate.csv", "config.json", "plotdata/coverage_vs_r.csv", "plotdata/size_vs_alpha.csv"] {
        let x = std::fs::read(da.path().join(f)).unwrap();
        assert_eq!(x, std::fs::read(db.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn evasion_study_covers_every_method_and_setting() {
    let cfg = small_evasion();
    let rep = run_experiment(&cfg).unwrap();
    assert!(rep.violations.is_empty(), "{:?}", rep.violations);
    assert!(rep.failed_trials.is_empty());
    let Study::Evasion { radii } = &cfg.study else { unreachable!() };
    for &alpha in &[0.1, 0.2] {
        for m in radii {
            for method in [Method::Vanilla, Method::Smoothed, Method::Rscp, Method::Cas, Method::RscpCorrected, Method::CasCorrected] {
                let recs = rep.records(method, alpha, Some(*m), None);
                assert_eq!(recs.len(), cfg.trials, "{} at {m:?}", method.name());
            }
        }
    }
    // At radius zero nothing moves: the smoothed sets under attack equal the
    // clean ones.
    let zero = Some(ThreatModel::L2Ball { r: 0.0 });
    for r in rep.records(Method::Smoothed, 0.1, zero, None) {
        assert_eq!(r.clean, r.attacked);
    }
}

#[test]
fn attacks_stay_in_the_ball_and_never_help_the_defender() {
    let spec = TaskSpec::gaussian_mixture(6, 4, 2.0, 1.0);
    let task = generate_task(&spec, 3).unwrap();
    let streams = RngStreams::new(5);
    let settings = AttackSettings::default();
    let model = ThreatModel::L2Ball { r: 0.3 };
    for (i, (x, &y)) in task.test.x.iter().zip(&task.test.y).take(20).enumerate() {
        for (goal, objective) in [
            (AttackGoal::Lower, AttackObjective::Base),
            (AttackGoal::Raise, AttackObjective::Base),
            (AttackGoal::Lower, AttackObjective::Smoothed { scheme: SmoothingScheme::Gaussian { sigma: 0.25 }, samples: 32 }),
        ] {
            let mut rng = streams.stream(Domain::Attack, i as u64, 0);
            let out = evasion_attack(x, y, &task, &model, objective, goal, &settings, &mut rng).unwrap();
            check_in_ball(x, &out.x, &model).unwrap();
            match goal {
                AttackGoal::Lower => assert!(out.score <= out.clean_score),
                AttackGoal::Raise => assert!(out.score >= out.clean_score),
            }
        }
    }

    let spec = TaskSpec::binary_linear(24, 3, 5, 0.7, 0.1);
    let task = generate_task(&spec, 4).unwrap();
    let model = ThreatModel::BinaryBall { r_a: 2, r_d: 1 };
    for (i, (x, &y)) in task.test.x.iter().zip(&task.test.y).take(20).enumerate() {
        let mut rng = streams.stream(Domain::Attack, i as u64, 1);
        let out = evasion_attack(x, y, &task, &model, AttackObjective::Base, AttackGoal::Lower, &settings, &mut rng).unwrap();
        check_in_ball(x, &out.x, &model).unwrap();
        assert!(out.score <= out.clean_score);
    }
}

#[test]
fn label_poisoning_raises_the_threshold_with_the_budget() {
    let mut spec = TaskSpec::gaussian_mixture(4, 4, 2.0, 1.0);
    spec.n_cal = 50;
    let task = generate_task(&spec, 11).unwrap();
    let cal = &task.calibration;
    let matrix: Vec<Vec<f64>> = cal.x.iter().map(|x| task.scores(x, 0.0)).collect();
    let clean: Vec<f64> = matrix.iter().zip(&cal.y).map(|(row, &y)| row[y]).collect();
    let q0 = conformal_quantile(&clean, QuantileSpec::new(0.1).unwrap()).unwrap();
    let mut last = q0;
    for k in 0..=5 {
        let p = poison_labels(cal, &matrix, k, 0.1).unwrap();
        assert!(p.changed.len() <= k);
        let z: Vec<f64> = matrix.iter().zip(&p.data.y).map(|(row, &y)| row[y]).collect();
        let q = conformal_quantile(&z, QuantileSpec::new(0.1).unwrap()).unwrap();
        assert_eq!(q, p.target_threshold);
        assert!(q >= last);
        last = q;
    }
    assert!(last > q0);
    // budgets beyond n are clamped, not rejected
    assert!(poison_labels(cal, &matrix, 1000, 0.1).is_ok());
}
