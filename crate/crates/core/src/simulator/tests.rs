use super::*;
use rand::Rng;
use crate::blockstats::BlockOperators;
use crate::scenarios::{build_scenario, load_scenario};
use crate::testutil::{random_matrix, random_system, System};
use proptest::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

fn random_policy(seed: u64, sys: &System, gain_scale: f64) -> Policy {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = sys.segs.len();
    let nu = sys.segs[0].b.ncols();
    let nx = sys.segs[0].a.nrows();
    Policy {
        ubar: (0..n).map(|_| random_matrix(&mut rng, nu, 1, 1.0).column(0).into_owned()).collect(),
        gains: (0..n).map(|_| random_matrix(&mut rng, nu, nx, gain_scale)).collect(),
        maneuver_mask: vec![true; n],
    }
}

fn setup_for(sys: &System, policy: Policy) -> McSetup {
    let nx = sys.segs[0].a.nrows();
    let n = sys.segs.len();
    let blocks = BlockOperators::assemble(&sys.segs, &sys.sched, &sys.p_hat0).unwrap();
    let x0 = DVector::from_fn(nx, |i, _| i as f64 - 1.0);
    let mean = blocks.state_mean(&x0, &policy.stacked_controls());
    McSetup {
        segments: sys.segs.clone(),
        observations: sys.obs.clone(),
        schedule: sys.sched.clone(),
        initial: InitialUncertainty::new(x0, sys.p_hat0.clone(), sys.p_tilde0.clone()).unwrap(),
        planned_means: (0..=n).map(|k| mean.rows(k * nx, nx).into_owned()).collect(),
        planned_covs: (0..=n)
            .map(|k| {
                let (_, p, _) = blocks.sqrt_covariances(&policy, k);
                &p * p.transpose()
            })
            .collect(),
        policy,
        constraints: ConstraintSet::default(),
        budget: RiskBudget::new(1e-3, 1e-3).unwrap(),
        stc_weights: Vec::new(),
        j_ub: 1e9,
        time_weights: vec![1.0; n],
        velocity_to_m_per_s: 1.0,
    }
}

fn cfg(samples: usize, seed: u64) -> McConfig {
    McConfig { samples, seed, keep_trajectories: true, ..McConfig::default() }
}

#[test]
fn quantile_order_statistics() {
    let v: Vec<f64> = (1..=100).map(f64::from).collect();
    assert_eq!(empirical_quantile(&v, 0.99).unwrap(), 99.0);
    assert_eq!(empirical_quantile(&v, 1.0).unwrap(), 100.0);
    assert_eq!(empirical_quantile(&v, 0.001).unwrap(), 1.0);
    assert_eq!(empirical_quantile(&[4.2; 7], 0.5).unwrap(), 4.2);
    assert!(empirical_quantile(&[], 0.5).is_err());
}

#[test]
fn quantile_of_normal_draws() {
    let mut rng = stream(3, 0);
    let draws: Vec<f64> = (0..1_000_000).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let oracle = Normal::standard().inverse_cdf(0.99);
    assert!((empirical_quantile(&draws, 0.99).unwrap() - oracle).abs() < 0.01);
    assert!((oracle - 2.326).abs() < 1e-3);
}

#[test]
fn noiseless_linear_samples_follow_the_mean() {
    let mut sys = random_system(5, 4, 2, 3, 5);
    for s in &mut sys.segs {
        s.g.fill(0.0);
        s.g_exe.fill(0.0);
    }
    sys.p_hat0.fill(0.0);
    sys.p_tilde0.fill(0.0);
    let mut policy = random_policy(1, &sys, 0.0);
    for g in &mut policy.gains {
        g.fill(0.0);
    }
    let setup = setup_for(&sys, policy);
    let run = run_linear_mc(&setup, &cfg(4, 0)).unwrap();
    for s in &run.samples {
        let traj = s.trajectory.as_ref().unwrap();
        for (k, p) in traj.iter().enumerate() {
            let want = &setup.planned_means[k];
            assert!((&p.x - want).amax() <= 1e-12 * want.amax().max(1.0), "node {k}");
        }
    }
}

#[test]
fn linear_sample_covariance_matches_block_statistics() {
    let sys = random_system(17, 4, 2, 3, 5);
    let setup = setup_for(&sys, random_policy(2, &sys, 0.3));
    let run = run_linear_mc(&setup, &cfg(1000, 11)).unwrap();
    let n = setup.horizon();
    for k in 0..=n {
        let xs: Vec<DVector<f64>> = run.samples.iter().map(|s| s.trajectory.as_ref().unwrap()[k].x.clone()).collect();
        let (_, cov) = sample_covariance(&xs);
        let want = &setup.planned_covs[k];
        let rel = (&cov - want).norm() / want.norm();
        assert!(rel < 0.10, "node {k}: relative Frobenius error {rel}");
    }
    assert!(run.report.max_mean_deviation_sigma < 5.0, "{}", run.report.max_mean_deviation_sigma);
}

#[test]
fn runs_are_reproducible() {
    let sys = random_system(4, 3, 2, 2, 4);
    let setup = setup_for(&sys, random_policy(9, &sys, 0.2));
    let a = run_linear_mc(&setup, &cfg(200, 42)).unwrap();
    let b = run_linear_mc(&setup, &cfg(200, 42)).unwrap();
    let c = run_linear_mc(&setup, &cfg(200, 43)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.report.delta_v, c.report.delta_v);
}

#[test]
fn violations_are_counted_against_their_limits() {
    let sys = random_system(4, 3, 2, 2, 4);
    let mut setup = setup_for(&sys, random_policy(9, &sys, 0.2));
    setup.constraints.u_max = Some(1e-9);
    setup.constraints.du_max = Some(1e9);
    let run = run_linear_mc(&setup, &cfg(100, 1)).unwrap();
    let mags: Vec<_> = run.report.family("control_magnitude").collect();
    assert_eq!(mags.len(), 4);
    assert!(mags.iter().all(|v| v.rate == 1.0 && !v.pass));
    assert!(run.report.family("control_rate").all(|v| v.rate == 0.0 && v.pass));
    assert!(!run.report.all_pass);
    let v = &mags[0];
    assert!((v.limit - (1e-3 + 3.0 * (1e-3 * 0.999f64 / 100.0).sqrt())).abs() < 1e-15);
}

#[test]
fn psd_threshold_shrinks_with_samples() {
    let small = psd_order_threshold(6, 200);
    let large = psd_order_threshold(6, 2000);
    assert!(small > large && large > 1.0, "{small} {large}");
    // Largest eigenvalue of a Wishart sample sits near (1 + √(d/n))².
    assert!(large < (1.0 + (6.0f64 / 2000.0).sqrt()).powi(2) + 0.15);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn quantiles_are_monotone(v in prop::collection::vec(-1e3f64..1e3, 1..200), p in 0.01f64..1.0, q in 0.01f64..1.0) {
        let (lo, hi) = if p <= q { (p, q) } else { (q, p) };
        prop_assert!(empirical_quantile(&v, lo).unwrap() <= empirical_quantile(&v, hi).unwrap());
    }
}

fn bundled(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

/// Zero noise, zero dispersion and no control: every nonlinear sample must
/// stay on the ballistic reference.
fn noiseless_tracking(file: &str, tol: f64) {
    let scenario = build_scenario(&load_scenario(&bundled(file), &[]).unwrap()).unwrap();
    let lin = &scenario.nominal;
    let n = scenario.horizon();
    let policy = Policy::zero(n, 3, 6, scenario.maneuver_mask.clone());
    let zero = DMatrix::zeros(6, 6);
    let setup = McSetup {
        segments: lin.segments.clone(),
        observations: scenario.observations.clone(),
        schedule: lin.schedule.clone(),
        initial: InitialUncertainty::new(scenario.initial.mean.clone(), zero.clone(), zero.clone()).unwrap(),
        policy,
        constraints: ConstraintSet::default(),
        budget: scenario.budget.clone(),
        stc_weights: Vec::new(),
        planned_means: scenario.reference.states().iter().map(|x| DVector::from_column_slice(x.as_slice())).collect(),
        planned_covs: vec![DMatrix::identity(6, 6); n + 1],
        j_ub: 0.0,
        time_weights: vec![1.0; n],
        velocity_to_m_per_s: 1.0,
    };
    let mut nl = NonlinearModel::from_scenario(&scenario);
    nl.noise.sigma_accel = 0.0;
    nl.gates = GatesParams::new(0.0, 0.0, 0.0, 0.0).unwrap();
    let run = run_nonlinear_mc(&setup, &nl, &McConfig { samples: 2, substeps: 3, mode: McMode::Nonlinear, ..cfg(2, 0) })
        .unwrap();
    assert_eq!(run.report.failed_samples, 0);
    for s in &run.samples {
        for (k, p) in s.trajectory.as_ref().unwrap().iter().enumerate() {
            let err = (&p.x - &setup.planned_means[k]).amax();
            assert!(err < tol, "{file} node {k}: {err}");
        }
    }
}

#[test]
fn noiseless_nonlinear_cwh_tracks_reference() {
    noiseless_tracking("cwh_rendezvous.toml", 1e-9);
}

#[test]
fn noiseless_nonlinear_nrho_tracks_reference() {
    noiseless_tracking("nrho.toml", 1e-8);
}
