use super::*;
use crate::testutil::{random_matrix, random_system};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn setup(seed: u64, mask: Vec<bool>) -> (BlockOperators, ConvexProgram, PolicyVars, Vec<f64>) {
    let n = mask.len();
    let sys = random_system(seed, 4, 2, 2, n);
    let blocks = BlockOperators::assemble(&sys.segs, &sys.sched, &sys.p_hat0).unwrap();
    let mut prog = ConvexProgram::new();
    let vars = PolicyVars::new(&mut prog, &blocks, &mask);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let x: Vec<f64> = (0..prog.num_vars()).map(|_| rng.random::<f64>() - 0.5).collect();
    (blocks, prog, vars, x)
}

fn gram(m: &DMatrix<f64>) -> DMatrix<f64> {
    m * m.transpose()
}

#[test]
fn compressed_factor_keeps_the_gram() {
    let (blocks, _, vars, x) = setup(4, vec![true, false, true, true]);
    let policy = vars.policy(&x);
    assert!(policy.respects_mask());
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for k in 0..=4 {
        let left = random_matrix(&mut rng, 3, 4, 1.0);
        let f = full_state_factor(&blocks, &vars, k, &left);
        let compressed = f.build(&vars, &blocks).eval(&x);
        let exact = f.eval(&policy, &blocks);
        // Independent route through the block statistics.
        let (_, p_full, _) = blocks.sqrt_covariances(&policy, k);
        let reference = gram(&(&left * p_full));
        for got in [gram(&compressed), gram(&exact)] {
            let err = (&got - &reference).norm() / reference.norm();
            assert!(err < 1e-10, "node {k}: {err}");
        }
        assert!(compressed.ncols() <= exact.ncols());
    }
}

#[test]
fn control_factor_matches_block_statistics() {
    let (blocks, _, vars, x) = setup(6, vec![true, true, false]);
    let policy = vars.policy(&x);
    for k in 0..3 {
        let m = control_factor(&blocks, k).build(&vars, &blocks).eval(&x);
        let (_, _, p_u) = blocks.sqrt_covariances(&policy, k);
        assert!((gram(&m) - gram(&p_u)).norm() < 1e-10 * gram(&p_u).norm().max(1.0));
    }
}

#[test]
fn mean_expression_matches_block_operators() {
    let (blocks, _, vars, x) = setup(2, vec![true, false, true]);
    let x0 = DVector::from_vec(vec![0.3, -1.0, 2.0, 0.1]);
    let policy = vars.policy(&x);
    let stacked = blocks.state_mean(&x0, &policy.stacked_controls());
    for k in 0..=3 {
        let got = DVector::from_iterator(4, vars.state_mean(&blocks, &x0, k).iter().map(|e| e.eval(&x)));
        assert!((got - stacked.rows(4 * k, 4)).amax() < 1e-12);
    }
}

#[test]
fn factor_expression_is_affine() {
    let (blocks, _, vars, x) = setup(8, vec![true, true, true]);
    let left = DMatrix::identity(4, 4);
    let m = state_factor(&blocks, &vars, 3, &left).build(&vars, &blocks);
    let zero = vec![0.0; x.len()];
    let y: Vec<f64> = x.iter().map(|v| v.sin()).collect();
    let mix: Vec<f64> = x.iter().zip(&y).map(|(a, b)| 0.3 * a + 0.7 * b).collect();
    let c = m.eval(&zero);
    let lhs = m.eval(&mix) - &c;
    let rhs = (m.eval(&x) - &c) * 0.3 + (m.eval(&y) - &c) * 0.7;
    assert!((lhs - rhs).amax() < 1e-12);
}

#[test]
fn masked_nodes_create_no_variables() {
    let (_, prog, vars, _) = setup(1, vec![true, false, false, true]);
    assert_eq!(prog.num_vars(), 2 * (2 + 8));
    assert!(vars.control_mean(1).iter().all(|e| e.terms.is_empty()));
}

#[test]
fn scalar_hyperplane_arithmetic() {
    let m = gaussian_quantile_coeff(1e-3).unwrap();
    let lhs = -3.1 + 0.0 + m * 1.0;
    assert!(lhs < 0.0 && lhs > -0.02);
}

#[test]
fn single_node_cost_value() {
    let sigma = 0.2_f64;
    let m = chi2_quantile_coeff(0.01, 3).unwrap();
    let u: DVector<f64> = DVector::from_vec(vec![1.0, 2.0, 2.0]);
    assert!((u.norm() + m * sigma - (3.0 + 3.36821 * 0.2)).abs() < 1e-4);
}

#[test]
fn rate_limit_from_slew_rate() {
    let du = 10.0 * 1f64.to_radians() * 30.0;
    assert!((du - 5.236).abs() < 1e-3);
}

#[test]
fn chi2_surrogate_is_sound_under_sampling() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let samples = 100_000;
    for &(eps, n) in &[(1e-3, 3), (1e-2, 2), (0.05, 4), (1e-3, 6), (0.1, 1)] {
        let f = random_matrix(&mut rng, n, n, 1.0);
        let gamma = chi2_quantile_coeff(eps, n).unwrap() * linalg::spectral_norm(&f);
        let mut inside = 0usize;
        for _ in 0..samples {
            let w = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
            if (&f * w).norm() <= gamma {
                inside += 1;
            }
        }
        let rate = 1.0 - inside as f64 / samples as f64;
        let margin = 3.0 * (eps * (1.0 - eps) / samples as f64).sqrt();
        assert!(rate <= eps + margin, "eps {eps} n {n}: {rate}");
    }
}

#[test]
fn terminal_floor_is_reported() {
    let (blocks, mut prog, vars, _) = setup(3, vec![true, true]);
    let target = TerminalTarget { mean: DVector::zeros(4), cov: DMatrix::identity(4, 4) * 1e-9 };
    let err = build_terminal(&mut prog, &vars, &blocks, &DVector::zeros(4), &target, BuildOptions::default()).unwrap_err();
    assert!(err.to_string().starts_with("infeasible terminal covariance: filter floor exceeds target"));
}

fn cwh_cone() -> ApproachCone {
    let mut h_r = DMatrix::zeros(3, 6);
    h_r.view_mut((0, 0), (3, 3)).fill_with_identity();
    ApproachCone {
        a_cone: DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0]),
        b_cone: DVector::from_vec(vec![0.0, 30f64.to_radians().tan(), 0.0]),
        h_r,
        r_trigger: 0.5,
    }
}

#[test]
fn stc_trigger_and_value() {
    let cone = cwh_cone();
    let far = DVector::from_vec(vec![-3.0, 0.1, 0.0, 0.0, 0.0, 0.0]);
    assert_eq!(cone.weight(&far), 0.0);
    let near = DVector::from_vec(vec![0.0, 0.2, 0.0, 0.0, 0.0, 0.0]);
    assert!((cone.weight(&near) - 0.3).abs() < 1e-15);
    let tiny = DMatrix::identity(6, 6) * 1e-4;
    assert!(stc_value(&cone, &near, &tiny, 1e-3).unwrap() < 0.0);
    let off_axis = DVector::from_vec(vec![0.2, 0.1, 0.0, 0.0, 0.0, 0.0]);
    assert!(stc_value(&cone, &off_axis, &tiny, 1e-3).unwrap() > 0.0);
}

#[test]
fn inactive_stc_adds_nothing() {
    let (blocks, mut prog, vars, _) = setup(5, vec![true, true]);
    let before = prog.constraints().len();
    let mut cone = cwh_cone();
    cone.h_r = DMatrix::identity(3, 4).clone_owned();
    let z = build_stc(&mut prog, &vars, &blocks, &DVector::zeros(4), &cone, 1, 0.0, 1e-3, BuildOptions::default()).unwrap();
    assert!(z.is_none());
    assert_eq!(prog.constraints().len(), before);
}

#[test]
fn budget_validation() {
    assert!(RiskBudget::new(1e-3, 1e-3).is_ok());
    assert!(RiskBudget::new(0.0, 1e-3).is_err());
    let mut b = RiskBudget::new(1e-2, 1e-3).unwrap();
    assert_eq!(b.hyperplane_allocation(4).unwrap(), vec![2.5e-3; 4]);
    b.hyperplane_eps = Some(vec![6e-3, 6e-3]);
    assert!(b.validate().is_err());
}
