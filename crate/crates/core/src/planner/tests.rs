use super::*;
use crate::convexifier::{ApproachCone, TerminalTarget};
use crate::dynamics::DiscreteSegment;
use crate::navigation::build_filter_schedule;
use crate::testutil::random_system;
use crate::uncertainty::LinearObservation;

fn problem_from(blocks: BlockOperators, x0: DVector<f64>, constraints: ConstraintSet) -> PlanProblem {
    let n = blocks.horizon();
    PlanProblem {
        blocks,
        x0_mean: x0,
        constraints,
        budget: RiskBudget::new(1e-3, 1e-3).unwrap(),
        maneuver_mask: vec![true; n],
        control_type: ControlType::Impulsive,
        dts: vec![1.0; n],
        build: BuildOptions::default(),
    }
}

fn random_problem(seed: u64, n: usize, constraints: ConstraintSet) -> PlanProblem {
    let sys = random_system(seed, 3, 2, 2, n);
    let blocks = BlockOperators::assemble(&sys.segs, &sys.sched, &sys.p_hat0).unwrap();
    problem_from(blocks, DVector::from_vec(vec![1.0, -0.5, 0.2]), constraints)
}

#[test]
fn unconstrained_problem_spends_nothing() {
    let p = random_problem(1, 3, ConstraintSet::default());
    let sol = solve_fixed(&p, &ClarabelBackend::default()).unwrap();
    assert_eq!(sol.status, PlanStatus::Optimal);
    assert!(sol.j_ub.abs() < 1e-6, "{}", sol.j_ub);
    assert!(sol.policy.ubar.iter().all(|u| u.amax() < 1e-6));
    assert!(sol.policy.gains.iter().all(|k| k.amax() < 1e-4));
}

/// Impulsive double integrator with unit step: `x⁺ = A (x + B u)`.
fn double_integrator(n: usize) -> (Vec<DiscreteSegment>, BlockOperators) {
    let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]);
    let b = &a * DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
    let segs: Vec<_> = (0..n)
        .map(|_| DiscreteSegment {
            a: a.clone(),
            b: b.clone(),
            c: DVector::zeros(2),
            g: DMatrix::identity(2, 2) * 1e-3,
            g_exe: DMatrix::zeros(2, 1),
            dt: 1.0,
        })
        .collect();
    let obs: Vec<_> = (0..=n)
        .map(|_| LinearObservation { c: DMatrix::identity(2, 2), d: DMatrix::identity(2, 2) * 0.01, c_obs: DVector::zeros(2) })
        .collect();
    let sched = build_filter_schedule(&segs, &obs, &(DMatrix::identity(2, 2) * 1e-2), &vec![true; n + 1]).unwrap();
    let blocks = BlockOperators::assemble(&segs, &sched, &(DMatrix::identity(2, 2) * 1e-2)).unwrap();
    (segs, blocks)
}

#[test]
fn two_impulse_transfer_matches_pseudo_inverse() {
    let (_, blocks) = double_integrator(2);
    let x0 = DVector::from_vec(vec![0.0, 0.0]);
    let xf = DVector::from_vec(vec![1.0, 0.0]);
    let bn = blocks.b_blk.rows(4, 2).into_owned();
    let free = blocks.a_blk.rows(4, 2) * &x0 + blocks.c_blk.rows(4, 2);
    let oracle = bn.clone().pseudo_inverse(1e-14).unwrap() * (&xf - free);

    let cs = ConstraintSet {
        terminal: Some(TerminalTarget { mean: xf, cov: DMatrix::identity(2, 2) * 1e6 }),
        ..Default::default()
    };
    let p = problem_from(blocks, x0, cs);
    let sol = solve_fixed(&p, &ClarabelBackend::default()).unwrap();
    assert_eq!(sol.status, PlanStatus::Optimal);
    let u = sol.policy.stacked_controls();
    assert!((&u - &oracle).amax() < 1e-6, "{u} vs {oracle}");
    assert!(sol.margins["terminal_mean"] > -1e-6);
}

#[test]
fn constrained_solution_passes_post_hoc_checks() {
    let (_, blocks) = double_integrator(4);
    let x0 = DVector::from_vec(vec![0.0, 0.0]);
    let cs = ConstraintSet {
        u_max: Some(2.0),
        du_max: Some(3.0),
        terminal: Some(TerminalTarget { mean: DVector::from_vec(vec![2.0, 0.0]), cov: DMatrix::identity(2, 2) * 0.02 }),
        ..Default::default()
    };
    let p = problem_from(blocks, x0, cs);
    let sol = solve_fixed(&p, &ClarabelBackend::default()).unwrap();
    assert_eq!(sol.status, PlanStatus::Optimal);
    for (name, m) in &sol.margins {
        assert!(*m >= -MARGIN_TOL, "{name}: {m}");
    }
    // The terminal covariance demands feedback.
    assert!(sol.policy.gains.iter().any(|k| k.amax() > 1e-3));
    assert!(sol.margins["terminal_covariance"] < 1e-4);
}

#[test]
fn masked_nodes_stay_silent() {
    let (_, blocks) = double_integrator(4);
    let cs = ConstraintSet {
        terminal: Some(TerminalTarget { mean: DVector::from_vec(vec![2.0, 0.0]), cov: DMatrix::identity(2, 2) * 0.05 }),
        ..Default::default()
    };
    let mut p = problem_from(blocks, DVector::zeros(2), cs);
    p.maneuver_mask = vec![true, false, true, true];
    let sol = solve_fixed(&p, &ClarabelBackend::default()).unwrap();
    assert_eq!(sol.status, PlanStatus::Optimal);
    assert!(sol.policy.respects_mask());
    assert_eq!(sol.policy.ubar[1].amax(), 0.0);
}

#[test]
fn infeasible_problem_is_diagnosed() {
    let (_, blocks) = double_integrator(2);
    let cs = ConstraintSet {
        u_max: Some(1e-3),
        terminal: Some(TerminalTarget { mean: DVector::from_vec(vec![5.0, 0.0]), cov: DMatrix::identity(2, 2) }),
        ..Default::default()
    };
    let p = problem_from(blocks, DVector::zeros(2), cs);
    let sol = solve_fixed(&p, &ClarabelBackend::default()).unwrap();
    assert_eq!(sol.status, PlanStatus::Infeasible);
    let d = sol.diagnosis.unwrap();
    assert!(d == "control_magnitude" || d == "terminal_mean", "{d}");
}

#[test]
fn terminal_floor_reported_before_solving() {
    let (_, blocks) = double_integrator(2);
    let cs = ConstraintSet {
        terminal: Some(TerminalTarget { mean: DVector::zeros(2), cov: DMatrix::identity(2, 2) * 1e-8 }),
        ..Default::default()
    };
    let p = problem_from(blocks, DVector::zeros(2), cs);
    let sol = solve_fixed(&p, &ClarabelBackend::default()).unwrap();
    assert_eq!(sol.status, PlanStatus::Infeasible);
    assert!(sol.diagnosis.unwrap().contains("filter floor exceeds target"));
}

#[test]
fn vacuous_trigger_reproduces_the_fixed_solution() {
    let (_, blocks) = double_integrator(3);
    let target = TerminalTarget { mean: DVector::from_vec(vec![6.0, 0.0]), cov: DMatrix::identity(2, 2) * 0.05 };
    let base = ConstraintSet { terminal: Some(target), ..Default::default() };
    let mut with_cone = base.clone();
    // Trigger sphere of radius 1 about the origin; the transfer stays near 5..6.
    with_cone.approach_cone = Some(ApproachCone {
        a_cone: DMatrix::from_row_slice(1, 1, &[1.0]),
        b_cone: DVector::from_vec(vec![1.0]),
        h_r: DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
        r_trigger: 1.0,
    });
    let x0 = DVector::from_vec(vec![5.0, 0.0]);
    let fixed = solve_fixed(&problem_from(blocks.clone(), x0.clone(), base), &ClarabelBackend::default()).unwrap();
    let p = problem_from(blocks, x0, with_cone);
    let opts = ScpOptions { penalty_weight: Some(10.0), ..Default::default() };
    let sol = solve_with_stc(&p, &ClarabelBackend::default(), opts).unwrap();
    assert_eq!(sol.status, PlanStatus::Optimal);
    assert!(sol.scp_trace.len() <= 2);
    assert!(sol.scp_trace.iter().all(|t| t.active_triggers == 0));
    assert!((sol.j_ub - fixed.j_ub).abs() < 1e-6);
    assert!(sol.zeta.iter().all(|z| *z == 0.0));
}
