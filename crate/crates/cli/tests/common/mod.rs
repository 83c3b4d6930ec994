//! Independent oracles for the acceptance checks.

use ccorbit::blockstats::Policy;
use ccorbit::dynamics::DiscreteSegment;
use ccorbit::navigation::{build_filter_schedule, FilterSchedule};
use ccorbit::uncertainty::LinearObservation;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::function::{erf, gamma};

pub struct RandomSystem {
    pub segments: Vec<DiscreteSegment>,
    pub observations: Vec<LinearObservation>,
    pub schedule: FilterSchedule,
    pub p_hat0: DMatrix<f64>,
    pub p_tilde0: DMatrix<f64>,
    pub policy: Policy,
}

fn uniform(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| scale * rng.random_range(-1.0..1.0))
}

/// A random filtered system with random policy; `n_x ≤ 4`, `N ≤ 5`.
pub fn random_system(seed: u64) -> RandomSystem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nx = rng.random_range(1..=4);
    let nu = rng.random_range(1..=3);
    let ny = rng.random_range(1..=nx);
    let n = rng.random_range(1..=5);
    let segments: Vec<_> = (0..n)
        .map(|_| DiscreteSegment {
            a: DMatrix::identity(nx, nx) + uniform(&mut rng, nx, nx, 0.4),
            b: uniform(&mut rng, nx, nu, 1.0),
            c: uniform(&mut rng, nx, 1, 1.0).column(0).into_owned(),
            g: uniform(&mut rng, nx, nx, 0.2),
            g_exe: uniform(&mut rng, nx, nu, 0.1),
            dt: 1.0,
        })
        .collect();
    let observations: Vec<_> = (0..=n)
        .map(|_| LinearObservation {
            c: uniform(&mut rng, ny, nx, 1.0),
            d: DMatrix::identity(ny, ny) * 0.5 + uniform(&mut rng, ny, ny, 0.1),
            c_obs: DVector::zeros(ny),
        })
        .collect();
    let f = uniform(&mut rng, nx, nx, 1.0);
    let p_tilde0 = &f * f.transpose() + DMatrix::identity(nx, nx) * 0.05;
    let f = uniform(&mut rng, nx, nx, 1.0);
    let p_hat0 = &f * f.transpose();
    let measured: Vec<bool> = (0..=n).map(|k| k == 0 || rng.random_bool(0.8)).collect();
    let schedule = build_filter_schedule(&segments, &observations, &p_tilde0, &measured).unwrap();
    let policy = Policy {
        ubar: (0..n).map(|_| uniform(&mut rng, nu, 1, 1.0).column(0).into_owned()).collect(),
        gains: (0..n).map(|_| uniform(&mut rng, nu, nx, 0.5)).collect(),
        maneuver_mask: vec![true; n],
    };
    RandomSystem { segments, observations, schedule, p_hat0, p_tilde0, policy }
}

fn symmetric_sqrt(p: &DMatrix<f64>) -> DMatrix<f64> {
    let e = p.clone().symmetric_eigen();
    let d = DMatrix::from_diagonal(&e.eigenvalues.map(|l| l.max(0.0).sqrt()));
    &e.eigenvectors * d * e.eigenvectors.transpose()
}

/// State and control covariances by brute force: every quantity of the
/// closed loop is tracked as an explicit linear map of the stacked
/// primitive noises (initial estimate, initial error, process, execution
/// and measurement noise), and covariances are `M Mᵀ`.
pub fn brute_force_covariances(sys: &RandomSystem) -> (Vec<DMatrix<f64>>, Vec<DMatrix<f64>>) {
    let n = sys.segments.len();
    let nx = sys.p_hat0.nrows();
    let mut cols = 2 * nx;
    let mut w_at = Vec::new();
    for s in &sys.segments {
        w_at.push((cols, cols + s.g.ncols()));
        cols += s.g.ncols() + s.g_exe.ncols();
    }
    let mut v_at = Vec::new();
    for o in &sys.observations {
        v_at.push(cols);
        cols += o.d.ncols();
    }
    let mut x_hat_prior = DMatrix::zeros(nx, cols);
    x_hat_prior.view_mut((0, 0), (nx, nx)).copy_from(&symmetric_sqrt(&sys.p_hat0));
    let mut x = x_hat_prior.clone();
    x.view_mut((0, nx), (nx, nx)).copy_from(&symmetric_sqrt(&sys.p_tilde0));
    let mut z = DMatrix::zeros(nx, cols);
    let (mut state_covs, mut control_covs) = (Vec::new(), Vec::new());
    for k in 0..=n {
        let o = &sys.observations[k];
        let mut noise = DMatrix::zeros(o.d.nrows(), cols);
        noise.view_mut((0, v_at[k]), (o.d.nrows(), o.d.ncols())).copy_from(&o.d);
        let innov = &o.c * (&x - &x_hat_prior) + noise;
        let l = &sys.schedule.gains[k];
        let x_hat = &x_hat_prior + l * &innov;
        z = if k == 0 { x_hat_prior.clone() } else { &sys.segments[k - 1].a * &z } + l * &innov;
        state_covs.push(&x * x.transpose());
        if k == n {
            break;
        }
        let s = &sys.segments[k];
        let u = &sys.policy.gains[k] * &z;
        control_covs.push(&u * u.transpose());
        let mut kick = DMatrix::zeros(nx, cols);
        kick.view_mut((0, w_at[k].0), (nx, s.g.ncols())).copy_from(&s.g);
        kick.view_mut((0, w_at[k].1), (nx, s.g_exe.ncols())).copy_from(&s.g_exe);
        x = &s.a * &x + &s.b * &u + kick;
        x_hat_prior = &s.a * x_hat + &s.b * &u;
    }
    (state_covs, control_covs)
}

/// Root of a monotone function on `[lo, hi]` by bisection.
fn bisect(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let rising = f(hi) > f(lo);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if (f(mid) > 0.0) == rising {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}

/// `x` with `P[N(0,1) > x] = ε`, from the complementary error function.
pub fn normal_tail_root(eps: f64) -> f64 {
    bisect(|x| 0.5 * erf::erfc(x / std::f64::consts::SQRT_2) - eps, 0.0, 40.0)
}

/// `√x` with `P[χ²(n) > x] = ε`, from the regularized upper gamma function.
pub fn chi_tail_root(eps: f64, n: usize) -> f64 {
    bisect(|x| gamma::gamma_ur(0.5 * n as f64, 0.5 * x) - eps, 1e-12, 1e4).sqrt()
}
