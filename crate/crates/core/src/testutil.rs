//! Random fixtures shared by unit tests.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dynamics::DiscreteSegment;
use crate::navigation::{build_filter_schedule, FilterSchedule};
use crate::uncertainty::LinearObservation;

pub fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| scale * (rng.random::<f64>() * 2.0 - 1.0))
}

pub struct System {
    pub segs: Vec<DiscreteSegment>,
    pub sched: FilterSchedule,
    pub obs: Vec<LinearObservation>,
    pub p_hat0: DMatrix<f64>,
    pub p_tilde0: DMatrix<f64>,
}

pub fn random_system(seed: u64, nx: usize, nu: usize, ny: usize, n: usize) -> System {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let segs: Vec<_> = (0..n)
        .map(|_| DiscreteSegment {
            a: DMatrix::identity(nx, nx) + random_matrix(&mut rng, nx, nx, 0.3),
            b: random_matrix(&mut rng, nx, nu, 1.0),
            c: DVector::from_fn(nx, |_, _| rng.random::<f64>()),
            g: random_matrix(&mut rng, nx, nx, 0.1),
            g_exe: random_matrix(&mut rng, nx, nu, 0.1),
            dt: 1.0,
        })
        .collect();
    let obs: Vec<_> = (0..=n)
        .map(|_| LinearObservation {
            c: random_matrix(&mut rng, ny, nx, 1.0),
            d: DMatrix::identity(ny, ny) * 0.3 + random_matrix(&mut rng, ny, ny, 0.05),
            c_obs: DVector::zeros(ny),
        })
        .collect();
    let f = random_matrix(&mut rng, nx, nx, 1.0);
    let p_tilde0 = &f * f.transpose() + DMatrix::identity(nx, nx) * 0.1;
    let f = random_matrix(&mut rng, nx, nx, 1.0);
    let p_hat0 = &f * f.transpose();
    let sched = build_filter_schedule(&segs, &obs, &p_tilde0, &vec![true; n + 1]).unwrap();
    System { segs, sched, obs, p_hat0, p_tilde0 }
}

