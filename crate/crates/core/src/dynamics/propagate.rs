//! Adaptive Dormand–Prince 8(5,3) propagation of the state and its
//! variational equations.

use std::cell::RefCell;

use nalgebra::{Matrix6, Matrix6x3, SVector};
use ode_solvers::{Dop853, OutputType, System};

use super::{Control, DynamicsError, DynamicsModel, ModelKind, Result, State};

/// Integration tolerances. The absolute tolerance applies to every
/// component of the (possibly augmented) integration state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerances {
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: u32,
}

impl Tolerances {
    pub fn for_model(model: &DynamicsModel) -> Self {
        match model.kind() {
            ModelKind::Cr3bp { .. } => Self {
                rtol: 1e-12,
                atol: 1e-13,
                max_steps: 2_000_000,
            },
            _ => Self {
                rtol: 1e-12,
                atol: 1e-12,
                max_steps: 2_000_000,
            },
        }
    }
}

/// Right-hand side with deferred error reporting, since the integrator
/// callback cannot fail. An optional stop predicate ends integration early.
pub(super) struct Rhs<'a, const D: usize> {
    f: Box<dyn Fn(f64, &SVector<f64, D>, &mut SVector<f64, D>) -> Result<()> + 'a>,
    error: RefCell<Option<DynamicsError>>,
    stop: RefCell<Option<Box<dyn FnMut(f64, &SVector<f64, D>) -> bool + 'a>>>,
}

impl<'a, const D: usize> Rhs<'a, D> {
    pub(super) fn new(f: impl Fn(f64, &SVector<f64, D>, &mut SVector<f64, D>) -> Result<()> + 'a) -> Self {
        Self {
            f: Box::new(f),
            error: RefCell::new(None),
            stop: RefCell::new(None),
        }
    }

    fn with_stop(self, stop: impl FnMut(f64, &SVector<f64, D>) -> bool + 'a) -> Self {
        *self.stop.borrow_mut() = Some(Box::new(stop));
        self
    }
}

struct Borrowed<'r, 'a, const D: usize>(&'r Rhs<'a, D>);

impl<const D: usize> System<f64, SVector<f64, D>> for Borrowed<'_, '_, D> {
    fn system(&self, t: f64, y: &SVector<f64, D>, dy: &mut SVector<f64, D>) {
        if self.0.error.borrow().is_some() {
            dy.fill(0.0);
            return;
        }
        if let Err(e) = (self.0.f)(t, y, dy) {
            dy.fill(0.0);
            *self.0.error.borrow_mut() = Some(e);
        }
    }

    fn solout(&mut self, t: f64, y: &SVector<f64, D>, _dy: &SVector<f64, D>) -> bool {
        if self.0.error.borrow().is_some() {
            return true;
        }
        match self.0.stop.borrow_mut().as_mut() {
            Some(stop) => stop(t, y),
            None => false,
        }
    }
}

/// Integrate `rhs` from `t0` to `t1`; returns the final time reached (which
/// is earlier than `t1` if the stop predicate fired) and the final state.
pub(super) fn integrate<const D: usize>(
    rhs: &Rhs<'_, D>,
    y0: SVector<f64, D>,
    t0: f64,
    t1: f64,
    tol: Tolerances,
) -> Result<(f64, SVector<f64, D>)> {
    if t1 == t0 {
        return Ok((t0, y0));
    }
    if !t0.is_finite() || !t1.is_finite() {
        return Err(DynamicsError::InvalidParameter("non-finite epoch".into()));
    }
    let span = t1 - t0;
    let mut solver = Dop853::from_param(
        Borrowed(rhs),
        t0,
        t1,
        span,
        y0,
        tol.rtol,
        tol.atol,
        0.9,
        0.0,
        0.333,
        6.0,
        span.abs(),
        0.0,
        tol.max_steps,
        u32::MAX,
        OutputType::Sparse,
    );
    let outcome = solver.integrate();
    if let Some(e) = rhs.error.borrow_mut().take() {
        return Err(e);
    }
    outcome.map_err(|e| DynamicsError::Propagation(format!("{e:?}")))?;
    let (t_end, y_end) = match (solver.x_out().last(), solver.y_out().last()) {
        (Some(t), Some(y)) => (*t, *y),
        _ => return Err(DynamicsError::Internal("integrator produced no output".into())),
    };
    if !y_end.iter().all(|v| v.is_finite()) {
        return Err(DynamicsError::NonFinite(t_end));
    }
    Ok((t_end, y_end))
}

pub(super) fn unpack_matrix6(y: &[f64]) -> Matrix6<f64> {
    Matrix6::from_column_slice(&y[..36])
}

/// Propagate the uncontrolled state from `t0` to `t1`.
pub fn propagate(model: &DynamicsModel, x0: &State, t0: f64, t1: f64, tol: Tolerances) -> Result<State> {
    let rhs = Rhs::new(|t, y: &SVector<f64, 6>, dy: &mut SVector<f64, 6>| {
        model.drift(y, t).map(|d| dy.copy_from(&d))
    });
    Ok(integrate(&rhs, *x0, t0, t1, tol)?.1)
}

/// Propagate the state and state transition matrix `Φ(t1, t0)`.
pub fn propagate_with_stm(
    model: &DynamicsModel,
    x0: &State,
    t0: f64,
    t1: f64,
    tol: Tolerances,
) -> Result<(State, Matrix6<f64>)> {
    let rhs = Rhs::new(|t, y: &SVector<f64, 42>, dy: &mut SVector<f64, 42>| stm_rhs(model, t, y, dy));
    let (_, y) = integrate(&rhs, pack_stm(x0), t0, t1, tol)?;
    Ok((y.fixed_rows::<6>(0).into_owned(), unpack_matrix6(&y.as_slice()[6..])))
}

fn pack_stm(x0: &State) -> SVector<f64, 42> {
    let mut y0 = SVector::<f64, 42>::zeros();
    y0.fixed_rows_mut::<6>(0).copy_from(x0);
    for i in 0..6 {
        y0[6 + 7 * i] = 1.0;
    }
    y0
}

fn stm_rhs(
    model: &DynamicsModel,
    t: f64,
    y: &SVector<f64, 42>,
    dy: &mut SVector<f64, 42>,
) -> Result<()> {
    let x: State = y.fixed_rows::<6>(0).into_owned();
    let f = model.drift(&x, t)?;
    let a = model.jacobian(&x, t)?;
    let phi = unpack_matrix6(&y.as_slice()[6..]);
    dy.fixed_rows_mut::<6>(0).copy_from(&f);
    dy.fixed_rows_mut::<36>(6).copy_from_slice((a * phi).as_slice());
    Ok(())
}

/// Result of propagating one interval together with its linearization.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentPropagation {
    pub state: State,
    pub stm: Matrix6<f64>,
    /// Discrete input matrix: `Φ B` for impulses, `∫Φ B` for held
    /// accelerations.
    pub input: Matrix6x3<f64>,
    /// Process-noise covariance accumulated over the interval.
    pub process_cov: Matrix6<f64>,
}

/// Propagate `x0` over `[t0, t1]` with the state transition matrix and the
/// accumulated covariance of white acceleration noise with intensity
/// `sigma_accel²` acting through `B`. `u` is an impulse applied at `t0` or a
/// held acceleration, depending on the model's control type.
pub fn propagate_segment(
    model: &DynamicsModel,
    x0: &State,
    u: &Control,
    sigma_accel: f64,
    t0: f64,
    t1: f64,
    tol: Tolerances,
) -> Result<SegmentPropagation> {
    let seg = super::discretize::integrate_segment(model, x0, u, sigma_accel, t0, t1, tol)?;
    let input = match model.control_type() {
        super::ControlType::Impulsive => seg.stm * super::discretize::b_matrix(),
        super::ControlType::ZohContinuous => seg.gamma_b,
    };
    Ok(SegmentPropagation {
        state: seg.final_state,
        stm: seg.stm,
        input,
        process_cov: seg.process_cov,
    })
}

/// Find the first crossing of the `y = 0` plane after `t0 + skip`, searching
/// up to `t_max`. Returns the crossing epoch, state and `Φ(t_c, t0)`.
pub fn find_plane_crossing(
    model: &DynamicsModel,
    x0: &State,
    t0: f64,
    skip: f64,
    t_max: f64,
    tol: Tolerances,
) -> Result<(f64, State, Matrix6<f64>)> {
    let mut prev: Option<(f64, SVector<f64, 42>)> = None;
    let bracket = RefCell::new(None::<(f64, SVector<f64, 42>)>);
    let dir = (t_max - t0).signum();
    let stop = |t: f64, y: &SVector<f64, 42>| {
        let found = match &prev {
            Some((_, yp)) if (t - t0) * dir > skip => yp[1].signum() != y[1].signum() || y[1] == 0.0,
            _ => false,
        };
        if found {
            *bracket.borrow_mut() = prev;
        }
        prev = Some((t, *y));
        found
    };
    let rhs = Rhs::new(|t, y: &SVector<f64, 42>, dy: &mut SVector<f64, 42>| stm_rhs(model, t, y, dy)).with_stop(stop);
    integrate(&rhs, pack_stm(x0), t0, t_max, tol)?;
    drop(rhs);
    let (mut t, mut y) = bracket.into_inner().ok_or(DynamicsError::NoCrossing(t_max))?;
    // Newton refinement in time from the last step before the sign change.
    let (t_start, y_start) = (t, y);
    let mut tau = 0.0;
    for _ in 0..50 {
        let x: State = y.fixed_rows::<6>(0).into_owned();
        let ydot = model.drift(&x, t)?[1];
        if ydot == 0.0 {
            return Err(DynamicsError::NoCrossing(t));
        }
        let step = -x[1] / ydot;
        tau += step;
        let rhs = Rhs::new(|t, y: &SVector<f64, 42>, dy: &mut SVector<f64, 42>| stm_rhs(model, t, y, dy));
        y = integrate(&rhs, y_start, t_start, t_start + tau, tol)?.1;
        t = t_start + tau;
        if step.abs() <= 1e-14 * t.abs().max(1.0) {
            break;
        }
    }
    Ok((
        t,
        y.fixed_rows::<6>(0).into_owned(),
        unpack_matrix6(&y.as_slice()[6..]),
    ))
}

#[cfg(test)]
mod tests {
    use super::super::*;
    use super::*;

    fn cr3bp() -> DynamicsModel {
        DynamicsModel::cr3bp(MU_EARTH_MOON, EARTH_MOON_LSTAR, EARTH_MOON_TSTAR, ControlType::Impulsive).unwrap()
    }

    #[test]
    fn zero_length_propagation_is_identity() {
        let m = cr3bp();
        let x0 = State::new(1.02, 0.0, -0.18, 0.0, -0.1, 0.0);
        let (x, phi) = propagate_with_stm(&m, &x0, 0.3, 0.3, Tolerances::for_model(&m)).unwrap();
        assert_eq!(x, x0);
        assert_eq!(phi, Matrix6::identity());
    }

    #[test]
    fn two_body_circular_orbit_returns_after_one_period() {
        let m = DynamicsModel::two_body(MU_EARTH, ControlType::Impulsive).unwrap();
        let r = 7000.0;
        let v = (MU_EARTH / r).sqrt();
        let period = 2.0 * std::f64::consts::PI * (r.powi(3) / MU_EARTH).sqrt();
        let x0 = State::new(r, 0.0, 0.0, 0.0, v, 0.0);
        let x = propagate(&m, &x0, 0.0, period, Tolerances::for_model(&m)).unwrap();
        assert!((x - x0).fixed_rows::<3>(0).norm() < 1e-6, "{}", (x - x0).norm());
    }

    #[test]
    fn backward_propagation_inverts_forward() {
        let m = cr3bp();
        let tol = Tolerances::for_model(&m);
        let x0 = State::new(1.02, 0.01, -0.18, 0.002, -0.1, 0.01);
        let (x1, phi) = propagate_with_stm(&m, &x0, 0.0, 0.5, tol).unwrap();
        let (x2, phi_back) = propagate_with_stm(&m, &x1, 0.5, 0.0, tol).unwrap();
        assert!((x2 - x0).norm() < 1e-10);
        assert!((phi_back * phi - Matrix6::identity()).abs().max() < 1e-9);
    }

    #[test]
    fn singularity_surfaces_as_error() {
        let m = DynamicsModel::two_body(MU_EARTH, ControlType::Impulsive).unwrap();
        // Radial plunge reaches the origin in finite time.
        let x0 = State::new(100.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        assert!(propagate(&m, &x0, 0.0, 1e4, Tolerances::for_model(&m)).is_err());
    }

    #[test]
    fn cr3bp_stm_matches_finite_differences() {
        let m = cr3bp();
        let tol = Tolerances::for_model(&m);
        let x0 = State::new(1.02, 0.0, -0.18, 0.0, -0.1, 0.0);
        let (_, phi) = propagate_with_stm(&m, &x0, 0.0, 0.4, tol).unwrap();
        for j in 0..6 {
            let h = 1e-6;
            let mut xp = x0;
            let mut xm = x0;
            xp[j] += h;
            xm[j] -= h;
            let col = (propagate(&m, &xp, 0.0, 0.4, tol).unwrap() - propagate(&m, &xm, 0.0, 0.4, tol).unwrap()) / (2.0 * h);
            let err = (col - phi.column(j)).abs().max();
            assert!(err < 1e-5 * phi.abs().max(), "column {j} error {err}");
        }
    }

    #[test]
    fn plane_crossing_lands_on_plane() {
        let m = cr3bp();
        let tol = Tolerances::for_model(&m);
        let x0 = State::new(1.0, 0.0, -0.2, 0.0, -0.1, 0.0);
        let (t, x, _) = find_plane_crossing(&m, &x0, 0.0, 1e-3, 5.0, tol).unwrap();
        assert!(t > 1e-3);
        assert!(x[1].abs() < 1e-12);
        let direct = propagate(&m, &x0, 0.0, t, tol).unwrap();
        assert!((direct - x).norm() < 1e-9);
    }
}
