//! Discretization of the linearized dynamics about a reference trajectory.
//!
//! Over each interval the augmented system
//!
//! ```text
//! Φ̇  = AΦ,            Φ(t_k)  = I
//! Γ̇  = AΓ + B,        Γ(t_k)  = 0     (held acceleration only)
//! γ̇  = Aγ + c(t),     γ(t_k)  = 0,    c = f₀(x*) − A x*
//! Q̇  = AQ + QAᵀ + BBᵀ, Q(t_k) = 0
//! ```
//!
//! is integrated forward alongside the reference. This yields the same
//! convolution integrals as the `Φ(t_{k+1}, τ)` form without inverting `Φ`.

use nalgebra::{DMatrix, DVector, Matrix6, Matrix6x3, SVector};
use rayon::prelude::*;

use super::propagate::{integrate, unpack_matrix6, Rhs, Tolerances};
use super::{Control, ControlType, DynamicsError, DynamicsModel, ReferenceTrajectory, Result, State};
use crate::linalg;

const AUG: usize = 102;
const PHI: usize = 6;
const GAMMA_B: usize = 42;
const GAMMA_C: usize = 60;
const QCOV: usize = 66;

/// White acceleration noise acting through `B` with one-sided spectral
/// density `sigma_accel²` per axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProcessNoise {
    pub sigma_accel: f64,
}

/// One interval of the time-varying linear system
/// `x_{k+1} = A_k x_k + B_k u_k + c_k + G_k w_k + G_exe,k w_exe,k`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteSegment {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DVector<f64>,
    /// Square-root factor of the accumulated process-noise covariance.
    pub g: DMatrix<f64>,
    /// Execution-error input matrix; empty until attached.
    pub g_exe: DMatrix<f64>,
    pub dt: f64,
}

impl DiscreteSegment {
    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn control_dim(&self) -> usize {
        self.b.ncols()
    }
}

pub(crate) struct IntegratedSegment {
    pub final_state: State,
    pub stm: Matrix6<f64>,
    pub gamma_b: Matrix6x3<f64>,
    pub gamma_c: State,
    pub process_cov: Matrix6<f64>,
}

pub(crate) fn b_matrix() -> Matrix6x3<f64> {
    let mut b = Matrix6x3::zeros();
    b[(3, 0)] = 1.0;
    b[(4, 1)] = 1.0;
    b[(5, 2)] = 1.0;
    b
}

pub(crate) fn integrate_segment(
    model: &DynamicsModel,
    x0: &State,
    u: &Control,
    sigma_accel: f64,
    t0: f64,
    t1: f64,
    tol: Tolerances,
) -> Result<IntegratedSegment> {
    let bm = b_matrix();
    let bbt = bm * bm.transpose();
    let zoh = model.control_type() == ControlType::ZohContinuous;
    let held = if zoh { *u } else { Control::zeros() };

    let mut y0 = SVector::<f64, AUG>::zeros();
    let start = if zoh { *x0 } else { x0 + bm * u };
    y0.fixed_rows_mut::<6>(0).copy_from(&start);
    for i in 0..6 {
        y0[PHI + 7 * i] = 1.0;
    }

    let rhs = Rhs::new(|t, y: &SVector<f64, AUG>, dy: &mut SVector<f64, AUG>| {
        let x: State = y.fixed_rows::<6>(0).into_owned();
        let f0 = model.drift(&x, t)?;
        let a = model.jacobian(&x, t)?;
        let s = y.as_slice();
        let phi = unpack_matrix6(&s[PHI..]);
        let gb = Matrix6x3::from_column_slice(&s[GAMMA_B..GAMMA_C]);
        let gc = State::from_column_slice(&s[GAMMA_C..QCOV]);
        let q = unpack_matrix6(&s[QCOV..]);

        let mut xdot = f0;
        {
            let mut v = xdot.fixed_rows_mut::<3>(3);
            v += held;
        }
        let c = f0 - a * x;
        let qdot = a * q + q * a.transpose() + bbt;
        let gbdot = if zoh { a * gb + bm } else { Matrix6x3::zeros() };

        dy.fixed_rows_mut::<6>(0).copy_from(&xdot);
        dy.fixed_rows_mut::<36>(PHI).copy_from_slice((a * phi).as_slice());
        dy.fixed_rows_mut::<18>(GAMMA_B).copy_from_slice(gbdot.as_slice());
        dy.fixed_rows_mut::<6>(GAMMA_C).copy_from(&(a * gc + c));
        dy.fixed_rows_mut::<36>(QCOV).copy_from_slice(qdot.as_slice());
        Ok(())
    });
    let (_, y) = integrate(&rhs, y0, t0, t1, tol)?;
    let s = y.as_slice();
    let q = unpack_matrix6(&s[QCOV..]);
    Ok(IntegratedSegment {
        final_state: y.fixed_rows::<6>(0).into_owned(),
        stm: unpack_matrix6(&s[PHI..]),
        gamma_b: Matrix6x3::from_column_slice(&s[GAMMA_B..GAMMA_C]),
        gamma_c: State::from_column_slice(&s[GAMMA_C..QCOV]),
        process_cov: (q + q.transpose()) * (0.5 * sigma_accel * sigma_accel),
    })
}

/// Linearize and discretize one interval about `(x*_k, u*_k)`.
pub fn discretize_segment(
    model: &DynamicsModel,
    x_ref: &State,
    u_ref: &Control,
    noise: ProcessNoise,
    t0: f64,
    t1: f64,
    tol: Tolerances,
) -> Result<DiscreteSegment> {
    let seg = integrate_segment(model, x_ref, u_ref, noise.sigma_accel, t0, t1, tol)?;
    let b = match model.control_type() {
        ControlType::Impulsive => seg.stm * b_matrix(),
        ControlType::ZohContinuous => seg.gamma_b,
    };
    let q = DMatrix::from_column_slice(6, 6, seg.process_cov.as_slice());
    let g = linalg::psd_factor(&q, 1e-12).map_err(|lam| {
        DynamicsError::Internal(format!("process noise covariance has eigenvalue {lam:e}"))
    })?;
    Ok(DiscreteSegment {
        a: DMatrix::from_column_slice(6, 6, seg.stm.as_slice()),
        b: DMatrix::from_column_slice(6, 3, b.as_slice()),
        c: DVector::from_column_slice(seg.gamma_c.as_slice()),
        g,
        g_exe: DMatrix::zeros(6, 0),
        dt: t1 - t0,
    })
}

/// Discretize every interval of `reference`. Intervals are independent and
/// processed in parallel; the output order matches the reference.
pub fn discretize_trajectory(
    model: &DynamicsModel,
    reference: &ReferenceTrajectory,
    noise: ProcessNoise,
    tol: Tolerances,
) -> Result<Vec<DiscreteSegment>> {
    let t = reference.epochs();
    (0..reference.segments())
        .into_par_iter()
        .map(|k| {
            discretize_segment(
                model,
                &reference.states()[k],
                &reference.controls()[k],
                noise,
                t[k],
                t[k + 1],
                tol,
            )
        })
        .collect()
}

/// Residual `x*_{k+1} − (A_k x*_k + B_k u*_k + c_k)` where `x*_{k+1}` is the
/// nonlinear propagation of `(x*_k, u*_k)`.
pub fn consistency_residual(
    model: &DynamicsModel,
    seg: &DiscreteSegment,
    x_ref: &State,
    u_ref: &Control,
    t0: f64,
    tol: Tolerances,
) -> Result<f64> {
    let next = integrate_segment(model, x_ref, u_ref, 0.0, t0, t0 + seg.dt, tol)?.final_state;
    let xk = DVector::from_column_slice(x_ref.as_slice());
    let uk = DVector::from_column_slice(u_ref.as_slice());
    let lin = &seg.a * xk + &seg.b * uk + &seg.c;
    Ok((DVector::from_column_slice(next.as_slice()) - lin).amax())
}
