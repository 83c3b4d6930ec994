//! Equations of motion for the three supported orbital models, state
//! transition matrix propagation, and discretization of a reference
//! trajectory into a time-indexed linear system.
//!
//! All models share the control-affine form `ẋ = f₀(x, t) + B u` with
//! `B = [0₃; I₃]` and a 6-dimensional Cartesian state (position, velocity).

mod discretize;
mod propagate;

use std::fmt;
use std::sync::Arc;

use nalgebra::{Matrix3, Matrix6, Vector3, Vector6};
use serde::{Deserialize, Serialize};

pub use discretize::{consistency_residual, discretize_segment, discretize_trajectory, DiscreteSegment, ProcessNoise};
pub use propagate::{
    find_plane_crossing, propagate, propagate_segment, propagate_with_stm, SegmentPropagation,
    Tolerances,
};

pub type State = Vector6<f64>;
pub type Control = Vector3<f64>;

/// Standard gravitational parameter of the Earth [km³/s²].
pub const MU_EARTH: f64 = 398_600.441_8;
/// Earth–Moon mass ratio used for the CR3BP.
pub const MU_EARTH_MOON: f64 = 0.012_150_585;
/// Earth–Moon characteristic length [km].
pub const EARTH_MOON_LSTAR: f64 = 3.847_48e5;
/// Earth–Moon characteristic time [s].
pub const EARTH_MOON_TSTAR: f64 = 3.757_00e5;
/// Mean lunar radius [km].
pub const MOON_RADIUS: f64 = 1_737.4;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DynamicsError {
    #[error("invalid model parameter: {0}")]
    InvalidParameter(String),
    #[error("singular radius {radius:e} at t = {t}")]
    SingularRadius { radius: f64, t: f64 },
    #[error("non-finite state at t = {0}")]
    NonFinite(f64),
    #[error("propagation failed: {0}")]
    Propagation(String),
    #[error("no plane crossing found before t = {0}")]
    NoCrossing(f64),
    #[error("internal error: {0}")]
    Internal(String),
}

pub type Result<T> = std::result::Result<T, DynamicsError>;

/// How the discrete controls `u_k` act on the continuous dynamics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlType {
    /// Delta-V applied at the node epochs.
    Impulsive,
    /// Acceleration held constant over each interval.
    ZohContinuous,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ModelKind {
    /// Clohessy–Wiltshire–Hill relative motion; `mean_motion` in rad/s.
    Cwh { mean_motion: f64 },
    /// Nondimensional circular restricted three-body problem.
    Cr3bp {
        mass_ratio: f64,
        l_star: f64,
        t_star: f64,
    },
    /// Point-mass two-body problem; `mu` in km³/s².
    TwoBody { mu: f64 },
}

/// Perturbing acceleration `a(x, t)` added through `B`.
pub type Perturbation = Arc<dyn Fn(&State, f64) -> Vector3<f64> + Send + Sync>;

#[derive(Clone)]
pub struct DynamicsModel {
    kind: ModelKind,
    control_type: ControlType,
    perturbation: Option<Perturbation>,
}

impl fmt::Debug for DynamicsModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DynamicsModel")
            .field("kind", &self.kind)
            .field("control_type", &self.control_type)
            .field("perturbed", &self.perturbation.is_some())
            .finish()
    }
}

fn positive(name: &str, value: f64) -> Result<f64> {
    if value.is_finite() && value > 0.0 {
        Ok(value)
    } else {
        Err(DynamicsError::InvalidParameter(format!(
            "{name} must be positive and finite, got {value}"
        )))
    }
}

impl DynamicsModel {
    pub fn cwh(mean_motion: f64, control_type: ControlType) -> Result<Self> {
        positive("mean motion", mean_motion)?;
        Ok(Self {
            kind: ModelKind::Cwh { mean_motion },
            control_type,
            perturbation: None,
        })
    }

    /// CWH model for a circular chief orbit of radius `r0` about a body with
    /// gravitational parameter `mu`: `n = sqrt(mu / r0³)`.
    pub fn cwh_from_chief_radius(r0: f64, mu: f64, control_type: ControlType) -> Result<Self> {
        positive("chief radius", r0)?;
        positive("gravitational parameter", mu)?;
        Self::cwh((mu / r0.powi(3)).sqrt(), control_type)
    }

    pub fn cr3bp(mass_ratio: f64, l_star: f64, t_star: f64, control_type: ControlType) -> Result<Self> {
        if !(mass_ratio > 0.0 && mass_ratio < 1.0) {
            return Err(DynamicsError::InvalidParameter(format!(
                "mass ratio must lie in (0, 1), got {mass_ratio}"
            )));
        }
        positive("characteristic length", l_star)?;
        positive("characteristic time", t_star)?;
        Ok(Self {
            kind: ModelKind::Cr3bp {
                mass_ratio,
                l_star,
                t_star,
            },
            control_type,
            perturbation: None,
        })
    }

    pub fn two_body(mu: f64, control_type: ControlType) -> Result<Self> {
        positive("gravitational parameter", mu)?;
        Ok(Self {
            kind: ModelKind::TwoBody { mu },
            control_type,
            perturbation: None,
        })
    }

    /// Attach a perturbing acceleration. Its Jacobian is taken by central
    /// differences.
    pub fn with_perturbation(mut self, accel: Perturbation) -> Self {
        self.perturbation = Some(accel);
        self
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn control_type(&self) -> ControlType {
        self.control_type
    }

    pub fn with_control_type(mut self, control_type: ControlType) -> Self {
        self.control_type = control_type;
        self
    }

    /// Characteristic velocity `l*/t*` for the CR3BP, `None` otherwise.
    pub fn characteristic_velocity(&self) -> Option<f64> {
        match self.kind {
            ModelKind::Cr3bp { l_star, t_star, .. } => Some(l_star / t_star),
            _ => None,
        }
    }

    /// Length below which a radius is treated as a collision singularity.
    fn singular_radius(&self) -> f64 {
        match self.kind {
            ModelKind::Cwh { .. } => 0.0,
            ModelKind::Cr3bp { .. } => 1e3 * f64::EPSILON,
            ModelKind::TwoBody { mu } => 1e3 * f64::EPSILON * mu.cbrt(),
        }
    }

    /// Uncontrolled dynamics `f₀(x, t)` including any perturbation.
    pub fn drift(&self, x: &State, t: f64) -> Result<State> {
        if !x.iter().all(|v| v.is_finite()) {
            return Err(DynamicsError::NonFinite(t));
        }
        let r = x.fixed_rows::<3>(0).into_owned();
        let v = x.fixed_rows::<3>(3).into_owned();
        let accel = match self.kind {
            ModelKind::Cwh { mean_motion: n } => {
                let n2 = n * n;
                Vector3::new(
                    3.0 * n2 * r.x + 2.0 * n * v.y,
                    -2.0 * n * v.x,
                    -n2 * r.z,
                )
            }
            ModelKind::TwoBody { mu } => {
                let rn = r.norm();
                self.check_radius(rn, t)?;
                -mu / rn.powi(3) * r
            }
            ModelKind::Cr3bp { mass_ratio: mu, .. } => {
                let (r1, r2) = self.primary_distances(&r, t)?;
                let (x_, y_, z_) = (r.x, r.y, r.z);
                let a1 = (1.0 - mu) / r1.powi(3);
                let a2 = mu / r2.powi(3);
                Vector3::new(
                    2.0 * v.y + x_ - a1 * (x_ + mu) - a2 * (x_ - 1.0 + mu),
                    -2.0 * v.x + y_ - a1 * y_ - a2 * y_,
                    -a1 * z_ - a2 * z_,
                )
            }
        };
        let accel = match &self.perturbation {
            Some(p) => accel + p(x, t),
            None => accel,
        };
        let mut out = State::zeros();
        out.fixed_rows_mut::<3>(0).copy_from(&v);
        out.fixed_rows_mut::<3>(3).copy_from(&accel);
        Ok(out)
    }

    /// `f₀(x, t) + B u`.
    pub fn eval_eom(&self, x: &State, u: &Control, t: f64) -> Result<State> {
        let mut dx = self.drift(x, t)?;
        let mut lower = dx.fixed_rows_mut::<3>(3);
        lower += u;
        Ok(dx)
    }

    /// `∂f₀/∂x` at `(x, t)`.
    pub fn jacobian(&self, x: &State, t: f64) -> Result<Matrix6<f64>> {
        let r = x.fixed_rows::<3>(0).into_owned();
        let mut a = Matrix6::zeros();
        a.fixed_view_mut::<3, 3>(0, 3).copy_from(&Matrix3::identity());
        match self.kind {
            ModelKind::Cwh { mean_motion: n } => {
                let n2 = n * n;
                a[(3, 0)] = 3.0 * n2;
                a[(5, 2)] = -n2;
                a[(3, 4)] = 2.0 * n;
                a[(4, 3)] = -2.0 * n;
            }
            ModelKind::TwoBody { mu } => {
                let rn = r.norm();
                self.check_radius(rn, t)?;
                let grad = -mu / rn.powi(3) * Matrix3::identity()
                    + 3.0 * mu / rn.powi(5) * (r * r.transpose());
                a.fixed_view_mut::<3, 3>(3, 0).copy_from(&grad);
            }
            ModelKind::Cr3bp { mass_ratio: mu, .. } => {
                let (r1, r2) = self.primary_distances(&r, t)?;
                let d1 = Vector3::new(r.x + mu, r.y, r.z);
                let d2 = Vector3::new(r.x - 1.0 + mu, r.y, r.z);
                let c1 = (1.0 - mu) / r1.powi(3);
                let c2 = mu / r2.powi(3);
                let mut hess = -(c1 + c2) * Matrix3::identity()
                    + 3.0 * (1.0 - mu) / r1.powi(5) * (d1 * d1.transpose())
                    + 3.0 * mu / r2.powi(5) * (d2 * d2.transpose());
                hess[(0, 0)] += 1.0;
                hess[(1, 1)] += 1.0;
                a.fixed_view_mut::<3, 3>(3, 0).copy_from(&hess);
                a[(3, 4)] = 2.0;
                a[(4, 3)] = -2.0;
            }
        }
        if let Some(p) = &self.perturbation {
            for j in 0..6 {
                let h = 1e-6 * x[j].abs().max(1.0);
                let mut xp = *x;
                let mut xm = *x;
                xp[j] += h;
                xm[j] -= h;
                let col = (p(&xp, t) - p(&xm, t)) / (2.0 * h);
                for i in 0..3 {
                    a[(3 + i, j)] += col[i];
                }
            }
        }
        Ok(a)
    }

    /// Jacobi constant `C = x² + y² + 2(1−μ)/r₁ + 2μ/r₂ − v²` (CR3BP only).
    pub fn jacobi_constant(&self, x: &State) -> Option<f64> {
        match self.kind {
            ModelKind::Cr3bp { mass_ratio: mu, .. } => {
                let r1 = ((x[0] + mu).powi(2) + x[1].powi(2) + x[2].powi(2)).sqrt();
                let r2 = ((x[0] - 1.0 + mu).powi(2) + x[1].powi(2) + x[2].powi(2)).sqrt();
                let v2 = x.fixed_rows::<3>(3).norm_squared();
                Some(x[0].powi(2) + x[1].powi(2) + 2.0 * (1.0 - mu) / r1 + 2.0 * mu / r2 - v2)
            }
            _ => None,
        }
    }

    /// Distance from the secondary body (CR3BP) or the central body (2BP).
    pub fn body_distance(&self, x: &State) -> Option<f64> {
        match self.kind {
            ModelKind::Cr3bp { mass_ratio: mu, .. } => {
                Some(((x[0] - 1.0 + mu).powi(2) + x[1].powi(2) + x[2].powi(2)).sqrt())
            }
            ModelKind::TwoBody { .. } => Some(x.fixed_rows::<3>(0).norm()),
            ModelKind::Cwh { .. } => None,
        }
    }

    fn check_radius(&self, radius: f64, t: f64) -> Result<()> {
        if !(radius > self.singular_radius()) {
            return Err(DynamicsError::SingularRadius { radius, t });
        }
        Ok(())
    }

    fn primary_distances(&self, r: &Vector3<f64>, t: f64) -> Result<(f64, f64)> {
        let ModelKind::Cr3bp { mass_ratio: mu, .. } = self.kind else {
            unreachable!("primary distances requested for a non-CR3BP model")
        };
        let r1 = ((r.x + mu).powi(2) + r.y.powi(2) + r.z.powi(2)).sqrt();
        let r2 = ((r.x - 1.0 + mu).powi(2) + r.y.powi(2) + r.z.powi(2)).sqrt();
        self.check_radius(r1, t)?;
        self.check_radius(r2, t)?;
        Ok((r1, r2))
    }
}

/// Reference trajectory sampled at the node epochs `t_0 < ... < t_N`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceTrajectory {
    epochs: Vec<f64>,
    states: Vec<State>,
    controls: Vec<Control>,
}

impl ReferenceTrajectory {
    pub fn new(epochs: Vec<f64>, states: Vec<State>, controls: Vec<Control>) -> Result<Self> {
        if epochs.len() < 2 {
            return Err(DynamicsError::InvalidParameter(
                "reference needs at least two epochs".into(),
            ));
        }
        if states.len() != epochs.len() || controls.len() + 1 != epochs.len() {
            return Err(DynamicsError::InvalidParameter(format!(
                "reference has {} epochs, {} states and {} controls",
                epochs.len(),
                states.len(),
                controls.len()
            )));
        }
        if epochs.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(DynamicsError::InvalidParameter(
                "reference epochs must be strictly increasing".into(),
            ));
        }
        Ok(Self {
            epochs,
            states,
            controls,
        })
    }

    /// Uncontrolled reference obtained by propagating `x0` through `epochs`.
    pub fn ballistic(model: &DynamicsModel, x0: State, epochs: Vec<f64>, tol: Tolerances) -> Result<Self> {
        let mut states = Vec::with_capacity(epochs.len());
        states.push(x0);
        for w in epochs.windows(2) {
            let last = *states.last().expect("non-empty");
            states.push(propagate(model, &last, w[0], w[1], tol)?);
        }
        let controls = vec![Control::zeros(); epochs.len().saturating_sub(1)];
        Self::new(epochs, states, controls)
    }

    /// Number of intervals `N`.
    pub fn segments(&self) -> usize {
        self.epochs.len() - 1
    }

    pub fn epochs(&self) -> &[f64] {
        &self.epochs
    }

    pub fn states(&self) -> &[State] {
        &self.states
    }

    pub fn controls(&self) -> &[Control] {
        &self.controls
    }

    pub fn with_controls(mut self, controls: Vec<Control>) -> Result<Self> {
        if controls.len() != self.controls.len() {
            return Err(DynamicsError::InvalidParameter(
                "control count does not match the reference".into(),
            ));
        }
        self.controls = controls;
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cr3bp() -> DynamicsModel {
        DynamicsModel::cr3bp(MU_EARTH_MOON, EARTH_MOON_LSTAR, EARTH_MOON_TSTAR, ControlType::Impulsive).unwrap()
    }

    #[test]
    fn cwh_origin_is_equilibrium() {
        let m = DynamicsModel::cwh(1e-3, ControlType::Impulsive).unwrap();
        let dx = m.eval_eom(&State::zeros(), &Control::zeros(), 0.0).unwrap();
        assert_eq!(dx, State::zeros());
    }

    #[test]
    fn cwh_mean_motion_from_chief_radius() {
        let m = DynamicsModel::cwh_from_chief_radius(7228.0, MU_EARTH, ControlType::Impulsive).unwrap();
        let a = m.jacobian(&State::zeros(), 0.0).unwrap();
        let n = (MU_EARTH / 7228.0_f64.powi(3)).sqrt();
        assert!((n - 1.0274e-3).abs() < 1e-7);
        assert!((a[(3, 0)] - 3.0 * n * n).abs() < 1e-18);
        assert!((a[(3, 0)] - 3.167e-6).abs() < 1e-9);
    }

    #[test]
    fn cr3bp_x_axis_has_no_out_of_line_acceleration() {
        let m = cr3bp();
        let x = State::new(0.8, 0.0, 0.0, 0.0, 0.0, 0.0);
        let dx = m.eval_eom(&x, &Control::zeros(), 0.0).unwrap();
        assert_eq!(dx[4], 0.0);
        assert_eq!(dx[5], 0.0);
    }

    #[test]
    fn singular_radius_is_a_domain_error() {
        let m = cr3bp();
        let x = State::new(1.0 - MU_EARTH_MOON, 0.0, 0.0, 0.0, 0.0, 0.0);
        assert!(matches!(
            m.drift(&x, 0.0),
            Err(DynamicsError::SingularRadius { .. })
        ));
        let tb = DynamicsModel::two_body(MU_EARTH, ControlType::Impulsive).unwrap();
        assert!(tb.drift(&State::zeros(), 0.0).is_err());
    }

    #[test]
    fn invalid_parameters_rejected() {
        assert!(DynamicsModel::cwh(0.0, ControlType::Impulsive).is_err());
        assert!(DynamicsModel::cr3bp(1.2, 1.0, 1.0, ControlType::Impulsive).is_err());
        assert!(DynamicsModel::two_body(-1.0, ControlType::Impulsive).is_err());
    }

    fn fd_jacobian(m: &DynamicsModel, x: &State) -> Matrix6<f64> {
        let mut j = Matrix6::zeros();
        for c in 0..6 {
            let h = 1e-6 * x[c].abs().max(1e-3);
            let mut xp = *x;
            let mut xm = *x;
            xp[c] += h;
            xm[c] -= h;
            let col = (m.drift(&xp, 0.0).unwrap() - m.drift(&xm, 0.0).unwrap()) / (2.0 * h);
            j.set_column(c, &col);
        }
        j
    }

    #[test]
    fn analytic_jacobians_match_central_differences() {
        let x = State::new(1.02, 0.03, -0.18, 0.01, -0.1, 0.02);
        let m = cr3bp();
        let err = (m.jacobian(&x, 0.0).unwrap() - fd_jacobian(&m, &x)).abs().max();
        assert!(err < 1e-6, "cr3bp jacobian error {err}");

        let tb = DynamicsModel::two_body(MU_EARTH, ControlType::Impulsive).unwrap();
        let x = State::new(7000.0, 100.0, -300.0, 0.1, 7.5, 0.3);
        let err = (tb.jacobian(&x, 0.0).unwrap() - fd_jacobian(&tb, &x)).abs().max();
        assert!(err < 1e-10, "2bp jacobian error {err}");
    }

    #[test]
    fn perturbation_jacobian_by_differences() {
        let j2like: Perturbation = Arc::new(|x: &State, _t| {
            Vector3::new(1e-3 * x[0] * x[1], -2e-3 * x[2], 5e-4 * x[0].powi(2))
        });
        let m = DynamicsModel::two_body(MU_EARTH, ControlType::Impulsive)
            .unwrap()
            .with_perturbation(j2like);
        let x = State::new(7000.0, 10.0, -30.0, 0.1, 7.5, 0.3);
        let rel = (m.jacobian(&x, 0.0).unwrap() - fd_jacobian(&m, &x)).abs().max();
        assert!(rel < 1e-5, "perturbed jacobian error {rel}");
    }

    #[test]
    fn reference_validates_shape() {
        let s = vec![State::zeros(); 3];
        assert!(ReferenceTrajectory::new(vec![0.0, 1.0, 1.0], s.clone(), vec![Control::zeros(); 2]).is_err());
        assert!(ReferenceTrajectory::new(vec![0.0, 1.0, 2.0], s.clone(), vec![Control::zeros(); 3]).is_err());
        assert!(ReferenceTrajectory::new(vec![0.0, 1.0, 2.0], s, vec![Control::zeros(); 2]).is_ok());
    }
}
