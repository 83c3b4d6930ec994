//! Stochastic model artifacts: execution error, observation linearization
//! and initial dispersions.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use crate::dynamics::{Control, DiscreteSegment, State};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum UncertaintyError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("observation model error: {0}")]
    Model(String),
    #[error("innovation covariance is not positive definite (min eigenvalue {0:e})")]
    NotPositiveDefinite(f64),
}

pub type Result<T> = std::result::Result<T, UncertaintyError>;

/// Gates execution-error coefficients. Velocities share the unit of the
/// control vector; `sigma2` is a fraction and `sigma4` is in radians.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GatesParams {
    pub sigma1: f64,
    pub sigma2: f64,
    pub sigma3: f64,
    pub sigma4: f64,
}

impl GatesParams {
    pub fn new(sigma1: f64, sigma2: f64, sigma3: f64, sigma4: f64) -> Result<Self> {
        let p = Self {
            sigma1,
            sigma2,
            sigma3,
            sigma4,
        };
        for (name, v) in [("sigma1", sigma1), ("sigma2", sigma2), ("sigma3", sigma3), ("sigma4", sigma4)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(UncertaintyError::InvalidParameter(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(p)
    }

    /// Pointing and magnitude standard deviations `(σ_p, σ_m)` at `‖u‖`.
    pub fn sigmas(&self, u_norm: f64) -> (f64, f64) {
        let u2 = u_norm * u_norm;
        (
            (self.sigma3.powi(2) + self.sigma4.powi(2) * u2).sqrt(),
            (self.sigma1.powi(2) + self.sigma2.powi(2) * u2).sqrt(),
        )
    }
}

/// Frame `T(u) = [Ŝ Ê Ẑ]` with `Ẑ` along the burn. Identity for `u = 0`.
pub fn gates_frame(u: &Control) -> Matrix3<f64> {
    let n = u.norm();
    if n == 0.0 || !n.is_finite() {
        return Matrix3::identity();
    }
    let z = u / n;
    let mut e = Vector3::z().cross(&z);
    if e.norm() < 1e-9 {
        // Burn (anti)parallel to the reference axis: fall back to x.
        e = Vector3::x().cross(&z);
    }
    let e = e.normalize();
    let s = e.cross(&z);
    Matrix3::from_columns(&[s, e, z])
}

/// Execution-error factor `G_exe(u) = T(u) diag(σ_p, σ_p, σ_m)`.
pub fn gates_matrix(u: &Control, p: &GatesParams) -> Matrix3<f64> {
    let (sp, sm) = p.sigmas(u.norm());
    gates_frame(u) * Matrix3::from_diagonal(&Vector3::new(sp, sp, sm))
}

/// Set `G_exe,k = B_k G_exe(u*_k)` on a discretized segment.
pub fn attach_execution_noise(seg: &mut DiscreteSegment, u_ref: &Control, p: &GatesParams) {
    let g = gates_matrix(u_ref, p);
    let g = DMatrix::from_column_slice(3, 3, g.as_slice());
    seg.g_exe = &seg.b * g;
}

type ObsFn = Arc<dyn Fn(&State) -> DVector<f64> + Send + Sync>;
type ObsMatFn = Arc<dyn Fn(&State) -> DMatrix<f64> + Send + Sync>;

/// Measurement model `y = f_obs(x) + G_obs(x) w`.
#[derive(Clone)]
pub struct ObservationModel {
    f_obs: ObsFn,
    g_obs: ObsMatFn,
    jacobian: Option<ObsMatFn>,
    n_y: usize,
}

impl fmt::Debug for ObservationModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ObservationModel")
            .field("n_y", &self.n_y)
            .field("analytic_jacobian", &self.jacobian.is_some())
            .finish()
    }
}

impl ObservationModel {
    /// General model; the Jacobian is taken by central differences.
    pub fn new(
        n_y: usize,
        f_obs: impl Fn(&State) -> DVector<f64> + Send + Sync + 'static,
        g_obs: impl Fn(&State) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        Self {
            f_obs: Arc::new(f_obs),
            g_obs: Arc::new(g_obs),
            jacobian: None,
            n_y,
        }
    }

    pub fn with_jacobian(mut self, jac: impl Fn(&State) -> DMatrix<f64> + Send + Sync + 'static) -> Self {
        self.jacobian = Some(Arc::new(jac));
        self
    }

    /// `f_obs(x) = x` with noise `blkdiag(σ_r I₃, σ_v I₃)`.
    pub fn full_state(sigma_r: f64, sigma_v: f64) -> Result<Self> {
        if !(sigma_r > 0.0 && sigma_v > 0.0) {
            return Err(UncertaintyError::InvalidParameter(
                "measurement standard deviations must be positive".into(),
            ));
        }
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![
            sigma_r, sigma_r, sigma_r, sigma_v, sigma_v, sigma_v,
        ]));
        Ok(Self::new(
            6,
            |x| DVector::from_column_slice(x.as_slice()),
            move |_| d.clone(),
        )
        .with_jacobian(|_| DMatrix::identity(6, 6)))
    }

    pub fn dim(&self) -> usize {
        self.n_y
    }

    pub fn eval(&self, x: &State) -> DVector<f64> {
        (self.f_obs)(x)
    }

    pub fn noise_factor(&self, x: &State) -> DMatrix<f64> {
        (self.g_obs)(x)
    }

    pub fn jacobian(&self, x: &State) -> DMatrix<f64> {
        match &self.jacobian {
            Some(j) => j(x),
            None => {
                let mut c = DMatrix::zeros(self.n_y, 6);
                for j in 0..6 {
                    let h = 6e-6 * x[j].abs().max(1.0);
                    let mut xp = *x;
                    let mut xm = *x;
                    xp[j] += h;
                    xm[j] -= h;
                    c.set_column(j, &((self.eval(&xp) - self.eval(&xm)) / (2.0 * h)));
                }
                c
            }
        }
    }
}

/// `y_k ≈ C_k x_k + D_k w + c_obs,k` about a reference state.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearObservation {
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub c_obs: DVector<f64>,
}

pub fn linearize_observation(m: &ObservationModel, x_ref: &State) -> Result<LinearObservation> {
    let c = m.jacobian(x_ref);
    let d = m.noise_factor(x_ref);
    let y = m.eval(x_ref);
    if c.nrows() != m.dim() || y.len() != m.dim() || d.nrows() != m.dim() {
        return Err(UncertaintyError::Model("observation dimensions are inconsistent".into()));
    }
    if !c.iter().chain(d.iter()).chain(y.iter()).all(|v| v.is_finite()) {
        return Err(UncertaintyError::Model("non-finite observation linearization".into()));
    }
    let xr = DVector::from_column_slice(x_ref.as_slice());
    let c_obs = y - &c * xr;
    Ok(LinearObservation { c, d, c_obs })
}

/// `C P̃⁻ Cᵀ + D Dᵀ`, symmetrized.
pub fn innovation_covariance(c: &DMatrix<f64>, d: &DMatrix<f64>, p_prior: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let s = c * p_prior * c.transpose() + d * d.transpose();
    let s = crate::linalg::symmetrize(&s);
    let min = crate::linalg::min_eigenvalue(&s);
    if !(min > 0.0) {
        return Err(UncertaintyError::NotPositiveDefinite(min));
    }
    Ok(s)
}

/// Initial distribution: the a-priori estimate `x̂₀⁻ ~ 𝒩(x̄₀, P̂₀⁻)` and the
/// independent estimation error `x̃₀⁻ ~ 𝒩(0, P̃₀⁻)`.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialUncertainty {
    pub mean: DVector<f64>,
    pub p_hat0: DMatrix<f64>,
    pub p_tilde0: DMatrix<f64>,
}

impl InitialUncertainty {
    pub fn new(mean: DVector<f64>, p_hat0: DMatrix<f64>, p_tilde0: DMatrix<f64>) -> Result<Self> {
        let n = mean.len();
        for (name, p) in [("estimate dispersion", &p_hat0), ("estimation error", &p_tilde0)] {
            if p.shape() != (n, n) {
                return Err(UncertaintyError::InvalidParameter(format!("{name} covariance has wrong shape")));
            }
            let asym = (p - p.transpose()).amax();
            if asym > 1e-12 * p.amax().max(f64::MIN_POSITIVE) {
                return Err(UncertaintyError::InvalidParameter(format!("{name} covariance is not symmetric")));
            }
            let min = crate::linalg::min_eigenvalue(p);
            if min < -1e-12 * p.amax() {
                return Err(UncertaintyError::InvalidParameter(format!("{name} covariance is not PSD")));
            }
        }
        Ok(Self { mean, p_hat0, p_tilde0 })
    }

    /// Diagonal covariance `blkdiag(σ_r² I₃, σ_v² I₃)`.
    pub fn pos_vel_cov(sigma_r: f64, sigma_v: f64) -> DMatrix<f64> {
        let (r, v) = (sigma_r * sigma_r, sigma_v * sigma_v);
        DMatrix::from_diagonal(&DVector::from_vec(vec![r, r, r, v, v, v]))
    }
}
