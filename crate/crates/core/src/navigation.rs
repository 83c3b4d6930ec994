//! A-priori Kalman filter schedule along the reference trajectory.

use nalgebra::DMatrix;

use crate::dynamics::DiscreteSegment;
use crate::linalg::{min_eigenvalue, symmetrize};
use crate::uncertainty::LinearObservation;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NavigationError {
    #[error("singular innovation covariance at node {0}")]
    SingularInnovation(usize),
    #[error("covariance lost positive semidefiniteness at node {node} (min eigenvalue {min_eig:e}, trace {trace:e})")]
    NotPsd { node: usize, min_eig: f64, trace: f64 },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

pub type Result<T> = std::result::Result<T, NavigationError>;

/// Gains and covariances for nodes `0..=N`.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterSchedule {
    pub gains: Vec<DMatrix<f64>>,
    pub p_prior: Vec<DMatrix<f64>>,
    pub p_post: Vec<DMatrix<f64>>,
    pub p_innov: Vec<DMatrix<f64>>,
    pub measured: Vec<bool>,
}

impl FilterSchedule {
    pub fn nodes(&self) -> usize {
        self.gains.len()
    }
}

/// `L = P̃⁻Cᵀ(C P̃⁻ Cᵀ + D Dᵀ)⁻¹`, computed by a Cholesky solve.
pub fn kalman_gain(p_prior: &DMatrix<f64>, c: &DMatrix<f64>, d: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let s = symmetrize(&(c * p_prior * c.transpose() + d * d.transpose()));
    let chol = s.cholesky()?;
    // S Lᵀ = C P̃⁻ since both S and P̃⁻ are symmetric.
    let lt = chol.solve(&(c * p_prior));
    Some(lt.transpose())
}

/// Joseph-form measurement update.
pub fn joseph_update(
    p_prior: &DMatrix<f64>,
    gain: &DMatrix<f64>,
    c: &DMatrix<f64>,
    d: &DMatrix<f64>,
) -> DMatrix<f64> {
    let n = p_prior.nrows();
    let i_lc = DMatrix::identity(n, n) - gain * c;
    let ld = gain * d;
    symmetrize(&(&i_lc * p_prior * i_lc.transpose() + &ld * ld.transpose()))
}

fn check_psd(p: &DMatrix<f64>, node: usize) -> Result<()> {
    let trace = p.trace();
    let min_eig = min_eigenvalue(p);
    if min_eig < -1e-10 * trace.abs().max(f64::MIN_POSITIVE) {
        return Err(NavigationError::NotPsd { node, min_eig, trace });
    }
    Ok(())
}

/// Run the covariance recursion
/// `P̃⁻_k = A P̃_{k−1} Aᵀ + G_exe G_exeᵀ + G Gᵀ` with Joseph-form updates at
/// measured nodes. Unmeasured nodes get `L_k = 0` and `P̃_k = P̃⁻_k`.
pub fn build_filter_schedule(
    segments: &[DiscreteSegment],
    obs: &[LinearObservation],
    p_tilde0_prior: &DMatrix<f64>,
    measured: &[bool],
) -> Result<FilterSchedule> {
    let nodes = segments.len() + 1;
    if obs.len() != nodes || measured.len() != nodes {
        return Err(NavigationError::Dimension(format!(
            "{} segments need {nodes} observations and mask entries, got {} and {}",
            segments.len(),
            obs.len(),
            measured.len()
        )));
    }
    let nx = p_tilde0_prior.nrows();
    let mut gains = Vec::with_capacity(nodes);
    let mut p_prior = Vec::with_capacity(nodes);
    let mut p_post = Vec::with_capacity(nodes);
    let mut p_innov = Vec::with_capacity(nodes);
    let mut prior = symmetrize(p_tilde0_prior);
    for k in 0..nodes {
        if k > 0 {
            let s = &segments[k - 1];
            let post: &DMatrix<f64> = &p_post[k - 1];
            prior = symmetrize(
                &(&s.a * post * s.a.transpose() + &s.g_exe * s.g_exe.transpose() + &s.g * s.g.transpose()),
            );
        }
        check_psd(&prior, k)?;
        let o = &obs[k];
        if o.c.ncols() != nx {
            return Err(NavigationError::Dimension(format!("observation {k} has wrong state dimension")));
        }
        let innov = symmetrize(&(&o.c * &prior * o.c.transpose() + &o.d * o.d.transpose()));
        let (gain, post) = if measured[k] {
            let gain = kalman_gain(&prior, &o.c, &o.d).ok_or(NavigationError::SingularInnovation(k))?;
            let post = joseph_update(&prior, &gain, &o.c, &o.d);
            (gain, post)
        } else {
            (DMatrix::zeros(nx, o.c.nrows()), prior.clone())
        };
        check_psd(&post, k)?;
        gains.push(gain);
        p_prior.push(prior.clone());
        p_post.push(post);
        p_innov.push(innov);
    }
    Ok(FilterSchedule {
        gains,
        p_prior,
        p_post,
        p_innov,
        measured: measured.to_vec(),
    })
}
