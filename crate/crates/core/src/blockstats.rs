//! Stacked block operators of the filtered closed-loop system and the
//! affine state/control statistics they induce.
//!
//! With `X̂ = [x̂₀; …; x̂_N]`, `U = [u₀; …; u_{N−1}]` and the innovations
//! `Y = [ỹ₀⁻; …; ỹ_N⁻]`, the filter obeys `X̂ = 𝐀x̂₀⁻ + 𝐁U + 𝐂 + 𝐋Y`.
//! Under `u_k = ū_k + K_k z_k` the estimate dispersion factors as
//! `E_{x_k}(I + 𝐁𝐊)𝐒^{1/2}` with `𝐒^{1/2} = [𝐀P̂₀⁻^{1/2}, 𝐋P_Y^{1/2}]`.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};

use crate::dynamics::DiscreteSegment;
use crate::linalg::{self, psd_factor};
use crate::navigation::FilterSchedule;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BlockError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("covariance at {0} is not positive semidefinite")]
    NotPsd(String),
}

pub type Result<T> = std::result::Result<T, BlockError>;

#[derive(Debug, Clone, PartialEq)]
pub struct BlockOperators {
    nx: usize,
    nu: usize,
    ny: usize,
    n: usize,
    pub a_blk: DMatrix<f64>,
    pub b_blk: DMatrix<f64>,
    pub c_blk: DVector<f64>,
    pub l_blk: DMatrix<f64>,
    pub l_z: DMatrix<f64>,
    pub py_sqrt: DMatrix<f64>,
    pub s_sqrt: DMatrix<f64>,
    /// Factors of the posterior estimation-error covariances `P̃_k`.
    pub p_tilde_sqrt: Vec<DMatrix<f64>>,
    transitions: Vec<DMatrix<f64>>,
}

/// Nominal controls and feedback gains for nodes `0..N`. Gains act on the
/// z-process.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub ubar: Vec<DVector<f64>>,
    pub gains: Vec<DMatrix<f64>>,
    pub maneuver_mask: Vec<bool>,
}

impl Policy {
    pub fn zero(n: usize, nu: usize, nx: usize, maneuver_mask: Vec<bool>) -> Self {
        Self {
            ubar: vec![DVector::zeros(nu); n],
            gains: vec![DMatrix::zeros(nu, nx); n],
            maneuver_mask,
        }
    }

    pub fn stacked_controls(&self) -> DVector<f64> {
        let nu = self.ubar.first().map_or(0, |u| u.len());
        DVector::from_iterator(self.ubar.len() * nu, self.ubar.iter().flat_map(|u| u.iter().copied()))
    }

    /// `ū_k = 0` and `K_k = 0` wherever no maneuver is allowed.
    pub fn respects_mask(&self) -> bool {
        self.maneuver_mask
            .iter()
            .zip(self.ubar.iter().zip(&self.gains))
            .all(|(&m, (u, k))| m || (u.iter().all(|v| *v == 0.0) && k.iter().all(|v| *v == 0.0)))
    }
}

fn block_factor(p: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    psd_factor(p, 1e-10).map_err(|_| BlockError::NotPsd(what.to_string()))
}

impl BlockOperators {
    /// Assemble the operators from the discretized segments, the filter
    /// schedule and the initial estimate dispersion `P̂₀⁻`.
    pub fn assemble(segments: &[DiscreteSegment], schedule: &FilterSchedule, p_hat0: &DMatrix<f64>) -> Result<Self> {
        let n = segments.len();
        if n == 0 {
            return Err(BlockError::Dimension("at least one segment is required".into()));
        }
        if schedule.nodes() != n + 1 {
            return Err(BlockError::Dimension(format!(
                "schedule has {} nodes for {n} segments",
                schedule.nodes()
            )));
        }
        let nx = segments[0].state_dim();
        let nu = segments[0].control_dim();
        let ny = schedule.gains[0].ncols();
        if p_hat0.shape() != (nx, nx) {
            return Err(BlockError::Dimension("initial dispersion has wrong shape".into()));
        }
        for (k, s) in segments.iter().enumerate() {
            if s.a.shape() != (nx, nx) || s.b.shape() != (nx, nu) || s.c.len() != nx {
                return Err(BlockError::Dimension(format!("segment {k} has inconsistent shapes")));
            }
        }
        for (k, l) in schedule.gains.iter().enumerate() {
            if l.shape() != (nx, ny) {
                return Err(BlockError::Dimension(format!("gain {k} has wrong shape")));
            }
        }

        let rows = (n + 1) * nx;
        let mut a_blk = DMatrix::zeros(rows, nx);
        let mut b_blk = DMatrix::zeros(rows, n * nu);
        let mut c_blk = DVector::zeros(rows);
        let mut l_blk = DMatrix::zeros(rows, (n + 1) * ny);
        a_blk.view_mut((0, 0), (nx, nx)).fill_with_identity();
        l_blk.view_mut((0, 0), (nx, ny)).copy_from(&schedule.gains[0]);
        for k in 0..n {
            let a = &segments[k].a;
            let (r0, r1) = (k * nx, (k + 1) * nx);
            let next = a * a_blk.rows(r0, nx);
            a_blk.rows_mut(r1, nx).copy_from(&next);
            let next = a * b_blk.view((r0, 0), (nx, k * nu));
            b_blk.view_mut((r1, 0), (nx, k * nu)).copy_from(&next);
            b_blk.view_mut((r1, k * nu), (nx, nu)).copy_from(&segments[k].b);
            let next = a * c_blk.rows(r0, nx) + &segments[k].c;
            c_blk.rows_mut(r1, nx).copy_from(&next);
            let next = a * l_blk.view((r0, 0), (nx, (k + 1) * ny));
            l_blk.view_mut((r1, 0), (nx, (k + 1) * ny)).copy_from(&next);
            l_blk.view_mut((r1, (k + 1) * ny), (nx, ny)).copy_from(&schedule.gains[k + 1]);
        }
        let mut l_z = l_blk.clone();
        l_z.columns_mut(0, ny).fill(0.0);

        let mut py_sqrt = DMatrix::zeros((n + 1) * ny, (n + 1) * ny);
        for (k, p) in schedule.p_innov.iter().enumerate() {
            let f = p
                .clone()
                .cholesky()
                .map(|c| c.l())
                .ok_or_else(|| BlockError::NotPsd(format!("innovation covariance {k}")))?;
            py_sqrt.view_mut((k * ny, k * ny), (ny, ny)).copy_from(&f);
        }
        let p0 = block_factor(p_hat0, "initial dispersion")?;
        let s_sqrt = linalg::hstack(&[&(&a_blk * p0), &(&l_blk * &py_sqrt)]);
        let p_tilde_sqrt = schedule
            .p_post
            .iter()
            .enumerate()
            .map(|(k, p)| block_factor(p, &format!("estimation error node {k}")))
            .collect::<Result<Vec<_>>>()?;

        Ok(Self {
            nx,
            nu,
            ny,
            n,
            a_blk,
            b_blk,
            c_blk,
            l_blk,
            l_z,
            py_sqrt,
            s_sqrt,
            p_tilde_sqrt,
            transitions: segments.iter().map(|s| s.a.clone()).collect(),
        })
    }

    pub fn state_dim(&self) -> usize {
        self.nx
    }

    pub fn control_dim(&self) -> usize {
        self.nu
    }

    pub fn measurement_dim(&self) -> usize {
        self.ny
    }

    /// Number of intervals `N`.
    pub fn horizon(&self) -> usize {
        self.n
    }

    /// Row range of `x_k` in a stacked state vector (the extractor `E_{x_k}`).
    pub fn x_range(&self, k: usize) -> Range<usize> {
        k * self.nx..(k + 1) * self.nx
    }

    /// Row range of `u_k` in a stacked control vector (`E_{u_k}`).
    pub fn u_range(&self, k: usize) -> Range<usize> {
        k * self.nu..(k + 1) * self.nu
    }

    /// `Φ(k, j) = A_{k−1} ⋯ A_j` for `j ≤ k`.
    pub fn transition(&self, k: usize, j: usize) -> DMatrix<f64> {
        assert!(j <= k && k <= self.n, "transition({k}, {j}) out of range");
        let mut phi = DMatrix::identity(self.nx, self.nx);
        for a in &self.transitions[j..k] {
            phi = a * phi;
        }
        phi
    }

    /// Block `(k, j)` of `𝐁`: `Φ(k, j+1) B_j`, zero for `j ≥ k`.
    pub fn b_block(&self, k: usize, j: usize) -> DMatrix<f64> {
        self.b_blk.view((k * self.nx, j * self.nu), (self.nx, self.nu)).into_owned()
    }

    /// Block `(i, j)` of `𝐒 = 𝐒^{1/2}𝐒^{1/2}ᵀ`; the diagonal blocks are the
    /// dispersions of `z_k`.
    pub fn s_block(&self, i: usize, j: usize) -> DMatrix<f64> {
        let si = self.s_sqrt.rows(i * self.nx, self.nx);
        let sj = self.s_sqrt.rows(j * self.nx, self.nx);
        si * sj.transpose()
    }

    /// Gram matrix of the `𝐒^{1/2}` rows belonging to `nodes`.
    pub fn s_gram(&self, nodes: &[usize]) -> DMatrix<f64> {
        let rows = self.stacked_rows(nodes);
        &rows * rows.transpose()
    }

    fn stacked_rows(&self, nodes: &[usize]) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(nodes.len() * self.nx, self.s_sqrt.ncols());
        for (b, &k) in nodes.iter().enumerate() {
            out.rows_mut(b * self.nx, self.nx).copy_from(&self.s_sqrt.rows(k * self.nx, self.nx));
        }
        out
    }

    /// Stacked mean `X̄ = 𝐀x̄₀ + 𝐁Ū + 𝐂`.
    pub fn state_mean(&self, x0_mean: &DVector<f64>, ubar: &DVector<f64>) -> DVector<f64> {
        &self.a_blk * x0_mean + &self.b_blk * ubar + &self.c_blk
    }

    /// Block-diagonal feedback operator `𝐊` of shape `N n_u × (N+1) n_x`.
    pub fn k_matrix(&self, policy: &Policy) -> DMatrix<f64> {
        let mut k = DMatrix::zeros(self.n * self.nu, (self.n + 1) * self.nx);
        for (j, g) in policy.gains.iter().enumerate() {
            k.view_mut((j * self.nu, j * self.nx), (self.nu, self.nx)).copy_from(g);
        }
        k
    }

    /// Square-root factors at node `k`:
    /// `(P̂_k^{1/2}, P_k^{1/2}, P_{u_k}^{1/2})`. The control factor is empty
    /// at the final node.
    pub fn sqrt_covariances(&self, policy: &Policy, k: usize) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        let cols = self.s_sqrt.ncols();
        let mut p_hat = self.s_sqrt.rows(k * self.nx, self.nx).into_owned();
        for j in 0..k {
            let kz = &policy.gains[j] * self.s_sqrt.rows(j * self.nx, self.nx);
            p_hat += self.b_block(k, j) * kz;
        }
        let p_full = linalg::hstack(&[&p_hat, &self.p_tilde_sqrt[k]]);
        let p_u = if k < self.n {
            &policy.gains[k] * self.s_sqrt.rows(k * self.nx, self.nx)
        } else {
            DMatrix::zeros(self.nu, cols)
        };
        (p_hat, p_full, p_u)
    }
}
