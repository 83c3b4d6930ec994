//! Conic solver backends behind a standard-form interface.

extern crate openblas_src;

use clarabel::algebra::CscMatrix;
use clarabel::solver::{DefaultSettings, DefaultSolver, IPSolver, SolverStatus, SupportedConeT};
use serde::{Deserialize, Serialize};

use crate::convexifier::{Cone, StandardForm};

/// Outcome class reported by a backend.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendStatus {
    Solved,
    /// Converged to reduced tolerances.
    AlmostSolved,
    Infeasible,
    Unbounded,
    MaxIter,
    Numerical,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackendResult {
    pub status: BackendStatus,
    pub x: Vec<f64>,
    pub objective: f64,
    pub iterations: u32,
}

/// What a backend can do and how hard it tries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverBackendSpec {
    pub name: String,
    pub nonnegative: bool,
    pub second_order: bool,
    pub psd: bool,
    pub feastol: f64,
    pub gaptol: f64,
    pub max_iters: u32,
}

pub trait ConicBackend: Send + Sync {
    fn spec(&self) -> SolverBackendSpec;
    fn solve(&self, problem: &StandardForm) -> BackendResult;
}

/// Interior-point backend built on Clarabel.
#[derive(Debug, Clone, PartialEq)]
pub struct ClarabelBackend {
    pub feastol: f64,
    pub gaptol: f64,
    pub max_iters: u32,
    /// Static KKT regularization. Clarabel's 1e-8 default stalls on the
    /// weighted approach-cone problems; 1e-7 does not.
    pub regularization: f64,
}

impl Default for ClarabelBackend {
    fn default() -> Self {
        Self { feastol: 1e-8, gaptol: 1e-8, max_iters: 200, regularization: 1e-7 }
    }
}

impl ConicBackend for ClarabelBackend {
    fn spec(&self) -> SolverBackendSpec {
        SolverBackendSpec {
            name: "clarabel".into(),
            nonnegative: true,
            second_order: true,
            psd: true,
            feastol: self.feastol,
            gaptol: self.gaptol,
            max_iters: self.max_iters,
        }
    }

    fn solve(&self, sf: &StandardForm) -> BackendResult {
        let p = CscMatrix::zeros((sf.n, sf.n));
        let a = CscMatrix::new(sf.m, sf.n, sf.colptr.clone(), sf.rowval.clone(), sf.nzval.clone());
        let cones: Vec<SupportedConeT<f64>> = sf
            .cones
            .iter()
            .map(|c| match *c {
                Cone::Zero(n) => SupportedConeT::ZeroConeT(n),
                Cone::NonNeg(n) => SupportedConeT::NonnegativeConeT(n),
                Cone::Soc(n) => SupportedConeT::SecondOrderConeT(n),
                Cone::Psd(d) => SupportedConeT::PSDTriangleConeT(d),
            })
            .collect();
        let settings = DefaultSettings::<f64> {
            verbose: std::env::var_os("CCORBIT_SOLVER_VERBOSE").is_some(),
            max_iter: self.max_iters,
            tol_feas: self.feastol,
            tol_gap_abs: self.gaptol,
            tol_gap_rel: self.gaptol,
            max_threads: 1,
            static_regularization_constant: self.regularization,
            ..DefaultSettings::default()
        };
        let mut solver = match DefaultSolver::new(&p, &sf.c, &a, &sf.b, &cones, settings) {
            Ok(s) => s,
            Err(e) => {
                log::error!("solver setup failed: {e}");
                return BackendResult { status: BackendStatus::Numerical, x: vec![0.0; sf.n], objective: f64::NAN, iterations: 0 };
            }
        };
        solver.solve();
        let sol = &solver.solution;
        let status = match sol.status {
            SolverStatus::Solved => BackendStatus::Solved,
            SolverStatus::AlmostSolved => BackendStatus::AlmostSolved,
            SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => BackendStatus::Infeasible,
            SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => BackendStatus::Unbounded,
            SolverStatus::MaxIterations | SolverStatus::MaxTime => BackendStatus::MaxIter,
            _ => BackendStatus::Numerical,
        };
        BackendResult { status, x: sol.x.clone(), objective: sol.obj_val + sf.c0, iterations: sol.iterations }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::convexifier::{AffExpr, ConvexProgram, MatExpr};
    use nalgebra::DMatrix;

    fn solve(p: &ConvexProgram) -> BackendResult {
        let (sf, _) = p.compile(false);
        ClarabelBackend::default().solve(&sf)
    }

    #[test]
    fn linear_program() {
        // min −v0 − v1  s.t.  v0 + 2 v1 ≤ 4, v ≥ 0, v0 ≤ 3.
        let mut p = ConvexProgram::new();
        let v = p.new_vars("v", 2);
        let mut obj = AffExpr::default();
        obj.add_term(v[0], -1.0);
        obj.add_term(v[1], -1.0);
        p.add_objective(&obj, 1.0);
        let mut lhs = AffExpr::var(v[0]);
        lhs.add_term(v[1], 2.0);
        p.add_le("a", &lhs, &AffExpr::constant(4.0));
        p.add_le("b", &AffExpr::var(v[0]), &AffExpr::constant(3.0));
        for &vi in &v {
            p.add_le("c", &AffExpr::constant(0.0), &AffExpr::var(vi));
        }
        let r = solve(&p);
        assert_eq!(r.status, BackendStatus::Solved);
        assert!((r.x[0] - 3.0).abs() < 1e-6 && (r.x[1] - 0.5).abs() < 1e-6);
        assert!((r.objective + 3.5).abs() < 1e-6);
    }

    fn spectral_epigraph(m: &DMatrix<f64>, chunk: usize) -> f64 {
        let mut p = ConvexProgram::new();
        let t = p.new_var("t");
        p.add_objective(&AffExpr::var(t), 1.0);
        p.add_spectral_norm_le("n", &MatExpr::from_const(m), &AffExpr::var(t), chunk);
        let r = solve(&p);
        assert_eq!(r.status, BackendStatus::Solved);
        r.x[t]
    }

    #[test]
    fn spectral_norm_epigraph_is_exact() {
        let m = DMatrix::from_fn(3, 11, |i, j| ((i * 7 + j * 3) as f64).sin());
        let exact = crate::linalg::spectral_norm(&m);
        for chunk in [1, 2, 4, 11, 20] {
            let t = spectral_epigraph(&m, chunk);
            assert!((t - exact).abs() < 1e-6 * exact, "chunk {chunk}: {t} vs {exact}");
        }
        // Tall input is transposed; vectors use a second-order cone.
        assert!((spectral_epigraph(&m.transpose(), 3) - exact).abs() < 1e-6 * exact);
        let v = DMatrix::from_row_slice(1, 3, &[3.0, 4.0, 12.0]);
        assert!((spectral_epigraph(&v, 3) - 13.0).abs() < 1e-6);
    }

    #[test]
    fn psd_cone_orientation() {
        // min x  s.t.  [[x, 1], [1, 1]] ⪰ 0  →  x = 1.
        let mut p = ConvexProgram::new();
        let x = p.new_var("x");
        p.add_objective(&AffExpr::var(x), 1.0);
        let mut m = MatExpr::from_const(&DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 1.0]));
        *m.get_mut(0, 0) = AffExpr::var(x);
        p.add_psd("m", &m);
        let r = solve(&p);
        assert!((r.x[x] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn infeasibility_is_detected() {
        let mut p = ConvexProgram::new();
        let x = p.new_var("x");
        p.add_le("a", &AffExpr::var(x), &AffExpr::constant(-1.0));
        p.add_le("b", &AffExpr::constant(1.0), &AffExpr::var(x));
        assert_eq!(solve(&p).status, BackendStatus::Infeasible);
    }
}
