//! Assembly of the convex chance-constrained problems, hand-off to a conic
//! backend, post-hoc verification, and the fixed-point loop for
//! state-triggered constraints.

mod backend;

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::blockstats::{BlockOperators, Policy};
use crate::convexifier::{
    self as cvx, AffExpr, BuildOptions, ConstraintSet, ConvexError, ConvexProgram, PolicyVars, RiskBudget,
    Var,
};
use crate::dynamics::ControlType;
use crate::linalg;

pub use backend::{BackendResult, BackendStatus, ClarabelBackend, ConicBackend, SolverBackendSpec};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PlanError {
    #[error(transparent)]
    Convex(#[from] ConvexError),
    #[error("invalid problem: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, PlanError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanStatus {
    Optimal,
    Infeasible,
    MaxIter,
    Numerical,
}

/// Problem data shared by every solve.
#[derive(Debug, Clone)]
pub struct PlanProblem {
    pub blocks: BlockOperators,
    pub x0_mean: DVector<f64>,
    pub constraints: ConstraintSet,
    pub budget: RiskBudget,
    pub maneuver_mask: Vec<bool>,
    pub control_type: ControlType,
    /// Interval lengths `Δt_k`.
    pub dts: Vec<f64>,
    pub build: BuildOptions,
}

impl PlanProblem {
    pub fn validate(&self) -> Result<()> {
        let n = self.blocks.horizon();
        let nx = self.blocks.state_dim();
        if self.maneuver_mask.len() != n || self.dts.len() != n || self.x0_mean.len() != nx {
            return Err(PlanError::Invalid("mask, interval or initial-mean dimensions disagree with the horizon".into()));
        }
        self.budget.validate()?;
        self.constraints.validate(nx, n)?;
        Ok(())
    }

    /// Weight of `‖u_k‖` in the fuel cost: 1 for impulses, `Δt_k` for held
    /// accelerations.
    pub fn time_weight(&self, k: usize) -> f64 {
        match self.control_type {
            ControlType::Impulsive => 1.0,
            ControlType::ZohContinuous => self.dts[k],
        }
    }
}

/// Options of the state-triggered fixed-point loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScpOptions {
    pub eps_tol: f64,
    pub max_iter: usize,
    /// Penalty on `‖ζ‖₁`. `None` uses 1e3 times the cost of the
    /// deterministic terminal-transfer problem.
    pub penalty_weight: Option<f64>,
}

impl Default for ScpOptions {
    fn default() -> Self {
        Self { eps_tol: 1e-3, max_iter: 15, penalty_weight: None }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ScpIteration {
    pub iteration: usize,
    pub status: PlanStatus,
    pub max_mean_update: f64,
    pub max_control_update: f64,
    pub j_ub: f64,
    pub penalty: f64,
    pub active_triggers: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanSolution {
    pub status: PlanStatus,
    pub policy: Policy,
    /// `ζ_k` for `k = 0..=N`; zero where the trigger is inactive.
    pub zeta: Vec<f64>,
    /// Trigger weights `−min(g_stc(x̄*_k), 0)` used in the last solve.
    pub stc_weights: Vec<f64>,
    /// `J_ub` evaluated exactly at the returned policy.
    pub j_ub: f64,
    pub penalty_weight: f64,
    /// `w ‖ζ‖₁`.
    pub penalty: f64,
    /// Worst post-hoc margin per constraint family, normalized by the
    /// bound where one exists; negative means violated.
    pub margins: BTreeMap<String, f64>,
    pub scp_trace: Vec<ScpIteration>,
    /// First violated family reported by the elastic probe when infeasible.
    pub diagnosis: Option<String>,
    /// Mean states `x̄_k`, `k = 0..=N`.
    pub mean_states: Vec<DVector<f64>>,
    pub backend_iterations: u32,
}

struct Assembled {
    prog: ConvexProgram,
    vars: PolicyVars,
    zetas: Vec<Option<Var>>,
}

fn assemble(problem: &PlanProblem, stc_weights: Option<&[f64]>, penalty_weight: f64, deterministic: bool) -> Result<Assembled> {
    let blocks = &problem.blocks;
    let n = blocks.horizon();
    let opts = problem.build;
    let mut prog = ConvexProgram::new();
    let vars = PolicyVars::new(&mut prog, blocks, &problem.maneuver_mask);
    let cost = cvx::build_cost(&mut prog, &vars, blocks, problem.budget.p, problem.control_type, &problem.dts, opts)?;
    prog.add_objective(&cost.j_ub, 1.0);
    let cs = &problem.constraints;
    let x0 = &problem.x0_mean;
    let mut zetas = vec![None; n + 1];

    if deterministic {
        if let Some(t) = &cs.terminal {
            let mean = vars.state_mean(blocks, x0, n);
            let exprs = mean
                .iter()
                .zip(t.mean.iter())
                .map(|(e, &c)| {
                    let mut e = e.clone();
                    e.constant -= c;
                    e
                })
                .collect();
            prog.add_eq("terminal_mean", exprs);
        }
        return Ok(Assembled { prog, vars, zetas });
    }

    if let Some(u_max) = cs.u_max {
        cvx::build_control_mag_cc(&mut prog, &cost, u_max, problem.budget.eps_u, blocks.control_dim())?;
    }
    if let Some(du) = cs.du_max {
        for k in 0..n.saturating_sub(1) {
            cvx::build_control_rate_cc(&mut prog, &vars, blocks, k, du, problem.budget.eps_u, opts)?;
        }
    }
    if !cs.hyperplanes.is_empty() {
        let eps = problem.budget.hyperplane_allocation(cs.hyperplanes.len())?;
        for (h, &e) in cs.hyperplanes.iter().zip(&eps) {
            cvx::build_hyperplane_cc(&mut prog, &vars, blocks, x0, h, e, opts)?;
        }
    }
    if let Some(t) = &cs.tube {
        for &k in &t.nodes {
            cvx::build_tube_cc(&mut prog, &vars, blocks, x0, t, k, problem.budget.eps_x, opts)?;
        }
    }
    if let Some(t) = &cs.terminal {
        cvx::build_terminal(&mut prog, &vars, blocks, x0, t, opts)?;
    }
    if let (Some(cone), Some(w)) = (&cs.approach_cone, stc_weights) {
        for k in 0..=n {
            if let Some(z) = cvx::build_stc(&mut prog, &vars, blocks, x0, cone, k, w[k], problem.budget.eps_x, opts)? {
                prog.add_objective(&AffExpr::var(z), penalty_weight);
                zetas[k] = Some(z);
            }
        }
    }
    Ok(Assembled { prog, vars, zetas })
}

/// Mean states under a policy.
pub fn mean_states(problem: &PlanProblem, policy: &Policy) -> Vec<DVector<f64>> {
    let blocks = &problem.blocks;
    let stacked = blocks.state_mean(&problem.x0_mean, &policy.stacked_controls());
    let nx = blocks.state_dim();
    (0..=blocks.horizon()).map(|k| stacked.rows(k * nx, nx).into_owned()).collect()
}

/// Exact `J_ub` of a policy, with spectral norms computed directly.
pub fn evaluate_j_ub(problem: &PlanProblem, policy: &Policy) -> Result<f64> {
    let m = cvx::chi2_quantile_coeff(1.0 - problem.budget.p, problem.blocks.control_dim())?;
    let mut total = 0.0;
    for k in 0..problem.blocks.horizon() {
        let (_, _, p_u) = problem.blocks.sqrt_covariances(policy, k);
        total += problem.time_weight(k) * (policy.ubar[k].norm() + m * linalg::spectral_norm(&p_u));
    }
    Ok(total)
}

/// Post-hoc margins of every constraint family, evaluated from the block
/// statistics without reference to the conic encoding.
pub fn evaluate_margins(
    problem: &PlanProblem,
    policy: &Policy,
    stc_weights: Option<&[f64]>,
    zeta: &[f64],
) -> Result<BTreeMap<String, f64>> {
    let blocks = &problem.blocks;
    let n = blocks.horizon();
    let nu = blocks.control_dim();
    let cs = &problem.constraints;
    let b = &problem.budget;
    let means = mean_states(problem, policy);
    let factors: Vec<_> = (0..=n).map(|k| blocks.sqrt_covariances(policy, k)).collect();
    let mut out = BTreeMap::new();
    let mut record = |name: &str, v: f64| {
        let e = out.entry(name.to_string()).or_insert(f64::INFINITY);
        *e = f64::min(*e, v);
    };

    if let Some(u_max) = cs.u_max {
        let m = cvx::chi2_quantile_coeff(b.eps_u, nu)?;
        for k in 0..n {
            let lhs = policy.ubar[k].norm() + m * linalg::spectral_norm(&factors[k].2);
            record("control_magnitude", (u_max - lhs) / u_max);
        }
    }
    if let Some(du) = cs.du_max {
        let m = cvx::chi2_quantile_coeff(b.eps_u, nu)?;
        for k in 0..n.saturating_sub(1) {
            let dmean = (&policy.ubar[k + 1] - &policy.ubar[k]).norm();
            let dcov = &factors[k + 1].2 - &factors[k].2;
            record("control_rate", (du - dmean - m * linalg::spectral_norm(&dcov)) / du);
        }
    }
    if !cs.hyperplanes.is_empty() {
        let eps = b.hyperplane_allocation(cs.hyperplanes.len())?;
        for (h, &e) in cs.hyperplanes.iter().zip(&eps) {
            let m = cvx::gaussian_quantile_coeff(e)?;
            let p = &factors[h.node].1;
            let spread = (p.transpose() * &h.a).norm();
            let lhs = h.a.dot(&means[h.node]) + h.b + m * spread;
            record("hyperplane", -lhs / h.a.norm().max(f64::MIN_POSITIVE));
        }
    }
    if let Some(t) = &cs.tube {
        let m = cvx::chi2_quantile_coeff(b.eps_x, t.h.nrows())?;
        for &k in &t.nodes {
            let dev = (&t.h * (&means[k] - &t.reference[k])).norm();
            let lhs = dev + m * linalg::spectral_norm(&(&t.h * &factors[k].1));
            record("tube", (t.d_max - lhs) / t.d_max);
        }
    }
    if let Some(t) = &cs.terminal {
        let err = &means[n] - &t.mean;
        let scale = t.cov.diagonal().map(f64::sqrt);
        let rel = err.component_div(&scale).amax();
        record("terminal_mean", -rel);
        let w = cvx::terminal_weight(blocks, t)?;
        record("terminal_covariance", 1.0 - linalg::spectral_norm(&(w * &factors[n].0)));
    }
    if let (Some(cone), Some(ws)) = (&cs.approach_cone, stc_weights) {
        for k in 0..=n {
            if ws[k] > 0.0 {
                let c = cvx::stc_value(cone, &means[k], &factors[k].1, b.eps_x)?;
                record("stc", (zeta[k] - ws[k] * c) / cone.r_trigger);
            }
        }
    }
    Ok(out)
}

fn status_of(r: &BackendResult) -> PlanStatus {
    match r.status {
        BackendStatus::Solved | BackendStatus::AlmostSolved => PlanStatus::Optimal,
        BackendStatus::Infeasible => PlanStatus::Infeasible,
        BackendStatus::MaxIter => PlanStatus::MaxIter,
        BackendStatus::Unbounded | BackendStatus::Numerical => PlanStatus::Numerical,
    }
}

/// Solve the elastic phase-one problem and name the first family that
/// needs relaxing, with the largest slack it took.
fn diagnose(prog: &ConvexProgram, backend: &dyn ConicBackend) -> Option<(String, f64)> {
    let (sf, families) = prog.compile(true);
    let r = backend.solve(&sf);
    if !matches!(r.status, BackendStatus::Solved | BackendStatus::AlmostSolved) {
        return None;
    }
    let nv = prog.num_vars();
    let slacks: Vec<f64> = (0..families.len()).map(|i| r.x[nv + i]).collect();
    let worst = slacks.iter().cloned().fold(0.0, f64::max);
    families
        .iter()
        .zip(&slacks)
        .find(|(_, &s)| s > 1e-6 * worst.max(1e-12) && s > 1e-9)
        .map(|(f, _)| (f.clone(), worst))
}

/// Slack the elastic probe must need before a stalled solve is reported
/// as infeasible rather than numerical.
const STALL_SLACK: f64 = 1e-6;

/// Feasibility tolerance applied to normalized post-hoc margins.
pub const MARGIN_TOL: f64 = 1e-6;

fn infeasible(problem: &PlanProblem, diagnosis: String, stc_weights: Vec<f64>, w: f64) -> PlanSolution {
    let n = problem.blocks.horizon();
    let policy = Policy::zero(n, problem.blocks.control_dim(), problem.blocks.state_dim(), problem.maneuver_mask.clone());
    PlanSolution {
        status: PlanStatus::Infeasible,
        mean_states: mean_states(problem, &policy),
        policy,
        zeta: vec![0.0; n + 1],
        stc_weights,
        j_ub: f64::NAN,
        penalty_weight: w,
        penalty: 0.0,
        margins: BTreeMap::new(),
        scp_trace: Vec::new(),
        diagnosis: Some(diagnosis),
        backend_iterations: 0,
    }
}

fn solve_once(problem: &PlanProblem, backend: &dyn ConicBackend, stc_weights: Option<&[f64]>, w: f64) -> Result<PlanSolution> {
    problem.validate()?;
    let n = problem.blocks.horizon();
    let weights_out = stc_weights.map_or_else(|| vec![0.0; n + 1], <[f64]>::to_vec);
    if let Some(t) = &problem.constraints.terminal {
        if let Err(e @ ConvexError::TerminalFloor { .. }) = cvx::terminal_weight(&problem.blocks, t) {
            return Ok(infeasible(problem, e.to_string(), weights_out, w));
        }
    }
    let asm = assemble(problem, stc_weights, w, false)?;
    let (sf, _) = asm.prog.compile(false);
    log::debug!("conic program: {} variables, {} rows, {} nonzeros", sf.n, sf.m, sf.nnz());
    let r = backend.solve(&sf);
    let mut status = status_of(&r);
    if status == PlanStatus::Infeasible {
        let d = diagnose(&asm.prog, backend).map_or_else(|| "undetermined".into(), |(f, _)| f);
        return Ok(infeasible(problem, d, weights_out, w));
    }
    // Interior-point methods often stall instead of certifying
    // infeasibility; the elastic probe settles which one it was.
    if matches!(status, PlanStatus::Numerical | PlanStatus::MaxIter) {
        if let Some((family, slack)) = diagnose(&asm.prog, backend) {
            if slack > STALL_SLACK {
                return Ok(infeasible(problem, family, weights_out, w));
            }
        }
    }
    let policy = asm.vars.policy(&r.x);
    let zeta: Vec<f64> = asm.zetas.iter().map(|z| z.map_or(0.0, |v| r.x[v].max(0.0))).collect();
    let margins = evaluate_margins(problem, &policy, stc_weights, &zeta)?;
    let worst = margins.values().cloned().fold(f64::INFINITY, f64::min);
    if status == PlanStatus::Optimal && r.status == BackendStatus::AlmostSolved && worst < -MARGIN_TOL {
        status = PlanStatus::Numerical;
    }
    let j_ub = evaluate_j_ub(problem, &policy)?;
    Ok(PlanSolution {
        status,
        mean_states: mean_states(problem, &policy),
        policy,
        penalty: w * zeta.iter().sum::<f64>(),
        zeta,
        stc_weights: weights_out,
        j_ub,
        penalty_weight: w,
        margins,
        scp_trace: Vec::new(),
        diagnosis: None,
        backend_iterations: r.iterations,
    })
}

/// Problem without state-triggered terms.
pub fn solve_fixed(problem: &PlanProblem, backend: &dyn ConicBackend) -> Result<PlanSolution> {
    solve_once(problem, backend, None, 0.0)
}

/// One solve of the relaxed state-triggered problem with fixed trigger
/// weights `w_k` (one per node) and penalty `penalty_weight` on `‖ζ‖₁`.
pub fn solve_relaxed_stc(
    problem: &PlanProblem,
    backend: &dyn ConicBackend,
    weights: &[f64],
    penalty_weight: f64,
) -> Result<PlanSolution> {
    if weights.len() != problem.blocks.horizon() + 1 {
        return Err(PlanError::Invalid("one trigger weight per node is required".into()));
    }
    solve_once(problem, backend, Some(weights), penalty_weight)
}

/// Cost of the deterministic terminal transfer, used to scale the penalty.
pub fn deterministic_cost(problem: &PlanProblem, backend: &dyn ConicBackend) -> Result<f64> {
    let asm = assemble(problem, None, 0.0, true)?;
    let (sf, _) = asm.prog.compile(false);
    let r = backend.solve(&sf);
    if status_of(&r) != PlanStatus::Optimal {
        return Err(PlanError::Invalid("deterministic transfer problem did not solve".into()));
    }
    Ok(r.objective)
}

/// Fixed-point loop for the relaxed state-triggered problem: the trigger
/// weights are evaluated on the previous mean trajectory, starting from the
/// zero-control mean.
pub fn solve_with_stc(problem: &PlanProblem, backend: &dyn ConicBackend, opts: ScpOptions) -> Result<PlanSolution> {
    solve_with_stc_relinearized(problem, backend, opts, |_| Ok(None)).map(|(sol, _)| sol)
}

/// As [`solve_with_stc`], but after every non-final iteration `relinearize`
/// may return a new problem built about the latest policy (for instance with
/// execution noise evaluated at the new reference controls). Returns the
/// solution together with the problem it solves.
pub fn solve_with_stc_relinearized<F>(
    problem: &PlanProblem,
    backend: &dyn ConicBackend,
    opts: ScpOptions,
    relinearize: F,
) -> Result<(PlanSolution, PlanProblem)>
where
    F: Fn(&Policy) -> Result<Option<PlanProblem>>,
{
    let Some(cone) = problem.constraints.approach_cone.clone() else {
        return Ok((solve_fixed(problem, backend)?, problem.clone()));
    };
    problem.validate()?;
    let w = match opts.penalty_weight {
        Some(w) => w,
        None => {
            let scale = deterministic_cost(problem, backend)?;
            1e3 * if scale > 0.0 { scale } else { 1.0 }
        }
    };
    let n = problem.blocks.horizon();
    let nu = problem.blocks.control_dim();
    let zero = Policy::zero(n, nu, problem.blocks.state_dim(), problem.maneuver_mask.clone());
    let mut ref_means = mean_states(problem, &zero);
    let mut ref_controls = zero.ubar.clone();
    let mut trace = Vec::new();
    let mut last: Option<PlanSolution> = None;
    let mut owned: Option<PlanProblem> = None;
    for it in 1..=opts.max_iter {
        let current = owned.as_ref().unwrap_or(problem);
        let weights: Vec<f64> = ref_means.iter().map(|x| cone.weight(x)).collect();
        let active = weights.iter().filter(|&&v| v > 0.0).count();
        let mut sol = solve_once(current, backend, Some(&weights), w)?;
        let dx = sol
            .mean_states
            .iter()
            .zip(&ref_means)
            .fold(0.0_f64, |a, (p, q)| a.max((p - q).amax()));
        let du = sol
            .policy
            .ubar
            .iter()
            .zip(&ref_controls)
            .fold(0.0_f64, |a, (p, q)| a.max((p - q).amax()));
        trace.push(ScpIteration {
            iteration: it,
            status: sol.status,
            max_mean_update: dx,
            max_control_update: du,
            j_ub: sol.j_ub,
            penalty: sol.penalty,
            active_triggers: active,
        });
        log::info!("scp iteration {it}: status {:?}, dX {dx:.3e}, dU {du:.3e}, J_ub {:.6e}", sol.status, sol.j_ub);
        if sol.status != PlanStatus::Optimal {
            sol.scp_trace = trace;
            return Ok((sol, current.clone()));
        }
        ref_means = sol.mean_states.clone();
        ref_controls = sol.policy.ubar.clone();
        let converged = dx <= opts.eps_tol && du <= opts.eps_tol;
        sol.scp_trace = trace.clone();
        if converged {
            return Ok((sol, current.clone()));
        }
        if it == opts.max_iter {
            last = Some(sol);
            break;
        }
        if let Some(next) = relinearize(&sol.policy)? {
            next.validate()?;
            owned = Some(next);
        }
        last = Some(sol);
    }
    let mut sol = last.expect("at least one iteration runs");
    sol.status = PlanStatus::MaxIter;
    Ok((sol, owned.unwrap_or_else(|| problem.clone())))
}

/// Spectral norm of the estimate dispersion projected by `left` at node `k`
/// (used by reports).
pub fn projected_spread(problem: &PlanProblem, policy: &Policy, k: usize, left: &DMatrix<f64>) -> f64 {
    let (_, p, _) = problem.blocks.sqrt_covariances(policy, k);
    linalg::spectral_norm(&(left * p))
}

#[cfg(test)]
mod tests;
