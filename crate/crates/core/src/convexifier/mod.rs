//! Deterministic convex surrogates of the probabilistic cost and chance
//! constraints, written against the affine block statistics.
//!
//! Every builder emits constraints that are affine in the nominal controls
//! `Ū`, the free gain blocks `K_k`, the STC slacks and norm epigraph
//! auxiliaries, so the assembled program is a conic program over
//! nonnegative, second-order and PSD cones.

mod program;
mod quantile;

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::blockstats::{BlockOperators, Policy};
use crate::dynamics::ControlType;
use crate::linalg::{self, compressed_factor};

pub use program::{AffExpr, Cone, ConeConstraint, ConvexProgram, MatExpr, StandardForm, Var};
pub use quantile::{chi2_quantile_coeff, gaussian_quantile_coeff};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConvexError {
    #[error("risk level {eps} outside ({lo}, {hi})")]
    RiskOutOfRange { eps: f64, lo: f64, hi: f64 },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("infeasible terminal covariance: filter floor exceeds target (min eigenvalue of P_f - P~_N is {min_eig:.3e})")]
    TerminalFloor { min_eig: f64 },
}

pub type Result<T> = std::result::Result<T, ConvexError>;

/// Eigenvalues of a factor Gram below this fraction of the largest are
/// dropped when compressing.
const COMPRESS_DROP: f64 = 1e-16;

/// Risk levels for the chance constraints and the cost quantile.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskBudget {
    pub eps_x: f64,
    pub eps_u: f64,
    /// Per-hyperplane allocations. `None` splits `eps_x` evenly.
    pub hyperplane_eps: Option<Vec<f64>>,
    /// Quantile level of the fuel cost.
    pub p: f64,
}

impl RiskBudget {
    pub fn new(eps_x: f64, eps_u: f64) -> Result<Self> {
        let b = Self { eps_x, eps_u, hyperplane_eps: None, p: 0.99 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        for &e in &[self.eps_x, self.eps_u] {
            if !(e > 0.0 && e < 1.0) {
                return Err(ConvexError::RiskOutOfRange { eps: e, lo: 0.0, hi: 1.0 });
            }
        }
        if !(self.p > 0.5 && self.p < 1.0) {
            return Err(ConvexError::InvalidParameter(format!("quantile level {} must lie in (0.5, 1)", self.p)));
        }
        if let Some(split) = &self.hyperplane_eps {
            let total: f64 = split.iter().sum();
            if total > self.eps_x * (1.0 + 1e-12) {
                return Err(ConvexError::InvalidParameter(format!(
                    "hyperplane allocations sum to {total}, above eps_x = {}",
                    self.eps_x
                )));
            }
        }
        Ok(())
    }

    /// Risk assigned to each of `count` hyperplanes.
    pub fn hyperplane_allocation(&self, count: usize) -> Result<Vec<f64>> {
        match &self.hyperplane_eps {
            Some(v) if v.len() == count => Ok(v.clone()),
            Some(v) => Err(ConvexError::InvalidParameter(format!(
                "{} hyperplane allocations given for {count} hyperplanes",
                v.len()
            ))),
            None => Ok(vec![self.eps_x / count.max(1) as f64; count]),
        }
    }
}

/// Half-space `aᵀx + b ≤ 0` imposed at one node.
#[derive(Debug, Clone, PartialEq)]
pub struct Hyperplane {
    pub node: usize,
    pub a: DVector<f64>,
    pub b: f64,
}

/// `‖H(x_k − x*_k)‖ ≤ d_max` at the listed nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct Tube {
    pub h: DMatrix<f64>,
    pub reference: Vec<DVector<f64>>,
    pub d_max: f64,
    pub nodes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TerminalTarget {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Approach cone `‖A H_r x‖ ≤ bᵀ H_r x`, triggered inside `r_trigger`.
#[derive(Debug, Clone, PartialEq)]
pub struct ApproachCone {
    pub a_cone: DMatrix<f64>,
    pub b_cone: DVector<f64>,
    pub h_r: DMatrix<f64>,
    pub r_trigger: f64,
}

impl ApproachCone {
    /// `g_stc(x) = ‖H_r x‖ − r_trigger`.
    pub fn trigger(&self, x: &DVector<f64>) -> f64 {
        (&self.h_r * x).norm() - self.r_trigger
    }

    /// Realized cone residual `‖A H_r x‖ − bᵀ H_r x`; nonpositive inside.
    pub fn residual(&self, x: &DVector<f64>) -> f64 {
        let r = &self.h_r * x;
        (&self.a_cone * &r).norm() - self.b_cone.dot(&r)
    }

    /// Weight `−min(g_stc(x̄*), 0)` of the relaxed constraint.
    pub fn weight(&self, x_ref: &DVector<f64>) -> f64 {
        -self.trigger(x_ref).min(0.0)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConstraintSet {
    pub hyperplanes: Vec<Hyperplane>,
    pub tube: Option<Tube>,
    pub u_max: Option<f64>,
    pub du_max: Option<f64>,
    pub terminal: Option<TerminalTarget>,
    pub approach_cone: Option<ApproachCone>,
}

impl ConstraintSet {
    pub fn validate(&self, nx: usize, horizon: usize) -> Result<()> {
        let bad = |m: String| Err(ConvexError::InvalidParameter(m));
        for (name, v) in [("u_max", self.u_max), ("du_max", self.du_max)] {
            if let Some(v) = v {
                if !(v > 0.0) {
                    return bad(format!("{name} must be positive"));
                }
            }
        }
        for h in &self.hyperplanes {
            if h.a.len() != nx || h.node > horizon {
                return bad(format!("hyperplane at node {} is malformed", h.node));
            }
        }
        if let Some(t) = &self.tube {
            if !(t.d_max > 0.0) || t.h.ncols() != nx || t.reference.len() != horizon + 1 {
                return bad("tube constraint is malformed".into());
            }
            if t.nodes.iter().any(|&k| k > horizon) {
                return bad("tube node beyond the horizon".into());
            }
        }
        if let Some(t) = &self.terminal {
            if t.mean.len() != nx || t.cov.shape() != (nx, nx) {
                return bad("terminal target has wrong dimensions".into());
            }
            if linalg::min_eigenvalue(&t.cov) <= 0.0 {
                return bad("terminal covariance must be positive definite".into());
            }
        }
        if let Some(c) = &self.approach_cone {
            if c.h_r.ncols() != nx || c.a_cone.ncols() != c.h_r.nrows() || c.b_cone.len() != c.h_r.nrows() {
                return bad("approach cone is malformed".into());
            }
            if !(c.r_trigger > 0.0) {
                return bad("trigger radius must be positive".into());
            }
        }
        Ok(())
    }
}

/// Decision variables of the policy: `ū_k` and `K_k` at maneuver nodes only.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyVars {
    nx: usize,
    nu: usize,
    ubar: Vec<Option<Vec<Var>>>,
    /// `K_k` entries, column-major `n_u × n_x`.
    gains: Vec<Option<Vec<Var>>>,
}

impl PolicyVars {
    pub fn new(prog: &mut ConvexProgram, blocks: &BlockOperators, mask: &[bool]) -> Self {
        let (nx, nu) = (blocks.state_dim(), blocks.control_dim());
        assert_eq!(mask.len(), blocks.horizon());
        let mut ubar = Vec::new();
        let mut gains = Vec::new();
        for (k, &m) in mask.iter().enumerate() {
            if m {
                ubar.push(Some(prog.new_vars(&format!("u{k}"), nu)));
                gains.push(Some(prog.new_vars(&format!("K{k}"), nu * nx)));
            } else {
                ubar.push(None);
                gains.push(None);
            }
        }
        Self { nx, nu, ubar, gains }
    }

    pub fn horizon(&self) -> usize {
        self.ubar.len()
    }

    pub fn is_active(&self, k: usize) -> bool {
        k < self.ubar.len() && self.ubar[k].is_some()
    }

    /// `ū_k`; zero at masked nodes.
    pub fn control_mean(&self, k: usize) -> Vec<AffExpr> {
        match &self.ubar[k] {
            Some(v) => v.iter().map(|&i| AffExpr::var(i)).collect(),
            None => vec![AffExpr::default(); self.nu],
        }
    }

    /// `x̄_k = Φ(k,0) x̄₀ + C_k + Σ_j 𝐁(k,j) ū_j`.
    pub fn state_mean(&self, blocks: &BlockOperators, x0: &DVector<f64>, k: usize) -> Vec<AffExpr> {
        let rows = blocks.x_range(k);
        let base = blocks.a_blk.rows(rows.start, self.nx) * x0 + blocks.c_blk.rows(rows.start, self.nx);
        let mut out: Vec<AffExpr> = base.iter().map(|&c| AffExpr::constant(c)).collect();
        for j in 0..k.min(self.horizon()) {
            if let Some(u) = &self.ubar[j] {
                let b = blocks.b_block(k, j);
                for (r, e) in out.iter_mut().enumerate() {
                    for (a, &v) in u.iter().enumerate() {
                        e.add_term(v, b[(r, a)]);
                    }
                }
            }
        }
        out
    }

    /// Read the policy back from a solution vector.
    pub fn policy(&self, x: &[f64]) -> Policy {
        let mut p = Policy::zero(self.horizon(), self.nu, self.nx, self.ubar.iter().map(Option::is_some).collect());
        for k in 0..self.horizon() {
            if let (Some(u), Some(g)) = (&self.ubar[k], &self.gains[k]) {
                p.ubar[k] = DVector::from_iterator(self.nu, u.iter().map(|&v| x[v]));
                p.gains[k] = DMatrix::from_iterator(self.nu, self.nx, g.iter().map(|&v| x[v]));
            }
        }
        p
    }

    /// Decision vector entries for a given policy; unlisted variables are
    /// left untouched.
    pub fn write_policy(&self, policy: &Policy, x: &mut [f64]) {
        for k in 0..self.horizon() {
            if let (Some(u), Some(g)) = (&self.ubar[k], &self.gains[k]) {
                for (i, &v) in u.iter().enumerate() {
                    x[v] = policy.ubar[k][i];
                }
                for (i, &v) in g.iter().enumerate() {
                    x[v] = policy.gains[k][i];
                }
            }
        }
    }
}

/// Affine square-root factor `Σ_i (C_i + L_i K_i) 𝐒ᵢ^{1/2}` plus constant
/// columns, where `𝐒ᵢ^{1/2}` are the rows of `𝐒^{1/2}` for node `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorSum {
    rows: usize,
    parts: BTreeMap<usize, (DMatrix<f64>, DMatrix<f64>)>,
    extra: Vec<DMatrix<f64>>,
}

impl FactorSum {
    pub fn new(rows: usize) -> Self {
        Self { rows, parts: BTreeMap::new(), extra: Vec::new() }
    }

    fn entry(&mut self, node: usize, nx: usize, nu: usize) -> &mut (DMatrix<f64>, DMatrix<f64>) {
        let rows = self.rows;
        self.parts
            .entry(node)
            .or_insert_with(|| (DMatrix::zeros(rows, nx), DMatrix::zeros(rows, nu)))
    }

    /// `+ C 𝐒_node^{1/2}`.
    pub fn add_const(&mut self, node: usize, c: &DMatrix<f64>, nu: usize) {
        let e = self.entry(node, c.ncols(), nu);
        e.0 += c;
    }

    /// `+ L K_node 𝐒_node^{1/2}`.
    pub fn add_gain(&mut self, node: usize, l: &DMatrix<f64>, nx: usize) {
        let e = self.entry(node, nx, l.ncols());
        e.1 += l;
    }

    /// Append constant columns.
    pub fn add_columns(&mut self, m: &DMatrix<f64>) {
        assert_eq!(m.nrows(), self.rows);
        self.extra.push(m.clone());
    }

    /// Expression with the same Gram as the exact factor but compressed
    /// columns: the stacked `𝐒^{1/2}` rows of the involved nodes are
    /// replaced by an eigen factor of their Gram, and the constant columns
    /// by a factor of their own Gram.
    pub fn build(&self, vars: &PolicyVars, blocks: &BlockOperators) -> MatExpr {
        let nx = blocks.state_dim();
        let nu = blocks.control_dim();
        let nodes: Vec<usize> = self.parts.keys().copied().collect();
        let mut pieces = Vec::new();
        if !nodes.is_empty() {
            let f = compressed_factor(&blocks.s_gram(&nodes), COMPRESS_DROP);
            let r = f.ncols();
            let mut constant = DMatrix::zeros(self.rows, r);
            let mut expr = MatExpr::zeros(self.rows, r);
            for (b, &i) in nodes.iter().enumerate() {
                let fi = f.rows(b * nx, nx);
                let (c, l) = &self.parts[&i];
                constant += c * fi;
                let gain = if i < vars.horizon() { vars.gains[i].as_ref() } else { None };
                if let Some(g) = gain {
                    if l.iter().any(|v| *v != 0.0) {
                        // Entry (row, col) gains L(row, a) F(b, col) K(a, b).
                        for col in 0..r {
                            for row in 0..self.rows {
                                let e = expr.get_mut(row, col);
                                for bb in 0..nx {
                                    let fv = fi[(bb, col)];
                                    if fv == 0.0 {
                                        continue;
                                    }
                                    for a in 0..nu {
                                        let lv = l[(row, a)];
                                        if lv != 0.0 {
                                            e.add_term(g[a + bb * nu], lv * fv);
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            pieces.push(expr.add(&MatExpr::from_const(&constant), 1.0));
        }
        if !self.extra.is_empty() {
            let e = linalg::hstack(&self.extra.iter().collect::<Vec<_>>());
            let gram = &e * e.transpose();
            pieces.push(MatExpr::from_const(&compressed_factor(&gram, COMPRESS_DROP)));
        }
        if pieces.is_empty() {
            return MatExpr::zeros(self.rows, 0);
        }
        MatExpr::hstack(&pieces.iter().collect::<Vec<_>>())
    }

    /// Exact dense value under a given policy, uncompressed.
    pub fn eval(&self, policy: &Policy, blocks: &BlockOperators) -> DMatrix<f64> {
        let nx = blocks.state_dim();
        let mut out = DMatrix::zeros(self.rows, blocks.s_sqrt.ncols());
        for (&i, (c, l)) in &self.parts {
            let mut coef = c.clone();
            if i < policy.gains.len() {
                coef += l * &policy.gains[i];
            }
            out += coef * blocks.s_sqrt.rows(i * nx, nx);
        }
        let mut parts = vec![&out];
        parts.extend(self.extra.iter());
        linalg::hstack(&parts)
    }
}

/// `L P̂_k^{1/2}` as a factor sum.
pub fn state_factor(blocks: &BlockOperators, vars: &PolicyVars, k: usize, left: &DMatrix<f64>) -> FactorSum {
    let nu = blocks.control_dim();
    let nx = blocks.state_dim();
    let mut f = FactorSum::new(left.nrows());
    f.add_const(k, left, nu);
    for j in 0..k.min(vars.horizon()) {
        if vars.is_active(j) {
            f.add_gain(j, &(left * blocks.b_block(k, j)), nx);
        }
    }
    f
}

/// `L P_k^{1/2}` including the estimation-error columns.
pub fn full_state_factor(blocks: &BlockOperators, vars: &PolicyVars, k: usize, left: &DMatrix<f64>) -> FactorSum {
    let mut f = state_factor(blocks, vars, k, left);
    f.add_columns(&(left * &blocks.p_tilde_sqrt[k]));
    f
}

/// `P_{u_k}^{1/2} = K_k 𝐒_k^{1/2}`.
pub fn control_factor(blocks: &BlockOperators, k: usize) -> FactorSum {
    let nu = blocks.control_dim();
    let mut f = FactorSum::new(nu);
    f.add_gain(k, &DMatrix::identity(nu, nu), blocks.state_dim());
    f
}

fn row_matrix(v: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_row_slice(1, v.len(), v.as_slice())
}

fn stack(v: &[AffExpr]) -> MatExpr {
    let mut m = MatExpr::zeros(v.len(), 1);
    for (i, e) in v.iter().enumerate() {
        *m.get_mut(i, 0) = e.clone();
    }
    m
}

fn const_times(m: &DMatrix<f64>, v: &[AffExpr]) -> Vec<AffExpr> {
    stack(v).left_mul(m).column(0)
}

fn offset(v: &[AffExpr], c: &DVector<f64>, scale: f64) -> Vec<AffExpr> {
    v.iter()
        .zip(c.iter())
        .map(|(e, &ci)| {
            let mut e = e.clone();
            e.constant += scale * ci;
            e
        })
        .collect()
}

/// Options shared by the builders.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BuildOptions {
    /// Column chunk width of the spectral-norm LMIs.
    pub lmi_chunk: usize,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self { lmi_chunk: 6 }
    }
}

/// Epigraph variables of the cost terms: `τ_k ≥ ‖ū_k‖` and
/// `s_k ≥ ‖P_{u_k}^{1/2}‖₂` at maneuver nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct CostTerms {
    pub mean_epi: Vec<Option<Var>>,
    pub cov_epi: Vec<Option<Var>>,
    /// `m_χ²(1 − p, n_u)`.
    pub quantile: f64,
    /// `J_ub` as an affine expression of the epigraph variables.
    pub j_ub: AffExpr,
}

/// Upper bound `J_ub` on the `p`-quantile of the total control magnitude.
pub fn build_cost(
    prog: &mut ConvexProgram,
    vars: &PolicyVars,
    blocks: &BlockOperators,
    p: f64,
    control_type: ControlType,
    dts: &[f64],
    opts: BuildOptions,
) -> Result<CostTerms> {
    let nu = blocks.control_dim();
    let quantile = chi2_quantile_coeff(1.0 - p, nu)?;
    prog.set_rigid("cost");
    let mut mean_epi = Vec::new();
    let mut cov_epi = Vec::new();
    let mut j_ub = AffExpr::default();
    for k in 0..vars.horizon() {
        if !vars.is_active(k) {
            mean_epi.push(None);
            cov_epi.push(None);
            continue;
        }
        let tau = prog.new_var(format!("tau{k}"));
        let s = prog.new_var(format!("sigma_u{k}"));
        prog.add_soc("cost", AffExpr::var(tau), vars.control_mean(k));
        let m = control_factor(blocks, k).build(vars, blocks);
        prog.add_spectral_norm_le("cost", &m, &AffExpr::var(s), opts.lmi_chunk);
        let w = match control_type {
            ControlType::Impulsive => 1.0,
            ControlType::ZohContinuous => dts[k],
        };
        j_ub.add_term(tau, w);
        j_ub.add_term(s, w * quantile);
        mean_epi.push(Some(tau));
        cov_epi.push(Some(s));
    }
    Ok(CostTerms { mean_epi, cov_epi, quantile, j_ub })
}

/// `‖ū_k‖ + m_χ²(ε_u, n_u) ‖P_{u_k}^{1/2}‖ ≤ u_max` at every maneuver node,
/// reusing the cost epigraphs.
pub fn build_control_mag_cc(prog: &mut ConvexProgram, cost: &CostTerms, u_max: f64, eps_u: f64, nu: usize) -> Result<f64> {
    let m = chi2_quantile_coeff(eps_u, nu)?;
    for (tau, s) in cost.mean_epi.iter().zip(&cost.cov_epi) {
        if let (Some(tau), Some(s)) = (tau, s) {
            let mut lhs = AffExpr::var(*tau);
            lhs.add_term(*s, m);
            prog.add_le("control_magnitude", &lhs, &AffExpr::constant(u_max));
        }
    }
    Ok(m)
}

/// `‖ū_{k+1} − ū_k‖ + m_χ²(ε_u, n_u) ‖K_{k+1}𝐒_{k+1} − K_k𝐒_k‖ ≤ Δu_max`.
pub fn build_control_rate_cc(
    prog: &mut ConvexProgram,
    vars: &PolicyVars,
    blocks: &BlockOperators,
    k: usize,
    du_max: f64,
    eps_u: f64,
    opts: BuildOptions,
) -> Result<()> {
    if !vars.is_active(k) && !vars.is_active(k + 1) {
        return Ok(());
    }
    let nu = blocks.control_dim();
    let nx = blocks.state_dim();
    let m = chi2_quantile_coeff(eps_u, nu)?;
    let a = vars.control_mean(k + 1);
    let b = vars.control_mean(k);
    let diff: Vec<AffExpr> = a
        .iter()
        .zip(&b)
        .map(|(x, y)| {
            let mut e = x.clone();
            e.add(y, -1.0);
            e.canonical()
        })
        .collect();
    let tau = prog.new_var(format!("rate_mean{k}"));
    let s = prog.new_var(format!("rate_cov{k}"));
    prog.add_soc("control_rate", AffExpr::var(tau), diff);
    let mut f = FactorSum::new(nu);
    let eye = DMatrix::identity(nu, nu);
    if vars.is_active(k + 1) {
        f.add_gain(k + 1, &eye, nx);
    }
    if vars.is_active(k) {
        f.add_gain(k, &(-eye), nx);
    }
    prog.add_spectral_norm_le("control_rate", &f.build(vars, blocks), &AffExpr::var(s), opts.lmi_chunk);
    let mut lhs = AffExpr::var(tau);
    lhs.add_term(s, m);
    prog.add_le("control_rate", &lhs, &AffExpr::constant(du_max));
    Ok(())
}

/// `aᵀx̄_k + b + m_𝒩(ε_j) ‖aᵀP_k^{1/2}‖ ≤ 0`.
pub fn build_hyperplane_cc(
    prog: &mut ConvexProgram,
    vars: &PolicyVars,
    blocks: &BlockOperators,
    x0: &DVector<f64>,
    plane: &Hyperplane,
    eps: f64,
    opts: BuildOptions,
) -> Result<()> {
    if !(eps > 0.0 && eps < 0.5) {
        return Err(ConvexError::RiskOutOfRange { eps, lo: 0.0, hi: 0.5 });
    }
    let m = gaussian_quantile_coeff(eps)?;
    let mean = vars.state_mean(blocks, x0, plane.node);
    let a_row = row_matrix(&plane.a);
    let mut lin = const_times(&a_row, &mean).remove(0);
    lin.constant += plane.b;
    let s = prog.new_var(format!("plane_cov{}", plane.node));
    let f = full_state_factor(blocks, vars, plane.node, &a_row).build(vars, blocks);
    prog.add_spectral_norm_le("hyperplane", &f, &AffExpr::var(s), opts.lmi_chunk);
    lin.add_term(s, m);
    prog.add_le("hyperplane", &lin, &AffExpr::constant(0.0));
    Ok(())
}

/// `‖H(x̄_k − x*_k)‖ + m_χ²(ε_x, n_h) ‖H P_k^{1/2}‖ ≤ d_max`.
pub fn build_tube_cc(
    prog: &mut ConvexProgram,
    vars: &PolicyVars,
    blocks: &BlockOperators,
    x0: &DVector<f64>,
    tube: &Tube,
    k: usize,
    eps_x: f64,
    opts: BuildOptions,
) -> Result<()> {
    let m = chi2_quantile_coeff(eps_x, tube.h.nrows())?;
    let mean = vars.state_mean(blocks, x0, k);
    let dev = const_times(&tube.h, &offset(&mean, &tube.reference[k], -1.0));
    let tau = prog.new_var(format!("tube_mean{k}"));
    let s = prog.new_var(format!("tube_cov{k}"));
    prog.add_soc("tube", AffExpr::var(tau), dev);
    let f = full_state_factor(blocks, vars, k, &tube.h).build(vars, blocks);
    prog.add_spectral_norm_le("tube", &f, &AffExpr::var(s), opts.lmi_chunk);
    let mut lhs = AffExpr::var(tau);
    lhs.add_term(s, m);
    prog.add_le("tube", &lhs, &AffExpr::constant(tube.d_max));
    Ok(())
}

/// `(P_f − P̃_N)^{-1/2}`, or the terminal-floor error.
pub fn terminal_weight(blocks: &BlockOperators, target: &TerminalTarget) -> Result<DMatrix<f64>> {
    let n = blocks.horizon();
    let pt = &blocks.p_tilde_sqrt[n];
    let margin = &target.cov - pt * pt.transpose();
    linalg::inv_sqrt_spd(&margin).ok_or(ConvexError::TerminalFloor { min_eig: linalg::min_eigenvalue(&margin) })
}

/// Terminal mean equality and `‖(P_f − P̃_N)^{-1/2} P̂_N^{1/2}‖₂ ≤ 1`.
pub fn build_terminal(
    prog: &mut ConvexProgram,
    vars: &PolicyVars,
    blocks: &BlockOperators,
    x0: &DVector<f64>,
    target: &TerminalTarget,
    opts: BuildOptions,
) -> Result<()> {
    let w = terminal_weight(blocks, target)?;
    let n = blocks.horizon();
    let mean = vars.state_mean(blocks, x0, n);
    prog.add_eq("terminal_mean", offset(&mean, &target.mean, -1.0).iter().map(AffExpr::canonical).collect());
    let f = state_factor(blocks, vars, n, &w).build(vars, blocks);
    prog.add_spectral_norm_le("terminal_covariance", &f, &AffExpr::constant(1.0), opts.lmi_chunk);
    Ok(())
}

/// Relaxed state-triggered approach cone at node `k` with weight
/// `w_k = −min(g_stc(x̄*_k), 0)`:
/// `w_k c_stc(x̄_k, P_k^{1/2}) ≤ ζ_k`, `ζ_k ≥ 0`. Returns `ζ_k`, or `None`
/// when the trigger is inactive and the constraint is vacuous.
pub fn build_stc(
    prog: &mut ConvexProgram,
    vars: &PolicyVars,
    blocks: &BlockOperators,
    x0: &DVector<f64>,
    cone: &ApproachCone,
    k: usize,
    weight: f64,
    eps_x: f64,
    opts: BuildOptions,
) -> Result<Option<Var>> {
    if !(weight > 0.0) {
        return Ok(None);
    }
    let m_cone = chi2_quantile_coeff(eps_x / 2.0, cone.a_cone.nrows())?;
    let m_axis = gaussian_quantile_coeff(eps_x / 2.0)?;
    let ah = &cone.a_cone * &cone.h_r;
    let bh = row_matrix(&(cone.h_r.transpose() * &cone.b_cone));
    let mean = vars.state_mean(blocks, x0, k);

    let zeta = prog.new_var(format!("zeta{k}"));
    prog.set_rigid("stc_slack");
    prog.add_le("stc_slack", &AffExpr::constant(0.0), &AffExpr::var(zeta));
    let t_mean = prog.new_var(format!("stc_mean{k}"));
    let s_cone = prog.new_var(format!("stc_cone{k}"));
    let s_axis = prog.new_var(format!("stc_axis{k}"));
    prog.add_soc("stc", AffExpr::var(t_mean), const_times(&ah, &mean));
    let f = full_state_factor(blocks, vars, k, &ah).build(vars, blocks);
    prog.add_spectral_norm_le("stc", &f, &AffExpr::var(s_cone), opts.lmi_chunk);
    let f = full_state_factor(blocks, vars, k, &bh).build(vars, blocks);
    prog.add_spectral_norm_le("stc", &f, &AffExpr::var(s_axis), opts.lmi_chunk);

    // w (t − bᵀH x̄ + m₂ s_cone + m₁ s_axis) ≤ ζ
    let mut lhs = const_times(&bh, &mean).remove(0).scaled(-1.0);
    lhs.add_term(t_mean, 1.0);
    lhs.add_term(s_cone, m_cone);
    lhs.add_term(s_axis, m_axis);
    prog.add_le("stc", &lhs.scaled(weight).canonical(), &AffExpr::var(zeta));
    Ok(Some(zeta))
}

/// `c_stc` evaluated exactly for a given mean and full factor.
pub fn stc_value(cone: &ApproachCone, mean: &DVector<f64>, p_sqrt: &DMatrix<f64>, eps_x: f64) -> Result<f64> {
    let m_cone = chi2_quantile_coeff(eps_x / 2.0, cone.a_cone.nrows())?;
    let m_axis = gaussian_quantile_coeff(eps_x / 2.0)?;
    let ah = &cone.a_cone * &cone.h_r;
    let bh = row_matrix(&(cone.h_r.transpose() * &cone.b_cone));
    Ok(cone.residual(mean) + m_cone * linalg::spectral_norm(&(&ah * p_sqrt)) + m_axis * (&bh * p_sqrt).norm())
}

#[cfg(test)]
mod tests;
