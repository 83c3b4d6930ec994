//! Seeded Monte-Carlo certification of a plan.
//!
//! Linear mode replays the design model exactly: truth, filter, z-process
//! and policy all use the discretized segments the plan was built on.
//! Nonlinear mode propagates the truth with the full equations of motion,
//! estimates with an extended Kalman filter, and applies execution errors
//! at the controls actually commanded.
//!
//! Every sample draws from its own ChaCha stream selected by the sample
//! index, so results do not depend on thread scheduling.

mod linear;
mod nonlinear;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blockstats::Policy;
use crate::convexifier::{ConstraintSet, RiskBudget};
use crate::dynamics::{Control, DiscreteSegment, DynamicsModel, ProcessNoise, State, Tolerances, MOON_RADIUS};
use crate::linalg;
use crate::navigation::FilterSchedule;
use crate::scenarios::{ExecutionErrorAt, McMode, Plan, Scenario};
use crate::uncertainty::{GatesParams, InitialUncertainty, LinearObservation, ObservationModel};

pub use linear::run_linear_mc;
pub use nonlinear::run_nonlinear_mc;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SimError {
    #[error("invalid Monte-Carlo input: {0}")]
    Invalid(String),
    #[error("every sample failed; first failure: {0}")]
    AllFailed(String),
}

pub type Result<T> = std::result::Result<T, SimError>;

/// Run settings.
#[derive(Debug, Clone, PartialEq)]
pub struct McConfig {
    pub samples: usize,
    pub seed: u64,
    pub mode: McMode,
    /// Noise sub-steps per interval in nonlinear mode.
    pub substeps: usize,
    /// Keep per-sample trajectories for dumping.
    pub keep_trajectories: bool,
}

impl Default for McConfig {
    fn default() -> Self {
        Self { samples: 1000, seed: 0, mode: McMode::Linear, substeps: 10, keep_trajectories: false }
    }
}

impl McConfig {
    fn validate(&self) -> Result<()> {
        if self.samples < 2 {
            return Err(SimError::Invalid("at least two samples are required".into()));
        }
        if self.substeps == 0 {
            return Err(SimError::Invalid("substeps must be positive".into()));
        }
        Ok(())
    }
}

/// Everything a Monte-Carlo run needs from the design, in scenario units.
#[derive(Debug, Clone)]
pub struct McSetup {
    pub segments: Vec<DiscreteSegment>,
    pub observations: Vec<LinearObservation>,
    pub schedule: FilterSchedule,
    pub initial: InitialUncertainty,
    pub policy: Policy,
    pub constraints: ConstraintSet,
    pub budget: RiskBudget,
    /// Trigger weights of the final solve; the cone is checked where positive.
    pub stc_weights: Vec<f64>,
    /// Planned means `x̄_k` and covariances `P_k`, `k = 0..=N`.
    pub planned_means: Vec<DVector<f64>>,
    pub planned_covs: Vec<DMatrix<f64>>,
    pub j_ub: f64,
    /// Fuel weight of each `‖u_k‖`.
    pub time_weights: Vec<f64>,
    /// Multiplier taking scenario velocity units to m/s.
    pub velocity_to_m_per_s: f64,
}

impl McSetup {
    pub fn from_plan(scenario: &Scenario, plan: &Plan) -> Self {
        let problem = &plan.problem;
        let sol = &plan.solution;
        let blocks = &problem.blocks;
        let n = blocks.horizon();
        let planned_covs = (0..=n)
            .map(|k| {
                let (_, p, _) = blocks.sqrt_covariances(&sol.policy, k);
                &p * p.transpose()
            })
            .collect();
        Self {
            segments: plan.linearization.segments.clone(),
            observations: scenario.observations.clone(),
            schedule: plan.linearization.schedule.clone(),
            initial: scenario.initial.clone(),
            policy: sol.policy.clone(),
            constraints: problem.constraints.clone(),
            budget: problem.budget.clone(),
            stc_weights: sol.stc_weights.clone(),
            planned_means: sol.mean_states.clone(),
            planned_covs,
            j_ub: sol.j_ub,
            time_weights: (0..n).map(|k| problem.time_weight(k)).collect(),
            velocity_to_m_per_s: scenario.units.velocity_km_per_s() * 1e3,
        }
    }

    pub fn horizon(&self) -> usize {
        self.segments.len()
    }

    fn validate(&self) -> Result<()> {
        let n = self.horizon();
        let ok = n > 0
            && self.observations.len() == n + 1
            && self.schedule.nodes() == n + 1
            && self.policy.ubar.len() == n
            && self.policy.gains.len() == n
            && self.policy.maneuver_mask.len() == n
            && self.planned_means.len() == n + 1
            && self.planned_covs.len() == n + 1
            && self.time_weights.len() == n;
        if !ok {
            return Err(SimError::Invalid("setup dimensions disagree with the horizon".into()));
        }
        if self.stc_weights.len() != n + 1 && !self.stc_weights.is_empty() {
            return Err(SimError::Invalid("trigger weights must cover every node".into()));
        }
        Ok(())
    }
}

/// Nonlinear truth and measurement models, in scenario units.
#[derive(Debug, Clone)]
pub struct NonlinearModel {
    pub model: DynamicsModel,
    pub observation: ObservationModel,
    pub noise: ProcessNoise,
    pub gates: GatesParams,
    /// Node epochs `t_0..t_N`.
    pub epochs: Vec<f64>,
    pub tolerances: Tolerances,
    /// Samples coming closer than this to the body are flagged as impacts.
    pub impact_radius: Option<f64>,
    pub execution_error: ExecutionErrorAt,
    /// Reference controls of the linearization the plan was built on.
    pub reference_controls: Vec<Control>,
}

impl NonlinearModel {
    /// Truth models about the plan's own linearization.
    pub fn from_plan(scenario: &Scenario, plan: &Plan) -> Self {
        let mut nl = Self::from_scenario(scenario);
        nl.reference_controls = controls(&plan.linearization.reference_controls);
        nl
    }

    pub fn from_scenario(scenario: &Scenario) -> Self {
        let impact_radius = scenario.model.body_distance(&State::zeros()).map(|_| MOON_RADIUS / scenario.units.length_km);
        Self {
            model: scenario.model.clone(),
            observation: scenario.observation.clone(),
            noise: scenario.noise,
            gates: scenario.gates,
            epochs: scenario.reference.epochs().to_vec(),
            tolerances: scenario.tolerances,
            impact_radius,
            execution_error: scenario.config.monte_carlo.execution_error,
            reference_controls: controls(&scenario.nominal.reference_controls),
        }
    }
}

fn controls(u: &[DVector<f64>]) -> Vec<Control> {
    u.iter().map(|u| Control::from_column_slice(u.as_slice())).collect()
}

/// One node of a sampled trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryPoint {
    pub t: f64,
    pub x: DVector<f64>,
    /// Control applied at the node; zero at the final node.
    pub u: DVector<f64>,
}

/// Outcome of a single closed-loop sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutcome {
    /// True states `x_0..x_N`.
    pub states: Vec<DVector<f64>>,
    /// Commanded controls `u_0..u_{N−1}`.
    pub controls: Vec<DVector<f64>>,
    pub failure: Option<String>,
}

/// Per-sample data kept after aggregation.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub delta_v_m_per_s: f64,
    pub failure: Option<String>,
    pub trajectory: Option<Vec<TrajectoryPoint>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaVSummary {
    pub quantile_p: f64,
    /// Order statistic of the total ΔV at `quantile_p`.
    pub dv_quantile_m_per_s: f64,
    pub j_ub_m_per_s: f64,
    pub mean_m_per_s: f64,
    pub max_m_per_s: f64,
    /// `(p, quantile)` pairs, increasing in `p`.
    pub quantiles: Vec<(f64, f64)>,
    pub upper_bounded: bool,
}

/// Empirical violation rate of one chance constraint at one node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViolationRate {
    pub family: String,
    pub node: usize,
    pub violations: usize,
    pub rate: f64,
    pub budget: f64,
    /// Binomial standard deviation at the budget.
    pub sigma: f64,
    /// `budget + 3 sigma`.
    pub limit: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TerminalCheck {
    pub target_mean: Vec<f64>,
    pub mean_error: Vec<f64>,
    /// `sqrt(Σ̂_ii / n)`.
    pub standard_error: Vec<f64>,
    /// Largest `|error_i| / standard_error_i`.
    pub max_normalized_error: f64,
    pub mean_pass: bool,
    pub sample_covariance: Vec<Vec<f64>>,
    /// Largest eigenvalue of `P_f^{-1/2} Σ̂ P_f^{-1/2}`.
    pub whitened_max_eigenvalue: f64,
    /// Value the statistic stays below with probability 0.99865 when
    /// `Σ = P_f` exactly.
    pub psd_threshold: f64,
    pub psd_pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub mode: McMode,
    pub seed: u64,
    pub samples: usize,
    pub failed_samples: usize,
    pub delta_v: DeltaVSummary,
    pub violations: Vec<ViolationRate>,
    pub terminal: Option<TerminalCheck>,
    /// Largest `|mean_i − x̄_k,i| / sqrt(P_k,ii / n)` over nodes and
    /// components: distance of the sample mean from the planned mean.
    pub max_mean_deviation_sigma: f64,
    pub all_pass: bool,
}

impl McReport {
    /// Violation rates of one constraint family.
    pub fn family(&self, family: &str) -> impl Iterator<Item = &ViolationRate> {
        let family = family.to_string();
        self.violations.iter().filter(move |v| v.family == family)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct McRun {
    pub report: McReport,
    pub samples: Vec<SampleRecord>,
}

/// Order statistic at 1-based index `ceil(p n)`: the smallest sample value
/// `a` with an empirical CDF of at least `p`.
pub fn empirical_quantile(samples: &[f64], p: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(SimError::Invalid("quantile of an empty sample".into()));
    }
    if !(p > 0.0 && p <= 1.0) {
        return Err(SimError::Invalid(format!("quantile level {p} outside (0, 1]")));
    }
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    let idx = ((p * v.len() as f64).ceil() as usize).clamp(1, v.len());
    Ok(v[idx - 1])
}

/// Threshold on the largest eigenvalue of a whitened sample covariance of
/// `n` draws in dimension `d`, at the 3σ one-sided level, when the true
/// covariance is the identity. Found by seeded simulation.
pub fn psd_order_threshold(d: usize, n: usize) -> f64 {
    const REPLICATES: usize = 4000;
    const LEVEL: f64 = 0.99865;
    let stats: Vec<f64> = (0..REPLICATES)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream(0x5eed_c0de, r as u64);
            let xs: Vec<DVector<f64>> = (0..n).map(|_| normal_vector(&mut rng, d)).collect();
            linalg::max_eigenvalue(&sample_covariance(&xs).1)
        })
        .collect();
    empirical_quantile(&stats, LEVEL).expect("replicates are non-empty")
}

pub(crate) fn stream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub(crate) fn normal_vector(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Sample mean and unbiased sample covariance.
pub fn sample_covariance(xs: &[DVector<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let n = xs.len();
    let d = xs[0].len();
    let mut mean = DVector::zeros(d);
    for x in xs {
        mean += x;
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for x in xs {
        let e = x - &mean;
        cov += &e * e.transpose();
    }
    cov /= (n.max(2) - 1) as f64;
    (mean, cov)
}

/// Run the mode selected in `cfg`.
pub fn run_mc(setup: &McSetup, nonlinear: Option<&NonlinearModel>, cfg: &McConfig) -> Result<McRun> {
    match cfg.mode {
        McMode::Linear => run_linear_mc(setup, cfg),
        McMode::Nonlinear => {
            let model = nonlinear.ok_or_else(|| SimError::Invalid("nonlinear mode needs a truth model".into()))?;
            run_nonlinear_mc(setup, model, cfg)
        }
    }
}

/// Run `sample(i)` for every index in parallel and aggregate in index order.
fn run_samples<F>(setup: &McSetup, cfg: &McConfig, epochs: &[f64], sample: F) -> Result<McRun>
where
    F: Fn(&mut ChaCha8Rng) -> SampleOutcome + Sync,
{
    setup.validate()?;
    cfg.validate()?;
    let outcomes: Vec<SampleOutcome> = (0..cfg.samples)
        .into_par_iter()
        .map(|i| sample(&mut stream(cfg.seed, i as u64)))
        .collect();
    aggregate(setup, cfg, epochs, outcomes)
}

fn total_delta_v(setup: &McSetup, controls: &[DVector<f64>]) -> f64 {
    controls.iter().zip(&setup.time_weights).map(|(u, w)| u.norm() * w).sum::<f64>() * setup.velocity_to_m_per_s
}

fn binomial(family: &str, node: usize, violations: usize, n: usize, budget: f64) -> ViolationRate {
    let rate = violations as f64 / n as f64;
    let sigma = (budget * (1.0 - budget) / n as f64).sqrt();
    let limit = budget + 3.0 * sigma;
    ViolationRate { family: family.into(), node, violations, rate, budget, sigma, limit, pass: rate <= limit }
}

fn count(ok: &[&SampleOutcome], violated: impl Fn(&SampleOutcome) -> bool) -> usize {
    ok.iter().filter(|s| violated(s)).count()
}

fn aggregate(setup: &McSetup, cfg: &McConfig, epochs: &[f64], outcomes: Vec<SampleOutcome>) -> Result<McRun> {
    let n_nodes = setup.horizon() + 1;
    let ok: Vec<&SampleOutcome> = outcomes.iter().filter(|s| s.failure.is_none()).collect();
    if ok.len() < 2 {
        let first = outcomes.iter().find_map(|s| s.failure.clone()).unwrap_or_default();
        return Err(SimError::AllFailed(first));
    }
    let n = ok.len();
    let c = &setup.constraints;
    let b = &setup.budget;
    let mut violations = Vec::new();

    if let Some(u_max) = c.u_max {
        for k in (0..setup.horizon()).filter(|&k| setup.policy.maneuver_mask[k]) {
            violations.push(binomial("control_magnitude", k, count(&ok, |s| s.controls[k].norm() > u_max), n, b.eps_u));
        }
    }
    if let Some(du) = c.du_max {
        let mask = &setup.policy.maneuver_mask;
        for k in (0..setup.horizon().saturating_sub(1)).filter(|&k| mask[k] || mask[k + 1]) {
            let v = count(&ok, |s| (&s.controls[k + 1] - &s.controls[k]).norm() > du);
            violations.push(binomial("control_rate", k, v, n, b.eps_u));
        }
    }
    if !c.hyperplanes.is_empty() {
        let eps = b.hyperplane_allocation(c.hyperplanes.len()).map_err(|e| SimError::Invalid(e.to_string()))?;
        for (h, e) in c.hyperplanes.iter().zip(eps) {
            let v = count(&ok, |s| h.a.dot(&s.states[h.node]) + h.b > 0.0);
            violations.push(binomial("hyperplane", h.node, v, n, e));
        }
    }
    if let Some(t) = &c.tube {
        for &k in &t.nodes {
            let v = count(&ok, |s| (&t.h * (&s.states[k] - &t.reference[k])).norm() > t.d_max);
            violations.push(binomial("tube", k, v, n, b.eps_x));
        }
    }
    if let Some(cone) = &c.approach_cone {
        for k in (0..n_nodes).filter(|&k| setup.stc_weights.get(k).is_some_and(|&w| w > 0.0)) {
            let v = count(&ok, |s| cone.residual(&s.states[k]) > 0.0);
            violations.push(binomial("approach_cone", k, v, n, b.eps_x));
        }
    }

    let terminal = c.terminal.as_ref().map(|t| {
        let finals: Vec<DVector<f64>> = ok.iter().map(|s| s.states[n_nodes - 1].clone()).collect();
        let (mean, cov) = sample_covariance(&finals);
        let err = &mean - &t.mean;
        let se: Vec<f64> = (0..err.len()).map(|i| (cov[(i, i)] / n as f64).sqrt()).collect();
        let max_norm = err.iter().zip(&se).map(|(e, s)| e.abs() / s).fold(0.0, f64::max);
        let w = linalg::inv_sqrt_spd(&t.cov).expect("terminal covariance validated positive definite");
        let stat = linalg::max_eigenvalue(&linalg::symmetrize(&(&w * &cov * &w)));
        let threshold = psd_order_threshold(err.len(), n);
        TerminalCheck {
            target_mean: t.mean.iter().copied().collect(),
            mean_error: err.iter().copied().collect(),
            standard_error: se,
            max_normalized_error: max_norm,
            mean_pass: max_norm < 3.0,
            sample_covariance: (0..cov.nrows()).map(|i| cov.row(i).iter().copied().collect()).collect(),
            whitened_max_eigenvalue: stat,
            psd_threshold: threshold,
            psd_pass: stat <= threshold,
        }
    });

    let mut max_dev: f64 = 0.0;
    for k in 0..n_nodes {
        let xs: Vec<DVector<f64>> = ok.iter().map(|s| s.states[k].clone()).collect();
        let (mean, _) = sample_covariance(&xs);
        for i in 0..mean.len() {
            let sd = (setup.planned_covs[k][(i, i)] / n as f64).sqrt();
            if sd > 0.0 {
                max_dev = max_dev.max((mean[i] - setup.planned_means[k][i]).abs() / sd);
            }
        }
    }

    let dvs: Vec<f64> = ok.iter().map(|s| total_delta_v(setup, &s.controls)).collect();
    let p = b.p;
    let mut levels = vec![0.5, 0.9, 0.95, 0.99, 0.999, p];
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    let quantiles = levels.iter().map(|&q| (q, empirical_quantile(&dvs, q).expect("non-empty"))).collect();
    let dv_q = empirical_quantile(&dvs, p)?;
    let j_ub = setup.j_ub * setup.velocity_to_m_per_s;
    let delta_v = DeltaVSummary {
        quantile_p: p,
        dv_quantile_m_per_s: dv_q,
        j_ub_m_per_s: j_ub,
        mean_m_per_s: dvs.iter().sum::<f64>() / n as f64,
        max_m_per_s: dvs.iter().copied().fold(0.0, f64::max),
        quantiles,
        upper_bounded: dv_q <= j_ub,
    };

    let all_pass = delta_v.upper_bounded
        && violations.iter().all(|v| v.pass)
        && terminal.as_ref().is_none_or(|t| t.psd_pass && (cfg.mode == McMode::Nonlinear || t.mean_pass));
    let report = McReport {
        mode: cfg.mode,
        seed: cfg.seed,
        samples: outcomes.len(),
        failed_samples: outcomes.len() - n,
        delta_v,
        violations,
        terminal,
        max_mean_deviation_sigma: max_dev,
        all_pass,
    };

    let samples = outcomes
        .into_iter()
        .map(|s| SampleRecord {
            delta_v_m_per_s: if s.failure.is_none() { total_delta_v(setup, &s.controls) } else { f64::NAN },
            trajectory: cfg.keep_trajectories.then(|| {
                s.states
                    .iter()
                    .enumerate()
                    .map(|(k, x)| TrajectoryPoint {
                        t: epochs[k],
                        x: x.clone(),
                        u: s.controls.get(k).cloned().unwrap_or_else(|| DVector::zeros(setup.policy.ubar[0].len())),
                    })
                    .collect()
            }),
            failure: s.failure,
        })
        .collect();
    Ok(McRun { report, samples })
}

/// `u_k = ū_k + K_k z_k` at maneuver nodes, zero elsewhere.
fn policy_control(policy: &Policy, k: usize, z: &DVector<f64>) -> DVector<f64> {
    if policy.maneuver_mask[k] {
        &policy.ubar[k] + &policy.gains[k] * z
    } else {
        DVector::zeros(policy.ubar[k].len())
    }
}

fn factor(p: &DMatrix<f64>) -> DMatrix<f64> {
    linalg::psd_factor(p, 1e-10).unwrap_or_else(|_| DMatrix::zeros(p.nrows(), p.ncols()))
}

#[cfg(test)]
mod tests;
