//! The two bundled mission scenarios, materialized from scenario files:
//! CWH rendezvous with a state-triggered approach cone, and NRHO
//! station-keeping about a differentially corrected reference orbit.
//!
//! Everything downstream of a [`Scenario`] works in scenario units: km and
//! s for CWH, nondimensional Earth–Moon units for the CR3BP.

mod config;
mod correction;

use std::cell::RefCell;

use nalgebra::{DMatrix, DVector};

pub use config::{
    apply_override, load_scenario, parse_scenario, ApproachConeConfig, ConstraintsConfig, DynamicsConfig,
    ExecutionErrorAt, HorizonConfig, HyperplaneConfig, InitialConfig, McMode, ModelChoice, MonteCarloConfig, ObservationConfig,
    RiskConfig, ScenarioConfig, ScpConfig, SolverConfig, TerminalConfig, TubeConfig, UncertaintyConfig,
    REQUIRED_KEYS,
};
pub use correction::{differential_correct_nrho, PeriodicOrbit};

use crate::blockstats::{BlockError, BlockOperators};
use crate::convexifier::{
    ApproachCone, BuildOptions, ConstraintSet, ConvexError, Hyperplane, RiskBudget, TerminalTarget, Tube,
};
use crate::dynamics::{
    discretize_trajectory, DiscreteSegment, DynamicsError, DynamicsModel, ProcessNoise, ReferenceTrajectory, State,
    Tolerances, MU_EARTH,
};
use crate::navigation::{build_filter_schedule, FilterSchedule, NavigationError};
use crate::planner::{
    self, ClarabelBackend, ConicBackend, PlanError, PlanProblem, PlanSolution, ScpOptions,
};
use crate::uncertainty::{
    attach_execution_noise, linearize_observation, GatesParams, InitialUncertainty, LinearObservation,
    ObservationModel, UncertaintyError,
};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ScenarioError {
    #[error("cannot read scenario: {0}")]
    Io(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("unit violation: {0}")]
    Unit(String),
    #[error("differential correction failed: {0}")]
    Correction(String),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Uncertainty(#[from] UncertaintyError),
    #[error(transparent)]
    Navigation(#[from] NavigationError),
    #[error(transparent)]
    Blocks(#[from] BlockError),
    #[error(transparent)]
    Convex(#[from] ConvexError),
    #[error(transparent)]
    Plan(#[from] PlanError),
}

pub type Result<T> = std::result::Result<T, ScenarioError>;

/// Scenario length and time units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Units {
    pub length_km: f64,
    pub time_s: f64,
}

impl Units {
    pub fn velocity_km_per_s(&self) -> f64 {
        self.length_km / self.time_s
    }

    pub fn nondimensionalize(&self, x: &State) -> State {
        let v = self.velocity_km_per_s();
        State::from_fn(|i, _| if i < 3 { x[i] / self.length_km } else { x[i] / v })
    }

    pub fn dimensionalize(&self, x: &State) -> State {
        let v = self.velocity_km_per_s();
        State::from_fn(|i, _| if i < 3 { x[i] * self.length_km } else { x[i] * v })
    }

    fn length(&self, km: f64) -> f64 {
        km / self.length_km
    }

    fn speed(&self, km_per_s: f64) -> f64 {
        km_per_s / self.velocity_km_per_s()
    }

    /// White-acceleration intensity, km/s^1.5 → scenario units.
    fn accel_density(&self, km_per_s1p5: f64) -> f64 {
        km_per_s1p5 * self.time_s.powf(1.5) / self.length_km
    }
}

/// Discrete-time model about a reference, with execution noise evaluated
/// at `reference_controls`.
#[derive(Debug, Clone)]
pub struct Linearization {
    pub segments: Vec<DiscreteSegment>,
    pub schedule: FilterSchedule,
    pub blocks: BlockOperators,
    pub reference_controls: Vec<DVector<f64>>,
}

/// A materialized scenario in scenario units.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub model: DynamicsModel,
    pub units: Units,
    pub tolerances: Tolerances,
    pub reference: ReferenceTrajectory,
    /// Orbit period when the reference is a corrected periodic orbit.
    pub period: Option<f64>,
    pub noise: ProcessNoise,
    pub gates: GatesParams,
    pub observation: ObservationModel,
    pub observations: Vec<LinearObservation>,
    pub initial: InitialUncertainty,
    pub measured: Vec<bool>,
    pub maneuver_mask: Vec<bool>,
    pub constraints: ConstraintSet,
    pub budget: RiskBudget,
    pub build: BuildOptions,
    pub scp: ScpOptions,
    pub backend: ClarabelBackend,
    /// Segments without execution noise.
    base_segments: Vec<DiscreteSegment>,
    /// Linearization with execution noise at zero control.
    pub nominal: Linearization,
}

/// Result of planning a scenario.
#[derive(Debug, Clone)]
pub struct Plan {
    pub solution: PlanSolution,
    pub problem: PlanProblem,
    pub linearization: Linearization,
}

fn pos_vel(r: [f64; 3], v: [f64; 3], units: &Units) -> DVector<f64> {
    let s = State::new(r[0], r[1], r[2], v[0], v[1], v[2]);
    DVector::from_column_slice(units.nondimensionalize(&s).as_slice())
}

fn position_selector() -> DMatrix<f64> {
    let mut h = DMatrix::zeros(3, 6);
    h.view_mut((0, 0), (3, 3)).fill_with_identity();
    h
}

/// Build whichever scenario the configuration describes.
pub fn build_scenario(cfg: &ScenarioConfig) -> Result<Scenario> {
    match cfg.dynamics.model {
        ModelChoice::Cwh => build_cwh_scenario(cfg),
        ModelChoice::Cr3bp => build_nrho_scenario(cfg),
    }
}

/// Rendezvous about a circular chief: fixed node spacing, linear dynamics.
pub fn build_cwh_scenario(cfg: &ScenarioConfig) -> Result<Scenario> {
    cfg.validate()?;
    if cfg.dynamics.model != ModelChoice::Cwh {
        return Err(ScenarioError::Schema("dynamics.model must be cwh".into()));
    }
    let d = &cfg.dynamics;
    let units = Units { length_km: d.length_unit_km.unwrap_or(1.0), time_s: d.time_unit_s.unwrap_or(1.0) };
    let r0 = d.chief_radius_km.expect("validated");
    let mean_motion = (d.mu_km3_per_s2.unwrap_or(MU_EARTH) / r0.powi(3)).sqrt();
    let model = DynamicsModel::cwh(mean_motion * units.time_s, d.control)?;
    let dt = cfg.horizon.dt_s.expect("validated") / units.time_s;
    let epochs: Vec<f64> = (0..=cfg.horizon.segments).map(|k| k as f64 * dt).collect();
    let x0 = pos_vel(
        cfg.initial.position_km.expect("validated"),
        cfg.initial.velocity_km_per_s.expect("validated"),
        &units,
    );
    let tol = Tolerances::for_model(&model);
    let reference = ReferenceTrajectory::ballistic(&model, State::from_column_slice(x0.as_slice()), epochs, tol)?;
    assemble(cfg, model, units, tol, reference, None, x0)
}

/// Station-keeping on a periodic CR3BP orbit with nodes evenly spaced in
/// time over whole revolutions, starting from the given x–z plane state.
pub fn build_nrho_scenario(cfg: &ScenarioConfig) -> Result<Scenario> {
    cfg.validate()?;
    if cfg.dynamics.model != ModelChoice::Cr3bp {
        return Err(ScenarioError::Schema("dynamics.model must be cr3bp".into()));
    }
    let d = &cfg.dynamics;
    let (l_star, t_star) = (d.length_unit_km.expect("validated"), d.time_unit_s.expect("validated"));
    let model = DynamicsModel::cr3bp(d.mass_ratio.expect("validated"), l_star, t_star, d.control)?;
    let units = Units { length_km: l_star, time_s: t_star };
    let guess = State::from_row_slice(&cfg.initial.state_nd.expect("validated"));
    let orbit = if cfg.initial.differential_correction {
        differential_correct_nrho(&model, &guess, 1e-12)?
    } else {
        let (t, _, _) = find_crossing(&model, &guess)?;
        PeriodicOrbit { state: guess, period: 2.0 * t, residuals: Vec::new() }
    };
    let h = &cfg.horizon;
    let per_rev = h.nodes_per_revolution.expect("validated");
    let dt = orbit.period / per_rev as f64;
    let epochs: Vec<f64> = (0..=h.segments).map(|k| k as f64 * dt).collect();
    let tol = Tolerances::for_model(&model);
    let reference = ReferenceTrajectory::ballistic(&model, orbit.state, epochs, tol)?;
    let x0 = DVector::from_column_slice(orbit.state.as_slice());
    assemble(cfg, model, units, tol, reference, Some(orbit.period), x0)
}

fn find_crossing(model: &DynamicsModel, x0: &State) -> Result<(f64, State, nalgebra::Matrix6<f64>)> {
    crate::dynamics::find_plane_crossing(model, x0, 0.0, 0.05, 20.0, Tolerances::for_model(model))
        .map_err(|e| ScenarioError::Correction(e.to_string()))
}

#[allow(clippy::too_many_arguments)]
fn assemble(
    cfg: &ScenarioConfig,
    model: DynamicsModel,
    units: Units,
    tolerances: Tolerances,
    reference: ReferenceTrajectory,
    period: Option<f64>,
    x0: DVector<f64>,
) -> Result<Scenario> {
    let n = cfg.horizon.segments;
    let u = &cfg.uncertainty;
    let noise = ProcessNoise { sigma_accel: units.accel_density(u.accel_sigma_mm_per_s1p5 * 1e-6) };
    let gates = GatesParams::new(
        units.speed(u.gates_fixed_magnitude_cm_per_s * 1e-5),
        u.gates_proportional_magnitude_percent / 100.0,
        units.speed(u.gates_fixed_pointing_cm_per_s * 1e-5),
        u.gates_proportional_pointing_deg.to_radians(),
    )?;
    let o = &cfg.observation;
    let observation = ObservationModel::full_state(
        units.length(o.sigma_position_m * 1e-3),
        units.speed(o.sigma_velocity_m_per_s * 1e-3),
    )?;
    let observations = reference
        .states()
        .iter()
        .map(|x| linearize_observation(&observation, x))
        .collect::<std::result::Result<Vec<_>, _>>()?;

    let i = &cfg.initial;
    let p_hat0 = InitialUncertainty::pos_vel_cov(units.length(i.sigma_position_km), units.speed(i.sigma_velocity_m_per_s * 1e-3));
    let p_tilde0 = InitialUncertainty::pos_vel_cov(
        units.length(i.filter_sigma_position_m.unwrap_or(o.sigma_position_m) * 1e-3),
        units.speed(i.filter_sigma_velocity_m_per_s.unwrap_or(o.sigma_velocity_m_per_s) * 1e-3),
    );
    let initial = InitialUncertainty::new(x0.clone(), p_hat0, p_tilde0)?;

    let measured: Vec<bool> = (0..=n).map(|k| k % cfg.horizon.measurement_every == 0).collect();
    let maneuver_mask: Vec<bool> = (0..n).map(|k| k % cfg.horizon.maneuver_every == 0).collect();
    let dts: Vec<f64> = reference.epochs().windows(2).map(|w| w[1] - w[0]).collect();

    let c = &cfg.constraints;
    let u_max = c.u_max_m_per_s.map(|v| units.speed(v * 1e-3));
    let du_max = match (u_max, c.max_slew_rate_deg_per_s) {
        // Δu_max = u_max ω_max Δt, with ω in rad per scenario time unit.
        (Some(um), Some(w)) => {
            let dt_max = dts.iter().cloned().fold(0.0, f64::max);
            Some(um * (w.to_radians() * units.time_s) * dt_max)
        }
        _ => None,
    };
    let terminal = c.terminal.as_ref().map(|t| {
        let mean = match (t.state_nd, t.position_km, t.velocity_km_per_s) {
            (Some(s), _, _) => DVector::from_row_slice(&s),
            (None, Some(r), Some(v)) => pos_vel(r, v, &units),
            _ => x0.clone(),
        };
        TerminalTarget {
            mean,
            cov: InitialUncertainty::pos_vel_cov(units.length(t.sigma_position_km), units.speed(t.sigma_velocity_m_per_s * 1e-3)),
        }
    });
    let tube = c.tube.as_ref().map(|t| Tube {
        h: position_selector(),
        reference: reference.states().iter().map(|x| DVector::from_column_slice(x.as_slice())).collect(),
        d_max: units.length(t.d_max_km),
        nodes: (0..=n).filter(|k| k % t.every == 0).collect(),
    });
    let approach_cone = c.approach_cone.as_ref().map(|a| ApproachCone {
        a_cone: DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0]),
        b_cone: DVector::from_vec(vec![0.0, a.half_angle_deg.to_radians().tan(), 0.0]),
        h_r: position_selector(),
        r_trigger: units.length(a.trigger_radius_km),
    });
    let hyperplanes = c
        .hyperplanes
        .iter()
        .map(|h| Hyperplane { node: h.node, a: DVector::from_row_slice(&h.normal), b: h.offset })
        .collect();
    let constraints = ConstraintSet { hyperplanes, tube, u_max, du_max, terminal, approach_cone };
    constraints.validate(6, n)?;

    let mut budget = RiskBudget::new(cfg.risk.eps_x, cfg.risk.eps_u)?;
    budget.p = cfg.risk.quantile_p;
    budget.validate()?;

    let base_segments = discretize_trajectory(&model, &reference, noise, tolerances)?;
    let nominal = linearize_parts(
        &base_segments,
        &maneuver_mask,
        &gates,
        &observations,
        &initial,
        &measured,
        &vec![DVector::zeros(3); n],
    )?;
    let s = &cfg.solver;
    Ok(Scenario {
        config: cfg.clone(),
        model,
        units,
        tolerances,
        reference,
        period,
        noise,
        gates,
        observation,
        observations,
        initial,
        measured,
        maneuver_mask,
        constraints,
        budget,
        build: BuildOptions { lmi_chunk: s.lmi_chunk },
        scp: ScpOptions { eps_tol: cfg.scp.eps_tol, max_iter: cfg.scp.max_iter, penalty_weight: cfg.scp.penalty_weight },
        backend: ClarabelBackend { feastol: s.feastol, gaptol: s.gaptol, max_iters: s.max_iters, regularization: s.regularization },
        base_segments,
        nominal,
    })
}

fn linearize_parts(
    base_segments: &[DiscreteSegment],
    maneuver_mask: &[bool],
    gates: &GatesParams,
    observations: &[LinearObservation],
    initial: &InitialUncertainty,
    measured: &[bool],
    u_ref: &[DVector<f64>],
) -> Result<Linearization> {
    if u_ref.len() != base_segments.len() {
        return Err(ScenarioError::Schema(format!("{} reference controls for {} segments", u_ref.len(), base_segments.len())));
    }
    let mut segments = base_segments.to_vec();
    for (k, seg) in segments.iter_mut().enumerate() {
        if maneuver_mask[k] {
            let u = nalgebra::Vector3::from_column_slice(u_ref[k].as_slice());
            attach_execution_noise(seg, &u, gates);
        } else {
            seg.g_exe = DMatrix::zeros(6, 3);
        }
    }
    let schedule = build_filter_schedule(&segments, observations, &initial.p_tilde0, measured)?;
    let blocks = BlockOperators::assemble(&segments, &schedule, &initial.p_hat0)?;
    Ok(Linearization { segments, schedule, blocks, reference_controls: u_ref.to_vec() })
}

impl Scenario {
    pub fn horizon(&self) -> usize {
        self.maneuver_mask.len()
    }

    /// Interval lengths in scenario time units.
    pub fn dts(&self) -> Vec<f64> {
        self.reference.epochs().windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// Attach execution noise at `u_ref` and rebuild the filter schedule
    /// and block operators. Nodes without a maneuver carry no execution
    /// error.
    pub fn linearize(&self, u_ref: &[DVector<f64>]) -> Result<Linearization> {
        linearize_parts(
            &self.base_segments,
            &self.maneuver_mask,
            &self.gates,
            &self.observations,
            &self.initial,
            &self.measured,
            u_ref,
        )
    }

    pub fn problem(&self, lin: &Linearization) -> PlanProblem {
        PlanProblem {
            blocks: lin.blocks.clone(),
            x0_mean: self.initial.mean.clone(),
            constraints: self.constraints.clone(),
            budget: self.budget.clone(),
            maneuver_mask: self.maneuver_mask.clone(),
            control_type: self.model.control_type(),
            dts: self.dts(),
            build: self.build,
        }
    }

    /// Solve the scenario with its own backend settings.
    pub fn plan(&self) -> Result<Plan> {
        self.plan_with(&self.backend)
    }

    /// Solve the scenario. With an approach cone this runs the fixed-point
    /// loop, optionally re-evaluating execution noise at each iterate.
    pub fn plan_with(&self, backend: &dyn ConicBackend) -> Result<Plan> {
        let problem = self.problem(&self.nominal);
        if self.constraints.approach_cone.is_none() {
            let solution = planner::solve_fixed(&problem, backend)?;
            return Ok(Plan { solution, problem, linearization: self.nominal.clone() });
        }
        let latest = RefCell::new(self.nominal.clone());
        let relinearize = |policy: &crate::blockstats::Policy| -> planner::Result<Option<PlanProblem>> {
            if !self.config.scp.relinearize_execution_noise {
                return Ok(None);
            }
            let lin = self.linearize(&policy.ubar).map_err(|e| PlanError::Invalid(e.to_string()))?;
            let p = self.problem(&lin);
            *latest.borrow_mut() = lin;
            Ok(Some(p))
        };
        let (solution, problem) = planner::solve_with_stc_relinearized(&problem, backend, self.scp, relinearize)?;
        Ok(Plan { solution, problem, linearization: latest.into_inner() })
    }
}
