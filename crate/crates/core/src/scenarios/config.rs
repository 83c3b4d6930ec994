//! Scenario file schema. Every physical quantity carries its unit in the
//! key name; values are stored exactly as written and converted to
//! scenario units only when a scenario is built.

use serde::{Deserialize, Serialize};
use toml::Value;

use super::ScenarioError;
use crate::dynamics::ControlType;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelChoice {
    Cwh,
    Cr3bp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum McMode {
    Linear,
    Nonlinear,
}

/// Control at which the nonlinear truth evaluates the Gates model.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecutionErrorAt {
    /// The reference control of the linearization, as the planner assumed.
    #[default]
    Reference,
    /// The control actually commanded by the policy.
    Commanded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub dynamics: DynamicsConfig,
    pub horizon: HorizonConfig,
    pub initial: InitialConfig,
    pub uncertainty: UncertaintyConfig,
    pub observation: ObservationConfig,
    pub constraints: ConstraintsConfig,
    pub risk: RiskConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub scp: ScpConfig,
    #[serde(default)]
    pub monte_carlo: MonteCarloConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicsConfig {
    pub model: ModelChoice,
    pub control: ControlType,
    /// CWH chief orbit radius.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chief_radius_km: Option<f64>,
    /// CWH central-body parameter; Earth when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu_km3_per_s2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mass_ratio: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub length_unit_km: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time_unit_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HorizonConfig {
    /// Number of intervals `N`.
    pub segments: usize,
    /// Fixed node spacing (CWH).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt_s: Option<f64>,
    /// Periodic-orbit horizons: nodes evenly spaced over whole revolutions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub revolutions: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nodes_per_revolution: Option<usize>,
    #[serde(default = "one")]
    pub maneuver_every: usize,
    #[serde(default = "one")]
    pub measurement_every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub position_km: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub velocity_km_per_s: Option<[f64; 3]>,
    /// Nondimensional state `(r, v)` for the CR3BP.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state_nd: Option<[f64; 6]>,
    /// Refine `state_nd` into a periodic orbit before use.
    #[serde(default)]
    pub differential_correction: bool,
    pub sigma_position_km: f64,
    pub sigma_velocity_m_per_s: f64,
    /// Initial estimation error; the measurement noise when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filter_sigma_position_m: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filter_sigma_velocity_m_per_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UncertaintyConfig {
    pub accel_sigma_mm_per_s1p5: f64,
    pub gates_fixed_magnitude_cm_per_s: f64,
    pub gates_proportional_magnitude_percent: f64,
    pub gates_fixed_pointing_cm_per_s: f64,
    pub gates_proportional_pointing_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationConfig {
    pub sigma_position_m: f64,
    pub sigma_velocity_m_per_s: f64,
    /// Marks a stand-in measurement model in reports.
    #[serde(default)]
    pub non_paper: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintsConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub u_max_m_per_s: Option<f64>,
    /// Attitude slew limit; with `u_max` sets `Δu_max = u_max ω_max Δt`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_slew_rate_deg_per_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub terminal: Option<TerminalConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tube: Option<TubeConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub approach_cone: Option<ApproachConeConfig>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub hyperplanes: Vec<HyperplaneConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TerminalConfig {
    /// Target mean; the initial mean when all are omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub position_km: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub velocity_km_per_s: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state_nd: Option<[f64; 6]>,
    pub sigma_position_km: f64,
    pub sigma_velocity_m_per_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TubeConfig {
    /// Bound on the position deviation from the reference trajectory.
    pub d_max_km: f64,
    #[serde(default = "one")]
    pub every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApproachConeConfig {
    pub half_angle_deg: f64,
    pub trigger_radius_km: f64,
}

/// `aᵀ x + b ≤ 0` at one node, in scenario units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperplaneConfig {
    pub node: usize,
    pub normal: [f64; 6],
    pub offset: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RiskConfig {
    pub eps_x: f64,
    pub eps_u: f64,
    #[serde(default = "default_quantile")]
    pub quantile_p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    #[serde(default = "default_tol")]
    pub feastol: f64,
    #[serde(default = "default_tol")]
    pub gaptol: f64,
    #[serde(default = "default_max_iters")]
    pub max_iters: u32,
    #[serde(default = "default_chunk")]
    pub lmi_chunk: usize,
    /// Static KKT regularization of the interior-point solver.
    #[serde(default = "default_regularization")]
    pub regularization: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            feastol: default_tol(),
            gaptol: default_tol(),
            max_iters: default_max_iters(),
            lmi_chunk: default_chunk(),
            regularization: default_regularization(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScpConfig {
    #[serde(default = "default_eps_tol")]
    pub eps_tol: f64,
    #[serde(default = "default_scp_iters")]
    pub max_iter: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub penalty_weight: Option<f64>,
    /// Re-evaluate execution noise at the latest controls between iterations.
    #[serde(default)]
    pub relinearize_execution_noise: bool,
}

impl Default for ScpConfig {
    fn default() -> Self {
        Self {
            eps_tol: default_eps_tol(),
            max_iter: default_scp_iters(),
            penalty_weight: None,
            relinearize_execution_noise: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonteCarloConfig {
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_mode")]
    pub mode: McMode,
    /// Truth sub-steps per interval in nonlinear mode.
    #[serde(default = "default_substeps")]
    pub substeps: usize,
    #[serde(default)]
    pub execution_error: ExecutionErrorAt,
}

impl Default for MonteCarloConfig {
    fn default() -> Self {
        Self { samples: default_samples(), seed: 0, mode: default_mode(), substeps: default_substeps(), execution_error: ExecutionErrorAt::Reference }
    }
}

fn one() -> usize {
    1
}
fn default_quantile() -> f64 {
    0.99
}
fn default_tol() -> f64 {
    1e-8
}
fn default_max_iters() -> u32 {
    200
}
fn default_chunk() -> usize {
    6
}
fn default_regularization() -> f64 {
    1e-7
}
fn default_eps_tol() -> f64 {
    1e-3
}
fn default_scp_iters() -> usize {
    15
}
fn default_samples() -> usize {
    1000
}
fn default_mode() -> McMode {
    McMode::Linear
}
fn default_substeps() -> usize {
    10
}

/// Keys that every scenario file must define.
pub const REQUIRED_KEYS: &[&str] = &[
    "name",
    "dynamics.model",
    "dynamics.control",
    "horizon.segments",
    "initial.sigma_position_km",
    "initial.sigma_velocity_m_per_s",
    "uncertainty.accel_sigma_mm_per_s1p5",
    "uncertainty.gates_fixed_magnitude_cm_per_s",
    "uncertainty.gates_proportional_magnitude_percent",
    "uncertainty.gates_fixed_pointing_cm_per_s",
    "uncertainty.gates_proportional_pointing_deg",
    "observation.sigma_position_m",
    "observation.sigma_velocity_m_per_s",
    "constraints",
    "risk.eps_x",
    "risk.eps_u",
];

fn lookup<'a>(root: &'a Value, path: &str) -> Option<&'a Value> {
    path.split('.').try_fold(root, |v, key| v.as_table()?.get(key))
}

fn schema_error(msg: impl Into<String>) -> ScenarioError {
    ScenarioError::Schema(msg.into())
}

/// Set `path = value` in a parsed document. The value is read as a TOML
/// literal, falling back to a bare string. The key must already be a
/// known field so that typos surface here rather than as silent defaults.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<(), ScenarioError> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| schema_error(format!("override `{assignment}` is not of the form key=value")))?;
    let path = path.trim();
    let raw = raw.trim();
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => Value::String(raw.to_string()),
    };
    let keys: Vec<&str> = path.split('.').collect();
    let (last, parents) = keys.split_last().ok_or_else(|| schema_error("empty override key"))?;
    let mut node = root;
    for key in parents {
        let table = node.as_table_mut().ok_or_else(|| schema_error(format!("{path}: `{key}` is not a section")))?;
        node = table.entry(key.to_string()).or_insert_with(|| Value::Table(toml::Table::new()));
    }
    let table = node.as_table_mut().ok_or_else(|| schema_error(format!("{path}: parent is not a section")))?;
    table.insert(last.to_string(), value);
    Ok(())
}

/// Parse and validate a scenario document with optional `key=value`
/// overrides.
pub fn parse_scenario(text: &str, overrides: &[String]) -> Result<ScenarioConfig, ScenarioError> {
    let mut root: Value = toml::from_str::<toml::Table>(text).map(Value::Table).map_err(|e| schema_error(e.to_string()))?;
    for o in overrides {
        apply_override(&mut root, o)?;
    }
    let missing: Vec<&str> = REQUIRED_KEYS.iter().copied().filter(|k| lookup(&root, k).is_none()).collect();
    if !missing.is_empty() {
        return Err(schema_error(format!("missing required keys: {}", missing.join(", "))));
    }
    let cfg: ScenarioConfig = root.try_into().map_err(|e: toml::de::Error| schema_error(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Read a scenario file.
pub fn load_scenario(path: &std::path::Path, overrides: &[String]) -> Result<ScenarioConfig, ScenarioError> {
    let text = std::fs::read_to_string(path).map_err(|e| ScenarioError::Io(format!("{}: {e}", path.display())))?;
    parse_scenario(&text, overrides)
}

fn check(ok: bool, key: &str, what: &str) -> Result<(), ScenarioError> {
    if ok {
        Ok(())
    } else {
        Err(ScenarioError::Unit(format!("{key}: {what}")))
    }
}

fn positive(v: f64, key: &str) -> Result<(), ScenarioError> {
    check(v.is_finite() && v > 0.0, key, "must be positive")
}

fn non_negative(v: f64, key: &str) -> Result<(), ScenarioError> {
    check(v.is_finite() && v >= 0.0, key, "must be non-negative")
}

impl ScenarioConfig {
    /// Canonical text form; the basis of run hashes.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let d = &self.dynamics;
        match d.model {
            ModelChoice::Cwh => {
                positive(d.chief_radius_km.ok_or_else(|| schema_error("dynamics.chief_radius_km is required for cwh"))?, "dynamics.chief_radius_km")?;
                if let Some(mu) = d.mu_km3_per_s2 {
                    positive(mu, "dynamics.mu_km3_per_s2")?;
                }
                positive(self.horizon.dt_s.ok_or_else(|| schema_error("horizon.dt_s is required for cwh"))?, "horizon.dt_s")?;
                for (v, key) in [(d.length_unit_km, "dynamics.length_unit_km"), (d.time_unit_s, "dynamics.time_unit_s")] {
                    if let Some(v) = v {
                        positive(v, key)?;
                    }
                }
                check(
                    self.initial.position_km.is_some() && self.initial.velocity_km_per_s.is_some(),
                    "initial.position_km",
                    "cwh needs position_km and velocity_km_per_s",
                )?;
            }
            ModelChoice::Cr3bp => {
                let mu = d.mass_ratio.ok_or_else(|| schema_error("dynamics.mass_ratio is required for cr3bp"))?;
                check(mu > 0.0 && mu < 0.5, "dynamics.mass_ratio", "must lie in (0, 0.5)")?;
                positive(d.length_unit_km.ok_or_else(|| schema_error("dynamics.length_unit_km is required for cr3bp"))?, "dynamics.length_unit_km")?;
                positive(d.time_unit_s.ok_or_else(|| schema_error("dynamics.time_unit_s is required for cr3bp"))?, "dynamics.time_unit_s")?;
                check(self.initial.state_nd.is_some(), "initial.state_nd", "required for cr3bp")?;
                let h = &self.horizon;
                let (Some(r), Some(p)) = (h.revolutions, h.nodes_per_revolution) else {
                    return Err(schema_error("horizon.revolutions and horizon.nodes_per_revolution are required for cr3bp"));
                };
                check(r * p == h.segments, "horizon.segments", "must equal revolutions × nodes_per_revolution")?;
            }
        }
        check(self.horizon.segments >= 1, "horizon.segments", "must be at least 1")?;
        check(self.horizon.maneuver_every >= 1, "horizon.maneuver_every", "must be at least 1")?;
        check(self.horizon.measurement_every >= 1, "horizon.measurement_every", "must be at least 1")?;
        let i = &self.initial;
        non_negative(i.sigma_position_km, "initial.sigma_position_km")?;
        non_negative(i.sigma_velocity_m_per_s, "initial.sigma_velocity_m_per_s")?;
        let u = &self.uncertainty;
        non_negative(u.accel_sigma_mm_per_s1p5, "uncertainty.accel_sigma_mm_per_s1p5")?;
        non_negative(u.gates_fixed_magnitude_cm_per_s, "uncertainty.gates_fixed_magnitude_cm_per_s")?;
        non_negative(u.gates_proportional_magnitude_percent, "uncertainty.gates_proportional_magnitude_percent")?;
        non_negative(u.gates_fixed_pointing_cm_per_s, "uncertainty.gates_fixed_pointing_cm_per_s")?;
        non_negative(u.gates_proportional_pointing_deg, "uncertainty.gates_proportional_pointing_deg")?;
        check(u.gates_proportional_pointing_deg < 90.0, "uncertainty.gates_proportional_pointing_deg", "must be below 90 deg")?;
        positive(self.observation.sigma_position_m, "observation.sigma_position_m")?;
        positive(self.observation.sigma_velocity_m_per_s, "observation.sigma_velocity_m_per_s")?;
        let c = &self.constraints;
        if let Some(v) = c.u_max_m_per_s {
            positive(v, "constraints.u_max_m_per_s")?;
        }
        if let Some(v) = c.max_slew_rate_deg_per_s {
            positive(v, "constraints.max_slew_rate_deg_per_s")?;
            check(c.u_max_m_per_s.is_some(), "constraints.max_slew_rate_deg_per_s", "needs u_max_m_per_s")?;
        }
        if let Some(t) = &c.terminal {
            positive(t.sigma_position_km, "constraints.terminal.sigma_position_km")?;
            positive(t.sigma_velocity_m_per_s, "constraints.terminal.sigma_velocity_m_per_s")?;
        }
        if let Some(t) = &c.tube {
            positive(t.d_max_km, "constraints.tube.d_max_km")?;
            check(t.every >= 1, "constraints.tube.every", "must be at least 1")?;
        }
        if let Some(a) = &c.approach_cone {
            check(a.half_angle_deg > 0.0 && a.half_angle_deg < 90.0, "constraints.approach_cone.half_angle_deg", "must lie in (0, 90)")?;
            positive(a.trigger_radius_km, "constraints.approach_cone.trigger_radius_km")?;
        }
        for (idx, h) in c.hyperplanes.iter().enumerate() {
            check(h.node <= self.horizon.segments, &format!("constraints.hyperplanes[{idx}].node"), "beyond the horizon")?;
        }
        let r = &self.risk;
        check(r.eps_x > 0.0 && r.eps_x < 0.5, "risk.eps_x", "must lie in (0, 0.5)")?;
        check(r.eps_u > 0.0 && r.eps_u < 0.5, "risk.eps_u", "must lie in (0, 0.5)")?;
        check(r.quantile_p > 0.5 && r.quantile_p < 1.0, "risk.quantile_p", "must lie in (0.5, 1)")?;
        positive(self.solver.feastol, "solver.feastol")?;
        positive(self.solver.gaptol, "solver.gaptol")?;
        check(self.solver.lmi_chunk >= 1, "solver.lmi_chunk", "must be at least 1")?;
        check(self.solver.regularization > 0.0, "solver.regularization", "must be positive")?;
        positive(self.scp.eps_tol, "scp.eps_tol")?;
        check(self.scp.max_iter >= 1, "scp.max_iter", "must be at least 1")?;
        check(self.monte_carlo.samples >= 2, "monte_carlo.samples", "must be at least 2")?;
        check(self.monte_carlo.substeps >= 1, "monte_carlo.substeps", "must be at least 1")?;
        Ok(())
    }
}
