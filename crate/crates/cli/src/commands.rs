use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use ccorbit::blockstats::Policy;
use ccorbit::dynamics::ControlType;
use ccorbit::linalg::spectral_norm;
use ccorbit::planner::{self, PlanSolution, PlanStatus};
use ccorbit::scenarios::{build_scenario, load_scenario, McMode, Plan, Scenario, ScenarioConfig, ScenarioError};
use ccorbit::simulator::{run_mc, McConfig, McSetup, NonlinearModel};
use nalgebra::{DMatrix, DVector};

use crate::artifacts::*;

pub const FEASTOL_ENV: &str = "CCORBIT_SOLVER_FEASTOL";

/// Parse the scenario with command-line overrides; the solver tolerance
/// from the environment applies before explicit `--set` values.
pub fn load(path: &Path, overrides: &[String]) -> Result<(ScenarioConfig, Scenario)> {
    if !path.is_file() {
        return Err(Exit::missing(format!("scenario file not found: {}", path.display())));
    }
    let mut all = Vec::new();
    if let Ok(v) = std::env::var(FEASTOL_ENV) {
        all.push(format!("solver.feastol={v}"));
    }
    all.extend(overrides.iter().cloned());
    let cfg = load_scenario(path, &all).map_err(|e| match e {
        ScenarioError::Io(m) => Exit::missing(m),
        other => Exit::rejected(other.to_string()),
    })?;
    let scenario = build_scenario(&cfg).map_err(|e| Exit::numerical(format!("building scenario: {e}")))?;
    Ok((cfg, scenario))
}

fn column(v: &DVector<f64>) -> Vec<f64> {
    v.iter().copied().collect()
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn control_scale(scenario: &Scenario) -> (f64, &'static str) {
    let v = scenario.units.velocity_km_per_s() * 1e3;
    match scenario.model.control_type() {
        ControlType::Impulsive => (v, "m_per_s"),
        ControlType::ZohContinuous => (v / scenario.units.time_s, "m_per_s2"),
    }
}

fn plan_file(cfg: &ScenarioConfig, scenario: &Scenario, plan: &Plan) -> PlanFile {
    let sol = &plan.solution;
    let v = scenario.units.velocity_km_per_s() * 1e3;
    PlanFile {
        format: PLAN_FORMAT,
        scenario: cfg.name.clone(),
        plan_hash: plan_hash(cfg),
        status: sol.status,
        diagnosis: sol.diagnosis.clone(),
        j_ub: finite(sol.j_ub),
        j_ub_m_per_s: finite(sol.j_ub * v),
        penalty_weight: finite(sol.penalty_weight),
        penalty: finite(sol.penalty),
        zeta: sol.zeta.clone(),
        stc_weights: sol.stc_weights.clone(),
        margins: sol.margins.iter().map(|(k, m)| (k.clone(), finite(*m))).collect(),
        scp_trace: sol.scp_trace.iter().map(TraceRow::from).collect(),
        maneuver_mask: sol.policy.maneuver_mask.clone(),
        ubar: sol.policy.ubar.iter().map(column).collect(),
        gains: sol.policy.gains.iter().map(rows).collect(),
        reference_controls: plan.linearization.reference_controls.iter().map(column).collect(),
        mean_states: sol.mean_states.iter().map(column).collect(),
        non_paper_observation: cfg.observation.non_paper,
    }
}

pub fn cmd_plan(scenario_path: &Path, out: &Path, overrides: &[String]) -> Result<()> {
    let (cfg, scenario) = load(scenario_path, overrides)?;
    let plan = scenario.plan().map_err(|e| Exit::numerical(format!("planning failed: {e}")))?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut manifest = RunManifest::new(scenario_path, &cfg);
    manifest.planned_unix_s = Some(now_unix_s());

    let file = plan_file(&cfg, &scenario, &plan);
    let bytes = write_json(&out.join(PLAN_FILE), &file)?;
    manifest.record(PLAN_FILE, &bytes);

    let units = scenario.units;
    let epochs = scenario.reference.epochs();
    let (u_scale, u_unit) = control_scale(&scenario);
    let sol = &plan.solution;
    let n = scenario.horizon();
    let mut header = columns(&["k", "t_s", "x_km", "y_km", "z_km", "vx_km_per_s", "vy_km_per_s", "vz_km_per_s"]);
    header.extend(["ux", "uy", "uz"].iter().map(|c| format!("{c}_{u_unit}")));
    let mean_rows = (0..=n).map(|k| {
        let x = units.dimensionalize(&ccorbit::dynamics::State::from_column_slice(sol.mean_states[k].as_slice()));
        let mut r = vec![k.to_string(), num(epochs[k] * units.time_s)];
        r.extend(x.iter().map(|v| num(*v)));
        let u = sol.policy.ubar.get(k).map_or([0.0; 3], |u| [u[0], u[1], u[2]]);
        r.extend(u.iter().map(|v| num(v * u_scale)));
        r
    });
    let bytes = write_csv(&out.join(MEAN_CSV), &header, mean_rows.collect::<Vec<_>>())?;
    manifest.record_csv(MEAN_CSV, &header, &bytes);

    // 3σ radii: three times the largest singular value of the position and
    // velocity rows of the state-dispersion factor.
    let header = columns(&["k", "t_s", "position_3sigma_km", "velocity_3sigma_m_per_s", "estimate_position_3sigma_km"]);
    let v = units.velocity_km_per_s();
    let env_rows = (0..=n).map(|k| {
        let (p_hat, p, _) = plan.problem.blocks.sqrt_covariances(&sol.policy, k);
        let pos = 3.0 * spectral_norm(&p.rows(0, 3).into_owned()) * units.length_km;
        let vel = 3.0 * spectral_norm(&p.rows(3, 3).into_owned()) * v * 1e3;
        let est = 3.0 * spectral_norm(&p_hat.rows(0, 3).into_owned()) * units.length_km;
        vec![k.to_string(), num(epochs[k] * units.time_s), num(pos), num(vel), num(est)]
    });
    let bytes = write_csv(&out.join(ENVELOPE_CSV), &header, env_rows.collect::<Vec<_>>())?;
    manifest.record_csv(ENVELOPE_CSV, &header, &bytes);
    write_json(&out.join(MANIFEST_FILE), &manifest)?;

    println!(
        "{}: {:?}, J_ub = {} m/s, {} SCP iterations -> {}",
        cfg.name,
        sol.status,
        file.j_ub_m_per_s.map_or("n/a".into(), |j| format!("{j:.4}")),
        sol.scp_trace.len(),
        out.display()
    );
    match sol.status {
        PlanStatus::Optimal => Ok(()),
        PlanStatus::Infeasible => Err(Exit::rejected(format!(
            "problem is infeasible: {}",
            sol.diagnosis.as_deref().unwrap_or("no diagnosis")
        ))),
        PlanStatus::MaxIter => Err(Exit::numerical("SCP did not converge within its iteration limit")),
        PlanStatus::Numerical => Err(Exit::numerical("conic solver stopped on numerical difficulties")),
    }
}

/// Rebuild the solved plan from its file and the scenario it came from.
fn restore_plan(scenario: &Scenario, file: &PlanFile) -> Result<Plan> {
    let n = scenario.horizon();
    let refs: Vec<DVector<f64>> = file.reference_controls.iter().map(|u| DVector::from_column_slice(u)).collect();
    if file.ubar.len() != n || file.gains.len() != n || refs.len() != n {
        return Err(Exit::rejected("plan does not match the scenario horizon"));
    }
    let linearization = if refs == scenario.nominal.reference_controls {
        scenario.nominal.clone()
    } else {
        scenario.linearize(&refs).map_err(|e| Exit::numerical(e.to_string()))?
    };
    let problem = scenario.problem(&linearization);
    let gains = file
        .gains
        .iter()
        .map(|g| {
            let (r, c) = (g.len(), g.first().map_or(0, Vec::len));
            DMatrix::from_row_iterator(r, c, g.iter().flatten().copied())
        })
        .collect();
    let policy = Policy {
        ubar: file.ubar.iter().map(|u| DVector::from_column_slice(u)).collect(),
        gains,
        maneuver_mask: file.maneuver_mask.clone(),
    };
    let j_ub = planner::evaluate_j_ub(&problem, &policy).map_err(|e| Exit::rejected(e.to_string()))?;
    let solution = PlanSolution {
        status: file.status,
        mean_states: planner::mean_states(&problem, &policy),
        policy,
        zeta: file.zeta.clone(),
        stc_weights: file.stc_weights.clone(),
        j_ub,
        penalty_weight: file.penalty_weight.unwrap_or(0.0),
        penalty: file.penalty.unwrap_or(0.0),
        margins: Default::default(),
        scp_trace: Vec::new(),
        diagnosis: file.diagnosis.clone(),
        backend_iterations: 0,
    };
    Ok(Plan { solution, problem, linearization })
}

pub struct SimulateOptions {
    pub plan: Option<PathBuf>,
    pub samples: Option<usize>,
    pub seed: Option<u64>,
    pub mode: Option<McMode>,
    pub dump_trajectories: bool,
}

pub fn cmd_simulate(scenario_path: &Path, out: &Path, overrides: &[String], opts: &SimulateOptions) -> Result<bool> {
    let (cfg, scenario) = load(scenario_path, overrides)?;
    let plan_path = opts.plan.clone().unwrap_or_else(|| out.join(PLAN_FILE));
    let file: PlanFile = read_json(&plan_path)?;
    if file.plan_hash != plan_hash(&cfg) {
        return Err(Exit::rejected(format!(
            "{} was planned for a different scenario configuration (hash {} vs {})",
            plan_path.display(),
            file.plan_hash,
            plan_hash(&cfg)
        )));
    }
    if !matches!(file.status, PlanStatus::Optimal | PlanStatus::MaxIter) {
        return Err(Exit::rejected(format!("plan status {:?} cannot be simulated", file.status)));
    }
    let plan = restore_plan(&scenario, &file)?;
    let mc = McConfig {
        samples: opts.samples.unwrap_or(cfg.monte_carlo.samples),
        seed: opts.seed.unwrap_or(cfg.monte_carlo.seed),
        mode: opts.mode.unwrap_or(cfg.monte_carlo.mode),
        substeps: cfg.monte_carlo.substeps,
        keep_trajectories: opts.dump_trajectories,
    };
    let setup = McSetup::from_plan(&scenario, &plan);
    let nl = NonlinearModel::from_plan(&scenario, &plan);
    let run = run_mc(&setup, Some(&nl), &mc).map_err(|e| Exit::numerical(format!("simulation failed: {e}")))?;

    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let manifest_path = out.join(MANIFEST_FILE);
    let mut manifest = match read_json::<RunManifest>(&manifest_path) {
        Ok(m) if m.plan_hash == file.plan_hash => m,
        _ => RunManifest::new(scenario_path, &cfg),
    };
    manifest.seed = Some(mc.seed);
    manifest.simulated_unix_s = Some(now_unix_s());
    let report = ReportFile {
        scenario: &cfg.name,
        plan_hash: &file.plan_hash,
        non_paper_observation: cfg.observation.non_paper,
        report: &run.report,
    };
    let bytes = write_json(&out.join(REPORT_FILE), &report)?;
    manifest.record(REPORT_FILE, &bytes);

    let header = columns(&["sample", "delta_v_m_per_s", "failure"]);
    let hist = run.samples.iter().enumerate().map(|(i, s)| {
        vec![i.to_string(), num(s.delta_v_m_per_s), s.failure.clone().unwrap_or_default()]
    });
    let bytes = write_csv(&out.join(HISTOGRAM_CSV), &header, hist.collect::<Vec<_>>())?;
    manifest.record_csv(HISTOGRAM_CSV, &header, &bytes);

    if opts.dump_trajectories {
        // Scenario units, as the simulator sees them.
        let header = columns(&["sample", "k", "t", "x0", "x1", "x2", "x3", "x4", "x5", "u0", "u1", "u2"]);
        let mut out_rows = Vec::new();
        for (i, s) in run.samples.iter().enumerate() {
            for (k, p) in s.trajectory.iter().flatten().enumerate() {
                let mut r = vec![i.to_string(), k.to_string(), num(p.t)];
                r.extend(p.x.iter().chain(p.u.iter()).map(|v| num(*v)));
                out_rows.push(r);
            }
        }
        let bytes = write_csv(&out.join(TRAJECTORY_CSV), &header, out_rows)?;
        manifest.record_csv(TRAJECTORY_CSV, &header, &bytes);
    }
    write_json(&manifest_path, &manifest)?;

    let r = &run.report;
    println!(
        "{}: {:?} MC, {} samples ({} failed), ΔV{:.0} = {:.4} m/s vs J_ub = {:.4} m/s, all checks {}",
        cfg.name,
        r.mode,
        r.samples,
        r.failed_samples,
        r.delta_v.quantile_p * 100.0,
        r.delta_v.dv_quantile_m_per_s,
        r.delta_v.j_ub_m_per_s,
        if r.all_pass { "pass" } else { "FAIL" }
    );
    Ok(r.all_pass)
}
