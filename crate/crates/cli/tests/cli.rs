use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

fn ccorbit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ccorbit")).args(args).env_remove("CCORBIT_SOLVER_FEASTOL").output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

/// A planned and simulated CWH run shared by the tests that only read it.
fn cwh_run() -> &'static Path {
    static DIR: OnceLock<tempfile::TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().to_str().unwrap();
        let s = scenario("cwh_rendezvous.toml");
        let s = s.to_str().unwrap();
        let o = ccorbit(&["plan", "--scenario", s, "--out", out]);
        assert_eq!(code(&o), 0, "{}", text(&o));
        let o = ccorbit(&["simulate", "--scenario", s, "--out", out, "--samples", "300", "--seed", "5"]);
        assert_eq!(code(&o), 0, "{}", text(&o));
        dir
    })
    .path()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

#[test]
fn missing_scenario_exits_with_one() {
    let o = ccorbit(&["plan", "--scenario", "/definitely/not/here.toml", "--out", "/tmp/unused"]);
    assert_eq!(code(&o), 1);
    assert!(text(&o).contains("not found"));
}

#[test]
fn plan_writes_artifacts() {
    let dir = cwh_run();
    let plan = json(&dir.join("plan.json"));
    assert_eq!(plan["status"], "optimal");
    assert!(plan["j_ub_m_per_s"].as_f64().unwrap().is_finite());
    let zeta = plan["zeta"].as_array().unwrap();
    assert_eq!(zeta.len(), 15);
    assert!(zeta.iter().all(|z| z.as_f64().unwrap().abs() < 1e-6));
    assert_eq!(plan["gains"][0].as_array().unwrap().len(), 3);
    assert_eq!(plan["gains"][0][0].as_array().unwrap().len(), 6);

    let mean = std::fs::read_to_string(dir.join("mean_trajectory.csv")).unwrap();
    assert_eq!(mean.lines().count(), 16);
    assert!(mean.starts_with("k,t_s,x_km"));
    let env = std::fs::read_to_string(dir.join("covariance_envelopes.csv")).unwrap();
    assert_eq!(env.lines().count(), 16);

    let manifest = json(&dir.join("manifest.json"));
    for f in ["plan.json", "mean_trajectory.csv", "covariance_envelopes.csv", "mc_report.json", "histogram.csv"] {
        assert!(manifest["outputs"][f]["sha256"].as_str().unwrap().len() == 64, "{f}");
    }
    assert!(manifest["csv_schemas"]["histogram.csv"].as_str().unwrap().starts_with("v1: sample,"));
}

#[test]
fn simulate_records_the_bound_and_histogram() {
    let dir = cwh_run();
    let report = json(&dir.join("mc_report.json"));
    assert_eq!(report["samples"], 300);
    assert_eq!(report["seed"], 5);
    let dv = &report["delta_v"];
    assert!(dv["dv_quantile_m_per_s"].as_f64().unwrap() <= dv["j_ub_m_per_s"].as_f64().unwrap());
    assert_eq!(dv["upper_bounded"], true);
    let hist = std::fs::read_to_string(dir.join("histogram.csv")).unwrap();
    assert_eq!(hist.lines().count(), 301);
}

#[test]
fn repeated_simulation_is_byte_identical() {
    let dir = cwh_run();
    let other = tempfile::tempdir().unwrap();
    let s = scenario("cwh_rendezvous.toml");
    let plan = dir.join("plan.json");
    let o = ccorbit(&[
        "simulate",
        "--scenario",
        s.to_str().unwrap(),
        "--out",
        other.path().to_str().unwrap(),
        "--plan",
        plan.to_str().unwrap(),
        "--samples",
        "300",
        "--seed",
        "5",
    ]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    for f in ["mc_report.json", "histogram.csv"] {
        assert_eq!(std::fs::read(dir.join(f)).unwrap(), std::fs::read(other.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn report_lists_every_section() {
    let o = ccorbit(&["report", "--out", cwh_run().to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    let t = text(&o);
    for needle in ["plan: Optimal", "ΔV99", "control_magnitude", "control_rate", "approach_cone", "terminal covariance", "overall"] {
        assert!(t.contains(needle), "missing {needle} in\n{t}");
    }
    assert!(!t.contains("WARNING"));
}

#[test]
fn tampering_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    for f in ["plan.json", "manifest.json", "mean_trajectory.csv", "covariance_envelopes.csv", "mc_report.json", "histogram.csv"] {
        std::fs::copy(cwh_run().join(f), dir.path().join(f)).unwrap();
    }
    let p = dir.path().join("plan.json");
    let edited = std::fs::read_to_string(&p).unwrap().replacen("\"optimal\"", "\"max_iter\"", 1);
    std::fs::write(&p, edited).unwrap();
    let o = ccorbit(&["report", "--out", dir.path().to_str().unwrap()]);
    assert!(text(&o).contains("WARNING: hash mismatch for plan.json"), "{}", text(&o));
}

#[test]
fn report_without_artifacts_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = ccorbit(&["report", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 1);
}

#[test]
fn simulating_a_plan_for_another_configuration_is_rejected() {
    let s = scenario("cwh_rendezvous.toml");
    let out = cwh_run().to_str().unwrap();
    let o = ccorbit(&["simulate", "--scenario", s.to_str().unwrap(), "--out", out, "--set", "risk.eps_u=0.01"]);
    assert_eq!(code(&o), 2, "{}", text(&o));
    assert!(text(&o).contains("different scenario configuration"));
}

#[test]
fn infeasible_plan_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let s = scenario("cwh_rendezvous.toml");
    let o = ccorbit(&[
        "plan",
        "--scenario",
        s.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
        "--set",
        "constraints.u_max_m_per_s=0.01",
    ]);
    assert_eq!(code(&o), 2, "{}", text(&o));
    assert!(text(&o).contains("infeasible"));
    assert_eq!(json(&dir.path().join("plan.json"))["status"], "infeasible");
}

#[test]
fn looser_state_risk_does_not_raise_the_bound() {
    let s = scenario("cwh_rendezvous.toml");
    let tight = json(&cwh_run().join("plan.json"))["j_ub"].as_f64().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let o = ccorbit(&[
        "plan",
        "--scenario",
        s.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
        "--set",
        "risk.eps_x=0.1",
    ]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    let loose = json(&dir.path().join("plan.json"))["j_ub"].as_f64().unwrap();
    assert!(loose <= tight * (1.0 + 1e-6), "{loose} > {tight}");
}

#[test]
fn solver_tolerance_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_ccorbit"))
        .args(["plan", "--scenario", "/definitely/not/here.toml", "--out", dir.path().to_str().unwrap()])
        .env("CCORBIT_SOLVER_FEASTOL", "-1")
        .output()
        .unwrap();
    // The file check comes first; a readable scenario with a bad tolerance
    // is a validation error instead.
    assert_eq!(code(&o), 1);
    let o = Command::new(env!("CARGO_BIN_EXE_ccorbit"))
        .args(["plan", "--scenario", scenario("cwh_rendezvous.toml").to_str().unwrap(), "--out", dir.path().to_str().unwrap()])
        .env("CCORBIT_SOLVER_FEASTOL", "-1")
        .output()
        .unwrap();
    assert_eq!(code(&o), 2, "{}", text(&o));
    assert!(text(&o).contains("solver.feastol"), "{}", text(&o));
}

#[test]
fn nonlinear_nrho_run_reports_node_constraints() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let s = scenario("nrho.toml");
    let s = s.to_str().unwrap();
    let o = ccorbit(&["plan", "--scenario", s, "--out", out]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    assert!(json(&dir.path().join("plan.json"))["scp_trace"].as_array().unwrap().is_empty());
    let o = ccorbit(&["simulate", "--scenario", s, "--out", out, "--samples", "40", "--mode", "nonlinear", "--dump-trajectories"]);
    let report = json(&dir.path().join("mc_report.json"));
    assert_eq!(report["mode"], "nonlinear", "{}", text(&o));
    assert_eq!(report["non_paper_observation"], true);
    let tube = report["violations"].as_array().unwrap().iter().filter(|v| v["family"] == "tube").count();
    assert_eq!(tube, 46);
    let traj = std::fs::read_to_string(dir.path().join("trajectories.csv")).unwrap();
    assert!(traj.starts_with("sample,k,t,x0,x1,x2,x3,x4,x5,u0,u1,u2"));
    assert_eq!(traj.lines().count(), 1 + 40 * 46);
    let o = ccorbit(&["report", "--out", out]);
    assert!(text(&o).contains("discrete-time state constraints met at nodes"), "{}", text(&o));
}
