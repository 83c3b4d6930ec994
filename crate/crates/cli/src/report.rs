use std::fmt::Write as _;
use std::path::Path;

use anyhow::Result;
use ccorbit::planner::PlanStatus;
use ccorbit::scenarios::McMode;
use ccorbit::simulator::{McReport, ViolationRate};

use crate::artifacts::*;

fn mark(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

/// Files whose bytes no longer match the manifest.
fn tampered(dir: &Path, manifest: &RunManifest) -> Result<Vec<String>> {
    let mut bad = Vec::new();
    for (name, entry) in &manifest.outputs {
        let path = dir.join(name);
        let bytes = std::fs::read(&path).map_err(|e| Exit::missing(format!("{}: {e}", path.display())))?;
        if sha256_hex(&bytes) != entry.sha256 {
            bad.push(name.clone());
        }
    }
    Ok(bad)
}

fn family_line(out: &mut String, family: &str, rates: &[&ViolationRate]) {
    if rates.is_empty() {
        return;
    }
    let worst = rates.iter().max_by(|a, b| (a.rate - a.limit).total_cmp(&(b.rate - b.limit))).expect("non-empty");
    let ok = rates.iter().all(|v| v.pass);
    let _ = writeln!(
        out,
        "[{}] {family}: {} nodes, worst rate {:.4} at node {} (limit {:.4})",
        mark(ok),
        rates.len(),
        worst.rate,
        worst.node,
        worst.limit
    );
}

fn mc_section(out: &mut String, r: &McReport) {
    let mode = match r.mode {
        McMode::Linear => "linear",
        McMode::Nonlinear => "nonlinear",
    };
    let _ = writeln!(out, "monte carlo: {mode}, {} samples, seed {}, {} failed", r.samples, r.seed, r.failed_samples);
    let dv = &r.delta_v;
    let _ = writeln!(
        out,
        "[{}] ΔV{:.0} {:.4} m/s <= J_ub {:.4} m/s (mean {:.4}, max {:.4})",
        mark(dv.upper_bounded),
        dv.quantile_p * 100.0,
        dv.dv_quantile_m_per_s,
        dv.j_ub_m_per_s,
        dv.mean_m_per_s,
        dv.max_m_per_s
    );
    let mut families: Vec<&str> = r.violations.iter().map(|v| v.family.as_str()).collect();
    families.dedup();
    for f in &families {
        let rates: Vec<&ViolationRate> = r.family(f).collect();
        family_line(out, f, &rates);
    }
    let state_ok = r.violations.iter().filter(|v| v.family == "tube" || v.family == "hyperplane").all(|v| v.pass);
    if families.iter().any(|f| *f == "tube" || *f == "hyperplane") {
        let _ = writeln!(out, "[{}] discrete-time state constraints met at nodes", mark(state_ok));
    }
    if let Some(t) = &r.terminal {
        if r.mode == McMode::Linear {
            let _ = writeln!(
                out,
                "[{}] terminal mean: largest error {:.2} standard errors (< 3)",
                mark(t.mean_pass),
                t.max_normalized_error
            );
        } else {
            let _ = writeln!(out, "[info] terminal mean: largest error {:.2} standard errors", t.max_normalized_error);
        }
        let _ = writeln!(
            out,
            "[{}] terminal covariance within P_f: whitened largest eigenvalue {:.4} (threshold {:.4})",
            mark(t.psd_pass),
            t.whitened_max_eigenvalue,
            t.psd_threshold
        );
    }
    let _ = writeln!(out, "largest mean deviation from plan: {:.2} standard errors", r.max_mean_deviation_sigma);
    let _ = writeln!(out, "overall: {}", mark(r.all_pass));
}

/// Human-readable summary of a run directory.
pub fn render(dir: &Path) -> Result<String> {
    let manifest: RunManifest = read_json(&dir.join(MANIFEST_FILE))?;
    let plan: PlanFile = read_json(&dir.join(PLAN_FILE))?;
    let mut out = String::new();
    for name in tampered(dir, &manifest)? {
        let _ = writeln!(out, "WARNING: hash mismatch for {name}; it changed after it was written");
    }
    if plan.plan_hash != manifest.plan_hash {
        let _ = writeln!(out, "WARNING: hash mismatch between plan.json and the manifest's scenario");
    }
    let _ = writeln!(out, "scenario: {} ({})", plan.scenario, manifest.scenario_path.display());
    if plan.non_paper_observation {
        let _ = writeln!(out, "note: observation noise is a non-paper stand-in");
    }
    let zeta = plan.zeta.iter().fold(0.0_f64, |a, z| a.max(z.abs()));
    let _ = writeln!(
        out,
        "[{}] plan: {:?}, J_ub {} m/s, {} SCP iterations, max ζ {:.3e}",
        mark(plan.status == PlanStatus::Optimal),
        plan.status,
        plan.j_ub_m_per_s.map_or("n/a".into(), |j| format!("{j:.4}")),
        plan.scp_trace.len(),
        zeta
    );
    if let Some(d) = &plan.diagnosis {
        let _ = writeln!(out, "diagnosis: {d}");
    }
    for (family, m) in &plan.margins {
        let _ = writeln!(out, "  margin {family}: {}", m.map_or("n/a".into(), |m| format!("{m:.3e}")));
    }
    let report_path = dir.join(REPORT_FILE);
    if manifest.outputs.contains_key(REPORT_FILE) || report_path.exists() {
        let stored: StoredReport = read_json(&report_path)?;
        if stored.plan_hash != plan.plan_hash {
            let _ = writeln!(out, "WARNING: hash mismatch between mc_report.json and plan.json");
        }
        mc_section(&mut out, &stored.report);
    } else {
        let _ = writeln!(out, "monte carlo: not run");
    }
    Ok(out)
}
