//! On-disk artifacts: plan and report files, CSV series and the run manifest.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use ccorbit::planner::{PlanStatus, ScpIteration};
use ccorbit::scenarios::ScenarioConfig;
use ccorbit::simulator::McReport;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const PLAN_FILE: &str = "plan.json";
pub const REPORT_FILE: &str = "mc_report.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const MEAN_CSV: &str = "mean_trajectory.csv";
pub const ENVELOPE_CSV: &str = "covariance_envelopes.csv";
pub const HISTOGRAM_CSV: &str = "histogram.csv";
pub const TRAJECTORY_CSV: &str = "trajectories.csv";

/// A failure that maps to a specific process exit code.
#[derive(Debug)]
pub struct Exit {
    pub code: u8,
    pub message: String,
}

impl Exit {
    pub fn missing(message: impl Into<String>) -> anyhow::Error {
        Self { code: 1, message: message.into() }.into()
    }

    pub fn rejected(message: impl Into<String>) -> anyhow::Error {
        Self { code: 2, message: message.into() }.into()
    }

    pub fn numerical(message: impl Into<String>) -> anyhow::Error {
        Self { code: 3, message: message.into() }.into()
    }
}

impl fmt::Display for Exit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Exit {}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash of the exact parsed configuration.
pub fn config_hash(cfg: &ScenarioConfig) -> String {
    sha256_hex(serde_json::to_string(cfg).expect("config serializes").as_bytes())
}

/// Hash of every setting that shapes the plan; Monte-Carlo settings are
/// left out so a plan can be simulated with other sample counts.
pub fn plan_hash(cfg: &ScenarioConfig) -> String {
    let mut c = cfg.clone();
    c.monte_carlo = Default::default();
    config_hash(&c)
}

/// Deterministic pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, &bytes).with_context(|| format!("writing {}", path.display()))?;
    Ok(bytes)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| Exit::missing(format!("{}: {e}", path.display())))?;
    serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))
}

pub fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

/// One SCP iteration; non-finite values (failed solves) become `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub status: PlanStatus,
    pub max_mean_update: Option<f64>,
    pub max_control_update: Option<f64>,
    pub j_ub: Option<f64>,
    pub penalty: Option<f64>,
    pub active_triggers: usize,
}

impl From<&ScpIteration> for TraceRow {
    fn from(it: &ScpIteration) -> Self {
        Self {
            iteration: it.iteration,
            status: it.status,
            max_mean_update: finite(it.max_mean_update),
            max_control_update: finite(it.max_control_update),
            j_ub: finite(it.j_ub),
            penalty: finite(it.penalty),
            active_triggers: it.active_triggers,
        }
    }
}

/// Contents of `plan.json`. Vectors are in scenario units; gains are
/// row-major `n_u × n_x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanFile {
    pub format: u32,
    pub scenario: String,
    pub plan_hash: String,
    pub status: PlanStatus,
    pub diagnosis: Option<String>,
    pub j_ub: Option<f64>,
    pub j_ub_m_per_s: Option<f64>,
    pub penalty_weight: Option<f64>,
    pub penalty: Option<f64>,
    pub zeta: Vec<f64>,
    pub stc_weights: Vec<f64>,
    pub margins: BTreeMap<String, Option<f64>>,
    pub scp_trace: Vec<TraceRow>,
    pub maneuver_mask: Vec<bool>,
    pub ubar: Vec<Vec<f64>>,
    pub gains: Vec<Vec<Vec<f64>>>,
    pub reference_controls: Vec<Vec<f64>>,
    pub mean_states: Vec<Vec<f64>>,
    /// The observation model is a placeholder, not a mission model.
    pub non_paper_observation: bool,
}

pub const PLAN_FORMAT: u32 = 1;

/// Contents of `mc_report.json`.
#[derive(Debug, Clone, Serialize)]
pub struct ReportFile<'a> {
    pub scenario: &'a str,
    pub plan_hash: &'a str,
    pub non_paper_observation: bool,
    #[serde(flatten)]
    pub report: &'a McReport,
}

/// `mc_report.json` as read back.
#[derive(Debug, Clone, Deserialize)]
pub struct StoredReport {
    pub plan_hash: String,
    #[serde(flatten)]
    pub report: McReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputEntry {
    pub sha256: String,
}

/// Provenance of a run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub scenario_path: PathBuf,
    pub scenario_hash: String,
    pub plan_hash: String,
    pub seed: Option<u64>,
    pub planned_unix_s: Option<u64>,
    pub simulated_unix_s: Option<u64>,
    /// Column layout of each CSV output, prefixed by its schema version.
    pub csv_schemas: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, OutputEntry>,
}

impl RunManifest {
    pub fn new(scenario_path: &Path, cfg: &ScenarioConfig) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            scenario_path: scenario_path.to_path_buf(),
            scenario_hash: config_hash(cfg),
            plan_hash: plan_hash(cfg),
            seed: None,
            planned_unix_s: None,
            simulated_unix_s: None,
            csv_schemas: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn record(&mut self, name: &str, bytes: &[u8]) {
        self.outputs.insert(name.to_string(), OutputEntry { sha256: sha256_hex(bytes) });
    }

    pub fn record_csv(&mut self, name: &str, header: &[String], bytes: &[u8]) {
        self.csv_schemas.insert(name.to_string(), format!("v1: {}", header.join(",")));
        self.record(name, bytes);
    }
}

pub fn now_unix_s() -> u64 {
    std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Serialize rows to CSV, write them, and return the bytes for hashing.
pub fn write_csv(path: &Path, header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    let bytes = w.into_inner().map_err(|e| anyhow::anyhow!("{e}"))?;
    std::fs::write(path, &bytes).with_context(|| format!("writing {}", path.display()))?;
    Ok(bytes)
}

pub fn columns(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

/// Shortest round-trip representation.
pub fn num(v: f64) -> String {
    if v.is_finite() {
        format!("{v:?}")
    } else {
        String::new()
    }
}
