//! Experiment configuration: the JSON schema, exhaustive validation that
//! reports every problem at once, and compilation into library types.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rkf_core::{PolicyMode, RobustPolicy, StateSpaceModel, SymMatrix, Tau, ToleranceSchedule};
use serde::Deserialize;

/// Root of a config file. Matrices are row-major nested arrays.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub model: ModelSpec,
    pub policies: Vec<PolicySpec>,
    #[serde(default)]
    pub lfm_sources: Vec<LfmSourceSpec>,
    #[serde(default)]
    pub monte_carlo: Option<MonteCarloSpec>,
    pub output_dir: PathBuf,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    #[serde(default = "default_label")]
    pub label: String,
    pub horizon: usize,
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
    pub d: Vec<Vec<f64>>,
    pub x0_mean: Vec<f64>,
    pub x0_cov: Vec<Vec<f64>>,
}

fn default_label() -> String {
    "model".to_string()
}

/// A named filtering policy. Exactly one of `c` (robust) or `theta`
/// (risk-sensitive) may be present; neither means the standard filter.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySpec {
    pub name: String,
    #[serde(default)]
    pub tau: Option<f64>,
    #[serde(default)]
    pub c: Option<BudgetSpec>,
    #[serde(default)]
    pub theta: Option<f64>,
}

/// Per-step tolerance: one value reused at every step, or one value per
/// step (length horizon + 1).
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum BudgetSpec {
    Constant(f64),
    PerStep(Vec<f64>),
}

/// A plant to evaluate every policy on, synthesized as the least-favorable
/// model of a robust run with these parameters.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LfmSourceSpec {
    pub tau: f64,
    pub c: f64,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonteCarloSpec {
    pub seed: u64,
    pub num_paths: usize,
}

/// A validated, runnable experiment.
pub struct Experiment {
    pub model: StateSpaceModel,
    pub policies: Vec<NamedPolicy>,
    pub lfm_sources: Vec<LfmSource>,
    pub monte_carlo: Option<MonteCarloSpec>,
    pub output_dir: PathBuf,
}

pub struct NamedPolicy {
    pub name: String,
    pub policy: RobustPolicy,
}

pub struct LfmSource {
    pub tau: Tau,
    pub c: f64,
    /// Plant column value in the CSV outputs, e.g. `lfm:tau=0.5,c=0.01`.
    pub label: String,
}

pub fn plant_label(tau: f64, c: f64) -> String {
    format!("lfm:tau={tau},c={c}")
}

/// Read and parse a config file. Parse errors name the offending key and
/// position.
pub fn load(path: &Path) -> Result<ConfigFile, String> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("cannot parse {}: {e}", path.display()))
}

/// Validate everything and compile into library types. Returns the full
/// list of diagnostics instead of stopping at the first; an empty list
/// (the `Ok` branch) means the config is runnable.
pub fn build_experiment(cfg: ConfigFile) -> Result<Experiment, Vec<String>> {
    let mut diags = Vec::new();
    let model = build_model(&cfg.model, &mut diags);

    if cfg.policies.is_empty() {
        diags.push("policies: at least one policy is required".to_string());
    }
    let mut seen = HashSet::new();
    let mut policies = Vec::new();
    for (i, spec) in cfg.policies.iter().enumerate() {
        let who = format!("policies[{i}] (name {:?})", spec.name);
        if spec.name.is_empty() {
            diags.push(format!("{who}: name must be non-empty"));
        }
        if !seen.insert(spec.name.clone()) {
            diags.push(format!("{who}: duplicate policy name"));
        }
        if let Some(policy) = build_policy(spec, cfg.model.horizon, &who, &mut diags) {
            policies.push(NamedPolicy {
                name: spec.name.clone(),
                policy,
            });
        }
    }

    let mut lfm_sources = Vec::new();
    for (i, src) in cfg.lfm_sources.iter().enumerate() {
        let who = format!("lfm_sources[{i}]");
        let tau = check_tau(src.tau, &who, &mut diags);
        if !(src.c >= 0.0) {
            diags.push(format!("{who}: c must be nonnegative, got {}", src.c));
            continue;
        }
        if let Some(tau) = tau {
            lfm_sources.push(LfmSource {
                tau,
                c: src.c,
                label: plant_label(src.tau, src.c),
            });
        }
    }

    if let Some(mc) = &cfg.monte_carlo {
        if mc.num_paths == 0 {
            diags.push("monte_carlo.num_paths: must be at least 1".to_string());
        }
    }

    match (diags.is_empty(), model) {
        (true, Some(model)) => Ok(Experiment {
            model,
            policies,
            lfm_sources,
            monte_carlo: cfg.monte_carlo,
            output_dir: cfg.output_dir,
        }),
        _ => Err(diags),
    }
}

fn check_tau(tau: f64, who: &str, diags: &mut Vec<String>) -> Option<Tau> {
    match Tau::new(tau) {
        Ok(t) => Some(t),
        Err(_) => {
            diags.push(format!("{who}: tau out of [0,1], got {tau}"));
            None
        }
    }
}

fn build_policy(
    spec: &PolicySpec,
    horizon: usize,
    who: &str,
    diags: &mut Vec<String>,
) -> Option<RobustPolicy> {
    let tau = match spec.tau {
        Some(v) => check_tau(v, who, diags),
        None => None,
    };
    match (&spec.c, spec.theta) {
        (Some(_), Some(_)) => {
            diags.push(format!("{who}: c and theta are mutually exclusive"));
            None
        }
        (Some(budget), None) => {
            let tau = require_tau(tau, spec, who, "a robust policy", diags)?;
            let schedule = match budget {
                BudgetSpec::Constant(c) => {
                    if !(*c >= 0.0) {
                        diags.push(format!("{who}: c must be nonnegative, got {c}"));
                        return None;
                    }
                    ToleranceSchedule::constant(*c)
                }
                BudgetSpec::PerStep(values) => {
                    if values.len() != horizon + 1 {
                        diags.push(format!(
                            "{who}: per-step c has {} entries but the horizon needs {}",
                            values.len(),
                            horizon + 1
                        ));
                        return None;
                    }
                    if let Some(bad) = values.iter().find(|v| !(**v >= 0.0)) {
                        diags.push(format!("{who}: c must be nonnegative, got {bad}"));
                        return None;
                    }
                    ToleranceSchedule::per_step(values.clone())
                }
            };
            finish_policy(
                schedule.and_then(|s| RobustPolicy::new(tau, PolicyMode::Robust(s))),
                who,
                diags,
            )
        }
        (None, Some(theta)) => {
            let tau = require_tau(tau, spec, who, "a risk-sensitive policy", diags)?;
            if !(theta > 0.0) {
                diags.push(format!("{who}: theta must be positive, got {theta}"));
                return None;
            }
            finish_policy(RobustPolicy::risk_sensitive(tau, theta), who, diags)
        }
        (None, None) => finish_policy(
            RobustPolicy::new(tau.unwrap_or(Tau::ZERO), PolicyMode::Standard),
            who,
            diags,
        ),
    }
}

fn require_tau(
    tau: Option<Tau>,
    spec: &PolicySpec,
    who: &str,
    kind: &str,
    diags: &mut Vec<String>,
) -> Option<Tau> {
    if tau.is_none() && spec.tau.is_none() {
        diags.push(format!("{who}: {kind} needs tau"));
    }
    tau
}

fn finish_policy(
    policy: rkf_core::Result<RobustPolicy>,
    who: &str,
    diags: &mut Vec<String>,
) -> Option<RobustPolicy> {
    match policy {
        Ok(p) => Some(p),
        Err(e) => {
            diags.push(format!("{who}: {e}"));
            None
        }
    }
}

fn build_model(spec: &ModelSpec, diags: &mut Vec<String>) -> Option<StateSpaceModel> {
    let before = diags.len();
    let a = nested_matrix(&spec.a, "model.a", diags);
    let b = nested_matrix(&spec.b, "model.b", diags);
    let c = nested_matrix(&spec.c, "model.c", diags);
    let d = nested_matrix(&spec.d, "model.d", diags);
    let x0_cov = nested_matrix(&spec.x0_cov, "model.x0_cov", diags);
    let (Some(a), Some(b), Some(c), Some(d), Some(x0_cov)) = (a, b, c, d, x0_cov) else {
        return None;
    };

    if spec.horizon == 0 {
        diags.push("model.horizon: must be at least 1".to_string());
    }
    let n = a.nrows();
    let p = c.nrows();
    if a.ncols() != n {
        diags.push(format!("model.a: must be square, got {}x{}", n, a.ncols()));
    }
    if b.nrows() != n {
        diags.push(format!(
            "model.b: expected {n} rows (state dimension), got {}",
            b.nrows()
        ));
    }
    if c.ncols() != n {
        diags.push(format!(
            "model.c: expected {n} columns (state dimension), got {}",
            c.ncols()
        ));
    }
    if d.nrows() != p {
        diags.push(format!(
            "model.d: expected {p} rows (observation dimension), got {}",
            d.nrows()
        ));
    }
    if d.ncols() != b.ncols() {
        diags.push(format!(
            "model.d: expected {} columns (noise dimension of model.b), got {}",
            b.ncols(),
            d.ncols()
        ));
    }
    if b.ncols() == d.ncols() && b.ncols() != n + p {
        diags.push(format!(
            "model.b/model.d: the stacked noise map [B; D] must be square and \
             invertible, so the noise dimension must equal state + observation \
             dimensions ({n} + {p} = {}), got {}",
            n + p,
            b.ncols()
        ));
    }
    if spec.x0_mean.len() != n {
        diags.push(format!(
            "model.x0_mean: expected {n} entries, got {}",
            spec.x0_mean.len()
        ));
    }
    if x0_cov.nrows() != n || x0_cov.ncols() != n {
        diags.push(format!(
            "model.x0_cov: expected {n}x{n}, got {}x{}",
            x0_cov.nrows(),
            x0_cov.ncols()
        ));
    }
    if diags.len() > before {
        return None;
    }

    // Dimension-consistent: hand off to the library for the deeper checks
    // (positive definiteness of x0_cov, conditioning of [B; D]).
    let x0_cov = match SymMatrix::new(x0_cov) {
        Ok(m) => m,
        Err(e) => {
            diags.push(format!("model.x0_cov: {e}"));
            return None;
        }
    };
    match StateSpaceModel::time_invariant(
        spec.label.clone(),
        spec.horizon,
        a,
        b,
        c,
        d,
        DVector::from_vec(spec.x0_mean.clone()),
        x0_cov,
    ) {
        Ok(model) => Some(model),
        Err(e) => {
            diags.push(format!("model: {e}"));
            None
        }
    }
}

fn nested_matrix(rows: &[Vec<f64>], key: &str, diags: &mut Vec<String>) -> Option<DMatrix<f64>> {
    if rows.is_empty() || rows[0].is_empty() {
        diags.push(format!("{key}: matrix must be non-empty"));
        return None;
    }
    let width = rows[0].len();
    if rows.iter().any(|r| r.len() != width) {
        diags.push(format!("{key}: all rows must have the same length"));
        return None;
    }
    Some(DMatrix::from_fn(rows.len(), width, |i, j| rows[i][j]))
}
