//! Batch runner behind the CLI verbs: gain schedules, plant evaluations,
//! Monte Carlo cross-checks, and deterministic CSV/JSON emission.
//!
//! All numeric CSV fields use 17 significant digits, which round-trips
//! 64-bit floats exactly, so identical configs produce byte-identical
//! files. Row order is fixed: plants in config order (nominal first),
//! policies in config order, then time, then component.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rkf_core::{
    build_least_favorable, evaluate_filter, run_filter, simulate_lfm, steady_state_mean,
    GainSchedule, LeastFavorableModel, RobustPolicy, StateSpaceModel,
};

use crate::config::{plant_label, Experiment};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{context}: {source}")]
    Compute {
        context: String,
        #[source]
        source: rkf_core::Error,
    },
    #[error("cannot write {}: {source}", path.display())]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot produce {}: {source}", path.display())]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("observations file {}: {message}", path.display())]
    BadObservations { path: PathBuf, message: String },
    #[error("no policy named {name:?} in the config (available: {available})")]
    UnknownPolicy { name: String, available: String },
}

/// Round-trip-exact field for a 64-bit float: 17 significant digits.
fn float_field(x: f64) -> String {
    format!("{x:.16e}")
}

fn compute_err(context: impl Into<String>) -> impl FnOnce(rkf_core::Error) -> CliError {
    let context = context.into();
    move |source| CliError::Compute { context, source }
}

struct CsvFile {
    writer: csv::Writer<std::fs::File>,
    path: PathBuf,
}

impl CsvFile {
    fn create(dir: &Path, name: &str, header: &[&str]) -> Result<Self, CliError> {
        let path = dir.join(name);
        let writer = csv::Writer::from_path(&path).map_err(|e| CliError::Csv {
            path: path.clone(),
            source: e,
        })?;
        let mut file = CsvFile { writer, path };
        file.row(header.iter().map(|s| s.to_string()))?;
        Ok(file)
    }

    fn row(&mut self, fields: impl IntoIterator<Item = String>) -> Result<(), CliError> {
        self.writer.write_record(fields).map_err(|e| CliError::Csv {
            path: self.path.clone(),
            source: e,
        })
    }

    fn finish(mut self) -> Result<PathBuf, CliError> {
        self.writer.flush().map_err(|e| CliError::Write {
            path: self.path.clone(),
            source: e,
        })?;
        Ok(self.path)
    }
}

/// One evaluated plant: the least-favorable model it was synthesized from
/// and, per policy, the per-component error variance series.
struct PlantEvaluation {
    label: String,
    lfm: LeastFavorableModel,
    // variances[policy_index][t][component]
    variances: Vec<Vec<DVector<f64>>>,
}

/// Run the whole grid and write the trace files. Returns the written paths.
pub fn run_experiment(exp: &Experiment) -> Result<Vec<PathBuf>, CliError> {
    std::fs::create_dir_all(&exp.output_dir).map_err(|e| CliError::Write {
        path: exp.output_dir.clone(),
        source: e,
    })?;
    let mut written = Vec::new();

    // Forward passes: one gain schedule per policy.
    let schedules: Vec<GainSchedule> = exp
        .policies
        .iter()
        .map(|p| {
            rkf_core::run_gain_schedule(&exp.model, &p.policy)
                .map_err(compute_err(format!("policy {:?}: gain schedule", p.name)))
        })
        .collect::<Result<_, _>>()?;
    let gain_seqs: Vec<Vec<DMatrix<f64>>> = schedules.iter().map(|s| s.gains()).collect();

    let mut theta = CsvFile::create(&exp.output_dir, "theta_trace.csv", &["t", "policy", "theta_t"])?;
    for (policy, schedule) in exp.policies.iter().zip(&schedules) {
        for (t, step) in schedule.steps.iter().enumerate() {
            theta.row([t.to_string(), policy.name.clone(), float_field(step.theta)])?;
        }
    }
    written.push(theta.finish()?);

    // Plants: the nominal model (as the zero-distortion least-favorable
    // model) plus each configured adversarial source. Every policy's gains
    // are evaluated on every plant.
    let mut plants = Vec::new();
    let nominal = build_least_favorable(&exp.model, &RobustPolicy::standard())
        .map_err(compute_err("nominal plant"))?;
    plants.push(evaluate_plant("nominal".to_string(), nominal, exp, &gain_seqs)?);
    for source in &exp.lfm_sources {
        let policy = RobustPolicy::robust_constant(source.tau, source.c)
            .map_err(compute_err(format!("plant {:?}", source.label)))?;
        let lfm = build_least_favorable(&exp.model, &policy)
            .map_err(compute_err(format!("plant {:?}", source.label)))?;
        plants.push(evaluate_plant(source.label.clone(), lfm, exp, &gain_seqs)?);
    }

    let mut trace = CsvFile::create(
        &exp.output_dir,
        "variance_trace.csv",
        &["t", "policy", "plant", "component", "variance"],
    )?;
    for plant in &plants {
        for (policy, series) in exp.policies.iter().zip(&plant.variances) {
            for (t, var) in series.iter().enumerate() {
                for (i, v) in var.iter().enumerate() {
                    trace.row([
                        t.to_string(),
                        policy.name.clone(),
                        plant.label.clone(),
                        (i + 1).to_string(),
                        float_field(*v),
                    ])?;
                }
            }
        }
    }
    written.push(trace.finish()?);

    let mut summary = CsvFile::create(
        &exp.output_dir,
        "summary.csv",
        &["quantity", "policy", "plant", "component", "value"],
    )?;
    for (policy, schedule) in exp.policies.iter().zip(&schedules) {
        let thetas: Vec<f64> = schedule.steps.iter().map(|s| s.theta).collect();
        summary.row([
            "steady_state_theta".to_string(),
            policy.name.clone(),
            String::new(),
            String::new(),
            float_field(steady_state_mean(&thetas)),
        ])?;
    }
    for plant in &plants {
        for (policy, series) in exp.policies.iter().zip(&plant.variances) {
            for i in 0..exp.model.state_dim() {
                let values: Vec<f64> = series.iter().map(|v| v[i]).collect();
                summary.row([
                    "steady_state_variance".to_string(),
                    policy.name.clone(),
                    plant.label.clone(),
                    (i + 1).to_string(),
                    float_field(steady_state_mean(&values)),
                ])?;
            }
        }
    }
    written.push(summary.finish()?);

    if let Some(mc) = exp.monte_carlo {
        let mut check = CsvFile::create(
            &exp.output_dir,
            "mc_check.csv",
            &["plant", "t", "component", "lyapunov", "monte_carlo", "delta", "standard_error"],
        )?;
        let se_scale = (2.0 / mc.num_paths as f64).sqrt();
        for plant in &plants {
            // Self-evaluation: the plant's own optimal gains, so the exact
            // moments come straight from its covariance recursion.
            let gains = plant.lfm.schedule().gains();
            let report = evaluate_filter(&plant.lfm, &gains, &exp.model)
                .map_err(compute_err(format!("plant {:?}: exact moments", plant.label)))?;
            let moments = simulate_lfm(&plant.lfm, &gains, mc.seed, mc.num_paths)
                .map_err(compute_err(format!("plant {:?}: simulation", plant.label)))?;
            for (t, (exact, empirical)) in report.pi.iter().zip(&moments).enumerate() {
                for i in 0..exact.dim() {
                    let (e, m) = (exact.get(i, i), empirical.get(i, i));
                    check.row([
                        plant.label.clone(),
                        t.to_string(),
                        (i + 1).to_string(),
                        float_field(e),
                        float_field(m),
                        float_field(m - e),
                        float_field(m * se_scale),
                    ])?;
                }
            }
        }
        written.push(check.finish()?);
    }

    Ok(written)
}

fn evaluate_plant(
    label: String,
    lfm: LeastFavorableModel,
    exp: &Experiment,
    gain_seqs: &[Vec<DMatrix<f64>>],
) -> Result<PlantEvaluation, CliError> {
    let mut variances = Vec::new();
    for (policy, gains) in exp.policies.iter().zip(gain_seqs) {
        let report = evaluate_filter(&lfm, gains, &exp.model).map_err(compute_err(format!(
            "policy {:?} on plant {label:?}",
            policy.name
        )))?;
        variances.push(report.variance_primary);
    }
    Ok(PlantEvaluation {
        label,
        lfm,
        variances,
    })
}

/// Serialized form of a least-favorable model: the augmented state-space
/// matrices per step, with the gain and risk parameter they came from.
#[derive(serde::Serialize)]
struct LfmDump {
    label: String,
    tau: f64,
    c: f64,
    horizon: usize,
    state_dim: usize,
    obs_dim: usize,
    noise_dim: usize,
    steps: Vec<LfmStepDump>,
}

#[derive(serde::Serialize)]
struct LfmStepDump {
    t: usize,
    theta: f64,
    gain: Vec<Vec<f64>>,
    a_tilde: Vec<Vec<f64>>,
    b_tilde: Vec<Vec<f64>>,
    c_tilde: Vec<Vec<f64>>,
    d_tilde: Vec<Vec<f64>>,
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

/// Synthesize the least-favorable model for `(tau, c)` on the config's
/// model and dump it as JSON.
pub fn dump_lfm(
    model: &StateSpaceModel,
    tau: rkf_core::Tau,
    c: f64,
    out: &Path,
) -> Result<(), CliError> {
    let label = plant_label(tau.value(), c);
    let policy = RobustPolicy::robust_constant(tau, c)
        .map_err(compute_err(format!("plant {label:?}")))?;
    let lfm = build_least_favorable(model, &policy)
        .map_err(compute_err(format!("plant {label:?}")))?;
    let steps = (0..=lfm.horizon())
        .map(|t| LfmStepDump {
            t,
            theta: lfm.schedule().steps[t].theta,
            gain: matrix_rows(&lfm.schedule().steps[t].gain),
            a_tilde: matrix_rows(lfm.a_tilde(t)),
            b_tilde: matrix_rows(lfm.b_tilde(t)),
            c_tilde: matrix_rows(lfm.c_tilde(t)),
            d_tilde: matrix_rows(lfm.d_tilde(t)),
        })
        .collect();
    let dump = LfmDump {
        label,
        tau: tau.value(),
        c,
        horizon: lfm.horizon(),
        state_dim: lfm.state_dim(),
        obs_dim: lfm.obs_dim(),
        noise_dim: lfm.noise_dim(),
        steps,
    };
    let file = std::fs::File::create(out).map_err(|e| CliError::Write {
        path: out.to_path_buf(),
        source: e,
    })?;
    serde_json::to_writer_pretty(&file, &dump).map_err(|e| CliError::Write {
        path: out.to_path_buf(),
        source: std::io::Error::other(e),
    })?;
    Ok(())
}

/// Read observations from a CSV with header `t,y1,...,yp` and rows for
/// t = 0..=horizon in order.
fn read_observations(
    path: &Path,
    model: &StateSpaceModel,
) -> Result<Vec<DVector<f64>>, CliError> {
    let bad = |message: String| CliError::BadObservations {
        path: path.to_path_buf(),
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| bad(e.to_string()))?;
    let p = model.obs_dim();
    let width = reader
        .headers()
        .map_err(|e| bad(e.to_string()))?
        .len();
    if width != p + 1 {
        return Err(bad(format!(
            "expected {} columns (t plus {p} observation components), got {width}",
            p + 1
        )));
    }
    let mut obs = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| bad(e.to_string()))?;
        let t: usize = record[0]
            .trim()
            .parse()
            .map_err(|_| bad(format!("row {row}: t column is not an integer")))?;
        if t != row {
            return Err(bad(format!("row {row}: expected t = {row}, got {t}")));
        }
        let mut y = DVector::zeros(p);
        for i in 0..p {
            y[i] = record[i + 1]
                .trim()
                .parse()
                .map_err(|_| bad(format!("row {row}: component {} is not a number", i + 1)))?;
        }
        obs.push(y);
    }
    if obs.len() != model.horizon() + 1 {
        return Err(bad(format!(
            "expected {} observation rows (t = 0..={}), got {}",
            model.horizon() + 1,
            model.horizon(),
            obs.len()
        )));
    }
    Ok(obs)
}

/// Run one configured policy over recorded observations and write
/// `filter_trace.csv` into the output directory.
pub fn run_filter_verb(
    exp: &Experiment,
    policy_name: &str,
    obs_path: &Path,
) -> Result<PathBuf, CliError> {
    let policy = exp
        .policies
        .iter()
        .find(|p| p.name == policy_name)
        .ok_or_else(|| CliError::UnknownPolicy {
            name: policy_name.to_string(),
            available: exp
                .policies
                .iter()
                .map(|p| format!("{:?}", p.name))
                .collect::<Vec<_>>()
                .join(", "),
        })?;
    let obs = read_observations(obs_path, &exp.model)?;
    let trace = run_filter(&exp.model, &policy.policy, &obs)
        .map_err(compute_err(format!("policy {:?}", policy.name)))?;

    std::fs::create_dir_all(&exp.output_dir).map_err(|e| CliError::Write {
        path: exp.output_dir.clone(),
        source: e,
    })?;
    let n = exp.model.state_dim();
    let mut header = vec!["t".to_string(), "theta".to_string()];
    for stem in ["pred", "nominal_var", "distorted_var"] {
        for i in 1..=n {
            header.push(format!("{stem}_{i}"));
        }
    }
    let mut file = CsvFile::create(
        &exp.output_dir,
        "filter_trace.csv",
        &header.iter().map(String::as_str).collect::<Vec<_>>(),
    )?;
    for (t, step) in trace.steps.iter().enumerate() {
        let mut row = vec![t.to_string(), float_field(step.theta)];
        row.extend(step.state_pred.iter().map(|v| float_field(*v)));
        row.extend((0..n).map(|i| float_field(step.nominal_cov.get(i, i))));
        row.extend((0..n).map(|i| float_field(step.distorted_cov.get(i, i))));
        file.row(row)?;
    }
    file.finish()
}

/// Diagnostics for `validate`: empty means runnable.
pub fn validate_path(path: &Path) -> Result<Vec<String>, String> {
    let cfg = crate::config::load(path)?;
    Ok(match crate::config::build_experiment(cfg) {
        Ok(_) => Vec::new(),
        Err(diags) => diags,
    })
}

/// Load a config and compile it, merging diagnostics into one error list.
pub fn load_experiment(path: &Path) -> Result<Experiment, Vec<String>> {
    let cfg = crate::config::load(path).map_err(|e| vec![e])?;
    crate::config::build_experiment(cfg)
}

/// Apply the output-directory override from the environment.
pub fn apply_output_override(exp: &mut Experiment) {
    if let Ok(dir) = std::env::var("RKF_OUTPUT_DIR") {
        if !dir.is_empty() {
            exp.output_dir = PathBuf::from(dir);
        }
    }
}
