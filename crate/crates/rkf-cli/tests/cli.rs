//! End-to-end tests of the `rkf` binary: config validation diagnostics,
//! deterministic trace emission, schema stability of the CSV outputs, the
//! least-favorable model dump, and the observation-driven filter verb.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nalgebra::{DMatrix, DVector};
use rkf_core::{run_filter, RobustPolicy, StateSpaceModel, SymMatrix, Tau};
use serde_json::json;
use tempfile::TempDir;

fn rkf() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rkf"))
}

fn bench_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/benchmark.json")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// The small two-state setup used by the fast tests: 60 steps, one robust,
/// one risk-sensitive, one stepped-budget and one standard policy, plus an
/// adversarial plant at an interior family parameter.
struct SmallSetup {
    config_path: PathBuf,
    model: StateSpaceModel,
    horizon: usize,
}

fn mat(rows: &[Vec<f64>]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), rows[0].len(), |i, j| rows[i][j])
}

fn small_setup(dir: &Path) -> SmallSetup {
    let horizon = 60usize;
    let a = vec![vec![0.1, 1.0], vec![0.0, 1.2]];
    let b = vec![vec![0.01, 0.0, 0.0], vec![0.0, 0.01, 0.0]];
    let c = vec![vec![1.0, -1.0]];
    let d = vec![vec![0.0, 0.0, 0.1]];
    let x0_mean = vec![0.0, 0.0];
    let x0_cov = vec![vec![0.01, 0.0], vec![0.0, 0.01]];
    let stepped: Vec<f64> = (0..=horizon)
        .map(|t| if t % 7 == 0 { 0.0 } else { 0.02 })
        .collect();
    let config = json!({
        "model": {
            "label": "small",
            "horizon": horizon,
            "a": a, "b": b, "c": c, "d": d,
            "x0_mean": x0_mean, "x0_cov": x0_cov
        },
        "policies": [
            { "name": "kf" },
            { "name": "rkf0", "tau": 0.0, "c": 0.05 },
            { "name": "rs", "tau": 0.0, "theta": 0.05 },
            { "name": "stepc", "tau": 1.0, "c": stepped }
        ],
        "lfm_sources": [ { "tau": 0.5, "c": 0.05 } ],
        "monte_carlo": { "seed": 7, "num_paths": 300 },
        "output_dir": dir.join("out")
    });
    let config_path = dir.join("small.json");
    std::fs::write(&config_path, serde_json::to_string_pretty(&config).unwrap()).unwrap();

    let model = StateSpaceModel::time_invariant(
        "small",
        horizon,
        mat(&a),
        mat(&b),
        mat(&c),
        mat(&d),
        DVector::from_vec(x0_mean),
        SymMatrix::new(mat(&x0_cov)).unwrap(),
    )
    .unwrap();
    SmallSetup {
        config_path,
        model,
        horizon,
    }
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path)
        .unwrap_or_else(|e| panic!("cannot read {}: {e}", path.display()))
}

/// summary.csv rows as (quantity, policy, plant, component, value).
fn parse_summary(path: &Path) -> Vec<(String, String, String, String, f64)> {
    let mut reader = csv::Reader::from_path(path).unwrap();
    reader
        .records()
        .map(|r| {
            let r = r.unwrap();
            (
                r[0].to_string(),
                r[1].to_string(),
                r[2].to_string(),
                r[3].to_string(),
                r[4].parse().unwrap(),
            )
        })
        .collect()
}

#[test]
fn validate_accepts_bundled_config() {
    let out = rkf().arg("validate").arg(bench_config()).output().unwrap();
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    assert!(stdout(&out).contains("runnable"));
}

#[test]
fn validate_reports_every_defect_at_once() {
    let dir = TempDir::new().unwrap();
    // One config holding six independent mistakes.
    let config = json!({
        "model": {
            "horizon": 10,
            "a": [[0.5, 0.0], [0.0, 0.5]],
            "b": [[0.01, 0.0], [0.0, 0.01]],
            "c": [[1.0, -1.0]],
            "d": [[0.0, 0.1]],
            "x0_mean": [0.0, 0.0],
            "x0_cov": [[0.01, 0.0], [0.0, 0.01]]
        },
        "policies": [
            { "name": "bad_tau", "tau": 1.5, "c": 0.1 },
            { "name": "both", "tau": 0.0, "c": 0.1, "theta": 0.2 },
            { "name": "negative", "tau": 0.0, "c": -0.5 },
            { "name": "negative", "tau": 0.0, "c": [0.1, 0.1] },
            { "name": "no_tau", "c": 0.1 }
        ],
        "lfm_sources": [],
        "output_dir": dir.path().join("out")
    });
    let path = dir.path().join("broken.json");
    std::fs::write(&path, serde_json::to_string(&config).unwrap()).unwrap();

    let out = rkf().arg("validate").arg(&path).output().unwrap();
    assert!(!out.status.success());
    let text = stdout(&out);
    assert!(text.contains("tau out of [0,1]"), "got:\n{text}");
    assert!(text.contains("mutually exclusive"), "got:\n{text}");
    assert!(text.contains("nonnegative"), "got:\n{text}");
    assert!(text.contains("duplicate policy name"), "got:\n{text}");
    assert!(text.contains("needs tau"), "got:\n{text}");
    assert!(text.contains("stacked noise map"), "got:\n{text}");
    assert!(text.contains("per-step c has 2 entries"), "got:\n{text}");
}

#[test]
fn parse_errors_name_the_offending_key() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("incomplete.json");
    std::fs::write(
        &path,
        r#"{ "model": { "label": "x" }, "policies": [], "output_dir": "out" }"#,
    )
    .unwrap();
    let out = rkf().arg("validate").arg(&path).output().unwrap();
    assert!(!out.status.success());
    assert!(stderr(&out).contains("horizon"), "got: {}", stderr(&out));
}

#[test]
fn run_is_deterministic_and_schema_stable() {
    let dir = TempDir::new().unwrap();
    let setup = small_setup(dir.path());
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    for out_dir in [&out_a, &out_b] {
        let out = rkf()
            .arg("run")
            .arg(&setup.config_path)
            .env("RKF_OUTPUT_DIR", out_dir)
            .output()
            .unwrap();
        assert!(out.status.success(), "stderr: {}", stderr(&out));
    }

    let files = [
        "theta_trace.csv",
        "variance_trace.csv",
        "summary.csv",
        "mc_check.csv",
    ];
    for name in files {
        let a = std::fs::read(out_a.join(name)).unwrap();
        let b = std::fs::read(out_b.join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical runs");
    }

    let theta = read(&out_a.join("theta_trace.csv"));
    let mut lines = theta.lines();
    assert_eq!(lines.next(), Some("t,policy,theta_t"));
    assert_eq!(
        lines.next(),
        Some("0,kf,0.0000000000000000e0"),
        "standard policy must log a zero risk parameter"
    );
    // The standard policy's rows are all exactly zero; the risk-sensitive
    // policy logs its fixed value at every step.
    for line in theta.lines().skip(1) {
        let policy = line.split(',').nth(1).unwrap();
        let value = line.rsplit(',').next().unwrap();
        match policy {
            "kf" => assert_eq!(value, "0.0000000000000000e0"),
            "rs" => assert_eq!(value, "5.0000000000000003e-2"),
            _ => {}
        }
    }

    let variance = read(&out_a.join("variance_trace.csv"));
    assert!(variance.starts_with("t,policy,plant,component,variance\n"));
    // Plant labels contain a comma, so the field must arrive quoted.
    assert!(
        variance.contains("\"lfm:tau=0.5,c=0.05\""),
        "adversarial plant label must be quoted"
    );
    let rows = variance.lines().count() - 1;
    // 2 plants x 4 policies x 62 steps x 2 components.
    assert_eq!(rows, 2 * 4 * (setup.horizon + 2) * 2);

    assert!(read(&out_a.join("summary.csv")).starts_with("quantity,policy,plant,component,value\n"));
    assert!(read(&out_a.join("mc_check.csv"))
        .starts_with("plant,t,component,lyapunov,monte_carlo,delta,standard_error\n"));

    // A stepped budget spends exactly at the configured steps: zero budget
    // at t % 7 == 0 must give a zero risk parameter.
    for line in theta.lines().skip(1) {
        let mut fields = line.split(',');
        let t: usize = fields.next().unwrap().parse().unwrap();
        let policy = fields.next().unwrap();
        let value: f64 = fields.next().unwrap().parse().unwrap();
        if policy == "stepc" {
            if t % 7 == 0 {
                assert_eq!(value, 0.0, "t={t}");
            } else {
                assert!(value > 0.0, "t={t}");
            }
        }
    }
}

#[test]
fn benchmark_run_reproduces_the_reference_figures() {
    let dir = TempDir::new().unwrap();
    let out_dir = dir.path().join("traces");
    let out = rkf()
        .arg("run")
        .arg(bench_config())
        .env("RKF_OUTPUT_DIR", &out_dir)
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    assert!(
        !dir.path().join("out").exists(),
        "the environment override must win over the config's output_dir"
    );

    let summary = parse_summary(&out_dir.join("summary.csv"));
    let theta = |policy: &str| {
        summary
            .iter()
            .find(|r| r.0 == "steady_state_theta" && r.1 == policy)
            .unwrap()
            .4
    };
    assert!((theta("rkf0") - 0.19).abs() <= 0.02);
    assert!((theta("rkf1") - 0.23).abs() <= 0.02);
    assert_eq!(theta("kf"), 0.0);

    let variance = |policy: &str, plant: &str, component: &str| {
        summary
            .iter()
            .find(|r| {
                r.0 == "steady_state_variance" && r.1 == policy && r.2 == plant && r.3 == component
            })
            .unwrap()
            .4
    };
    for component in ["1", "2"] {
        // On the nominal plant the standard filter is the best of the three;
        // on each adversarial plant the filter designed for it is best and
        // the standard filter is worst.
        let kf = variance("kf", "nominal", component);
        assert!(kf < variance("rkf0", "nominal", component));
        assert!(kf < variance("rkf1", "nominal", component));
        for (plant, own, other) in [
            ("lfm:tau=0,c=0.1", "rkf0", "rkf1"),
            ("lfm:tau=1,c=0.1", "rkf1", "rkf0"),
        ] {
            let own_v = variance(own, plant, component);
            let other_v = variance(other, plant, component);
            let kf_v = variance("kf", plant, component);
            assert!(own_v < other_v, "{plant} component {component}");
            assert!(other_v < kf_v, "{plant} component {component}");
        }
    }

    // Monte Carlo agrees with the exact moment recursion on every plant.
    let mut reader = csv::Reader::from_path(out_dir.join("mc_check.csv")).unwrap();
    let mut rows = 0;
    for record in reader.records() {
        let r = record.unwrap();
        let delta: f64 = r[5].parse().unwrap();
        let se: f64 = r[6].parse().unwrap();
        assert!(
            delta.abs() <= 5.0 * se,
            "plant {} t={} component {}: |{delta}| > 5 x {se}",
            &r[0],
            &r[1],
            &r[2]
        );
        rows += 1;
    }
    assert_eq!(rows, 3 * 502 * 4);
}

#[test]
fn lfm_dump_collapses_to_the_nominal_model_at_zero_budget() {
    let dir = TempDir::new().unwrap();
    let setup = small_setup(dir.path());
    let out_path = dir.path().join("lfm.json");
    let out = rkf()
        .arg("lfm")
        .arg(&setup.config_path)
        .args(["--tau", "0", "--c", "0"])
        .arg("--out")
        .arg(&out_path)
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", stderr(&out));

    let dump: serde_json::Value = serde_json::from_str(&read(&out_path)).unwrap();
    assert_eq!(dump["horizon"], 60);
    assert_eq!(dump["state_dim"], 2);
    assert_eq!(dump["noise_dim"], 3);
    let steps = dump["steps"].as_array().unwrap();
    assert_eq!(steps.len(), setup.horizon + 1);
    for step in steps {
        assert_eq!(step["theta"], 0.0);
        let a_tilde = step["a_tilde"].as_array().unwrap();
        assert_eq!(a_tilde.len(), 4);
        // Zero budget decouples the augmented dynamics: the upper-right
        // block (the feedback of the error into the state) vanishes and the
        // noise enters through the unscaled model maps.
        for row in 0..2 {
            for col in 2..4 {
                assert_eq!(a_tilde[row].as_array().unwrap()[col], 0.0);
            }
        }
        let d_tilde: Vec<Vec<f64>> = serde_json::from_value(step["d_tilde"].clone()).unwrap();
        assert_eq!(d_tilde, vec![vec![0.0, 0.0, 0.1]]);
    }

    // An interior family parameter with a positive budget must produce a
    // strictly positive risk parameter at every step.
    let out = rkf()
        .arg("lfm")
        .arg(&setup.config_path)
        .args(["--tau", "0.5", "--c", "0.05"])
        .arg("--out")
        .arg(&out_path)
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let dump: serde_json::Value = serde_json::from_str(&read(&out_path)).unwrap();
    for step in dump["steps"].as_array().unwrap() {
        assert!(step["theta"].as_f64().unwrap() > 0.0);
    }
}

#[test]
fn filter_verb_matches_the_library_bit_for_bit() {
    let dir = TempDir::new().unwrap();
    let setup = small_setup(dir.path());

    // Deterministic synthetic observations, written round-trip exact.
    let obs: Vec<DVector<f64>> = (0..=setup.horizon)
        .map(|t| DVector::from_element(1, (0.3 * t as f64).sin()))
        .collect();
    let obs_path = dir.path().join("obs.csv");
    let mut text = String::from("t,y1\n");
    for (t, y) in obs.iter().enumerate() {
        text.push_str(&format!("{t},{:.16e}\n", y[0]));
    }
    std::fs::write(&obs_path, text).unwrap();

    let out_dir = dir.path().join("filter_out");
    let out = rkf()
        .arg("filter")
        .arg(&setup.config_path)
        .args(["--policy", "rkf0"])
        .arg("--obs")
        .arg(&obs_path)
        .env("RKF_OUTPUT_DIR", &out_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", stderr(&out));

    let policy = RobustPolicy::robust_constant(Tau::ZERO, 0.05).unwrap();
    let expected = run_filter(&setup.model, &policy, &obs).unwrap();

    let trace = read(&out_dir.join("filter_trace.csv"));
    let mut lines = trace.lines();
    assert_eq!(
        lines.next(),
        Some("t,theta,pred_1,pred_2,nominal_var_1,nominal_var_2,distorted_var_1,distorted_var_2")
    );
    let mut count = 0;
    for (t, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields[0].parse::<usize>().unwrap(), t);
        let step = &expected.steps[t];
        assert_eq!(fields[1].parse::<f64>().unwrap(), step.theta);
        assert_eq!(fields[2].parse::<f64>().unwrap(), step.state_pred[0]);
        assert_eq!(fields[3].parse::<f64>().unwrap(), step.state_pred[1]);
        assert_eq!(fields[4].parse::<f64>().unwrap(), step.nominal_cov.get(0, 0));
        assert_eq!(fields[7].parse::<f64>().unwrap(), step.distorted_cov.get(1, 1));
        count += 1;
    }
    assert_eq!(count, setup.horizon + 1);
}

#[test]
fn unknown_policy_is_rejected_with_the_available_names() {
    let dir = TempDir::new().unwrap();
    let setup = small_setup(dir.path());
    let obs_path = dir.path().join("obs.csv");
    std::fs::write(&obs_path, "t,y1\n0,0.0\n").unwrap();
    let out = rkf()
        .arg("filter")
        .arg(&setup.config_path)
        .args(["--policy", "nope"])
        .arg("--obs")
        .arg(&obs_path)
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = stderr(&out);
    assert!(err.contains("nope") && err.contains("rkf0"), "got: {err}");
}

#[test]
fn malformed_observations_are_reported_with_row_context() {
    let dir = TempDir::new().unwrap();
    let setup = small_setup(dir.path());
    let obs_path = dir.path().join("obs.csv");
    // Wrong row count: the horizon needs 61 rows.
    std::fs::write(&obs_path, "t,y1\n0,0.0\n1,0.5\n").unwrap();
    let out = rkf()
        .arg("filter")
        .arg(&setup.config_path)
        .args(["--policy", "kf"])
        .arg("--obs")
        .arg(&obs_path)
        .env("RKF_OUTPUT_DIR", dir.path().join("x"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(stderr(&out).contains("61"), "got: {}", stderr(&out));
}
