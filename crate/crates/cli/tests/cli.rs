//! End-to-end tests of the CLI plumbing: config parsing, overrides, report
//! emission, and exit codes.

use std::path::{Path, PathBuf};

use rbp_cli::{cmd_se, cmd_simulate, cmd_sweep, load_config, CommonArgs, EXIT_OK};

fn temp_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("rbp_cli_test_{name}"));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("config.toml");
    std::fs::write(&path, body).unwrap();
    path
}

fn args(config: PathBuf) -> CommonArgs {
    CommonArgs {
        config,
        out: None,
        seed: None,
        trials: None,
        threads: None,
        set: Vec::new(),
    }
}

fn small_experiment(out: &Path) -> String {
    format!(
        r#"
output_dir = "{}"

[experiment]
n = 30
beta = 2.0
trials = 4
seed = 7
iterations = 5
algorithms = ["rbp_simplified", "se_predict"]

[experiment.prior]
kind = "gauss-bernoulli"
rho = 0.1
sigma2_on = 10.0

[experiment.channel]
mode = "calibrated"
family = "awgn"
snr_db = 10.0
"#,
        out.display()
    )
}

#[test]
fn simulate_writes_reports_and_exits_zero() {
    let dir = temp_dir("simulate");
    let config_path = write_config(&dir, &small_experiment(&dir.join("out")));
    let config = load_config(&args(config_path)).unwrap();
    let code = cmd_simulate(&config).unwrap();
    assert_eq!(code, EXIT_OK);
    for f in ["report.json", "median_nse.csv", "cdf.csv", "trials.csv"] {
        assert!(dir.join("out").join(f).is_file(), "{f} missing");
    }
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn report_spec_round_trips_to_config() {
    let dir = temp_dir("roundtrip");
    let config_path = write_config(&dir, &small_experiment(&dir.join("out")));
    let config = load_config(&args(config_path)).unwrap();
    cmd_simulate(&config).unwrap();
    let text = std::fs::read_to_string(dir.join("out/report.json")).unwrap();
    let report: rbp_core::sim_harness::AggregateReport = serde_json::from_str(&text).unwrap();
    assert_eq!(Some(report.spec), config.experiment);
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn negative_beta_is_a_config_error_naming_the_field() {
    let dir = temp_dir("negbeta");
    let body = small_experiment(&dir.join("out")).replace("beta = 2.0", "beta = -1.0");
    let config_path = write_config(&dir, &body);
    let config = load_config(&args(config_path)).unwrap();
    let err = cmd_simulate(&config).unwrap_err();
    assert!(err.to_string().contains("beta"), "got: {err}");
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn unknown_keys_are_rejected() {
    let dir = temp_dir("unknown");
    // Top of the document so the key lands in the root table.
    let body = format!("nonsense_key = 3\n{}", small_experiment(&dir.join("out")));
    let config_path = write_config(&dir, &body);
    let err = load_config(&args(config_path)).unwrap_err();
    assert!(err.to_string().contains("nonsense_key"), "got: {err}");
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn empty_config_is_an_error() {
    let dir = temp_dir("empty");
    let config_path = write_config(&dir, "");
    assert!(load_config(&args(config_path)).is_err());
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn set_overrides_and_flags_apply() {
    let dir = temp_dir("overrides");
    let config_path = write_config(&dir, &small_experiment(&dir.join("out")));
    let mut a = args(config_path);
    a.set = vec!["experiment.beta=3.0".into()];
    a.seed = Some(99);
    a.trials = Some(2);
    let config = load_config(&a).unwrap();
    let exp = config.experiment.unwrap();
    assert_eq!(exp.beta, 3.0);
    assert_eq!(exp.seed, 99);
    assert_eq!(exp.trials, 2);
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn se_reports_analytic_fixed_point() {
    // beta = 1, unit-variance Gaussian prior, unit AWGN noise: the scalar
    // fixed-point equation mu^2 + mu - 1 = 0 has root (sqrt(5) - 1)/2.
    let dir = temp_dir("se");
    let body = format!(
        r#"
output_dir = "{}"

[se]
beta = 1.0

[se.prior]
kind = "gaussian"
mean = 0.0
variance = 1.0

[se.channel]
kind = "awgn"
noise_variance = 1.0
"#,
        dir.join("out").display()
    );
    let config_path = write_config(&dir, &body);
    let config = load_config(&args(config_path)).unwrap();
    assert_eq!(cmd_se(&config).unwrap(), EXIT_OK);
    let text = std::fs::read_to_string(dir.join("out/fixed_point.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    let root = (5f64.sqrt() - 1.0) / 2.0;
    for key in ["fixed_point_mu_z_hi", "fixed_point_mu_z_lo"] {
        let got = v[key].as_f64().unwrap();
        assert!((got - root).abs() < 1e-6, "{key} = {got}");
    }
    assert_eq!(v["unique"], serde_json::Value::Bool(true));
    assert!(dir.join("out/se_trajectory.csv").is_file());
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn sweep_produces_subreports_and_combined_csv() {
    let dir = temp_dir("sweep");
    let body = format!(
        "{}\n[sweep]\nparameter = \"beta\"\nvalues = [1.0, 2.0]\n",
        small_experiment(&dir.join("out"))
    );
    let config_path = write_config(&dir, &body);
    let config = load_config(&args(config_path)).unwrap();
    assert_eq!(cmd_sweep(&config).unwrap(), EXIT_OK);
    for v in ["beta_1", "beta_2"] {
        assert!(
            dir.join("out").join(v).join("report.json").is_file(),
            "missing sub-report {v}"
        );
    }
    let combined = std::fs::read_to_string(dir.join("out/combined.csv")).unwrap();
    let lines: Vec<&str> = combined.lines().collect();
    assert_eq!(lines[0], "beta,algorithm,final_median_nse_db");
    // One rbp row and one se_predict row per value.
    assert_eq!(lines.len(), 1 + 2 * 2, "{combined}");
    let _ = std::fs::remove_dir_all(&dir);
}
