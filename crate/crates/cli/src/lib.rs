//! Config-driven front end for the relaxed BP library.
//!
//! One declarative TOML document describes a run; the `simulate`, `se`, and
//! `sweep` subcommands bind it to the harness and the state-evolution
//! predictor. Scalar fields can be overridden from the command line with
//! repeated `--set key=value` flags so sweeps and CI runs do not need
//! per-variant config files.
//!
//! Exit codes: 0 success, 1 configuration error, 2 when more than 1% of
//! simulation trials failed.

use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use rbp_core::scalar_io::{OutputChannelModel, PriorModel};
use rbp_core::sim_harness::{self, calibrate_noise, ExperimentSpec};
use rbp_core::state_evolution::{
    self, Branch, ExpectationMethod, ScaleModel, SeConfig,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_TRIAL_FAILURES: i32 = 2;

/// Fraction of failed trials above which `simulate` exits with code 2.
const FAILURE_BUDGET: f64 = 0.01;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Parser)]
#[command(name = "rbp", about = "Relaxed BP experiments and state-evolution analysis")]
pub struct CliArgs {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the Monte Carlo experiment described by the config.
    Simulate(CommonArgs),
    /// Run state evolution on both branches and report the fixed points.
    Se(CommonArgs),
    /// Re-run simulate and se over a list of parameter values.
    Sweep(CommonArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Path to the TOML config document.
    #[arg(long)]
    pub config: PathBuf,
    /// Override the config's output_dir.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Override the experiment seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override the trial count.
    #[arg(long)]
    pub trials: Option<usize>,
    /// Rayon thread count (default: all cores).
    #[arg(long)]
    pub threads: Option<usize>,
    /// Override any scalar config field, e.g. `--set experiment.beta=2.0`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

/// The whole declarative run description.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CliConfig {
    pub output_dir: PathBuf,
    #[serde(default)]
    pub verbosity: u8,
    #[serde(default)]
    pub experiment: Option<ExperimentSpec>,
    #[serde(default)]
    pub se: Option<SeDoc>,
    #[serde(default)]
    pub sweep: Option<SweepDoc>,
}

/// Serializable mirror of [`SeConfig`]; the channel must be explicit here
/// unless an experiment section supplies a calibratable spec.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeDoc {
    pub beta: f64,
    pub prior: PriorModel,
    pub channel: OutputChannelModel,
    #[serde(default)]
    pub scale: ScaleModel,
    #[serde(default = "default_se_iterations")]
    pub max_iterations: usize,
    #[serde(default = "default_se_tolerance")]
    pub fixed_point_tolerance: f64,
    #[serde(default)]
    pub expectation_method: Option<ExpectationMethod>,
}

fn default_se_iterations() -> usize {
    100
}

fn default_se_tolerance() -> f64 {
    1e-9
}

impl SeDoc {
    pub fn to_config(&self) -> SeConfig {
        let mut cfg = SeConfig::new(self.beta, self.prior.clone(), self.channel);
        cfg.scale = self.scale.clone();
        cfg.max_iterations = self.max_iterations;
        cfg.fixed_point_tolerance = self.fixed_point_tolerance;
        if let Some(m) = &self.expectation_method {
            cfg.expectation_method = m.clone();
        }
        cfg
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepDoc {
    /// One of `beta`, `snr_db`, `n`, `rho`.
    pub parameter: String,
    pub values: Vec<f64>,
}

/// Parse the config file, apply `--set` overrides on the raw TOML tree, then
/// the dedicated flag overrides.
pub fn load_config(args: &CommonArgs) -> Result<CliConfig, CliError> {
    let text = std::fs::read_to_string(&args.config)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", args.config.display())))?;
    let mut doc: toml::Value = text
        .parse()
        .map_err(|e| CliError::Config(format!("{}: {e}", args.config.display())))?;
    for kv in &args.set {
        let (key, value) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("--set needs key=value, got `{kv}`")))?;
        set_path(&mut doc, key, parse_scalar(value))
            .map_err(|e| CliError::Config(format!("--set {key}: {e}")))?;
    }
    let mut config: CliConfig = doc
        .try_into()
        .map_err(|e| CliError::Config(format!("{}: {e}", args.config.display())))?;
    if let Some(out) = &args.out {
        config.output_dir = out.clone();
    }
    if let Some(exp) = config.experiment.as_mut() {
        if let Some(seed) = args.seed {
            exp.seed = seed;
        }
        if let Some(trials) = args.trials {
            exp.trials = trials;
        }
    }
    Ok(config)
}

fn parse_scalar(raw: &str) -> toml::Value {
    if let Ok(b) = raw.parse::<bool>() {
        return toml::Value::Boolean(b);
    }
    if let Ok(i) = raw.parse::<i64>() {
        return toml::Value::Integer(i);
    }
    if let Ok(f) = raw.parse::<f64>() {
        return toml::Value::Float(f);
    }
    toml::Value::String(raw.to_string())
}

fn set_path(doc: &mut toml::Value, path: &str, value: toml::Value) -> Result<(), String> {
    let mut node = doc;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = node
            .as_table_mut()
            .ok_or_else(|| format!("`{}` is not a table", parts[..i].join(".")))?;
        if i + 1 == parts.len() {
            table.insert(part.to_string(), value);
            return Ok(());
        }
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    unreachable!("empty --set path");
}

fn install_thread_pool(threads: Option<usize>) {
    if let Some(t) = threads {
        // Ignore the error if a pool already exists (tests call run() twice).
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global();
    }
}

/// Build an SE configuration either from the dedicated `[se]` section or by
/// calibrating the experiment's channel.
fn se_config_from(config: &CliConfig) -> Result<SeConfig, CliError> {
    if let Some(doc) = &config.se {
        if doc.beta <= 0.0 || !doc.beta.is_finite() {
            return Err(CliError::Config("se.beta must be positive".into()));
        }
        doc.prior.validate().map_err(CliError::Config)?;
        doc.channel.validate().map_err(CliError::Config)?;
        return Ok(doc.to_config());
    }
    let exp = config
        .experiment
        .as_ref()
        .ok_or_else(|| CliError::Config("config needs an [se] or [experiment] section".into()))?;
    exp.validate()
        .map_err(|e| CliError::Config(e.to_string()))?;
    let channel = calibrate_noise(exp).map_err(|e| CliError::Config(e.to_string()))?;
    let mut cfg = SeConfig::new(exp.beta, exp.prior.clone(), channel);
    cfg.scale = exp.matrix_model.scale_model();
    cfg.max_iterations = cfg.max_iterations.max(exp.iterations);
    Ok(cfg)
}

pub fn cmd_simulate(config: &CliConfig) -> Result<i32, CliError> {
    let exp = config
        .experiment
        .as_ref()
        .ok_or_else(|| CliError::Config("simulate needs an [experiment] section".into()))?;
    exp.validate()
        .map_err(|e| CliError::Config(e.to_string()))?;
    let report =
        sim_harness::run_experiment(exp).map_err(|e| CliError::Config(e.to_string()))?;
    sim_harness::write_report_files(&config.output_dir, &report)
        .map_err(|e| CliError::Io(std::io::Error::other(e.to_string())))?;
    if config.verbosity > 0 {
        for (alg, curve) in &report.median_nse {
            eprintln!("{alg}: final median NSE {:.3} dB", curve.last().unwrap());
        }
    }
    let failure_rate = report.failures as f64 / exp.trials as f64;
    if failure_rate > FAILURE_BUDGET {
        eprintln!(
            "warning: {} of {} trials failed",
            report.failures, exp.trials
        );
        return Ok(EXIT_TRIAL_FAILURES);
    }
    Ok(EXIT_OK)
}

#[derive(Debug, Serialize, Deserialize)]
struct SeReport {
    schema: u32,
    beta: f64,
    mu_z_init: f64,
    fixed_point_mu_z_hi: f64,
    fixed_point_mu_z_lo: f64,
    unique: bool,
    converged_hi: bool,
    converged_lo: bool,
}

pub fn cmd_se(config: &CliConfig) -> Result<i32, CliError> {
    let se_cfg = se_config_from(config)?;
    let (hi, lo, summary) = state_evolution::fixed_point_summary(&se_cfg)
        .map_err(|e| CliError::Config(e.to_string()))?;
    std::fs::create_dir_all(&config.output_dir)?;

    let mut f = std::fs::File::create(config.output_dir.join("se_trajectory.csv"))?;
    writeln!(f, "branch,t,mu_z,nse_db")?;
    for traj in [&hi, &lo] {
        let branch = match traj.branch {
            Branch::Hi => "hi",
            Branch::Lo => "lo",
        };
        let nse = state_evolution::predicted_nse_db(traj, &se_cfg);
        for (t, (&mz, &db)) in traj.mu_z.iter().zip(&nse).enumerate() {
            writeln!(f, "{branch},{t},{mz},{db}")?;
        }
    }

    let report = SeReport {
        schema: 1,
        beta: summary.beta,
        mu_z_init: hi.mu_z_init,
        fixed_point_mu_z_hi: summary.mu_z_hi,
        fixed_point_mu_z_lo: summary.mu_z_lo,
        unique: summary.unique,
        converged_hi: hi.converged,
        converged_lo: lo.converged,
    };
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    std::fs::write(config.output_dir.join("fixed_point.json"), json + "\n")?;
    Ok(EXIT_OK)
}

const SWEEP_PARAMETERS: [&str; 4] = ["beta", "snr_db", "n", "rho"];

fn apply_sweep_value(exp: &mut ExperimentSpec, parameter: &str, value: f64) -> Result<(), String> {
    match parameter {
        "beta" => exp.beta = value,
        "n" => exp.n = value.round() as usize,
        "snr_db" => match &mut exp.channel {
            sim_harness::ChannelSpec::Calibrated { snr_db, .. } => *snr_db = value,
            sim_harness::ChannelSpec::Explicit { .. } => {
                return Err("snr_db sweep needs a calibrated channel spec".into())
            }
        },
        "rho" => match &mut exp.prior {
            PriorModel::GaussBernoulli { rho, sigma2_on } => {
                *rho = value;
                *sigma2_on = 1.0 / value;
            }
            _ => return Err("rho sweep needs a gauss-bernoulli prior".into()),
        },
        other => {
            return Err(format!(
                "unknown sweep parameter `{other}` (expected one of {SWEEP_PARAMETERS:?})"
            ))
        }
    }
    Ok(())
}

pub fn cmd_sweep(config: &CliConfig) -> Result<i32, CliError> {
    let sweep = config
        .sweep
        .as_ref()
        .ok_or_else(|| CliError::Config("sweep needs a [sweep] section".into()))?;
    let base = config
        .experiment
        .as_ref()
        .ok_or_else(|| CliError::Config("sweep needs an [experiment] section".into()))?;
    if !SWEEP_PARAMETERS.contains(&sweep.parameter.as_str()) {
        return Err(CliError::Config(format!(
            "unknown sweep parameter `{}`",
            sweep.parameter
        )));
    }
    if sweep.values.is_empty() {
        return Err(CliError::Config("sweep.values must be non-empty".into()));
    }
    std::fs::create_dir_all(&config.output_dir)?;
    let mut combined = Vec::new();
    for &value in &sweep.values {
        let mut exp = base.clone();
        if let Err(e) = apply_sweep_value(&mut exp, &sweep.parameter, value) {
            return Err(CliError::Config(e));
        }
        let sub = config
            .output_dir
            .join(format!("{}_{value}", sweep.parameter));
        let sub_config = CliConfig {
            output_dir: sub.clone(),
            verbosity: config.verbosity,
            experiment: Some(exp.clone()),
            se: config.se.clone(),
            sweep: None,
        };
        // Per-value failures are isolated: record and continue.
        match cmd_simulate(&sub_config) {
            Ok(_) => {}
            Err(e) => {
                eprintln!("sweep value {value}: {e}");
                continue;
            }
        }
        if let Err(e) = cmd_se(&sub_config) {
            eprintln!("sweep value {value} (se): {e}");
        }
        let report_text = std::fs::read_to_string(sub.join("report.json"))?;
        let report: sim_harness::AggregateReport =
            serde_json::from_str(&report_text).map_err(|e| CliError::Config(e.to_string()))?;
        for (alg, curve) in &report.median_nse {
            combined.push((value, alg.clone(), *curve.last().unwrap()));
        }
        if let Some(se_curve) = &report.se_predicted {
            combined.push((value, "se_predict".to_string(), *se_curve.last().unwrap()));
        }
    }
    let mut f = std::fs::File::create(config.output_dir.join("combined.csv"))?;
    writeln!(f, "{},algorithm,final_median_nse_db", sweep.parameter)?;
    for (value, alg, nse) in &combined {
        writeln!(f, "{value},{alg},{nse}")?;
    }
    Ok(EXIT_OK)
}

/// Top-level dispatch; returns the process exit code.
pub fn run(args: CliArgs) -> i32 {
    let common = match &args.command {
        Command::Simulate(c) | Command::Se(c) | Command::Sweep(c) => c,
    };
    install_thread_pool(common.threads);
    let config = match load_config(common) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{e}");
            return EXIT_CONFIG;
        }
    };
    let result = match &args.command {
        Command::Simulate(_) => cmd_simulate(&config),
        Command::Se(_) => cmd_se(&config),
        Command::Sweep(_) => cmd_sweep(&config),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("{e}");
            EXIT_CONFIG
        }
    }
}
