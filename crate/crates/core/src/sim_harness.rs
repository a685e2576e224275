//! Monte Carlo experiment harness: instance generation, SNR calibration,
//! baselines, and aggregation into report files.
//!
//! Trials are embarrassingly parallel; each trial derives its own RNG stream
//! from `(seed, trial_index)` through a SplitMix64 hash, so results are
//! bit-identical regardless of thread count or execution order. Aggregation
//! sorts before reducing and the report writers format numbers
//! deterministically, making whole report files byte-reproducible.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mat::DenseMatrix;
use crate::message_passing::{self, Init, ProblemInstance, RbpOptions, Variant};
use crate::scalar_io::{OutputChannelModel, PriorModel};
use crate::state_evolution::{self, nse_db_floor, FixedPointSummary, ScaleModel, SeConfig};

/// Report files carry this schema version.
pub const REPORT_SCHEMA: u32 = 1;

/// Genie-initialized runs have exactly zero error at the start; NSE values
/// are floored here so every recorded number is finite.
pub const NSE_FLOOR_DB: f64 = -100.0;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid experiment spec: {0}")]
    InvalidSpec(String),
    #[error("SNR calibration is not defined for the {0} channel; give explicit parameters")]
    UnsupportedCalibration(String),
    #[error("normal matrix is numerically singular (pivot {0})")]
    SingularSystem(f64),
    #[error("state evolution failed: {0}")]
    Se(#[from] state_evolution::SeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// How the measurement matrix is drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum MatrixModel {
    /// i.i.d. zero-mean Gaussian entries. `variance = None` means `1/m`,
    /// which gives unit expected column energy and a closed-form SNR
    /// calibration.
    GaussianIid { variance: Option<f64> },
    /// `Phi = (1/sqrt(d)) A S^{1/2}`: each row of `A` has exactly `d`
    /// random-sign entries at uniform positions and `S` holds per-column
    /// scale factors.
    SparseFactorized { d: usize, scale: ScaleModel },
}

impl Default for MatrixModel {
    fn default() -> Self {
        MatrixModel::GaussianIid { variance: None }
    }
}

impl MatrixModel {
    pub fn scale_model(&self) -> ScaleModel {
        match self {
            MatrixModel::GaussianIid { .. } => ScaleModel::Unit,
            MatrixModel::SparseFactorized { scale, .. } => scale.clone(),
        }
    }

    /// `E[(Phi x)_i^2]` for x i.i.d. with the given second moment.
    fn expected_row_energy(&self, m: usize, n: usize, x_second_moment: f64) -> f64 {
        match self {
            MatrixModel::GaussianIid { variance } => {
                let v = variance.unwrap_or(1.0 / m as f64);
                v * n as f64 * x_second_moment
            }
            MatrixModel::SparseFactorized { scale, .. } => {
                // (1/d) * sum over the d active columns of E[s] E[x^2].
                scale.mean_s() * x_second_moment
            }
        }
    }
}

/// The channel, either fully specified or calibrated to a target SNR.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum ChannelSpec {
    Explicit { channel: OutputChannelModel },
    Calibrated { family: ChannelFamily, snr_db: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChannelFamily {
    Awgn,
    BoundedUniform,
    Logistic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    RbpFull,
    RbpSimplified,
    RbpGenie,
    Lmmse,
    LmmseProjected,
    SePredict,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::RbpFull => "rbp_full",
            Algorithm::RbpSimplified => "rbp_simplified",
            Algorithm::RbpGenie => "rbp_genie",
            Algorithm::Lmmse => "lmmse",
            Algorithm::LmmseProjected => "lmmse_projected",
            Algorithm::SePredict => "se_predict",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub n: usize,
    pub beta: f64,
    pub prior: PriorModel,
    pub channel: ChannelSpec,
    #[serde(default)]
    pub matrix_model: MatrixModel,
    pub trials: usize,
    pub seed: u64,
    pub iterations: usize,
    pub algorithms: Vec<Algorithm>,
    #[serde(default)]
    pub damping: f64,
}

impl ExperimentSpec {
    pub fn m(&self) -> usize {
        ((self.n as f64 / self.beta).round() as usize).max(1)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.n < 2 {
            return Err(HarnessError::InvalidSpec("n must be at least 2".into()));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(HarnessError::InvalidSpec("beta must be positive".into()));
        }
        if self.trials < 1 {
            return Err(HarnessError::InvalidSpec("trials must be at least 1".into()));
        }
        if self.iterations < 1 {
            return Err(HarnessError::InvalidSpec(
                "iterations must be at least 1".into(),
            ));
        }
        if self.algorithms.is_empty() {
            return Err(HarnessError::InvalidSpec(
                "algorithm list must be non-empty".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.damping) {
            return Err(HarnessError::InvalidSpec(
                "damping must be in [0, 1)".into(),
            ));
        }
        self.prior
            .validate()
            .map_err(HarnessError::InvalidSpec)?;
        if let ChannelSpec::Explicit { channel } = &self.channel {
            channel.validate().map_err(HarnessError::InvalidSpec)?;
        }
        if let MatrixModel::SparseFactorized { d, .. } = &self.matrix_model {
            if *d == 0 {
                return Err(HarnessError::InvalidSpec(
                    "sparse factorized model needs d >= 1".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Resolve the channel parameters, calibrating to the target SNR0 when the
/// spec gives one: `SNR0 = 10 log10(E||Phi x||^2 / (n mu_w))`, so
/// `mu_w = E||Phi x||^2 / (n 10^{SNR0/10})`. For the bounded-uniform channel
/// the equivalent noise variance is `delta^2/3`, hence `delta = sqrt(3 mu_w)`.
pub fn calibrate_noise(spec: &ExperimentSpec) -> Result<OutputChannelModel, HarnessError> {
    match &spec.channel {
        ChannelSpec::Explicit { channel } => Ok(channel.clone()),
        ChannelSpec::Calibrated { family, snr_db } => {
            let m = spec.m();
            let row_energy =
                spec.matrix_model
                    .expected_row_energy(m, spec.n, spec.prior.second_moment());
            // E||Phi x||^2 / n = m * row_energy / n.
            let mu_w = m as f64 * row_energy / spec.n as f64 / 10f64.powf(snr_db / 10.0);
            match family {
                ChannelFamily::Awgn => Ok(OutputChannelModel::awgn(mu_w)),
                ChannelFamily::BoundedUniform => {
                    Ok(OutputChannelModel::bounded_uniform((3.0 * mu_w).sqrt()))
                }
                ChannelFamily::Logistic => {
                    Err(HarnessError::UnsupportedCalibration("logistic".into()))
                }
            }
        }
    }
}

/// Per-trial RNG stream: SplitMix64 finalizer over (seed, trial) keeps
/// streams decorrelated while staying a pure function of the pair.
pub fn trial_rng(seed: u64, trial: usize) -> ChaCha12Rng {
    let mut z = seed
        .wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(trial as u64 + 1));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    ChaCha12Rng::seed_from_u64(z)
}

/// Sample one problem instance: `x ~ prior`, `Phi` per matrix model,
/// `y ~ p(y | Phi x)`.
pub fn generate_instance(
    spec: &ExperimentSpec,
    channel: &OutputChannelModel,
    trial: usize,
) -> ProblemInstance {
    let mut rng = trial_rng(spec.seed, trial);
    let m = spec.m();
    let n = spec.n;
    let x: Vec<f64> = (0..n).map(|_| spec.prior.sample(&mut rng)).collect();
    let phi = sample_matrix(&spec.matrix_model, m, n, &mut rng);
    let z = phi.matvec(&x);
    let y: Vec<f64> = z.iter().map(|&zi| channel.sample_y(zi, &mut rng)).collect();
    ProblemInstance::new(phi, y, spec.prior.clone(), channel.clone(), Some(x))
}

fn sample_matrix<R: Rng + ?Sized>(
    model: &MatrixModel,
    m: usize,
    n: usize,
    rng: &mut R,
) -> DenseMatrix {
    match model {
        MatrixModel::GaussianIid { variance } => {
            let sd = variance.unwrap_or(1.0 / m as f64).sqrt();
            let data: Vec<f64> = (0..m * n)
                .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal) * sd)
                .collect();
            DenseMatrix::from_rows(m, n, data)
        }
        MatrixModel::SparseFactorized { d, scale } => {
            let d = (*d).min(n);
            let sqrt_s: Vec<f64> = {
                let atoms = scale.atoms();
                (0..n)
                    .map(|_| {
                        let u: f64 = rng.gen();
                        let mut acc = 0.0;
                        let mut s = atoms.last().unwrap().0;
                        for &(val, w) in &atoms {
                            acc += w;
                            if u <= acc {
                                s = val;
                                break;
                            }
                        }
                        s.sqrt()
                    })
                    .collect()
            };
            let mut mat = DenseMatrix::zeros(m, n);
            let norm = 1.0 / (d as f64).sqrt();
            let mut cols: Vec<usize> = (0..n).collect();
            for i in 0..m {
                // Partial Fisher-Yates: d distinct columns per row.
                for k in 0..d {
                    let pick = rng.gen_range(k..n);
                    cols.swap(k, pick);
                }
                for &j in &cols[..d] {
                    let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                    *mat.at_mut(i, j) = sign * norm * sqrt_s[j];
                }
            }
            mat
        }
    }
}

/// Linear MMSE estimate
/// `x_hat = mean + var * Phi^T (var * Phi Phi^T + mu_w I)^{-1} (y - Phi mean)`
/// via a dense Cholesky solve of the m-by-m system.
pub fn lmmse_baseline(problem: &ProblemInstance, mu_w: f64) -> Result<Vec<f64>, HarnessError> {
    let m = problem.m();
    let n = problem.n();
    let var = problem.prior.variance();
    let mean = problem.prior.mean();
    // Gram matrix var * Phi Phi^T + mu_w I.
    let mut a = vec![0.0; m * m];
    for i in 0..m {
        let ri = problem.phi.row(i);
        for k in i..m {
            let rk = problem.phi.row(k);
            let dot: f64 = ri.iter().zip(rk).map(|(p, q)| p * q).sum();
            a[i * m + k] = var * dot + if i == k { mu_w } else { 0.0 };
            a[k * m + i] = a[i * m + k];
        }
    }
    let resid: Vec<f64> = (0..m)
        .map(|i| problem.y[i] - problem.phi.row(i).iter().sum::<f64>() * mean)
        .collect();
    let w = cholesky_solve(&mut a, m, &resid)?;
    let mut x_hat = problem.phi.matvec_t(&w);
    for xj in x_hat.iter_mut() {
        *xj = mean + var * *xj;
    }
    let _ = n;
    Ok(x_hat)
}

/// In-place Cholesky factorization and solve of a symmetric positive-definite
/// system.
fn cholesky_solve(a: &mut [f64], m: usize, b: &[f64]) -> Result<Vec<f64>, HarnessError> {
    for k in 0..m {
        for j in 0..k {
            let l = a[k * m + j];
            for i in k..m {
                a[i * m + k] -= a[i * m + j] * l;
            }
        }
        let pivot = a[k * m + k];
        if pivot <= 0.0 || !pivot.is_finite() {
            return Err(HarnessError::SingularSystem(pivot));
        }
        let s = pivot.sqrt();
        for i in k..m {
            a[i * m + k] /= s;
        }
    }
    // Forward then backward substitution with L stored in the lower triangle.
    let mut y = b.to_vec();
    for i in 0..m {
        for j in 0..i {
            y[i] -= a[i * m + j] * y[j];
        }
        y[i] /= a[i * m + i];
    }
    for i in (0..m).rev() {
        for j in i + 1..m {
            y[i] -= a[j * m + i] * y[j];
        }
        y[i] /= a[i * m + i];
    }
    Ok(y)
}

/// Cyclic projection onto the consistent polytope
/// `{x : ||y - Phi x||_inf <= delta}` (POCS over the 2m half-spaces).
/// Returns the projected point and whether the violation tolerance was met
/// within the sweep budget.
pub fn project_consistent(
    x_hat: &[f64],
    phi: &DenseMatrix,
    y: &[f64],
    delta: f64,
) -> (Vec<f64>, bool) {
    const TOL: f64 = 1e-9;
    const MAX_SWEEPS: usize = 10_000;
    let m = phi.rows();
    let mut x = x_hat.to_vec();
    let row_norm2: Vec<f64> = (0..m)
        .map(|i| phi.row(i).iter().map(|v| v * v).sum())
        .collect();
    for _ in 0..MAX_SWEEPS {
        let mut worst: f64 = 0.0;
        for i in 0..m {
            if row_norm2[i] == 0.0 {
                continue;
            }
            let r = y[i] - phi.row(i).iter().zip(&x).map(|(p, q)| p * q).sum::<f64>();
            let excess = if r > delta {
                r - delta
            } else if r < -delta {
                r + delta
            } else {
                0.0
            };
            if excess != 0.0 {
                worst = worst.max(excess.abs());
                let step = excess / row_norm2[i];
                for (xj, &pj) in x.iter_mut().zip(phi.row(i)) {
                    *xj += step * pj;
                }
            }
        }
        if worst < TOL {
            return (x, true);
        }
    }
    (x, false)
}

/// Per-trial outcome. Wall time is kept in memory for diagnostics but is
/// excluded from report files so reports stay byte-reproducible.
#[derive(Debug, Clone)]
pub struct TrialResult {
    pub trial: usize,
    pub nse_db: BTreeMap<Algorithm, Vec<f64>>,
    pub consistent: Option<bool>,
    pub wall_time_s: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregateReport {
    pub schema: u32,
    pub spec: ExperimentSpec,
    pub config_hash: String,
    pub channel: OutputChannelModel,
    /// `median_nse[alg][t]`, `t = 0` being the initial estimate.
    pub median_nse: BTreeMap<String, Vec<f64>>,
    pub mean_nse: BTreeMap<String, Vec<f64>>,
    /// Empirical CDF of the final-iteration NSE: sorted (value, probability).
    pub cdf: BTreeMap<String, Vec<(f64, f64)>>,
    pub se_predicted: Option<Vec<f64>>,
    pub fixed_point: Option<FixedPointSummary>,
    pub failures: usize,
    /// Raw per-trial NSE trajectories, keyed by algorithm, indexed by trial.
    pub trial_nse: BTreeMap<String, Vec<Vec<f64>>>,
}

/// FNV-1a hash of the canonical JSON encoding of the spec.
pub fn config_hash(spec: &ExperimentSpec) -> String {
    let bytes = serde_json::to_vec(spec).expect("spec serializes");
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    format!("{h:016x}")
}

fn nse_db(x_hat: &[f64], x: &[f64], second_moment: f64) -> f64 {
    let err: f64 = x_hat.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
    let ratio = err / (x.len() as f64 * second_moment);
    nse_db_floor(ratio).max(NSE_FLOOR_DB)
}

fn run_trial(
    spec: &ExperimentSpec,
    channel: &OutputChannelModel,
    mu_w_equiv: f64,
    trial: usize,
) -> TrialResult {
    let start = std::time::Instant::now();
    let problem = generate_instance(spec, channel, trial);
    let x = problem.true_x.clone().unwrap();
    let sm = spec.prior.second_moment();
    let mut nse: BTreeMap<Algorithm, Vec<f64>> = BTreeMap::new();
    let mut consistent = None;
    let mut error = None;

    for &alg in &spec.algorithms {
        let outcome: Result<Vec<f64>, String> = match alg {
            Algorithm::SePredict => continue, // handled once, outside trials
            Algorithm::RbpFull | Algorithm::RbpSimplified | Algorithm::RbpGenie => {
                let opts = RbpOptions {
                    max_iterations: spec.iterations,
                    variant: if alg == Algorithm::RbpFull {
                        Variant::FullEdge
                    } else {
                        Variant::Simplified
                    },
                    init: if alg == Algorithm::RbpGenie {
                        Init::Genie
                    } else {
                        Init::Prior
                    },
                    damping: spec.damping,
                    stop_tolerance: 0.0,
                };
                let run = if alg == Algorithm::RbpFull {
                    message_passing::run(&problem, &opts)
                } else {
                    message_passing::run_simplified(&problem, &opts)
                };
                match run {
                    Ok((state, history)) => {
                        let x0: Vec<f64> = if alg == Algorithm::RbpGenie {
                            x.clone()
                        } else {
                            vec![spec.prior.mean(); problem.n()]
                        };
                        let mut curve = vec![nse_db(&x0, &x, sm)];
                        curve.extend(history.x_hat.iter().map(|xh| nse_db(xh, &x, sm)));
                        if let OutputChannelModel::BoundedUniform { half_width } =
                            &problem.channel
                        {
                            let z = problem.phi.matvec(&state.x_hat);
                            let viol = problem
                                .y
                                .iter()
                                .zip(&z)
                                .map(|(yi, zi)| (yi - zi).abs())
                                .fold(0.0f64, f64::max);
                            consistent = Some(viol <= half_width + 1e-9);
                        }
                        Ok(curve)
                    }
                    Err(e) => Err(e.to_string()),
                }
            }
            Algorithm::Lmmse => lmmse_baseline(&problem, mu_w_equiv)
                .map(|xh| vec![nse_db(&xh, &x, sm)])
                .map_err(|e| e.to_string()),
            Algorithm::LmmseProjected => match &problem.channel {
                OutputChannelModel::BoundedUniform { half_width } => {
                    lmmse_baseline(&problem, mu_w_equiv)
                        .map(|xh| {
                            let (proj, _) =
                                project_consistent(&xh, &problem.phi, &problem.y, *half_width);
                            vec![nse_db(&proj, &x, sm)]
                        })
                        .map_err(|e| e.to_string())
                }
                _ => Err("lmmse_projected requires the bounded-uniform channel".into()),
            },
        };
        match outcome {
            Ok(curve) => {
                nse.insert(alg, curve);
            }
            Err(e) => error = Some(format!("{}: {e}", alg.name())),
        }
        if error.is_some() {
            break;
        }
    }

    TrialResult {
        trial,
        nse_db: nse,
        consistent,
        wall_time_s: start.elapsed().as_secs_f64(),
        error,
    }
}

/// Equivalent Gaussian noise variance used by the LMMSE baselines.
fn equivalent_noise_variance(channel: &OutputChannelModel) -> f64 {
    match channel {
        OutputChannelModel::Awgn { noise_variance } => *noise_variance,
        OutputChannelModel::BoundedUniform { half_width } => half_width * half_width / 3.0,
        OutputChannelModel::Logistic { .. } => 1.0,
    }
}

pub fn run_experiment(spec: &ExperimentSpec) -> Result<AggregateReport, HarnessError> {
    spec.validate()?;
    let channel = calibrate_noise(spec)?;
    let mu_w = equivalent_noise_variance(&channel);

    let (se_predicted, fixed_point) = if spec.algorithms.contains(&Algorithm::SePredict) {
        let mut se_cfg = SeConfig::new(spec.beta, spec.prior.clone(), channel.clone());
        se_cfg.scale = spec.matrix_model.scale_model();
        se_cfg.max_iterations = spec.iterations.max(se_cfg.max_iterations);
        let (hi, _lo, summary) = state_evolution::fixed_point_summary(&se_cfg)?;
        let mut curve = state_evolution::predicted_nse_db(&hi, &se_cfg);
        while curve.len() < spec.iterations + 1 {
            curve.push(*curve.last().unwrap());
        }
        curve.truncate(spec.iterations + 1);
        (Some(curve), Some(summary))
    } else {
        (None, None)
    };

    let results: Vec<TrialResult> = (0..spec.trials)
        .into_par_iter()
        .map(|trial| run_trial(spec, &channel, mu_w, trial))
        .collect();

    let failures = results.iter().filter(|r| r.error.is_some()).count();

    let mut median_nse = BTreeMap::new();
    let mut mean_nse = BTreeMap::new();
    let mut cdf = BTreeMap::new();
    let mut trial_nse: BTreeMap<String, Vec<Vec<f64>>> = BTreeMap::new();
    for &alg in &spec.algorithms {
        if alg == Algorithm::SePredict {
            continue;
        }
        let curves: Vec<&Vec<f64>> = results
            .iter()
            .filter(|r| r.error.is_none())
            .filter_map(|r| r.nse_db.get(&alg))
            .collect();
        if curves.is_empty() {
            continue;
        }
        let len = curves.iter().map(|c| c.len()).min().unwrap();
        let mut medians = Vec::with_capacity(len);
        let mut means = Vec::with_capacity(len);
        for t in 0..len {
            let mut vals: Vec<f64> = curves.iter().map(|c| c[t]).collect();
            vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
            medians.push(median_of_sorted(&vals));
            means.push(vals.iter().sum::<f64>() / vals.len() as f64);
        }
        let mut finals: Vec<f64> = curves.iter().map(|c| *c.last().unwrap()).collect();
        finals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let nct = finals.len() as f64;
        let ecdf: Vec<(f64, f64)> = finals
            .iter()
            .enumerate()
            .map(|(i, &v)| (v, (i + 1) as f64 / nct))
            .collect();
        median_nse.insert(alg.name().to_string(), medians);
        mean_nse.insert(alg.name().to_string(), means);
        cdf.insert(alg.name().to_string(), ecdf);
        trial_nse.insert(
            alg.name().to_string(),
            results
                .iter()
                .filter(|r| r.error.is_none())
                .filter_map(|r| r.nse_db.get(&alg).cloned())
                .collect(),
        );
    }

    Ok(AggregateReport {
        schema: REPORT_SCHEMA,
        spec: spec.clone(),
        config_hash: config_hash(spec),
        channel,
        median_nse,
        mean_nse,
        cdf,
        se_predicted,
        fixed_point,
        failures,
        trial_nse,
    })
}

fn median_of_sorted(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Write `report.json`, `median_nse.csv`, `cdf.csv`, and `trials.csv` into
/// `dir` (created if needed).
pub fn write_report_files(dir: &Path, report: &AggregateReport) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir)?;
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    std::fs::write(dir.join("report.json"), json + "\n")?;

    let mut f = std::fs::File::create(dir.join("median_nse.csv"))?;
    writeln!(f, "t,algorithm,nse_db")?;
    for (alg, curve) in &report.median_nse {
        for (t, v) in curve.iter().enumerate() {
            writeln!(f, "{t},{alg},{v}")?;
        }
    }
    if let Some(se) = &report.se_predicted {
        for (t, v) in se.iter().enumerate() {
            writeln!(f, "{t},se_predict,{v}")?;
        }
    }

    let mut f = std::fs::File::create(dir.join("cdf.csv"))?;
    writeln!(f, "algorithm,nse_db,empirical_prob")?;
    for (alg, pts) in &report.cdf {
        for (v, p) in pts {
            writeln!(f, "{alg},{v},{p}")?;
        }
    }

    let mut f = std::fs::File::create(dir.join("trials.csv"))?;
    writeln!(f, "trial,algorithm,t,nse_db")?;
    for (alg, rows) in &report.trial_nse {
        for (trial, curve) in rows.iter().enumerate() {
            for (t, v) in curve.iter().enumerate() {
                writeln!(f, "{trial},{alg},{t},{v}")?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn awgn_spec(n: usize, beta: f64, trials: usize) -> ExperimentSpec {
        ExperimentSpec {
            n,
            beta,
            prior: PriorModel::gauss_bernoulli(0.1),
            channel: ChannelSpec::Calibrated {
                family: ChannelFamily::Awgn,
                snr_db: 10.0,
            },
            matrix_model: MatrixModel::default(),
            trials,
            seed: 17,
            iterations: 10,
            algorithms: vec![Algorithm::RbpSimplified, Algorithm::SePredict],
            damping: 0.0,
        }
    }

    #[test]
    fn calibration_closed_forms() {
        // Unit prior second moment, entries var 1/m: mu_w = 10^{-SNR/10}.
        let mut spec = awgn_spec(100, 2.0, 1);
        spec.prior = PriorModel::gaussian(0.0, 1.0);
        let ch = calibrate_noise(&spec).unwrap();
        assert_eq!(ch, OutputChannelModel::awgn(0.1));

        spec.channel = ChannelSpec::Calibrated {
            family: ChannelFamily::Awgn,
            snr_db: 0.0,
        };
        let ch = calibrate_noise(&spec).unwrap();
        assert_eq!(ch, OutputChannelModel::awgn(1.0));

        spec.channel = ChannelSpec::Calibrated {
            family: ChannelFamily::BoundedUniform,
            snr_db: 10.0,
        };
        let ch = calibrate_noise(&spec).unwrap();
        if let OutputChannelModel::BoundedUniform { half_width } = ch {
            assert!((half_width - 0.3f64.sqrt()).abs() < 1e-12);
        } else {
            panic!("wrong channel family");
        }

        spec.channel = ChannelSpec::Calibrated {
            family: ChannelFamily::Logistic,
            snr_db: 10.0,
        };
        assert!(matches!(
            calibrate_noise(&spec),
            Err(HarnessError::UnsupportedCalibration(_))
        ));
    }

    #[test]
    fn calibration_matches_monte_carlo_energy() {
        // Verify E||Phi x||^2 = n * E[x^2] for entries of variance 1/m by
        // direct simulation.
        let spec = awgn_spec(40, 2.0, 1);
        let channel = OutputChannelModel::awgn(1.0);
        let mut total = 0.0;
        let reps = 400;
        for trial in 0..reps {
            let p = generate_instance(&spec, &channel, trial);
            let z = p.phi.matvec(p.true_x.as_ref().unwrap());
            total += z.iter().map(|v| v * v).sum::<f64>();
        }
        let avg = total / reps as f64 / spec.n as f64;
        let expect = spec.prior.second_moment();
        assert!(
            (avg - expect).abs() < 0.1 * expect,
            "avg energy {avg} vs {expect}"
        );
    }

    #[test]
    fn instance_generation_is_deterministic_and_sparse_counts_concentrate() {
        let spec = awgn_spec(100, 2.0, 1);
        let channel = calibrate_noise(&spec).unwrap();
        let a = generate_instance(&spec, &channel, 3);
        let b = generate_instance(&spec, &channel, 3);
        assert_eq!(a.phi.data(), b.phi.data());
        assert_eq!(a.y, b.y);
        assert_eq!(a.true_x, b.true_x);

        // Binomial concentration of the non-zero count for rho = 0.1.
        let mut total = 0usize;
        let trials = 1000;
        for t in 0..trials {
            let p = generate_instance(&spec, &channel, t);
            total += p
                .true_x
                .as_ref()
                .unwrap()
                .iter()
                .filter(|v| **v != 0.0)
                .count();
        }
        let mean = total as f64 / trials as f64;
        assert!((9.0..=11.0).contains(&mean), "mean non-zero count {mean}");
    }

    #[test]
    fn bounded_noise_stays_in_box() {
        let mut spec = awgn_spec(30, 1.0, 1);
        spec.channel = ChannelSpec::Calibrated {
            family: ChannelFamily::BoundedUniform,
            snr_db: 10.0,
        };
        let channel = calibrate_noise(&spec).unwrap();
        let delta = match &channel {
            OutputChannelModel::BoundedUniform { half_width } => *half_width,
            _ => unreachable!(),
        };
        for t in 0..20 {
            let p = generate_instance(&spec, &channel, t);
            let z = p.phi.matvec(p.true_x.as_ref().unwrap());
            for (yi, zi) in p.y.iter().zip(&z) {
                assert!((yi - zi).abs() <= delta);
            }
        }
    }

    #[test]
    fn sparse_factorized_row_support() {
        let model = MatrixModel::SparseFactorized {
            d: 5,
            scale: ScaleModel::Unit,
        };
        let mut rng = trial_rng(1, 0);
        let m = sample_matrix(&model, 20, 40, &mut rng);
        for i in 0..20 {
            let nz = m.row(i).iter().filter(|v| **v != 0.0).count();
            assert_eq!(nz, 5);
            for v in m.row(i) {
                assert!(*v == 0.0 || (v.abs() - 1.0 / 5f64.sqrt()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn lmmse_scalar_wiener_and_prior_limit() {
        let phi = DenseMatrix::from_rows(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let p = ProblemInstance::new(
            phi,
            vec![0.8, -0.4],
            PriorModel::gaussian(0.0, 1.0),
            OutputChannelModel::awgn(1.0),
            None,
        );
        let xh = lmmse_baseline(&p, 1.0).unwrap();
        assert!((xh[0] - 0.4).abs() < 1e-12);
        assert!((xh[1] + 0.2).abs() < 1e-12);
        let xh = lmmse_baseline(&p, 1e12).unwrap();
        assert!(xh[0].abs() < 1e-9 && xh[1].abs() < 1e-9);
    }

    #[test]
    fn lmmse_satisfies_normal_equations() {
        // Oracle: x_hat must solve (Phi^T Phi / mu_w + I/var) x = Phi^T y/mu_w
        // for a zero-mean prior; check the residual of that system directly.
        let spec = ExperimentSpec {
            n: 8,
            beta: 8.0 / 5.0,
            prior: PriorModel::gaussian(0.0, 2.0),
            channel: ChannelSpec::Explicit {
                channel: OutputChannelModel::awgn(0.3),
            },
            matrix_model: MatrixModel::default(),
            trials: 1,
            seed: 5,
            iterations: 1,
            algorithms: vec![Algorithm::Lmmse],
            damping: 0.0,
        };
        let channel = calibrate_noise(&spec).unwrap();
        let p = generate_instance(&spec, &channel, 0);
        let xh = lmmse_baseline(&p, 0.3).unwrap();
        let mu_w = 0.3;
        let var = 2.0;
        let zh = p.phi.matvec(&xh);
        let resid: Vec<f64> = p.y.iter().zip(&zh).map(|(y, z)| y - z).collect();
        let lhs = p.phi.matvec_t(&resid);
        for j in 0..p.n() {
            // Phi^T (y - Phi x)/mu_w = x/var at the optimum.
            assert!(
                (lhs[j] / mu_w - xh[j] / var).abs() < 1e-10,
                "normal equations violated at {j}"
            );
        }
    }

    #[test]
    fn projection_identity_and_single_constraint() {
        let phi = DenseMatrix::from_rows(1, 2, vec![1.0, 1.0]);
        let y = vec![0.0];
        // Already consistent: unchanged.
        let (p, ok) = project_consistent(&[0.1, -0.1], &phi, &y, 0.5);
        assert!(ok);
        assert_eq!(p, vec![0.1, -0.1]);
        // Violated by 2 - 0.5 = 1.5 along phi/||phi||^2 = (0.5, 0.5) scaled.
        let (p, ok) = project_consistent(&[1.0, 1.0], &phi, &y, 0.5);
        assert!(ok);
        assert!((p[0] - 0.25).abs() < 1e-9 && (p[1] - 0.25).abs() < 1e-9);
    }

    #[test]
    fn projection_reduces_error_for_inconsistent_points() {
        let mut spec = awgn_spec(10, 1.0, 1);
        spec.channel = ChannelSpec::Calibrated {
            family: ChannelFamily::BoundedUniform,
            snr_db: 6.0,
        };
        spec.prior = PriorModel::gaussian(0.0, 1.0);
        let channel = calibrate_noise(&spec).unwrap();
        let delta = match &channel {
            OutputChannelModel::BoundedUniform { half_width } => *half_width,
            _ => unreachable!(),
        };
        let mut improved = 0;
        let mut inconsistent = 0;
        for t in 0..100 {
            let p = generate_instance(&spec, &channel, t);
            let x = p.true_x.as_ref().unwrap();
            // The prior mean (origin) is almost never consistent, which
            // exercises the projection; each half-space contains the true x,
            // so POCS must move the point closer to x.
            let xh = vec![0.0; p.n()];
            let z = p.phi.matvec(&xh);
            let viol = p
                .y
                .iter()
                .zip(&z)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            if viol <= delta {
                continue;
            }
            inconsistent += 1;
            let (proj, ok) = project_consistent(&xh, &p.phi, &p.y, delta);
            assert!(ok);
            let zp = p.phi.matvec(&proj);
            for (a, b) in p.y.iter().zip(&zp) {
                assert!((a - b).abs() <= delta + 1e-8);
            }
            let e0: f64 = xh.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
            let e1: f64 = proj.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
            if e1 <= e0 {
                improved += 1;
            }
        }
        assert!(inconsistent > 10, "test not exercising projection");
        assert!(
            improved as f64 >= 0.95 * inconsistent as f64,
            "improved {improved}/{inconsistent}"
        );
    }

    #[test]
    fn run_experiment_aggregates_and_reproduces() {
        let spec = awgn_spec(40, 2.0, 8);
        let a = run_experiment(&spec).unwrap();
        let b = run_experiment(&spec).unwrap();
        assert_eq!(a.failures, 0);
        let ja = serde_json::to_string(&a).unwrap();
        let jb = serde_json::to_string(&b).unwrap();
        assert_eq!(ja, jb, "report must be bit-reproducible");
        let med = &a.median_nse["rbp_simplified"];
        assert_eq!(med.len(), spec.iterations + 1);
        // The initial estimate is the prior mean, so the t=0 NSE sits near
        // 0 dB; with only ~4 active components per draw the spread (and the
        // median's downward skew) is substantial at n=40.
        assert!(
            (-4.0..1.0).contains(&med[0]),
            "prior init near 0 dB, got {}",
            med[0]
        );
        assert!(a.se_predicted.is_some());
        for pts in a.cdf.values() {
            for w in pts.windows(2) {
                assert!(w[1].0 >= w[0].0 && w[1].1 >= w[0].1);
            }
            assert!((pts.last().unwrap().1 - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn genie_floor_recorded() {
        let mut spec = awgn_spec(30, 2.0, 4);
        spec.algorithms = vec![Algorithm::RbpGenie];
        let rep = run_experiment(&spec).unwrap();
        let med = &rep.median_nse["rbp_genie"];
        assert_eq!(med[0], NSE_FLOOR_DB);
    }

    #[test]
    fn report_files_written() {
        let dir = std::env::temp_dir().join("rbp_harness_report_test");
        let _ = std::fs::remove_dir_all(&dir);
        let spec = awgn_spec(30, 2.0, 4);
        let rep = run_experiment(&spec).unwrap();
        write_report_files(&dir, &rep).unwrap();
        for f in ["report.json", "median_nse.csv", "cdf.csv", "trials.csv"] {
            assert!(dir.join(f).is_file(), "{f} missing");
        }
        let text = std::fs::read_to_string(dir.join("report.json")).unwrap();
        let parsed: AggregateReport = serde_json::from_str(&text).unwrap();
        assert_eq!(parsed.spec, spec);
        assert_eq!(parsed.schema, 1);
        let _ = std::fs::remove_dir_all(&dir);
    }
}
