//! State evolution: the scalar recursion predicting the asymptotic error
//! variances of relaxed BP.
//!
//! The recursion iterates the composed map `G(mu) = beta * Ein_bar(Eout_bar(mu))`
//! from two initial conditions. The `Hi` branch starts at the prior-induced
//! variance and tracks the algorithm; the `Lo` branch starts at zero and
//! lower-bounds the error of any estimator. `G` is monotone increasing and
//! bounded by the initial variance, so both branches converge monotonically;
//! the largest and smallest fixed points coincide exactly when the fixed
//! point is unique.
//!
//! All default expectation evaluations are deterministic quadratures so the
//! monotonicity of the iterates is not disturbed by sampling noise; the
//! binary-output logistic channel may instead use seeded Monte Carlo.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar_io::{
    output_likelihood, posterior_moments, score_derivatives, OutputChannelModel, PriorModel,
};
use crate::scalar_io::{gauss_expect, gauss_integral};

/// Floor used when an expectation needs score derivatives at zero smoothing
/// variance.
const MU_EVAL_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum SeError {
    #[error("mu_z = {mu_z} outside [0, {mu_z_init}]")]
    DomainError { mu_z: f64, mu_z_init: f64 },
    #[error("monotonicity violated at iteration {iteration}: {prev} -> {next} on {branch:?} branch")]
    MonotonicityViolation {
        iteration: usize,
        prev: f64,
        next: f64,
        branch: Branch,
    },
}

/// Distribution of the scale factors in the factorized matrix model. `Unit`
/// is the degenerate `s = 1` case used by all the stock experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ScaleModel {
    #[default]
    Unit,
    Discrete {
        atoms: Vec<(f64, f64)>,
    },
}

impl ScaleModel {
    pub fn discrete(atoms: Vec<(f64, f64)>) -> Self {
        assert!(!atoms.is_empty());
        let total: f64 = atoms.iter().map(|&(_, w)| w).sum();
        assert!((total - 1.0).abs() <= 1e-12, "weights must sum to 1");
        assert!(atoms.iter().all(|&(s, w)| s > 0.0 && w >= 0.0));
        ScaleModel::Discrete { atoms }
    }

    pub fn atoms(&self) -> Vec<(f64, f64)> {
        match self {
            ScaleModel::Unit => vec![(1.0, 1.0)],
            ScaleModel::Discrete { atoms } => atoms.clone(),
        }
    }

    pub fn mean_s(&self) -> f64 {
        self.atoms().iter().map(|&(s, w)| s * w).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Branch {
    Hi,
    Lo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ExpectationMethod {
    Quadrature { node_count: usize, truncation_radius: f64 },
    MonteCarlo { samples: usize, seed: u64 },
}

impl Default for ExpectationMethod {
    fn default() -> Self {
        // Gauss-Legendre node count per integration panel; 96 nodes give
        // spectral accuracy on the smooth integrands below.
        ExpectationMethod::Quadrature {
            node_count: 96,
            truncation_radius: 8.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SeConfig {
    pub beta: f64,
    pub prior: PriorModel,
    pub channel: OutputChannelModel,
    pub scale: ScaleModel,
    pub max_iterations: usize,
    pub fixed_point_tolerance: f64,
    pub expectation_method: ExpectationMethod,
}

impl SeConfig {
    pub fn new(beta: f64, prior: PriorModel, channel: OutputChannelModel) -> Self {
        assert!(beta > 0.0 && beta.is_finite(), "beta must be positive");
        Self {
            beta,
            prior,
            channel,
            scale: ScaleModel::Unit,
            max_iterations: 100,
            fixed_point_tolerance: 1e-9,
            expectation_method: ExpectationMethod::default(),
        }
    }

    /// Gauss node count and truncation radius for the expectation
    /// quadratures.
    fn quad_params(&self) -> (usize, f64) {
        match &self.expectation_method {
            ExpectationMethod::Quadrature {
                node_count,
                truncation_radius,
            } => (*node_count, *truncation_radius),
            ExpectationMethod::MonteCarlo { .. } => (96, 8.0),
        }
    }
}

/// Trajectory of one SE branch. `mu_x[t]` holds the per-scale-atom input
/// error variances after `t` iterations; index 0 is the initial condition.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeTrajectory {
    pub branch: Branch,
    pub mu_z: Vec<f64>,
    pub mu_q: Vec<f64>,
    pub mu_x: Vec<Vec<f64>>,
    pub mu_z_init: f64,
    pub converged: bool,
    pub fixed_point_mu_z: f64,
}

impl SeTrajectory {
    /// Scale-averaged input error variance after `t` iterations.
    pub fn mu_x_mean(&self, t: usize, scale: &ScaleModel) -> f64 {
        self.mu_x[t]
            .iter()
            .zip(scale.atoms())
            .map(|(&mx, (_, w))| w * mx)
            .sum()
    }
}

/// `mu_z(1) = beta * E[s] * var(x)`.
pub fn mu_z_init(config: &SeConfig) -> f64 {
    config.beta * config.scale.mean_s() * config.prior.variance()
}

/// Input-node MSE function: returns the scale-averaged
/// `Ein_bar(mu) = E[s * E_in(q, mu/s)]` and the per-scale-atom values
/// `E[E_in(q, mu/s) | s]`.
pub fn mse_in_bar(mu_q: f64, config: &SeConfig) -> (f64, Vec<f64>) {
    let atoms = config.scale.atoms();
    let per_scale: Vec<f64> = atoms
        .iter()
        .map(|&(s, _)| mse_in_unit(mu_q / s, config))
        .collect();
    let avg = atoms
        .iter()
        .zip(&per_scale)
        .map(|(&(s, w), &e)| w * s * e)
        .sum();
    (avg, per_scale)
}

/// `E[E_in(q, mu)]` with `q = x + N(0, mu)`, unit scale.
fn mse_in_unit(mu: f64, config: &SeConfig) -> f64 {
    if mu == 0.0 {
        return 0.0; // perfect observation
    }
    if mu.is_infinite() {
        return config.prior.variance();
    }
    if let PriorModel::Gaussian { variance, .. } = &config.prior {
        // E_in is constant in q for the conjugate pair.
        return variance * mu / (variance + mu);
    }
    match &config.expectation_method {
        ExpectationMethod::MonteCarlo { samples, seed } => {
            let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x5eed_1234);
            let mut acc = 0.0;
            for _ in 0..*samples {
                let x = config.prior.sample(&mut rng);
                let v: f64 = rand::Rng::sample::<f64, _>(&mut rng, rand_distr::StandardNormal);
                let q = x + v * mu.sqrt();
                acc += posterior_moments(q, mu, &config.prior).unwrap().1;
            }
            acc / *samples as f64
        }
        ExpectationMethod::Quadrature { .. } => {
            // E[E_in(x + v, mu)] split over the prior's components so each
            // Gauss panel sees a single-scale smooth integrand: the noise v
            // lives on scale sqrt(mu), the slab on its own deviation.
            let (n, r) = config.quad_params();
            let sd_v = mu.sqrt();
            let mut acc = 0.0;
            for (a, w) in config.prior.atoms() {
                acc += w
                    * gauss_expect(sd_v, r, n, 4, |v| {
                        posterior_moments(a + v, mu, &config.prior).unwrap().1
                    });
            }
            if let Some((w_c, m, v_c)) = config.prior.continuous_part() {
                // The outer integrand inherits features on the noise scale
                // sqrt(mu), which can be much finer than the slab deviation;
                // a fixed panel count keeps the map smooth in mu while
                // resolving that scale.
                acc += w_c
                    * gauss_expect(v_c.sqrt(), r, n, 12, |x| {
                        gauss_expect(sd_v, r, n, 4, |v| {
                            posterior_moments(m + x + v, mu, &config.prior).unwrap().1
                        })
                    });
            }
            acc
        }
    }
}

/// Output-node MSE function `Eout_bar(mu) = 1 / E[D2(y, zhat, mu)]` with
/// `(z, zhat)` jointly Gaussian: `zhat ~ N(0, mu_z_init - mu)`,
/// `z = zhat + N(0, mu)`, `y ~ p(y|z)`.
pub fn mse_out_bar(mu_z: f64, mu_z_init: f64, config: &SeConfig) -> Result<f64, SeError> {
    if mu_z < 0.0 || mu_z > mu_z_init * (1.0 + 1e-12) + 1e-300 {
        return Err(SeError::DomainError { mu_z, mu_z_init });
    }
    let mu_z = mu_z.min(mu_z_init);
    if let OutputChannelModel::Awgn { noise_variance } = &config.channel {
        // D2 is the constant 1/(mu_w + mu).
        return Ok(noise_variance + mu_z);
    }
    if let ExpectationMethod::MonteCarlo { samples, seed } = &config.expectation_method {
        return Ok(1.0 / mean_d2_monte_carlo(mu_z, mu_z_init, config, *samples, *seed));
    }
    Ok(1.0 / mean_d2_quadrature(mu_z, mu_z_init, config))
}

fn mean_d2_monte_carlo(
    mu_z: f64,
    mu_z_init: f64,
    config: &SeConfig,
    samples: usize,
    seed: u64,
) -> f64 {
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x0075_eed5);
    let mu_eval = mu_z.max(MU_EVAL_FLOOR);
    let sd_zhat = (mu_z_init - mu_z).max(0.0).sqrt();
    let sd_e = mu_z.sqrt();
    let mut acc = 0.0;
    for _ in 0..samples {
        let g1: f64 = rand::Rng::sample::<f64, _>(&mut rng, rand_distr::StandardNormal);
        let g2: f64 = rand::Rng::sample::<f64, _>(&mut rng, rand_distr::StandardNormal);
        let zhat = sd_zhat * g1;
        let z = zhat + sd_e * g2;
        let y = config.channel.sample_y(z, &mut rng);
        acc += score_derivatives(y, zhat, mu_eval, &config.channel).unwrap().d2;
    }
    acc / samples as f64
}

fn mean_d2_quadrature(mu_z: f64, mu_z_init: f64, config: &SeConfig) -> f64 {
    let (n, r) = config.quad_params();
    let mu_eval = mu_z.max(MU_EVAL_FLOOR);
    match &config.channel {
        OutputChannelModel::Awgn { noise_variance } => 1.0 / (noise_variance + mu_z),
        OutputChannelModel::BoundedUniform { half_width } => {
            // The channel is translation invariant, so only v = y - zhat
            // matters; write v = w + e with w ~ U(-delta, delta) and
            // e ~ N(0, mu). D2 concentrates in O(sqrt(mu)) boundary layers
            // at the box edges, so the w-integral is paneled there.
            let delta = *half_width;
            let layer = r * mu_eval.sqrt();
            let e_mean_d2 = |w: f64| {
                gauss_expect(mu_eval.sqrt(), r, n, 4, |e| {
                    score_derivatives(w + e, 0.0, mu_eval, &config.channel)
                        .unwrap()
                        .d2
                })
            };
            let panels: Vec<(f64, f64)> = if layer < delta {
                vec![
                    (-delta, -delta + layer),
                    (-delta + layer, delta - layer),
                    (delta - layer, delta),
                ]
            } else {
                vec![(-delta, delta)]
            };
            panels
                .iter()
                .map(|&(lo, hi)| gauss_integral(lo, hi, n, e_mean_d2))
                .sum::<f64>()
                / (2.0 * delta)
        }
        OutputChannelModel::Logistic { .. } => {
            // Binary output: sum over y exactly, integrate zhat over its
            // Gaussian marginal.
            let var_zhat = (mu_z_init - mu_z).max(0.0);
            let expect_at = |zhat: f64| -> f64 {
                [0.0, 1.0]
                    .iter()
                    .map(|&y| {
                        let l = output_likelihood(y, zhat, mu_eval, &config.channel).unwrap();
                        l * score_derivatives(y, zhat, mu_eval, &config.channel).unwrap().d2
                    })
                    .sum()
            };
            if var_zhat < 1e-14 {
                expect_at(0.0)
            } else {
                gauss_expect(var_zhat.sqrt(), r, n, 4, expect_at)
            }
        }
    }
}

fn g_map(mu_z: f64, mu_init: f64, config: &SeConfig) -> Result<f64, SeError> {
    let mu_q = mse_out_bar(mu_z, mu_init, config)?;
    let (e_in, _) = mse_in_bar(mu_q, config);
    Ok(config.beta * e_in)
}

/// Iterate the SE recursion from the given branch's initial condition.
pub fn run_se(config: &SeConfig, branch: Branch) -> Result<SeTrajectory, SeError> {
    let mu_init = mu_z_init(config);
    let slack = 1e-12 * (1.0 + mu_init);
    let mut mu_z = match branch {
        Branch::Hi => mu_init,
        Branch::Lo => 0.0,
    };
    let init_mu_x = match branch {
        Branch::Hi => config.prior.variance(),
        Branch::Lo => 0.0,
    };
    let n_scales = config.scale.atoms().len();
    let mut traj = SeTrajectory {
        branch,
        mu_z: vec![mu_z],
        mu_q: Vec::new(),
        mu_x: vec![vec![init_mu_x; n_scales]],
        mu_z_init: mu_init,
        converged: false,
        fixed_point_mu_z: mu_z,
    };
    for iteration in 0..config.max_iterations {
        let mu_q = mse_out_bar(mu_z, mu_init, config)?;
        let (e_in, per_scale) = mse_in_bar(mu_q, config);
        let mut next = (config.beta * e_in).clamp(0.0, mu_init);
        // The exact map is monotone; drift against the branch direction can
        // only be expectation-evaluation error. Tolerate it up to the
        // convergence tolerance (clamping to keep the recorded trajectory
        // monotone), fail beyond that so noisy Monte Carlo evaluations are
        // reported rather than silently flattened.
        let drift = match branch {
            Branch::Hi => next - mu_z,
            Branch::Lo => mu_z - next,
        };
        if drift > config.fixed_point_tolerance.max(slack) {
            return Err(SeError::MonotonicityViolation {
                iteration,
                prev: mu_z,
                next,
                branch,
            });
        }
        let stalled = drift > 0.0;
        if stalled {
            next = mu_z;
        }
        traj.mu_q.push(mu_q);
        traj.mu_x.push(per_scale);
        traj.mu_z.push(next);
        let delta = (next - mu_z).abs();
        mu_z = next;
        if stalled || delta < config.fixed_point_tolerance {
            traj.converged = true;
            break;
        }
    }
    traj.fixed_point_mu_z = polish_fixed_point(mu_z, mu_init, config)?;
    Ok(traj)
}

/// Bisection refinement of `mu - G(mu)` in a small bracket around the
/// iteration's last value.
fn polish_fixed_point(mu_z: f64, mu_init: f64, config: &SeConfig) -> Result<f64, SeError> {
    let tol = config.fixed_point_tolerance;
    let mut lo = (mu_z - 10.0 * tol).max(0.0);
    let mut hi = (mu_z + 10.0 * tol).min(mu_init);
    let f = |mu: f64| -> Result<f64, SeError> { Ok(mu - g_map(mu, mu_init, config)?) };
    let flo = f(lo)?;
    let fhi = f(hi)?;
    if flo == 0.0 {
        return Ok(lo);
    }
    if fhi == 0.0 {
        return Ok(hi);
    }
    if flo.signum() == fhi.signum() {
        return Ok(mu_z);
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        let fm = f(mid)?;
        if fm == 0.0 || hi - lo < tol * 1e-3 {
            return Ok(mid);
        }
        if fm.signum() == flo.signum() {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// SE-predicted normalized squared error in dB per iteration,
/// `10 log10(E_s[mu_x(t, s)] / var(x))`. Values are floored at -100 dB so a
/// zero-error genie start stays finite.
pub fn predicted_nse_db(trajectory: &SeTrajectory, config: &SeConfig) -> Vec<f64> {
    let var = config.prior.variance();
    trajectory
        .mu_x
        .iter()
        .enumerate()
        .map(|(t, _)| {
            let mx = trajectory.mu_x_mean(t, &config.scale);
            nse_db_floor(mx / var)
        })
        .collect()
}

pub(crate) fn nse_db_floor(ratio: f64) -> f64 {
    if ratio <= 1e-10 {
        -100.0
    } else {
        10.0 * ratio.log10()
    }
}

/// Fixed-point summary for both branches.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FixedPointSummary {
    pub beta: f64,
    pub mu_z_hi: f64,
    pub mu_z_lo: f64,
    pub unique: bool,
}

pub fn fixed_point_summary(config: &SeConfig) -> Result<(SeTrajectory, SeTrajectory, FixedPointSummary), SeError> {
    let hi = run_se(config, Branch::Hi)?;
    let lo = run_se(config, Branch::Lo)?;
    let tol = 100.0 * config.fixed_point_tolerance + 1e-6 * (1.0 + hi.mu_z_init);
    let summary = FixedPointSummary {
        beta: config.beta,
        mu_z_hi: hi.fixed_point_mu_z,
        mu_z_lo: lo.fixed_point_mu_z,
        unique: (hi.fixed_point_mu_z - lo.fixed_point_mu_z).abs() <= tol,
    };
    Ok((hi, lo, summary))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar_io::linspace;
    use rand::Rng;

    fn awgn_gaussian_config(beta: f64, sigma2: f64, mu_w: f64) -> SeConfig {
        SeConfig::new(
            beta,
            PriorModel::gaussian(0.0, sigma2),
            OutputChannelModel::awgn(mu_w),
        )
    }

    #[test]
    fn mu_z_init_examples() {
        let c = SeConfig::new(
            2.0,
            PriorModel::gauss_bernoulli_with_variance(0.1, 10.0),
            OutputChannelModel::awgn(1.0),
        );
        assert!((mu_z_init(&c) - 2.0).abs() < 1e-15);

        let c = awgn_gaussian_config(1.0, 3.0, 1.0);
        assert!((mu_z_init(&c) - 3.0).abs() < 1e-15);

        let mut c = awgn_gaussian_config(0.5, 1.0, 1.0);
        c.scale = ScaleModel::discrete(vec![(1.0, 0.5), (3.0, 0.5)]);
        assert!((mu_z_init(&c) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn mse_in_gaussian_closed_form() {
        let c = awgn_gaussian_config(1.0, 1.0, 1.0);
        let (e, per) = mse_in_bar(1.0, &c);
        assert!((e - 0.5).abs() < 1e-12);
        assert_eq!(per.len(), 1);
    }

    #[test]
    fn mse_in_limits() {
        let c = SeConfig::new(
            1.0,
            PriorModel::gauss_bernoulli_with_variance(0.1, 10.0),
            OutputChannelModel::awgn(1.0),
        );
        let (e, _) = mse_in_bar(f64::INFINITY, &c);
        assert!((e - 1.0).abs() < 1e-12);
        let (e, _) = mse_in_bar(0.0, &c);
        assert_eq!(e, 0.0);
    }

    #[test]
    fn mse_in_matches_monte_carlo_oracle() {
        let c = SeConfig::new(
            1.0,
            PriorModel::gauss_bernoulli_with_variance(0.1, 10.0),
            OutputChannelModel::awgn(1.0),
        );
        let mu = 0.5;
        let (e, _) = mse_in_bar(mu, &c);
        // Independent 10^6-sample Monte Carlo oracle.
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        let n = 1_000_000usize;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let x = c.prior.sample(&mut rng);
            let v: f64 = rng.sample::<f64, _>(rand_distr::StandardNormal);
            let ein = posterior_moments(x + v * mu.sqrt(), mu, &c.prior).unwrap().1;
            sum += ein;
            sumsq += ein * ein;
        }
        let mean = sum / n as f64;
        let se = ((sumsq / n as f64 - mean * mean) / n as f64).sqrt();
        assert!(
            (e - mean).abs() <= 3.0 * se,
            "quadrature {e} vs MC {mean} +- {se}"
        );
    }

    #[test]
    fn mse_out_awgn_closed_form() {
        let c = awgn_gaussian_config(1.0, 1.0, 0.7);
        assert!((mse_out_bar(0.3, 2.0, &c).unwrap() - 1.0).abs() < 1e-15);
        assert!((mse_out_bar(0.0, 2.0, &c).unwrap() - 0.7).abs() < 1e-15);
        assert!(mse_out_bar(3.0, 2.0, &c).is_err());
    }

    #[test]
    fn mse_out_bounded_matches_monte_carlo_oracle() {
        let c = SeConfig::new(
            1.0,
            PriorModel::gaussian(0.0, 1.0),
            OutputChannelModel::bounded_uniform(1.0),
        );
        let (mu_z, mu_init) = (0.3, 2.0);
        let quad = mse_out_bar(mu_z, mu_init, &c).unwrap();
        // Independent 10^6-sample Monte Carlo of E[D2].
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let n = 1_000_000usize;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let zhat = rng.sample::<f64, _>(rand_distr::StandardNormal) * (mu_init - mu_z).sqrt();
            let z = zhat + rng.sample::<f64, _>(rand_distr::StandardNormal) * mu_z.sqrt();
            let y = c.channel.sample_y(z, &mut rng);
            let d2 = score_derivatives(y, zhat, mu_z, &c.channel).unwrap().d2;
            sum += d2;
            sumsq += d2 * d2;
        }
        let mean = sum / n as f64;
        let se = ((sumsq / n as f64 - mean * mean) / n as f64).sqrt();
        assert!(
            (1.0 / quad - mean).abs() <= 3.0 * se,
            "quad E[D2] {} vs MC {mean} +- {se}",
            1.0 / quad
        );
    }

    #[test]
    fn awgn_gaussian_fixed_point_analytic() {
        // mu = beta sigma^2 (mu_w + mu) / (sigma^2 + mu_w + mu); for
        // beta = sigma^2 = mu_w = 1 this is mu^2 + mu - 1 = 0, with positive
        // root (sqrt(5) - 1)/2.
        let root = (5f64.sqrt() - 1.0) / 2.0;
        let c = awgn_gaussian_config(1.0, 1.0, 1.0);
        let hi = run_se(&c, Branch::Hi).unwrap();
        let lo = run_se(&c, Branch::Lo).unwrap();
        assert!(hi.converged && lo.converged);
        assert!(
            (hi.fixed_point_mu_z - root).abs() < 1e-6,
            "{}",
            hi.fixed_point_mu_z
        );
        assert!((lo.fixed_point_mu_z - root).abs() < 1e-6);
    }

    #[test]
    fn lo_branch_first_mu_q_is_noise_floor() {
        let c = awgn_gaussian_config(1.0, 1.0, 0.4);
        let lo = run_se(&c, Branch::Lo).unwrap();
        assert!((lo.mu_q[0] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn hi_lo_unique_for_gauss_bernoulli_awgn() {
        // SNR0 = 10 dB with unit prior variance and unit column energy gives
        // mu_w = 0.1.
        let c = SeConfig::new(
            2.0,
            PriorModel::gauss_bernoulli(0.1),
            OutputChannelModel::awgn(0.1),
        );
        let (hi, lo, summary) = fixed_point_summary(&c).unwrap();
        assert!(hi.converged && lo.converged);
        assert!(summary.unique, "hi {} vs lo {}", summary.mu_z_hi, summary.mu_z_lo);
    }

    #[test]
    fn branch_monotonicity_and_bounds() {
        let configs: Vec<SeConfig> = vec![
            awgn_gaussian_config(2.0, 1.0, 0.1),
            SeConfig::new(
                1.5,
                PriorModel::gauss_bernoulli(0.2),
                OutputChannelModel::awgn(0.3),
            ),
            SeConfig::new(
                0.5,
                PriorModel::gaussian(0.0, 1.0),
                OutputChannelModel::bounded_uniform(0.5),
            ),
            SeConfig::new(
                1.0,
                PriorModel::gaussian(0.0, 1.0),
                OutputChannelModel::logistic(1.0),
            ),
        ];
        for c in &configs {
            let hi = run_se(c, Branch::Hi).unwrap();
            let lo = run_se(c, Branch::Lo).unwrap();
            for w in hi.mu_z.windows(2) {
                assert!(w[1] <= w[0] + 1e-12 * (1.0 + hi.mu_z_init));
            }
            for w in lo.mu_z.windows(2) {
                assert!(w[1] >= w[0] - 1e-12 * (1.0 + lo.mu_z_init));
            }
            for &m in &hi.mu_z {
                assert!(m >= 0.0 && m <= hi.mu_z_init + 1e-12);
            }
            assert!(lo.fixed_point_mu_z <= hi.fixed_point_mu_z + 1e-9);
        }
    }

    #[test]
    fn g_map_monotone_on_grid() {
        let configs = vec![
            SeConfig::new(
                2.0,
                PriorModel::gauss_bernoulli(0.1),
                OutputChannelModel::awgn(0.1),
            ),
            SeConfig::new(
                0.5,
                PriorModel::gaussian(0.0, 1.0),
                OutputChannelModel::bounded_uniform(0.6),
            ),
        ];
        for c in &configs {
            let mi = mu_z_init(c);
            let grid = linspace(1e-6 * mi, mi, 25);
            let vals: Vec<f64> = grid.iter().map(|&m| g_map(m, mi, c).unwrap()).collect();
            for w in vals.windows(2) {
                assert!(w[1] >= w[0] - 1e-9 * (1.0 + mi), "G not monotone: {vals:?}");
            }
            for &v in &vals {
                assert!(v >= 0.0 && v <= mi * (1.0 + 1e-9));
            }
        }
    }

    #[test]
    fn predicted_nse_starts_at_zero_db_and_decreases() {
        let c = SeConfig::new(
            2.0,
            PriorModel::gauss_bernoulli(0.1),
            OutputChannelModel::awgn(0.1),
        );
        let hi = run_se(&c, Branch::Hi).unwrap();
        let nse = predicted_nse_db(&hi, &c);
        assert!(nse[0].abs() < 1e-12);
        for w in nse.windows(2) {
            assert!(w[1] <= w[0] + 1e-9);
        }
    }

    #[test]
    fn predicted_nse_fixed_point_hand_value() {
        // beta=1, sigma^2=1, mu_w=1: with beta = 1, mu_x* = mu_z* =
        // (sqrt(5)-1)/2, so the NSE settles at 10 log10 of that.
        let root = (5f64.sqrt() - 1.0) / 2.0;
        let c = awgn_gaussian_config(1.0, 1.0, 1.0);
        let hi = run_se(&c, Branch::Hi).unwrap();
        let nse = predicted_nse_db(&hi, &c);
        let last = *nse.last().unwrap();
        let expect = 10.0 * root.log10();
        assert!((last - expect).abs() < 1e-4, "{last} vs {expect}");
    }
}
