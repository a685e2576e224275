//! Input priors and the posterior-moment functions `F_in`, `E_in`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    log_norm_pdf, merged_grid, norm_pdf, trapezoid, QuadratureSpec, ScalarIoError,
};

/// Scalar prior on the components of the input vector.
///
/// The prior's mean and variance are computed analytically at construction.
/// Model objects are immutable; all evaluation methods are pure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PriorModel {
    /// Spike-slab mixture: zero with probability `1 - rho`, otherwise
    /// `N(0, sigma2_on)`.
    GaussBernoulli { rho: f64, sigma2_on: f64 },
    Gaussian { mean: f64, variance: f64 },
    /// Finite list of `(value, weight)` atoms.
    Discrete { atoms: Vec<(f64, f64)> },
}

impl PriorModel {
    /// Sparse prior with on-variance `1/rho`, giving unit prior variance.
    pub fn gauss_bernoulli(rho: f64) -> Self {
        Self::gauss_bernoulli_with_variance(rho, 1.0 / rho)
    }

    pub fn gauss_bernoulli_with_variance(rho: f64, sigma2_on: f64) -> Self {
        assert!(rho > 0.0 && rho <= 1.0, "rho must lie in (0, 1]");
        assert!(
            sigma2_on > 0.0 && sigma2_on.is_finite(),
            "on-variance must be positive"
        );
        PriorModel::GaussBernoulli { rho, sigma2_on }
    }

    pub fn gaussian(mean: f64, variance: f64) -> Self {
        assert!(variance > 0.0 && variance.is_finite(), "variance must be positive");
        PriorModel::Gaussian { mean, variance }
    }

    pub fn discrete(atoms: Vec<(f64, f64)>) -> Self {
        assert!(!atoms.is_empty(), "discrete prior needs at least one atom");
        let total: f64 = atoms.iter().map(|&(_, w)| w).sum();
        assert!(
            (total - 1.0).abs() <= 1e-12,
            "discrete weights must sum to 1, got {total}"
        );
        assert!(
            atoms.iter().all(|&(a, w)| a.is_finite() && w >= 0.0),
            "atoms must be finite with non-negative weights"
        );
        PriorModel::Discrete { atoms }
    }

    /// Validate the invariants of a deserialized model.
    pub fn validate(&self) -> Result<(), String> {
        match self {
            PriorModel::GaussBernoulli { rho, sigma2_on } => {
                if !(*rho > 0.0 && *rho <= 1.0) {
                    return Err(format!("rho must lie in (0, 1], got {rho}"));
                }
                if !(*sigma2_on > 0.0 && sigma2_on.is_finite()) {
                    return Err(format!("on-variance must be positive, got {sigma2_on}"));
                }
            }
            PriorModel::Gaussian { variance, .. } => {
                if !(*variance > 0.0 && variance.is_finite()) {
                    return Err(format!("variance must be positive, got {variance}"));
                }
            }
            PriorModel::Discrete { atoms } => {
                if atoms.is_empty() {
                    return Err("discrete prior needs at least one atom".into());
                }
                let total: f64 = atoms.iter().map(|&(_, w)| w).sum();
                if (total - 1.0).abs() > 1e-12 {
                    return Err(format!("discrete weights must sum to 1, got {total}"));
                }
            }
        }
        Ok(())
    }

    pub fn mean(&self) -> f64 {
        match self {
            PriorModel::GaussBernoulli { .. } => 0.0,
            PriorModel::Gaussian { mean, .. } => *mean,
            PriorModel::Discrete { atoms } => atoms.iter().map(|&(a, w)| w * a).sum(),
        }
    }

    pub fn variance(&self) -> f64 {
        match self {
            PriorModel::GaussBernoulli { rho, sigma2_on } => rho * sigma2_on,
            PriorModel::Gaussian { variance, .. } => *variance,
            PriorModel::Discrete { atoms } => {
                let m = self.mean();
                atoms.iter().map(|&(a, w)| w * (a - m) * (a - m)).sum()
            }
        }
    }

    pub fn second_moment(&self) -> f64 {
        let m = self.mean();
        self.variance() + m * m
    }

    /// Point masses of the prior as `(value, weight)` pairs.
    pub(crate) fn atoms(&self) -> Vec<(f64, f64)> {
        match self {
            PriorModel::GaussBernoulli { rho, .. } => vec![(0.0, 1.0 - rho)],
            PriorModel::Gaussian { .. } => vec![],
            PriorModel::Discrete { atoms } => atoms.clone(),
        }
    }

    /// Absolutely continuous part as `(weight, mean, variance)` of a Gaussian,
    /// if any.
    pub(crate) fn continuous_part(&self) -> Option<(f64, f64, f64)> {
        match self {
            PriorModel::GaussBernoulli { rho, sigma2_on } => Some((*rho, 0.0, *sigma2_on)),
            PriorModel::Gaussian { mean, variance } => Some((1.0, *mean, *variance)),
            PriorModel::Discrete { .. } => None,
        }
    }

    /// Marginal density of `q = x + v`, `v ~ N(0, mu)`, i.e. the normalizer
    /// `A_0(q)` of the posterior.
    pub fn marginal_density(&self, q: f64, mu: f64) -> f64 {
        let mut d = 0.0;
        for (a, w) in self.atoms() {
            d += w * norm_pdf(q - a, mu);
        }
        if let Some((w, m, v)) = self.continuous_part() {
            d += w * norm_pdf(q - m, v + mu);
        }
        d
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            PriorModel::GaussBernoulli { rho, sigma2_on } => {
                if rng.gen::<f64>() < *rho {
                    rng.sample::<f64, _>(rand_distr::StandardNormal) * sigma2_on.sqrt()
                } else {
                    0.0
                }
            }
            PriorModel::Gaussian { mean, variance } => {
                mean + rng.sample::<f64, _>(rand_distr::StandardNormal) * variance.sqrt()
            }
            PriorModel::Discrete { atoms } => {
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                for &(a, w) in atoms {
                    acc += w;
                    if u < acc {
                        return a;
                    }
                }
                atoms.last().unwrap().0
            }
        }
    }
}

fn check_mu(mu: f64) -> Result<(), ScalarIoError> {
    if mu > 0.0 && mu.is_finite() {
        Ok(())
    } else {
        Err(ScalarIoError::NonPositiveVariance(mu))
    }
}

/// Posterior mean and variance `(F_in, E_in)` of `x` under `prior` given the
/// observation `q = x + v`, `v ~ N(0, mu)`.
pub fn posterior_moments(
    q: f64,
    mu: f64,
    prior: &PriorModel,
) -> Result<(f64, f64), ScalarIoError> {
    check_mu(mu)?;
    if !q.is_finite() {
        return Err(ScalarIoError::DegeneratePosterior { q, mu });
    }
    let (mean, var) = match prior {
        PriorModel::Gaussian { mean, variance } => {
            let gain = variance / (variance + mu);
            (mean + gain * (q - mean), gain * mu)
        }
        PriorModel::GaussBernoulli { rho, sigma2_on } => {
            // Conjugate two-component posterior, weights in the log domain.
            let l_on = rho.ln() + log_norm_pdf(q, sigma2_on + mu);
            let l_off = (1.0 - rho).ln() + log_norm_pdf(q, mu);
            let w_on = if *rho >= 1.0 {
                1.0
            } else {
                1.0 / (1.0 + (l_off - l_on).exp())
            };
            let m_on = q * sigma2_on / (sigma2_on + mu);
            let v_on = sigma2_on * mu / (sigma2_on + mu);
            let mean = w_on * m_on;
            let second = w_on * (m_on * m_on + v_on);
            (mean, (second - mean * mean).max(0.0))
        }
        PriorModel::Discrete { atoms } => {
            let logw: Vec<f64> = atoms
                .iter()
                .map(|&(a, w)| if w > 0.0 { w.ln() + log_norm_pdf(q - a, mu) } else { f64::NEG_INFINITY })
                .collect();
            let lmax = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if !lmax.is_finite() {
                return Err(ScalarIoError::DegeneratePosterior { q, mu });
            }
            let mut z = 0.0;
            let mut m1 = 0.0;
            let mut m2 = 0.0;
            for (&(a, _), &lw) in atoms.iter().zip(&logw) {
                let w = (lw - lmax).exp();
                z += w;
                m1 += w * a;
                m2 += w * a * a;
            }
            let mean = m1 / z;
            (mean, (m2 / z - mean * mean).max(0.0))
        }
    };
    if !(mean.is_finite() && var.is_finite()) {
        return Err(ScalarIoError::DegeneratePosterior { q, mu });
    }
    Ok((mean, var))
}

/// `dF_in/dq = E_in(q, mu) / mu`.
pub fn posterior_mean_derivative(
    q: f64,
    mu: f64,
    prior: &PriorModel,
) -> Result<f64, ScalarIoError> {
    let (_, var) = posterior_moments(q, mu, prior)?;
    Ok(var / mu)
}

/// Generic quadrature evaluation of the posterior moments. Atoms contribute
/// exactly; the continuous component is integrated by trapezoid rule on a
/// grid covering both the prior's scale and the likelihood's scale.
pub fn posterior_moments_quadrature(
    q: f64,
    mu: f64,
    prior: &PriorModel,
    spec: &QuadratureSpec,
) -> Result<(f64, f64), ScalarIoError> {
    check_mu(mu)?;
    let mut a0 = 0.0;
    let mut a1 = 0.0;
    let mut a2 = 0.0;
    for (a, w) in prior.atoms() {
        let p = w * norm_pdf(q - a, mu);
        a0 += p;
        a1 += p * a;
        a2 += p * a * a;
    }
    if let Some((w, m, v)) = prior.continuous_part() {
        let r = spec.truncation_radius;
        let xs = merged_grid(&[(m, r * v.sqrt()), (q, r * mu.sqrt())], spec.node_count);
        let dens = |x: f64| w * norm_pdf(x - m, v) * norm_pdf(q - x, mu);
        a0 += trapezoid(&xs, dens);
        a1 += trapezoid(&xs, |x| x * dens(x));
        a2 += trapezoid(&xs, |x| x * x * dens(x));
    }
    if a0 <= 0.0 || !a0.is_finite() {
        return Err(ScalarIoError::DegeneratePosterior { q, mu });
    }
    let mean = a1 / a0;
    Ok((mean, (a2 / a0 - mean * mean).max(0.0)))
}
