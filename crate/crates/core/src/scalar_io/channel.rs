//! Output channels, their Gaussian-smoothed likelihoods, and score
//! derivatives.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    linspace, log_norm_cdf_diff, norm_pdf, trapezoid, QuadratureSpec,
    ScalarIoError, D2_FLOOR,
};

/// Separable measurement channel `p(y|z)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OutputChannelModel {
    /// `y = z + w`, `w ~ N(0, noise_variance)`.
    Awgn { noise_variance: f64 },
    /// `y = z + w`, `w ~ U[-half_width, half_width]`.
    BoundedUniform { half_width: f64 },
    /// Binary output with `P(y=1|z) = 1 / (1 + offset * exp(-z))`.
    Logistic { offset: f64 },
}

/// First two derivatives of the negative log smoothed likelihood.
/// `d2` is clamped below at [`D2_FLOOR`]; `saturated` records when the clamp
/// was active.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreDerivatives {
    pub d1: f64,
    pub d2: f64,
    pub saturated: bool,
}

impl OutputChannelModel {
    pub fn awgn(noise_variance: f64) -> Self {
        assert!(
            noise_variance > 0.0 && noise_variance.is_finite(),
            "noise variance must be positive"
        );
        OutputChannelModel::Awgn { noise_variance }
    }

    pub fn bounded_uniform(half_width: f64) -> Self {
        assert!(
            half_width > 0.0 && half_width.is_finite(),
            "half-width must be positive"
        );
        OutputChannelModel::BoundedUniform { half_width }
    }

    pub fn logistic(offset: f64) -> Self {
        assert!(offset > 0.0 && offset.is_finite(), "offset must be positive");
        OutputChannelModel::Logistic { offset }
    }

    pub fn validate(&self) -> Result<(), String> {
        let ok = match self {
            OutputChannelModel::Awgn { noise_variance } => {
                *noise_variance > 0.0 && noise_variance.is_finite()
            }
            OutputChannelModel::BoundedUniform { half_width } => {
                *half_width > 0.0 && half_width.is_finite()
            }
            OutputChannelModel::Logistic { offset } => *offset > 0.0 && offset.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(format!("invalid channel parameters: {self:?}"))
        }
    }

    pub fn has_closed_form_scores(&self) -> bool {
        !matches!(self, OutputChannelModel::Logistic { .. })
    }

    /// Conditional density (or probability mass, for `Logistic`) of `y`
    /// given the exact channel input `z`.
    pub fn conditional_density(&self, y: f64, z: f64) -> f64 {
        match self {
            OutputChannelModel::Awgn { noise_variance } => norm_pdf(y - z, *noise_variance),
            OutputChannelModel::BoundedUniform { half_width } => {
                if (y - z).abs() <= *half_width {
                    0.5 / half_width
                } else {
                    0.0
                }
            }
            OutputChannelModel::Logistic { offset } => {
                let p1 = 1.0 / (1.0 + offset * (-z).exp());
                if y >= 0.5 {
                    p1
                } else {
                    1.0 - p1
                }
            }
        }
    }

    pub fn sample_y<R: Rng + ?Sized>(&self, z: f64, rng: &mut R) -> f64 {
        match self {
            OutputChannelModel::Awgn { noise_variance } => {
                z + rng.sample::<f64, _>(rand_distr::StandardNormal) * noise_variance.sqrt()
            }
            OutputChannelModel::BoundedUniform { half_width } => {
                z + rng.gen_range(-half_width..=*half_width)
            }
            OutputChannelModel::Logistic { offset } => {
                let p1 = 1.0 / (1.0 + offset * (-z).exp());
                if rng.gen::<f64>() < p1 {
                    1.0
                } else {
                    0.0
                }
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

/// Smoothed likelihood `p(y | zhat, mu) = int p(y|z) phi(z - zhat; mu) dz`.
pub fn output_likelihood(
    y: f64,
    zhat: f64,
    mu: f64,
    channel: &OutputChannelModel,
) -> Result<f64, ScalarIoError> {
    check_mu(mu)?;
    let p = match channel {
        OutputChannelModel::Awgn { noise_variance } => norm_pdf(y - zhat, noise_variance + mu),
        OutputChannelModel::BoundedUniform { half_width } => {
            let s = mu.sqrt();
            let a = (y + half_width - zhat) / s;
            let b = (y - half_width - zhat) / s;
            log_norm_cdf_diff(a, b).exp() / (2.0 * half_width)
        }
        OutputChannelModel::Logistic { .. } => {
            logistic_likelihood(y, zhat, mu, channel, &QuadratureSpec::default())
        }
    };
    if p.is_finite() && p >= 0.0 {
        Ok(p)
    } else {
        Err(ScalarIoError::LikelihoodUnderflow { y, zhat, mu })
    }
}

fn logistic_likelihood(
    y: f64,
    zhat: f64,
    mu: f64,
    channel: &OutputChannelModel,
    spec: &QuadratureSpec,
) -> f64 {
    let s = mu.sqrt();
    let r = spec.truncation_radius;
    let xs = linspace(zhat - r * s, zhat + r * s, spec.node_count);
    trapezoid(&xs, |z| channel.conditional_density(y, z) * norm_pdf(z - zhat, mu))
}

/// Score derivatives `D_r(y, zhat, mu) = -d^r/dzhat^r log p(y|zhat, mu)` for
/// `r = 1, 2`.
pub fn score_derivatives(
    y: f64,
    zhat: f64,
    mu: f64,
    channel: &OutputChannelModel,
) -> Result<ScoreDerivatives, ScalarIoError> {
    check_mu(mu)?;
    match channel {
        OutputChannelModel::Awgn { noise_variance } => {
            let total = noise_variance + mu;
            Ok(clamped(( zhat - y) / total, 1.0 / total))
        }
        OutputChannelModel::BoundedUniform { half_width } => {
            let s = mu.sqrt();
            let a = (y + half_width - zhat) / s;
            let b = (y - half_width - zhat) / s;
            // Ratios phi(.)/(Phi(a)-Phi(b)) through the stable log difference.
            let log_l = log_norm_cdf_diff(a, b);
            // Analytic log pdf: phi(a) itself underflows past |a| ~ 38.
            let log_phi = |x: f64| -0.5 * (x * x + super::LN_2PI);
            let ra = (log_phi(a) - log_l).exp();
            let rb = (log_phi(b) - log_l).exp();
            // L'/L = (rb - ra)/sqrt(mu); L''/L = (-a*ra + b*rb)/mu.
            let d1 = (ra - rb) / s;
            let d2 = d1 * d1 - (-a * ra + b * rb) / mu;
            if !(d1.is_finite() && d2.is_finite()) {
                return Err(ScalarIoError::LikelihoodUnderflow { y, zhat, mu });
            }
            Ok(clamped(d1, d2))
        }
        OutputChannelModel::Logistic { .. } => {
            // Differentiating L(zhat) = Int p(y|z) phi(z - zhat; mu) dz under
            // the integral gives the derivatives exactly in terms of the
            // posterior moments of z: D1 = -m1/mu, D2 = 1/mu - var(z)/mu^2.
            // (A finite-difference log likelihood would carry roundoff noise
            // amplified by 1/h^2.)
            let spec = QuadratureSpec::default();
            let s = mu.sqrt();
            let r = spec.truncation_radius;
            let xs = linspace(zhat - r * s, zhat + r * s, spec.node_count);
            let mut l = 0.0;
            let mut t1 = 0.0;
            let mut t2 = 0.0;
            let mut prev: Option<(f64, f64, f64, f64)> = None;
            for &z in &xs {
                let g = channel.conditional_density(y, z) * norm_pdf(z - zhat, mu);
                let d = z - zhat;
                if let Some((pz, pg, pgd, pgdd)) = prev {
                    let h = z - pz;
                    l += 0.5 * h * (g + pg);
                    t1 += 0.5 * h * (g * d + pgd);
                    t2 += 0.5 * h * (g * d * d + pgdd);
                }
                prev = Some((z, g, g * d, g * d * d));
            }
            if l <= 0.0 {
                return Err(ScalarIoError::LikelihoodUnderflow { y, zhat, mu });
            }
            let m1 = t1 / l;
            let var = (t2 / l - m1 * m1).max(0.0);
            let d1 = -m1 / mu;
            let d2 = 1.0 / mu - var / (mu * mu);
            if !(d1.is_finite() && d2.is_finite()) {
                return Err(ScalarIoError::LikelihoodUnderflow { y, zhat, mu });
            }
            Ok(clamped(d1, d2))
        }
    }
}

fn clamped(d1: f64, d2: f64) -> ScoreDerivatives {
    if d2 < D2_FLOOR {
        ScoreDerivatives {
            d1,
            d2: D2_FLOOR,
            saturated: true,
        }
    } else {
        ScoreDerivatives {
            d1,
            d2,
            saturated: false,
        }
    }
}
