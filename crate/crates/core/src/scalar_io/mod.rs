//! Scalar estimation functions for the input and output nodes.
//!
//! The input side provides the posterior mean/variance of a scalar `x` drawn
//! from a prior and observed through additive Gaussian noise. The output side
//! provides the Gaussian-smoothed likelihood of an observation `y` given an
//! estimate of the channel input, together with the first two derivatives of
//! its negative log (the score derivatives `D1`, `D2`). Closed forms are used
//! wherever they exist; a generic quadrature path covers the rest.

mod channel;
mod prior;

pub use channel::{output_likelihood, score_derivatives, OutputChannelModel, ScoreDerivatives};
pub use prior::{
    posterior_mean_derivative, posterior_moments, posterior_moments_quadrature, PriorModel,
};

use thiserror::Error;

/// Lower clamp for the second score derivative. `D2` becomes an inverse
/// variance in the message-passing updates, so a nonpositive or vanishing
/// value would produce an infinite or negative variance. Flat-likelihood
/// regions (e.g. deep inside a bounded-uniform noise box) hit this floor.
pub const D2_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum ScalarIoError {
    #[error("variance must be positive and finite, got {0}")]
    NonPositiveVariance(f64),
    #[error("posterior normalizer underflowed at q={q}, mu={mu}")]
    DegeneratePosterior { q: f64, mu: f64 },
    #[error("likelihood underflowed at y={y}, zhat={zhat}, mu={mu}")]
    LikelihoodUnderflow { y: f64, zhat: f64, mu: f64 },
}

/// Node count and truncation radius (in standard deviations) for the generic
/// trapezoid quadrature paths.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadratureSpec {
    pub node_count: usize,
    pub truncation_radius: f64,
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        Self {
            node_count: 2001,
            truncation_radius: 8.0,
        }
    }
}

impl QuadratureSpec {
    pub fn new(node_count: usize, truncation_radius: f64) -> Self {
        assert!(node_count >= 21, "node_count must be at least 21");
        assert!(
            truncation_radius >= 6.0,
            "truncation_radius must be at least 6"
        );
        Self {
            node_count,
            truncation_radius,
        }
    }
}

pub(crate) const LN_2PI: f64 = 1.837877066409345483560659472811;

#[inline]
pub(crate) fn norm_pdf(v: f64, mu: f64) -> f64 {
    (-0.5 * v * v / mu).exp() / (2.0 * std::f64::consts::PI * mu).sqrt()
}

#[inline]
pub(crate) fn log_norm_pdf(v: f64, mu: f64) -> f64 {
    -0.5 * (v * v / mu + mu.ln() + LN_2PI)
}

/// Standard normal CDF, accurate in both tails.
#[inline]
pub(crate) fn std_norm_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// log of the standard normal CDF. Uses `erfc` where it has full precision
/// and an asymptotic expansion in the extreme lower tail where `erfc`
/// underflows.
pub(crate) fn log_std_norm_cdf(x: f64) -> f64 {
    if x > -36.0 {
        let c = 0.5 * libm::erfc(-x / std::f64::consts::SQRT_2);
        if c > 0.0 {
            return c.ln();
        }
    }
    // Mills-ratio expansion: Phi(x) ~ phi(x)/(-x) * (1 - 1/x^2 + 3/x^4 - ...)
    let x2 = x * x;
    let series = 1.0 - 1.0 / x2 + 3.0 / (x2 * x2);
    -0.5 * x2 - 0.5 * LN_2PI - (-x).ln() + series.ln()
}

/// log(Phi(a) - Phi(b)) for a > b, stable in both tails.
pub(crate) fn log_norm_cdf_diff(a: f64, b: f64) -> f64 {
    debug_assert!(a > b);
    if a <= 0.0 {
        // Both in the lower tail.
        let la = log_std_norm_cdf(a);
        let lb = log_std_norm_cdf(b);
        la + (-((lb - la).exp())).ln_1p()
    } else if b >= 0.0 {
        // Upper tail: reflect.
        log_norm_cdf_diff(-b, -a)
    } else {
        (std_norm_cdf(a) - std_norm_cdf(b)).ln()
    }
}

/// Uniformly spaced grid of `n` points on `[lo, hi]`.
pub(crate) fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    debug_assert!(n >= 2);
    let step = (hi - lo) / (n - 1) as f64;
    (0..n).map(|k| lo + step * k as f64).collect()
}

/// Merge several `(center, half_width)` windows, each discretized with `n`
/// points, into one sorted deduplicated grid. Lets a single quadrature pass
/// resolve integrands living on two different scales (e.g. the spike and slab
/// of a Gauss-Bernoulli marginal).
pub(crate) fn merged_grid(windows: &[(f64, f64)], n: usize) -> Vec<f64> {
    let mut pts = Vec::with_capacity(n * windows.len());
    for &(c, h) in windows {
        pts.extend(linspace(c - h, c + h, n));
    }
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    pts.dedup_by(|a, b| (*a - *b).abs() < f64::EPSILON * (a.abs() + b.abs() + 1.0));
    pts
}

/// Gauss-Legendre nodes and weights on `[-1, 1]` (Newton iteration from
/// Chebyshev initial guesses). Spectral accuracy on smooth integrands, and —
/// unlike an adaptive or merged grid — the node layout is a smooth function
/// of any interval scaling, which keeps quadrature-based maps smooth in
/// their parameters.
pub(crate) fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    use std::collections::HashMap;
    use std::sync::{Mutex, OnceLock};
    static CACHE: OnceLock<Mutex<HashMap<usize, (Vec<f64>, Vec<f64>)>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(rule) = cache.lock().unwrap().get(&n) {
        return rule.clone();
    }
    let rule = gauss_legendre_uncached(n);
    cache.lock().unwrap().insert(n, rule.clone());
    rule
}

fn gauss_legendre_uncached(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for k in 0..n {
        let mut x = (std::f64::consts::PI * (k as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            // Legendre recurrence for P_n(x) and P_n'(x).
            let (mut p0, mut p1) = (1.0, x);
            for j in 2..=n {
                let jf = j as f64;
                let p2 = ((2.0 * jf - 1.0) * x * p1 - (jf - 1.0) * p0) / jf;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let step = p1 / dp;
            x -= step;
            if step.abs() < 1e-15 {
                break;
            }
        }
        nodes[k] = x;
        weights[k] = 2.0 / ((1.0 - x * x) * dp * dp);
    }
    (nodes, weights)
}

/// `integral of f over [lo, hi]` by Gauss-Legendre with `n` nodes.
pub(crate) fn gauss_integral(lo: f64, hi: f64, n: usize, f: impl Fn(f64) -> f64) -> f64 {
    let (nodes, weights) = gauss_legendre(n);
    let c = 0.5 * (lo + hi);
    let h = 0.5 * (hi - lo);
    nodes
        .iter()
        .zip(&weights)
        .map(|(&t, &w)| w * f(c + h * t))
        .sum::<f64>()
        * h
}

/// `E[f(u)]` for `u ~ N(0, sd^2)` truncated at `radius` standard deviations,
/// integrated over `panels` equal Gauss-Legendre panels of `n` nodes each.
/// Extra panels buy resolution when `f` varies on a scale finer than `sd`.
pub(crate) fn gauss_expect(
    sd: f64,
    radius: f64,
    n: usize,
    panels: usize,
    f: impl Fn(f64) -> f64,
) -> f64 {
    let var = sd * sd;
    let width = 2.0 * radius * sd / panels as f64;
    (0..panels)
        .map(|k| {
            let lo = -radius * sd + k as f64 * width;
            gauss_integral(lo, lo + width, n, |u| norm_pdf(u, var) * f(u))
        })
        .sum()
}

/// Trapezoid rule on a sorted (possibly non-uniform) grid.
pub(crate) fn trapezoid(xs: &[f64], f: impl Fn(f64) -> f64) -> f64 {
    let mut acc = 0.0;
    let mut prev_x = xs[0];
    let mut prev_f = f(prev_x);
    for &x in &xs[1..] {
        let fx = f(x);
        acc += 0.5 * (x - prev_x) * (fx + prev_f);
        prev_x = x;
        prev_f = fx;
    }
    acc
}
