//! The relaxed BP estimator.
//!
//! Two variants are provided. `FullEdge` keeps per-edge messages and runs the
//! five-step schedule exactly: linear output step, score-derivative output
//! step, linear input step, posterior-moment input step. `Simplified` shares
//! variances per vertex and reconstructs per-edge means through first-order
//! corrections, so the nonlinear functions are evaluated once per vertex
//! instead of once per edge.
//!
//! Exclusion sums (`sum over r != j`) are computed as the full total minus
//! the excluded term; when cancellation would dominate, the sum is recomputed
//! directly.

use thiserror::Error;

use crate::mat::DenseMatrix;
use crate::scalar_io::{
    posterior_moments, score_derivatives, OutputChannelModel, PriorModel, ScalarIoError,
};

/// Variance floor applied before score-derivative evaluation. Genie
/// initialization makes all incoming variances zero at t=1; the smoothed
/// likelihood tends to the raw channel density as the variance vanishes, and
/// the floor approximates that limit without a separate code path.
pub const MU_Z_FLOOR: f64 = 1e-12;

/// Threshold for switching an exclusion sum from total-minus-term to a direct
/// recomputation.
const CANCELLATION_RATIO: f64 = 1e6;

#[derive(Debug, Error)]
pub enum RbpError {
    #[error("genie initialization requires the true input vector")]
    MissingTruth,
    #[error("scalar evaluation failed at iteration {iteration}, row {row:?}, col {col:?}: {source}")]
    Scalar {
        #[source]
        source: ScalarIoError,
        iteration: usize,
        row: Option<usize>,
        col: Option<usize>,
    },
}

/// One estimation task.
#[derive(Debug, Clone)]
pub struct ProblemInstance {
    pub phi: DenseMatrix,
    pub y: Vec<f64>,
    pub prior: PriorModel,
    pub channel: OutputChannelModel,
    pub true_x: Option<Vec<f64>>,
}

impl ProblemInstance {
    pub fn new(
        phi: DenseMatrix,
        y: Vec<f64>,
        prior: PriorModel,
        channel: OutputChannelModel,
        true_x: Option<Vec<f64>>,
    ) -> Self {
        assert!(phi.rows() >= 1 && phi.cols() >= 1);
        assert_eq!(y.len(), phi.rows(), "observation length must match rows of Phi");
        if let Some(x) = &true_x {
            assert_eq!(x.len(), phi.cols());
        }
        Self {
            phi,
            y,
            prior,
            channel,
            true_x,
        }
    }

    pub fn m(&self) -> usize {
        self.phi.rows()
    }

    pub fn n(&self) -> usize {
        self.phi.cols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    FullEdge,
    Simplified,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    Prior,
    Genie,
}

#[derive(Debug, Clone, Copy)]
pub struct RbpOptions {
    pub max_iterations: usize,
    pub variant: Variant,
    pub init: Init,
    /// Blend weight on the previous mean estimate, in `[0, 1]`. Zero (the
    /// default) reproduces the undamped update.
    pub damping: f64,
    /// Early stop when `||x(t+1) - x(t)||_2 / sqrt(n)` falls below this.
    /// Zero runs all iterations.
    pub stop_tolerance: f64,
}

impl Default for RbpOptions {
    fn default() -> Self {
        Self {
            max_iterations: 20,
            variant: Variant::Simplified,
            init: Init::Prior,
            damping: 0.0,
            stop_tolerance: 0.0,
        }
    }
}

/// Message iterate. Edge arrays are `m x n` row-major; for the `Simplified`
/// variant only `edge_x_hat` is populated (means per edge, variances per
/// vertex).
#[derive(Debug, Clone)]
pub struct MessageState {
    pub variant: Variant,
    pub x_hat: Vec<f64>,
    pub mu_x: Vec<f64>,
    pub z_hat: Vec<f64>,
    pub mu_z: Vec<f64>,
    pub q_hat: Vec<f64>,
    pub mu_q: Vec<f64>,
    pub edge_x_hat: Vec<f64>,
    pub edge_mu_x: Vec<f64>,
    pub edge_z_hat: Vec<f64>,
    pub edge_mu_z: Vec<f64>,
    pub edge_u_hat: Vec<f64>,
    pub edge_mu_u: Vec<f64>,
    pub edge_q_hat: Vec<f64>,
    pub edge_mu_q: Vec<f64>,
    pub t: usize,
    /// Number of score evaluations that hit the `D2` clamp so far.
    pub saturation_count: u64,
}

/// Per-iteration record of the node-level quantities.
#[derive(Debug, Clone, Default)]
pub struct RunHistory {
    pub x_hat: Vec<Vec<f64>>,
    pub mu_x: Vec<Vec<f64>>,
    pub z_hat: Vec<Vec<f64>>,
    pub mu_z: Vec<Vec<f64>>,
}

pub fn initialize(problem: &ProblemInstance, opts: &RbpOptions) -> Result<MessageState, RbpError> {
    let (m, n) = (problem.m(), problem.n());
    let (x0, mu0): (Vec<f64>, Vec<f64>) = match opts.init {
        Init::Prior => (
            vec![problem.prior.mean(); n],
            vec![problem.prior.variance(); n],
        ),
        Init::Genie => {
            let truth = problem.true_x.as_ref().ok_or(RbpError::MissingTruth)?;
            (truth.clone(), vec![0.0; n])
        }
    };
    let full = opts.variant == Variant::FullEdge;
    let mut edge_x_hat = vec![0.0; m * n];
    let mut edge_mu_x = if full { vec![0.0; m * n] } else { Vec::new() };
    for i in 0..m {
        edge_x_hat[i * n..(i + 1) * n].copy_from_slice(&x0);
        if full {
            edge_mu_x[i * n..(i + 1) * n].copy_from_slice(&mu0);
        }
    }
    let e = if full { m * n } else { 0 };
    Ok(MessageState {
        variant: opts.variant,
        x_hat: x0,
        mu_x: mu0,
        z_hat: vec![0.0; m],
        mu_z: vec![0.0; m],
        q_hat: vec![0.0; n],
        mu_q: vec![0.0; n],
        edge_x_hat,
        edge_mu_x,
        edge_z_hat: vec![0.0; e],
        edge_mu_z: vec![0.0; e],
        edge_u_hat: vec![0.0; e],
        edge_mu_u: vec![0.0; e],
        edge_q_hat: vec![0.0; e],
        edge_mu_q: vec![0.0; e],
        t: 1,
        saturation_count: 0,
    })
}

/// Total minus excluded term, falling back to a direct sum over the remaining
/// entries when the subtraction would cancel catastrophically.
#[inline]
fn exclude(total: f64, excluded: f64, direct: impl Fn() -> f64) -> f64 {
    if excluded.abs() > CANCELLATION_RATIO * total.abs() {
        direct()
    } else {
        total - excluded
    }
}

/// Output node, linear step (full-edge variant).
pub fn output_linear_step(state: &mut MessageState, problem: &ProblemInstance) {
    debug_assert_eq!(state.variant, Variant::FullEdge);
    let (m, n) = (problem.m(), problem.n());
    for i in 0..m {
        let row = problem.phi.row(i);
        let ex = &state.edge_x_hat[i * n..(i + 1) * n];
        let emx = &state.edge_mu_x[i * n..(i + 1) * n];
        let mut tot_z = 0.0;
        let mut tot_mz = 0.0;
        for j in 0..n {
            tot_z += row[j] * ex[j];
            tot_mz += row[j] * row[j] * emx[j];
        }
        state.z_hat[i] = tot_z;
        state.mu_z[i] = tot_mz;
        for j in 0..n {
            let ezt = row[j] * ex[j];
            let emt = row[j] * row[j] * emx[j];
            state.edge_z_hat[i * n + j] = exclude(tot_z, ezt, || {
                (0..n).filter(|&r| r != j).map(|r| row[r] * ex[r]).sum()
            });
            state.edge_mu_z[i * n + j] = exclude(tot_mz, emt, || {
                (0..n)
                    .filter(|&r| r != j)
                    .map(|r| row[r] * row[r] * emx[r])
                    .sum()
            })
            .max(0.0);
        }
    }
}

/// Output node, non-linear step (full-edge variant).
pub fn output_nonlinear_step(
    state: &mut MessageState,
    problem: &ProblemInstance,
) -> Result<(), RbpError> {
    debug_assert_eq!(state.variant, Variant::FullEdge);
    let (m, n) = (problem.m(), problem.n());
    for i in 0..m {
        for j in 0..n {
            let k = i * n + j;
            let mu = state.edge_mu_z[k].max(MU_Z_FLOOR);
            let d = score_derivatives(problem.y[i], state.edge_z_hat[k], mu, &problem.channel)
                .map_err(|source| RbpError::Scalar {
                    source,
                    iteration: state.t,
                    row: Some(i),
                    col: Some(j),
                })?;
            if d.saturated {
                state.saturation_count += 1;
            }
            state.edge_u_hat[k] = -d.d1 / d.d2;
            state.edge_mu_u[k] = 1.0 / d.d2;
        }
    }
    Ok(())
}

/// Input node, linear step (full-edge variant).
pub fn input_linear_step(state: &mut MessageState, problem: &ProblemInstance) {
    debug_assert_eq!(state.variant, Variant::FullEdge);
    let (m, n) = (problem.m(), problem.n());
    for j in 0..n {
        let mut tot_prec = 0.0;
        let mut tot_wsum = 0.0;
        for i in 0..m {
            let k = i * n + j;
            let a = problem.phi.at(i, j);
            tot_prec += a * a / state.edge_mu_u[k];
            tot_wsum += a * state.edge_u_hat[k] / state.edge_mu_u[k];
        }
        if tot_prec > 0.0 {
            state.mu_q[j] = 1.0 / tot_prec;
            state.q_hat[j] = tot_wsum / tot_prec;
        } else {
            // No incident measurements: the prior is all we know.
            state.mu_q[j] = f64::INFINITY;
            state.q_hat[j] = problem.prior.mean();
        }
        for i in 0..m {
            let k = i * n + j;
            let a = problem.phi.at(i, j);
            let prec_t = a * a / state.edge_mu_u[k];
            let wsum_t = a * state.edge_u_hat[k] / state.edge_mu_u[k];
            let prec = exclude(tot_prec, prec_t, || {
                (0..m)
                    .filter(|&l| l != i)
                    .map(|l| {
                        let al = problem.phi.at(l, j);
                        al * al / state.edge_mu_u[l * n + j]
                    })
                    .sum()
            });
            if prec > 0.0 {
                let wsum = exclude(tot_wsum, wsum_t, || {
                    (0..m)
                        .filter(|&l| l != i)
                        .map(|l| {
                            problem.phi.at(l, j) * state.edge_u_hat[l * n + j]
                                / state.edge_mu_u[l * n + j]
                        })
                        .sum()
                });
                state.edge_mu_q[k] = 1.0 / prec;
                state.edge_q_hat[k] = wsum / prec;
            } else {
                state.edge_mu_q[k] = f64::INFINITY;
                state.edge_q_hat[k] = problem.prior.mean();
            }
        }
    }
}

fn posterior_or_prior(
    q: f64,
    mu: f64,
    prior: &PriorModel,
    t: usize,
    row: Option<usize>,
    col: Option<usize>,
) -> Result<(f64, f64), RbpError> {
    if mu.is_infinite() {
        return Ok((prior.mean(), prior.variance()));
    }
    posterior_moments(q, mu, prior).map_err(|source| RbpError::Scalar {
        source,
        iteration: t,
        row,
        col,
    })
}

/// Input node, non-linear step (full-edge variant).
pub fn input_nonlinear_step(
    state: &mut MessageState,
    problem: &ProblemInstance,
    damping: f64,
) -> Result<(), RbpError> {
    debug_assert_eq!(state.variant, Variant::FullEdge);
    let (m, n) = (problem.m(), problem.n());
    for j in 0..n {
        let (f, e) = posterior_or_prior(
            state.q_hat[j],
            state.mu_q[j],
            &problem.prior,
            state.t,
            None,
            Some(j),
        )?;
        state.x_hat[j] = damping * state.x_hat[j] + (1.0 - damping) * f;
        state.mu_x[j] = e;
        for i in 0..m {
            let k = i * n + j;
            let (f, e) = posterior_or_prior(
                state.edge_q_hat[k],
                state.edge_mu_q[k],
                &problem.prior,
                state.t,
                Some(i),
                Some(j),
            )?;
            state.edge_x_hat[k] = damping * state.edge_x_hat[k] + (1.0 - damping) * f;
            state.edge_mu_x[k] = e;
        }
    }
    Ok(())
}

/// One iteration of the per-vertex simplified schedule.
fn simplified_iteration(
    state: &mut MessageState,
    problem: &ProblemInstance,
    damping: f64,
) -> Result<(), RbpError> {
    let (m, n) = (problem.m(), problem.n());

    // Output linear: node totals; per-edge means by subtraction.
    for i in 0..m {
        let row = problem.phi.row(i);
        let ex = &state.edge_x_hat[i * n..(i + 1) * n];
        let mut tot_z = 0.0;
        let mut tot_mz = 0.0;
        for j in 0..n {
            tot_z += row[j] * ex[j];
            tot_mz += row[j] * row[j] * state.mu_x[j];
        }
        state.z_hat[i] = tot_z;
        state.mu_z[i] = tot_mz;
    }

    // Output nonlinear: one score evaluation per output node. The per-edge
    // mean is u_bar + Phi_ij * x_edge (first-order correction with the
    // node-level D2).
    let mut u_bar = vec![0.0; m];
    let mut d2_node = vec![0.0; m];
    for i in 0..m {
        let mu = state.mu_z[i].max(MU_Z_FLOOR);
        let d = score_derivatives(problem.y[i], state.z_hat[i], mu, &problem.channel).map_err(
            |source| RbpError::Scalar {
                source,
                iteration: state.t,
                row: Some(i),
                col: None,
            },
        )?;
        if d.saturated {
            state.saturation_count += 1;
        }
        u_bar[i] = -d.d1 / d.d2;
        d2_node[i] = d.d2;
    }

    // Input linear: node-level precisions with full sums.
    for j in 0..n {
        let mut prec = 0.0;
        let mut wsum = 0.0;
        for i in 0..m {
            let a = problem.phi.at(i, j);
            let u_edge = u_bar[i] + a * state.edge_x_hat[i * n + j];
            prec += a * a * d2_node[i];
            wsum += a * u_edge * d2_node[i];
        }
        if prec > 0.0 {
            state.mu_q[j] = 1.0 / prec;
            state.q_hat[j] = wsum / prec;
        } else {
            state.mu_q[j] = f64::INFINITY;
            state.q_hat[j] = problem.prior.mean();
        }
    }

    // Input nonlinear: one posterior evaluation per input node; per-edge
    // means by the first-order correction using dF/dq = E_in/mu.
    for j in 0..n {
        let (f, e) = posterior_or_prior(
            state.q_hat[j],
            state.mu_q[j],
            &problem.prior,
            state.t,
            None,
            Some(j),
        )?;
        for i in 0..m {
            let a = problem.phi.at(i, j);
            let u_edge = u_bar[i] + a * state.edge_x_hat[i * n + j];
            let corrected = f - a * u_edge * d2_node[i] * e;
            state.edge_x_hat[i * n + j] =
                damping * state.edge_x_hat[i * n + j] + (1.0 - damping) * corrected;
        }
        state.x_hat[j] = damping * state.x_hat[j] + (1.0 - damping) * f;
        state.mu_x[j] = e;
    }
    Ok(())
}

fn record(history: &mut RunHistory, state: &MessageState) {
    history.x_hat.push(state.x_hat.clone());
    history.mu_x.push(state.mu_x.clone());
    history.z_hat.push(state.z_hat.clone());
    history.mu_z.push(state.mu_z.clone());
}

fn run_loop(
    problem: &ProblemInstance,
    opts: &RbpOptions,
) -> Result<(MessageState, RunHistory), RbpError> {
    let mut state = initialize(problem, opts)?;
    let mut history = RunHistory::default();
    let n = problem.n();
    for _ in 0..opts.max_iterations {
        let prev: Vec<f64> = state.x_hat.clone();
        match state.variant {
            Variant::FullEdge => {
                output_linear_step(&mut state, problem);
                output_nonlinear_step(&mut state, problem)?;
                input_linear_step(&mut state, problem);
                input_nonlinear_step(&mut state, problem, opts.damping)?;
            }
            Variant::Simplified => {
                simplified_iteration(&mut state, problem, opts.damping)?;
            }
        }
        state.t += 1;
        record(&mut history, &state);
        if opts.stop_tolerance > 0.0 {
            let delta: f64 = state
                .x_hat
                .iter()
                .zip(&prev)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
                / (n as f64).sqrt();
            if delta < opts.stop_tolerance {
                break;
            }
        }
    }
    Ok((state, history))
}

/// Run the full per-edge algorithm.
pub fn run(
    problem: &ProblemInstance,
    opts: &RbpOptions,
) -> Result<(MessageState, RunHistory), RbpError> {
    let opts = RbpOptions {
        variant: Variant::FullEdge,
        ..*opts
    };
    run_loop(problem, &opts)
}

/// Run the simplified per-vertex algorithm.
pub fn run_simplified(
    problem: &ProblemInstance,
    opts: &RbpOptions,
) -> Result<(MessageState, RunHistory), RbpError> {
    let opts = RbpOptions {
        variant: Variant::Simplified,
        ..*opts
    };
    run_loop(problem, &opts)
}
