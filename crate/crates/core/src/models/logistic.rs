//! Controlled stochastic logistic growth with additive control.
//!
//! `dX = a X (1 - b X) dt + gamma u dt + sigma X dW` on `(0, inf)` with
//! controls in `[u1, u2]`, minimizing `E ∫ e^{-beta t} (c X^2 + h u^2) dt`.
//! The adjoint driver contains the product `X Y`, so the closed loop is
//! solved by a Picard iteration over regression-backed feedback laws, with
//! the BSDE driver evaluated at `min(X, level)`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::audit::SampleSpec;
use crate::basis::RegressionBasis;
use crate::bsde::{solve_truncated_driver, BsdeSolution};
use crate::error::{invalid, Result, SmpError};
use crate::exec::chunked_reduce;
use crate::forward::{simulate_forward, LyapunovConstants, PathEnsemble, SimSpec};
use crate::grid::TimeGrid;
use crate::law::{AdjointSource, BlendedAdjoint, ControlLaw};
use crate::problem::{AssumptionConstants, CoefficientField, ControlDomain, Dims, DiscountedProblem, StateRegion};
use crate::report::{Status, VerificationReport};

pub const ID: &str = "logistic";

/// Weight on the newest iterate once damping is engaged.
pub const PICARD_DAMPING: f64 = 0.5;
/// Consecutive residual increases that abort the iteration.
pub const DIVERGENCE_RUN: usize = 3;
/// Agreement required by the local uniqueness probe.
pub const UNIQUENESS_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LogisticParams {
    pub a: f64,
    pub b: f64,
    pub gamma: f64,
    pub sigma: f64,
    pub c: f64,
    pub h: f64,
    pub u1: f64,
    pub u2: f64,
    pub x0: f64,
    /// Discount rate; defaults to `sigma^2 + 2a + gamma u2 + 1`.
    pub beta: Option<f64>,
    /// Driver truncation levels; the largest is used by the Picard loop,
    /// the first two by the consistency check.
    pub truncation_levels: Vec<f64>,
    /// Radius of the cylinder on which truncated solutions must agree.
    pub n_cyl: f64,
}

impl Default for LogisticParams {
    fn default() -> Self {
        Self {
            a: 1.0,
            b: 1.0,
            gamma: 0.5,
            sigma: 0.3,
            c: 1.0,
            h: 1.0,
            u1: 0.1,
            u2: 1.0,
            x0: 0.5,
            beta: None,
            truncation_levels: vec![10.0, 50.0],
            n_cyl: 5.0,
        }
    }
}

impl LogisticParams {
    pub fn beta(&self) -> f64 {
        self.beta.unwrap_or_else(|| self.default_beta())
    }

    /// `sigma^2 + 2a + gamma u2 + 1`.
    pub fn default_beta(&self) -> f64 {
        self.sigma * self.sigma + 2.0 * self.a + self.gamma * self.u2 + 1.0
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.a, self.b, self.gamma, self.sigma, self.c, self.h, self.u1, self.u2, self.x0, self.beta(), self.n_cyl];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(invalid("logistic", "parameters must be finite"));
        }
        if !(self.a > 0.0 && self.b > 0.0) {
            return Err(invalid("a, b", "logistic constants must be > 0"));
        }
        if !(self.sigma > 0.0) {
            return Err(invalid("sigma", "must be > 0"));
        }
        if self.c < 0.0 || !(self.h > 0.0) {
            return Err(invalid("c, h", "need c >= 0 and h > 0"));
        }
        if !(self.u1 > 0.0 && self.u1 <= self.u2) {
            return Err(invalid("u1, u2", "need 0 < u1 <= u2"));
        }
        if !(self.x0 > 0.0) {
            return Err(invalid("x0", "must be > 0"));
        }
        if self.truncation_levels.is_empty() || self.truncation_levels.iter().any(|l| !(*l > 0.0)) {
            return Err(invalid("truncation_levels", "need at least one positive level"));
        }
        Ok(())
    }

    /// Level used inside the Picard loop.
    pub fn picard_truncation(&self) -> f64 {
        self.truncation_levels.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn audit_sample(&self, n_points: usize, seed: u64) -> SampleSpec {
        SampleSpec::new(vec![0.01], vec![10.0 / self.b], n_points, seed)
    }
}

#[derive(Debug, Clone)]
pub struct LogisticField {
    pub params: LogisticParams,
}

impl CoefficientField for LogisticField {
    fn dims(&self) -> Dims {
        Dims::scalar()
    }
    fn drift(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        let p = &self.params;
        out[0] = p.a * x[0] * (1.0 - p.b * x[0]) + p.gamma * u[0];
    }
    fn diffusion(&self, x: &[f64], _u: &[f64], out: &mut [f64]) {
        out[0] = self.params.sigma * x[0];
    }
    fn running_reward(&self, x: &[f64], u: &[f64]) -> f64 {
        -(self.params.c * x[0] * x[0] + self.params.h * u[0] * u[0])
    }
    fn drift_jacobian(&self, x: &[f64], _u: &[f64], out: &mut [f64]) {
        out[0] = self.params.a * (1.0 - 2.0 * self.params.b * x[0]);
    }
    fn diffusion_jacobian(&self, _x: &[f64], _u: &[f64], out: &mut [f64]) {
        out[0] = self.params.sigma;
    }
    fn reward_gradient(&self, x: &[f64], _u: &[f64], out: &mut [f64]) {
        out[0] = -2.0 * self.params.c * x[0];
    }
    fn stationary_control(&self, _x: &[f64], y: &[f64], _z: &[f64], out: &mut [f64]) -> bool {
        out[0] = self.params.gamma * y[0] / (2.0 * self.params.h);
        true
    }
    fn log_split(&self, _u: &[f64]) -> Option<(f64, f64)> {
        // Remainder -a b x^2 + gamma u is carried by the Euler part.
        Some((self.params.a, self.params.sigma))
    }
}

/// Maximization problem with `mu1 = mu2 = a` and `L = M = sigma`.
pub fn logistic_problem(params: &LogisticParams) -> Result<DiscountedProblem> {
    params.validate()?;
    DiscountedProblem::new(
        ID,
        Arc::new(LogisticField { params: params.clone() }),
        ControlDomain::interval(params.u1, params.u2)?,
        params.beta(),
        AssumptionConstants::new(params.a, params.a, params.sigma, params.sigma)?,
        StateRegion::Positive,
        vec![params.x0],
    )
}

/// Piecewise law: `u1` below `y = 2h u1/gamma`, `u2` above `2h u2/gamma`,
/// `gamma y/(2h)` in between.
pub fn logistic_control_law(y: f64, params: &LogisticParams) -> Result<f64> {
    if !(params.gamma > 0.0) {
        return Err(invalid("gamma", "the piecewise law needs gamma > 0"));
    }
    Ok(piecewise(y, params.gamma, params.h, params.u1, params.u2))
}

fn piecewise(y: f64, gamma: f64, h: f64, u1: f64, u2: f64) -> f64 {
    (gamma * y / (2.0 * h)).clamp(u1, u2)
}

/// Region constants of the Lyapunov bound with `r = R = 1/b`, where
/// `F(x, u) = a (1 - b x) + gamma u / x`. `None` when `gamma < 0`, since
/// `-F` is then unbounded near zero.
pub fn lyapunov_constants(params: &LogisticParams) -> Option<LyapunovConstants> {
    if params.gamma < 0.0 {
        return None;
    }
    let r = 1.0 / params.b;
    let (a, b, g) = (params.a, params.b, params.gamma);
    // -F increases in x on (0, r); F decreases in x on (R, inf).
    let near_zero = -a + a * b * r - g * params.u1 / r;
    let far = a - a * b * r + g * params.u2 / r;
    Some(LyapunovConstants {
        r,
        big_r: r,
        c: near_zero.max(far),
        lip: params.sigma,
        mu1: a,
    })
}

/// Result of the closed-loop Picard iteration.
#[derive(Debug, Clone)]
pub struct PicardOutcome {
    /// Paths simulated under `law`.
    pub ensemble: PathEnsemble,
    /// Truncated-driver adjoint on `ensemble`.
    pub bsde: BsdeSolution,
    /// Feedback law of the last iterate.
    pub law: ControlLaw,
    pub iterations: usize,
    /// `residuals[j]` is the sup over paths and nodes of the change in the
    /// fitted `Y` between iterates `j + 1` and `j + 2`.
    pub residuals: Vec<f64>,
    pub converged: bool,
    /// Whether damping was engaged.
    pub damped: bool,
}

impl PicardOutcome {
    pub fn final_residual(&self) -> Option<f64> {
        self.residuals.last().copied()
    }
}

/// Sup over clean paths and nodes of `|a(i, X) - b(i, X)|`.
fn source_gap(e: &PathEnsemble, a: &dyn AdjointSource, b: &dyn AdjointSource, exec: crate::exec::Execution) -> f64 {
    let steps = e.grid().steps();
    chunked_reduce(
        exec,
        e.n_paths(),
        || 0.0f64,
        |acc, p| {
            if !e.flags()[p].is_clean() {
                return;
            }
            let (mut ya, mut yb) = ([0.0], [0.0]);
            for i in 0..=steps {
                let x = e.state(p, i);
                a.adjoint(i, x, &mut ya);
                b.adjoint(i, x, &mut yb);
                *acc = acc.max((ya[0] - yb[0]).abs());
            }
        },
        |a, b| *a = a.max(b),
    )
}

fn picard_from(
    params: &LogisticParams,
    spec: &SimSpec,
    basis: &RegressionBasis,
    init: f64,
    max_iters: usize,
    tol: f64,
) -> Result<PicardOutcome> {
    if max_iters == 0 {
        return Err(invalid("max_iters", "must be at least 1"));
    }
    let problem = logistic_problem(params)?;
    let level = params.picard_truncation();
    if params.gamma == 0.0 {
        // The state ignores the control; one backward solve closes the loop.
        let law = ControlLaw::constant(params.u1);
        let ensemble = simulate_forward(&problem, &law, spec)?;
        let bsde = solve_truncated_driver(&problem, &ensemble, basis, level)?;
        return Ok(PicardOutcome {
            ensemble,
            bsde,
            law,
            iterations: 1,
            residuals: vec![0.0],
            converged: true,
            damped: false,
        });
    }
    let (gamma, h, u1, u2) = (params.gamma, params.h, params.u1, params.u2);
    logistic_control_law(0.0, params)?;
    let feedback = |src: Arc<dyn AdjointSource>| ControlLaw::adjoint_feedback(src, move |_t, _x, y, out| out[0] = piecewise(y[0], gamma, h, u1, u2));

    let mut law = ControlLaw::constant(init);
    let mut law_source: Option<Arc<dyn AdjointSource>> = None;
    let mut residuals = Vec::new();
    let mut rising = 0usize;
    let mut damped = false;
    for j in 1..=max_iters {
        let ensemble = simulate_forward(&problem, &law, spec)?;
        let bsde = solve_truncated_driver(&problem, &ensemble, basis, level)?;
        let fresh = bsde.adjoint_source();
        let mut converged = false;
        if let Some(prev) = &law_source {
            let r = source_gap(&ensemble, fresh.as_ref(), prev.as_ref(), spec.exec);
            if residuals.last().is_some_and(|l: &f64| r > *l) {
                rising += 1;
                damped = true;
            } else {
                rising = 0;
            }
            residuals.push(r);
            log::debug!("picard iteration {j}: residual {r:.3e}");
            if !r.is_finite() || rising >= DIVERGENCE_RUN {
                return Err(SmpError::PicardDiverged {
                    iterations: j,
                    history: residuals,
                });
            }
            converged = r <= tol;
        }
        if converged || j == max_iters {
            return Ok(PicardOutcome {
                ensemble,
                bsde,
                law,
                iterations: j,
                residuals,
                converged,
                damped,
            });
        }
        let next: Arc<dyn AdjointSource> = match (&law_source, damped) {
            (Some(prev), true) => Arc::new(BlendedAdjoint {
                parts: vec![(1.0 - PICARD_DAMPING, Arc::clone(prev)), (PICARD_DAMPING, fresh)],
            }),
            _ => fresh,
        };
        law = feedback(Arc::clone(&next));
        law_source = Some(next);
    }
    unreachable!("the loop returns on its last iteration")
}

/// Picard iteration for the closed-loop forward-backward system, started
/// from the constant law `(u1 + u2)/2`. Each iterate simulates under the
/// piecewise law applied to the previous iterate's fitted `Y` and solves
/// the truncated-driver BSDE; the loop stops once the fitted `Y` moves by
/// at most `tol` in sup norm over the simulated states.
pub fn logistic_picard_solve(
    params: &LogisticParams,
    grid: &TimeGrid,
    n_paths: usize,
    basis: &RegressionBasis,
    seed: u64,
    max_iters: usize,
    tol: f64,
) -> Result<PicardOutcome> {
    let spec = SimSpec::new(*grid, n_paths, seed);
    picard_from(params, &spec, basis, 0.5 * (params.u1 + params.u2), max_iters, tol)
}

/// Local uniqueness on `[0, delta]`: two Picard runs with the same initial
/// state, the same zero terminal value at `delta` and the same noise, but
/// started from the constant laws `u1` and `u2`, must agree on the window.
pub fn logistic_local_uniqueness_probe(
    params: &LogisticParams,
    grid: &TimeGrid,
    n_paths: usize,
    basis: &RegressionBasis,
    window_delta: f64,
    seed: u64,
) -> Result<VerificationReport> {
    let name = "local_uniqueness";
    if !(window_delta > 0.0 && window_delta <= grid.horizon() + 1e-12) {
        return Err(invalid("window_delta", "window must lie inside the grid"));
    }
    let window = TimeGrid::with_step(window_delta, grid.dt())?;
    let spec = SimSpec::new(window, n_paths, seed);
    let runs = [params.u1, params.u2].map(|init| picard_from(params, &spec, basis, init, 20, UNIQUENESS_TOLERANCE * 1e-2));
    let (a, b) = match runs {
        [Ok(a), Ok(b)] if a.converged && b.converged => (a, b),
        [a, b] => {
            let why = [a, b]
                .into_iter()
                .map(|r| match r {
                    Ok(o) if !o.converged => format!("no convergence in {} iterations", o.iterations),
                    Ok(_) => "converged".to_string(),
                    Err(e) => e.to_string(),
                })
                .collect::<Vec<_>>()
                .join("; ");
            return Ok(VerificationReport::new(name, Status::Inconclusive).with_notes(why));
        }
    };
    let steps = window.steps();
    let mut worst = 0.0f64;
    for p in 0..n_paths {
        for i in 0..=steps {
            worst = worst.max((a.ensemble.state(p, i)[0] - b.ensemble.state(p, i)[0]).abs());
            worst = worst.max((a.bsde.y(p, i)[0] - b.bsde.y(p, i)[0]).abs());
            if i < steps {
                worst = worst.max((a.bsde.z(p, i)[0] - b.bsde.z(p, i)[0]).abs());
            }
        }
    }
    Ok(VerificationReport::new(name, Status::from_bool(worst <= UNIQUENESS_TOLERANCE))
        .with_stat(worst, UNIQUENESS_TOLERANCE)
        .with_sample(n_paths, 0.0)
        .with_notes(format!(
            "window [0, {:.4}], starts u1 and u2 converged in {} and {} iterations",
            window.horizon(),
            a.iterations,
            b.iterations
        )))
}
