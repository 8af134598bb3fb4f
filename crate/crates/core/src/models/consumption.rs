//! Optimal consumption from a geometric wealth process.
//!
//! Wealth follows `dX = X (mu - u) dt + sigma X dW` and the agent
//! maximizes `E ∫ e^{-beta t} ln(u X) dt`. For every control the adjoint
//! is `Y = 1/(beta X)`, `Z = -sigma/(beta X)`, so the Hamiltonian maximizer
//! `1/(X Y)` is the constant `beta`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::audit::SampleSpec;
use crate::error::{invalid, Result};
use crate::forward::{fold_paths, SimSpec};
use crate::grid::TimeGrid;
use crate::law::ControlLaw;
use crate::problem::{AssumptionConstants, CoefficientField, ControlDomain, Dims, DiscountedProblem, StateRegion};
use crate::report::{Status, VerificationReport};

pub const ID: &str = "consumption";

/// Lower end of the consumption box, standing in for `u > 0`.
pub const U_EPSILON: f64 = 1e-8;

/// Relative slack on the analytic moment bound.
pub const MOMENT_SLACK: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConsumptionParams {
    pub mu: f64,
    pub sigma: f64,
    /// Constant `K` of the integrability bound and its threshold.
    pub k: f64,
    pub x0: f64,
    /// Discount rate; defaults to the certified threshold plus 0.5.
    pub beta: Option<f64>,
    /// Upper end of the consumption box `[U_EPSILON, u_max]`.
    pub u_max: f64,
}

impl Default for ConsumptionParams {
    fn default() -> Self {
        Self {
            mu: 0.05,
            sigma: 0.2,
            k: 1.0,
            x0: 1.0,
            beta: None,
            u_max: 5.0,
        }
    }
}

impl ConsumptionParams {
    pub fn beta(&self) -> f64 {
        self.beta.unwrap_or_else(|| self.certified_threshold() + 0.5)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.mu, self.sigma, self.k, self.x0, self.beta(), self.u_max];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(invalid("consumption", "parameters must be finite"));
        }
        if !(self.x0 > 0.0) {
            return Err(invalid("x0", "must be > 0"));
        }
        if !(self.k > 0.0) {
            return Err(invalid("k", "must be > 0"));
        }
        if !(self.u_max > U_EPSILON) {
            return Err(invalid("u_max", format!("must exceed {U_EPSILON}")));
        }
        Ok(())
    }

    /// `2 mu + 2 sigma^2`.
    pub fn beta_threshold(&self) -> f64 {
        2.0 * self.mu + 2.0 * self.sigma * self.sigma
    }

    /// Growth rate `3 sigma^2 - 2 mu + K` of the bound on `E[1/X_t^2]`.
    pub fn moment_rate(&self) -> f64 {
        3.0 * self.sigma * self.sigma - 2.0 * self.mu + self.k
    }

    /// `max{2 mu + 2 sigma^2, K + 3 sigma^2 - 2 mu}`.
    pub fn certified_threshold(&self) -> f64 {
        self.beta_threshold().max(self.moment_rate())
    }

    pub fn audit_sample(&self, n_points: usize, seed: u64) -> SampleSpec {
        SampleSpec::new(vec![0.01], vec![10.0 * self.x0.max(1.0)], n_points, seed)
    }
}

#[derive(Debug, Clone)]
pub struct ConsumptionField {
    pub mu: f64,
    pub sigma: f64,
}

impl CoefficientField for ConsumptionField {
    fn dims(&self) -> Dims {
        Dims::scalar()
    }
    fn drift(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        out[0] = x[0] * (self.mu - u[0]);
    }
    fn diffusion(&self, x: &[f64], _u: &[f64], out: &mut [f64]) {
        out[0] = self.sigma * x[0];
    }
    fn running_reward(&self, x: &[f64], u: &[f64]) -> f64 {
        (u[0] * x[0]).ln()
    }
    fn drift_jacobian(&self, _x: &[f64], u: &[f64], out: &mut [f64]) {
        out[0] = self.mu - u[0];
    }
    fn diffusion_jacobian(&self, _x: &[f64], _u: &[f64], out: &mut [f64]) {
        out[0] = self.sigma;
    }
    fn reward_gradient(&self, x: &[f64], _u: &[f64], out: &mut [f64]) {
        out[0] = 1.0 / x[0];
    }
    fn stationary_control(&self, x: &[f64], y: &[f64], _z: &[f64], out: &mut [f64]) -> bool {
        let xy = x[0] * y[0];
        // H = ln u - u x y + ...; increasing in u when x y <= 0.
        out[0] = if xy > 0.0 { 1.0 / xy } else { f64::INFINITY };
        true
    }
    fn log_split(&self, u: &[f64]) -> Option<(f64, f64)> {
        Some((self.mu - u[0], self.sigma))
    }
}

/// Maximization problem on `G = (0, inf)` with `mu1 = mu2 = mu`,
/// `L = M = |sigma|` and box `[U_EPSILON, u_max]`.
pub fn consumption_problem(params: &ConsumptionParams) -> Result<DiscountedProblem> {
    params.validate()?;
    let s = params.sigma.abs();
    DiscountedProblem::new(
        ID,
        Arc::new(ConsumptionField {
            mu: params.mu,
            sigma: params.sigma,
        }),
        ControlDomain::interval(U_EPSILON, params.u_max)?,
        params.beta(),
        AssumptionConstants::new(params.mu, params.mu, s, s)?,
        StateRegion::Positive,
        vec![params.x0],
    )
}

/// The candidate `û = beta`.
pub fn optimal_law(params: &ConsumptionParams) -> ControlLaw {
    ControlLaw::constant(params.beta())
}

/// Stationary adjoint `(Y, Z) = (1/(beta x), -sigma/(beta x))`.
pub fn exact_fields(params: &ConsumptionParams) -> impl Fn(usize, &[f64], &mut [f64], &mut [f64]) + Send + Sync {
    let (beta, sigma) = (params.beta(), params.sigma);
    move |_i, x, y, z| {
        y[0] = 1.0 / (beta * x[0]);
        z[0] = -sigma / (beta * x[0]);
    }
}

/// `Y_t` of the zero-terminal problem on `[0, T]`:
/// `(1 - e^{-beta (T - t)}) / (beta x)`.
pub fn truncated_adjoint(params: &ConsumptionParams, horizon: f64, t: f64, x: f64) -> f64 {
    let beta = params.beta();
    -(-beta * (horizon - t)).exp_m1() / (beta * x)
}

/// `x0^{-2} e^{(3 sigma^2 - 2 mu + K) t}`.
pub fn moment_bound(params: &ConsumptionParams, t: f64) -> f64 {
    (params.moment_rate() * t).exp() / (params.x0 * params.x0)
}

/// Monte Carlo check of `E ∫ e^{-beta t} X_t^{-2} dt < inf`.
///
/// Paths run on the doubled horizon `2T` under the constant consumption
/// `K/2`, for which the moment bound is exact. Passes when every node
/// satisfies `E[X_t^{-2}] <= 1.1 bound(t) + 3 SE` and the increment of the
/// weighted integral from `T` to `2T` stays below the analytic tail
/// `1.1 x0^{-2} e^{-(beta - rate) T} / (beta - rate)` plus 3 SE.
pub fn consumption_integrability_check(
    params: &ConsumptionParams,
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
) -> Result<VerificationReport> {
    let name = "integrability";
    let rate = params.moment_rate();
    let beta = params.beta();
    if !(beta > rate) {
        return Ok(VerificationReport::new(name, Status::Fail)
            .with_stat(beta, rate)
            .with_notes("beta must exceed K + 3 sigma^2 - 2 mu"));
    }
    let problem = consumption_problem(params)?;
    let steps = grid.steps();
    let doubled = TimeGrid::new(2.0 * grid.horizon(), 2 * steps)?;
    let spec = SimSpec::new(doubled, n_paths, seed);
    let law = ControlLaw::constant(0.5 * params.k);
    let dt = doubled.dt();
    let nodes = 2 * steps + 1;

    // (sum, sum of squares) per node up to T, then (sum, sumsq) of the tail integral.
    let (moments, tail) = fold_paths(
        &problem,
        &law,
        &spec,
        || (vec![0.0; 2 * (steps + 1)], [0.0f64; 2]),
        |acc, _p, xs, _us, _f| {
            let mut tail = 0.0;
            for (i, x) in xs.iter().enumerate().take(nodes) {
                let v = 1.0 / (x * x);
                if i <= steps {
                    acc.0[2 * i] += v;
                    acc.0[2 * i + 1] += v * v;
                }
                if i >= steps {
                    let w = if i == steps || i == nodes - 1 { 0.5 } else { 1.0 };
                    tail += w * (-beta * doubled.time(i)).exp() * v * dt;
                }
            }
            acc.1[0] += tail;
            acc.1[1] += tail * tail;
        },
        |a, b| {
            a.0.iter_mut().zip(&b.0).for_each(|(x, y)| *x += y);
            a.1[0] += b.1[0];
            a.1[1] += b.1[1];
        },
    )?;
    let nf = n_paths as f64;
    let mean_se = |s: f64, sq: f64| {
        let m = s / nf;
        let var = if n_paths > 1 { ((sq / nf - m * m) * nf / (nf - 1.0)).max(0.0) } else { 0.0 };
        (m, (var / nf).sqrt())
    };
    let mut worst_ratio = 0.0f64;
    let mut violations = 0usize;
    for i in 0..=steps {
        let (m, se) = mean_se(moments[2 * i], moments[2 * i + 1]);
        let b = moment_bound(params, grid.time(i));
        let tol = (1.0 + MOMENT_SLACK) * b + 3.0 * se;
        worst_ratio = worst_ratio.max(m / b);
        if m > tol {
            violations += 1;
        }
    }
    let (tail_mean, tail_se) = mean_se(tail[0], tail[1]);
    let gap = beta - rate;
    let tail_bound = (1.0 + MOMENT_SLACK) * (-gap * grid.horizon()).exp() / (gap * params.x0 * params.x0) + 3.0 * tail_se;
    let ok = violations == 0 && tail_mean <= tail_bound;
    Ok(VerificationReport::new(name, Status::from_bool(ok))
        .with_stat(tail_mean, tail_bound)
        .with_sample(n_paths, tail_se)
        .with_notes(format!(
            "u = K/2; {violations} nodes above 1.1 x bound + 3 SE; max E[X^-2]/bound {worst_ratio:.4}; \
             statistic is the weighted integral over [T, 2T]"
        )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn joint_concavity_fails_but_maximized_hamiltonian_is_concave() {
        use crate::audit::{concavity_probe, maximized_concavity_probe};
        let p = ConsumptionParams::default();
        let prob = consumption_problem(&p).unwrap();
        let spec = p.audit_sample(0, 3);
        let yz: Vec<(Vec<f64>, Vec<f64>)> = [0.5, 1.0, 4.0]
            .iter()
            .flat_map(|x| [(vec![1.0 / (p.beta() * x)], vec![-p.sigma / (p.beta() * x)]), (vec![-0.3], vec![0.1])])
            .collect();
        assert!(!concavity_probe(&prob, &spec, &yz, 500).passed());
        let arrow = maximized_concavity_probe(&prob, &spec, &yz, 500);
        assert!(arrow.passed(), "{arrow:?}");
    }

    #[test]
    fn thresholds() {
        let p = ConsumptionParams::default();
        assert_relative_eq!(p.beta_threshold(), 0.18, epsilon = 1e-15);
        assert_relative_eq!(p.certified_threshold(), 1.02, epsilon = 1e-15);
        assert_relative_eq!(p.beta(), 1.52, epsilon = 1e-12);
        let prob = consumption_problem(&p).unwrap();
        assert_eq!(prob.beta_threshold(), 2.0 * p.mu + 2.0 * p.sigma * p.sigma);
    }

    #[test]
    fn stationary_point_is_reciprocal() {
        let p = ConsumptionParams::default();
        let prob = consumption_problem(&p).unwrap();
        let x = 1.7;
        let mut u = [0.0];
        prob.field.stationary_control(&[x], &[1.0 / (p.beta() * x)], &[0.0], &mut u);
        assert_relative_eq!(u[0], p.beta(), epsilon = 1e-12);
        prob.field.stationary_control(&[x], &[-1.0], &[0.0], &mut u);
        assert!(u[0].is_infinite());
    }

    #[test]
    fn truncated_adjoint_tends_to_stationary() {
        let p = ConsumptionParams::default();
        let y = truncated_adjoint(&p, 1e3, 0.0, 2.0);
        assert_relative_eq!(y, 1.0 / (p.beta() * 2.0), epsilon = 1e-14);
        assert_eq!(truncated_adjoint(&p, 5.0, 5.0, 2.0), 0.0);
    }

    #[test]
    fn deterministic_moment_is_exponential() {
        let p = ConsumptionParams {
            sigma: 0.0,
            k: 0.4,
            ..Default::default()
        };
        let g = TimeGrid::new(2.0, 200).unwrap();
        let r = consumption_integrability_check(&p, &g, 4, 3).unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn below_moment_threshold_fails() {
        let p = ConsumptionParams {
            beta: Some(0.5),
            ..Default::default()
        };
        let g = TimeGrid::new(1.0, 10).unwrap();
        assert!(!consumption_integrability_check(&p, &g, 10, 1).unwrap().passed());
    }
}
