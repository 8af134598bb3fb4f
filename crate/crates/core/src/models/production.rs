//! Production planning with quadratic tracking costs.
//!
//! Inventory follows `dX = (u - eta) dt + sigma dW` and the planner
//! minimizes `E ∫ e^{-beta t} [c (u - u1)^2 + h (X - x1)^2] dt`. The
//! adjoint is affine in the state, `Y = phi X + psi`, and the optimal
//! feedback is `u = u1 + Y / (2c)`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::audit::SampleSpec;
use crate::error::{invalid, Result, SmpError};
use crate::law::{AdjointSource, ControlLaw, FnAdjoint};
use crate::problem::{AssumptionConstants, CoefficientField, ControlDomain, Dims, DiscountedProblem, StateRegion};

/// Experiment identifier.
pub const ID: &str = "production_planning";

/// Agreement required between the algebraic root and the backward ODE.
pub const ODE_AGREEMENT: f64 = 1e-6;
/// Residual allowed in the stationary algebraic system.
pub const ALGEBRAIC_RESIDUAL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProductionPlanningParams {
    /// Demand rate.
    pub eta: f64,
    /// Target production rate.
    pub u1: f64,
    /// Target inventory.
    pub x1: f64,
    pub sigma: f64,
    pub c: f64,
    pub h: f64,
    pub beta: f64,
    pub x0: f64,
    /// Upper end of the production box `[0, u_max]`.
    pub u_max: f64,
}

impl Default for ProductionPlanningParams {
    fn default() -> Self {
        Self {
            eta: 1.0,
            u1: 1.0,
            x1: 2.0,
            sigma: 0.5,
            c: 1.0,
            h: 1.0,
            beta: 1.0,
            x0: 0.0,
            u_max: 10.0,
        }
    }
}

impl ProductionPlanningParams {
    pub fn validate(&self) -> Result<()> {
        let all = [self.eta, self.u1, self.x1, self.sigma, self.c, self.h, self.beta, self.x0, self.u_max];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(invalid("production_planning", "parameters must be finite"));
        }
        if !(self.c > 0.0) {
            return Err(invalid("c", "must be > 0"));
        }
        if !(self.h > 0.0) {
            return Err(invalid("h", "must be > 0"));
        }
        if self.beta < 0.0 {
            return Err(invalid("beta", "must be >= 0"));
        }
        if !(self.u_max > 0.0) {
            return Err(invalid("u_max", "must be > 0"));
        }
        Ok(())
    }

    /// Audit sample on a window around the target inventory.
    pub fn audit_sample(&self, n_points: usize, seed: u64) -> SampleSpec {
        let lo = self.x1.min(self.x0) - 5.0;
        let hi = self.x1.max(self.x0) + 5.0;
        SampleSpec::new(vec![lo], vec![hi], n_points, seed)
    }
}

#[derive(Debug, Clone)]
pub struct ProductionField {
    pub params: ProductionPlanningParams,
}

impl CoefficientField for ProductionField {
    fn dims(&self) -> Dims {
        Dims::scalar()
    }
    fn drift(&self, _x: &[f64], u: &[f64], out: &mut [f64]) {
        out[0] = u[0] - self.params.eta;
    }
    fn diffusion(&self, _x: &[f64], _u: &[f64], out: &mut [f64]) {
        out[0] = self.params.sigma;
    }
    fn running_reward(&self, x: &[f64], u: &[f64]) -> f64 {
        let p = &self.params;
        -(p.c * (u[0] - p.u1).powi(2) + p.h * (x[0] - p.x1).powi(2))
    }
    fn drift_jacobian(&self, _x: &[f64], _u: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
    }
    fn diffusion_jacobian(&self, _x: &[f64], _u: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
    }
    fn reward_gradient(&self, x: &[f64], _u: &[f64], out: &mut [f64]) {
        out[0] = -2.0 * self.params.h * (x[0] - self.params.x1);
    }
    fn stationary_control(&self, _x: &[f64], y: &[f64], _z: &[f64], out: &mut [f64]) -> bool {
        out[0] = y[0] / (2.0 * self.params.c) + self.params.u1;
        true
    }
}

/// Maximization form of the planning problem: `f = -cost`, box
/// `[0, u_max]`, all monotonicity and Lipschitz constants zero.
pub fn production_planning_problem(params: &ProductionPlanningParams) -> Result<DiscountedProblem> {
    params.validate()?;
    DiscountedProblem::new(
        ID,
        Arc::new(ProductionField { params: params.clone() }),
        ControlDomain::interval(0.0, params.u_max)?,
        params.beta,
        AssumptionConstants::new(0.0, 0.0, 0.0, 0.0)?,
        StateRegion::Whole,
        vec![params.x0],
    )
}

/// Stationary affine adjoint `Y = phi X + psi` with its ODE cross-check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RiccatiSolution {
    pub phi: f64,
    pub psi: f64,
    /// Largest residual of the two stationary equations.
    pub algebraic_residual: f64,
    /// Horizon of the backward integration from zero terminal data.
    pub ode_horizon: f64,
    pub ode_steps: usize,
    /// `(phi, psi)` at time zero from the backward integration.
    pub ode_phi: f64,
    pub ode_psi: f64,
}

impl RiccatiSolution {
    /// `max(|phi - phi_ode|, |psi - psi_ode|)`.
    pub fn ode_agreement(&self) -> f64 {
        (self.phi - self.ode_phi).abs().max((self.psi - self.ode_psi).abs())
    }

    /// Closed-loop drift slope `phi / (2c)`.
    pub fn kappa(&self, params: &ProductionPlanningParams) -> f64 {
        self.phi / (2.0 * params.c)
    }

    pub fn adjoint(&self, x: f64) -> f64 {
        self.phi * x + self.psi
    }
}

/// Right-hand sides of the time-dependent system in forward time:
/// `phi' = 2h + beta phi - phi^2/(2c)`,
/// `psi' = -2h x1 + beta psi - phi psi/(2c) - phi (u1 - eta)`.
fn riccati_rhs(p: &ProductionPlanningParams, phi: f64, psi: f64) -> (f64, f64) {
    let dphi = 2.0 * p.h + p.beta * phi - phi * phi / (2.0 * p.c);
    let dpsi = -2.0 * p.h * p.x1 + p.beta * psi - phi * psi / (2.0 * p.c) - phi * (p.u1 - p.eta);
    (dphi, dpsi)
}

/// Integrates the Riccati system backward from `phi(T) = psi(T) = 0` with
/// classical RK4 and returns `(phi(0), psi(0))`.
pub fn integrate_riccati(params: &ProductionPlanningParams, horizon: f64, steps: usize) -> (f64, f64) {
    let h = horizon / steps as f64;
    // Reversed time tau = T - t turns the terminal problem into an initial one.
    let f = |a: f64, b: f64| {
        let (da, db) = riccati_rhs(params, a, b);
        (-da, -db)
    };
    let (mut phi, mut psi) = (0.0, 0.0);
    for _ in 0..steps {
        let k1 = f(phi, psi);
        let k2 = f(phi + 0.5 * h * k1.0, psi + 0.5 * h * k1.1);
        let k3 = f(phi + 0.5 * h * k2.0, psi + 0.5 * h * k2.1);
        let k4 = f(phi + h * k3.0, psi + h * k3.1);
        phi += h / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0);
        psi += h / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1);
    }
    (phi, psi)
}

/// Stationary root of the Riccati system, selected by concavity
/// (`phi <= 0`), and cross-checked against a long backward integration.
pub fn riccati_oracle(params: &ProductionPlanningParams) -> Result<RiccatiSolution> {
    params.validate()?;
    let p = params;
    if !(p.beta > 0.0) {
        return Err(invalid("beta", "the Riccati oracle needs beta > 0"));
    }
    let (c, h, beta) = (p.c, p.h, p.beta);
    let disc = c * c * beta * beta + 4.0 * c * h;
    if !(disc >= 0.0) {
        return Err(SmpError::Riccati(format!("negative discriminant {disc}")));
    }
    // Written to avoid cancellation when h is small relative to c beta^2.
    let phi = -4.0 * c * h / (c * beta + disc.sqrt());
    if phi > 0.0 {
        return Err(SmpError::Riccati(format!("stationary root {phi} is not <= 0")));
    }
    let denom = beta - phi / (2.0 * c);
    let psi = (2.0 * h * p.x1 + phi * (p.u1 - p.eta)) / denom;
    let (r1, r2) = riccati_rhs(p, phi, psi);
    let algebraic_residual = r1.abs().max(r2.abs());

    // Both linearized rates are at least `denom`; integrate 40 e-folds.
    let ode_horizon = 40.0 / denom;
    let ode_steps = ((ode_horizon / 1e-3).ceil() as usize).max(1000);
    let (ode_phi, ode_psi) = integrate_riccati(p, ode_horizon, ode_steps);
    let sol = RiccatiSolution {
        phi,
        psi,
        algebraic_residual,
        ode_horizon,
        ode_steps,
        ode_phi,
        ode_psi,
    };
    let scale = 1.0 + phi.abs().max(psi.abs());
    if algebraic_residual > ALGEBRAIC_RESIDUAL * scale {
        return Err(SmpError::Riccati(format!("algebraic residual {algebraic_residual:.3e}")));
    }
    if sol.ode_agreement() > ODE_AGREEMENT * scale {
        return Err(SmpError::Riccati(format!(
            "backward integration disagrees with the stationary root by {:.3e}",
            sol.ode_agreement()
        )));
    }
    Ok(sol)
}

/// Feedback `u = u1 + (phi x + psi) / (2c)`, clipped to the box by the law.
pub fn riccati_feedback_law(params: &ProductionPlanningParams, sol: &RiccatiSolution) -> ControlLaw {
    let (u1, c, phi, psi) = (params.u1, params.c, sol.phi, sol.psi);
    ControlLaw::feedback(move |_t, x, out| out[0] = u1 + (phi * x[0] + psi) / (2.0 * c))
}

/// Closed-form adjoint `Y = phi x + psi` as a source for feedback laws.
pub fn riccati_adjoint(sol: &RiccatiSolution) -> Arc<dyn AdjointSource> {
    let (phi, psi) = (sol.phi, sol.psi);
    Arc::new(FnAdjoint(move |_step: usize, x: &[f64], out: &mut [f64]| out[0] = phi * x[0] + psi))
}

/// Closed-form `(Y, Z) = (phi x + psi, phi sigma)` for injection into a
/// solution object.
pub fn riccati_fields(params: &ProductionPlanningParams, sol: &RiccatiSolution) -> impl Fn(usize, &[f64], &mut [f64], &mut [f64]) + Send + Sync {
    let (phi, psi, sigma) = (sol.phi, sol.psi, params.sigma);
    move |_i, x, y, z| {
        y[0] = phi * x[0] + psi;
        z[0] = phi * sigma;
    }
}

/// Discounted cost `∫ e^{-beta t} [c (u - u1)^2 + h (x - x1)^2] dt` of the
/// Riccati feedback when `sigma = 0` and the box is inactive.
///
/// The closed-loop state is `x* + (x0 - x*) e^{kappa t}`, so both
/// deviations have the form `A + B e^{kappa t}` and integrate exactly.
pub fn deterministic_closed_loop_cost(params: &ProductionPlanningParams, sol: &RiccatiSolution) -> f64 {
    let p = params;
    let kappa = sol.kappa(p);
    let shift = p.u1 - p.eta + sol.psi / (2.0 * p.c);
    let x_star = -shift / kappa;
    let delta = p.x0 - x_star;
    let integral = |a: f64, b: f64| a * a / p.beta + 2.0 * a * b / (p.beta - kappa) + b * b / (p.beta - 2.0 * kappa);
    // u - u1 = kappa x + psi/(2c); x - x1 = (x* - x1) + delta e^{kappa t}.
    let u_part = integral(kappa * x_star + sol.psi / (2.0 * p.c), kappa * delta);
    let x_part = integral(x_star - p.x1, delta);
    p.c * u_part + p.h * x_part
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn default_root_matches_closed_form() {
        let p = ProductionPlanningParams::default();
        let s = riccati_oracle(&p).unwrap();
        assert_relative_eq!(s.phi, 1.0 - 5f64.sqrt(), epsilon = 1e-12);
        assert!(s.ode_agreement() < 1e-6);
        assert!(s.algebraic_residual < 1e-12);
    }

    #[test]
    fn no_state_cost_means_no_feedback() {
        let p = ProductionPlanningParams { h: 1e-14, ..Default::default() };
        let s = riccati_oracle(&p).unwrap();
        assert!(s.phi.abs() < 1e-12);
    }

    #[test]
    fn stationary_control_and_reward_at_target() {
        let p = ProductionPlanningParams::default();
        let prob = production_planning_problem(&p).unwrap();
        assert_eq!(prob.beta_threshold(), 0.0);
        assert_eq!(prob.hamiltonian(&[p.x1], &[p.u1], &[0.0], &[0.0]), 0.0);
        let mut u = [0.0];
        assert!(prob.field.stationary_control(&[0.3], &[0.8], &[0.0], &mut u));
        assert_relative_eq!(u[0], 0.8 / 2.0 + 1.0);
    }

    #[test]
    fn validation_rejects_bad_weights() {
        let p = ProductionPlanningParams { c: 0.0, ..Default::default() };
        assert!(production_planning_problem(&p).is_err());
    }
}
