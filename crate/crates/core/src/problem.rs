//! Discounted control problems and their Hamiltonians.
//!
//! A problem couples a [`CoefficientField`] (drift `b`, diffusion `sigma`,
//! running reward `f` and their state gradients) with a control box, a
//! discount rate and the declared monotonicity/Lipschitz constants.
//! The library always maximizes `E ∫ e^{-beta t} f(X_t, u_t) dt`; cost
//! minimization problems register `-cost` as `f`.
//!
//! Array conventions: diffusion and adjoint `z` values are `n x d` row-major
//! (`sigma[l * d + i]` is row `l`, Brownian component `i`); the drift
//! Jacobian is `n x n` with `jac[i * n + j] = ∂b_i/∂x_j`; the diffusion
//! Jacobian is `n x d x n` with `djac[(l * d + i) * n + j] = ∂sigma_{l,i}/∂x_j`.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::error::{invalid, Result, SmpError};

pub(crate) type Buf = SmallVec<[f64; 8]>;

pub(crate) fn buf(len: usize) -> Buf {
    SmallVec::from_elem(0.0, len)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    /// State dimension `n`.
    pub state: usize,
    /// Brownian dimension `d`.
    pub noise: usize,
    /// Control dimension `k`.
    pub control: usize,
}

impl Dims {
    pub fn scalar() -> Self {
        Dims {
            state: 1,
            noise: 1,
            control: 1,
        }
    }
}

/// Coefficients of a controlled diffusion with constant-in-time data.
pub trait CoefficientField: Send + Sync + fmt::Debug {
    fn dims(&self) -> Dims;

    fn drift(&self, x: &[f64], u: &[f64], out: &mut [f64]);

    /// `n x d` row-major.
    fn diffusion(&self, x: &[f64], u: &[f64], out: &mut [f64]);

    /// Integrand `f` of the maximized functional.
    fn running_reward(&self, x: &[f64], u: &[f64]) -> f64;

    fn drift_jacobian(&self, x: &[f64], u: &[f64], out: &mut [f64]);

    /// `n x d x n`, see module docs.
    fn diffusion_jacobian(&self, x: &[f64], u: &[f64], out: &mut [f64]);

    fn reward_gradient(&self, x: &[f64], u: &[f64], out: &mut [f64]);

    /// Unconstrained stationary point of `u -> H(x, u, y, z)` when known in
    /// closed form. Entries may be `±inf` when the Hamiltonian is monotone
    /// in that coordinate. Returns `false` when no formula is registered.
    fn stationary_control(&self, _x: &[f64], _y: &[f64], _z: &[f64], _out: &mut [f64]) -> bool {
        false
    }

    /// For scalar fields of the form `b(x,u) = l(u) x + r(x,u)`,
    /// `sigma(x,u) = s(u) x`, returns `(l(u), s(u))`. Enables the
    /// positivity-preserving log-Euler hybrid step.
    fn log_split(&self, _u: &[f64]) -> Option<(f64, f64)> {
        None
    }
}

/// Box `U = [lower, upper]` of admissible control values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlDomain {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl ControlDomain {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(SmpError::Dimension {
                context: "control bounds",
                expected: lower.len(),
                got: upper.len(),
            });
        }
        for (l, u) in lower.iter().zip(&upper) {
            if !(l.is_finite() && u.is_finite()) {
                return Err(invalid("control_domain", "bounds must be finite"));
            }
            if l > u {
                return Err(invalid("control_domain", format!("lower {l} exceeds upper {u}")));
            }
        }
        Ok(Self { lower, upper })
    }

    pub fn interval(lower: f64, upper: f64) -> Result<Self> {
        Self::new(vec![lower], vec![upper])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }
    pub fn lower(&self) -> &[f64] {
        &self.lower
    }
    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn clip(&self, u: &mut [f64]) {
        for ((v, l), h) in u.iter_mut().zip(&self.lower).zip(&self.upper) {
            *v = if v.is_nan() { *l } else { v.clamp(*l, *h) };
        }
    }

    pub fn contains(&self, u: &[f64]) -> bool {
        u.iter()
            .zip(&self.lower)
            .zip(&self.upper)
            .all(|((v, l), h)| *v >= *l && *v <= *h)
    }
}

/// Declared constants of the monotonicity and Lipschitz hypotheses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssumptionConstants {
    /// One-sided monotonicity of the drift in `x`.
    pub mu1: f64,
    /// Upper bound of the quadratic form of `∇x b`.
    pub mu2: f64,
    /// Lipschitz constant of the diffusion in `x`.
    pub lip: f64,
    /// Bound on `Σ_i ‖∇x sigma^i‖`.
    pub m: f64,
}

impl AssumptionConstants {
    pub fn new(mu1: f64, mu2: f64, lip: f64, m: f64) -> Result<Self> {
        if lip < 0.0 || m < 0.0 {
            return Err(invalid("constants", "L and M must be non-negative"));
        }
        Ok(Self { mu1, mu2, lip, m })
    }

    /// `max{2 mu1 + 2 L^2, 2 mu2 + 2 M^2}`.
    pub fn beta_threshold(&self) -> f64 {
        (2.0 * self.mu1 + 2.0 * self.lip * self.lip).max(2.0 * self.mu2 + 2.0 * self.m * self.m)
    }

    /// `2 mu1 + 2 L^2`, the forward a-priori estimate threshold.
    pub fn forward_threshold(&self) -> f64 {
        2.0 * self.mu1 + 2.0 * self.lip * self.lip
    }

    /// `2 mu2 + 2 M^2`, the adjoint threshold.
    pub fn adjoint_threshold(&self) -> f64 {
        2.0 * self.mu2 + 2.0 * self.m * self.m
    }
}

/// Admissible state region `G`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateRegion {
    Whole,
    /// Open positive orthant (the half-line `(0, inf)` when `n = 1`).
    Positive,
}

impl StateRegion {
    pub fn contains(&self, x: &[f64]) -> bool {
        match self {
            StateRegion::Whole => x.iter().all(|v| v.is_finite()),
            StateRegion::Positive => x.iter().all(|v| v.is_finite() && *v > 0.0),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DiscountedProblem {
    pub name: String,
    pub field: Arc<dyn CoefficientField>,
    pub domain: ControlDomain,
    pub beta: f64,
    pub constants: AssumptionConstants,
    pub region: StateRegion,
    pub x0: Vec<f64>,
}

impl DiscountedProblem {
    pub fn new(
        name: impl Into<String>,
        field: Arc<dyn CoefficientField>,
        domain: ControlDomain,
        beta: f64,
        constants: AssumptionConstants,
        region: StateRegion,
        x0: Vec<f64>,
    ) -> Result<Self> {
        let dims = field.dims();
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(invalid("beta", format!("must be finite and > 0, got {beta}")));
        }
        if domain.dim() != dims.control {
            return Err(SmpError::Dimension {
                context: "control domain",
                expected: dims.control,
                got: domain.dim(),
            });
        }
        if x0.len() != dims.state {
            return Err(SmpError::Dimension {
                context: "initial state",
                expected: dims.state,
                got: x0.len(),
            });
        }
        if !region.contains(&x0) {
            return Err(invalid("x0", "initial state lies outside the state region"));
        }
        Ok(Self {
            name: name.into(),
            field,
            domain,
            beta,
            constants,
            region,
            x0,
        })
    }

    pub fn dims(&self) -> Dims {
        self.field.dims()
    }

    /// `max{2 mu1 + 2 L^2, 2 mu2 + 2 M^2}`; the problem is strictly well posed
    /// when `beta` exceeds it.
    pub fn beta_threshold(&self) -> f64 {
        self.constants.beta_threshold()
    }

    pub fn is_well_posed(&self) -> bool {
        self.beta > self.beta_threshold()
    }

    /// `H(x,u,y,z) = <b,y> + Tr(sigma' z) + f`, the Hamiltonian without the
    /// discount correction.
    pub fn hamiltonian_plain(&self, x: &[f64], u: &[f64], y: &[f64], z: &[f64]) -> f64 {
        let d = self.dims();
        let mut b = buf(d.state);
        let mut s = buf(d.state * d.noise);
        self.field.drift(x, u, &mut b);
        self.field.diffusion(x, u, &mut s);
        let by: f64 = b.iter().zip(y).map(|(a, c)| a * c).sum();
        let sz: f64 = s.iter().zip(z).map(|(a, c)| a * c).sum();
        by + sz + self.field.running_reward(x, u)
    }

    /// Generalized Hamiltonian `<b,y> + Tr(sigma' z) + f - beta <x,y>`.
    pub fn hamiltonian(&self, x: &[f64], u: &[f64], y: &[f64], z: &[f64]) -> f64 {
        let xy: f64 = x.iter().zip(y).map(|(a, c)| a * c).sum();
        self.hamiltonian_plain(x, u, y, z) - self.beta * xy
    }

    /// Adjoint driver `∇x b' y + Dx sigma · z + ∇x f - beta y`, with the
    /// transpose action of the drift Jacobian on `y`.
    pub fn grad_x_hamiltonian(&self, x: &[f64], u: &[f64], y: &[f64], z: &[f64], out: &mut [f64]) {
        let d = self.dims();
        let n = d.state;
        let nd = n * d.noise;
        let mut jac = buf(n * n);
        let mut djac = buf(nd * n);
        self.field.drift_jacobian(x, u, &mut jac);
        self.field.diffusion_jacobian(x, u, &mut djac);
        self.field.reward_gradient(x, u, out);
        for j in 0..n {
            let mut acc = -self.beta * y[j];
            for i in 0..n {
                acc += jac[i * n + j] * y[i];
            }
            for li in 0..nd {
                acc += djac[li * n + j] * z[li];
            }
            out[j] += acc;
        }
    }
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    /// `b = sigma = 0`, `f = -(x - 1)^2 - (u - 0.5)^2`.
    #[derive(Debug)]
    pub struct ZeroField;

    impl CoefficientField for ZeroField {
        fn dims(&self) -> Dims {
            Dims::scalar()
        }
        fn drift(&self, _x: &[f64], _u: &[f64], out: &mut [f64]) {
            out[0] = 0.0;
        }
        fn diffusion(&self, _x: &[f64], _u: &[f64], out: &mut [f64]) {
            out[0] = 0.0;
        }
        fn running_reward(&self, x: &[f64], u: &[f64]) -> f64 {
            -(x[0] - 1.0).powi(2) - (u[0] - 0.5).powi(2)
        }
        fn drift_jacobian(&self, _x: &[f64], _u: &[f64], out: &mut [f64]) {
            out[0] = 0.0;
        }
        fn diffusion_jacobian(&self, _x: &[f64], _u: &[f64], out: &mut [f64]) {
            out[0] = 0.0;
        }
        fn reward_gradient(&self, x: &[f64], _u: &[f64], out: &mut [f64]) {
            out[0] = -2.0 * (x[0] - 1.0);
        }
    }

    pub fn zero_problem() -> DiscountedProblem {
        DiscountedProblem::new(
            "zero",
            Arc::new(ZeroField),
            ControlDomain::interval(0.0, 1.0).unwrap(),
            1.0,
            AssumptionConstants::new(0.0, 0.0, 0.0, 0.0).unwrap(),
            StateRegion::Whole,
            vec![0.3],
        )
        .unwrap()
    }

    /// Two-dimensional linear field with a non-symmetric drift matrix and
    /// state-dependent diffusion, used to exercise the transpose convention.
    #[derive(Debug)]
    pub struct Linear2;

    const A: [[f64; 2]; 2] = [[-1.0, 0.7], [0.2, -0.5]];

    impl CoefficientField for Linear2 {
        fn dims(&self) -> Dims {
            Dims {
                state: 2,
                noise: 2,
                control: 2,
            }
        }
        fn drift(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
            for i in 0..2 {
                out[i] = A[i][0] * x[0] + A[i][1] * x[1] + u[i];
            }
        }
        fn diffusion(&self, x: &[f64], _u: &[f64], out: &mut [f64]) {
            out[0] = 0.3 * x[0];
            out[1] = 0.1;
            out[2] = 0.05 * x[1];
            out[3] = 0.2 * x[0];
        }
        fn running_reward(&self, x: &[f64], u: &[f64]) -> f64 {
            -(x[0] * x[0] + 2.0 * x[1] * x[1]) - (u[0] * u[0] + u[1] * u[1])
        }
        fn drift_jacobian(&self, _x: &[f64], _u: &[f64], out: &mut [f64]) {
            out[0] = A[0][0];
            out[1] = A[0][1];
            out[2] = A[1][0];
            out[3] = A[1][1];
        }
        fn diffusion_jacobian(&self, _x: &[f64], _u: &[f64], out: &mut [f64]) {
            out.iter_mut().for_each(|v| *v = 0.0);
            out[0] = 0.3; // d sigma_00 / dx0
            out[2 * 2 + 1] = 0.05; // d sigma_10 / dx1
            out[3 * 2] = 0.2; // d sigma_11 / dx0
        }
        fn reward_gradient(&self, x: &[f64], _u: &[f64], out: &mut [f64]) {
            out[0] = -2.0 * x[0];
            out[1] = -4.0 * x[1];
        }
    }

    pub fn linear2_problem() -> DiscountedProblem {
        DiscountedProblem::new(
            "linear2",
            Arc::new(Linear2),
            ControlDomain::new(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap(),
            2.0,
            AssumptionConstants::new(0.0, 0.0, 0.4, 0.6).unwrap(),
            StateRegion::Whole,
            vec![0.5, -0.2],
        )
        .unwrap()
    }
}
