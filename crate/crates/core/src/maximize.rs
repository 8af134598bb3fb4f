//! Pointwise maximization of the Hamiltonian over the control box.
//!
//! A registered closed-form stationary point is clipped to the box
//! coordinate-wise. Without one, a projected golden-section search (k = 1)
//! or cyclic coordinate ascent (k > 1) is run to `1e-10` in `u`.
//! The returned certificate compares the maximizer against a 101-point grid
//! along every non-degenerate coordinate.

use crate::problem::{buf, DiscountedProblem};

/// Search tolerance in `u`.
pub const U_TOL: f64 = 1e-10;
/// Grid points per active coordinate in the certificate.
pub const GRID_POINTS: usize = 101;
/// Sampled second differences above this flag non-concavity.
pub const CONCAVITY_SLACK: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapCertificate {
    /// `H(u*) - max over the grid`; must be `>= -1e-8`.
    pub gap: f64,
    /// A positive sampled second difference was seen along some coordinate.
    pub non_concave: bool,
    /// Whether the closed-form stationary point was used.
    pub analytic: bool,
}

impl GapCertificate {
    pub fn dominates_grid(&self) -> bool {
        self.gap >= -1e-8
    }
}

/// Maximizer of `u -> H(x, u, y, z)` over the control box, written to `out`.
/// Returns whether the closed-form stationary point was used.
pub fn argmax_control_into(problem: &DiscountedProblem, x: &[f64], y: &[f64], z: &[f64], out: &mut [f64]) -> bool {
    if problem.field.stationary_control(x, y, z, out) && out.iter().all(|v| !v.is_nan()) {
        problem.domain.clip(out);
        return true;
    }
    let lo = problem.domain.lower();
    let hi = problem.domain.upper();
    let k = lo.len();
    for j in 0..k {
        out[j] = 0.5 * (lo[j] + hi[j]);
    }
    let mut u = buf(k);
    u.copy_from_slice(out);
    let sweeps = if k == 1 { 1 } else { 200 };
    for _ in 0..sweeps {
        let mut moved = 0.0f64;
        for j in 0..k {
            let before = u[j];
            u[j] = golden_section(lo[j], hi[j], |v| {
                let mut w = u.clone();
                w[j] = v;
                problem.hamiltonian(x, &w, y, z)
            });
            moved = moved.max((u[j] - before).abs());
        }
        if moved <= U_TOL {
            break;
        }
    }
    out.copy_from_slice(&u);
    false
}

/// Maximizer plus grid-dominance certificate.
pub fn maximize_hamiltonian_in_u(problem: &DiscountedProblem, x: &[f64], y: &[f64], z: &[f64]) -> (Vec<f64>, GapCertificate) {
    let k = problem.domain.dim();
    let mut u = vec![0.0; k];
    let analytic = argmax_control_into(problem, x, y, z, &mut u);
    let h_star = problem.hamiltonian(x, &u, y, z);
    let lo = problem.domain.lower();
    let hi = problem.domain.upper();
    let mut grid_max = f64::NEG_INFINITY;
    let mut non_concave = false;
    let mut w = u.clone();
    for j in 0..k {
        if hi[j] <= lo[j] {
            continue;
        }
        let step = (hi[j] - lo[j]) / (GRID_POINTS - 1) as f64;
        let vals: Vec<f64> = (0..GRID_POINTS)
            .map(|g| {
                w[j] = if g == GRID_POINTS - 1 { hi[j] } else { lo[j] + g as f64 * step };
                problem.hamiltonian(x, &w, y, z)
            })
            .collect();
        w[j] = u[j];
        grid_max = vals.iter().copied().fold(grid_max, f64::max);
        non_concave |= vals
            .windows(3)
            .any(|t| t[0] - 2.0 * t[1] + t[2] > CONCAVITY_SLACK * (1.0 + t[1].abs()));
    }
    let gap = if grid_max.is_finite() { h_star - grid_max } else { 0.0 };
    if non_concave {
        log::warn!("Hamiltonian not concave in u at x={x:?} y={y:?}");
    }
    (
        u,
        GapCertificate {
            gap,
            non_concave,
            analytic,
        },
    )
}

/// Golden-section maximization of a concave function on `[a, b]`, with the
/// endpoints checked so that boundary maxima are returned exactly.
fn golden_section<F: Fn(f64) -> f64>(a: f64, b: f64, f: F) -> f64 {
    if b <= a {
        return a;
    }
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let (mut lo, mut hi) = (a, b);
    let mut c = hi - r * (hi - lo);
    let mut d = lo + r * (hi - lo);
    let mut fc = f(c);
    let mut fd = f(d);
    while hi - lo > U_TOL {
        if fc >= fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - r * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + r * (hi - lo);
            fd = f(d);
        }
    }
    let mid = 0.5 * (lo + hi);
    [(mid, f(mid)), (a, f(a)), (b, f(b))]
        .into_iter()
        .filter(|(_, v)| !v.is_nan())
        .fold((mid, f64::NEG_INFINITY), |best, cand| if cand.1 > best.1 { cand } else { best })
        .0
}
