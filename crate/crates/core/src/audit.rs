//! Sampling audits of the declared hypotheses and of Hamiltonian concavity.
//!
//! Symbolic verification is out of reach for general coefficient fields, so
//! every inequality is evaluated on a reproducible random sample of the
//! region and the worst observed ratio is compared with the declared
//! constant.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::maximize::maximize_hamiltonian_in_u;
use crate::noise::CounterNormal;
use crate::problem::{buf, DiscountedProblem, StateRegion};
use crate::report::{Status, VerificationReport};

/// Slack allowed on every sampled inequality.
pub const AUDIT_SLACK: f64 = 1e-9;
/// Pairs closer than this are excluded from ratios.
pub const MIN_SEPARATION: f64 = 1e-12;
/// Relative finite-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Tolerance on coefficient gradients against central differences.
pub const FIELD_GRAD_TOL: f64 = 1e-5;

/// Sampling plan over `G x G x U`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSpec {
    pub x_lower: Vec<f64>,
    pub x_upper: Vec<f64>,
    /// Control sub-box; defaults to the problem's box.
    pub u_bounds: Option<(Vec<f64>, Vec<f64>)>,
    pub n_points: usize,
    pub seed: u64,
}

impl SampleSpec {
    pub fn new(x_lower: Vec<f64>, x_upper: Vec<f64>, n_points: usize, seed: u64) -> Self {
        Self {
            x_lower,
            x_upper,
            u_bounds: None,
            n_points,
            seed,
        }
    }

    pub fn with_controls(mut self, lower: Vec<f64>, upper: Vec<f64>) -> Self {
        self.u_bounds = Some((lower, upper));
        self
    }

    fn draw(&self, rng: &CounterNormal, stream: u64, idx: u64, lo: &[f64], hi: &[f64], out: &mut [f64]) {
        for j in 0..lo.len() {
            let v = rng.uniform(stream, idx * lo.len() as u64 + j as u64);
            out[j] = lo[j] + v * (hi[j] - lo[j]);
        }
    }
}

fn control_bounds<'a>(p: &'a DiscountedProblem, spec: &'a SampleSpec) -> (&'a [f64], &'a [f64]) {
    match &spec.u_bounds {
        Some((l, u)) => (l, u),
        None => (p.domain.lower(), p.domain.upper()),
    }
}

fn worst_report(name: &str, worst: f64, declared: f64, n: usize, excluded: usize, what: &str) -> VerificationReport {
    let ok = worst <= declared + AUDIT_SLACK * (1.0 + declared.abs());
    VerificationReport::new(name, Status::from_bool(ok))
        .with_stat(worst, declared)
        .with_sample(n, 0.0)
        .with_notes(format!("worst observed {what} vs declared constant; {excluded} degenerate pairs excluded"))
}

/// Audits continuity/finiteness (H1), drift monotonicity (H2), diffusion
/// Lipschitz (H3), drift-Jacobian quadratic form (H5), diffusion-gradient
/// bound (H6) and finite-difference consistency of the supplied gradients.
pub fn validate_assumptions(problem: &DiscountedProblem, spec: &SampleSpec) -> Vec<VerificationReport> {
    let dims = problem.dims();
    let (n, d, k) = (dims.state, dims.noise, dims.control);
    let c = problem.constants;
    let rng = CounterNormal::new(spec.seed);
    let (ul, uh) = control_bounds(problem, spec);

    let mut x1 = buf(n);
    let mut x2 = buf(n);
    let mut v = buf(n);
    let mut u = buf(k);
    let (mut b1, mut b2) = (buf(n), buf(n));
    let (mut s1, mut s2) = (buf(n * d), buf(n * d));
    let mut jac = buf(n * n);
    let mut djac = buf(n * d * n);

    let mut worst_h2 = f64::NEG_INFINITY;
    let mut worst_h3 = 0.0f64;
    let mut worst_h5 = f64::NEG_INFINITY;
    let mut worst_h6 = 0.0f64;
    let mut excluded = 0usize;
    let mut non_finite = 0usize;
    let mut worst_grad = 0.0f64;

    for i in 0..spec.n_points as u64 {
        spec.draw(&rng, 0, i, &spec.x_lower, &spec.x_upper, &mut x1);
        spec.draw(&rng, 1, i, &spec.x_lower, &spec.x_upper, &mut x2);
        spec.draw(&rng, 2, i, ul, uh, &mut u);
        if problem.region == StateRegion::Positive {
            debug_assert!(x1.iter().chain(x2.iter()).all(|v| *v > 0.0));
        }
        problem.field.drift(&x1, &u, &mut b1);
        problem.field.drift(&x2, &u, &mut b2);
        problem.field.diffusion(&x1, &u, &mut s1);
        problem.field.diffusion(&x2, &u, &mut s2);
        let f1 = problem.field.running_reward(&x1, &u);
        if !(b1.iter().chain(s1.iter()).all(|v| v.is_finite()) && f1.is_finite()) {
            non_finite += 1;
            continue;
        }
        let dx: f64 = x1.iter().zip(x2.iter()).map(|(a, b)| (a - b).powi(2)).sum();
        if dx.sqrt() < MIN_SEPARATION {
            excluded += 1;
        } else {
            let inner: f64 = (0..n).map(|j| (x1[j] - x2[j]) * (b1[j] - b2[j])).sum();
            worst_h2 = worst_h2.max(inner / dx);
            let ds: f64 = s1.iter().zip(s2.iter()).map(|(a, b)| (a - b).powi(2)).sum();
            worst_h3 = worst_h3.max(ds.sqrt() / dx.sqrt());
        }

        problem.field.drift_jacobian(&x1, &u, &mut jac);
        let sym = DMatrix::from_fn(n, n, |r, q| 0.5 * (jac[r * n + q] + jac[q * n + r]));
        let top = SymmetricEigen::new(sym).eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        worst_h5 = worst_h5.max(top);

        problem.field.diffusion_jacobian(&x1, &u, &mut djac);
        let mut total = 0.0;
        for col in 0..d {
            let mut fro = 0.0;
            for l in 0..n {
                for j in 0..n {
                    fro += djac[(l * d + col) * n + j].powi(2);
                }
            }
            total += fro.sqrt();
        }
        worst_h6 = worst_h6.max(total);

        worst_grad = worst_grad.max(field_gradient_error(problem, &x1, &u, &mut v));
    }

    let n_pts = spec.n_points;
    vec![
        VerificationReport::new("H1 finite coefficients", Status::from_bool(non_finite == 0))
            .with_stat(non_finite as f64, 0.0)
            .with_sample(n_pts, 0.0)
            .with_notes("count of sample points with non-finite b, sigma or f"),
        worst_report("H2 drift monotonicity (mu1)", worst_h2, c.mu1, n_pts, excluded, "<dx,db>/|dx|^2"),
        worst_report("H3 diffusion Lipschitz (L)", worst_h3, c.lip, n_pts, excluded, "|dsigma|/|dx|"),
        worst_report("H5 drift Jacobian form (mu2)", worst_h5, c.mu2, n_pts, 0, "top eigenvalue of sym(∇x b)"),
        worst_report("H6 diffusion gradient (M)", worst_h6, c.m, n_pts, 0, "sum_i |∇x sigma^i|_F"),
        VerificationReport::new("coefficient gradients vs central differences", Status::from_bool(worst_grad <= FIELD_GRAD_TOL))
            .with_stat(worst_grad, FIELD_GRAD_TOL)
            .with_sample(n_pts, 0.0)
            .with_notes(format!("max |analytic - fd| / (1 + |analytic|), step {FD_STEP}*(1+|x|)")),
    ]
}

/// Worst relative discrepancy of `∇x b`, `∇x sigma` and `∇x f` against
/// central differences of `b`, `sigma`, `f` at one point.
fn field_gradient_error(problem: &DiscountedProblem, x: &[f64], u: &[f64], scratch: &mut [f64]) -> f64 {
    let dims = problem.dims();
    let (n, d) = (dims.state, dims.noise);
    let f = &problem.field;
    let mut jac = buf(n * n);
    let mut djac = buf(n * d * n);
    let mut gf = buf(n);
    f.drift_jacobian(x, u, &mut jac);
    f.diffusion_jacobian(x, u, &mut djac);
    f.reward_gradient(x, u, &mut gf);
    let (mut bp, mut bm) = (buf(n), buf(n));
    let (mut sp, mut sm) = (buf(n * d), buf(n * d));
    let rel = |a: f64, b: f64| (a - b).abs() / (1.0 + a.abs());
    let mut worst = 0.0f64;
    for j in 0..n {
        let h = FD_STEP * (1.0 + x[j].abs());
        scratch.copy_from_slice(x);
        scratch[j] = x[j] + h;
        let xp: Vec<f64> = scratch.to_vec();
        scratch[j] = x[j] - h;
        let xm: Vec<f64> = scratch.to_vec();
        if !(problem.region.contains(&xp) && problem.region.contains(&xm)) {
            continue;
        }
        f.drift(&xp, u, &mut bp);
        f.drift(&xm, u, &mut bm);
        for i in 0..n {
            worst = worst.max(rel(jac[i * n + j], (bp[i] - bm[i]) / (2.0 * h)));
        }
        f.diffusion(&xp, u, &mut sp);
        f.diffusion(&xm, u, &mut sm);
        for li in 0..n * d {
            worst = worst.max(rel(djac[li * n + j], (sp[li] - sm[li]) / (2.0 * h)));
        }
        let fd = (f.running_reward(&xp, u) - f.running_reward(&xm, u)) / (2.0 * h);
        worst = worst.max(rel(gf[j], fd));
    }
    worst
}

/// Compares the discount rate with `max{2mu1+2L^2, 2mu2+2M^2}`.
pub fn check_beta_threshold(problem: &DiscountedProblem) -> VerificationReport {
    let thr = problem.beta_threshold();
    VerificationReport::new("beta above threshold", Status::from_bool(problem.beta > thr))
        .with_stat(problem.beta, thr)
        .with_notes("beta must exceed max{2mu1+2L^2, 2mu2+2M^2}")
}

/// Worst relative error of `grad_x_hamiltonian` against central differences
/// of `hamiltonian` (step `1e-5 (1 + |x|)`), over the sampled points.
pub fn hamiltonian_gradient_error(problem: &DiscountedProblem, points: &[(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)]) -> f64 {
    let n = problem.dims().state;
    let mut g = vec![0.0; n];
    let mut worst = 0.0f64;
    for (x, u, y, z) in points {
        problem.grad_x_hamiltonian(x, u, y, z, &mut g);
        for j in 0..n {
            let h = FD_STEP * (1.0 + x[j].abs());
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += h;
            xm[j] -= h;
            let fd = (problem.hamiltonian(&xp, u, y, z) - problem.hamiltonian(&xm, u, y, z)) / (2.0 * h);
            worst = worst.max((fd - g[j]).abs() / g[j].abs().max(1.0));
        }
    }
    worst
}

/// Midpoint-concavity probe of `(x, u) -> H(x, u, y, z)` for each supplied
/// `(y, z)`, using `pairs_per_point` random pairs from the sampled box.
pub fn concavity_probe(
    problem: &DiscountedProblem,
    spec: &SampleSpec,
    yz: &[(Vec<f64>, Vec<f64>)],
    pairs_per_point: usize,
) -> VerificationReport {
    let dims = problem.dims();
    let (n, k) = (dims.state, dims.control);
    let rng = CounterNormal::new(spec.seed);
    let (ul, uh) = control_bounds(problem, spec);
    let (mut xp, mut xq, mut xm) = (buf(n), buf(n), buf(n));
    let (mut up, mut uq, mut um) = (buf(k), buf(k), buf(k));
    let mut violations = 0usize;
    let mut worst = 0.0f64;
    let mut total = 0usize;
    for (pi, (y, z)) in yz.iter().enumerate() {
        for r in 0..pairs_per_point as u64 {
            let idx = pi as u64 * pairs_per_point as u64 + r;
            spec.draw(&rng, 10, idx, &spec.x_lower, &spec.x_upper, &mut xp);
            spec.draw(&rng, 11, idx, &spec.x_lower, &spec.x_upper, &mut xq);
            spec.draw(&rng, 12, idx, ul, uh, &mut up);
            spec.draw(&rng, 13, idx, ul, uh, &mut uq);
            for j in 0..n {
                xm[j] = 0.5 * (xp[j] + xq[j]);
            }
            for j in 0..k {
                um[j] = 0.5 * (up[j] + uq[j]);
            }
            let hp = problem.hamiltonian(&xp, &up, y, z);
            let hq = problem.hamiltonian(&xq, &uq, y, z);
            let hm = problem.hamiltonian(&xm, &um, y, z);
            total += 1;
            let deficit = 0.5 * (hp + hq) - hm;
            if deficit > AUDIT_SLACK {
                violations += 1;
                worst = worst.max(deficit);
            }
        }
    }
    VerificationReport::new("concavity of H in (x,u)", Status::from_bool(violations == 0))
        .with_stat(violations as f64, 0.0)
        .with_sample(total, 0.0)
        .with_notes(format!(
            "midpoint violations over {} (y,z) points; worst deficit {worst:.3e}",
            yz.len()
        ))
}

/// Midpoint-concavity probe of the maximized Hamiltonian
/// `x -> max_u H(x, u, y, z)` for each supplied `(y, z)`.
///
/// This is Arrow's condition: it suffices for the sufficiency argument when
/// joint concavity in `(x, u)` fails, as for a bilinear `x u y` term.
pub fn maximized_concavity_probe(
    problem: &DiscountedProblem,
    spec: &SampleSpec,
    yz: &[(Vec<f64>, Vec<f64>)],
    pairs_per_point: usize,
) -> VerificationReport {
    let n = problem.dims().state;
    let rng = CounterNormal::new(spec.seed);
    let (mut xp, mut xq, mut xm) = (buf(n), buf(n), buf(n));
    let hmax = |x: &[f64], y: &[f64], z: &[f64]| {
        let (u, _) = maximize_hamiltonian_in_u(problem, x, y, z);
        problem.hamiltonian(x, &u, y, z)
    };
    let mut violations = 0usize;
    let mut worst = 0.0f64;
    let mut total = 0usize;
    for (pi, (y, z)) in yz.iter().enumerate() {
        for r in 0..pairs_per_point as u64 {
            let idx = pi as u64 * pairs_per_point as u64 + r;
            spec.draw(&rng, 20, idx, &spec.x_lower, &spec.x_upper, &mut xp);
            spec.draw(&rng, 21, idx, &spec.x_lower, &spec.x_upper, &mut xq);
            for j in 0..n {
                xm[j] = 0.5 * (xp[j] + xq[j]);
            }
            let (hp, hq, hm) = (hmax(&xp, y, z), hmax(&xq, y, z), hmax(&xm, y, z));
            total += 1;
            // The inner maximization is exact only to its own tolerance.
            let deficit = 0.5 * (hp + hq) - hm;
            if deficit > AUDIT_SLACK * (1.0 + hm.abs()) {
                violations += 1;
                worst = worst.max(deficit);
            }
        }
    }
    VerificationReport::new("concavity of max_u H in x", Status::from_bool(violations == 0))
        .with_stat(violations as f64, 0.0)
        .with_sample(total, 0.0)
        .with_notes(format!(
            "midpoint violations over {} (y,z) points; worst deficit {worst:.3e}",
            yz.len()
        ))
}
