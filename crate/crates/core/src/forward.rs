//! Forward SDE simulation on a uniform grid.
//!
//! Steps are Euler-Maruyama. For positive scalar states whose field
//! provides [`CoefficientField::log_split`] the linear part is stepped
//! exactly in log coordinates and the drift remainder is added explicitly,
//! which keeps multiplicative-noise paths away from zero. Any step that
//! still lands at or below zero is floored at `1e-12` and flagged; a step
//! that produces a non-finite value or `|X| > 1e8` freezes the path.
//!
//! Brownian increments come from [`CounterNormal`], so coupled simulations
//! (a priori estimate, sandwich) regenerate identical noise per path
//! instead of storing it, and the long positivity scans stream.

use serde::Serialize;

use crate::error::{invalid, Result, SmpError};
use crate::exec::{chunked_reduce, map_indices, Execution, CHUNK};
use crate::grid::TimeGrid;
use crate::law::ControlLaw;
use crate::noise::CounterNormal;
use crate::problem::{buf, Buf, Dims, DiscountedProblem, StateRegion};
use crate::report::{mean_se, Status, VerificationReport};

pub const POSITIVITY_FLOOR: f64 = 1e-12;
pub const EXPLOSION_GUARD: f64 = 1e8;
/// Fraction of exploded paths above which a simulation is rejected.
pub const MAX_EXPLODED_FRACTION: f64 = 0.01;
/// Pointwise slack of the sandwich comparison.
pub const SANDWICH_SLACK: f64 = 1e-9;
/// Allowed fraction of sandwich violations (discretization allowance).
pub const SANDWICH_TOLERANCE: f64 = 1e-3;

/// Simulation settings shared by the forward and verification layers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimSpec {
    pub grid: TimeGrid,
    pub n_paths: usize,
    pub seed: u64,
    pub exec: Execution,
}

impl SimSpec {
    pub fn new(grid: TimeGrid, n_paths: usize, seed: u64) -> Self {
        Self {
            grid,
            n_paths,
            seed,
            exec: Execution::default(),
        }
    }

    pub fn with_exec(mut self, exec: Execution) -> Self {
        self.exec = exec;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// Per-path exit flags.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct PathFlags {
    /// Some unclipped step left the state region and was floored.
    pub left_region: bool,
    /// The path hit the explosion guard and was frozen.
    pub exploded: bool,
}

impl PathFlags {
    pub fn is_clean(&self) -> bool {
        !self.left_region && !self.exploded
    }
}

/// Simulated states `[paths x (steps+1) x n]` and applied controls
/// `[paths x steps x k]`.
#[derive(Debug, Clone)]
pub struct PathEnsemble {
    grid: TimeGrid,
    dims: Dims,
    seed: u64,
    n_paths: usize,
    states: Vec<f64>,
    controls: Vec<f64>,
    flags: Vec<PathFlags>,
}

impl PathEnsemble {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }
    pub fn dims(&self) -> Dims {
        self.dims
    }
    /// Seed of the Brownian increments driving the ensemble.
    pub fn seed(&self) -> u64 {
        self.seed
    }
    pub fn n_paths(&self) -> usize {
        self.n_paths
    }
    pub fn flags(&self) -> &[PathFlags] {
        &self.flags
    }
    pub fn states(&self) -> &[f64] {
        &self.states
    }
    pub fn controls(&self) -> &[f64] {
        &self.controls
    }

    #[inline]
    pub fn state(&self, path: usize, node: usize) -> &[f64] {
        let n = self.dims.state;
        let o = (path * (self.grid.steps() + 1) + node) * n;
        &self.states[o..o + n]
    }

    #[inline]
    pub fn control(&self, path: usize, step: usize) -> &[f64] {
        let k = self.dims.control;
        let o = (path * self.grid.steps() + step) * k;
        &self.controls[o..o + k]
    }

    /// Brownian increment component `comp` over `[t_step, t_step+1]`,
    /// regenerated from the seed.
    #[inline]
    pub fn increment(&self, path: usize, step: usize, comp: usize) -> f64 {
        self.grid.dt().sqrt() * CounterNormal::new(self.seed).normal(path as u64, step as u64, comp as u64)
    }

    /// Open-loop law replaying the recorded controls.
    pub fn open_loop(&self) -> ControlLaw {
        ControlLaw::OpenLoop {
            steps: self.grid.steps(),
            table: std::sync::Arc::new(self.controls.clone()),
        }
    }

    pub fn exploded_count(&self) -> usize {
        self.flags.iter().filter(|f| f.exploded).count()
    }

    pub fn crossing_count(&self) -> usize {
        self.flags.iter().filter(|f| f.left_region).count()
    }
}

/// Outcome of one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum StepEvent {
    Ok,
    Floored,
    Exploded,
}

struct Stepper<'a> {
    problem: &'a DiscountedProblem,
    dims: Dims,
    dt: f64,
    sqdt: f64,
    gen: CounterNormal,
    log_scheme: bool,
}

impl<'a> Stepper<'a> {
    fn new(problem: &'a DiscountedProblem, grid: &TimeGrid, seed: u64) -> Self {
        let dims = problem.dims();
        let log_scheme = problem.region == StateRegion::Positive && dims.state == 1 && dims.noise == 1;
        Self {
            problem,
            dims,
            dt: grid.dt(),
            sqdt: grid.dt().sqrt(),
            gen: CounterNormal::new(seed),
            log_scheme,
        }
    }

    /// Advances `x` in place by one step. On explosion `x` is left unchanged.
    #[inline]
    fn step(&self, path: usize, i: usize, x: &mut [f64], u: &[f64], scratch: &mut Scratch) -> StepEvent {
        let Dims { state: n, noise: d, .. } = self.dims;
        for j in 0..d {
            scratch.dw[j] = self.sqdt * self.gen.normal(path as u64, i as u64, j as u64);
        }
        self.problem.field.drift(x, u, &mut scratch.b);
        let split = if self.log_scheme {
            self.problem.field.log_split(u)
        } else {
            None
        };
        match split {
            Some((l, s)) => {
                let growth = ((l - 0.5 * s * s) * self.dt + s * scratch.dw[0]).exp();
                scratch.next[0] = x[0] * growth + (scratch.b[0] - l * x[0]) * self.dt;
            }
            None => {
                self.problem.field.diffusion(x, u, &mut scratch.s);
                for l in 0..n {
                    let mut v = x[l] + scratch.b[l] * self.dt;
                    for j in 0..d {
                        v += scratch.s[l * d + j] * scratch.dw[j];
                    }
                    scratch.next[l] = v;
                }
            }
        }
        if scratch.next.iter().any(|v| !v.is_finite() || v.abs() > EXPLOSION_GUARD) {
            return StepEvent::Exploded;
        }
        let mut event = StepEvent::Ok;
        if self.problem.region == StateRegion::Positive {
            for v in scratch.next.iter_mut() {
                if *v <= 0.0 {
                    *v = POSITIVITY_FLOOR;
                    event = StepEvent::Floored;
                }
            }
        }
        x.copy_from_slice(&scratch.next);
        event
    }

    /// Simulates one path from `x0`. `control(i, t, x, u)` fills the control
    /// for step `i`; `visit(i, x, u)` sees every node, with `u = None` at the
    /// terminal node.
    fn run<C, V>(&self, grid: &TimeGrid, path: usize, x0: &[f64], mut control: C, mut visit: V) -> PathFlags
    where
        C: FnMut(usize, f64, &[f64], &mut [f64]),
        V: FnMut(usize, &[f64], Option<&[f64]>),
    {
        let mut scratch = Scratch::new(self.dims);
        let mut x: Buf = x0.iter().copied().collect();
        let mut u = buf(self.dims.control);
        let mut flags = PathFlags::default();
        for i in 0..grid.steps() {
            control(i, grid.time(i), &x, &mut u);
            visit(i, &x, Some(&u));
            if flags.exploded {
                continue;
            }
            match self.step(path, i, &mut x, &u, &mut scratch) {
                StepEvent::Ok => {}
                StepEvent::Floored => flags.left_region = true,
                StepEvent::Exploded => flags.exploded = true,
            }
        }
        visit(grid.steps(), &x, None);
        flags
    }

    fn run_law<V>(&self, law: &ControlLaw, grid: &TimeGrid, path: usize, x0: &[f64], visit: V) -> PathFlags
    where
        V: FnMut(usize, &[f64], Option<&[f64]>),
    {
        let problem = self.problem;
        self.run(grid, path, x0, |i, t, x, u| law.control(problem, path, i, t, x, u), visit)
    }
}

struct Scratch {
    dw: Buf,
    b: Buf,
    s: Buf,
    next: Buf,
}

impl Scratch {
    fn new(d: Dims) -> Self {
        Self {
            dw: buf(d.noise),
            b: buf(d.state),
            s: buf(d.state * d.noise),
            next: buf(d.state),
        }
    }
}

fn check_explosions(flags: &[PathFlags]) -> Result<()> {
    let exploded = flags.iter().filter(|f| f.exploded).count();
    if exploded as f64 > MAX_EXPLODED_FRACTION * flags.len() as f64 {
        return Err(SmpError::TooManyExplosions {
            exploded,
            total: flags.len(),
        });
    }
    if exploded > 0 {
        log::warn!("{exploded} of {} paths hit the explosion guard", flags.len());
    }
    Ok(())
}

fn check_x0(problem: &DiscountedProblem, x0: &[f64]) -> Result<()> {
    if x0.len() != problem.dims().state {
        return Err(SmpError::Dimension {
            context: "initial state",
            expected: problem.dims().state,
            got: x0.len(),
        });
    }
    if !problem.region.contains(x0) {
        return Err(invalid("x0", "initial state lies outside the state region"));
    }
    Ok(())
}

/// Simulates `spec.n_paths` paths of the controlled SDE from `problem.x0`.
pub fn simulate_forward(problem: &DiscountedProblem, law: &ControlLaw, spec: &SimSpec) -> Result<PathEnsemble> {
    simulate_from(problem, law, spec, &problem.x0)
}

/// [`simulate_forward`] from an explicit initial state.
pub fn simulate_from(problem: &DiscountedProblem, law: &ControlLaw, spec: &SimSpec, x0: &[f64]) -> Result<PathEnsemble> {
    check_x0(problem, x0)?;
    if spec.n_paths == 0 {
        return Err(invalid("n_paths", "must be positive"));
    }
    let dims = problem.dims();
    let grid = spec.grid;
    let steps = grid.steps();
    let (n, k) = (dims.state, dims.control);
    let stepper = Stepper::new(problem, &grid, spec.seed);

    let chunks = map_indices(spec.exec, spec.n_paths.div_ceil(CHUNK), |c| {
        let start = c * CHUNK;
        let end = (start + CHUNK).min(spec.n_paths);
        let mut xs = Vec::with_capacity((end - start) * (steps + 1) * n);
        let mut us = Vec::with_capacity((end - start) * steps * k);
        let mut flags = Vec::with_capacity(end - start);
        for p in start..end {
            let f = stepper.run_law(law, &grid, p, x0, |_, x, u| {
                xs.extend_from_slice(x);
                if let Some(u) = u {
                    us.extend_from_slice(u);
                }
            });
            flags.push(f);
        }
        (xs, us, flags)
    });

    let mut states = Vec::with_capacity(spec.n_paths * (steps + 1) * n);
    let mut controls = Vec::with_capacity(spec.n_paths * steps * k);
    let mut flags = Vec::with_capacity(spec.n_paths);
    for (xs, us, fs) in chunks {
        states.extend(xs);
        controls.extend(us);
        flags.extend(fs);
    }
    check_explosions(&flags)?;
    Ok(PathEnsemble {
        grid,
        dims,
        seed: spec.seed,
        n_paths: spec.n_paths,
        states,
        controls,
        flags,
    })
}

/// Folds over simulated paths without storing the ensemble. `visit`
/// receives the path index, its states `[(steps+1) x n]`, controls
/// `[steps x k]` and flags. Partials are merged in path order.
pub fn fold_paths<A, I, F, M>(problem: &DiscountedProblem, law: &ControlLaw, spec: &SimSpec, init: I, visit: F, merge: M) -> Result<A>
where
    A: Send,
    I: Fn() -> A + Sync + Send,
    F: Fn(&mut A, usize, &[f64], &[f64], PathFlags) + Sync + Send,
    M: Fn(&mut A, A),
{
    check_x0(problem, &problem.x0)?;
    let grid = spec.grid;
    let steps = grid.steps();
    let (n, k) = (problem.dims().state, problem.dims().control);
    let stepper = Stepper::new(problem, &grid, spec.seed);
    let (acc, exploded) = chunked_reduce(
        spec.exec,
        spec.n_paths,
        || (init(), 0usize),
        |acc, p| {
            let mut xs = vec![0.0; (steps + 1) * n];
            let mut us = vec![0.0; steps * k];
            let f = stepper.run_law(law, &grid, p, &problem.x0, |i, x, u| {
                xs[i * n..(i + 1) * n].copy_from_slice(x);
                if let Some(u) = u {
                    us[i * k..(i + 1) * k].copy_from_slice(u);
                }
            });
            acc.1 += f.exploded as usize;
            visit(&mut acc.0, p, &xs, &us, f);
        },
        |a, b| {
            merge(&mut a.0, b.0);
            a.1 += b.1;
        },
    );
    if exploded as f64 > MAX_EXPLODED_FRACTION * spec.n_paths as f64 {
        return Err(SmpError::TooManyExplosions {
            exploded,
            total: spec.n_paths,
        });
    }
    Ok(acc)
}

fn path_weighted_norm(e: &PathEnsemble, p: usize, beta: f64) -> f64 {
    let g = e.grid();
    let dt = g.dt();
    let steps = g.steps();
    let mut acc = 0.0;
    for i in 0..=steps {
        let w = if i == 0 || i == steps { 0.5 } else { 1.0 };
        let sq: f64 = e.state(p, i).iter().map(|v| v * v).sum();
        acc += w * (-beta * g.time(i)).exp() * sq;
    }
    acc * dt
}

/// Trapezoidal estimate of `E ∫_0^T e^{-beta t} |X_t|^2 dt`.
pub fn weighted_l2_norm(ensemble: &PathEnsemble, beta: f64) -> f64 {
    weighted_l2_norm_se(ensemble, beta).0
}

/// [`weighted_l2_norm`] with its standard error across paths.
pub fn weighted_l2_norm_se(ensemble: &PathEnsemble, beta: f64) -> (f64, f64) {
    let v: Vec<f64> = (0..ensemble.n_paths()).map(|p| path_weighted_norm(ensemble, p, beta)).collect();
    mean_se(&v)
}

/// Running sums of per-node values over paths.
#[derive(Debug, Clone)]
struct NodeMoments {
    sum: Vec<f64>,
    sq: Vec<f64>,
}

impl NodeMoments {
    fn new(len: usize) -> Self {
        Self {
            sum: vec![0.0; len],
            sq: vec![0.0; len],
        }
    }
    fn add(&mut self, v: &[f64]) {
        for (i, x) in v.iter().enumerate() {
            self.sum[i] += x;
            self.sq[i] += x * x;
        }
    }
    fn merge(&mut self, o: NodeMoments) {
        for i in 0..self.sum.len() {
            self.sum[i] += o.sum[i];
            self.sq[i] += o.sq[i];
        }
    }
    fn mean_se(&self, i: usize, n: usize) -> (f64, f64) {
        let nf = n as f64;
        let m = self.sum[i] / nf;
        if n < 2 {
            return (m, 0.0);
        }
        let var = ((self.sq[i] - nf * m * m) / (nf - 1.0)).max(0.0);
        (m, (var / nf).sqrt())
    }
}

/// Forward a priori estimate between two initial states.
///
/// Path `a` runs under `law`; path `b` starts from `x0_b`, replays the
/// controls realized by `a` and sees the same Brownian increments. With
/// `X̂ = X^a - X^b` and `c = beta - 2 mu1 - 2 L^2` the statistic is
/// `max_t [ E e^{-beta t}|X̂_t|^2 + c E ∫_0^t e^{-beta s}|X̂_s|^2 ds ]`,
/// which must not exceed `|x0_a - x0_b|^2` (5% relative plus 3 SE slack).
pub fn apriori_gap_check(
    problem: &DiscountedProblem,
    law: &ControlLaw,
    spec: &SimSpec,
    x0_a: &[f64],
    x0_b: &[f64],
) -> Result<VerificationReport> {
    check_x0(problem, x0_a)?;
    check_x0(problem, x0_b)?;
    let name = "apriori_estimate";
    let c = problem.beta - problem.constants.forward_threshold();
    if c <= 0.0 {
        return Ok(VerificationReport::new(name, Status::Inconclusive).with_notes(format!(
            "beta {} does not exceed 2 mu1 + 2 L^2 = {}",
            problem.beta,
            problem.constants.forward_threshold()
        )));
    }
    let grid = spec.grid;
    let steps = grid.steps();
    let n = problem.dims().state;
    let k = problem.dims().control;
    let stepper = Stepper::new(problem, &grid, spec.seed);

    let moments = chunked_reduce(
        spec.exec,
        spec.n_paths,
        || NodeMoments::new(steps + 1),
        |acc, p| {
            let mut xa = vec![0.0; (steps + 1) * n];
            let mut ua = vec![0.0; steps * k];
            stepper.run_law(law, &grid, p, x0_a, |i, x, u| {
                xa[i * n..(i + 1) * n].copy_from_slice(x);
                if let Some(u) = u {
                    ua[i * k..(i + 1) * k].copy_from_slice(u);
                }
            });
            let mut xb = vec![0.0; (steps + 1) * n];
            stepper.run(
                &grid,
                p,
                x0_b,
                |i, _, _, u| u.copy_from_slice(&ua[i * k..(i + 1) * k]),
                |i, x, _| xb[i * n..(i + 1) * n].copy_from_slice(x),
            );
            acc.add(&combined_profile(&xa, &xb, n, &grid, problem.beta, c));
        },
        |a, b| a.merge(b),
    );
    Ok(apriori_report(name, &moments, spec.n_paths, x0_a, x0_b))
}

/// A priori estimate from two stored ensembles. `b` must share the seed of
/// `a` and replay its controls.
pub fn apriori_gap_from_ensembles(problem: &DiscountedProblem, a: &PathEnsemble, b: &PathEnsemble) -> Result<VerificationReport> {
    if a.seed() != b.seed() {
        return Err(SmpError::NoiseCoupling(format!("seeds differ: {} vs {}", a.seed(), b.seed())));
    }
    if a.grid() != b.grid() || a.n_paths() != b.n_paths() {
        return Err(SmpError::NoiseCoupling("grids or path counts differ".into()));
    }
    if a.controls() != b.controls() {
        return Err(SmpError::NoiseCoupling("realized controls differ".into()));
    }
    let name = "apriori_estimate";
    let c = problem.beta - problem.constants.forward_threshold();
    if c <= 0.0 {
        return Ok(VerificationReport::new(name, Status::Inconclusive).with_notes("beta does not exceed 2 mu1 + 2 L^2"));
    }
    let grid = *a.grid();
    let n = a.dims().state;
    let steps = grid.steps();
    let mut m = NodeMoments::new(steps + 1);
    for p in 0..a.n_paths() {
        let o = p * (steps + 1) * n;
        let len = (steps + 1) * n;
        m.add(&combined_profile(
            &a.states()[o..o + len],
            &b.states()[o..o + len],
            n,
            &grid,
            problem.beta,
            c,
        ));
    }
    Ok(apriori_report(name, &m, a.n_paths(), a.state(0, 0), b.state(0, 0)))
}

/// `e^{-beta t_i}|X̂_i|^2 + c ∫_0^{t_i} e^{-beta s}|X̂_s|^2 ds` per node.
fn combined_profile(xa: &[f64], xb: &[f64], n: usize, grid: &TimeGrid, beta: f64, c: f64) -> Vec<f64> {
    let steps = grid.steps();
    let dt = grid.dt();
    let w: Vec<f64> = (0..=steps)
        .map(|i| {
            let sq: f64 = (0..n).map(|l| (xa[i * n + l] - xb[i * n + l]).powi(2)).sum();
            (-beta * grid.time(i)).exp() * sq
        })
        .collect();
    let mut out = Vec::with_capacity(steps + 1);
    let mut integral = 0.0;
    for i in 0..=steps {
        if i > 0 {
            integral += 0.5 * (w[i - 1] + w[i]) * dt;
        }
        out.push(w[i] + c * integral);
    }
    out
}

fn apriori_report(name: &str, m: &NodeMoments, n_paths: usize, x0_a: &[f64], x0_b: &[f64]) -> VerificationReport {
    let rhs: f64 = x0_a.iter().zip(x0_b).map(|(a, b)| (a - b).powi(2)).sum();
    let (mut lhs, mut se, mut at) = (f64::NEG_INFINITY, 0.0, 0);
    for i in 0..m.sum.len() {
        let (v, s) = m.mean_se(i, n_paths);
        if v > lhs {
            lhs = v;
            se = s;
            at = i;
        }
    }
    let tol = rhs * 1.05 + 3.0 * se;
    VerificationReport::new(name, Status::from_bool(lhs <= tol))
        .with_stat(lhs, tol)
        .with_sample(n_paths, se)
        .with_notes(format!("|dx0|^2 = {rhs:.6e}; worst node {at}"))
}

/// Box corners `(lower, upper)` ordered by their effect on the drift: a
/// coordinate whose increase lowers the summed drift at `x0` is swapped.
/// Drift monotonicity in each control coordinate is assumed.
pub fn drift_ordered_corners(problem: &DiscountedProblem) -> (Vec<f64>, Vec<f64>) {
    let (mut lo, mut hi) = (problem.domain.lower().to_vec(), problem.domain.upper().to_vec());
    let n = problem.dims().state;
    let (mut b0, mut b1) = (vec![0.0; n], vec![0.0; n]);
    problem.field.drift(&problem.x0, problem.domain.lower(), &mut b0);
    for j in 0..lo.len() {
        let mut u = problem.domain.lower().to_vec();
        u[j] = problem.domain.upper()[j];
        problem.field.drift(&problem.x0, &u, &mut b1);
        let delta: f64 = b1.iter().zip(&b0).map(|(a, b)| a - b).sum();
        if delta < 0.0 {
            std::mem::swap(&mut lo[j], &mut hi[j]);
        }
    }
    (lo, hi)
}

/// Sandwich property under shared noise: `X^{lower} <= X^{law} <= X^{upper}`
/// where `lower`/`upper` are the constant laws at the box corners producing
/// the smallest and largest drift (see [`drift_ordered_corners`]).
pub fn comparison_check(problem: &DiscountedProblem, law: &ControlLaw, spec: &SimSpec) -> Result<VerificationReport> {
    let (lo, hi) = drift_ordered_corners(problem);
    let lower = ControlLaw::Constant(lo);
    let upper = ControlLaw::Constant(hi);
    let grid = spec.grid;
    let steps = grid.steps();
    let n = problem.dims().state;
    let stepper = Stepper::new(problem, &grid, spec.seed);
    let x0 = problem.x0.clone();
    let record = |law: &ControlLaw, p: usize| {
        let mut xs = vec![0.0; (steps + 1) * n];
        stepper.run_law(law, &grid, p, &x0, |i, x, _| xs[i * n..(i + 1) * n].copy_from_slice(x));
        xs
    };
    let (violations, worst) = chunked_reduce(
        spec.exec,
        spec.n_paths,
        || (0usize, 0.0f64),
        |acc, p| {
            let xm = record(law, p);
            let xl = record(&lower, p);
            let xu = record(&upper, p);
            for i in 1..=steps {
                let mut bad = false;
                for l in 0..n {
                    let j = i * n + l;
                    let below = xl[j] - xm[j];
                    let above = xm[j] - xu[j];
                    let excess = below.max(above);
                    if excess > SANDWICH_SLACK {
                        bad = true;
                        acc.1 = acc.1.max(excess);
                    }
                }
                if bad {
                    acc.0 += 1;
                }
            }
        },
        |a, b| {
            a.0 += b.0;
            a.1 = a.1.max(b.1);
        },
    );
    let total = spec.n_paths * steps;
    let fraction = violations as f64 / total as f64;
    Ok(VerificationReport::new("sandwich", Status::from_bool(fraction <= SANDWICH_TOLERANCE))
        .with_stat(fraction, SANDWICH_TOLERANCE)
        .with_sample(total, 0.0)
        .with_notes(format!("{violations} violating (path, step) pairs; largest excess {worst:.3e}")))
}

fn positivity_report(crossings: usize, exploded: usize, n_paths: usize, steps: usize) -> VerificationReport {
    let ok = crossings == 0 && exploded == 0;
    VerificationReport::new("positivity", Status::from_bool(ok))
        .with_stat(crossings as f64, 0.0)
        .with_sample(n_paths, 0.0)
        .with_notes(format!(
            "{crossings} paths crossed zero, {exploded} paths exceeded {EXPLOSION_GUARD:e}; {steps} steps per path"
        ))
}

/// Counts zero crossings and explosions recorded in an ensemble.
pub fn positivity_check(ensemble: &PathEnsemble) -> VerificationReport {
    positivity_report(
        ensemble.crossing_count(),
        ensemble.exploded_count(),
        ensemble.n_paths(),
        ensemble.grid().steps(),
    )
}

/// Streaming positivity scan that never stores paths.
pub fn positivity_scan(problem: &DiscountedProblem, law: &ControlLaw, spec: &SimSpec) -> Result<VerificationReport> {
    check_x0(problem, &problem.x0)?;
    let grid = spec.grid;
    let stepper = Stepper::new(problem, &grid, spec.seed);
    let (crossings, exploded) = chunked_reduce(
        spec.exec,
        spec.n_paths,
        || (0usize, 0usize),
        |acc, p| {
            let f = stepper.run_law(law, &grid, p, &problem.x0, |_, _, _| {});
            acc.0 += f.left_region as usize;
            acc.1 += f.exploded as usize;
        },
        |a, b| {
            a.0 += b.0;
            a.1 += b.1;
        },
    );
    Ok(positivity_report(crossings, exploded, spec.n_paths, grid.steps()))
}

/// Region constants of the Lyapunov bound: `-F <= c` on `(0, r)`,
/// `F <= c` on `(big_r, inf)`, with `sigma(x) <= lip x` and drift
/// monotonicity `mu1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LyapunovConstants {
    pub r: f64,
    pub big_r: f64,
    pub c: f64,
    pub lip: f64,
    pub mu1: f64,
}

impl LyapunovConstants {
    pub fn k_small(&self) -> f64 {
        let l2 = self.lip * self.lip;
        (l2 + self.c).max(l2 + 2.0 * self.mu1)
    }
    pub fn k_large(&self) -> f64 {
        let l2 = self.lip * self.lip;
        l2.max(2.0 * self.c + l2)
    }
}

/// `V(x) = 1 + 1/x + x^2`.
pub fn lyapunov_v(x: f64) -> f64 {
    1.0 + 1.0 / x + x * x
}

/// Generator `LV = b V' + sigma^2 V'' / 2` of a scalar positive problem.
pub fn lyapunov_generator(problem: &DiscountedProblem, x: f64, u: &[f64]) -> f64 {
    let mut b = [0.0];
    let mut s = [0.0];
    problem.field.drift(&[x], u, &mut b);
    problem.field.diffusion(&[x], u, &mut s);
    let dv = -1.0 / (x * x) + 2.0 * x;
    let d2v = 2.0 / (x * x * x) + 2.0;
    b[0] * dv + 0.5 * s[0] * s[0] * d2v
}

/// Smallest `K >= 0` with `LV <= K V` over the sampled states and
/// controls. When region constants are supplied, the observed ratios on
/// `(0, r)` and `(big_r, inf)` are compared with the analytic constants
/// in the notes.
pub fn lyapunov_generator_check(
    problem: &DiscountedProblem,
    xs: &[f64],
    controls: &[Vec<f64>],
    constants: Option<LyapunovConstants>,
) -> Result<VerificationReport> {
    let dims = problem.dims();
    if dims.state != 1 || dims.noise != 1 {
        return Err(invalid("problem", "the Lyapunov check needs a scalar state and noise"));
    }
    if xs.is_empty() || controls.is_empty() {
        return Err(invalid("sample", "needs at least one state and one control"));
    }
    let (mut k, mut k_small, mut k_large) = (0.0f64, 0.0f64, 0.0f64);
    let mut finite = true;
    for &x in xs.iter().filter(|x| **x > 0.0) {
        for u in controls {
            let mut u = u.clone();
            problem.domain.clip(&mut u);
            let ratio = lyapunov_generator(problem, x, &u) / lyapunov_v(x);
            if !ratio.is_finite() {
                finite = false;
                continue;
            }
            k = k.max(ratio);
            if let Some(c) = constants {
                if x < c.r {
                    k_small = k_small.max(ratio);
                } else if x > c.big_r {
                    k_large = k_large.max(ratio);
                }
            }
        }
    }
    let mut notes = format!("{} states x {} controls", xs.len(), controls.len());
    if let Some(c) = constants {
        notes.push_str(&format!(
            "; near zero K = {k_small:.4} vs analytic {:.4}; large x K = {k_large:.4} vs analytic {:.4}",
            c.k_small(),
            c.k_large()
        ));
    }
    Ok(VerificationReport::new("lyapunov", Status::from_bool(finite))
        .with_stat(k, f64::INFINITY)
        .with_sample(xs.len() * controls.len(), 0.0)
        .with_notes(notes))
}

#[cfg(test)]
pub(crate) mod fixtures {
    use std::sync::Arc;

    use crate::problem::*;

    /// `dX = (m - u) X dt + s X dW`, `f = ln(u) + ln(x)`.
    #[derive(Debug)]
    pub struct Gbm {
        pub m: f64,
        pub s: f64,
    }

    impl CoefficientField for Gbm {
        fn dims(&self) -> Dims {
            Dims::scalar()
        }
        fn drift(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
            out[0] = (self.m - u[0]) * x[0];
        }
        fn diffusion(&self, x: &[f64], _u: &[f64], out: &mut [f64]) {
            out[0] = self.s * x[0];
        }
        fn running_reward(&self, x: &[f64], u: &[f64]) -> f64 {
            u[0].ln() + x[0].ln()
        }
        fn drift_jacobian(&self, _x: &[f64], u: &[f64], out: &mut [f64]) {
            out[0] = self.m - u[0];
        }
        fn diffusion_jacobian(&self, _x: &[f64], _u: &[f64], out: &mut [f64]) {
            out[0] = self.s;
        }
        fn reward_gradient(&self, x: &[f64], _u: &[f64], out: &mut [f64]) {
            out[0] = 1.0 / x[0];
        }
        fn log_split(&self, u: &[f64]) -> Option<(f64, f64)> {
            Some((self.m - u[0], self.s))
        }
    }

    pub fn gbm_problem(m: f64, s: f64, x0: f64, region: StateRegion) -> DiscountedProblem {
        DiscountedProblem::new(
            "gbm",
            Arc::new(Gbm { m, s }),
            ControlDomain::interval(0.01, 2.0).unwrap(),
            2.0,
            AssumptionConstants::new(m, m, s, s).unwrap(),
            region,
            vec![x0],
        )
        .unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;
    use crate::problem::fixtures::{linear2_problem, zero_problem};

    fn spec(t: f64, steps: usize, paths: usize, seed: u64) -> SimSpec {
        SimSpec::new(TimeGrid::new(t, steps).unwrap(), paths, seed)
    }

    #[test]
    fn zero_dynamics_stay_put() {
        let p = zero_problem();
        let e = simulate_forward(&p, &ControlLaw::constant(0.7), &spec(1.0, 20, 5, 1)).unwrap();
        assert!(e.states().iter().all(|x| *x == 0.3));
        assert!(e.controls().iter().all(|u| *u == 0.7));
    }

    #[test]
    fn execution_modes_agree_bitwise() {
        let p = linear2_problem();
        let law = ControlLaw::feedback(|t, x, u| {
            u[0] = -x[0] + t;
            u[1] = x[1];
        });
        let s = spec(1.0, 30, 2500, 9);
        let a = simulate_forward(&p, &law, &s.with_exec(Execution::Sequential)).unwrap();
        let b = simulate_forward(&p, &law, &s.with_exec(Execution::Parallel)).unwrap();
        assert_eq!(a.states(), b.states());
        assert_eq!(a.controls(), b.controls());
    }

    #[test]
    fn controls_are_clipped() {
        let p = zero_problem();
        let e = simulate_forward(&p, &ControlLaw::constant(5.0), &spec(1.0, 4, 2, 1)).unwrap();
        assert!(e.controls().iter().all(|u| *u == 1.0));
    }

    #[test]
    fn log_scheme_keeps_gbm_positive_even_when_coarse() {
        let p = gbm_problem(0.05, 1.5, 1.0, StateRegion::Positive);
        let e = simulate_forward(&p, &ControlLaw::constant(0.5), &spec(5.0, 10, 2000, 3)).unwrap();
        assert_eq!(e.crossing_count(), 0);
        assert!(e.states().iter().all(|x| *x > 0.0));
    }

    #[test]
    fn plain_euler_crossings_are_floored_and_flagged() {
        // Without the positive region the log scheme is off; with it but a
        // field lacking the split, plain Euler crosses at coarse dt.
        #[derive(Debug)]
        struct NoSplit(Gbm);
        impl crate::problem::CoefficientField for NoSplit {
            fn dims(&self) -> Dims {
                self.0.dims()
            }
            fn drift(&self, x: &[f64], u: &[f64], o: &mut [f64]) {
                self.0.drift(x, u, o)
            }
            fn diffusion(&self, x: &[f64], u: &[f64], o: &mut [f64]) {
                self.0.diffusion(x, u, o)
            }
            fn running_reward(&self, x: &[f64], u: &[f64]) -> f64 {
                self.0.running_reward(x, u)
            }
            fn drift_jacobian(&self, x: &[f64], u: &[f64], o: &mut [f64]) {
                self.0.drift_jacobian(x, u, o)
            }
            fn diffusion_jacobian(&self, x: &[f64], u: &[f64], o: &mut [f64]) {
                self.0.diffusion_jacobian(x, u, o)
            }
            fn reward_gradient(&self, x: &[f64], u: &[f64], o: &mut [f64]) {
                self.0.reward_gradient(x, u, o)
            }
        }
        let base = gbm_problem(0.0, 1.5, 1.0, StateRegion::Positive);
        let p = DiscountedProblem {
            field: std::sync::Arc::new(NoSplit(Gbm { m: 0.0, s: 1.5 })),
            ..base
        };
        let e = simulate_forward(&p, &ControlLaw::constant(0.5), &spec(5.0, 10, 500, 3)).unwrap();
        assert!(e.crossing_count() > 0);
        assert!(e.states().iter().all(|x| *x > 0.0));
        let r = positivity_check(&e);
        assert_eq!(r.status, Status::Fail);
    }

    #[test]
    fn explosions_freeze_and_error_past_limit() {
        let p = gbm_problem(100.0, 0.0, 1.0, StateRegion::Whole);
        let err = simulate_forward(&p, &ControlLaw::constant(0.01), &spec(1.0, 10, 10, 1)).unwrap_err();
        assert!(matches!(err, SmpError::TooManyExplosions { exploded: 10, total: 10 }));
    }

    #[test]
    fn weighted_norm_of_constant_path() {
        let p = zero_problem();
        let e = simulate_forward(&p, &ControlLaw::constant(0.5), &spec(30.0, 3000, 2, 1)).unwrap();
        let v = weighted_l2_norm(&e, 1.0);
        assert!((v - 0.09 * (1.0 - (-30.0f64).exp())).abs() < 1e-5, "{v}");
    }

    #[test]
    fn apriori_identical_starts_give_zero() {
        let p = gbm_problem(0.05, 0.2, 1.0, StateRegion::Positive);
        let r = apriori_gap_check(&p, &ControlLaw::constant(0.5), &spec(2.0, 50, 300, 4), &[1.0], &[1.0]).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert!(r.passed());
    }

    #[test]
    fn apriori_streaming_matches_stored_ensembles() {
        let p = gbm_problem(0.05, 0.2, 1.0, StateRegion::Positive);
        let law = ControlLaw::feedback(|_, x, u| u[0] = 0.3 + 0.1 * x[0]);
        let s = spec(2.0, 40, 200, 4);
        let streamed = apriori_gap_check(&p, &law, &s, &[1.0], &[1.5]).unwrap();
        let a = simulate_from(&p, &law, &s, &[1.0]).unwrap();
        let b = simulate_from(&p, &a.open_loop(), &s, &[1.5]).unwrap();
        let stored = apriori_gap_from_ensembles(&p, &a, &b).unwrap();
        assert!((streamed.statistic - stored.statistic).abs() < 1e-12);
        assert!(streamed.passed());

        let c = simulate_from(&p, &a.open_loop(), &s.with_seed(5), &[1.5]).unwrap();
        assert!(matches!(apriori_gap_from_ensembles(&p, &a, &c), Err(SmpError::NoiseCoupling(_))));
    }

    #[test]
    fn sandwich_orients_corners_by_drift() {
        let p = gbm_problem(0.5, 0.3, 0.5, StateRegion::Positive);
        // Drift x (m - u) decreases in u, so the upper corner bounds from below.
        let (lo, hi) = drift_ordered_corners(&p);
        assert_eq!((lo, hi), (p.domain.upper().to_vec(), p.domain.lower().to_vec()));
        let r = comparison_check(&p, &ControlLaw::constant(1.0), &spec(1.0, 20, 50, 1)).unwrap();
        assert!(r.passed(), "{r:?}");
        let wobble = ControlLaw::feedback(|t, _x, out| out[0] = 1.0 + (10.0 * t).sin());
        assert!(comparison_check(&p, &wobble, &spec(1.0, 20, 50, 1)).unwrap().passed());
    }

    #[test]
    fn lyapunov_value_and_zero_generator() {
        assert_eq!(lyapunov_v(1.0), 3.0);
        let p = zero_problem();
        let r = lyapunov_generator_check(&p, &[0.5, 1.0, 2.0], &[vec![0.5]], None).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert!(r.passed());
    }
}
