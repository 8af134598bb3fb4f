//! Adjoint BSDE by least-squares Monte Carlo.
//!
//! Backward induction on the ensemble grid, `i = N-1, ..., 0`:
//!
//! ```text
//! E_i = E[Y_{i+1} | X_i],   Z_i = E[Y_{i+1} ΔW_i' | X_i] / dt
//! Y¹  = E_i + g(X_i, u_i, E_i, Z_i) dt
//! Y_i = E_i + g(X_i, u_i, Y¹, Z_i) dt
//! ```
//!
//! where `g` is the adjoint driver `∇x H` of the generalized Hamiltonian
//! (optionally with the state truncated at a level inside the driver).
//! Both conditional expectations come from one regression per step. After
//! each step `Y_i` is refit on the basis so the solution can act as a
//! feedback source for later simulations.

use std::sync::Arc;

use serde::Serialize;

use crate::basis::{fit_step, RegressionBasis, StepFit};
use crate::error::{invalid, Result, SmpError};
use crate::exec::{for_each_row, map_indices, Execution};
use crate::forward::{simulate_forward, PathEnsemble, SimSpec};
use crate::grid::TimeGrid;
use crate::law::{AdjointSource, ControlLaw};
use crate::problem::{buf, Dims, DiscountedProblem};
use crate::report::{mean_se, Status, VerificationReport};

/// Terminal data of the backward induction.
#[derive(Debug, Clone, PartialEq)]
pub enum Terminal {
    Zero,
    /// Per-path values `[paths x n]`.
    Values(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalKind {
    Zero,
    Supplied,
    /// Fields injected from a closed form rather than solved.
    Injected,
}

/// Solver settings beyond the basis.
#[derive(Debug, Clone)]
pub struct BsdeOptions {
    pub basis: RegressionBasis,
    pub terminal: Terminal,
    /// State truncation level applied inside the driver only.
    pub truncation: Option<f64>,
    /// Paths used for fitting; `None` means all non-exploded paths.
    pub mask: Option<Vec<bool>>,
    pub exec: Execution,
}

impl BsdeOptions {
    pub fn new(basis: RegressionBasis) -> Self {
        Self {
            basis,
            terminal: Terminal::Zero,
            truncation: None,
            mask: None,
            exec: Execution::default(),
        }
    }
    pub fn terminal(mut self, t: Terminal) -> Self {
        self.terminal = t;
        self
    }
    pub fn truncation(mut self, level: f64) -> Self {
        self.truncation = Some(level);
        self
    }
    pub fn mask(mut self, mask: Vec<bool>) -> Self {
        self.mask = Some(mask);
        self
    }
    pub fn exec(mut self, exec: Execution) -> Self {
        self.exec = exec;
        self
    }
}

/// `Y [paths x (steps+1) x n]`, `Z [paths x steps x (n d)]` and the
/// per-step regressions.
#[derive(Debug, Clone)]
pub struct BsdeSolution {
    grid: TimeGrid,
    dims: Dims,
    n_paths: usize,
    basis: RegressionBasis,
    y: Vec<f64>,
    z: Vec<f64>,
    /// Step `i < N`: outputs `[E[Y_{i+1}|X_i]; Z_i]`.
    step_fits: Vec<StepFit>,
    /// Node `i <= N`: `Y_i` refit on `X_i`.
    y_fits: Arc<Vec<StepFit>>,
    terminal: TerminalKind,
}

impl BsdeSolution {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }
    pub fn dims(&self) -> Dims {
        self.dims
    }
    pub fn n_paths(&self) -> usize {
        self.n_paths
    }
    pub fn basis(&self) -> &RegressionBasis {
        &self.basis
    }
    pub fn terminal_kind(&self) -> TerminalKind {
        self.terminal
    }
    pub fn y_values(&self) -> &[f64] {
        &self.y
    }
    pub fn z_values(&self) -> &[f64] {
        &self.z
    }
    pub fn step_fits(&self) -> &[StepFit] {
        &self.step_fits
    }
    pub fn y_fits(&self) -> &[StepFit] {
        &self.y_fits
    }

    #[inline]
    pub fn y(&self, path: usize, node: usize) -> &[f64] {
        let n = self.dims.state;
        let o = (path * (self.grid.steps() + 1) + node) * n;
        &self.y[o..o + n]
    }

    #[inline]
    pub fn z(&self, path: usize, step: usize) -> &[f64] {
        let nd = self.dims.state * self.dims.noise;
        let o = (path * self.grid.steps() + step) * nd;
        &self.z[o..o + nd]
    }

    /// Mean of `Y_0` over paths (all paths share `X_0`).
    pub fn y0(&self) -> Vec<f64> {
        let n = self.dims.state;
        let mut m = vec![0.0; n];
        for p in 0..self.n_paths {
            for (a, b) in m.iter_mut().zip(self.y(p, 0)) {
                *a += b;
            }
        }
        m.iter_mut().for_each(|v| *v /= self.n_paths as f64);
        m
    }

    /// Standard error of the first coordinate of `Y_0`, taken from the
    /// spread of `Y_1` across paths.
    pub fn y0_se(&self) -> f64 {
        if self.grid.steps() == 0 {
            return 0.0;
        }
        let v: Vec<f64> = (0..self.n_paths).map(|p| self.y(p, 1)[0]).collect();
        mean_se(&v).1
    }

    /// Regression-backed adjoint source `(step, x) -> Y`.
    pub fn adjoint_source(&self) -> Arc<dyn AdjointSource> {
        Arc::new(RegressedAdjoint {
            basis: self.basis.clone(),
            fits: Arc::clone(&self.y_fits),
        })
    }

    /// Solution built from closed-form fields `(node, x, y_out, z_out)`;
    /// `z_out` is ignored at the terminal node.
    pub fn from_fields<F>(ensemble: &PathEnsemble, basis: RegressionBasis, exec: Execution, field: F) -> Result<Self>
    where
        F: Fn(usize, &[f64], &mut [f64], &mut [f64]) + Sync + Send,
    {
        let dims = ensemble.dims();
        let (n, nd) = (dims.state, dims.state * dims.noise);
        let steps = ensemble.grid().steps();
        let mut y = vec![0.0; ensemble.n_paths() * (steps + 1) * n];
        let mut z = vec![0.0; ensemble.n_paths() * steps * nd];
        for_each_row(exec, &mut y, (steps + 1) * n, |p, row| {
            let mut zz = buf(nd);
            for i in 0..=steps {
                field(i, ensemble.state(p, i), &mut row[i * n..(i + 1) * n], &mut zz);
            }
        });
        for_each_row(exec, &mut z, steps * nd, |p, row| {
            let mut yy = buf(n);
            for i in 0..steps {
                field(i, ensemble.state(p, i), &mut yy, &mut row[i * nd..(i + 1) * nd]);
            }
        });
        let mut sol = Self {
            grid: *ensemble.grid(),
            dims,
            n_paths: ensemble.n_paths(),
            basis,
            y,
            z,
            step_fits: Vec::new(),
            y_fits: Arc::new(Vec::new()),
            terminal: TerminalKind::Injected,
        };
        sol.y_fits = Arc::new(sol.refit_y(ensemble, None, exec)?);
        Ok(sol)
    }

    fn refit_y(&self, ensemble: &PathEnsemble, mask: Option<&[bool]>, exec: Execution) -> Result<Vec<StepFit>> {
        let n = self.dims.state;
        let steps = self.grid.steps();
        let mut out = Vec::with_capacity(steps + 1);
        for i in 0..=steps {
            let (xs, ys) = gather_node(ensemble, self, i);
            out.push(fit_step(&self.basis, exec, i, &xs, n, &ys, n, mask)?);
        }
        Ok(out)
    }
}

fn gather_node(e: &PathEnsemble, s: &BsdeSolution, i: usize) -> (Vec<f64>, Vec<f64>) {
    let n = e.dims().state;
    let mut xs = Vec::with_capacity(e.n_paths() * n);
    let mut ys = Vec::with_capacity(e.n_paths() * n);
    for p in 0..e.n_paths() {
        xs.extend_from_slice(e.state(p, i));
        ys.extend_from_slice(s.y(p, i));
    }
    (xs, ys)
}

/// Adjoint values from per-node regressions of `Y`.
#[derive(Debug, Clone)]
pub struct RegressedAdjoint {
    basis: RegressionBasis,
    fits: Arc<Vec<StepFit>>,
}

impl RegressedAdjoint {
    pub fn new(basis: RegressionBasis, fits: Vec<StepFit>) -> Self {
        Self {
            basis,
            fits: Arc::new(fits),
        }
    }
    pub fn fits(&self) -> &[StepFit] {
        &self.fits
    }
}

impl AdjointSource for RegressedAdjoint {
    fn adjoint(&self, step: usize, x: &[f64], out: &mut [f64]) {
        if self.fits.is_empty() {
            out.iter_mut().for_each(|v| *v = 0.0);
            return;
        }
        let i = step.min(self.fits.len() - 1);
        self.fits[i].predict(&self.basis, x, out);
    }
}

/// Solves the adjoint BSDE along `ensemble` with the given terminal data.
pub fn solve_bsde_lsmc(
    problem: &DiscountedProblem,
    ensemble: &PathEnsemble,
    basis: &RegressionBasis,
    terminal: Terminal,
) -> Result<BsdeSolution> {
    solve_bsde_with(problem, ensemble, &BsdeOptions::new(basis.clone()).terminal(terminal))
}

/// Same as [`solve_bsde_lsmc`] with the state replaced by `min(X, level)`
/// inside the driver.
pub fn solve_truncated_driver(
    problem: &DiscountedProblem,
    ensemble: &PathEnsemble,
    basis: &RegressionBasis,
    level: f64,
) -> Result<BsdeSolution> {
    if !(level > 0.0) {
        return Err(invalid("truncation", "level must be positive"));
    }
    solve_bsde_with(problem, ensemble, &BsdeOptions::new(basis.clone()).truncation(level))
}

/// Full-control entry point of the backward induction.
pub fn solve_bsde_with(problem: &DiscountedProblem, ensemble: &PathEnsemble, opts: &BsdeOptions) -> Result<BsdeSolution> {
    let dims = ensemble.dims();
    if dims != problem.dims() {
        return Err(SmpError::Dimension {
            context: "ensemble vs problem state",
            expected: problem.dims().state,
            got: dims.state,
        });
    }
    let (n, d) = (dims.state, dims.noise);
    let nd = n * d;
    let grid = *ensemble.grid();
    let steps = grid.steps();
    let dt = grid.dt();
    let paths = ensemble.n_paths();
    let exec = opts.exec;

    let mut fit_mask: Vec<bool> = ensemble.flags().iter().map(|f| !f.exploded).collect();
    if let Some(m) = &opts.mask {
        if m.len() != paths {
            return Err(SmpError::Dimension {
                context: "path mask",
                expected: paths,
                got: m.len(),
            });
        }
        fit_mask.iter_mut().zip(m).for_each(|(a, b)| *a &= *b);
    }

    let mut next = match &opts.terminal {
        Terminal::Zero => vec![0.0; paths * n],
        Terminal::Values(v) => {
            if v.len() != paths * n {
                return Err(SmpError::Dimension {
                    context: "terminal values",
                    expected: paths * n,
                    got: v.len(),
                });
            }
            v.clone()
        }
    };
    let mut y = vec![0.0; paths * (steps + 1) * n];
    let mut z = vec![0.0; paths * steps * nd];
    let scatter_y = |y: &mut Vec<f64>, i: usize, vals: &[f64]| {
        for p in 0..paths {
            let o = (p * (steps + 1) + i) * n;
            y[o..o + n].copy_from_slice(&vals[p * n..(p + 1) * n]);
        }
    };
    scatter_y(&mut y, steps, &next);

    let mut y_fits = vec![None; steps + 1];
    y_fits[steps] = Some(match &opts.terminal {
        Terminal::Zero => StepFit::constant(&opts.basis, n, &vec![0.0; n]),
        Terminal::Values(_) => {
            let xs = node_states(ensemble, steps);
            fit_step(&opts.basis, exec, steps, &xs, n, &next, n, Some(&fit_mask))?
        }
    });
    let mut step_fits = vec![None; steps];
    let m = n + nd;

    for i in (0..steps).rev() {
        let xs = node_states(ensemble, i);
        let mut targets = vec![0.0; paths * m];
        for_each_row(exec, &mut targets, m, |p, row| {
            let yn = &next[p * n..(p + 1) * n];
            row[..n].copy_from_slice(yn);
            for l in 0..n {
                for j in 0..d {
                    row[n + l * d + j] = yn[l] * ensemble.increment(p, i, j) / dt;
                }
            }
        });
        let fit = fit_step(&opts.basis, exec, i, &xs, n, &targets, m, Some(&fit_mask))?;
        let mut cur = vec![0.0; paths * n];
        let mut zi = vec![0.0; paths * nd];
        let rows: Vec<(Vec<f64>, Vec<f64>)> = map_indices(exec, paths, |p| {
            let x = &xs[p * n..(p + 1) * n];
            let u = ensemble.control(p, i);
            let mut pred = buf(m);
            fit.predict(&opts.basis, x, &mut pred);
            let (e, zz) = pred.split_at(n);
            let mut xd = buf(n);
            xd.copy_from_slice(x);
            if let Some(level) = opts.truncation {
                xd.iter_mut().for_each(|v| *v = v.min(level));
            }
            let mut g = buf(n);
            problem.grad_x_hamiltonian(&xd, u, e, zz, &mut g);
            let y1: Vec<f64> = (0..n).map(|l| e[l] + g[l] * dt).collect();
            problem.grad_x_hamiltonian(&xd, u, &y1, zz, &mut g);
            ((0..n).map(|l| e[l] + g[l] * dt).collect(), zz.to_vec())
        });
        for (p, (yv, zv)) in rows.into_iter().enumerate() {
            cur[p * n..(p + 1) * n].copy_from_slice(&yv);
            zi[p * nd..(p + 1) * nd].copy_from_slice(&zv);
        }
        for p in 0..paths {
            let o = (p * steps + i) * nd;
            z[o..o + nd].copy_from_slice(&zi[p * nd..(p + 1) * nd]);
        }
        scatter_y(&mut y, i, &cur);
        y_fits[i] = Some(fit_step(&opts.basis, exec, i, &xs, n, &cur, n, Some(&fit_mask))?);
        step_fits[i] = Some(fit);
        next = cur;
    }

    Ok(BsdeSolution {
        grid,
        dims,
        n_paths: paths,
        basis: opts.basis.clone(),
        y,
        z,
        step_fits: step_fits.into_iter().map(|f| f.expect("every step fitted")).collect(),
        y_fits: Arc::new(y_fits.into_iter().map(|f| f.expect("every node fitted")).collect()),
        terminal: match opts.terminal {
            Terminal::Zero => TerminalKind::Zero,
            Terminal::Values(_) => TerminalKind::Supplied,
        },
    })
}

fn node_states(e: &PathEnsemble, i: usize) -> Vec<f64> {
    let n = e.dims().state;
    let mut xs = Vec::with_capacity(e.n_paths() * n);
    for p in 0..e.n_paths() {
        xs.extend_from_slice(e.state(p, i));
    }
    xs
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransformDirection {
    /// `Ỹ_t = e^{-beta t} Y_t`.
    Forward,
    /// `Y_t = e^{beta t} Ỹ_t`.
    Inverse,
}

/// Rescales `(Y, Z)` node by node with `e^{∓beta t_i}`.
pub fn exp_transform(solution: &BsdeSolution, beta: f64, direction: TransformDirection) -> BsdeSolution {
    let sign = match direction {
        TransformDirection::Forward => -1.0,
        TransformDirection::Inverse => 1.0,
    };
    let g = solution.grid;
    let steps = g.steps();
    let n = solution.dims.state;
    let nd = n * solution.dims.noise;
    let factor: Vec<f64> = (0..=steps).map(|i| (sign * beta * g.time(i)).exp()).collect();
    let mut out = solution.clone();
    for p in 0..solution.n_paths {
        for i in 0..=steps {
            let o = (p * (steps + 1) + i) * n;
            out.y[o..o + n].iter_mut().for_each(|v| *v *= factor[i]);
        }
        for i in 0..steps {
            let o = (p * steps + i) * nd;
            out.z[o..o + nd].iter_mut().for_each(|v| *v *= factor[i]);
        }
    }
    out.step_fits = solution.step_fits.iter().enumerate().map(|(i, f)| f.scaled(factor[i])).collect();
    out.y_fits = Arc::new(solution.y_fits.iter().enumerate().map(|(i, f)| f.scaled(factor[i])).collect());
    out
}

/// `E ∫ e^{-beta t} (|Y|^2 + |Z|^2) dt` with its standard error.
pub fn bsde_weighted_norm(solution: &BsdeSolution, beta: f64) -> (f64, f64) {
    let g = solution.grid;
    let steps = g.steps();
    let v: Vec<f64> = (0..solution.n_paths)
        .map(|p| {
            let mut acc = 0.0;
            for i in 0..=steps {
                let w = if i == 0 || i == steps { 0.5 } else { 1.0 };
                let mut sq: f64 = solution.y(p, i).iter().map(|v| v * v).sum();
                // Z lives on steps; reuse the last one at the terminal node.
                let zi = i.min(steps.saturating_sub(1));
                if steps > 0 {
                    sq += solution.z(p, zi).iter().map(|v| v * v).sum::<f64>();
                }
                acc += w * (-beta * g.time(i)).exp() * sq;
            }
            acc * g.dt()
        })
        .collect();
    mean_se(&v)
}

/// Per-step discrete BSDE residual `Y_{i+1} - Y_i + g dt - Z_i ΔW_i`.
///
/// For solved fields the driver term is the one the scheme used, so the
/// residual reduces to `Y_{i+1} - E[Y_{i+1}|X_i] - Z_i ΔW_i`; injected
/// fields use `g(X_i, u_i, Y_i, Z_i)`. Because `Z_i` is fitted on the same
/// increments, the standard error combines the spread of the residual with
/// the spread of `Z_i ΔW_i`. Passes when at most 5% of steps have a mean
/// beyond 3 SE (first coordinate).
pub fn martingale_residual_check(problem: &DiscountedProblem, ensemble: &PathEnsemble, solution: &BsdeSolution) -> VerificationReport {
    let dims = ensemble.dims();
    let (n, d) = (dims.state, dims.noise);
    let m = n + n * d;
    let steps = ensemble.grid().steps();
    let dt = ensemble.grid().dt();
    let fitted = solution.step_fits.len() == steps;
    let mut exceed = 0usize;
    let mut worst = 0.0f64;
    for i in 0..steps {
        let (r, zdw): (Vec<f64>, Vec<f64>) = (0..ensemble.n_paths())
            .map(|p| {
                let x = ensemble.state(p, i);
                let z = solution.z(p, i);
                let mut zdw = 0.0;
                for j in 0..d {
                    zdw += z[j] * ensemble.increment(p, i, j);
                }
                let next = solution.y(p, i + 1)[0];
                let r = if fitted {
                    let mut pred = buf(m);
                    solution.step_fits[i].predict(&solution.basis, x, &mut pred);
                    next - pred[0] - zdw
                } else {
                    let y = solution.y(p, i);
                    let mut g = buf(n);
                    problem.grad_x_hamiltonian(x, ensemble.control(p, i), y, z, &mut g);
                    next - y[0] + g[0] * dt - zdw
                };
                (r, zdw)
            })
            .unzip();
        let (mean, se_r) = mean_se(&r);
        let se = se_r.hypot(mean_se(&zdw).1);
        let score = if se > 0.0 {
            mean.abs() / se
        } else if mean.abs() < 1e-15 {
            0.0
        } else {
            f64::INFINITY
        };
        worst = worst.max(score);
        if score > 3.0 {
            exceed += 1;
        }
    }
    let frac = exceed as f64 / steps.max(1) as f64;
    VerificationReport::new("martingale_residual", Status::from_bool(frac <= 0.05))
        .with_stat(frac, 0.05)
        .with_sample(ensemble.n_paths(), 0.0)
        .with_notes(format!("{exceed} of {steps} steps beyond 3 SE; worst |mean|/SE {worst:.2}"))
}

/// Result of the terminal stability diagnostic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StabilityGap {
    pub gap: f64,
    pub bound: f64,
    pub se: f64,
    pub horizon: f64,
}

impl StabilityGap {
    pub fn tolerance(&self) -> f64 {
        1.25 * self.bound + 3.0 * self.se
    }
    pub fn passed(&self) -> bool {
        self.gap <= self.tolerance()
    }
    pub fn report(&self, n_paths: usize) -> VerificationReport {
        VerificationReport::new("stability", Status::from_bool(self.passed()))
            .with_stat(self.gap, self.tolerance())
            .with_sample(n_paths, self.se)
            .with_notes(format!("horizon {:.4}, bound e^(-beta n) E|xi|^2 = {:.6e}", self.horizon, self.bound))
    }
}

/// Gap between the zero-terminal solve and the solve with terminal
/// `E[xi | X_n]` on the ensemble horizon `n`:
/// `gap = sup_i E e^{-beta t_i} |Ỹ_i - Ŷ_i|^2`, `bound = e^{-beta n} E|xi|^2`.
pub fn terminal_stability_gap(
    problem: &DiscountedProblem,
    ensemble: &PathEnsemble,
    basis: &RegressionBasis,
    xi: &[f64],
) -> Result<StabilityGap> {
    let dims = ensemble.dims();
    let n = dims.state;
    let paths = ensemble.n_paths();
    if xi.len() != paths * n {
        return Err(SmpError::Dimension {
            context: "terminal xi",
            expected: paths * n,
            got: xi.len(),
        });
    }
    let grid = *ensemble.grid();
    let steps = grid.steps();
    let xs = node_states(ensemble, steps);
    let proj = fit_step(basis, Execution::default(), steps, &xs, n, xi, n, None)?;
    let mut xi_n = vec![0.0; paths * n];
    for p in 0..paths {
        proj.predict(basis, &xs[p * n..(p + 1) * n], &mut xi_n[p * n..(p + 1) * n]);
    }
    let zero = solve_bsde_lsmc(problem, ensemble, basis, Terminal::Zero)?;
    let with = solve_bsde_lsmc(problem, ensemble, basis, Terminal::Values(xi_n))?;
    let (mut gap, mut se) = (0.0f64, 0.0);
    for i in 0..=steps {
        let w = (-problem.beta * grid.time(i)).exp();
        let v: Vec<f64> = (0..paths)
            .map(|p| {
                let sq: f64 = zero.y(p, i).iter().zip(with.y(p, i)).map(|(a, b)| (a - b).powi(2)).sum();
                w * sq
            })
            .collect();
        let (m, s) = mean_se(&v);
        if m > gap {
            gap = m;
            se = s;
        }
    }
    let mean_xi_sq = xi.iter().map(|v| v * v).sum::<f64>() / paths as f64;
    Ok(StabilityGap {
        gap,
        bound: (-problem.beta * grid.horizon()).exp() * mean_xi_sq,
        se,
        horizon: grid.horizon(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRow {
    pub horizon: f64,
    pub steps: usize,
    pub y0: f64,
    pub se: f64,
    /// `|Y_0(T_j) - Y_0(T_{j-1})|`, absent for the first row.
    pub diff: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    pub converged: bool,
}

/// Solves on each horizon with fixed `dt` and tabulates `Y_0` (first
/// coordinate). Converged when the last difference is within
/// `max(1e-3, 3 SE)`.
pub fn horizon_truncation_sweep(
    problem: &DiscountedProblem,
    law: &ControlLaw,
    horizons: &[f64],
    dt: f64,
    n_paths: usize,
    seed: u64,
    basis: &RegressionBasis,
) -> Result<SweepTable> {
    if horizons.windows(2).any(|w| w[1] <= w[0]) || horizons.is_empty() {
        return Err(invalid("horizons", "must be a non-empty increasing list"));
    }
    let mut rows: Vec<SweepRow> = Vec::new();
    let mut converged = false;
    for &h in horizons {
        let grid = TimeGrid::with_step(h, dt)?;
        let e = simulate_forward(problem, law, &SimSpec::new(grid, n_paths, seed))?;
        let s = solve_bsde_lsmc(problem, &e, basis, Terminal::Zero)?;
        let y0 = s.y0()[0];
        let se = s.y0_se();
        let diff = rows.last().map(|r| (y0 - r.y0).abs());
        if let (Some(dv), Some(prev)) = (diff, rows.last()) {
            converged = dv <= 1e-3f64.max(3.0 * se.max(prev.se));
        }
        rows.push(SweepRow {
            horizon: grid.horizon(),
            steps: grid.steps(),
            y0,
            se,
            diff,
        });
    }
    Ok(SweepTable { rows, converged })
}

/// Truncation consistency: on paths with `max_t X_t < n_cyl` the solutions
/// with truncation levels `m` and `p` coincide. The regressions are fit on
/// that subset only so that both solves see identical inputs.
pub fn cylinder_consistency_check(
    problem: &DiscountedProblem,
    ensemble: &PathEnsemble,
    basis: &RegressionBasis,
    m: f64,
    p: f64,
    n_cyl: f64,
) -> Result<VerificationReport> {
    if !(m > n_cyl && p > n_cyl) {
        return Err(invalid("truncation", "levels must exceed the cylinder size"));
    }
    let steps = ensemble.grid().steps();
    let inside: Vec<bool> = (0..ensemble.n_paths())
        .map(|q| {
            ensemble.flags()[q].is_clean()
                && (0..=steps).all(|i| ensemble.state(q, i).iter().all(|v| v.abs() < n_cyl))
        })
        .collect();
    let kept = inside.iter().filter(|b| **b).count();
    let name = "consistency";
    if kept == 0 {
        return Ok(VerificationReport::new(name, Status::Inconclusive)
            .with_sample(0, 0.0)
            .with_notes(format!("no path stays below {n_cyl}")));
    }
    let base = BsdeOptions::new(basis.clone()).mask(inside.clone());
    let a = solve_bsde_with(problem, ensemble, &base.clone().truncation(m))?;
    let b = solve_bsde_with(problem, ensemble, &base.truncation(p))?;
    let mut worst_y = 0.0f64;
    let mut worst_z = 0.0f64;
    for q in (0..ensemble.n_paths()).filter(|q| inside[*q]) {
        for i in 0..=steps {
            for (u, v) in a.y(q, i).iter().zip(b.y(q, i)) {
                worst_y = worst_y.max((u - v).abs());
            }
            if i < steps {
                for (u, v) in a.z(q, i).iter().zip(b.z(q, i)) {
                    worst_z = worst_z.max((u - v).abs());
                }
            }
        }
    }
    let worst = worst_y.max(worst_z);
    Ok(VerificationReport::new(name, Status::from_bool(worst <= 1e-8))
        .with_stat(worst, 1e-8)
        .with_sample(kept, 0.0)
        .with_notes(format!(
            "levels {m} and {p}, cylinder {n_cyl}: {kept} of {} paths retained; max |dY| {worst_y:.3e}, max |dZ| {worst_z:.3e}",
            ensemble.n_paths()
        )))
}
