//! Regression bases and per-step least-squares fits.
//!
//! States are standardized per time step with the mean and standard
//! deviation of the fitting sample. Polynomial features are all monomials
//! of total degree up to `degree` in the standardized coordinates. For
//! positive states a reciprocal feature `mean_l / x_l` per coordinate can
//! be added. A step whose sample has no spread uses the constant only.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result, SmpError};
use crate::exec::{chunked_reduce, Execution};

/// Tikhonov shift used when the Gram matrix is singular or ill-conditioned.
pub const RIDGE_LAMBDA: f64 = 1e-8;
/// Gram-matrix condition number above which the ridge fallback engages.
pub const MAX_GRAM_CONDITION: f64 = 1e14;
/// Fraction of non-finite targets tolerated before a fit is refused.
pub const MAX_NON_FINITE_FRACTION: f64 = 0.01;
const DEGENERATE_SPREAD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisFamily {
    Polynomial,
    /// `exp(-w/2) L_k(w)` per coordinate in the shifted coordinate
    /// `w = (x - min) / sd >= 0`.
    Laguerre,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegressionBasis {
    pub family: BasisFamily,
    pub degree: usize,
    /// Adds `mean / x` per coordinate; intended for positive states.
    pub reciprocal: bool,
}

impl Default for RegressionBasis {
    fn default() -> Self {
        Self::polynomial(4)
    }
}

impl RegressionBasis {
    pub fn polynomial(degree: usize) -> Self {
        Self {
            family: BasisFamily::Polynomial,
            degree,
            reciprocal: false,
        }
    }

    pub fn laguerre(degree: usize) -> Self {
        Self {
            family: BasisFamily::Laguerre,
            degree,
            reciprocal: false,
        }
    }

    pub fn with_reciprocal(mut self, on: bool) -> Self {
        self.reciprocal = on;
        self
    }

    /// Number of features for state dimension `n`, including the constant.
    pub fn len(&self, n: usize) -> usize {
        let core = match self.family {
            BasisFamily::Polynomial => exponents(n, self.degree).len(),
            BasisFamily::Laguerre => n * self.degree,
        };
        1 + core + if self.reciprocal { n } else { 0 }
    }

    /// Standardization fitted to the rows `xs` (`rows x n`) selected by `use_row`.
    pub fn transform(&self, xs: &[f64], n: usize, use_row: impl Fn(usize) -> bool) -> StepTransform {
        let rows = xs.len() / n.max(1);
        let mut count = 0usize;
        let mut mean = vec![0.0; n];
        let mut min = vec![f64::INFINITY; n];
        for r in (0..rows).filter(|r| use_row(*r)) {
            count += 1;
            for l in 0..n {
                let v = xs[r * n + l];
                mean[l] += v;
                min[l] = min[l].min(v);
            }
        }
        let c = count.max(1) as f64;
        mean.iter_mut().for_each(|m| *m /= c);
        let mut var = vec![0.0; n];
        for r in (0..rows).filter(|r| use_row(*r)) {
            for l in 0..n {
                var[l] += (xs[r * n + l] - mean[l]).powi(2);
            }
        }
        let scale: Vec<f64> = var.iter().map(|v| (v / c).sqrt()).collect();
        let degenerate = count < 2 || scale.iter().zip(&mean).all(|(s, m)| *s <= DEGENERATE_SPREAD * (1.0 + m.abs()));
        StepTransform {
            mean,
            scale: scale.iter().map(|s| if *s > 0.0 { *s } else { 1.0 }).collect(),
            min: min.iter().map(|m| if m.is_finite() { *m } else { 0.0 }).collect(),
            degenerate,
        }
    }

    /// Writes the feature vector of `x` into `out` (length `self.len(n)`).
    pub fn features(&self, t: &StepTransform, x: &[f64], out: &mut [f64]) {
        let n = x.len();
        out.iter_mut().for_each(|v| *v = 0.0);
        out[0] = 1.0;
        if t.degenerate {
            return;
        }
        let mut j = 1;
        match self.family {
            BasisFamily::Polynomial => {
                if n == 1 {
                    let z = (x[0] - t.mean[0]) / t.scale[0];
                    let mut p = 1.0;
                    for _ in 0..self.degree {
                        p *= z;
                        out[j] = p;
                        j += 1;
                    }
                } else {
                    let z: Vec<f64> = (0..n).map(|l| (x[l] - t.mean[l]) / t.scale[l]).collect();
                    for e in exponents(n, self.degree) {
                        out[j] = e.iter().zip(&z).map(|(k, v)| v.powi(*k as i32)).product();
                        j += 1;
                    }
                }
            }
            BasisFamily::Laguerre => {
                for l in 0..n {
                    let w = ((x[l] - t.min[l]) / t.scale[l]).max(0.0);
                    let damp = (-0.5 * w).exp();
                    let (mut prev, mut cur) = (0.0, 1.0);
                    for k in 0..self.degree {
                        out[j] = damp * cur;
                        j += 1;
                        let next = ((2 * k + 1) as f64 - w) * cur - k as f64 * prev;
                        prev = cur;
                        cur = next / (k + 1) as f64;
                    }
                }
            }
        }
        if self.reciprocal {
            for l in 0..n {
                out[j] = if x[l] != 0.0 { t.mean[l] / x[l] } else { 0.0 };
                j += 1;
            }
        }
    }
}

fn exponents(n: usize, degree: usize) -> Vec<Vec<usize>> {
    fn rec(i: usize, left: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if i == cur.len() {
            if cur.iter().any(|e| *e > 0) {
                out.push(cur.clone());
            }
            return;
        }
        for e in 0..=left {
            cur[i] = e;
            rec(i + 1, left - e, cur, out);
        }
        cur[i] = 0;
    }
    let mut out = Vec::new();
    rec(0, degree, &mut vec![0; n], &mut out);
    out.sort_by_key(|e| e.iter().sum::<usize>());
    out
}

/// Per-step affine standardization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTransform {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub min: Vec<f64>,
    /// All fitting states coincide; only the constant feature is used.
    pub degenerate: bool,
}

/// Least-squares fit of `m` outputs on the basis at one time step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepFit {
    pub transform: StepTransform,
    /// `p x m` row-major.
    pub coefs: Vec<f64>,
    pub outputs: usize,
    /// Condition number of the (normalized) design matrix.
    pub condition: f64,
    pub ridge: bool,
    /// Rows used in the fit.
    pub rows: usize,
}

impl StepFit {
    /// Fit that returns the given constants everywhere.
    pub fn constant(basis: &RegressionBasis, n: usize, values: &[f64]) -> Self {
        let p = basis.len(n);
        let m = values.len();
        let mut coefs = vec![0.0; p * m];
        coefs[..m].copy_from_slice(values);
        Self {
            transform: StepTransform {
                mean: vec![0.0; n],
                scale: vec![1.0; n],
                min: vec![0.0; n],
                degenerate: true,
            },
            coefs,
            outputs: m,
            condition: 1.0,
            ridge: false,
            rows: 0,
        }
    }

    pub fn predict(&self, basis: &RegressionBasis, x: &[f64], out: &mut [f64]) {
        let p = self.coefs.len() / self.outputs;
        let mut phi = smallvec::SmallVec::<[f64; 16]>::from_elem(0.0, p);
        basis.features(&self.transform, x, &mut phi);
        self.predict_from_features(&phi, out);
    }

    #[inline]
    pub fn predict_from_features(&self, phi: &[f64], out: &mut [f64]) {
        let m = self.outputs;
        out.iter_mut().for_each(|v| *v = 0.0);
        for (j, f) in phi.iter().enumerate() {
            if *f == 0.0 {
                continue;
            }
            for c in 0..m {
                out[c] += f * self.coefs[j * m + c];
            }
        }
    }

    /// Multiplies every coefficient by `s`.
    pub fn scaled(&self, s: f64) -> Self {
        let mut f = self.clone();
        f.coefs.iter_mut().for_each(|c| *c *= s);
        f
    }
}

/// Regresses `targets` (`rows x m`) on the basis of `xs` (`rows x n`).
///
/// Rows with `mask[r] == false` are ignored. Rows with any non-finite target
/// are dropped; more than 1% of them is an error. The Gram matrix is
/// accumulated in fixed chunks so the fit does not depend on the thread
/// count.
#[allow(clippy::too_many_arguments)]
pub fn fit_step(
    basis: &RegressionBasis,
    exec: Execution,
    step: usize,
    xs: &[f64],
    n: usize,
    targets: &[f64],
    m: usize,
    mask: Option<&[bool]>,
) -> Result<StepFit> {
    let rows = xs.len() / n;
    if targets.len() != rows * m {
        return Err(SmpError::Dimension {
            context: "regression targets",
            expected: rows * m,
            got: targets.len(),
        });
    }
    let selected = |r: usize| mask.map_or(true, |mk| mk[r]);
    let finite = |r: usize| targets[r * m..(r + 1) * m].iter().all(|v| v.is_finite());
    let total = (0..rows).filter(|r| selected(*r)).count();
    if total == 0 {
        return Err(invalid("mask", format!("no rows selected at step {step}")));
    }
    let bad = (0..rows).filter(|r| selected(*r) && !finite(*r)).count();
    if bad as f64 > MAX_NON_FINITE_FRACTION * total as f64 {
        return Err(SmpError::NonFiniteTargets { step, bad, total });
    }
    let use_row = |r: usize| selected(r) && finite(r);
    let transform = basis.transform(xs, n, use_row);
    let p = if transform.degenerate { 1 } else { basis.len(n) };
    let full = basis.len(n);

    let (gram, rhs, count) = chunked_reduce(
        exec,
        rows,
        || (vec![0.0; p * p], vec![0.0; p * m], 0usize),
        |acc, r| {
            if !use_row(r) {
                return;
            }
            let mut phi = smallvec::SmallVec::<[f64; 16]>::from_elem(0.0, full);
            basis.features(&transform, &xs[r * n..(r + 1) * n], &mut phi);
            for a in 0..p {
                for b in a..p {
                    acc.0[a * p + b] += phi[a] * phi[b];
                }
                for c in 0..m {
                    acc.1[a * m + c] += phi[a] * targets[r * m + c];
                }
            }
            acc.2 += 1;
        },
        |a, b| {
            a.0.iter_mut().zip(&b.0).for_each(|(x, y)| *x += y);
            a.1.iter_mut().zip(&b.1).for_each(|(x, y)| *x += y);
            a.2 += b.2;
        },
    );
    let cf = count as f64;
    let g = DMatrix::from_fn(p, p, |a, b| {
        let (i, j) = if a <= b { (a, b) } else { (b, a) };
        gram[i * p + j] / cf
    });
    let r = DMatrix::from_fn(p, m, |a, c| rhs[a * m + c] / cf);
    let (sol, condition, ridge) = solve_normal(&g, &r, step)?;
    let mut coefs = vec![0.0; full * m];
    for a in 0..p {
        for c in 0..m {
            coefs[a * m + c] = sol[(a, c)];
        }
    }
    Ok(StepFit {
        transform,
        coefs,
        outputs: m,
        condition,
        ridge,
        rows: count,
    })
}

fn solve_normal(g: &DMatrix<f64>, r: &DMatrix<f64>, step: usize) -> Result<(DMatrix<f64>, f64, bool)> {
    let eig = SymmetricEigen::new(g.clone()).eigenvalues;
    let lmax = eig.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lmin = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    let gram_cond = if lmin > 0.0 { lmax / lmin } else { f64::INFINITY };
    let condition = gram_cond.sqrt();
    if gram_cond <= MAX_GRAM_CONDITION {
        if let Some(ch) = g.clone().cholesky() {
            return Ok((ch.solve(r), condition, false));
        }
    }
    log::debug!("step {step}: design matrix condition {condition:.3e}, using ridge fallback");
    let shifted = g + DMatrix::identity(g.nrows(), g.ncols()) * RIDGE_LAMBDA;
    let ch = shifted
        .cholesky()
        .ok_or_else(|| SmpError::LinearAlgebra(format!("ridge system not positive definite at step {step}")))?;
    Ok((ch.solve(r), condition, true))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn feature_counts() {
        assert_eq!(RegressionBasis::polynomial(4).len(1), 5);
        assert_eq!(RegressionBasis::polynomial(4).with_reciprocal(true).len(1), 6);
        // monomials of total degree 1..=2 in two variables: 5
        assert_eq!(RegressionBasis::polynomial(2).len(2), 6);
        assert_eq!(RegressionBasis::laguerre(3).len(2), 7);
    }

    #[test]
    fn recovers_a_polynomial_exactly() {
        let xs: Vec<f64> = (0..400).map(|i| -2.0 + i as f64 * 0.01).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 1.0 - 2.0 * x + 0.5 * x * x * x).collect();
        let b = RegressionBasis::polynomial(4);
        let fit = fit_step(&b, Execution::Sequential, 0, &xs, 1, &ys, 1, None).unwrap();
        let mut out = [0.0];
        fit.predict(&b, &[0.7], &mut out);
        assert_relative_eq!(out[0], 1.0 - 1.4 + 0.5 * 0.343, epsilon = 1e-9);
        assert!(!fit.ridge);
        assert!(fit.condition.is_finite() && fit.condition >= 1.0);
    }

    #[test]
    fn reciprocal_feature_fits_inverse() {
        let xs: Vec<f64> = (1..500).map(|i| 0.2 + i as f64 * 0.01).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 / x).collect();
        let b = RegressionBasis::polynomial(2).with_reciprocal(true);
        let fit = fit_step(&b, Execution::Sequential, 0, &xs, 1, &ys, 1, None).unwrap();
        let mut out = [0.0];
        fit.predict(&b, &[0.9], &mut out);
        assert_relative_eq!(out[0], 2.0 / 0.9, epsilon = 1e-8);
    }

    #[test]
    fn degenerate_step_uses_the_mean() {
        let xs = vec![0.5; 10];
        let ys: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let b = RegressionBasis::polynomial(4);
        let fit = fit_step(&b, Execution::Sequential, 0, &xs, 1, &ys, 1, None).unwrap();
        assert!(fit.transform.degenerate);
        let mut out = [0.0];
        fit.predict(&b, &[0.5], &mut out);
        assert_relative_eq!(out[0], 4.5, epsilon = 1e-12);
    }

    #[test]
    fn collinear_design_falls_back_to_ridge() {
        // Only two distinct states: degree 4 is unidentifiable.
        let xs: Vec<f64> = (0..100).map(|i| if i % 2 == 0 { 1.0 } else { 2.0 }).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 * x).collect();
        let b = RegressionBasis::polynomial(4);
        let fit = fit_step(&b, Execution::Sequential, 3, &xs, 1, &ys, 1, None).unwrap();
        assert!(fit.ridge);
        let mut out = [0.0];
        fit.predict(&b, &[2.0], &mut out);
        assert_relative_eq!(out[0], 6.0, epsilon = 1e-5);
    }

    #[test]
    fn non_finite_targets() {
        let xs: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let mut ys = xs.clone();
        ys[3] = f64::NAN;
        let b = RegressionBasis::polynomial(1);
        assert!(fit_step(&b, Execution::Sequential, 0, &xs, 1, &ys, 1, None).is_ok());
        ys[4] = f64::INFINITY;
        let err = fit_step(&b, Execution::Sequential, 7, &xs, 1, &ys, 1, None).unwrap_err();
        assert!(matches!(err, SmpError::NonFiniteTargets { step: 7, bad: 2, total: 100 }));
    }

    #[test]
    fn masked_rows_are_ignored() {
        let xs: Vec<f64> = (0..100).map(|i| i as f64 * 0.1).collect();
        let mut ys: Vec<f64> = xs.iter().map(|x| 2.0 * x).collect();
        let mask: Vec<bool> = (0..100).map(|i| i < 50).collect();
        for y in ys.iter_mut().skip(50) {
            *y = 1e6;
        }
        let b = RegressionBasis::polynomial(1);
        let fit = fit_step(&b, Execution::Sequential, 0, &xs, 1, &ys, 1, Some(&mask)).unwrap();
        let mut out = [0.0];
        fit.predict(&b, &[1.0], &mut out);
        assert_relative_eq!(out[0], 2.0, epsilon = 1e-9);
        assert_eq!(fit.rows, 50);
    }

    #[test]
    fn laguerre_fits_smooth_function() {
        let xs: Vec<f64> = (0..300).map(|i| i as f64 * 0.01).collect();
        let ys: Vec<f64> = xs.iter().map(|x| (-x).exp()).collect();
        let b = RegressionBasis::laguerre(5);
        let fit = fit_step(&b, Execution::Sequential, 0, &xs, 1, &ys, 1, None).unwrap();
        let mut out = [0.0];
        fit.predict(&b, &[1.5], &mut out);
        assert!((out[0] - (-1.5f64).exp()).abs() < 1e-3);
    }
}
