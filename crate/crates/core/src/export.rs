//! CSV, binary and JSON exports of ensembles and adjoint solutions.
//!
//! CSV files carry a header row and one row per `(path, node)`; the
//! control columns are empty at the terminal node.
//!
//! Binary layout (all integers `u64`, all reals `f64`, little-endian):
//!
//! ```text
//! magic  b"SMP1"
//! kind   0 = ensemble, 1 = ensemble + adjoint
//! paths, steps, n (state), d (noise), k (control)
//! horizon
//! states   [paths x (steps+1) x n]
//! controls [paths x steps x k]
//! Y        [paths x (steps+1) x n]      (kind 1 only)
//! Z        [paths x steps x (n d)]      (kind 1 only)
//! ```

use std::io::{self, Read, Write};

use serde::Serialize;

use crate::bsde::BsdeSolution;
use crate::error::{invalid, Result, SmpError};
use crate::forward::PathEnsemble;

pub const MAGIC: &[u8; 4] = b"SMP1";

fn header(w: &mut impl Write, e: &PathEnsemble, extra: &[&str]) -> io::Result<()> {
    let d = e.dims();
    let mut cols = vec!["path".to_string(), "t".to_string()];
    cols.extend((0..d.state).map(|j| format!("x{j}")));
    cols.extend((0..d.control).map(|j| format!("u{j}")));
    for prefix in extra {
        let width = if *prefix == "z" { d.state * d.noise } else { d.state };
        cols.extend((0..width).map(|j| format!("{prefix}{j}")));
    }
    writeln!(w, "{}", cols.join(","))
}

fn row(w: &mut impl Write, e: &PathEnsemble, p: usize, i: usize, tail: &[&[f64]], pad: &[usize]) -> io::Result<()> {
    let steps = e.grid().steps();
    let k = e.dims().control;
    write!(w, "{p},{}", e.grid().time(i))?;
    for v in e.state(p, i) {
        write!(w, ",{v}")?;
    }
    if i < steps {
        for v in e.control(p, i) {
            write!(w, ",{v}")?;
        }
    } else {
        w.write_all(",".repeat(k).as_bytes())?;
    }
    for (vals, width) in tail.iter().zip(pad) {
        if vals.is_empty() {
            w.write_all(",".repeat(*width).as_bytes())?;
        }
        for v in *vals {
            write!(w, ",{v}")?;
        }
    }
    writeln!(w)
}

/// Writes the first `max_paths` paths as CSV.
pub fn write_ensemble_csv(w: &mut impl Write, e: &PathEnsemble, max_paths: usize) -> Result<()> {
    header(w, e, &[])?;
    for p in 0..e.n_paths().min(max_paths) {
        for i in 0..=e.grid().steps() {
            row(w, e, p, i, &[], &[])?;
        }
    }
    Ok(())
}

/// Ensemble CSV with `y` and `z` columns appended.
pub fn write_solution_csv(w: &mut impl Write, e: &PathEnsemble, s: &BsdeSolution, max_paths: usize) -> Result<()> {
    check_match(e, s)?;
    header(w, e, &["y", "z"])?;
    let steps = e.grid().steps();
    let nd = e.dims().state * e.dims().noise;
    for p in 0..e.n_paths().min(max_paths) {
        for i in 0..=steps {
            let z: &[f64] = if i < steps { s.z(p, i) } else { &[] };
            row(w, e, p, i, &[s.y(p, i), z], &[e.dims().state, nd])?;
        }
    }
    Ok(())
}

fn check_match(e: &PathEnsemble, s: &BsdeSolution) -> Result<()> {
    if e.grid() != s.grid() || e.n_paths() != s.n_paths() || e.dims() != s.dims() {
        return Err(invalid("solution", "does not belong to the ensemble"));
    }
    Ok(())
}

fn put_u64(w: &mut impl Write, v: u64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_reals(w: &mut impl Write, vals: &[f64]) -> io::Result<()> {
    for v in vals {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn put_header(w: &mut impl Write, e: &PathEnsemble, kind: u64) -> io::Result<()> {
    let d = e.dims();
    w.write_all(MAGIC)?;
    for v in [kind, e.n_paths() as u64, e.grid().steps() as u64, d.state as u64, d.noise as u64, d.control as u64] {
        put_u64(w, v)?;
    }
    put_reals(w, &[e.grid().horizon()])?;
    put_reals(w, e.states())?;
    put_reals(w, e.controls())
}

pub fn write_ensemble_binary(w: &mut impl Write, e: &PathEnsemble) -> Result<()> {
    put_header(w, e, 0)?;
    Ok(())
}

pub fn write_solution_binary(w: &mut impl Write, e: &PathEnsemble, s: &BsdeSolution) -> Result<()> {
    check_match(e, s)?;
    put_header(w, e, 1)?;
    put_reals(w, s.y_values())?;
    put_reals(w, s.z_values())?;
    Ok(())
}

/// Decoded binary dump.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryDump {
    pub paths: usize,
    pub steps: usize,
    pub state: usize,
    pub noise: usize,
    pub control: usize,
    pub horizon: f64,
    pub states: Vec<f64>,
    pub controls: Vec<f64>,
    /// Present for kind 1.
    pub adjoint: Option<(Vec<f64>, Vec<f64>)>,
}

fn get_u64(r: &mut impl Read) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn get_reals(r: &mut impl Read, n: usize) -> io::Result<Vec<f64>> {
    let mut out = Vec::with_capacity(n);
    let mut b = [0u8; 8];
    for _ in 0..n {
        r.read_exact(&mut b)?;
        out.push(f64::from_le_bytes(b));
    }
    Ok(out)
}

pub fn read_binary(r: &mut impl Read) -> Result<BinaryDump> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(SmpError::Io(io::Error::new(io::ErrorKind::InvalidData, "bad magic")));
    }
    let kind = get_u64(r)?;
    let mut dims = [0usize; 5];
    for v in dims.iter_mut() {
        *v = get_u64(r)? as usize;
    }
    let [paths, steps, n, d, k] = dims;
    let horizon = get_reals(r, 1)?[0];
    let states = get_reals(r, paths * (steps + 1) * n)?;
    let controls = get_reals(r, paths * steps * k)?;
    let adjoint = match kind {
        0 => None,
        1 => Some((get_reals(r, paths * (steps + 1) * n)?, get_reals(r, paths * steps * n * d)?)),
        other => return Err(SmpError::Io(io::Error::new(io::ErrorKind::InvalidData, format!("unknown kind {other}")))),
    };
    Ok(BinaryDump {
        paths,
        steps,
        state: n,
        noise: d,
        control: k,
        horizon,
        states,
        controls,
        adjoint,
    })
}

#[derive(Debug, Clone, Serialize)]
struct CoefficientEntry<'a> {
    step: usize,
    coefs: &'a [f64],
    outputs: usize,
    condition: f64,
    ridge: bool,
}

/// Regression coefficient tables keyed by step index: `step_fits` hold
/// `[E[Y_{i+1}|X_i]; Z_i]`, `y_fits` the refit `Y_i`.
pub fn coefficients_json(s: &BsdeSolution) -> serde_json::Value {
    let entries = |fits: &[crate::basis::StepFit]| {
        fits.iter()
            .enumerate()
            .map(|(step, f)| CoefficientEntry {
                step,
                coefs: &f.coefs,
                outputs: f.outputs,
                condition: f.condition,
                ridge: f.ridge,
            })
            .map(|e| serde_json::to_value(e).expect("plain data serializes"))
            .collect::<Vec<_>>()
    };
    serde_json::json!({
        "basis": s.basis(),
        "step_fits": entries(s.step_fits()),
        "y_fits": entries(s.y_fits()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::RegressionBasis;
    use crate::bsde::{solve_bsde_lsmc, Terminal};
    use crate::forward::fixtures::gbm_problem;
    use crate::forward::{simulate_forward, SimSpec};
    use crate::grid::TimeGrid;
    use crate::law::ControlLaw;
    use crate::problem::StateRegion;

    fn sample() -> (PathEnsemble, BsdeSolution) {
        let p = gbm_problem(0.05, 0.2, 1.0, StateRegion::Positive);
        let e = simulate_forward(&p, &ControlLaw::constant(0.5), &SimSpec::new(TimeGrid::new(1.0, 4).unwrap(), 50, 3)).unwrap();
        let s = solve_bsde_lsmc(&p, &e, &RegressionBasis::polynomial(2), Terminal::Zero).unwrap();
        (e, s)
    }

    #[test]
    fn binary_round_trip() {
        let (e, s) = sample();
        let mut buf = Vec::new();
        write_solution_binary(&mut buf, &e, &s).unwrap();
        assert_eq!(&buf[..4], MAGIC);
        let d = read_binary(&mut buf.as_slice()).unwrap();
        assert_eq!((d.paths, d.steps, d.state, d.noise, d.control), (50, 4, 1, 1, 1));
        assert_eq!(d.states, e.states());
        assert_eq!(d.controls, e.controls());
        let (y, z) = d.adjoint.unwrap();
        assert_eq!(y, s.y_values());
        assert_eq!(z, s.z_values());
    }

    #[test]
    fn csv_shape() {
        let (e, s) = sample();
        let mut buf = Vec::new();
        write_solution_csv(&mut buf, &e, &s, 2).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "path,t,x0,u0,y0,z0");
        assert_eq!(lines.len(), 1 + 2 * 5);
        assert!(lines.iter().all(|l| l.split(',').count() == 6));
    }

    #[test]
    fn coefficients_are_keyed_by_step() {
        let (_, s) = sample();
        let v = coefficients_json(&s);
        assert_eq!(v["step_fits"].as_array().unwrap().len(), 4);
        assert_eq!(v["y_fits"][4]["step"], 4);
    }
}
