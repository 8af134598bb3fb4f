//! Executes an experiment's checks and writes the result files.
//!
//! Output directory layout:
//!
//! - `results.json`: every report and cost estimate, versioned by `schema`;
//!   the wall-clock timestamp lives in the trailing `metadata` block so the
//!   rest of the file is reproducible for a fixed config and seed.
//! - `paths.csv`, `bsde.csv`: the first `write_paths` paths (row-capped).
//! - `coefficients.json`: regression coefficients by step.
//! - `convergence.csv`: the horizon sweep, when `stability` ran.
//! - `paths.bin`: `SMP1` binary dump of paths and adjoint, on request.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{anyhow, Context, Result};
use serde::Serialize;

use smp_core::audit::{check_beta_threshold, concavity_probe, maximized_concavity_probe, validate_assumptions};
use smp_core::bsde::{cylinder_consistency_check, horizon_truncation_sweep, martingale_residual_check, terminal_stability_gap, SweepTable};
use smp_core::export;
use smp_core::forward::{apriori_gap_check, comparison_check, positivity_check};
use smp_core::grid::{auto_horizon, TimeGrid};
use smp_core::verify::{check_pointwise_max, check_tvc, compare_costs, subsample_points, PairedDifference, DEFAULT_SUBSAMPLE};
use smp_core::{CostEstimate, SimSpec, StateRegion, Status, VerificationReport};

use crate::config::{Check, ExperimentConfig, AUTO_TAIL, MAX_CSV_ROWS};
use crate::registry::{Candidate, Instance, Registry, RunContext};

pub const SCHEMA: u32 = 1;
pub const EXIT_PASS: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_FAIL: i32 = 2;
pub const EXIT_INCONCLUSIVE: i32 = 3;

/// Points sampled by the assumption audit.
pub const AUDIT_POINTS: usize = 10_000;
/// `(y, z)` points and random pairs per point for the concavity probes.
pub const CONCAVITY_POINTS: usize = 200;
pub const CONCAVITY_PAIRS: usize = 50;

/// Maps an overall status onto the process exit code.
pub fn exit_code(status: Status) -> i32 {
    match status {
        Status::Pass => EXIT_PASS,
        Status::Fail => EXIT_FAIL,
        Status::Inconclusive => EXIT_INCONCLUSIVE,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub check: Check,
    pub status: Status,
    pub reports: Vec<VerificationReport>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSettings {
    pub seed: u64,
    pub paths: usize,
    pub steps: usize,
    pub horizon: f64,
    pub dt: f64,
    pub beta: f64,
    pub basis_degree: usize,
    pub checks: Vec<Check>,
    pub params: serde_json::Value,
}

#[derive(Debug, Clone, Serialize)]
pub struct Metadata {
    pub timestamp: String,
    pub version: &'static str,
}

/// Contents of `results.json`.
#[derive(Debug, Clone, Serialize)]
pub struct RunResults {
    pub schema: u32,
    pub experiment: String,
    pub status: Status,
    pub exit_code: i32,
    pub settings: RunSettings,
    pub diagnostics: Vec<VerificationReport>,
    pub checks: Vec<CheckResult>,
    pub costs: Vec<CostEstimate>,
    pub cost_pairs: Vec<PairedDifference>,
    pub files: Vec<String>,
    pub metadata: Metadata,
}

impl RunResults {
    /// Human-readable summary, one row per report.
    pub fn table(&self) -> String {
        let mut s = format!("experiment {}: {} (exit {})\n", self.experiment, self.status, self.exit_code);
        for d in &self.diagnostics {
            s.push_str(&format!("  [diag] {}\n", d.table_row()));
        }
        for c in &self.checks {
            s.push_str(&format!("{} [{}]\n", c.check, c.status));
            for r in &c.reports {
                s.push_str(&format!("  {}\n", r.table_row()));
            }
        }
        s
    }
}

#[derive(Default)]
struct Collected {
    costs: Vec<CostEstimate>,
    pairs: Vec<PairedDifference>,
    sweep: Option<SweepTable>,
}

/// Runs `config` against `registry` and writes the output directory.
pub fn run(registry: &Registry, config: &ExperimentConfig) -> Result<RunResults> {
    let experiment = registry
        .get(&config.experiment)
        .ok_or_else(|| anyhow!("unknown experiment `{}`", config.experiment))?;
    let instance = experiment.instantiate(&config.params)?;
    let problem = instance.problem();
    let horizon = config.horizon.unwrap_or_else(|| auto_horizon(problem.beta, AUTO_TAIL));
    let grid = TimeGrid::new(horizon, config.steps)?;
    let ctx = RunContext {
        spec: SimSpec::new(grid, config.paths, config.seed),
        basis: instance.basis(config.basis_degree),
        seed: config.seed,
    };
    let checks: Vec<Check> = if config.checks.is_empty() {
        Check::ALL.iter().copied().filter(|c| instance.applies(*c)).collect()
    } else {
        config.checks.clone()
    };

    log::info!("{}: solving on T = {horizon:.4}, {} steps, {} paths", config.experiment, grid.steps(), config.paths);
    // A failed solve still lets the candidate-free checks (the assumption
    // audit) run; everything else becomes inconclusive.
    let (candidate, mut diagnostics) = match instance.solve(&ctx) {
        Ok(c) => {
            let d = c.diagnostics.clone();
            (Some(c), d)
        }
        Err(e) => {
            let note = format!("candidate solve failed: {e:#}");
            log::warn!("{note}");
            (None, vec![VerificationReport::new("solve", Status::Fail).with_notes(note)])
        }
    };

    let mut collected = Collected::default();
    let mut results = Vec::new();
    for &check in &checks {
        log::info!("check {check}");
        let reports = if !instance.applies(check) {
            vec![VerificationReport::new(check.name(), Status::Inconclusive).with_notes("not applicable to this experiment")]
        } else {
            run_check(check, instance.as_ref(), &ctx, candidate.as_ref(), &mut collected).unwrap_or_else(|e| {
                vec![VerificationReport::new(check.name(), Status::Inconclusive).with_notes(format!("error: {e:#}"))]
            })
        };
        let status = reports.iter().fold(Status::Pass, |s, r| s.and(r.status));
        results.push(CheckResult { check, status, reports });
    }
    let status = results.iter().fold(Status::Pass, |s, c| s.and(c.status));

    fs::create_dir_all(&config.out).with_context(|| format!("creating {}", config.out.display()))?;
    let files = match &candidate {
        Some(c) => write_artifacts(&config.out, config, c, collected.sweep.as_ref())?,
        None => Vec::new(),
    };
    diagnostics.sort_by(|a, b| a.check.cmp(&b.check));

    let out = RunResults {
        schema: SCHEMA,
        experiment: config.experiment.clone(),
        status,
        exit_code: exit_code(status),
        settings: RunSettings {
            seed: config.seed,
            paths: config.paths,
            steps: grid.steps(),
            horizon: grid.horizon(),
            dt: grid.dt(),
            beta: problem.beta,
            basis_degree: config.basis_degree,
            checks,
            params: instance.params_json(),
        },
        diagnostics,
        checks: results,
        costs: collected.costs,
        cost_pairs: collected.pairs,
        files,
        metadata: Metadata {
            timestamp: chrono::Utc::now().to_rfc3339(),
            version: env!("CARGO_PKG_VERSION"),
        },
    };
    let mut text = serde_json::to_string_pretty(&out)?;
    text.push('\n');
    fs::write(config.out.join("results.json"), text).context("writing results.json")?;
    Ok(out)
}

fn run_check(
    check: Check,
    inst: &dyn Instance,
    ctx: &RunContext,
    cand: Option<&Candidate>,
    collected: &mut Collected,
) -> Result<Vec<VerificationReport>> {
    let problem = inst.problem();
    let seed = ctx.seed;
    if check == Check::Assumptions {
        let mut v = validate_assumptions(problem, &inst.audit_sample(AUDIT_POINTS, seed));
        v.push(check_beta_threshold(problem));
        v.extend(inst.extra_reports(check, ctx)?);
        return Ok(v);
    }
    let Some(cand) = cand else {
        return Ok(vec![VerificationReport::new(check.name(), Status::Inconclusive).with_notes("no solved candidate")]);
    };
    let mut reports = match check {
        Check::Assumptions => unreachable!("handled above"),
        Check::PointwiseMax => vec![check_pointwise_max(problem, &cand.ensemble, &cand.adjoint, DEFAULT_SUBSAMPLE, seed.wrapping_add(1))],
        Check::Concavity => vec![concavity(inst, ctx, cand)],
        Check::Tvc => vec![check_tvc(problem, &cand.law, &cand.adjoint, &inst.competitors(), &ctx.spec)?],
        Check::CostCompare => {
            let cmp = compare_costs(problem, &cand.law, &inst.competitors(), &ctx.spec)?;
            collected.costs.push(cmp.candidate);
            collected.costs.extend(cmp.pairs.iter().map(|p| p.competitor.clone()));
            collected.pairs.extend(cmp.pairs);
            vec![cmp.report]
        }
        Check::Stability => stability(inst, ctx, cand, collected)?,
        Check::Consistency => {
            let mut v = vec![martingale_residual_check(problem, &cand.ensemble, cand.regression())];
            if let Some(t) = inst.truncation() {
                v.push(cylinder_consistency_check(problem, &cand.ensemble, &ctx.basis, t.m, t.p, t.n_cyl)?);
            }
            v
        }
        Check::Sandwich => vec![comparison_check(problem, &cand.law, &ctx.spec)?],
        Check::Positivity => vec![positivity_check(&cand.ensemble)],
    };
    reports.extend(inst.extra_reports(check, ctx)?);
    Ok(reports)
}

/// Joint concavity in `(x, u)` when it holds, otherwise concavity of the
/// maximized Hamiltonian in `x`; either one suffices for sufficiency.
fn concavity(inst: &dyn Instance, ctx: &RunContext, cand: &Candidate) -> VerificationReport {
    let sol = &cand.adjoint;
    let pts = subsample_points(cand.ensemble.n_paths(), ctx.spec.grid.steps(), CONCAVITY_POINTS, ctx.seed.wrapping_add(2));
    let yz: Vec<(Vec<f64>, Vec<f64>)> = pts.iter().map(|&(p, i)| (sol.y(p, i).to_vec(), sol.z(p, i).to_vec())).collect();
    let spec = inst.audit_sample(0, ctx.seed.wrapping_add(3));
    let joint = concavity_probe(inst.problem(), &spec, &yz, CONCAVITY_PAIRS);
    if joint.passed() {
        return VerificationReport { check: "concavity".into(), ..joint };
    }
    let arrow = maximized_concavity_probe(inst.problem(), &spec, &yz, CONCAVITY_PAIRS);
    VerificationReport {
        check: "concavity".into(),
        notes: format!(
            "joint concavity in (x,u) fails at {} of {} pairs; maximized Hamiltonian: {}",
            joint.statistic, joint.n, arrow.notes
        ),
        ..arrow
    }
}

fn stability(inst: &dyn Instance, ctx: &RunContext, cand: &Candidate, collected: &mut Collected) -> Result<Vec<VerificationReport>> {
    let problem = inst.problem();
    let ens = &cand.ensemble;
    let xi = vec![1.0; ens.n_paths() * ens.dims().state];
    let gap = terminal_stability_gap(problem, ens, &ctx.basis, &xi)?;

    let grid = &ctx.spec.grid;
    let t = grid.horizon();
    let sweep = horizon_truncation_sweep(problem, &cand.law, &[0.5 * t, 0.75 * t, t], grid.dt(), ctx.spec.n_paths, ctx.seed, &ctx.basis)?;
    let last = sweep.rows.last().expect("three horizons");
    let sweep_tol = 1e-3f64.max(3.0 * last.se);
    let sweep_report = VerificationReport::new("horizon_sweep", Status::from_bool(sweep.converged))
        .with_stat(last.diff.unwrap_or(f64::NAN), sweep_tol)
        .with_sample(ctx.spec.n_paths, last.se)
        .with_notes(format!("Y0 at T/2, 3T/4, T: {:?}", sweep.rows.iter().map(|r| r.y0).collect::<Vec<_>>()));
    collected.sweep = Some(sweep);

    let x0_b: Vec<f64> = match problem.region {
        StateRegion::Positive => problem.x0.iter().map(|v| 1.5 * v).collect(),
        StateRegion::Whole => problem.x0.iter().map(|v| v + 0.5).collect(),
    };
    let apriori = apriori_gap_check(problem, &cand.law, &ctx.spec, &problem.x0, &x0_b)?;
    Ok(vec![gap.report(ens.n_paths()), sweep_report, apriori])
}

fn create(dir: &Path, name: &str, files: &mut Vec<String>) -> Result<BufWriter<File>> {
    let f = File::create(dir.join(name)).with_context(|| format!("creating {name}"))?;
    files.push(name.to_string());
    Ok(BufWriter::new(f))
}

fn write_artifacts(dir: &Path, config: &ExperimentConfig, cand: &Candidate, sweep: Option<&SweepTable>) -> Result<Vec<String>> {
    let mut files = Vec::new();
    let steps = cand.ensemble.grid().steps();
    let n_csv = config.write_paths.min(cand.ensemble.n_paths()).min(MAX_CSV_ROWS / (steps + 1));
    if n_csv > 0 {
        let mut w = create(dir, "paths.csv", &mut files)?;
        export::write_ensemble_csv(&mut w, &cand.ensemble, n_csv)?;
        w.flush()?;
        let mut w = create(dir, "bsde.csv", &mut files)?;
        export::write_solution_csv(&mut w, &cand.ensemble, &cand.adjoint, n_csv)?;
        w.flush()?;
    }
    let mut w = create(dir, "coefficients.json", &mut files)?;
    serde_json::to_writer(&mut w, &export::coefficients_json(cand.regression()))?;
    w.flush()?;
    if let Some(table) = sweep {
        let mut w = create(dir, "convergence.csv", &mut files)?;
        writeln!(w, "horizon,steps,y0,se,diff")?;
        for r in &table.rows {
            let diff = r.diff.map(|d| d.to_string()).unwrap_or_default();
            writeln!(w, "{},{},{},{},{diff}", r.horizon, r.steps, r.y0, r.se)?;
        }
        w.flush()?;
    }
    if config.binary {
        let mut w = create(dir, "paths.bin", &mut files)?;
        export::write_solution_binary(&mut w, &cand.ensemble, &cand.adjoint)?;
        w.flush()?;
    }
    Ok(files)
}
