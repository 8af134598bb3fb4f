//! Acceptance criteria at their stated tolerances. Each test prints one
//! `PASS`/`FAIL` line and then asserts the outcome.

use std::time::Instant;

use smp_core::audit::{check_beta_threshold, hamiltonian_gradient_error, validate_assumptions};
use smp_core::basis::RegressionBasis;
use smp_core::bsde::{exp_transform, solve_bsde_lsmc, terminal_stability_gap, BsdeSolution, Terminal, TransformDirection};
use smp_core::forward::{comparison_check, positivity_scan, simulate_forward};
use smp_core::grid::{auto_horizon, TimeGrid};
use smp_core::law::ControlLaw;
use smp_core::models::consumption::{self, ConsumptionParams};
use smp_core::models::logistic::{self, LogisticParams};
use smp_core::models::production::{self, ProductionPlanningParams};
use smp_core::noise::CounterNormal;
use smp_core::verify::{check_pointwise_max, compare_costs, cost_functional_mc, recovered_controls, subsample_points};
use smp_core::{DiscountedProblem, Execution, SimSpec};

fn report(id: &str, name: &str, ok: bool, detail: String) {
    println!("{} {id} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
}

fn positive_basis() -> RegressionBasis {
    RegressionBasis::polynomial(4).with_reciprocal(true)
}

#[test]
fn ac1_consumption_oracle() {
    let start = Instant::now();
    let params = ConsumptionParams::default();
    let beta = params.beta();
    let problem = consumption::consumption_problem(&params).unwrap();
    let grid = TimeGrid::new(auto_horizon(beta, 1e-4), 200).unwrap();
    let spec = SimSpec::new(grid, 50_000, 11).with_exec(Execution::Sequential);
    let ens = simulate_forward(&problem, &consumption::optimal_law(&params), &spec).unwrap();
    let sol = solve_bsde_lsmc(&problem, &ens, &positive_basis(), Terminal::Zero).unwrap();
    let exact = 1.0 / (params.x0 * beta);
    let y0_err = (sol.y0()[0] - exact).abs() / exact;

    // Zero terminal data biases Y by the factor 1 - e^{-beta (T - t)}; sample
    // only where that factor is within 1% of one.
    let window = grid.horizon() - (100f64).ln() / beta;
    let allowed = (window / grid.dt()).floor() as usize;
    let pts = subsample_points(ens.n_paths(), allowed, 10_000, 5);
    let us = recovered_controls(&problem, &ens, &sol, &pts);
    let close = us.iter().filter(|u| (u[0] - beta).abs() / beta <= 0.05).count();
    let frac = close as f64 / us.len() as f64;
    let secs = start.elapsed().as_secs_f64();
    let ok = y0_err <= 0.05 && frac >= 0.95 && secs <= 60.0;
    report(
        "AC1",
        "consumption oracle",
        ok,
        format!("Y0 rel err {y0_err:.4} (<= 0.05), argmax within 5% of beta at {frac:.4} of points (>= 0.95), {secs:.1}s single-threaded (<= 60)"),
    );
    assert!(ok);
}

#[test]
fn ac2_production_riccati() {
    let params = ProductionPlanningParams::default();
    let ric = production::riccati_oracle(&params).unwrap();
    let agree = ric.ode_agreement();

    let problem = production::production_planning_problem(&params).unwrap();
    let law = production::riccati_feedback_law(&params, &ric);
    let grid = TimeGrid::new(auto_horizon(params.beta, 1e-4), 200).unwrap();
    let ens = simulate_forward(&problem, &law, &SimSpec::new(grid, 20_000, 21)).unwrap();
    let sol = solve_bsde_lsmc(&problem, &ens, &RegressionBasis::polynomial(4), Terminal::Zero).unwrap();
    let target = ric.adjoint(params.x0);
    let y0_err = (sol.y0()[0] - target).abs() / target.abs();

    let det = ProductionPlanningParams { sigma: 0.0, ..params.clone() };
    let det_problem = production::production_planning_problem(&det).unwrap();
    let det_ric = production::riccati_oracle(&det).unwrap();
    let det_grid = TimeGrid::with_step(auto_horizon(det.beta, 1e-6), 1e-3).unwrap();
    let mc = cost_functional_mc(&det_problem, &production::riccati_feedback_law(&det, &det_ric), &SimSpec::new(det_grid, 1, 1)).unwrap();
    let analytic = production::deterministic_closed_loop_cost(&det, &det_ric);
    let cost_err = (-mc.value - analytic).abs() / analytic;

    let ok = agree <= 1e-6 && y0_err <= 0.05 && cost_err <= 0.005;
    report(
        "AC2",
        "production Riccati",
        ok,
        format!(
            "root vs backward ODE {agree:.2e} (<= 1e-6), Y0 {:.5} vs {target:.5} rel err {y0_err:.4} (<= 0.05), sigma=0 cost {:.6} vs {analytic:.6} rel err {cost_err:.2e} (<= 5e-3)",
            sol.y0()[0],
            -mc.value
        ),
    );
    assert!(ok);
}

fn dominance_line(problem: &DiscountedProblem, hat: &ControlLaw, competitors: &[ControlLaw], spec: &SimSpec) -> (bool, String) {
    let cmp = compare_costs(problem, hat, competitors, spec).unwrap();
    let dominated = cmp.pairs.iter().filter(|p| p.dominated()).count();
    let worst = cmp.pairs.iter().map(|p| p.diff / p.se_diff.max(1e-300)).fold(f64::INFINITY, f64::min);
    let ok = cmp.report.passed() && dominated == competitors.len() && competitors.len() >= 7;
    (ok, format!("{}: {dominated}/{} dominated, J(hat) {:.5}, min diff/SE {worst:.2}", problem.name, competitors.len(), cmp.candidate.value))
}

#[test]
fn ac3_cost_dominance() {
    let pp = ProductionPlanningParams::default();
    let prod = production::production_planning_problem(&pp).unwrap();
    let ric = production::riccati_oracle(&pp).unwrap();
    let hat = production::riccati_feedback_law(&pp, &ric);
    let gain = |s: f64, shift: f64| {
        let (phi, psi, u1, c) = (ric.phi * s, ric.psi + shift, pp.u1, pp.c);
        ControlLaw::feedback(move |_t, x, out| out[0] = u1 + (phi * x[0] + psi) / (2.0 * c))
    };
    let prod_competitors = vec![
        ControlLaw::constant(0.5),
        ControlLaw::constant(1.0),
        ControlLaw::constant(1.5),
        ControlLaw::constant(2.5),
        gain(0.5, 0.0),
        gain(1.5, 0.0),
        gain(1.0, 0.5),
        ControlLaw::feedback(|t, _x, out| out[0] = 1.0 + (-t).exp()),
    ];
    let grid = TimeGrid::new(auto_horizon(pp.beta, 1e-4), 200).unwrap();
    let (ok_p, line_p) = dominance_line(&prod, &hat, &prod_competitors, &SimSpec::new(grid, 20_000, 31));

    let cp = ConsumptionParams::default();
    let beta = cp.beta();
    let cons = consumption::consumption_problem(&cp).unwrap();
    let mut cons_competitors: Vec<ControlLaw> = [0.5, 0.8, 1.2, 1.5, 2.0].iter().map(|s| ControlLaw::constant(s * beta)).collect();
    cons_competitors.push(ControlLaw::feedback(move |_t, x, out| out[0] = beta * x[0].min(2.0)));
    cons_competitors.push(ControlLaw::feedback(move |t, _x, out| out[0] = beta * (1.0 + 0.3 * t.sin())));
    cons_competitors.push(ControlLaw::constant(cp.k));
    let grid = TimeGrid::new(auto_horizon(beta, 1e-4), 200).unwrap();
    let (ok_c, line_c) = dominance_line(&cons, &consumption::optimal_law(&cp), &cons_competitors, &SimSpec::new(grid, 20_000, 32));

    let ok = ok_p && ok_c;
    report("AC3", "cost dominance", ok, format!("{line_p}; {line_c}"));
    assert!(ok);
}

#[test]
fn ac4_stability_decay() {
    let params = ProductionPlanningParams::default();
    let problem = production::production_planning_problem(&params).unwrap();
    let ric = production::riccati_oracle(&params).unwrap();
    let law = production::riccati_feedback_law(&params, &ric);
    let beta = params.beta;
    let mut gaps = Vec::new();
    let mut ok = true;
    let mut parts = Vec::new();
    for n in [(1e2f64).ln() / beta, (1e3f64).ln() / beta] {
        let grid = TimeGrid::with_step(n, 0.01).unwrap();
        let ens = simulate_forward(&problem, &law, &SimSpec::new(grid, 5_000, 41)).unwrap();
        let xi = vec![1.0; ens.n_paths()];
        let g = terminal_stability_gap(&problem, &ens, &RegressionBasis::polynomial(4), &xi).unwrap();
        ok &= g.passed();
        parts.push(format!("n={n:.3}: gap {:.4e} <= {:.4e}", g.gap, g.tolerance()));
        gaps.push((n, g.gap));
    }
    let slope = (gaps[1].1.ln() - gaps[0].1.ln()) / (gaps[1].0 - gaps[0].0);
    let slope_ok = (slope + beta).abs() <= 0.2 * beta;
    ok &= slope_ok;
    report("AC4", "stability decay", ok, format!("{}; log-gap slope {slope:.4} vs -beta {:.4} (within 20%)", parts.join(", "), -beta));
    assert!(ok);
}

fn logistic_fixture() -> (LogisticParams, TimeGrid) {
    let p = LogisticParams::default();
    let grid = TimeGrid::new(auto_horizon(p.beta(), 1e-4), 200).unwrap();
    (p, grid)
}

#[test]
fn ac5_logistic_properties() {
    let (params, grid) = logistic_fixture();
    let problem = logistic::logistic_problem(&params).unwrap();
    let out = logistic::logistic_picard_solve(&params, &grid, 10_000, &positive_basis(), 51, 20, 1e-4).unwrap();

    let fine = TimeGrid::with_step(grid.horizon(), 1e-3).unwrap();
    let pos = positivity_scan(&problem, &out.law, &SimSpec::new(fine, 100_000, 52)).unwrap();
    let sandwich = comparison_check(&problem, &out.law, &SimSpec::new(grid, 10_000, 51)).unwrap();
    let (m, p) = (params.truncation_levels[0], params.truncation_levels[1]);
    let cyl = smp_core::bsde::cylinder_consistency_check(&problem, &out.ensemble, &positive_basis(), m, p, params.n_cyl).unwrap();
    let ok = pos.passed() && sandwich.passed() && cyl.passed();
    report(
        "AC5",
        "logistic properties",
        ok,
        format!(
            "positivity: {} crossings over {} paths x {} steps; sandwich violation fraction {:.2e} (<= 1e-3); cylinder max diff {:.2e} (<= 1e-8) on {} paths",
            pos.statistic,
            pos.n,
            fine.steps(),
            sandwich.statistic,
            cyl.statistic,
            cyl.n
        ),
    );
    assert!(ok);
}

#[test]
fn ac6_logistic_closed_loop() {
    let (params, grid) = logistic_fixture();
    let problem = logistic::logistic_problem(&params).unwrap();
    let out = logistic::logistic_picard_solve(&params, &grid, 10_000, &positive_basis(), 61, 20, 1e-4).unwrap();
    let pm = check_pointwise_max(&problem, &out.ensemble, &out.bsde, 10_000, 62);
    let competitors: Vec<ControlLaw> = [0.2, 0.4, 0.6, 0.8, 1.0].iter().map(|u| ControlLaw::constant(*u)).collect();
    let cmp = compare_costs(&problem, &out.law, &competitors, &SimSpec::new(grid, 10_000, 61)).unwrap();
    let ok = out.converged && out.iterations <= 20 && pm.passed() && cmp.report.passed();
    report(
        "AC6",
        "logistic closed loop",
        ok,
        format!(
            "Picard converged {} in {} iterations (residuals {:?}); pointwise gap q99.9 {:.2e} (<= 1e-6); {} of 5 competitors dominated",
            out.converged,
            out.iterations,
            out.residuals,
            pm.statistic,
            cmp.pairs.iter().filter(|p| p.dominated()).count()
        ),
    );
    assert!(ok);
}

fn example_problems() -> Vec<DiscountedProblem> {
    vec![
        production::production_planning_problem(&ProductionPlanningParams::default()).unwrap(),
        consumption::consumption_problem(&ConsumptionParams::default()).unwrap(),
        logistic::logistic_problem(&LogisticParams::default()).unwrap(),
    ]
}

#[test]
fn ac7_analytic_identities() {
    let rng = CounterNormal::new(71);
    let mut worst_beta = 0.0f64;
    let mut worst_grad = 0.0f64;
    for (k, problem) in example_problems().iter().enumerate() {
        let (lo, hi) = (problem.domain.lower()[0], problem.domain.upper()[0]);
        let mut pts = Vec::with_capacity(10_000);
        for j in 0..10_000u64 {
            let s = k as u64 * 100;
            let x = 0.5 + 2.5 * rng.uniform(s, j);
            let u = lo + (hi - lo) * rng.uniform(s + 1, j);
            let y = rng.normal(s + 2, j, 0);
            let z = rng.normal(s + 3, j, 0);
            let plain = problem.hamiltonian_plain(&[x], &[u], &[y], &[z]);
            let gen = problem.hamiltonian(&[x], &[u], &[y], &[z]);
            let expect = problem.beta * x * y;
            // Relative to the operands of the subtraction; near y = 0 the
            // difference itself carries rounding of order eps |H|.
            let scale = expect.abs().max(plain.abs()).max(gen.abs());
            worst_beta = worst_beta.max(((plain - gen) - expect).abs() / scale);
            pts.push((vec![x], vec![u], vec![y], vec![z]));
        }
        worst_grad = worst_grad.max(hamiltonian_gradient_error(problem, &pts));
    }

    let params = ProductionPlanningParams::default();
    let problem = production::production_planning_problem(&params).unwrap();
    let grid = TimeGrid::new(3.0, 50).unwrap();
    let ens = simulate_forward(&problem, &ControlLaw::constant(1.0), &SimSpec::new(grid, 500, 72)).unwrap();
    let sol: BsdeSolution = solve_bsde_lsmc(&problem, &ens, &RegressionBasis::polynomial(3), Terminal::Zero).unwrap();
    let back = exp_transform(&exp_transform(&sol, params.beta, TransformDirection::Forward), params.beta, TransformDirection::Inverse);
    let rel = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs() / x.abs().max(1e-300)).fold(0.0, f64::max);
    let round = rel(sol.y_values(), back.y_values()).max(rel(sol.z_values(), back.z_values()));

    let ok = worst_beta <= 1e-12 && worst_grad <= 1e-6 && round <= 1e-12;
    report(
        "AC7",
        "analytic identities",
        ok,
        format!("H_plain - H vs beta<x,y> rel {worst_beta:.2e} (<= 1e-12); gradient vs central differences {worst_grad:.2e} (<= 1e-6); exp_transform round trip {round:.2e} (<= 1e-12)"),
    );
    assert!(ok);
}

#[test]
fn ac8_assumption_audits() {
    let pp = ProductionPlanningParams::default();
    let cp = ConsumptionParams::default();
    let lp = LogisticParams::default();
    let specs = [pp.audit_sample(20_000, 81), cp.audit_sample(20_000, 82), lp.audit_sample(20_000, 83)];
    let mut failed = Vec::new();
    for (problem, spec) in example_problems().iter().zip(&specs) {
        let mut reps = validate_assumptions(problem, spec);
        reps.push(check_beta_threshold(problem));
        failed.extend(reps.iter().filter(|r| !r.passed()).map(|r| format!("{}: {}", problem.name, r.check)));
    }
    let probs = example_problems();
    let t_prod = probs[0].beta_threshold();
    let t_cons = probs[1].beta_threshold();
    let exact_cons = 2.0 * cp.mu + 2.0 * cp.sigma * cp.sigma;
    let ok = failed.is_empty() && t_prod == 0.0 && t_cons == exact_cons;
    report(
        "AC8",
        "assumption audits",
        ok,
        format!("failed checks {failed:?}; thresholds {t_prod} (== 0) and {t_cons} (== {exact_cons})"),
    );
    assert!(ok);
}

fn run_cli(out: &std::path::Path, args: &[&str]) -> String {
    let status = std::process::Command::new(env!("CARGO_BIN_EXE_smp"))
        .args(args)
        .args(["--out", out.to_str().unwrap()])
        .env("RUST_LOG", "error")
        .stdout(std::process::Stdio::null())
        .status()
        .unwrap();
    assert!(status.code().is_some_and(|c| c != 1), "run errored");
    std::fs::read_to_string(out.join("results.json")).unwrap()
}

#[test]
fn ac9_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "experiment = \"logistic\"\nseed = 9\npaths = 3000\nsteps = 100\n\n[logistic]\nsigma = 0.35\n").unwrap();
    let args = ["run", "--config", cfg.to_str().unwrap()];
    let a = run_cli(&dir.path().join("a"), &args);
    let b = run_cli(&dir.path().join("b"), &args);
    // `metadata` is the last key; everything before it must match byte for byte.
    let cut = |s: &str| s[..s.find("\"metadata\"").expect("metadata block")].to_string();
    let (pa, pb) = (cut(&a), cut(&b));
    let checks = serde_json::from_str::<serde_json::Value>(&a).unwrap()["checks"].as_array().unwrap().len();
    let ok = pa == pb && checks == 9;
    report(
        "AC9",
        "determinism",
        ok,
        format!("two runs of the logistic experiment with all {checks} checks: {} bytes before metadata, identical {}", pa.len(), pa == pb),
    );
    assert!(ok);
}
