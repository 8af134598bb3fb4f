//! Property tests of the Hamiltonian, maximizer, control-law and cost
//! invariants over the built-in models.

use std::sync::Arc;

use approx::assert_relative_eq;
use proptest::prelude::*;

use smp_core::audit::hamiltonian_gradient_error;
use smp_core::basis::RegressionBasis;
use smp_core::bsde::{exp_transform, solve_bsde_lsmc, BsdeSolution, Terminal, TransformDirection};
use smp_core::grid::TimeGrid;
use smp_core::maximize::maximize_hamiltonian_in_u;
use smp_core::models::consumption::{consumption_problem, ConsumptionParams};
use smp_core::models::logistic::{logistic_control_law, logistic_problem, LogisticParams};
use smp_core::models::production::{production_planning_problem, ProductionPlanningParams};
use smp_core::noise::CounterNormal;
use smp_core::verify::{compare_costs, cost_functional_mc, pointwise_gaps, subsample_points};
use smp_core::{simulate_forward, CoefficientField, ControlLaw, Dims, DiscountedProblem, Execution, SimSpec};

fn problems() -> Vec<DiscountedProblem> {
    vec![
        production_planning_problem(&ProductionPlanningParams::default()).unwrap(),
        consumption_problem(&ConsumptionParams::default()).unwrap(),
        logistic_problem(&LogisticParams::default()).unwrap(),
    ]
}

fn in_box(p: &DiscountedProblem, s: f64) -> f64 {
    let (lo, hi) = (p.domain.lower()[0], p.domain.upper()[0]);
    lo + s * (hi - lo)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn discount_identity(k in 0usize..3, x in 0.05f64..5.0, s in 0.0f64..1.0, y in -3.0f64..3.0, z in -3.0f64..3.0) {
        let p = &problems()[k];
        let u = [in_box(p, s)];
        let plain = p.hamiltonian_plain(&[x], &u, &[y], &[z]);
        let gen = p.hamiltonian(&[x], &u, &[y], &[z]);
        let expect = p.beta * x * y;
        let scale = expect.abs().max(plain.abs()).max(gen.abs()).max(f64::MIN_POSITIVE);
        prop_assert!(((plain - gen) - expect).abs() / scale <= 1e-12);
    }

    #[test]
    fn gradient_matches_central_differences(k in 0usize..3, x in 0.2f64..5.0, s in 0.0f64..1.0, y in -3.0f64..3.0, z in -3.0f64..3.0) {
        let p = &problems()[k];
        let pts = vec![(vec![x], vec![in_box(p, s)], vec![y], vec![z])];
        prop_assert!(hamiltonian_gradient_error(p, &pts) <= 1e-6);
    }

    #[test]
    fn maximizer_dominates_grid(k in 0usize..3, x in 0.05f64..5.0, y in -3.0f64..3.0, z in -3.0f64..3.0) {
        let p = &problems()[k];
        let (u, cert) = maximize_hamiltonian_in_u(p, &[x], &[y], &[z]);
        prop_assert!(p.domain.contains(&u));
        prop_assert!(cert.dominates_grid());
        let best = p.hamiltonian(&[x], &u, &[y], &[z]);
        for j in 0..=100 {
            let v = [in_box(p, j as f64 / 100.0)];
            prop_assert!(best >= p.hamiltonian(&[x], &v, &[y], &[z]) - 1e-8);
        }
    }

    /// Production: stationary point `u1 + y/(2c)` is returned when inside
    /// the box and clipped to the nearest face otherwise.
    #[test]
    fn production_clipping(x in -5.0f64..5.0, y in -30.0f64..30.0) {
        let params = ProductionPlanningParams::default();
        let p = production_planning_problem(&params).unwrap();
        let (u, _) = maximize_hamiltonian_in_u(&p, &[x], &[y], &[0.0]);
        let raw = params.u1 + y / (2.0 * params.c);
        if raw > 0.0 && raw < params.u_max {
            prop_assert!((u[0] - raw).abs() <= 1e-10);
        } else {
            prop_assert!(u[0] == 0.0 || u[0] == params.u_max);
            prop_assert_eq!(u[0], raw.clamp(0.0, params.u_max));
        }
    }

    /// Nondecreasing in `y` with slope at most `gamma / (2h)`.
    #[test]
    fn logistic_law_monotone_lipschitz(gamma in 0.05f64..4.0, h in 0.1f64..3.0, y1 in -20.0f64..20.0, dy in 0.0f64..10.0) {
        let params = LogisticParams { gamma, h, ..LogisticParams::default() };
        let a = logistic_control_law(y1, &params).unwrap();
        let b = logistic_control_law(y1 + dy, &params).unwrap();
        prop_assert!(b >= a);
        prop_assert!(b - a <= gamma / (2.0 * h) * dy * (1.0 + 1e-12) + 1e-15);
        prop_assert!(a >= params.u1 && b <= params.u2);
    }

    #[test]
    fn grid_nodes(horizon in 0.01f64..100.0, steps in 1usize..2000) {
        let g = TimeGrid::new(horizon, steps).unwrap();
        let t = g.times();
        prop_assert_eq!(t.len(), steps + 1);
        prop_assert_eq!(t[steps], horizon);
        prop_assert!(t.windows(2).all(|w| w[1] > w[0]));
        prop_assert!(g.dt() > 0.0);
    }

    #[test]
    fn noise_is_a_pure_function_of_the_counter(seed in any::<u64>(), path in 0u64..1_000_000, step in 0u64..100_000, comp in 0u64..4) {
        let a = CounterNormal::new(seed);
        let b = CounterNormal::new(seed);
        prop_assert_eq!(a.normal(path, step, comp).to_bits(), b.normal(path, step, comp).to_bits());
        prop_assert!(a.normal(path, step, comp).is_finite());
        prop_assert_ne!(a.normal(path, step, comp), a.normal(path, step + 1, comp));
    }

    /// Whatever a feedback returns, the applied control lies in the box.
    #[test]
    fn emitted_controls_are_clipped(scale in 0.1f64..100.0, seed in 0u64..1000) {
        let p = consumption_problem(&ConsumptionParams::default()).unwrap();
        let law = ControlLaw::feedback(move |t, x, out| out[0] = scale * (x[0] - 1.0) * (7.0 * t).sin());
        let e = simulate_forward(&p, &law, &SimSpec::new(TimeGrid::new(1.0, 20).unwrap(), 40, seed)).unwrap();
        prop_assert!(e.controls().chunks(1).all(|u| p.domain.contains(u)));
    }

    #[test]
    fn exp_transform_round_trip(beta in 0.01f64..5.0, seed in 0u64..100) {
        let p = production_planning_problem(&ProductionPlanningParams::default()).unwrap();
        let e = simulate_forward(&p, &ControlLaw::constant(1.0), &SimSpec::new(TimeGrid::new(2.0, 20).unwrap(), 64, seed)).unwrap();
        let s = solve_bsde_lsmc(&p, &e, &RegressionBasis::polynomial(2), Terminal::Zero).unwrap();
        let back = exp_transform(&exp_transform(&s, beta, TransformDirection::Forward), beta, TransformDirection::Inverse);
        for (a, b) in s.y_values().iter().zip(back.y_values()).chain(s.z_values().iter().zip(back.z_values())) {
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1e-300));
        }
    }
}

/// Wraps a field and multiplies its reward by `lambda`.
#[derive(Debug)]
struct ScaledReward {
    inner: Arc<dyn CoefficientField>,
    lambda: f64,
}

impl CoefficientField for ScaledReward {
    fn dims(&self) -> Dims {
        self.inner.dims()
    }
    fn drift(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        self.inner.drift(x, u, out)
    }
    fn diffusion(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        self.inner.diffusion(x, u, out)
    }
    fn running_reward(&self, x: &[f64], u: &[f64]) -> f64 {
        self.lambda * self.inner.running_reward(x, u)
    }
    fn drift_jacobian(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        self.inner.drift_jacobian(x, u, out)
    }
    fn diffusion_jacobian(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        self.inner.diffusion_jacobian(x, u, out)
    }
    fn reward_gradient(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        self.inner.reward_gradient(x, u, out);
        out.iter_mut().for_each(|v| *v *= self.lambda);
    }
    fn log_split(&self, u: &[f64]) -> Option<(f64, f64)> {
        self.inner.log_split(u)
    }
}

fn scaled(p: &DiscountedProblem, lambda: f64) -> DiscountedProblem {
    DiscountedProblem {
        field: Arc::new(ScaledReward { inner: p.field.clone(), lambda }),
        ..p.clone()
    }
}

fn cost_spec() -> SimSpec {
    SimSpec::new(TimeGrid::new(4.0, 80).unwrap(), 2_000, 17)
}

#[test]
fn identical_competitor_has_zero_difference() {
    for p in problems() {
        let law = ControlLaw::constant(in_box(&p, 0.4));
        let cmp = compare_costs(&p, &law, &[law.clone()], &cost_spec()).unwrap();
        assert_eq!(cmp.pairs[0].diff, 0.0, "{}", p.name);
        assert_eq!(cmp.pairs[0].se_diff, 0.0, "{}", p.name);
        assert!(cmp.report.passed());
    }
}

#[test]
fn reward_scaling_scales_costs() {
    for p in problems() {
        let hat = ControlLaw::constant(in_box(&p, 0.3));
        let others = [ControlLaw::constant(in_box(&p, 0.1)), ControlLaw::constant(in_box(&p, 0.8))];
        let base = compare_costs(&p, &hat, &others, &cost_spec()).unwrap();
        for lambda in [0.25, 3.0] {
            let q = scaled(&p, lambda);
            let c = cost_functional_mc(&q, &hat, &cost_spec()).unwrap();
            assert_relative_eq!(c.value, lambda * base.candidate.value, max_relative = 1e-12);
            assert_relative_eq!(c.se, lambda * base.candidate.se, max_relative = 1e-12);
            let cmp = compare_costs(&q, &hat, &others, &cost_spec()).unwrap();
            for (a, b) in cmp.pairs.iter().zip(&base.pairs) {
                assert_eq!(a.diff.signum(), b.diff.signum(), "{}", p.name);
                assert_relative_eq!(a.diff, lambda * b.diff, max_relative = 1e-9);
            }
        }
    }
}

/// The two Hamiltonians differ by a control-independent term, so the
/// pointwise gaps coincide.
#[test]
fn pointwise_gap_ignores_discount_term() {
    for p in problems() {
        let e = simulate_forward(&p, &ControlLaw::constant(in_box(&p, 0.5)), &SimSpec::new(TimeGrid::new(2.0, 40).unwrap(), 500, 3)).unwrap();
        let basis = RegressionBasis::polynomial(3);
        let s: BsdeSolution = solve_bsde_lsmc(&p, &e, &basis, Terminal::Zero).unwrap();
        let pts = subsample_points(e.n_paths(), 40, 2_000, 4);
        let a = pointwise_gaps(&p, &e, &s, &pts, false);
        let b = pointwise_gaps(&p, &e, &s, &pts, true);
        for (&(pi, i), (ga, gb)) in pts.iter().zip(a.iter().zip(&b)) {
            let (x, u, y, z) = (e.state(pi, i), e.control(pi, i), s.y(pi, i), s.z(pi, i));
            // Only the normalization 1 + |H(û)| differs between the two.
            let raw_a = ga * (1.0 + p.hamiltonian(x, u, y, z).abs());
            let raw_b = gb * (1.0 + p.hamiltonian_plain(x, u, y, z).abs());
            assert!((raw_a - raw_b).abs() <= 1e-9 * (1.0 + raw_a.abs()), "{} {raw_a} {raw_b}", p.name);
        }
    }
}

#[test]
fn sequential_and_parallel_agree_bitwise() {
    let p = logistic_problem(&LogisticParams::default()).unwrap();
    let law = ControlLaw::feedback(|t, x, out| out[0] = 0.5 + 0.4 * (x[0] - t).tanh());
    let spec = SimSpec::new(TimeGrid::new(2.0, 50).unwrap(), 3_000, 8);
    let a = simulate_forward(&p, &law, &spec.with_exec(Execution::Sequential)).unwrap();
    let b = simulate_forward(&p, &law, &spec.with_exec(Execution::Parallel)).unwrap();
    assert_eq!(a.states(), b.states());
    assert_eq!(a.controls(), b.controls());
    let basis = RegressionBasis::polynomial(3).with_reciprocal(true);
    let sa = solve_bsde_lsmc(&p, &a, &basis, Terminal::Zero).unwrap();
    let sb = solve_bsde_lsmc(&p, &b, &basis, Terminal::Zero).unwrap();
    assert_eq!(sa.y_values(), sb.y_values());
    assert_eq!(sa.z_values(), sb.z_values());
}
