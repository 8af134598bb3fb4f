//! Named experiments and the registry the runner resolves them from.

use std::collections::BTreeMap;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use toml::Table;

use smp_core::audit::SampleSpec;
use smp_core::basis::RegressionBasis;
use smp_core::bsde::{solve_bsde_lsmc, BsdeSolution, Terminal};
use smp_core::forward::{lyapunov_generator_check, simulate_forward};
use smp_core::models::consumption::{self, ConsumptionParams};
use smp_core::models::logistic::{self, LogisticParams};
use smp_core::models::production::{self, ProductionPlanningParams};
use smp_core::{ControlLaw, DiscountedProblem, PathEnsemble, SimSpec, StateRegion, Status, VerificationReport};

use crate::config::Check;

/// Picard settings used by the logistic experiment.
pub const PICARD_MAX_ITERS: usize = 20;
pub const PICARD_TOL: f64 = 1e-4;

/// A solved candidate: the law, its paths and the adjoint used by the
/// optimality checks.
pub struct Candidate {
    pub law: ControlLaw,
    pub ensemble: PathEnsemble,
    /// Adjoint entering the pointwise and transversality checks.
    pub adjoint: BsdeSolution,
    /// Regression solution, when the adjoint above is a closed form.
    pub regression: Option<BsdeSolution>,
    /// Solver diagnostics (oracle agreement, Picard history). They are
    /// reported but do not decide the exit code.
    pub diagnostics: Vec<VerificationReport>,
}

impl Candidate {
    /// The regression-based solution: the dedicated one if present,
    /// otherwise the adjoint itself.
    pub fn regression(&self) -> &BsdeSolution {
        self.regression.as_ref().unwrap_or(&self.adjoint)
    }
}

/// Cylinder consistency settings `(m, p, n_cyl)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Truncation {
    pub m: f64,
    pub p: f64,
    pub n_cyl: f64,
}

/// Run-wide settings handed to experiment hooks.
#[derive(Debug, Clone)]
pub struct RunContext {
    pub spec: SimSpec,
    pub basis: RegressionBasis,
    pub seed: u64,
}

/// A configured experiment, ready to run.
pub trait Instance {
    fn problem(&self) -> &DiscountedProblem;

    /// Resolved parameters, echoed into `results.json`.
    fn params_json(&self) -> serde_json::Value;

    /// Sampling box for the assumption and concavity audits.
    fn audit_sample(&self, n_points: usize, seed: u64) -> SampleSpec;

    /// Regression basis of the given degree; positive-state problems get
    /// the reciprocal feature as well.
    fn basis(&self, degree: usize) -> RegressionBasis {
        RegressionBasis::polynomial(degree).with_reciprocal(self.problem().region == StateRegion::Positive)
    }

    fn solve(&self, ctx: &RunContext) -> Result<Candidate>;

    /// Laws the candidate is compared against.
    fn competitors(&self) -> Vec<ControlLaw>;

    fn truncation(&self) -> Option<Truncation> {
        None
    }

    /// Whether `check` means anything for this experiment; inapplicable
    /// checks are skipped unless requested explicitly.
    fn applies(&self, check: Check) -> bool {
        match check {
            Check::Positivity => self.problem().region == StateRegion::Positive,
            _ => true,
        }
    }

    /// Model-specific reports attached to `check`; they do not depend on
    /// the solved candidate.
    fn extra_reports(&self, _check: Check, _ctx: &RunContext) -> Result<Vec<VerificationReport>> {
        Ok(Vec::new())
    }
}

/// A registered experiment.
pub trait Experiment: Send + Sync {
    fn id(&self) -> &str;
    fn description(&self) -> &str;
    /// Accepted parameter names.
    fn parameter_keys(&self) -> Vec<String>;
    fn instantiate(&self, params: &Table) -> Result<Box<dyn Instance>>;
}

/// Experiments by ID.
#[derive(Default)]
pub struct Registry {
    entries: BTreeMap<String, Arc<dyn Experiment>>,
}

impl Registry {
    pub fn empty() -> Self {
        Self::default()
    }

    /// The three built-in experiments.
    pub fn builtin() -> Self {
        let mut r = Self::empty();
        r.register(Arc::new(ProductionExperiment)).expect("distinct IDs");
        r.register(Arc::new(ConsumptionExperiment)).expect("distinct IDs");
        r.register(Arc::new(LogisticExperiment)).expect("distinct IDs");
        r
    }

    pub fn register(&mut self, experiment: Arc<dyn Experiment>) -> Result<()> {
        let id = experiment.id().to_string();
        if id.is_empty() || id.contains(['.', '=', ' ']) {
            bail!("invalid experiment ID `{id}`");
        }
        if self.entries.contains_key(&id) {
            bail!("experiment `{id}` is already registered");
        }
        self.entries.insert(id, experiment);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&Arc<dyn Experiment>> {
        self.entries.get(id)
    }

    pub fn ids(&self) -> Vec<&str> {
        self.entries.keys().map(String::as_str).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Accepted parameter names per experiment, as needed by
    /// [`crate::config::RawConfig::resolve`].
    pub fn sections(&self) -> BTreeMap<String, Vec<String>> {
        self.entries.iter().map(|(k, e)| (k.clone(), e.parameter_keys())).collect()
    }
}

/// One line per experiment: ID and description.
pub fn list_experiments(registry: &Registry) -> String {
    let width = registry.ids().iter().map(|s| s.len()).max().unwrap_or(0);
    registry
        .entries
        .values()
        .map(|e| format!("{:width$}  {}\n", e.id(), e.description()))
        .collect()
}

fn keys_of<T: Serialize + Default>() -> Vec<String> {
    match serde_json::to_value(T::default()) {
        Ok(serde_json::Value::Object(m)) => m.keys().cloned().collect(),
        _ => Vec::new(),
    }
}

fn parse_params<T: DeserializeOwned>(id: &str, params: &Table) -> Result<T> {
    toml::Value::Table(params.clone())
        .try_into()
        .map_err(|e: toml::de::Error| anyhow::anyhow!("[{id}] {}", e.message()))
}

fn to_json<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).unwrap_or(serde_json::Value::Null)
}

/// `|Y_0 - target| <= 5% |target| + 3 SE` for the regression solution.
fn adjoint_oracle_report(solution: &BsdeSolution, target: f64, what: &str) -> VerificationReport {
    let y0 = solution.y0()[0];
    let se = solution.y0_se();
    let err = (y0 - target).abs();
    let tol = 0.05 * target.abs() + 3.0 * se;
    VerificationReport::new("adjoint_oracle", Status::from_bool(err <= tol))
        .with_stat(err, tol)
        .with_sample(solution.n_paths(), se)
        .with_notes(format!("regression Y0 {y0:.6} vs {what} {target:.6}"))
}

/// Linear-quadratic production planning with a Riccati feedback.
pub struct ProductionExperiment;

struct ProductionInstance {
    params: ProductionPlanningParams,
    problem: DiscountedProblem,
}

impl Experiment for ProductionExperiment {
    fn id(&self) -> &str {
        production::ID
    }
    fn description(&self) -> &str {
        "linear-quadratic production planning; Riccati feedback vs regression adjoint"
    }
    fn parameter_keys(&self) -> Vec<String> {
        keys_of::<ProductionPlanningParams>()
    }
    fn instantiate(&self, params: &Table) -> Result<Box<dyn Instance>> {
        let params: ProductionPlanningParams = parse_params(self.id(), params)?;
        let problem = production::production_planning_problem(&params)?;
        Ok(Box::new(ProductionInstance { params, problem }))
    }
}

impl Instance for ProductionInstance {
    fn problem(&self) -> &DiscountedProblem {
        &self.problem
    }
    fn params_json(&self) -> serde_json::Value {
        to_json(&self.params)
    }
    fn audit_sample(&self, n: usize, seed: u64) -> SampleSpec {
        self.params.audit_sample(n, seed)
    }
    fn solve(&self, ctx: &RunContext) -> Result<Candidate> {
        let p = &self.params;
        let ric = production::riccati_oracle(p).context("Riccati oracle")?;
        let law = production::riccati_feedback_law(p, &ric);
        let ensemble = simulate_forward(&self.problem, &law, &ctx.spec)?;
        let adjoint = BsdeSolution::from_fields(&ensemble, ctx.basis.clone(), ctx.spec.exec, production::riccati_fields(p, &ric))?;
        let regression = solve_bsde_lsmc(&self.problem, &ensemble, &ctx.basis, Terminal::Zero)?;
        let agreement = VerificationReport::new("riccati_ode_agreement", Status::from_bool(ric.ode_agreement() <= production::ODE_AGREEMENT))
            .with_stat(ric.ode_agreement(), production::ODE_AGREEMENT)
            .with_notes(format!("phi {:.10}, psi {:.10}", ric.phi, ric.psi));
        let oracle = adjoint_oracle_report(&regression, ric.adjoint(p.x0), "phi x0 + psi");
        Ok(Candidate {
            law,
            ensemble,
            adjoint,
            regression: Some(regression),
            diagnostics: vec![agreement, oracle],
        })
    }
    fn competitors(&self) -> Vec<ControlLaw> {
        let p = &self.params;
        let Ok(ric) = production::riccati_oracle(p) else {
            return vec![ControlLaw::constant(p.u1)];
        };
        let gain = |s: f64, shift: f64| {
            let (phi, psi, u1, c) = (ric.phi * s, ric.psi + shift, p.u1, p.c);
            ControlLaw::feedback(move |_t, x, out| out[0] = u1 + (phi * x[0] + psi) / (2.0 * c))
        };
        let u1 = p.u1;
        vec![
            ControlLaw::constant(0.5 * u1),
            ControlLaw::constant(u1),
            ControlLaw::constant(1.5 * u1),
            ControlLaw::constant(2.5 * u1),
            gain(0.5, 0.0),
            gain(1.5, 0.0),
            gain(1.0, 0.5),
            ControlLaw::feedback(move |t, _x, out| out[0] = u1 * (1.0 + (-t).exp())),
        ]
    }
}

/// Log-utility consumption with geometric wealth.
pub struct ConsumptionExperiment;

struct ConsumptionInstance {
    params: ConsumptionParams,
    problem: DiscountedProblem,
}

impl Experiment for ConsumptionExperiment {
    fn id(&self) -> &str {
        consumption::ID
    }
    fn description(&self) -> &str {
        "log-utility consumption; constant rate beta and adjoint 1/(beta x)"
    }
    fn parameter_keys(&self) -> Vec<String> {
        keys_of::<ConsumptionParams>()
    }
    fn instantiate(&self, params: &Table) -> Result<Box<dyn Instance>> {
        let params: ConsumptionParams = parse_params(self.id(), params)?;
        let problem = consumption::consumption_problem(&params)?;
        Ok(Box::new(ConsumptionInstance { params, problem }))
    }
}

impl Instance for ConsumptionInstance {
    fn problem(&self) -> &DiscountedProblem {
        &self.problem
    }
    fn params_json(&self) -> serde_json::Value {
        let mut v = to_json(&self.params);
        v["beta"] = self.params.beta().into();
        v
    }
    fn audit_sample(&self, n: usize, seed: u64) -> SampleSpec {
        self.params.audit_sample(n, seed)
    }
    fn solve(&self, ctx: &RunContext) -> Result<Candidate> {
        let p = &self.params;
        let law = consumption::optimal_law(p);
        let ensemble = simulate_forward(&self.problem, &law, &ctx.spec)?;
        let adjoint = BsdeSolution::from_fields(&ensemble, ctx.basis.clone(), ctx.spec.exec, consumption::exact_fields(p))?;
        let regression = solve_bsde_lsmc(&self.problem, &ensemble, &ctx.basis, Terminal::Zero)?;
        let target = consumption::truncated_adjoint(p, ctx.spec.grid.horizon(), 0.0, p.x0);
        let oracle = adjoint_oracle_report(&regression, target, "(1 - e^{-beta T})/(beta x0)");
        Ok(Candidate {
            law,
            ensemble,
            adjoint,
            regression: Some(regression),
            diagnostics: vec![oracle],
        })
    }
    fn competitors(&self) -> Vec<ControlLaw> {
        let beta = self.params.beta();
        let mut laws: Vec<ControlLaw> = [0.5, 0.8, 1.2, 1.5, 2.0].iter().map(|s| ControlLaw::constant(s * beta)).collect();
        laws.push(ControlLaw::feedback(move |_t, x, out| out[0] = beta * x[0].min(2.0)));
        laws.push(ControlLaw::feedback(move |t, _x, out| out[0] = beta * (1.0 + 0.3 * t.sin())));
        laws.push(ControlLaw::constant(self.params.k));
        laws
    }
    fn extra_reports(&self, check: Check, ctx: &RunContext) -> Result<Vec<VerificationReport>> {
        if check != Check::Assumptions {
            return Ok(Vec::new());
        }
        let n = ctx.spec.n_paths.min(20_000);
        Ok(vec![consumption::consumption_integrability_check(&self.params, &ctx.spec.grid, n, ctx.seed)?])
    }
}

/// Controlled logistic growth solved by Picard iteration.
pub struct LogisticExperiment;

struct LogisticInstance {
    params: LogisticParams,
    problem: DiscountedProblem,
}

impl Experiment for LogisticExperiment {
    fn id(&self) -> &str {
        logistic::ID
    }
    fn description(&self) -> &str {
        "controlled logistic growth; Picard fixed point of the closed-loop system"
    }
    fn parameter_keys(&self) -> Vec<String> {
        keys_of::<LogisticParams>()
    }
    fn instantiate(&self, params: &Table) -> Result<Box<dyn Instance>> {
        let params: LogisticParams = parse_params(self.id(), params)?;
        if params.gamma < 0.0 {
            bail!("[{}] gamma = {} < 0: the closed-loop law is only defined for gamma >= 0", self.id(), params.gamma);
        }
        let problem = logistic::logistic_problem(&params)?;
        Ok(Box::new(LogisticInstance { params, problem }))
    }
}

impl Instance for LogisticInstance {
    fn problem(&self) -> &DiscountedProblem {
        &self.problem
    }
    fn params_json(&self) -> serde_json::Value {
        let mut v = to_json(&self.params);
        v["beta"] = self.params.beta().into();
        v
    }
    fn audit_sample(&self, n: usize, seed: u64) -> SampleSpec {
        self.params.audit_sample(n, seed)
    }
    fn solve(&self, ctx: &RunContext) -> Result<Candidate> {
        let out = logistic::logistic_picard_solve(&self.params, &ctx.spec.grid, ctx.spec.n_paths, &ctx.basis, ctx.seed, PICARD_MAX_ITERS, PICARD_TOL)?;
        let residual = out.final_residual().unwrap_or(f64::NAN);
        let picard = VerificationReport::new("picard", Status::from_bool(out.converged))
            .with_stat(residual, PICARD_TOL)
            .with_sample(ctx.spec.n_paths, 0.0)
            .with_notes(format!("{} iterations, damped {}, residuals {:?}", out.iterations, out.damped, out.residuals));
        Ok(Candidate {
            law: out.law,
            ensemble: out.ensemble,
            adjoint: out.bsde,
            regression: None,
            diagnostics: vec![picard],
        })
    }
    fn competitors(&self) -> Vec<ControlLaw> {
        let (u1, u2) = (self.params.u1, self.params.u2);
        (0..5).map(|j| ControlLaw::constant(u1 + (u2 - u1) * j as f64 / 4.0)).collect()
    }
    fn truncation(&self) -> Option<Truncation> {
        let levels = &self.params.truncation_levels;
        let (m, p) = (*levels.first()?, *levels.last()?);
        Some(Truncation { m, p, n_cyl: self.params.n_cyl })
    }
    fn extra_reports(&self, check: Check, ctx: &RunContext) -> Result<Vec<VerificationReport>> {
        match check {
            Check::Assumptions => {
                let hi = 10.0 / self.params.b;
                let xs: Vec<f64> = (0..400).map(|i| 0.01 * (hi / 0.01).powf(i as f64 / 399.0)).collect();
                let (u1, u2) = (self.params.u1, self.params.u2);
                let controls = vec![vec![u1], vec![0.5 * (u1 + u2)], vec![u2]];
                Ok(vec![lyapunov_generator_check(&self.problem, &xs, &controls, logistic::lyapunov_constants(&self.params))?])
            }
            Check::Consistency => {
                let grid = &ctx.spec.grid;
                let delta = (grid.horizon() / 10.0).max(grid.dt());
                let n = ctx.spec.n_paths.min(2_000);
                Ok(vec![logistic::logistic_local_uniqueness_probe(&self.params, grid, n, &ctx.basis, delta, ctx.seed)?])
            }
            _ => Ok(Vec::new()),
        }
    }
}

/// A user-supplied problem and candidate law, solved by plain regression.
pub struct CustomExperiment {
    id: String,
    description: String,
    problem: DiscountedProblem,
    law: ControlLaw,
    competitors: Vec<ControlLaw>,
    audit: SampleSpec,
}

impl CustomExperiment {
    /// `audit` fixes the state box for the sampling audits; its point
    /// count and seed are replaced at run time.
    pub fn new(id: impl Into<String>, description: impl Into<String>, problem: DiscountedProblem, law: ControlLaw, audit: SampleSpec) -> Self {
        Self {
            id: id.into(),
            description: description.into(),
            problem,
            law,
            competitors: Vec::new(),
            audit,
        }
    }

    pub fn with_competitors(mut self, competitors: Vec<ControlLaw>) -> Self {
        self.competitors = competitors;
        self
    }
}

struct CustomInstance {
    problem: DiscountedProblem,
    law: ControlLaw,
    competitors: Vec<ControlLaw>,
    audit: SampleSpec,
}

impl Experiment for CustomExperiment {
    fn id(&self) -> &str {
        &self.id
    }
    fn description(&self) -> &str {
        &self.description
    }
    fn parameter_keys(&self) -> Vec<String> {
        Vec::new()
    }
    fn instantiate(&self, params: &Table) -> Result<Box<dyn Instance>> {
        if let Some(k) = params.keys().next() {
            bail!("experiment `{}` takes no parameters (got `{k}`)", self.id);
        }
        Ok(Box::new(CustomInstance {
            problem: self.problem.clone(),
            law: self.law.clone(),
            competitors: self.competitors.clone(),
            audit: self.audit.clone(),
        }))
    }
}

impl Instance for CustomInstance {
    fn problem(&self) -> &DiscountedProblem {
        &self.problem
    }
    fn params_json(&self) -> serde_json::Value {
        serde_json::json!({})
    }
    fn audit_sample(&self, n: usize, seed: u64) -> SampleSpec {
        SampleSpec { n_points: n, seed, ..self.audit.clone() }
    }
    fn solve(&self, ctx: &RunContext) -> Result<Candidate> {
        let ensemble = simulate_forward(&self.problem, &self.law, &ctx.spec)?;
        let adjoint = solve_bsde_lsmc(&self.problem, &ensemble, &ctx.basis, Terminal::Zero)?;
        Ok(Candidate {
            law: self.law.clone(),
            ensemble,
            adjoint,
            regression: None,
            diagnostics: Vec::new(),
        })
    }
    fn competitors(&self) -> Vec<ControlLaw> {
        self.competitors.clone()
    }
    fn applies(&self, check: Check) -> bool {
        match check {
            Check::CostCompare | Check::Tvc => !self.competitors.is_empty(),
            Check::Positivity => self.problem.region == StateRegion::Positive,
            _ => true,
        }
    }
}

