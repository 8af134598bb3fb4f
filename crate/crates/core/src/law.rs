use std::fmt;
use std::sync::Arc;

use crate::problem::{buf, DiscountedProblem};

/// Adjoint values as a function of `(step, x)`, e.g. a fitted regression.
pub trait AdjointSource: Send + Sync + fmt::Debug {
    fn adjoint(&self, step: usize, x: &[f64], out: &mut [f64]);
}

pub type FeedbackFn = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;
pub type AdjointFeedbackFn = Arc<dyn Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync>;

/// How controls are chosen along a path. Every emitted value is clipped to
/// the problem's control box.
#[derive(Clone)]
pub enum ControlLaw {
    Constant(Vec<f64>),
    /// Table `[paths x steps x k]`.
    OpenLoop { steps: usize, table: Arc<Vec<f64>> },
    /// `(t, x) -> u`.
    Feedback(FeedbackFn),
    /// `(t, x, y) -> u` with `y` supplied by `source`.
    AdjointFeedback {
        map: AdjointFeedbackFn,
        source: Arc<dyn AdjointSource>,
    },
}

impl fmt::Debug for ControlLaw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ControlLaw::Constant(u) => write!(f, "Constant({u:?})"),
            ControlLaw::OpenLoop { steps, table } => write!(f, "OpenLoop(steps={steps}, len={})", table.len()),
            ControlLaw::Feedback(_) => f.write_str("Feedback"),
            ControlLaw::AdjointFeedback { source, .. } => write!(f, "AdjointFeedback({source:?})"),
        }
    }
}

impl ControlLaw {
    pub fn constant(u: f64) -> Self {
        ControlLaw::Constant(vec![u])
    }

    pub fn feedback<F>(f: F) -> Self
    where
        F: Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
    {
        ControlLaw::Feedback(Arc::new(f))
    }

    pub fn adjoint_feedback<F>(source: Arc<dyn AdjointSource>, map: F) -> Self
    where
        F: Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
    {
        ControlLaw::AdjointFeedback {
            map: Arc::new(map),
            source,
        }
    }

    /// Short description for reports.
    pub fn label(&self) -> String {
        match self {
            ControlLaw::Constant(u) if u.len() == 1 => format!("u={:.6}", u[0]),
            ControlLaw::Constant(u) => format!("u={u:?}"),
            ControlLaw::OpenLoop { .. } => "open-loop table".into(),
            ControlLaw::Feedback(_) => "feedback".into(),
            ControlLaw::AdjointFeedback { .. } => "adjoint feedback".into(),
        }
    }

    /// Control at `(path, step)` for state `x`, clipped to the box.
    pub fn control(&self, problem: &DiscountedProblem, path: usize, step: usize, t: f64, x: &[f64], out: &mut [f64]) {
        let k = out.len();
        match self {
            ControlLaw::Constant(u) => out.copy_from_slice(u),
            ControlLaw::OpenLoop { steps, table } => {
                let s = step.min(steps - 1);
                let o = (path * steps + s) * k;
                out.copy_from_slice(&table[o..o + k]);
            }
            ControlLaw::Feedback(f) => f(t, x, out),
            ControlLaw::AdjointFeedback { map, source } => {
                let mut y = buf(x.len());
                source.adjoint(step, x, &mut y);
                map(t, x, &y, out);
            }
        }
        problem.domain.clip(out);
    }
}

/// Closure-backed adjoint source.
pub struct FnAdjoint<F>(pub F);

impl<F> fmt::Debug for FnAdjoint<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("FnAdjoint")
    }
}

impl<F> AdjointSource for FnAdjoint<F>
where
    F: Fn(usize, &[f64], &mut [f64]) + Send + Sync,
{
    fn adjoint(&self, step: usize, x: &[f64], out: &mut [f64]) {
        (self.0)(step, x, out)
    }
}

/// Convex combination of adjoint sources, `sum_j w_j y_j(x)`.
#[derive(Debug, Clone)]
pub struct BlendedAdjoint {
    pub parts: Vec<(f64, Arc<dyn AdjointSource>)>,
}

impl AdjointSource for BlendedAdjoint {
    fn adjoint(&self, step: usize, x: &[f64], out: &mut [f64]) {
        let mut tmp = buf(out.len());
        out.iter_mut().for_each(|v| *v = 0.0);
        for (w, s) in &self.parts {
            s.adjoint(step, x, &mut tmp);
            for (o, t) in out.iter_mut().zip(tmp.iter()) {
                *o += w * t;
            }
        }
    }
}
