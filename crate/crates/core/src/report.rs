use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Pass,
    Fail,
    Inconclusive,
}

impl Status {
    pub fn from_bool(ok: bool) -> Self {
        if ok {
            Status::Pass
        } else {
            Status::Fail
        }
    }

    /// Worst of two statuses: fail dominates inconclusive dominates pass.
    pub fn and(self, other: Status) -> Status {
        use Status::*;
        match (self, other) {
            (Fail, _) | (_, Fail) => Fail,
            (Inconclusive, _) | (_, Inconclusive) => Inconclusive,
            _ => Pass,
        }
    }
}

impl std::fmt::Display for Status {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Status::Pass => "pass",
            Status::Fail => "fail",
            Status::Inconclusive => "inconclusive",
        };
        f.write_str(s)
    }
}

/// Outcome of one numerical check. `statistic` is compared against
/// `tolerance`; `n` and `se` describe the sample behind the statistic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub check: String,
    pub status: Status,
    pub statistic: f64,
    pub tolerance: f64,
    pub n: usize,
    pub se: f64,
    pub notes: String,
}

impl VerificationReport {
    pub fn new(check: impl Into<String>, status: Status) -> Self {
        Self {
            check: check.into(),
            status,
            statistic: 0.0,
            tolerance: 0.0,
            n: 0,
            se: 0.0,
            notes: String::new(),
        }
    }

    pub fn with_stat(mut self, statistic: f64, tolerance: f64) -> Self {
        self.statistic = statistic;
        self.tolerance = tolerance;
        self
    }

    pub fn with_sample(mut self, n: usize, se: f64) -> Self {
        self.n = n;
        self.se = se;
        self
    }

    pub fn with_notes(mut self, notes: impl Into<String>) -> Self {
        self.notes = notes.into();
        self
    }

    pub fn passed(&self) -> bool {
        self.status == Status::Pass
    }

    pub fn table_row(&self) -> String {
        format!(
            "{:<34} {:<12} stat={:<12.4e} tol={:<10.3e} n={:<8} se={:.3e}  {}",
            self.check, self.status, self.statistic, self.tolerance, self.n, self.se, self.notes
        )
    }
}

/// Monte Carlo estimate of a discounted functional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub label: String,
    pub value: f64,
    pub se: f64,
    pub n_paths: usize,
    pub horizon: f64,
    /// `e^{-beta T} * sup|f| / beta` when a bound on the running reward is known.
    pub tail_bound: Option<f64>,
}

/// Sample mean and standard error of the mean.
pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Empirical quantile (nearest-rank) of unsorted data.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[rank - 1]
}
