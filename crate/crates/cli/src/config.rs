//! Experiment configuration.
//!
//! A configuration is a TOML document (JSON is accepted too) with a few
//! top-level run settings and one table per experiment holding its
//! parameters:
//!
//! ```toml
//! experiment = "consumption"
//! seed = 7
//! paths = 20000
//! checks = ["assumptions", "pointwise_max"]
//!
//! [consumption]
//! beta = 1.5
//! ```
//!
//! Every key can be overridden with `key=value` assignments using dotted
//! paths (`consumption.beta=0.01`); values are read as TOML literals and
//! fall back to plain strings.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

pub const DEFAULT_SEED: u64 = 1;
pub const DEFAULT_PATHS: usize = 10_000;
pub const DEFAULT_STEPS: usize = 400;
pub const DEFAULT_BASIS_DEGREE: usize = 4;
/// Paths written to the CSV exports.
pub const DEFAULT_WRITE_PATHS: usize = 100;
/// Hard cap on CSV rows, whatever `write_paths` says.
pub const MAX_CSV_ROWS: usize = 2_000_000;
/// Tail weight of the automatic horizon `T = ln(1/tail) / beta`.
pub const AUTO_TAIL: f64 = 1e-4;

const TOP_LEVEL_KEYS: [&str; 10] = [
    "experiment",
    "seed",
    "paths",
    "steps",
    "horizon",
    "basis_degree",
    "checks",
    "out",
    "write_paths",
    "binary",
];

/// Verification suites selectable from the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Check {
    Assumptions,
    PointwiseMax,
    Concavity,
    Tvc,
    CostCompare,
    Stability,
    Consistency,
    Sandwich,
    Positivity,
}

impl Check {
    pub const ALL: [Check; 9] = [
        Check::Assumptions,
        Check::PointwiseMax,
        Check::Concavity,
        Check::Tvc,
        Check::CostCompare,
        Check::Stability,
        Check::Consistency,
        Check::Sandwich,
        Check::Positivity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Check::Assumptions => "assumptions",
            Check::PointwiseMax => "pointwise_max",
            Check::Concavity => "concavity",
            Check::Tvc => "tvc",
            Check::CostCompare => "cost_compare",
            Check::Stability => "stability",
            Check::Consistency => "consistency",
            Check::Sandwich => "sandwich",
            Check::Positivity => "positivity",
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Check {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Check::ALL.iter().copied().find(|c| c.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Check::ALL.iter().map(|c| c.name()).collect();
            anyhow!("unknown check `{s}` (expected one of {})", names.join(", "))
        })
    }
}

/// Fully resolved run settings.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: String,
    pub seed: u64,
    pub paths: usize,
    pub steps: usize,
    /// Truncation horizon; `None` selects `ln(1e4) / beta`.
    pub horizon: Option<f64>,
    pub basis_degree: usize,
    /// Requested checks; empty selects every check that applies.
    pub checks: Vec<Check>,
    pub out: PathBuf,
    /// Paths written to `paths.csv` and `bsde.csv`; 0 disables both.
    pub write_paths: usize,
    /// Also write the `SMP1` binary dump.
    pub binary: bool,
    /// Parameter table of the selected experiment.
    pub params: Table,
}

impl ExperimentConfig {
    /// Defaults for `experiment` with an empty parameter table.
    pub fn new(experiment: impl Into<String>) -> Self {
        Self {
            experiment: experiment.into(),
            seed: DEFAULT_SEED,
            paths: DEFAULT_PATHS,
            steps: DEFAULT_STEPS,
            horizon: None,
            basis_degree: DEFAULT_BASIS_DEGREE,
            checks: Vec::new(),
            out: PathBuf::from("results"),
            write_paths: DEFAULT_WRITE_PATHS,
            binary: false,
            params: Table::new(),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TopLevel {
    experiment: Option<String>,
    seed: Option<u64>,
    paths: Option<usize>,
    steps: Option<usize>,
    horizon: Option<f64>,
    basis_degree: Option<usize>,
    checks: Option<Vec<String>>,
    out: Option<PathBuf>,
    write_paths: Option<usize>,
    binary: Option<bool>,
}

/// Where a key came from, for diagnostics.
#[derive(Debug, Clone, PartialEq)]
enum Origin {
    File { name: String, line: usize },
    Override,
}

/// Unresolved configuration: the merged key tree plus enough source
/// information to point at offending lines.
#[derive(Debug, Clone, Default)]
pub struct RawConfig {
    root: Table,
    source: Option<(String, String)>,
    overridden: Vec<String>,
}

impl RawConfig {
    pub fn new() -> Self {
        Self::default()
    }

    /// Reads a TOML file, or JSON when the extension is `.json`.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        let json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        Self::parse(&text, json, &path.display().to_string())
    }

    /// Parses `text`; parse errors carry line and column.
    pub fn parse(text: &str, json: bool, name: &str) -> Result<Self> {
        let root = if json {
            let v: serde_json::Value = serde_json::from_str(text)
                .map_err(|e| anyhow!("{name}: line {}, column {}: {e}", e.line(), e.column()))?;
            match Value::try_from(v).map_err(|e| anyhow!("{name}: {e}"))? {
                Value::Table(t) => t,
                _ => bail!("{name}: top level must be an object"),
            }
        } else {
            text.parse::<Table>().map_err(|e| {
                let at = e.span().map(|s| line_of(text, s.start)).map(|l| format!(" line {l}:")).unwrap_or_default();
                anyhow!("{name}:{at} {}", e.message())
            })?
        };
        Ok(Self {
            root,
            source: Some((name.to_string(), text.to_string())),
            overridden: Vec::new(),
        })
    }

    /// Applies one `key=value` assignment.
    pub fn assign(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| anyhow!("override `{assignment}` is not of the form key=value"))?;
        let raw = raw.trim();
        let value = format!("v = {raw}")
            .parse::<Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| Value::String(raw.to_string()));
        self.set(key.trim(), value)
    }

    /// Sets a dotted key, creating intermediate tables.
    pub fn set(&mut self, key: &str, value: Value) -> Result<()> {
        let parts: Vec<&str> = key.split('.').map(str::trim).collect();
        if parts.iter().any(|p| p.is_empty()) {
            bail!("invalid key `{key}`");
        }
        let (last, parents) = parts.split_last().expect("split yields at least one part");
        let mut table = &mut self.root;
        for (depth, p) in parents.iter().enumerate() {
            let entry = table.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
            table = match entry {
                Value::Table(t) => t,
                _ => bail!("key `{}` is not a table", parts[..=depth].join(".")),
            };
        }
        table.insert(last.to_string(), value);
        self.overridden.push(key.to_string());
        Ok(())
    }

    fn origin(&self, dotted: &str) -> Option<Origin> {
        if self.overridden.iter().any(|k| k == dotted) {
            return Some(Origin::Override);
        }
        let (name, text) = self.source.as_ref()?;
        let (section, key) = match dotted.rsplit_once('.') {
            Some((s, k)) => (Some(s), k),
            None => (None, dotted),
        };
        let mut current: Option<String> = None;
        for (i, line) in text.lines().enumerate() {
            let t = line.trim();
            if let Some(h) = t.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
                current = Some(h.trim().to_string());
                continue;
            }
            let Some((k, _)) = t.split_once('=') else { continue };
            let k = k.trim().trim_matches('"');
            let full = match &current {
                Some(c) => format!("{c}.{k}"),
                None => k.to_string(),
            };
            let hit = match section {
                Some(_) => full == dotted,
                None => current.is_none() && k == key,
            };
            if hit {
                return Some(Origin::File { name: name.clone(), line: i + 1 });
            }
            // JSON sources: match on the quoted key.
            if t.starts_with(&format!("\"{key}\"")) {
                return Some(Origin::File { name: name.clone(), line: i + 1 });
            }
        }
        None
    }

    fn locate(&self, dotted: &str) -> String {
        match self.origin(dotted) {
            Some(Origin::File { name, line }) => format!("{name}: line {line}: "),
            Some(Origin::Override) => "override: ".into(),
            None => String::new(),
        }
    }

    /// Resolves run settings. `sections` maps each registered experiment
    /// ID to its accepted parameter names; tables named after other IDs
    /// are ignored, anything else is rejected.
    pub fn resolve(&self, sections: &BTreeMap<String, Vec<String>>) -> Result<ExperimentConfig> {
        let mut top = Table::new();
        let mut tables: BTreeMap<String, Table> = BTreeMap::new();
        for (k, v) in &self.root {
            match v {
                Value::Table(t) if sections.contains_key(k) => {
                    tables.insert(k.clone(), t.clone());
                }
                _ if TOP_LEVEL_KEYS.contains(&k.as_str()) => {
                    top.insert(k.clone(), v.clone());
                }
                Value::Table(_) => bail!("{}unknown section `{k}` (not a registered experiment)", self.locate(k)),
                _ => bail!("{}unknown key `{k}`", self.locate(k)),
            }
        }
        let raw: TopLevel = Value::Table(top).try_into().map_err(|e: toml::de::Error| anyhow!("invalid setting: {}", e.message()))?;
        let experiment = raw.experiment.ok_or_else(|| anyhow!("no experiment selected (set `experiment` or pass --experiment)"))?;
        let accepted = sections
            .get(&experiment)
            .ok_or_else(|| anyhow!("{}unknown experiment `{experiment}`", self.locate("experiment")))?;
        let params = tables.remove(&experiment).unwrap_or_default();
        for k in params.keys() {
            if !accepted.contains(k) {
                let dotted = format!("{experiment}.{k}");
                bail!("{}unknown key `{dotted}` (accepted: {})", self.locate(&dotted), accepted.join(", "));
            }
        }
        let mut checks = Vec::new();
        for name in raw.checks.unwrap_or_default() {
            let c: Check = name.parse().map_err(|e| anyhow!("{}{e}", self.locate("checks")))?;
            if !checks.contains(&c) {
                checks.push(c);
            }
        }
        checks.sort();
        let cfg = ExperimentConfig {
            experiment,
            seed: raw.seed.unwrap_or(DEFAULT_SEED),
            paths: raw.paths.unwrap_or(DEFAULT_PATHS),
            steps: raw.steps.unwrap_or(DEFAULT_STEPS),
            horizon: raw.horizon,
            basis_degree: raw.basis_degree.unwrap_or(DEFAULT_BASIS_DEGREE),
            checks,
            out: raw.out.unwrap_or_else(|| PathBuf::from("results")),
            write_paths: raw.write_paths.unwrap_or(DEFAULT_WRITE_PATHS),
            binary: raw.binary.unwrap_or(false),
            params,
        };
        if cfg.paths < 2 {
            bail!("{}paths must be at least 2", self.locate("paths"));
        }
        if cfg.steps == 0 {
            bail!("{}steps must be positive", self.locate("steps"));
        }
        if let Some(h) = cfg.horizon {
            if !(h > 0.0 && h.is_finite()) {
                bail!("{}horizon must be finite and positive", self.locate("horizon"));
            }
        }
        Ok(cfg)
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}
