//! Experiment orchestration: flat `key = value` configs, seed fan-out over
//! the `(eps, seed)` grid, per-pipeline CSV tables, `summary.json` and trend
//! aggregation.
//!
//! Cells run in parallel and are collected in grid order, so every CSV is
//! byte-identical across runs and thread counts.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;

use crate::clusters::{
    build_hierarchy, chain_parameters, chain_probability_sweep, good_bad_partition, size_classes, DEFAULT_LAMBDA_CAP,
    DEFAULT_THETA, DEFAULT_THETA_BAD,
};
use crate::domain::DomainSpec;
use crate::fdsolver::{self, darcy_error, rasterize, solve_poisson, Source, DEFAULT_TOL};
use crate::geometry::{build_holes, is_covered, neighbor_stats, volume_fraction, HoleSet, NeighborStats};
use crate::measures::{
    build_covering, default_gamma, default_multiplier, h_minus_one_numeric, kv_bound, l2_step_discrepancy, pairing,
    step_function, Bump, CellPolicy, FluxMeasure, Mode, PAIRING_ORDER,
};
use crate::pointprocess::{
    check_admissibility, moment, sample_realization, Admissibility, BetaRange, ProcessParams, RadiiLaw, Realization,
};
use crate::rng::derive_seed;
use crate::stats::{log_log_slope, summarize, wilson_interval, Summary};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config field `{field}`: {msg}")]
    ConfigInvalid { field: String, msg: String },
    #[error("pipeline failed in cell {cell}: {msg}")]
    PipelineFailed { cell: String, msg: String },
    #[error("schema mismatch in {path}: {msg}")]
    SchemaMismatch { path: String, msg: String },
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("csv error on {path}: {source}")]
    Csv { path: String, source: csv::Error },
}

fn invalid(field: &str, msg: impl Into<String>) -> HarnessError {
    HarnessError::ConfigInvalid { field: field.to_string(), msg: msg.into() }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Experiment {
    Sample,
    Coverage,
    Chains,
    Partition,
    Discrepancy,
    Solve,
    Sweep,
}

impl Experiment {
    pub const ALL: [Experiment; 7] = [
        Experiment::Sample,
        Experiment::Coverage,
        Experiment::Chains,
        Experiment::Partition,
        Experiment::Discrepancy,
        Experiment::Solve,
        Experiment::Sweep,
    ];
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Experiment::Sample => "sample",
            Experiment::Coverage => "coverage",
            Experiment::Chains => "chains",
            Experiment::Partition => "partition",
            Experiment::Discrepancy => "discrepancy",
            Experiment::Solve => "solve",
            Experiment::Sweep => "sweep",
        };
        f.write_str(s)
    }
}

impl FromStr for Experiment {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Experiment::ALL
            .into_iter()
            .find(|e| e.to_string() == s.trim())
            .ok_or_else(|| format!("unknown experiment `{s}`"))
    }
}

/// Every config key with its default and meaning, in `--help` order.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("experiment", "(from the command line)", "sample | coverage | chains | partition | discrepancy | solve | sweep"),
    ("eps", "0.1,0.05,0.025", "comma-separated scales, each in (0,1)"),
    ("levels", "", "dyadic levels j; overrides eps with eps_j = 2^-j"),
    ("alpha", "1.5", "hole exponent in (1,3)"),
    ("lambda", "1", "Poisson intensity"),
    ("law", "constant:1", "radii law: constant:r | pareto:s | uniform:b"),
    ("domain", "box:0,0,0,1,1,1", "box:x0,y0,z0,x1,y1,z1 or ball:cx,cy,cz,r"),
    ("n_seeds", "20", "realizations per scale"),
    ("master_seed", "1", "root of every derived seed"),
    ("count_cap", "1e8", "largest admissible expected point count"),
    ("nested", "true", "coverage: coarsen one fine realization per seed"),
    ("n_samples", "20000", "coverage: Monte Carlo points for the volume fraction"),
    ("kappa_fraction", "0.9", "chains: kappa as a fraction of its supremum"),
    ("beta", "", "chains: moment gap; default half its supremum"),
    ("m", "", "chains: chain length M; default from the chain parameters"),
    ("gamma", "", "partition/discrepancy: default (20/21)(alpha-1)"),
    ("theta_b", "2", "dilation of the bad set"),
    ("theta", "2", "hierarchy overlap dilation"),
    ("lambda_cap", "64", "hierarchy enlargement cap"),
    ("k", "", "discrepancy: cube multiplier; default max(2, ceil(eps^(-9(alpha-1)/20)))"),
    ("mode", "scalar", "discrepancy: scalar | stokes"),
    ("cell_policy", "shrink", "discrepancy: shrink | strict unit cells"),
    ("hminus1_h", "", "discrepancy: lattice spacing of the numerical H^-1 norm; blank skips it"),
    ("h", "0.0078125", "solve: grid spacing"),
    ("tol", "1e-8", "solve: relative CG residual"),
    ("p", "1.5", "solve: Lebesgue exponent in [1,2)"),
    ("control", "false", "solve: add hole-free control runs"),
    ("dump_fields", "false", "solve: write raw fields with text sidecars"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub eps: Vec<f64>,
    pub levels: Option<Vec<u32>>,
    pub alpha: f64,
    pub lambda: f64,
    pub law: RadiiLaw,
    pub domain: DomainSpec,
    pub n_seeds: usize,
    pub master_seed: u64,
    pub count_cap: f64,
    pub nested: bool,
    pub n_samples: usize,
    pub kappa_fraction: f64,
    pub beta: Option<f64>,
    pub m: Option<usize>,
    pub gamma: Option<f64>,
    pub theta_b: f64,
    pub theta: f64,
    pub lambda_cap: f64,
    pub k: Option<usize>,
    pub mode: Mode,
    pub cell_policy: CellPolicy,
    pub hminus1_h: Option<f64>,
    pub h: f64,
    pub tol: f64,
    pub p: f64,
    pub control: bool,
    pub dump_fields: bool,
}

impl ExperimentConfig {
    pub fn new(experiment: Experiment) -> Self {
        ExperimentConfig {
            experiment,
            eps: vec![0.1, 0.05, 0.025],
            levels: None,
            alpha: 1.5,
            lambda: 1.0,
            law: RadiiLaw::Constant(1.0),
            domain: DomainSpec::unit_cube(),
            n_seeds: 20,
            master_seed: 1,
            count_cap: 1e8,
            nested: true,
            n_samples: 20_000,
            kappa_fraction: 0.9,
            beta: None,
            m: None,
            gamma: None,
            theta_b: DEFAULT_THETA_BAD,
            theta: DEFAULT_THETA,
            lambda_cap: DEFAULT_LAMBDA_CAP,
            k: None,
            mode: Mode::Scalar,
            cell_policy: CellPolicy::Shrink,
            hminus1_h: None,
            h: 1.0 / 128.0,
            tol: DEFAULT_TOL,
            p: 1.5,
            control: false,
            dump_fields: false,
        }
    }

    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    /// An `experiment` key in the text must agree with `experiment` when
    /// one is given.
    pub fn parse(text: &str, experiment: Option<Experiment>) -> Result<Self, HarnessError> {
        let mut pairs: BTreeMap<String, String> = BTreeMap::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or_default().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) =
                line.split_once('=').ok_or_else(|| invalid(&format!("line {}", no + 1), "expected `key = value`"))?;
            let key = key.trim().to_string();
            if !KEYS.iter().any(|(k, _, _)| *k == key) {
                return Err(invalid(&key, "unknown key"));
            }
            if pairs.insert(key.clone(), value.trim().to_string()).is_some() {
                return Err(invalid(&key, "given twice"));
            }
        }
        let file_exp = pairs.remove("experiment").map(|v| v.parse::<Experiment>().map_err(|e| invalid("experiment", e))).transpose()?;
        let exp = match (experiment, file_exp) {
            (Some(a), Some(b)) if a != b => return Err(invalid("experiment", format!("config says {b}, command line {a}"))),
            (Some(a), _) => a,
            (None, Some(b)) => b,
            (None, None) => return Err(invalid("experiment", "missing")),
        };
        let mut c = ExperimentConfig::new(exp);
        for (key, value) in &pairs {
            c.set(key, value)?;
        }
        c.validate()?;
        Ok(c)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<(), HarnessError> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T, HarnessError>
        where
            T::Err: fmt::Display,
        {
            v.parse::<T>().map_err(|e| invalid(key, format!("`{v}`: {e}")))
        }
        fn opt<T: FromStr>(key: &str, v: &str) -> Result<Option<T>, HarnessError>
        where
            T::Err: fmt::Display,
        {
            if v.is_empty() {
                Ok(None)
            } else {
                num(key, v).map(Some)
            }
        }
        fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>, HarnessError>
        where
            T::Err: fmt::Display,
        {
            v.split(',').map(|x| num(key, x.trim())).collect()
        }
        match key {
            "eps" => self.eps = list(key, v)?,
            "levels" => self.levels = if v.is_empty() { None } else { Some(list(key, v)?) },
            "alpha" => self.alpha = num(key, v)?,
            "lambda" => self.lambda = num(key, v)?,
            "law" => self.law = v.parse().map_err(|e: String| invalid(key, e))?,
            "domain" => self.domain = v.parse().map_err(|e: String| invalid(key, e))?,
            "n_seeds" => self.n_seeds = num(key, v)?,
            "master_seed" => self.master_seed = num(key, v)?,
            "count_cap" => self.count_cap = num(key, v)?,
            "nested" => self.nested = num(key, v)?,
            "n_samples" => self.n_samples = num(key, v)?,
            "kappa_fraction" => self.kappa_fraction = num(key, v)?,
            "beta" => self.beta = opt(key, v)?,
            "m" => self.m = opt(key, v)?,
            "gamma" => self.gamma = opt(key, v)?,
            "theta_b" => self.theta_b = num(key, v)?,
            "theta" => self.theta = num(key, v)?,
            "lambda_cap" => self.lambda_cap = num(key, v)?,
            "k" => self.k = opt(key, v)?,
            "mode" => {
                self.mode = match v {
                    "scalar" => Mode::Scalar,
                    "stokes" => Mode::Stokes,
                    _ => return Err(invalid(key, "expected scalar or stokes")),
                }
            }
            "cell_policy" => {
                self.cell_policy = match v {
                    "shrink" => CellPolicy::Shrink,
                    "strict" => CellPolicy::Strict,
                    _ => return Err(invalid(key, "expected shrink or strict")),
                }
            }
            "hminus1_h" => self.hminus1_h = opt(key, v)?,
            "h" => self.h = num(key, v)?,
            "tol" => self.tol = num(key, v)?,
            "p" => self.p = num(key, v)?,
            "control" => self.control = num(key, v)?,
            "dump_fields" => self.dump_fields = num(key, v)?,
            _ => return Err(invalid(key, "unknown key")),
        }
        Ok(())
    }

    /// Scales of the run: `2^-j` over `levels` when set, else `eps`.
    pub fn scales(&self) -> Vec<f64> {
        match &self.levels {
            Some(l) => l.iter().map(|&j| 0.5f64.powi(j as i32)).collect(),
            None => self.eps.clone(),
        }
    }

    pub fn gamma_value(&self) -> f64 {
        self.gamma.unwrap_or_else(|| default_gamma(self.alpha))
    }

    pub fn k_value(&self, eps: f64) -> usize {
        self.k.unwrap_or_else(|| default_multiplier(eps, self.alpha))
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let scales = self.scales();
        if scales.is_empty() {
            return Err(invalid("eps", "empty list"));
        }
        if let Some(e) = scales.iter().find(|e| !(**e > 0.0 && **e < 1.0)) {
            return Err(invalid(if self.levels.is_some() { "levels" } else { "eps" }, format!("{e} outside (0,1)")));
        }
        if !(self.alpha > 1.0 && self.alpha < 3.0) {
            return Err(invalid("alpha", format!("{} outside (1,3)", self.alpha)));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(invalid("lambda", "must be positive"));
        }
        self.law.validate().map_err(|e| invalid("law", e))?;
        self.domain.validate().map_err(|e| invalid("domain", e))?;
        if self.n_seeds == 0 {
            return Err(invalid("n_seeds", "must be at least 1"));
        }
        if !(self.count_cap > 0.0) {
            return Err(invalid("count_cap", "must be positive"));
        }
        if self.n_samples == 0 {
            return Err(invalid("n_samples", "must be at least 1"));
        }
        if !(self.kappa_fraction > 0.0 && self.kappa_fraction < 1.0) {
            return Err(invalid("kappa_fraction", "must lie in (0,1)"));
        }
        if let Some(b) = self.beta {
            if !(b > 0.0 && b.is_finite()) {
                return Err(invalid("beta", "must be positive"));
            }
        }
        if self.m == Some(0) {
            return Err(invalid("m", "must be at least 1"));
        }
        let g = self.gamma_value();
        if !(g > 0.0 && g < self.alpha - 1.0) {
            return Err(invalid("gamma", format!("{g} outside (0, alpha-1)")));
        }
        if !(self.theta_b >= 1.0) {
            return Err(invalid("theta_b", "must be at least 1"));
        }
        if !(self.theta >= 1.0) {
            return Err(invalid("theta", "must be at least 1"));
        }
        if !(self.lambda_cap >= 1.0) {
            return Err(invalid("lambda_cap", "must be at least 1"));
        }
        if let Some(k) = self.k {
            if k < 2 {
                return Err(invalid("k", "must be at least 2"));
            }
        }
        if let Some(h) = self.hminus1_h {
            if !(h > 0.0 && h < 1.0) {
                return Err(invalid("hminus1_h", "must lie in (0,1)"));
            }
        }
        if !(self.h > 0.0 && self.h < 1.0) {
            return Err(invalid("h", "must lie in (0,1)"));
        }
        if !(self.tol > 0.0 && self.tol < 1.0) {
            return Err(invalid("tol", "must lie in (0,1)"));
        }
        if !(1.0..2.0).contains(&self.p) {
            return Err(invalid("p", "must lie in [1,2)"));
        }
        for &eps in &scales {
            let params = self.base_params(eps, 0);
            params.validate().map_err(|e| invalid("eps", e.to_string()))?;
            if params.expected_count() > self.count_cap {
                return Err(invalid("eps", format!("{eps} expects {} points, above count_cap", params.expected_count())));
            }
        }
        Ok(())
    }

    pub fn base_params(&self, eps: f64, seed: u64) -> ProcessParams {
        let mut p = ProcessParams::new(self.lambda, eps, self.alpha, self.domain, self.law, seed);
        p.count_cap = self.count_cap;
        p
    }

    /// Seed of cell `(eps index, seed index)`.
    pub fn seed(&self, eps_idx: usize, seed_idx: usize) -> u64 {
        derive_seed(&[self.master_seed, eps_idx as u64, seed_idx as u64])
    }

    /// Every key with its effective value.
    pub fn echo(&self) -> BTreeMap<String, String> {
        let show = |o: Option<String>| o.unwrap_or_default();
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("experiment", self.experiment.to_string());
        put("eps", join(&self.eps));
        put("levels", show(self.levels.as_ref().map(|l| l.iter().map(u32::to_string).collect::<Vec<_>>().join(","))));
        put("alpha", fmt_f(self.alpha));
        put("lambda", fmt_f(self.lambda));
        put("law", self.law.to_string());
        put("domain", self.domain.to_string());
        put("n_seeds", self.n_seeds.to_string());
        put("master_seed", self.master_seed.to_string());
        put("count_cap", fmt_f(self.count_cap));
        put("nested", self.nested.to_string());
        put("n_samples", self.n_samples.to_string());
        put("kappa_fraction", fmt_f(self.kappa_fraction));
        put("beta", show(self.beta.map(fmt_f)));
        put("m", show(self.m.map(|v| v.to_string())));
        put("gamma", show(self.gamma.map(fmt_f)));
        put("theta_b", fmt_f(self.theta_b));
        put("theta", fmt_f(self.theta));
        put("lambda_cap", fmt_f(self.lambda_cap));
        put("k", show(self.k.map(|v| v.to_string())));
        put("mode", serde_json::to_value(self.mode).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default());
        put(
            "cell_policy",
            serde_json::to_value(self.cell_policy).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default(),
        );
        put("hminus1_h", show(self.hminus1_h.map(fmt_f)));
        put("h", fmt_f(self.h));
        put("tol", fmt_f(self.tol));
        put("p", fmt_f(self.p));
        put("control", self.control.to_string());
        put("dump_fields", self.dump_fields.to_string());
        m
    }
}

/// Shortest round-trip decimal.
pub fn fmt_f(v: f64) -> String {
    format!("{v:?}")
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| fmt_f(*x)).collect::<Vec<_>>().join(",")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Verdict {
    pub pass: bool,
    pub detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Verdict { pass, detail: detail.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Failure {
    pub cell: String,
    pub error: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub config: BTreeMap<String, String>,
    pub cells: Vec<Value>,
    pub aggregates: BTreeMap<String, Value>,
    pub verdicts: BTreeMap<String, Verdict>,
    pub failures: Vec<Failure>,
    pub version: String,
    pub wall_time_s: f64,
    /// Files written under the output directory, relative to it.
    pub outputs: Vec<String>,
}

impl RunSummary {
    fn new(config: &ExperimentConfig) -> Self {
        RunSummary {
            config: config.echo(),
            cells: Vec::new(),
            aggregates: BTreeMap::new(),
            verdicts: BTreeMap::new(),
            failures: Vec::new(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            wall_time_s: 0.0,
            outputs: Vec::new(),
        }
    }

    /// All gates pass and no cell failed.
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.verdicts.values().all(|v| v.pass)
    }

    fn absorb(&mut self, prefix: &str, other: RunSummary) {
        self.cells.extend(other.cells);
        for (k, v) in other.aggregates {
            self.aggregates.insert(format!("{prefix}.{k}"), v);
        }
        for (k, v) in other.verdicts {
            self.verdicts.insert(format!("{prefix}.{k}"), v);
        }
        self.failures.extend(other.failures);
        self.outputs.extend(other.outputs);
    }
}

/// A CSV table with fixed columns; floats in shortest round-trip form.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(name: &str, header: &[&str]) -> Self {
        Table { name: name.to_string(), header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf, HarnessError> {
        let path = dir.join(&self.name);
        let csv_err = |source| HarnessError::Csv { path: path.display().to_string(), source };
        let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
        w.write_record(&self.header).map_err(csv_err)?;
        for r in &self.rows {
            w.write_record(r).map_err(csv_err)?;
        }
        w.flush().map_err(io_err(&path))?;
        Ok(path)
    }
}

struct Cell {
    eps_idx: usize,
    seed_idx: usize,
    eps: f64,
    seed: u64,
}

impl Cell {
    fn label(&self) -> String {
        format!("eps={} seed_idx={} seed={}", fmt_f(self.eps), self.seed_idx, self.seed)
    }
}

fn grid(config: &ExperimentConfig) -> Vec<Cell> {
    let mut cells = Vec::new();
    for (ei, &eps) in config.scales().iter().enumerate() {
        for si in 0..config.n_seeds {
            cells.push(Cell { eps_idx: ei, seed_idx: si, eps, seed: config.seed(ei, si) });
        }
    }
    cells
}

/// Runs `f` on every cell in parallel; results come back in grid order.
fn fan_out<T: Send>(cells: &[Cell], f: impl Fn(&Cell) -> Result<T, String> + Sync) -> Vec<(usize, Result<T, String>)> {
    cells.par_iter().enumerate().map(|(i, c)| (i, f(c))).collect()
}

/// Trend of per-scale means taken from the coarsest scale to the finest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Trend {
    Decreasing,
    Increasing,
    Flat,
    NonMonotone,
    InsufficientData,
}

impl fmt::Display for Trend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Trend::Decreasing => "decreasing",
            Trend::Increasing => "increasing",
            Trend::Flat => "flat",
            Trend::NonMonotone => "non-monotone",
            Trend::InsufficientData => "insufficient data",
        };
        f.write_str(s)
    }
}

/// Classifies means ordered from coarse to fine; consecutive steps may go
/// the wrong way by up to their combined standard error.
pub fn trend(levels: &[Summary]) -> Trend {
    if levels.len() < 2 || levels.iter().any(|s| !s.mean.is_finite()) {
        return Trend::InsufficientData;
    }
    let slack = |a: &Summary, b: &Summary| (a.stderr.powi(2) + b.stderr.powi(2)).sqrt();
    let dec = levels.windows(2).all(|w| w[1].mean < w[0].mean + slack(&w[0], &w[1]));
    let inc = levels.windows(2).all(|w| w[1].mean > w[0].mean - slack(&w[0], &w[1]));
    match (dec, inc) {
        (true, false) => Trend::Decreasing,
        (false, true) => Trend::Increasing,
        (true, true) => Trend::Flat,
        (false, false) => Trend::NonMonotone,
    }
}

/// Per-scale summaries of a column, scales from coarse to fine.
fn per_scale(scales: &[f64], rows: &[(f64, f64)]) -> Vec<(f64, Summary)> {
    let mut sorted = scales.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    sorted.dedup();
    sorted
        .into_iter()
        .map(|e| {
            let v: Vec<f64> = rows.iter().filter(|(x, _)| *x == e).map(|(_, y)| *y).collect();
            (e, summarize(&v))
        })
        .collect()
}

fn levels_json(levels: &[(f64, Summary)]) -> Value {
    Value::Array(levels.iter().map(|(e, s)| json!({"eps": e, "n": s.n, "mean": s.mean, "stderr": s.stderr})).collect())
}

/// Runs the configured pipeline and writes its tables and `summary.json`
/// into `out`.
pub fn run(config: &ExperimentConfig, out: &Path) -> Result<RunSummary, HarnessError> {
    config.validate()?;
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let start = Instant::now();
    let mut summary = match config.experiment {
        Experiment::Sample => run_sample(config, out)?,
        Experiment::Coverage => run_coverage(config, out)?,
        Experiment::Chains => run_chains(config, out)?,
        Experiment::Partition => run_partition(config, out)?,
        Experiment::Discrepancy => run_discrepancy(config, out)?,
        Experiment::Solve => run_solve(config, out)?,
        Experiment::Sweep => {
            let mut s = RunSummary::new(config);
            for exp in [Experiment::Sample, Experiment::Coverage, Experiment::Partition, Experiment::Discrepancy] {
                let sub = ExperimentConfig { experiment: exp, ..config.clone() };
                let part = match exp {
                    Experiment::Sample => run_sample(&sub, out)?,
                    Experiment::Coverage => run_coverage(&sub, out)?,
                    Experiment::Partition => run_partition(&sub, out)?,
                    _ => run_discrepancy(&sub, out)?,
                };
                s.absorb(&exp.to_string(), part);
            }
            s
        }
    };
    summary.config = config.echo();
    summary.wall_time_s = start.elapsed().as_secs_f64();
    summary.outputs.push("summary.json".to_string());
    let path = out.join("summary.json");
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    std::fs::write(&path, text).map_err(io_err(&path))?;
    Ok(summary)
}

fn write_tables(summary: &mut RunSummary, out: &Path, tables: &[Table]) -> Result<(), HarnessError> {
    for t in tables {
        t.write(out)?;
        summary.outputs.push(t.name.clone());
    }
    Ok(())
}

fn run_sample(config: &ExperimentConfig, out: &Path) -> Result<RunSummary, HarnessError> {
    let mut summary = RunSummary::new(config);
    let dump_dir = out.join("realizations");
    std::fs::create_dir_all(&dump_dir).map_err(io_err(&dump_dir))?;
    let cells = grid(config);
    let vol = config.domain.volume();
    let results = fan_out(&cells, |c| {
        let real = sample_realization(&config.base_params(c.eps, c.seed)).map_err(|e| e.to_string())?;
        let text = real.to_dump();
        let name = format!("realizations/eps{}_seed{}.txt", c.eps_idx, c.seed_idx);
        std::fs::write(out.join(&name), &text).map_err(|e| e.to_string())?;
        let round_trip = Realization::from_dump(&text).map(|r| r == real).unwrap_or(false);
        let sum_rho: f64 = real.points.iter().map(|p| p.rho).sum();
        Ok((real.len(), real.params.expected_count(), c.eps.powi(3) * sum_rho / vol, round_trip, name))
    });
    let mut table = Table::new("sample.csv", &["eps", "seed", "count", "expected_count", "capacity_density", "round_trip"]);
    let mut density = Vec::new();
    let mut trips = true;
    for (i, r) in results {
        let c = &cells[i];
        match r {
            Ok((n, expected, dens, trip, name)) => {
                let cap = 4.0 * PI * dens;
                table.push(vec![fmt_f(c.eps), c.seed.to_string(), n.to_string(), fmt_f(expected), fmt_f(cap), trip.to_string()]);
                summary.cells.push(json!({"eps": c.eps, "seed": c.seed, "count": n, "capacity_density": cap, "dump": name, "round_trip": trip}));
                summary.outputs.push(name);
                density.push((c.eps, cap));
                trips &= trip;
            }
            Err(e) => summary.failures.push(Failure { cell: c.label(), error: e }),
        }
    }
    let target = 4.0 * PI * config.lambda * moment(&config.law, 1.0);
    let levels = per_scale(&config.scales(), &density);
    let within = levels.iter().all(|(_, s)| (s.mean - target).abs() <= 3.0 * s.stderr.max(f64::MIN_POSITIVE) || s.n < 2);
    summary.aggregates.insert("capacity_density".into(), levels_json(&levels));
    summary.aggregates.insert("capacity_density_target".into(), json!(target));
    summary.verdicts.insert("dump_round_trip".into(), Verdict::new(trips, "every dump parses back to its realization"));
    summary.verdicts.insert(
        "capacity_density".into(),
        Verdict::new(within, format!("4 pi eps^3 sum rho / |D| within 3 standard errors of {target}")),
    );
    write_tables(&mut summary, out, &[table])?;
    Ok(summary)
}

fn run_coverage(config: &ExperimentConfig, out: &Path) -> Result<RunSummary, HarnessError> {
    let mut summary = RunSummary::new(config);
    let scales = config.scales();
    let finest = scales.iter().copied().fold(f64::INFINITY, f64::min);
    let nested = config.nested && config.domain.contains(&crate::domain::Point::zeros());
    // one realization per seed index at the finest scale, coarsened to the
    // others, so coverage is coupled across scales
    let per_seed: Vec<(usize, Result<Vec<(bool, f64, f64)>, String>)> = (0..config.n_seeds)
        .into_par_iter()
        .map(|si| {
            let run = || -> Result<Vec<(bool, f64, f64)>, String> {
                let fine = if nested {
                    Some(sample_realization(&config.base_params(finest, config.seed(0, si))).map_err(|e| e.to_string())?)
                } else {
                    None
                };
                scales
                    .iter()
                    .enumerate()
                    .map(|(ei, &eps)| {
                        let real = match &fine {
                            Some(f) => f.coarsen(eps).map_err(|e| e.to_string())?,
                            None => sample_realization(&config.base_params(eps, config.seed(ei, si))).map_err(|e| e.to_string())?,
                        };
                        let holes = build_holes(&real);
                        let (p, se) = volume_fraction(&holes, config.n_samples, derive_seed(&[real.params.seed, ei as u64]));
                        Ok((is_covered(&holes), p, se))
                    })
                    .collect()
            };
            (si, run())
        })
        .collect();
    let mut vf = Table::new("volume_fraction.csv", &["eps", "alpha", "seed", "estimate", "stderr"]);
    let mut covered = vec![0usize; scales.len()];
    let mut done = 0usize;
    let mut fractions = Vec::new();
    for (si, r) in per_seed {
        match r {
            Ok(rows) => {
                done += 1;
                for (ei, (cov, p, se)) in rows.into_iter().enumerate() {
                    let seed = if nested { config.seed(0, si) } else { config.seed(ei, si) };
                    covered[ei] += usize::from(cov);
                    vf.push(vec![fmt_f(scales[ei]), fmt_f(config.alpha), seed.to_string(), fmt_f(p), fmt_f(se)]);
                    summary.cells.push(json!({"eps": scales[ei], "seed": seed, "covered": cov, "volume_fraction": p, "stderr": se}));
                    fractions.push((scales[ei], p));
                }
            }
            Err(e) => summary.failures.push(Failure { cell: format!("seed_idx={si}"), error: e }),
        }
    }
    let mut cov = Table::new("coverage.csv", &["j", "eps_j", "n_seeds", "covered_count"]);
    let mut probs = Vec::new();
    for (ei, &eps) in scales.iter().enumerate() {
        let j = config.levels.as_ref().map(|l| l[ei] as i64).unwrap_or(ei as i64);
        cov.push(vec![j.to_string(), fmt_f(eps), done.to_string(), covered[ei].to_string()]);
        let (lo, hi) = wilson_interval(covered[ei], done, 1.96);
        probs.push(json!({"j": j, "eps": eps, "covered": covered[ei], "n": done, "probability": covered[ei] as f64 / done.max(1) as f64, "wilson95": [lo, hi]}));
    }
    summary.aggregates.insert("coverage".into(), Value::Array(probs));
    let levels = per_scale(&scales, &fractions);
    summary.aggregates.insert("volume_fraction".into(), levels_json(&levels));
    let order = 3.0 / config.alpha;
    let admissible = moment(&config.law, order).is_finite();
    // scales from coarse to fine
    let mut idx: Vec<usize> = (0..scales.len()).collect();
    idx.sort_by(|a, b| scales[*b].total_cmp(&scales[*a]));
    let frac = |i: usize| covered[i] as f64 / done.max(1) as f64;
    if admissible {
        let worst = idx.iter().map(|&i| frac(i)).fold(0.0, f64::max);
        summary.verdicts.insert(
            "coverage_vanishes".into(),
            Verdict::new(worst <= 0.01, format!("E[rho^{order}] finite; largest coverage frequency {worst}")),
        );
        let t = trend(&levels.iter().map(|(_, s)| *s).collect::<Vec<_>>());
        summary.verdicts.insert(
            "volume_fraction_decreasing".into(),
            Verdict::new(matches!(t, Trend::Decreasing | Trend::InsufficientData), format!("volume fraction trend: {t}")),
        );
    } else {
        let mono = idx.windows(2).all(|w| covered[w[1]] >= covered[w[0]]);
        summary.verdicts.insert(
            "coverage_nondecreasing".into(),
            Verdict::new(mono, format!("E[rho^{order}] infinite; covered counts from coarse to fine {:?}", idx.iter().map(|&i| covered[i]).collect::<Vec<_>>())),
        );
    }
    write_tables(&mut summary, out, &[vf, cov])?;
    Ok(summary)
}

/// Default moment gap: half the supremum of `beta` with `E[rho^(3/alpha + beta)] < inf`.
pub fn default_beta(law: &RadiiLaw, alpha: f64) -> Option<f64> {
    match check_admissibility(law, alpha, true, None) {
        Admissibility::AdmissibleStokes(BetaRange::Unbounded) => Some(1.0),
        Admissibility::AdmissibleStokes(BetaRange::Below(sup)) => Some(sup / 2.0),
        Admissibility::AdmissibleStokes(BetaRange::Probe(b)) => Some(b),
        _ => None,
    }
}

fn run_chains(config: &ExperimentConfig, out: &Path) -> Result<RunSummary, HarnessError> {
    let mut summary = RunSummary::new(config);
    let beta = match config.beta.or_else(|| default_beta(&config.law, config.alpha)) {
        Some(b) => b,
        None => return Err(invalid("law", "no finite moment beyond 3/alpha")),
    };
    let mut chain = chain_parameters(config.alpha, beta, config.kappa_fraction);
    if let Some(m) = config.m {
        chain.m = m;
    }
    let scales = config.scales();
    let base = config.base_params(scales[0], 0);
    let sweep = chain_probability_sweep(&base, &chain, &scales, config.n_seeds, config.master_seed)
        .map_err(|e| HarnessError::PipelineFailed { cell: "chain sweep".into(), msg: e.to_string() })?;
    let mut table = Table::new("chains.csv", &["eps", "kappa", "class_k", "max_component", "greedy_clique", "n_seeds_hit"]);
    for r in &sweep.rows {
        table.push(vec![
            fmt_f(r.eps),
            fmt_f(r.kappa),
            r.class_k.to_string(),
            r.max_component.to_string(),
            r.greedy_clique.to_string(),
            r.n_seeds_hit.to_string(),
        ]);
    }
    for l in &sweep.levels {
        summary.cells.push(serde_json::to_value(l).expect("level serializes"));
    }
    summary.aggregates.insert("chain_params".into(), serde_json::to_value(chain).expect("params serialize"));
    let mut lv = sweep.levels.clone();
    lv.sort_by(|a, b| b.eps.total_cmp(&a.eps));
    let top: Vec<usize> = lv.iter().map(|l| l.top_chain_m).collect();
    let mono = top.windows(2).all(|w| w[1] <= w[0]);
    summary.verdicts.insert(
        "top_chain_nonincreasing".into(),
        Verdict::new(mono, format!("seeds with a chain of length >= {} in pairs k >= {}: {top:?}", chain.m, chain.k0)),
    );
    write_tables(&mut summary, out, &[table])?;
    Ok(summary)
}

struct Geometry {
    holes: HoleSet,
    stats: NeighborStats,
}

fn geometry(config: &ExperimentConfig, c: &Cell) -> Result<Geometry, String> {
    let real = sample_realization(&config.base_params(c.eps, c.seed)).map_err(|e| e.to_string())?;
    let holes = build_holes(&real);
    let stats = neighbor_stats(&holes);
    Ok(Geometry { holes, stats })
}

fn run_partition(config: &ExperimentConfig, out: &Path) -> Result<RunSummary, HarnessError> {
    let mut summary = RunSummary::new(config);
    let cells = grid(config);
    let gamma = config.gamma_value();
    let kappa = config
        .beta
        .or_else(|| default_beta(&config.law, config.alpha))
        .map(|b| chain_parameters(config.alpha, b, config.kappa_fraction));
    let results = fan_out(&cells, |c| {
        let g = geometry(config, c)?;
        let part = good_bad_partition(&g.holes, &g.stats, gamma, config.theta_b);
        let hierarchy = kappa.map(|cp| {
            let classes = size_classes(&g.holes, cp.kappa);
            build_hierarchy(&classes, &g.holes, config.theta, config.lambda_cap, config.m.unwrap_or(cp.m))
        });
        let residual = part.separation_violations(&g.holes, &g.stats);
        Ok((part, hierarchy.map(|h| (h.feasible, h.balls.len(), h.groups_over_m)), residual))
    });
    let mut table = Table::new("partition.csv", &["eps", "gamma", "n_good", "n_bad", "cap_bound", "vanish_stat", "violations_fixed"]);
    let mut caps = Vec::new();
    let mut clean = true;
    for (i, r) in results {
        let c = &cells[i];
        match r {
            Ok((p, h, residual)) => {
                table.push(vec![
                    fmt_f(c.eps),
                    fmt_f(gamma),
                    p.n_good.to_string(),
                    p.n_bad.to_string(),
                    fmt_f(p.cap_bound),
                    fmt_f(p.vanish_stat),
                    p.violations_fixed.to_string(),
                ]);
                let mut cell = json!({"eps": c.eps, "seed": c.seed, "n_good": p.n_good, "n_bad": p.n_bad,
                    "cap_bound": p.cap_bound, "vanish_stat": p.vanish_stat, "residual_violations": residual});
                if let Some((feasible, balls, over)) = h {
                    cell["hierarchy"] = json!({"feasible": feasible, "balls": balls, "groups_over_m": over});
                }
                summary.cells.push(cell);
                caps.push((c.eps, p.cap_bound));
                clean &= residual == 0;
            }
            Err(e) => summary.failures.push(Failure { cell: c.label(), error: e }),
        }
    }
    let levels = per_scale(&config.scales(), &caps);
    summary.aggregates.insert("cap_bound".into(), levels_json(&levels));
    summary.verdicts.insert("separation".into(), Verdict::new(clean, "no good center within reach of the dilated bad set"));
    let t = trend(&levels.iter().map(|(_, s)| *s).collect::<Vec<_>>());
    summary.aggregates.insert("cap_bound_trend".into(), json!(t.to_string()));
    write_tables(&mut summary, out, &[table])?;
    Ok(summary)
}

/// One discrepancy cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiscrepancyRow {
    pub eps: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub k: usize,
    pub seed: u64,
    pub pairing: f64,
    pub target: f64,
    pub abs_err: f64,
    pub kv_bound: f64,
    pub kv_violations: usize,
    pub l2_step: f64,
    pub l2_step_interior: f64,
    pub hminus1: Option<f64>,
    pub n_atoms: usize,
}

/// Pairing, step function and discrepancies of one realization.
pub fn discrepancy_cell(config: &ExperimentConfig, eps: f64, seed: u64) -> Result<DiscrepancyRow, String> {
    let cell = Cell { eps_idx: 0, seed_idx: 0, eps, seed };
    let g = geometry(config, &cell)?;
    let gamma = config.gamma_value();
    let k = config.k_value(eps);
    let part = good_bad_partition(&g.holes, &g.stats, gamma, config.theta_b);
    let measure = FluxMeasure::new(&g.holes, &part, &g.stats, config.mode).map_err(|e| e.to_string())?;
    let covering = build_covering(&g.holes, &part, &g.stats, k, config.cell_policy).map_err(|e| e.to_string())?;
    let step = step_function(&covering, &measure);
    let bump = Bump::standard();
    let value = pairing(&measure, &|x| bump.eval(x), PAIRING_ORDER).map_err(|e| e.to_string())?;
    let mean_rho = moment(&config.law, 1.0);
    let level = config.mode.prefactor() * config.lambda * mean_rho;
    let target = level * bump.integral();
    let kv = kv_bound(&measure, &covering);
    let l2 = l2_step_discrepancy(&covering, &step, level);
    let hminus1 = match config.hminus1_h {
        Some(h) => Some(h_minus_one_numeric(&measure, &covering, &step, h, config.tol).map_err(|e| e.to_string())?.value),
        None => None,
    };
    Ok(DiscrepancyRow {
        eps,
        alpha: config.alpha,
        gamma,
        k,
        seed,
        pairing: value,
        target,
        abs_err: (value - target).abs(),
        kv_bound: kv.value,
        kv_violations: kv.containment_violations,
        l2_step: l2.all,
        l2_step_interior: l2.interior,
        hminus1,
        n_atoms: measure.atoms.len(),
    })
}

fn run_discrepancy(config: &ExperimentConfig, out: &Path) -> Result<RunSummary, HarnessError> {
    let mut summary = RunSummary::new(config);
    let cells = grid(config);
    let results = fan_out(&cells, |c| discrepancy_cell(config, c.eps, c.seed));
    let mut table = Table::new(
        "discrepancy.csv",
        &["eps", "alpha", "gamma", "k", "seed", "pairing", "target", "abs_err", "kv_bound", "l2_step", "hminus1_numeric_or_blank"],
    );
    let (mut rel, mut l2, mut kv2) = (Vec::new(), Vec::new(), Vec::new());
    let mut target = f64::NAN;
    for (i, r) in results {
        let c = &cells[i];
        match r {
            Ok(row) => {
                table.push(vec![
                    fmt_f(row.eps),
                    fmt_f(row.alpha),
                    fmt_f(row.gamma),
                    row.k.to_string(),
                    row.seed.to_string(),
                    fmt_f(row.pairing),
                    fmt_f(row.target),
                    fmt_f(row.abs_err),
                    fmt_f(row.kv_bound),
                    fmt_f(row.l2_step),
                    row.hminus1.map(fmt_f).unwrap_or_default(),
                ]);
                target = row.target;
                rel.push((row.eps, row.abs_err / row.target));
                l2.push((row.eps, row.l2_step));
                let s = crate::correctors::sigma(row.eps, row.alpha);
                kv2.push((row.eps, s * s * row.kv_bound * row.kv_bound));
                summary.cells.push(serde_json::to_value(&row).expect("row serializes"));
            }
            Err(e) => summary.failures.push(Failure { cell: c.label(), error: e }),
        }
    }
    let scales = config.scales();
    let rel_levels = per_scale(&scales, &rel);
    let l2_levels = per_scale(&scales, &l2);
    let kv_levels = per_scale(&scales, &kv2);
    summary.aggregates.insert("target".into(), json!(target));
    summary.aggregates.insert("relative_error".into(), levels_json(&rel_levels));
    summary.aggregates.insert("l2_step".into(), levels_json(&l2_levels));
    summary.aggregates.insert("sigma2_kv2".into(), levels_json(&kv_levels));
    let (xs, ys): (Vec<f64>, Vec<f64>) = kv_levels.iter().map(|(e, s)| (*e, s.mean)).unzip();
    if let Some((slope, se)) = log_log_slope(&xs, &ys) {
        summary.aggregates.insert("sigma2_kv2_slope".into(), json!({"slope": slope, "stderr": se}));
    }
    for (name, levels) in [("relative_error", &rel_levels), ("l2_step", &l2_levels)] {
        let t = trend(&levels.iter().map(|(_, s)| *s).collect::<Vec<_>>());
        summary.verdicts.insert(
            format!("{name}_decreasing"),
            Verdict::new(matches!(t, Trend::Decreasing | Trend::InsufficientData), format!("trend from coarse to fine: {t}")),
        );
    }
    write_tables(&mut summary, out, &[table])?;
    Ok(summary)
}

fn run_solve(config: &ExperimentConfig, out: &Path) -> Result<RunSummary, HarnessError> {
    let mut summary = RunSummary::new(config);
    let mut cells = grid(config);
    let n_main = cells.len();
    if config.control {
        let scales = config.scales();
        for (ei, &eps) in scales.iter().enumerate() {
            cells.push(Cell { eps_idx: ei, seed_idx: usize::MAX, eps, seed: config.seed(ei, 0) });
        }
    }
    if config.dump_fields {
        let d = out.join("fields");
        std::fs::create_dir_all(&d).map_err(io_err(&d))?;
    }
    let results = fan_out(&cells, |c| {
        let control = c.seed_idx == usize::MAX;
        let params = config.base_params(c.eps, c.seed);
        let real = sample_realization(&params).map_err(|e| e.to_string())?;
        let mut holes = build_holes(&real);
        if control {
            holes = HoleSet::from_balls(holes.eps, holes.alpha, holes.domain, Vec::new());
        }
        let grid = rasterize(&holes, &holes.domain.bounding_box(), config.h).map_err(|e| e.to_string())?;
        let f = Source::Constant(1.0);
        let sol = solve_poisson(&grid, &f, config.tol).map_err(|e| e.to_string())?;
        let d = darcy_error(&sol, &grid, &params, &f, config.p);
        let mut dump = None;
        if config.dump_fields && !control {
            let name = format!("fields/eps{}_seed{}", c.eps_idx, c.seed_idx);
            fdsolver::write_field(&out.join(&name), &grid.lattice, &sol.u).map_err(|e| e.to_string())?;
            dump = Some(name);
        }
        let identity = (sol.energy - sol.work).abs() <= 10.0 * config.tol * sol.work.abs().max(f64::MIN_POSITIVE);
        Ok((fdsolver::SolveRow {
            eps: c.eps,
            alpha: config.alpha,
            seed: c.seed,
            h: config.h,
            iters: sol.iterations,
            residual: sol.residual,
            lp_error: d.lp_error,
            p: config.p,
            energy_norm: d.energy_norm,
            poincare_ratio: d.poincare_ratio,
            core_mean: d.core_mean,
            hole_fraction: grid.hole_fraction(),
            control,
        }, sol.min_value >= 0.0, identity, dump, d.k))
    });
    let mut table = Table::new(
        "solve.csv",
        &["eps", "alpha", "seed", "h", "iters", "residual", "lp_error", "p", "energy_norm", "poincare_ratio"],
    );
    let mut rows = Vec::new();
    let mut paired: BTreeMap<usize, BTreeMap<usize, f64>> = BTreeMap::new();
    let (mut max_ok, mut id_ok) = (true, true);
    let mut k = f64::NAN;
    for (i, r) in results {
        let c = &cells[i];
        match r {
            Ok((row, mp, identity, dump, kk)) => {
                if !row.control {
                    table.push(vec![
                        fmt_f(row.eps),
                        fmt_f(row.alpha),
                        row.seed.to_string(),
                        fmt_f(row.h),
                        row.iters.to_string(),
                        fmt_f(row.residual),
                        fmt_f(row.lp_error),
                        fmt_f(row.p),
                        fmt_f(row.energy_norm),
                        fmt_f(row.poincare_ratio),
                    ]);
                }
                let mut cell = serde_json::to_value(&row).expect("row serializes");
                if let Some(name) = &dump {
                    cell["field"] = json!(name);
                    summary.outputs.push(format!("{name}.bin"));
                    summary.outputs.push(format!("{name}.txt"));
                }
                summary.cells.push(cell);
                max_ok &= mp;
                id_ok &= identity;
                k = kk;
                if !row.control {
                    paired.entry(c.seed_idx).or_default().insert(c.eps_idx, row.lp_error);
                }
                rows.push(row);
            }
            Err(e) => summary.failures.push(Failure {
                cell: if i < n_main { c.label() } else { format!("control eps={}", fmt_f(c.eps)) },
                error: e,
            }),
        }
    }
    let scales = config.scales();
    let main: Vec<&fdsolver::SolveRow> = rows.iter().filter(|r| !r.control).collect();
    let err_levels = per_scale(&scales, &main.iter().map(|r| (r.eps, r.lp_error)).collect::<Vec<_>>());
    let en_levels = per_scale(&scales, &main.iter().map(|r| (r.eps, r.energy_norm)).collect::<Vec<_>>());
    let mean_levels = per_scale(&scales, &main.iter().map(|r| (r.eps, r.core_mean)).collect::<Vec<_>>());
    let pc_levels = per_scale(&scales, &main.iter().map(|r| (r.eps, r.poincare_ratio)).collect::<Vec<_>>());
    summary.aggregates.insert("lp_error".into(), levels_json(&err_levels));
    summary.aggregates.insert("energy_norm".into(), levels_json(&en_levels));
    summary.aggregates.insert("core_mean".into(), levels_json(&mean_levels));
    summary.aggregates.insert("poincare_ratio".into(), levels_json(&pc_levels));
    summary.aggregates.insert("k".into(), json!(k));
    summary.verdicts.insert("maximum_principle".into(), Verdict::new(max_ok, "u >= 0 for f = 1"));
    summary.verdicts.insert("energy_identity".into(), Verdict::new(id_ok, "h^3 sum |grad u|^2 = h^3 sum f u within 10 tol"));
    let t = trend(&err_levels.iter().map(|(_, s)| *s).collect::<Vec<_>>());
    summary.verdicts.insert(
        "lp_error_decreasing".into(),
        Verdict::new(matches!(t, Trend::Decreasing | Trend::InsufficientData), format!("trend from coarse to fine: {t}")),
    );
    // per seed index: the finest scale beats the coarsest
    let (coarse, fine) = extreme_indices(&scales);
    let wins = paired.values().filter(|m| matches!((m.get(&fine), m.get(&coarse)), (Some(f), Some(c)) if f < c)).count();
    if coarse != fine {
        let need = (7 * config.n_seeds).div_ceil(10);
        summary.verdicts.insert(
            "lp_error_seedwise".into(),
            Verdict::new(wins >= need, format!("finest beats coarsest in {wins} of {} seeds (need {need})", config.n_seeds)),
        );
    }
    let hi = en_levels.iter().map(|(_, s)| s.mean).fold(f64::MIN, f64::max);
    let lo = en_levels.iter().map(|(_, s)| s.mean).fold(f64::MAX, f64::min);
    summary.verdicts.insert(
        "energy_bounded".into(),
        Verdict::new(en_levels.len() < 2 || (lo > 0.0 && hi / lo < 3.0), format!("energy norm max/min {}", hi / lo)),
    );
    if let Some((_, fine)) = mean_levels.last() {
        let rel = (fine.mean - k).abs() / k;
        summary.verdicts.insert(
            "darcy_plateau".into(),
            Verdict::new(rel < 0.3, format!("core mean {} at the finest scale vs k = {k} (relative gap {rel})", fine.mean)),
        );
    }
    write_tables(&mut summary, out, &[table])?;
    Ok(summary)
}

/// Indices of the largest and the smallest scale.
fn extreme_indices(scales: &[f64]) -> (usize, usize) {
    let by = |better: fn(f64, f64) -> bool| {
        (0..scales.len()).fold(0, |best, i| if better(scales[i], scales[best]) { i } else { best })
    };
    (by(|a, b| a > b), by(|a, b| a < b))
}

/// Per-column trends of one or more CSV tables sharing a header.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateReport {
    pub scale_column: String,
    pub columns: BTreeMap<String, ColumnTrend>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ColumnTrend {
    /// `(eps, summary)` from coarse to fine.
    pub levels: Vec<(f64, Summary)>,
    pub trend: Trend,
    /// Least-squares slope of `ln mean` against `ln eps` and its error.
    pub slope: Option<(f64, f64)>,
}

/// Reads CSV files with identical headers, groups rows by the scale
/// column (`eps`, else `eps_j`) and reports per-column trends.
pub fn aggregate(paths: &[PathBuf]) -> Result<AggregateReport, HarnessError> {
    let mut header: Option<Vec<String>> = None;
    let mut records: Vec<Vec<String>> = Vec::new();
    for path in paths {
        let name = path.display().to_string();
        let csv_err = |source| HarnessError::Csv { path: name.clone(), source };
        let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
        let h: Vec<String> = r.headers().map_err(csv_err)?.iter().map(String::from).collect();
        match &header {
            None => header = Some(h),
            Some(prev) if *prev != h => {
                return Err(HarnessError::SchemaMismatch { path: name, msg: format!("header {h:?} differs from {prev:?}") })
            }
            _ => {}
        }
        for rec in r.records() {
            records.push(rec.map_err(csv_err)?.iter().map(String::from).collect());
        }
    }
    aggregate_records(&header.unwrap_or_default(), &records)
}

/// [`aggregate`] over parsed rows.
pub fn aggregate_records(header: &[String], records: &[Vec<String>]) -> Result<AggregateReport, HarnessError> {
    let scale_idx = header
        .iter()
        .position(|h| h == "eps")
        .or_else(|| header.iter().position(|h| h == "eps_j"))
        .ok_or_else(|| HarnessError::SchemaMismatch { path: "<input>".into(), msg: "no eps or eps_j column".into() })?;
    let scale_column = header[scale_idx].clone();
    let mut scales = Vec::new();
    let mut numeric: Vec<Option<Vec<f64>>> = vec![Some(Vec::new()); header.len()];
    for (no, rec) in records.iter().enumerate() {
        if rec.len() != header.len() {
            return Err(HarnessError::SchemaMismatch { path: "<input>".into(), msg: format!("row {} has {} fields", no + 1, rec.len()) });
        }
        let e: f64 = rec[scale_idx]
            .parse()
            .map_err(|_| HarnessError::SchemaMismatch { path: "<input>".into(), msg: format!("row {}: bad scale", no + 1) })?;
        scales.push(e);
        for (c, v) in rec.iter().enumerate() {
            if let Some(col) = numeric[c].as_mut() {
                match v.parse::<f64>() {
                    Ok(x) => col.push(x),
                    Err(_) => numeric[c] = None,
                }
            }
        }
    }
    let mut columns = BTreeMap::new();
    for (c, col) in numeric.into_iter().enumerate() {
        let Some(values) = col else { continue };
        if c == scale_idx || ["seed", "j", "alpha", "p", "h", "gamma", "kappa"].contains(&header[c].as_str()) {
            continue;
        }
        let pairs: Vec<(f64, f64)> = scales.iter().copied().zip(values).collect();
        let levels = per_scale(&scales, &pairs);
        let summaries: Vec<Summary> = levels.iter().map(|(_, s)| *s).collect();
        let t = if records.len() < 2 { Trend::InsufficientData } else { trend(&summaries) };
        let (xs, ys): (Vec<f64>, Vec<f64>) = levels.iter().map(|(e, s)| (*e, s.mean)).unzip();
        columns.insert(header[c].clone(), ColumnTrend { levels, trend: t, slope: log_log_slope(&xs, &ys) });
    }
    Ok(AggregateReport { scale_column, columns })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(mean: f64, stderr: f64) -> Summary {
        Summary { n: 10, mean, stderr }
    }

    #[test]
    fn parse_defaults_and_overrides() {
        let c = ExperimentConfig::parse("# comment\neps = 0.2, 0.1\nlaw = pareto:3 # trailing\nn_seeds=4\n", Some(Experiment::Sample)).unwrap();
        assert_eq!(c.eps, vec![0.2, 0.1]);
        assert_eq!(c.law, RadiiLaw::ParetoShifted(3.0));
        assert_eq!(c.n_seeds, 4);
        assert_eq!(c.alpha, 1.5);
        let c = ExperimentConfig::parse("experiment = coverage\nlevels = 3,4,5\nlaw = pareto:2", None).unwrap();
        assert_eq!(c.experiment, Experiment::Coverage);
        assert_eq!(c.scales(), vec![0.125, 0.0625, 0.03125]);
    }

    #[test]
    fn invalid_configs_name_the_field() {
        let field = |text: &str| match ExperimentConfig::parse(text, Some(Experiment::Sample)) {
            Err(HarnessError::ConfigInvalid { field, .. }) => field,
            other => panic!("expected ConfigInvalid, got {other:?}"),
        };
        assert_eq!(field("alpha = 3"), "alpha");
        assert_eq!(field("eps = 0.1, 1.5"), "eps");
        assert_eq!(field("n_seeds = 0"), "n_seeds");
        assert_eq!(field("colour = red"), "colour");
        assert_eq!(field("alpha = 2\nalpha = 2"), "alpha");
        assert_eq!(field("gamma = 0.9"), "gamma");
        assert_eq!(field("p = 2"), "p");
        assert_eq!(field("experiment = solve"), "experiment");
        assert_eq!(field("law = pareto:0"), "law");
        assert_eq!(field("eps = 0.001\ncount_cap = 1000"), "eps");
        assert!(matches!(ExperimentConfig::parse("", None), Err(HarnessError::ConfigInvalid { .. })));
    }

    #[test]
    fn echo_round_trips_through_the_parser() {
        let c = ExperimentConfig::parse("eps = 0.3,0.2\nbeta = 0.25\nmode = stokes\nk = 3", Some(Experiment::Discrepancy)).unwrap();
        let text: String = c.echo().iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
        assert_eq!(ExperimentConfig::parse(&text, None).unwrap(), c);
    }

    #[test]
    fn trend_classification() {
        assert_eq!(trend(&[s(1.0, 0.0)]), Trend::InsufficientData);
        assert_eq!(trend(&[s(3.0, 0.01), s(2.0, 0.01), s(1.0, 0.01)]), Trend::Decreasing);
        assert_eq!(trend(&[s(1.0, 0.01), s(2.0, 0.01)]), Trend::Increasing);
        assert_eq!(trend(&[s(1.0, 1.0), s(1.1, 1.0)]), Trend::Flat);
        assert_eq!(trend(&[s(1.0, 0.01), s(2.0, 0.01), s(1.0, 0.01)]), Trend::NonMonotone);
    }

    #[test]
    fn aggregate_verdicts_and_slope() {
        let header: Vec<String> = ["eps", "seed", "y"].iter().map(|s| s.to_string()).collect();
        let one = vec![vec!["0.1".to_string(), "1".to_string(), "2".to_string()]];
        let r = aggregate_records(&header, &one).unwrap();
        assert_eq!(r.columns["y"].trend, Trend::InsufficientData);

        let mut rows = Vec::new();
        for e in [0.4, 0.2, 0.1, 0.05] {
            for seed in 0..3 {
                let y = f64::powf(e, 0.5) * (1.0 + 1e-4 * seed as f64);
                rows.push(vec![fmt_f(e), seed.to_string(), fmt_f(y)]);
            }
        }
        let r = aggregate_records(&header, &rows).unwrap();
        assert_eq!(r.columns["y"].trend, Trend::Decreasing);
        let (slope, _) = r.columns["y"].slope.unwrap();
        assert!((slope - 0.5).abs() < 0.05);
        assert!(!r.columns.contains_key("seed"));
        let bad = vec![vec!["0.1".to_string()]];
        assert!(matches!(aggregate_records(&header, &bad), Err(HarnessError::SchemaMismatch { .. })));
    }

    #[test]
    fn aggregate_rejects_mixed_headers() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.csv");
        let b = dir.path().join("b.csv");
        std::fs::write(&a, "eps,y\n0.1,1\n").unwrap();
        std::fs::write(&b, "eps,z\n0.1,1\n").unwrap();
        assert!(matches!(aggregate(&[a.clone(), b]), Err(HarnessError::SchemaMismatch { .. })));
        assert_eq!(aggregate(&[a]).unwrap().scale_column, "eps");
    }

    #[test]
    fn sample_run_writes_round_tripping_dumps() {
        let dir = tempfile::tempdir().unwrap();
        let c = ExperimentConfig::parse("eps = 0.2\nn_seeds = 1", Some(Experiment::Sample)).unwrap();
        let s = run(&c, dir.path()).unwrap();
        assert!(s.failures.is_empty());
        assert!(s.verdicts["dump_round_trip"].pass);
        let name = s.cells[0]["dump"].as_str().unwrap();
        let real = Realization::from_dump(&std::fs::read_to_string(dir.path().join(name)).unwrap()).unwrap();
        assert_eq!(real.params.eps, 0.2);
        let json: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
        for key in ["config", "cells", "aggregates", "verdicts", "failures"] {
            assert!(json.get(key).is_some(), "summary lacks {key}");
        }
    }

    #[test]
    fn discrepancy_smoke_matches_the_measure_target() {
        let dir = tempfile::tempdir().unwrap();
        let c = ExperimentConfig::parse("eps = 0.2, 0.1\nn_seeds = 2\nalpha = 2.5", Some(Experiment::Discrepancy)).unwrap();
        let s = run(&c, dir.path()).unwrap();
        assert!(s.failures.is_empty());
        let target = 4.0 * PI * Bump::standard().integral();
        assert!((s.aggregates["target"].as_f64().unwrap() - target).abs() < 1e-12 * target);
        assert!(s.cells.iter().all(|c| c["pairing"].as_f64().unwrap() >= 0.0));
        assert!(s.verdicts.contains_key("relative_error_decreasing"));
        let text = std::fs::read_to_string(dir.path().join("discrepancy.csv")).unwrap();
        assert_eq!(text.lines().count(), 5);
    }

    #[test]
    fn reruns_are_byte_identical() {
        let c = ExperimentConfig::parse("eps = 0.2, 0.15\nn_seeds = 3", Some(Experiment::Partition)).unwrap();
        let read = |d: &Path| std::fs::read(d.join("partition.csv")).unwrap();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        run(&c, a.path()).unwrap();
        rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(|| run(&c, b.path()).unwrap());
        assert_eq!(read(a.path()), read(b.path()));
    }

    #[test]
    fn failing_cells_are_isolated() {
        // 3h = 0.047 sits between the hole radii 0.2^2.5 = 0.018 and 0.3^2.5 = 0.049
        let dir = tempfile::tempdir().unwrap();
        let c = ExperimentConfig::parse("eps = 0.3, 0.2\nalpha = 2.5\nn_seeds = 2\nh = 0.015625\ntol = 1e-6", Some(Experiment::Solve))
            .unwrap();
        let s = run(&c, dir.path()).unwrap();
        assert_eq!(s.failures.len(), 2);
        assert!(s.failures.iter().all(|f| f.cell.starts_with("eps=0.2 ")));
        assert_eq!(s.cells.len(), 2);
        assert!(!s.passed());
    }

    #[test]
    fn float_format_round_trips() {
        for v in [0.1, 1.0 / 3.0, 1e-300, 12.566370614359172, 2.0] {
            assert_eq!(fmt_f(v).parse::<f64>().unwrap(), v);
        }
        assert_eq!(fmt_f(0.1), "0.1");
    }
}
