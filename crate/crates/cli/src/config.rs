//! Scenario configuration: schema checks, defaults and typed form.
//!
//! Validation walks the raw JSON and collects every violation with a JSON
//! pointer to the offending field. Defaults are then written into the raw
//! document, recorded, and the result is deserialized into
//! [`ScenarioConfig`], whose fields are all explicit.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use polychaos::multibasis::basis_size;
use polychaos::MeasureDescriptor;

use crate::expr;

pub const SCHEMA_VERSION: u64 = 1;
pub const DEFAULT_DEGREE: usize = 3;
pub const DEFAULT_MC_SAMPLES: usize = 100_000;
pub const MAX_DEGREE: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Propagate,
    Smpc,
    Estimate,
    Compare,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Propagate => "propagate",
            Mode::Smpc => "smpc",
            Mode::Estimate => "estimate",
            Mode::Compare => "compare",
        }
    }
}

/// A matrix entry: a constant or a polynomial in `t0, t1, …`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Entry {
    Number(f64),
    Expr(String),
}

impl Entry {
    pub fn parse(&self) -> Result<expr::Expr, expr::ParseError> {
        match self {
            Entry::Number(v) => Ok(expr::Expr::Const(*v)),
            Entry::Expr(s) => expr::parse(s),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSpec {
    pub n_x: usize,
    pub n_u: usize,
    pub a: Vec<Vec<Entry>>,
    pub b: Vec<Vec<Entry>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum PropagateSpec {
    /// `x_{k+1} = A(θ)x_k + B(θ)u_k` from a deterministic `x0`.
    Linear {
        x0: Vec<f64>,
        steps: usize,
        /// One input per step; empty means zero inputs.
        inputs: Vec<Vec<f64>>,
    },
    /// `dy/dt = −rate(θ)·y`.
    Decay {
        rate: Entry,
        y0: Vec<f64>,
        times: Vec<f64>,
        dt: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    OpenLoop,
    Prestabilized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxSpec {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolytopeSpec {
    pub g: Vec<Vec<f64>>,
    pub d: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSpec {
    pub tol: f64,
    pub max_iter: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmpcSpec {
    pub horizon: usize,
    pub steps: usize,
    pub runs: usize,
    pub x0: Vec<f64>,
    pub q: Vec<Vec<f64>>,
    pub r: Vec<Vec<f64>>,
    /// Absent: Riccati solution of the mean system.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub terminal: Option<Vec<Vec<f64>>>,
    pub policy: PolicyKind,
    /// Absent under `prestabilized`: LQR gain of the mean system.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gain: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_box: Option<BoxSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state_constraints: Option<PolytopeSpec>,
    pub solver: SolverSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChanceConfig {
    pub beta: f64,
    /// Absent: uniform Boole split.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub allocation: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateSpec {
    pub forward: Entry,
    pub noise_std: f64,
    /// Explicit measurements; otherwise synthesized from `truth`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub measurements: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    pub samples: usize,
    pub moments: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub version: u64,
    pub mode: Mode,
    pub degree: usize,
    pub mc_samples: usize,
    pub seed: u64,
    pub output_dir: String,
    pub parameters: Vec<MeasureDescriptor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system: Option<SystemSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub propagate: Option<PropagateSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub smpc: Option<SmpcSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chance: Option<ChanceConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub estimate: Option<EstimateSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub pointer: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: {}",
            if self.pointer.is_empty() { "/" } else { &self.pointer },
            self.message
        )
    }
}

/// A default that was filled in, echoed into run summaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppliedDefault {
    pub pointer: String,
    pub value: Value,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ConfigError {
    Read { path: String, message: String },
    Json(String),
    Schema(Vec<Violation>),
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Read { path, message } => write!(f, "cannot read {path}: {message}"),
            ConfigError::Json(m) => write!(f, "invalid JSON: {m}"),
            ConfigError::Schema(v) => {
                write!(f, "{} schema violation(s)", v.len())?;
                for x in v {
                    write!(f, "\n  {x}")?;
                }
                Ok(())
            }
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedConfig {
    pub config: ScenarioConfig,
    pub defaults: Vec<AppliedDefault>,
}

pub fn parse_config(path: &Path) -> Result<ParsedConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_config_str(&text)
}

pub fn parse_config_str(text: &str) -> Result<ParsedConfig, ConfigError> {
    let raw: Value = serde_json::from_str(text).map_err(|e| ConfigError::Json(e.to_string()))?;
    parse_config_value(raw)
}

pub fn parse_config_value(mut raw: Value) -> Result<ParsedConfig, ConfigError> {
    let mut c = Checker::default();
    c.root(&mut raw);
    if !c.violations.is_empty() {
        return Err(ConfigError::Schema(c.violations));
    }
    let config: ScenarioConfig = serde_path_to_error::deserialize(raw).map_err(|e| {
        let pointer = e
            .path()
            .iter()
            .map(|s| match s {
                serde_path_to_error::Segment::Seq { index } => format!("/{index}"),
                serde_path_to_error::Segment::Map { key } => format!("/{key}"),
                _ => String::new(),
            })
            .collect::<String>();
        ConfigError::Schema(vec![Violation {
            pointer,
            message: e.into_inner().to_string(),
        }])
    })?;
    Ok(ParsedConfig {
        config,
        defaults: c.defaults,
    })
}

impl ScenarioConfig {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[derive(Default)]
struct Checker {
    violations: Vec<Violation>,
    defaults: Vec<AppliedDefault>,
}

fn ptr(base: &str, key: &str) -> String {
    format!("{base}/{}", key.replace('~', "~0").replace('/', "~1"))
}

impl Checker {
    fn push(&mut self, pointer: impl Into<String>, message: impl Into<String>) {
        self.violations.push(Violation {
            pointer: pointer.into(),
            message: message.into(),
        });
    }

    fn fill(&mut self, map: &mut Map<String, Value>, base: &str, key: &str, value: Value) {
        if !map.contains_key(key) {
            self.defaults.push(AppliedDefault {
                pointer: ptr(base, key),
                value: value.clone(),
            });
            map.insert(key.to_string(), value);
        }
    }

    fn known_keys(&mut self, map: &Map<String, Value>, base: &str, allowed: &[&str]) {
        for k in map.keys() {
            if !allowed.contains(&k.as_str()) {
                self.push(
                    ptr(base, k),
                    format!("unknown field; expected one of {}", allowed.join(", ")),
                );
            }
        }
    }

    fn missing(&mut self, map: &Map<String, Value>, base: &str, key: &str) -> bool {
        if map.contains_key(key) {
            false
        } else {
            self.push(ptr(base, key), "required field is missing");
            true
        }
    }

    fn number(&mut self, map: &Map<String, Value>, base: &str, key: &str) -> Option<f64> {
        if self.missing(map, base, key) {
            return None;
        }
        self.number_at(&map[key], &ptr(base, key))
    }

    fn number_at(&mut self, v: &Value, p: &str) -> Option<f64> {
        match v.as_f64() {
            Some(x) if x.is_finite() => Some(x),
            _ => {
                self.push(p, "expected a finite number");
                None
            }
        }
    }

    fn uint(&mut self, map: &Map<String, Value>, base: &str, key: &str, min: u64, max: u64) -> Option<u64> {
        if self.missing(map, base, key) {
            return None;
        }
        let p = ptr(base, key);
        match map[key].as_u64() {
            Some(x) if (min..=max).contains(&x) => Some(x),
            Some(x) => {
                self.push(p, format!("{x} out of range [{min}, {max}]"));
                None
            }
            None => {
                self.push(p, "expected a nonnegative integer");
                None
            }
        }
    }

    fn object<'v>(&mut self, v: &'v mut Value, p: &str) -> Option<&'v mut Map<String, Value>> {
        match v {
            Value::Object(m) => Some(m),
            _ => {
                self.push(p, "expected an object");
                None
            }
        }
    }

    fn vector(&mut self, map: &Map<String, Value>, base: &str, key: &str, len: Option<usize>) -> Option<Vec<f64>> {
        if self.missing(map, base, key) {
            return None;
        }
        self.vector_at(&map[key], &ptr(base, key), len)
    }

    fn vector_at(&mut self, v: &Value, p: &str, len: Option<usize>) -> Option<Vec<f64>> {
        let Some(arr) = v.as_array() else {
            self.push(p, "expected an array of numbers");
            return None;
        };
        if let Some(n) = len {
            if arr.len() != n {
                self.push(p, format!("expected length {n}, found {}", arr.len()));
                return None;
            }
        }
        let mut out = Vec::with_capacity(arr.len());
        let mut ok = true;
        for (i, x) in arr.iter().enumerate() {
            match self.number_at(x, &format!("{p}/{i}")) {
                Some(x) => out.push(x),
                None => ok = false,
            }
        }
        ok.then_some(out)
    }

    fn matrix(
        &mut self,
        map: &Map<String, Value>,
        base: &str,
        key: &str,
        rows: Option<usize>,
        cols: Option<usize>,
    ) -> Option<Vec<Vec<f64>>> {
        if self.missing(map, base, key) {
            return None;
        }
        let p = ptr(base, key);
        let Some(arr) = map[key].as_array() else {
            self.push(p, "expected an array of rows");
            return None;
        };
        if let Some(n) = rows {
            if arr.len() != n {
                self.push(p, format!("expected {n} rows, found {}", arr.len()));
                return None;
            }
        }
        if arr.is_empty() {
            self.push(p, "matrix must have at least one row");
            return None;
        }
        let width = cols.or_else(|| arr[0].as_array().map(|r| r.len()));
        let mut out = Vec::with_capacity(arr.len());
        let mut ok = true;
        for (i, row) in arr.iter().enumerate() {
            match self.vector_at(row, &format!("{p}/{i}"), width) {
                Some(r) => out.push(r),
                None => ok = false,
            }
        }
        ok.then_some(out)
    }

    fn psd(&mut self, m: &[Vec<f64>], p: &str, strict: bool) {
        let n = m.len();
        let mat = nalgebra::DMatrix::from_fn(n, n, |i, j| m[i][j]);
        let scale = mat.amax().max(1.0);
        if (&mat - mat.transpose()).amax() > 1e-12 * scale {
            self.push(p, "matrix must be symmetric");
            return;
        }
        let min = mat.symmetric_eigen().eigenvalues.min();
        if strict && min <= 0.0 {
            self.push(p, format!("matrix must be positive definite (min eigenvalue {min:e})"));
        } else if !strict && min < -1e-12 * scale {
            self.push(
                p,
                format!("matrix must be positive semidefinite (min eigenvalue {min:e})"),
            );
        }
    }

    fn entry(&mut self, v: &Value, p: &str, n_params: usize, degree: usize) {
        let e = match v {
            Value::Number(_) => {
                self.number_at(v, p);
                return;
            }
            Value::String(s) => match expr::parse(s) {
                Ok(e) => e,
                Err(err) => {
                    self.push(p, format!("invalid expression: {err}"));
                    return;
                }
            },
            _ => {
                self.push(p, "expected a number or a polynomial expression in t0, t1, …");
                return;
            }
        };
        if let Some(k) = e.max_var() {
            if k >= n_params {
                self.push(
                    p,
                    format!("parameter t{k} does not exist ({n_params} parameter(s) declared)"),
                );
            }
        }
        if e.degree() > degree {
            self.push(
                p,
                format!("expression degree {} exceeds basis degree {degree}", e.degree()),
            );
        }
    }

    fn root(&mut self, raw: &mut Value) {
        let Some(map) = self.object(raw, "") else { return };
        self.known_keys(
            map,
            "",
            &[
                "version",
                "mode",
                "degree",
                "mc_samples",
                "seed",
                "output_dir",
                "parameters",
                "system",
                "propagate",
                "smpc",
                "chance",
                "estimate",
            ],
        );
        if let Some(v) = self.uint(map, "", "version", 0, u64::MAX) {
            if v != SCHEMA_VERSION {
                self.push(
                    "/version",
                    format!("unsupported schema version {v}; expected {SCHEMA_VERSION}"),
                );
            }
        }
        let mode = if self.missing(map, "", "mode") {
            None
        } else {
            match serde_json::from_value::<Mode>(map["mode"].clone()) {
                Ok(m) => Some(m),
                Err(_) => {
                    self.push("/mode", "expected one of propagate, smpc, estimate, compare");
                    None
                }
            }
        };
        self.fill(map, "", "degree", Value::from(DEFAULT_DEGREE));
        self.fill(map, "", "mc_samples", Value::from(DEFAULT_MC_SAMPLES));
        self.fill(map, "", "seed", Value::from(0u64));
        self.fill(map, "", "output_dir", Value::from("out"));
        let degree = self.uint(map, "", "degree", 0, MAX_DEGREE as u64).map(|d| d as usize);
        self.uint(map, "", "mc_samples", 2, u64::MAX);
        self.uint(map, "", "seed", 0, u64::MAX);
        if !map["output_dir"].is_string() {
            self.push("/output_dir", "expected a string");
        }
        let n_params = self.parameters(map);
        if let (Some(n), Some(d)) = (n_params, degree) {
            if basis_size(n, d).is_err() {
                self.push(
                    "/degree",
                    format!("basis for {n} parameters at degree {d} is too large"),
                );
            }
        }
        let (n_params, degree) = (n_params.unwrap_or(0), degree.unwrap_or(DEFAULT_DEGREE));

        let dims = if let Some(sys) = map.get_mut("system") {
            self.system(sys, n_params, degree)
        } else {
            None
        };
        let needs_system = matches!(mode, Some(Mode::Smpc))
            || (matches!(mode, Some(Mode::Propagate | Mode::Compare))
                && map
                    .get("propagate")
                    .and_then(|p| p.get("model"))
                    .and_then(Value::as_str)
                    == Some("linear"));
        if needs_system && !map.contains_key("system") {
            self.push(
                "/system",
                format!("required in {} mode", mode.map_or("this", |m| m.as_str())),
            );
        }

        let section_for = |m: Mode| match m {
            Mode::Propagate | Mode::Compare => "propagate",
            Mode::Smpc => "smpc",
            Mode::Estimate => "estimate",
        };
        if let Some(m) = mode {
            let s = section_for(m);
            if !map.contains_key(s) {
                self.push(ptr("", s), format!("required in {} mode", m.as_str()));
            }
        }
        if let Some(p) = map.get_mut("propagate") {
            self.propagate(p, dims, n_params, degree);
        }
        let mut n_rows = None;
        if let Some(s) = map.get_mut("smpc") {
            n_rows = self.smpc(s, dims);
        }
        match map.get_mut("chance") {
            Some(c) => self.chance(c, n_rows),
            None if n_rows.is_some() => self.push("/chance", "required when state constraints are given"),
            None => {}
        }
        if let Some(e) = map.get_mut("estimate") {
            self.estimate(e, n_params, degree);
        }
    }

    fn parameters(&mut self, map: &Map<String, Value>) -> Option<usize> {
        if self.missing(map, "", "parameters") {
            return None;
        }
        let Some(arr) = map["parameters"].as_array() else {
            self.push("/parameters", "expected an array of measure descriptors");
            return None;
        };
        if arr.is_empty() {
            self.push("/parameters", "at least one parameter is required");
            return None;
        }
        let before = self.violations.len();
        for (i, m) in arr.iter().enumerate() {
            let p = format!("/parameters/{i}");
            let Some(obj) = m.as_object() else {
                self.push(p, "expected an object with a 'kind'");
                continue;
            };
            let kind = obj.get("kind").and_then(Value::as_str);
            let fields: &[&str] = match kind {
                Some("gaussian") => &["mean", "stddev"],
                Some("uniform") => &["lo", "hi"],
                Some("gamma") => &["shape"],
                Some("beta") => &["p", "q"],
                _ => {
                    self.push(format!("{p}/kind"), "expected one of gaussian, uniform, gamma, beta");
                    continue;
                }
            };
            let mut allowed = vec!["kind"];
            allowed.extend_from_slice(fields);
            self.known_keys(obj, &p, &allowed);
            let vals: Vec<Option<f64>> = fields.iter().map(|f| self.number(obj, &p, f)).collect();
            match (kind, vals.as_slice()) {
                (Some("gaussian"), [_, Some(s)]) if *s <= 0.0 => self.push(format!("{p}/stddev"), "must be > 0"),
                (Some("uniform"), [Some(lo), Some(hi)]) if lo >= hi => self.push(format!("{p}/hi"), "must exceed lo"),
                (Some("gamma"), [Some(k)]) if *k <= 0.0 => self.push(format!("{p}/shape"), "must be > 0"),
                (Some("beta"), [a, b]) => {
                    for (name, v) in [("p", a), ("q", b)] {
                        if v.is_some_and(|v| v <= 0.0) {
                            self.push(format!("{p}/{name}"), "must be > 0");
                        }
                    }
                }
                _ => {}
            }
        }
        (self.violations.len() == before).then_some(arr.len())
    }

    fn system(&mut self, v: &mut Value, n_params: usize, degree: usize) -> Option<(usize, usize)> {
        let map = self.object(v, "/system")?;
        self.known_keys(map, "/system", &["n_x", "n_u", "a", "b"]);
        let n_x = self.uint(map, "/system", "n_x", 1, 1000).map(|v| v as usize);
        let n_u = self.uint(map, "/system", "n_u", 1, 1000).map(|v| v as usize);
        for (key, cols) in [("a", n_x), ("b", n_u)] {
            if self.missing(map, "/system", key) {
                continue;
            }
            let p = ptr("/system", key);
            let Some(rows) = map[key].as_array() else {
                self.push(p, "expected an array of rows");
                continue;
            };
            if let Some(n) = n_x {
                if rows.len() != n {
                    self.push(&p, format!("expected {n} rows, found {}", rows.len()));
                    continue;
                }
            }
            for (i, row) in rows.iter().enumerate() {
                let rp = format!("{p}/{i}");
                let Some(row) = row.as_array() else {
                    self.push(rp, "expected an array");
                    continue;
                };
                if let Some(c) = cols {
                    if row.len() != c {
                        self.push(&rp, format!("expected {c} columns, found {}", row.len()));
                        continue;
                    }
                }
                for (j, e) in row.iter().enumerate() {
                    self.entry(e, &format!("{rp}/{j}"), n_params, degree);
                }
            }
        }
        Some((n_x?, n_u?))
    }

    fn propagate(&mut self, v: &mut Value, dims: Option<(usize, usize)>, n_params: usize, degree: usize) {
        let Some(map) = self.object(v, "/propagate") else {
            return;
        };
        let base = "/propagate";
        match map.get("model").and_then(Value::as_str) {
            Some("linear") => {
                self.known_keys(map, base, &["model", "x0", "steps", "inputs"]);
                self.fill(map, base, "inputs", Value::Array(vec![]));
                let steps = self.uint(map, base, "steps", 1, 100_000).map(|s| s as usize);
                self.vector(map, base, "x0", dims.map(|d| d.0));
                let inputs = map["inputs"].as_array().cloned();
                match inputs {
                    None => self.push("/propagate/inputs", "expected an array of input vectors"),
                    Some(list) if !list.is_empty() => {
                        if let Some(s) = steps {
                            if list.len() != s {
                                self.push("/propagate/inputs", format!("expected {s} inputs (one per step)"));
                            }
                        }
                        for (i, u) in list.iter().enumerate() {
                            self.vector_at(u, &format!("/propagate/inputs/{i}"), dims.map(|d| d.1));
                        }
                    }
                    Some(_) => {}
                }
            }
            Some("decay") => {
                self.known_keys(map, base, &["model", "rate", "y0", "times", "dt"]);
                self.fill(map, base, "dt", Value::from(polychaos::propagate::DEFAULT_DT));
                if !self.missing(map, base, "rate") {
                    let r = map["rate"].clone();
                    self.entry(&r, "/propagate/rate", n_params, degree);
                }
                if let Some(y0) = self.vector(map, base, "y0", None) {
                    if y0.is_empty() {
                        self.push("/propagate/y0", "at least one initial value is required");
                    }
                }
                if let Some(dt) = self.number(map, base, "dt") {
                    if dt <= 0.0 {
                        self.push("/propagate/dt", "must be > 0");
                    }
                }
                if let Some(t) = self.vector(map, base, "times", None) {
                    if t.is_empty() || t[0] < 0.0 || t.windows(2).any(|w| w[1] < w[0]) {
                        self.push(
                            "/propagate/times",
                            "expected a nonempty nondecreasing list of times ≥ 0",
                        );
                    }
                }
            }
            _ => self.push("/propagate/model", "expected 'linear' or 'decay'"),
        }
    }

    /// Returns the number of polytope rows if state constraints are present.
    fn smpc(&mut self, v: &mut Value, dims: Option<(usize, usize)>) -> Option<usize> {
        let map = self.object(v, "/smpc")?;
        let base = "/smpc";
        self.known_keys(
            map,
            base,
            &[
                "horizon",
                "steps",
                "runs",
                "x0",
                "q",
                "r",
                "terminal",
                "policy",
                "gain",
                "input_box",
                "state_constraints",
                "solver",
            ],
        );
        self.fill(map, base, "runs", Value::from(1u64));
        self.fill(map, base, "policy", Value::from("prestabilized"));
        let solver = map.entry("solver").or_insert_with(|| Value::Object(Map::new()));
        let solver_defaults = [("tol", Value::from(1e-8)), ("max_iter", Value::from(50_000u64))];
        if let Value::Object(s) = solver {
            let mut s = std::mem::take(s);
            for (k, d) in solver_defaults {
                self.fill(&mut s, "/smpc/solver", k, d);
            }
            self.known_keys(&s, "/smpc/solver", &["tol", "max_iter"]);
            if let Some(t) = self.number(&s, "/smpc/solver", "tol") {
                if t <= 0.0 {
                    self.push("/smpc/solver/tol", "must be > 0");
                }
            }
            self.uint(&s, "/smpc/solver", "max_iter", 1, 10_000_000);
            map.insert("solver".into(), Value::Object(s));
        } else {
            self.push("/smpc/solver", "expected an object");
        }

        self.uint(map, base, "horizon", 1, 1000);
        self.uint(map, base, "steps", 1, 100_000);
        self.uint(map, base, "runs", 1, 1_000_000);
        let (n_x, n_u) = (dims.map(|d| d.0), dims.map(|d| d.1));
        self.vector(map, base, "x0", n_x);
        if let Some(q) = self.matrix(map, base, "q", n_x, n_x) {
            self.psd(&q, "/smpc/q", false);
        }
        if let Some(r) = self.matrix(map, base, "r", n_u, n_u) {
            self.psd(&r, "/smpc/r", true);
        }
        if map.contains_key("terminal") {
            if let Some(p) = self.matrix(map, base, "terminal", n_x, n_x) {
                self.psd(&p, "/smpc/terminal", false);
            }
        }
        match map["policy"].as_str() {
            Some("open_loop") => {
                if map.contains_key("gain") {
                    self.push("/smpc/gain", "a gain is only used by the prestabilized policy");
                }
            }
            Some("prestabilized") => {
                if map.contains_key("gain") {
                    self.matrix(map, base, "gain", n_u, n_x);
                }
            }
            _ => self.push("/smpc/policy", "expected 'open_loop' or 'prestabilized'"),
        }
        if let Some(b) = map.get_mut("input_box") {
            if let Some(bm) = self.object(b, "/smpc/input_box") {
                let bm = bm.clone();
                self.known_keys(&bm, "/smpc/input_box", &["lower", "upper"]);
                let lo = self.vector(&bm, "/smpc/input_box", "lower", n_u);
                let hi = self.vector(&bm, "/smpc/input_box", "upper", n_u);
                if let (Some(lo), Some(hi)) = (lo, hi) {
                    if lo.iter().zip(&hi).any(|(l, h)| l > h) {
                        self.push("/smpc/input_box", "lower bound exceeds upper bound");
                    }
                }
            }
        }
        let mut rows = None;
        if let Some(sc) = map.get_mut("state_constraints") {
            if let Some(sm) = self.object(sc, "/smpc/state_constraints") {
                let sm = sm.clone();
                let base = "/smpc/state_constraints";
                self.known_keys(&sm, base, &["g", "d"]);
                if let Some(g) = self.matrix(&sm, base, "g", None, n_x) {
                    for (i, row) in g.iter().enumerate() {
                        if row.iter().all(|v| *v == 0.0) {
                            self.push(format!("{base}/g/{i}"), "constraint row is all zeros");
                        }
                    }
                    self.vector(&sm, base, "d", Some(g.len()));
                    rows = Some(g.len());
                }
            }
        }
        rows
    }

    fn chance(&mut self, v: &mut Value, n_rows: Option<usize>) {
        let Some(map) = self.object(v, "/chance") else { return };
        self.known_keys(map, "/chance", &["beta", "allocation"]);
        let beta = self.number(map, "/chance", "beta");
        if let Some(b) = beta {
            if !(b > 0.0 && b < 1.0) {
                self.push("/chance/beta", format!("{b} out of range: beta must lie in (0, 1)"));
            }
        }
        if map.contains_key("allocation") {
            if let Some(a) = self.vector(map, "/chance", "allocation", n_rows) {
                if a.iter().any(|e| *e <= 0.0) {
                    self.push("/chance/allocation", "violation budgets must be > 0");
                }
                if let Some(b) = beta {
                    let total: f64 = a.iter().sum();
                    if (total - (1.0 - b)).abs() > 1e-12 {
                        self.push(
                            "/chance/allocation",
                            format!("budgets sum to {total}, expected 1 − beta = {}", 1.0 - b),
                        );
                    }
                }
            }
        }
    }

    fn estimate(&mut self, v: &mut Value, n_params: usize, degree: usize) {
        let Some(map) = self.object(v, "/estimate") else { return };
        let base = "/estimate";
        self.known_keys(
            map,
            base,
            &[
                "forward",
                "noise_std",
                "measurements",
                "truth",
                "steps",
                "samples",
                "moments",
            ],
        );
        self.fill(map, base, "forward", Value::from("t0"));
        self.fill(map, base, "samples", Value::from(10_000u64));
        self.fill(map, base, "moments", Value::from(2u64));
        if n_params > 1 {
            self.push("/parameters", "estimation supports a single scalar parameter");
        }
        // the forward map is evaluated pointwise, so any polynomial degree is fine
        let f = map["forward"].clone();
        self.entry(&f, "/estimate/forward", n_params.max(1), usize::MAX);
        if let Some(s) = self.number(map, base, "noise_std") {
            if s <= 0.0 {
                self.push("/estimate/noise_std", "must be > 0");
            }
        }
        self.uint(map, base, "samples", 100, 100_000_000);
        if let Some(m) = self.uint(map, base, "moments", 2, polychaos::estimate::MAX_MOMENTS as u64) {
            if degree > m as usize {
                self.push(
                    "/degree",
                    format!(
                        "estimation refits {} coefficients from {m} moments; degree must be ≤ {m}",
                        degree + 1
                    ),
                );
            }
        }
        match (map.contains_key("measurements"), map.contains_key("truth")) {
            (true, false) => {
                if let Some(ys) = self.vector(map, base, "measurements", None) {
                    if ys.is_empty() {
                        self.push("/estimate/measurements", "at least one measurement is required");
                    }
                }
                if map.contains_key("steps") {
                    self.push("/estimate/steps", "only used with synthetic measurements ('truth')");
                }
            }
            (false, true) => {
                self.number(map, base, "truth");
                self.uint(map, base, "steps", 1, 1_000_000);
            }
            _ => self.push(
                "/estimate",
                "give exactly one of 'measurements' or 'truth' (with 'steps')",
            ),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_propagate() -> Value {
        serde_json::json!({
            "version": 1,
            "mode": "propagate",
            "parameters": [{"kind": "uniform", "lo": 0.5, "hi": 1.5}],
            "propagate": {"model": "decay", "rate": "t0", "y0": [1.0], "times": [0.0, 1.0]}
        })
    }

    fn violations(v: Value) -> Vec<Violation> {
        match parse_config_value(v) {
            Err(ConfigError::Schema(v)) => v,
            other => panic!("expected schema violations, got {other:?}"),
        }
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let p = parse_config_value(minimal_propagate()).unwrap();
        assert_eq!(p.config.degree, 3);
        assert_eq!(p.config.mc_samples, 100_000);
        let pointers: Vec<&str> = p.defaults.iter().map(|d| d.pointer.as_str()).collect();
        assert!(pointers.contains(&"/degree"));
        assert!(pointers.contains(&"/mc_samples"));
        assert!(pointers.contains(&"/propagate/dt"));
    }

    #[test]
    fn beta_out_of_range() {
        let mut v = minimal_propagate();
        v["chance"] = serde_json::json!({"beta": 1.3});
        let errs = violations(v);
        assert!(
            errs.iter()
                .any(|e| e.pointer == "/chance/beta" && e.message.contains("range")),
            "{errs:?}"
        );
    }

    #[test]
    fn collects_all_violations() {
        let v = serde_json::json!({
            "version": 2,
            "mode": "fly",
            "degree": -1,
            "parameters": [{"kind": "gaussian", "mean": 0.0, "stddev": -1.0}],
            "bogus": true
        });
        let errs = violations(v);
        let ptrs: Vec<&str> = errs.iter().map(|e| e.pointer.as_str()).collect();
        for want in ["/version", "/mode", "/degree", "/parameters/0/stddev", "/bogus"] {
            assert!(ptrs.contains(&want), "missing {want} in {ptrs:?}");
        }
    }

    #[test]
    fn round_trip_is_identity() {
        let p = parse_config_value(minimal_propagate()).unwrap();
        let again = parse_config_str(&p.config.to_json()).unwrap();
        assert_eq!(p.config, again.config);
        assert!(again.defaults.is_empty());
    }

    #[test]
    fn expression_checks() {
        let mut v = minimal_propagate();
        v["propagate"]["rate"] = Value::from("t1 + t0^5");
        let errs = violations(v);
        assert!(errs.iter().any(|e| e.message.contains("t1 does not exist")));
        assert!(errs.iter().any(|e| e.message.contains("degree 5")));
    }

    #[test]
    fn mode_section_required() {
        let mut v = minimal_propagate();
        v["mode"] = Value::from("smpc");
        let errs = violations(v);
        let ptrs: Vec<&str> = errs.iter().map(|e| e.pointer.as_str()).collect();
        assert!(ptrs.contains(&"/smpc") && ptrs.contains(&"/system"), "{ptrs:?}");
    }
}
