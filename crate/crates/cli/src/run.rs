//! Scenario execution and output files.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::RngExt;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde_json::{json, Map, Value};

use polychaos::chance::{boole_allocate, ChanceSpec, Polytope};
use polychaos::estimate::{filter_trace_csv, run_filter, FilterConfig, LikelihoodModel};
use polychaos::propagate::{
    dirac_state, expand_linear, mc_propagate_decay, mc_propagate_linear, pce_moments_csv, sample_rng, unstack,
    GalerkinOde, McSummary, ParametricLinearSystem,
};
use polychaos::smpc::{
    lqr_gain, ClosedLoopTrace, InputBox, Policy, SmpcController, SmpcProblem, SolveStatus, SolverSettings,
};
use polychaos::{PceVector, TotalDegreeBasis};

use crate::config::{
    parse_config, ConfigError, Entry, Mode, ParsedConfig, PolicyKind, PropagateSpec, ScenarioConfig, SystemSpec,
};
use crate::expr;

/// Process exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitKind {
    Success = 0,
    Error = 1,
    Infeasible = 2,
}

impl ExitKind {
    pub fn code(self) -> i32 {
        self as i32
    }
}

#[derive(Debug)]
pub enum CliError {
    Config(ConfigError),
    Usage(String),
    Io { path: PathBuf, message: String },
    Runtime(polychaos::Error),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Usage(_) => "usage",
            CliError::Io { .. } => "io",
            CliError::Runtime(polychaos::Error::InfeasibleAtStart(_)) => "infeasible",
            CliError::Runtime(_) => "runtime",
        }
    }

    pub fn exit(&self) -> ExitKind {
        match self {
            CliError::Runtime(polychaos::Error::InfeasibleAtStart(_)) => ExitKind::Infeasible,
            _ => ExitKind::Error,
        }
    }

    /// Structured report for stderr.
    pub fn to_json(&self) -> Value {
        let mut err = Map::new();
        err.insert("kind".into(), Value::from(self.kind()));
        err.insert("message".into(), Value::from(self.to_string()));
        if let CliError::Config(ConfigError::Schema(v)) = self {
            err.insert(
                "violations".into(),
                serde_json::to_value(v).expect("violations serialize"),
            );
        }
        json!({ "error": err })
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(e) => e.fmt(f),
            CliError::Usage(m) => f.write_str(m),
            CliError::Io { path, message } => write!(f, "{}: {message}", path.display()),
            CliError::Runtime(e) => e.fmt(f),
        }
    }
}

impl std::error::Error for CliError {}

impl From<polychaos::Error> for CliError {
    fn from(e: polychaos::Error) -> Self {
        CliError::Runtime(e)
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e)
    }
}

/// Command-line overrides of config fields.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub mode: Option<Mode>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub mc_samples: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub exit: ExitKind,
    pub output_dir: PathBuf,
    pub files: Vec<PathBuf>,
    pub summary: Value,
}

pub fn run_file(path: &Path, opts: &RunOptions) -> Result<RunOutcome, CliError> {
    run_parsed(parse_config(path)?, opts)
}

/// Applies overrides, runs the scenario and writes its outputs.
pub fn run_parsed(parsed: ParsedConfig, opts: &RunOptions) -> Result<RunOutcome, CliError> {
    let ParsedConfig { mut config, defaults } = parsed;
    let mut overrides = Map::new();
    if let Some(mode) = opts.mode {
        if mode != config.mode {
            let compatible = matches!(
                (config.mode, mode),
                (Mode::Propagate, Mode::Compare) | (Mode::Compare, Mode::Propagate)
            );
            if !compatible {
                return Err(CliError::Usage(format!(
                    "subcommand '{}' does not match config mode '{}'",
                    mode.as_str(),
                    config.mode.as_str()
                )));
            }
            overrides.insert("mode".into(), Value::from(mode.as_str()));
            config.mode = mode;
        }
    }
    if let Some(s) = opts.seed {
        overrides.insert("seed".into(), Value::from(s));
        config.seed = s;
    }
    if let Some(n) = opts.mc_samples {
        if n < 2 {
            return Err(CliError::Usage("--mc-samples must be ≥ 2".into()));
        }
        overrides.insert("mc_samples".into(), Value::from(n));
        config.mc_samples = n;
    }
    // The output location is not echoed, so artifacts compare equal across
    // directories.
    let output_dir = opts.out.clone().unwrap_or_else(|| PathBuf::from(&config.output_dir));

    let result = match config.mode {
        Mode::Propagate => run_propagate(&config, false)?,
        Mode::Compare => run_propagate(&config, true)?,
        Mode::Smpc => run_smpc(&config)?,
        Mode::Estimate => run_estimate(&config)?,
    };

    fs::create_dir_all(&output_dir).map_err(|e| io_err(&output_dir, e))?;
    let mut files = Vec::new();
    for (name, contents) in &result.files {
        let path = output_dir.join(name);
        fs::write(&path, contents).map_err(|e| io_err(&path, e))?;
        files.push(path);
    }
    let summary = json!({
        "config": serde_json::to_value(&config).expect("config serializes"),
        "defaults_applied": serde_json::to_value(&defaults).expect("defaults serialize"),
        "overrides": overrides,
        "results": result.summary,
        "exit_code": result.exit.code(),
    });
    let path = output_dir.join("summary.json");
    let mut text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    text.push('\n');
    fs::write(&path, text).map_err(|e| io_err(&path, e))?;
    files.push(path);
    Ok(RunOutcome {
        exit: result.exit,
        output_dir,
        files,
        summary,
    })
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

struct ModeResult {
    files: Vec<(&'static str, String)>,
    summary: Value,
    exit: ExitKind,
}

fn basis_of(cfg: &ScenarioConfig) -> Result<Arc<TotalDegreeBasis>, CliError> {
    Ok(Arc::new(TotalDegreeBasis::from_measures(&cfg.parameters, cfg.degree)?))
}

fn parse_entry(e: &Entry) -> Result<expr::Expr, CliError> {
    e.parse()
        .map_err(|err| CliError::Usage(format!("invalid expression: {err}")))
}

/// Expands a row-major grid of entries into one PCE row per entry.
fn entries_to_pce(rows: &[Vec<Entry>], basis: &Arc<TotalDegreeBasis>) -> Result<PceVector, CliError> {
    let flat: Vec<&Entry> = rows.iter().flatten().collect();
    let mut c = DMatrix::zeros(flat.len(), basis.len());
    for (r, e) in flat.iter().enumerate() {
        let coeffs = expr::to_basis(&parse_entry(e)?, basis)?;
        c.set_row(r, &DMatrix::from_row_slice(1, coeffs.len(), &coeffs).row(0));
    }
    Ok(PceVector::new(basis.clone(), c)?)
}

pub fn build_system(spec: &SystemSpec, basis: &Arc<TotalDegreeBasis>) -> Result<ParametricLinearSystem, CliError> {
    let a = entries_to_pce(&spec.a, basis)?;
    let b = entries_to_pce(&spec.b, basis)?;
    Ok(ParametricLinearSystem::new(spec.n_x, spec.n_u, a, b)?)
}

fn matrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    DMatrix::from_fn(n, m, |i, j| rows[i][j])
}

fn missing(section: &str) -> CliError {
    CliError::Usage(format!("config has no '{section}' section"))
}

fn run_propagate(cfg: &ScenarioConfig, compare: bool) -> Result<ModeResult, CliError> {
    let spec = cfg.propagate.as_ref().ok_or_else(|| missing("propagate"))?;
    let basis = basis_of(cfg)?;
    let tensor = basis.triple_products()?;
    let (times, states, mc) = match spec {
        PropagateSpec::Linear { x0, steps, inputs } => {
            let sys = build_system(cfg.system.as_ref().ok_or_else(|| missing("system"))?, &basis)?;
            let exp = expand_linear(&sys, &tensor)?;
            let us: Vec<DVector<f64>> = if inputs.is_empty() {
                vec![DVector::zeros(sys.n_u()); *steps]
            } else {
                inputs.iter().map(|u| DVector::from_column_slice(u)).collect()
            };
            let x0 = DVector::from_column_slice(x0);
            let mut x = dirac_state(&x0, basis.len());
            let mut states = vec![unstack(&x, basis.clone())?];
            for u in &us {
                x = exp.step(&x, u)?;
                states.push(unstack(&x, basis.clone())?);
            }
            let times: Vec<f64> = (0..=us.len()).map(|t| t as f64).collect();
            let mc = mc_propagate_linear(&sys, &x0, &us, cfg.mc_samples, cfg.seed)?;
            (times, states, mc)
        }
        PropagateSpec::Decay { rate, y0, times, dt } => {
            let rate = entries_to_pce(&[vec![rate.clone()]], &basis)?;
            let ode = GalerkinOde::new(rate.clone(), &tensor)?;
            let mut a0 = DMatrix::zeros(y0.len(), basis.len());
            for (r, v) in y0.iter().enumerate() {
                a0[(r, 0)] = *v;
            }
            let states = ode
                .integrate(&a0, times, *dt)?
                .into_iter()
                .map(|a| PceVector::new(basis.clone(), a))
                .collect::<polychaos::Result<Vec<_>>>()?;
            let mc = mc_propagate_decay(&rate, y0, times, cfg.mc_samples, cfg.seed)?;
            (times.clone(), states, mc)
        }
    };
    let mut files = vec![
        ("pce_moments.csv", pce_moments_csv(&times, &states)),
        ("mc_moments.csv", mc.to_csv()),
    ];
    let last = states.last().expect("at least one time");
    let mut summary = json!({
        "basis_size": basis.len(),
        "final_time": times.last(),
        "final_mean": last.mean().as_slice(),
        "final_variance": last.variance().as_slice(),
        "mc_samples": mc.n_samples,
    });
    if compare {
        let (csv, stats) = compare_csv(&states, &mc);
        files.push(("compare.csv", csv));
        summary["comparison"] = stats;
    }
    Ok(ModeResult {
        files,
        summary,
        exit: ExitKind::Success,
    })
}

/// Galerkin moments against the Monte Carlo oracle, with the deviations
/// expressed in Monte Carlo standard errors.
fn compare_csv(states: &[PceVector], mc: &McSummary) -> (String, Value) {
    let mut out = String::from(
        "time,output,pce_mean,mc_mean,mean_deviation,mean_stderr,pce_variance,mc_variance,variance_deviation,variance_stderr\n",
    );
    let (mut max_mean, mut max_var, mut max_mean_z, mut max_var_z) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for (k, p) in states.iter().enumerate() {
        let (m, v) = (p.mean(), p.variance());
        for r in 0..p.n_out() {
            let dm = m[r] - mc.mean[k][r];
            let dv = v[r] - mc.variance[k][r];
            let (sm, sv) = (mc.stderr[k][r], mc.variance_stderr(k, r));
            out.push_str(&format!(
                "{},{r},{},{},{dm},{sm},{},{},{dv},{sv}\n",
                mc.times[k], m[r], mc.mean[k][r], v[r], mc.variance[k][r]
            ));
            max_mean = max_mean.max(dm.abs());
            max_var = max_var.max(dv.abs());
            if sm > 0.0 {
                max_mean_z = max_mean_z.max(dm.abs() / sm);
            }
            if sv > 0.0 {
                max_var_z = max_var_z.max(dv.abs() / sv);
            }
        }
    }
    let stats = json!({
        "max_abs_mean_deviation": max_mean,
        "max_abs_variance_deviation": max_var,
        "max_mean_deviation_in_stderr": max_mean_z,
        "max_variance_deviation_in_stderr": max_var_z,
    });
    (out, stats)
}

/// Builds the controller problem from the config, filling the LQR defaults.
pub fn build_problem(cfg: &ScenarioConfig, sys: &ParametricLinearSystem) -> Result<SmpcProblem, CliError> {
    let spec = cfg.smpc.as_ref().ok_or_else(|| missing("smpc"))?;
    let (q, r) = (matrix(&spec.q), matrix(&spec.r));
    let needs_lqr = spec.terminal.is_none() || (spec.policy == PolicyKind::Prestabilized && spec.gain.is_none());
    let lqr = if needs_lqr {
        let (am, bm) = sys.mean_matrices();
        Some(lqr_gain(&am, &bm, &q, &r)?)
    } else {
        None
    };
    let terminal = match &spec.terminal {
        Some(p) => matrix(p),
        None => lqr.as_ref().expect("computed above").cost_to_go.clone(),
    };
    let policy = match spec.policy {
        PolicyKind::OpenLoop => Policy::OpenLoop,
        PolicyKind::Prestabilized => Policy::Prestabilized {
            gain: match &spec.gain {
                Some(k) => matrix(k),
                None => lqr.as_ref().expect("computed above").gain.clone(),
            },
        },
    };
    let state_constraints = spec
        .state_constraints
        .as_ref()
        .map(|p| Polytope::new(matrix(&p.g), DVector::from_column_slice(&p.d)))
        .transpose()?;
    let chance: Option<ChanceSpec> = match (&cfg.chance, &state_constraints) {
        (Some(c), Some(p)) => Some(match &c.allocation {
            Some(a) => ChanceSpec {
                beta: c.beta,
                allocation: a.clone(),
            },
            None => boole_allocate(c.beta, p.n_rows())?,
        }),
        _ => None,
    };
    let prob = SmpcProblem {
        horizon: spec.horizon,
        q,
        r,
        terminal,
        input_box: spec.input_box.as_ref().map(|b| InputBox {
            lower: DVector::from_column_slice(&b.lower),
            upper: DVector::from_column_slice(&b.upper),
        }),
        state_constraints,
        chance,
        policy,
    };
    prob.validate(sys.n_x(), sys.n_u())?;
    Ok(prob)
}

/// Seed of closed-loop run `r`.
pub fn run_seed(seed: u64, r: usize) -> u64 {
    sample_rng(seed, r as u64).random::<u64>()
}

fn run_smpc(cfg: &ScenarioConfig) -> Result<ModeResult, CliError> {
    let spec = cfg.smpc.as_ref().ok_or_else(|| missing("smpc"))?;
    let basis = basis_of(cfg)?;
    let sys = build_system(cfg.system.as_ref().ok_or_else(|| missing("system"))?, &basis)?;
    let prob = build_problem(cfg, &sys)?;
    let tensor = basis.triple_products()?;
    let settings = SolverSettings {
        tol: spec.solver.tol,
        max_iter: spec.solver.max_iter,
        ..SolverSettings::default()
    };
    let (n_x, n_u) = (sys.n_x(), sys.n_u());
    let controller = SmpcController::new(prob.clone(), sys, &tensor, settings)?;
    let x0 = DVector::from_column_slice(&spec.x0);

    let outcomes: Vec<Result<ClosedLoopTrace, polychaos::Error>> = (0..spec.runs)
        .into_par_iter()
        .map(|r| controller.run(&x0, spec.steps, run_seed(cfg.seed, r)))
        .collect();

    let mut traces = Vec::new();
    let mut infeasible_runs = Vec::new();
    for (r, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(t) => traces.push((r, t)),
            Err(polychaos::Error::InfeasibleAtStart(_)) => infeasible_runs.push(r),
            Err(e) => return Err(e.into()),
        }
    }
    if traces.is_empty() {
        return Err(polychaos::Error::InfeasibleAtStart(format!("all {} runs infeasible at t = 0", spec.runs)).into());
    }

    let mut csv = format!("run,{}\n", ClosedLoopTrace::csv_header(n_u, n_x));
    for (r, t) in &traces {
        for row in t.csv_rows() {
            csv.push_str(&format!("{r},{row}\n"));
        }
    }

    let n_runs = traces.len();
    let samples = (n_runs * spec.steps) as f64;
    let violations: usize = traces.iter().map(|(_, t)| t.violations()).sum();
    let fallbacks: usize = traces.iter().map(|(_, t)| t.fallbacks()).sum();
    let mut per_step = vec![0usize; spec.steps];
    let mut status_counts = [0usize; 3];
    let (mut iters, mut max_iters) = (0usize, 0usize);
    for (_, t) in &traces {
        for s in &t.steps {
            if s.violated {
                per_step[s.step] += 1;
            }
            status_counts[match s.status {
                SolveStatus::Optimal => 0,
                SolveStatus::MaxIter => 1,
                SolveStatus::Infeasible => 2,
            }] += 1;
            iters += s.iterations;
            max_iters = max_iters.max(s.iterations);
        }
    }
    let rate = violations as f64 / samples;
    let max_step_rate = per_step.iter().map(|&v| v as f64 / n_runs as f64).fold(0.0, f64::max);
    let mean_cost = traces.iter().map(|(_, t)| t.total_cost()).sum::<f64>() / n_runs as f64;

    let mut results = json!({
        "runs": n_runs,
        "steps": spec.steps,
        "violations": violations,
        "violation_rate": rate,
        "max_step_violation_rate": max_step_rate,
        "mean_cost": mean_cost,
        "fallbacks": fallbacks,
        "infeasible_runs": infeasible_runs,
        "solver": {
            "solves": samples as usize,
            "optimal": status_counts[0],
            "max_iter": status_counts[1],
            "infeasible": status_counts[2],
            "mean_iterations": iters as f64 / samples,
            "max_iterations": max_iters,
        },
    });
    if let Some(c) = &prob.chance {
        let eps = 1.0 - c.beta;
        let stderr = (c.beta * (1.0 - c.beta) / samples).sqrt();
        results["beta"] = Value::from(c.beta);
        results["violation_budget"] = Value::from(eps);
        results["violation_stderr"] = Value::from(stderr);
        results["violation_bound"] = Value::from(eps + 3.0 * stderr);
        results["within_bound"] = Value::from(rate <= eps + 3.0 * stderr);
    }
    let exit = if fallbacks > 0 || !infeasible_runs.is_empty() {
        ExitKind::Infeasible
    } else {
        ExitKind::Success
    };
    Ok(ModeResult {
        files: vec![("trace.csv", csv)],
        summary: results,
        exit,
    })
}

/// Synthetic measurements `forward(truth) + noise`, independent of the
/// filter's own sampling streams.
pub fn synthetic_measurements(forward: &expr::Expr, truth: f64, noise_std: f64, steps: usize, seed: u64) -> Vec<f64> {
    let mut rng = sample_rng(seed, u64::MAX);
    let clean = forward.eval(&[truth]);
    (0..steps)
        .map(|_| clean + noise_std * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn run_estimate(cfg: &ScenarioConfig) -> Result<ModeResult, CliError> {
    let spec = cfg.estimate.as_ref().ok_or_else(|| missing("estimate"))?;
    let basis = basis_of(cfg)?;
    let forward = parse_entry(&spec.forward)?;
    let ys = match (&spec.measurements, spec.truth, spec.steps) {
        (Some(ys), _, _) => ys.clone(),
        (None, Some(truth), Some(steps)) => synthetic_measurements(&forward, truth, spec.noise_std, steps, cfg.seed),
        _ => {
            return Err(CliError::Usage(
                "estimate needs 'measurements' or 'truth' with 'steps'".into(),
            ))
        }
    };
    let f = forward.clone();
    let lik = LikelihoodModel::new(move |t| f.eval(&[t]), spec.noise_std)?;
    let prior = PceVector::parameter(basis.clone(), 0)?;
    let config = FilterConfig {
        moments: spec.moments,
        samples: spec.samples,
        seed: cfg.seed,
    };
    let (posterior, trace) = run_filter(&prior, &ys, &lik, &config)?;
    let min_ess = trace.iter().map(|r| r.ess).fold(f64::INFINITY, f64::min);
    let summary = json!({
        "measurements": ys.len(),
        "prior_mean": prior.mean()[0],
        "prior_variance": prior.variance()[0],
        "posterior_mean": posterior.mean()[0],
        "posterior_variance": posterior.variance()[0],
        "posterior_coefficients": posterior.coeffs().row(0).iter().copied().collect::<Vec<f64>>(),
        "min_ess": min_ess,
    });
    Ok(ModeResult {
        files: vec![("filter_trace.csv", filter_trace_csv(&trace))],
        summary,
        exit: ExitKind::Success,
    })
}
