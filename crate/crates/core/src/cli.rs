//! Command-line front end: `solve`, `sop`, `dissipativity` and `report`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::analysis::{
    equivalence_battery, transversality_check, turnpike_metrics, BatteryOptions, BatteryReport, DirectValue,
    SurrogateSettings, TransversalityReport, TurnpikeReport, ValueFunction,
};
use crate::dissipativity::{
    dissipation_residual, fit_storage, hjb_subsolution_check, optimal_steady_alternatives, FitOptions,
    StorageCertificate, StrictnessMode,
};
use crate::error::{Error, Result};
use crate::io::{write_json, write_solution};
use crate::nlp::NlpOptions;
use crate::ocp::OcpProblem;
use crate::par::{self, Execution};
use crate::problems::{by_name, BenchmarkProblem};
use crate::sop::{dual_set_bounds, shift_cost, solve_sop_default, SteadyStateSolution};
use crate::transcription::{approx_infinite_horizon, solve_ocp, OcpSolution, SteadyTarget, TranscriptionConfig};

pub const OUT_ENV: &str = "DISSLAB_OUT";
pub const DEFAULT_OUT: &str = "disslab-out";

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "disslab", version, about = "Optimal control solves with dissipativity, turnpike and transversality checks")]
pub struct Cli {
    /// TOML file with run settings; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker cap for parallel sweeps and grids.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (default: $DISSLAB_OUT, then ./disslab-out).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve the OCP from each initial state.
    Solve(SolveArgs),
    /// Solve the steady-state problem.
    Sop(ProblemArgs),
    /// Fit a storage certificate.
    Dissipativity(DissipativityArgs),
    /// Equivalence battery, turnpike table and transversality check.
    Report(ReportArgs),
}

#[derive(Debug, Args, Default)]
pub struct ProblemArgs {
    /// halkin, fish or lq
    #[arg(long)]
    pub problem: Option<String>,
    /// Parameter override `name=value` (repeatable).
    #[arg(long = "param", value_parser = parse_param)]
    pub params: Vec<(String, f64)>,
    /// Initial states, comma separated; `;` separates points of
    /// multi-dimensional states.
    #[arg(long, allow_hyphen_values = true)]
    pub x0: Option<String>,
}

#[derive(Debug, Args, Default)]
pub struct MeshArgs {
    #[arg(long = "T")]
    pub horizon: Option<f64>,
    /// Number of intervals.
    #[arg(long = "N")]
    pub intervals: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    #[command(flatten)]
    pub problem: ProblemArgs,
    #[command(flatten)]
    pub mesh: MeshArgs,
    /// Infinite-horizon surrogate instead of a finite horizon.
    #[arg(long)]
    pub infinite: bool,
}

#[derive(Debug, Args)]
pub struct StorageArgs {
    #[arg(long)]
    pub degree: Option<usize>,
    #[arg(long)]
    pub p_ell: Option<f64>,
    /// Strictness in the state only.
    #[arg(long)]
    pub x_only: bool,
}

#[derive(Debug, Args)]
pub struct DissipativityArgs {
    #[command(flatten)]
    pub problem: ProblemArgs,
    #[command(flatten)]
    pub mesh: MeshArgs,
    #[command(flatten)]
    pub storage: StorageArgs,
    /// Maximize the strictness constant.
    #[arg(long)]
    pub strict: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[command(flatten)]
    pub problem: ProblemArgs,
    #[command(flatten)]
    pub storage: StorageArgs,
    /// Horizons of the turnpike table, comma separated.
    #[arg(long)]
    pub horizons: Option<String>,
    /// Turnpike radii, comma separated.
    #[arg(long)]
    pub epsilons: Option<String>,
}

fn parse_param(s: &str) -> std::result::Result<(String, f64), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected name=value, got '{s}'"))?;
    let v: f64 = v.trim().parse().map_err(|e| format!("bad value for '{k}': {e}"))?;
    Ok((k.trim().to_string(), v))
}

fn parse_list(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| p.trim().parse::<f64>().map_err(|e| Error::Config(format!("bad number '{p}': {e}"))))
        .collect()
}

/// `0.3,0.5` is two scalar states; `0.1,0.2;0.3,0.4` two planar ones.
fn parse_points(s: &str) -> Result<Vec<Vec<f64>>> {
    if s.contains(';') {
        s.split(';').filter(|p| !p.trim().is_empty()).map(parse_list).collect()
    } else {
        Ok(parse_list(s)?.into_iter().map(|v| vec![v]).collect())
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum PointSpec {
    Scalar(f64),
    Vector(Vec<f64>),
}

/// Contents of a `--config` file. Flat; unknown keys are rejected.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub problem: Option<String>,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    pub x0: Option<Vec<PointSpec>>,
    #[serde(rename = "T")]
    pub horizon: Option<f64>,
    #[serde(rename = "N")]
    pub intervals: Option<usize>,
    pub infinite: Option<bool>,
    pub degree: Option<usize>,
    pub strict: Option<bool>,
    pub p_ell: Option<f64>,
    pub x_only: Option<bool>,
    pub horizons: Option<Vec<f64>>,
    pub epsilons: Option<Vec<f64>>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub tol: Option<f64>,
    pub step: Option<f64>,
}

impl FileConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }
}

/// Fully resolved settings of one run.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub command: String,
    pub problem: String,
    pub params: BTreeMap<String, f64>,
    pub x0: Option<Vec<Vec<f64>>>,
    #[serde(rename = "T")]
    pub horizon: f64,
    #[serde(rename = "N")]
    pub intervals: usize,
    pub infinite: bool,
    pub degree: usize,
    pub strict: bool,
    pub p_ell: f64,
    pub x_only: bool,
    pub horizons: Vec<f64>,
    pub epsilons: Vec<f64>,
    pub out: PathBuf,
    pub seed: u64,
    pub jobs: Option<usize>,
    pub tol: f64,
    pub step: f64,
}

impl RunConfig {
    /// Merges file and flags (flags win) and fills defaults.
    pub fn resolve(cli: &Cli, file: FileConfig) -> Result<Self> {
        let empty_mesh = MeshArgs::default();
        let (command, pa, mesh, storage, strict, infinite, horizons, epsilons) = match &cli.command {
            Command::Solve(a) => ("solve", &a.problem, &a.mesh, None, false, a.infinite, None, None),
            Command::Sop(a) => ("sop", a, &empty_mesh, None, false, false, None, None),
            Command::Dissipativity(a) => ("dissipativity", &a.problem, &a.mesh, Some(&a.storage), a.strict, false, None, None),
            Command::Report(a) => {
                ("report", &a.problem, &empty_mesh, Some(&a.storage), false, false, a.horizons.as_deref(), a.epsilons.as_deref())
            }
        };
        let problem = pa
            .problem
            .clone()
            .or(file.problem)
            .ok_or_else(|| Error::Config("no problem given (--problem or `problem` in the config)".into()))?;
        let mut params = file.params;
        params.extend(pa.params.iter().cloned());
        let x0 = match &pa.x0 {
            Some(s) => Some(parse_points(s)?),
            None => file.x0.map(|v| {
                v.into_iter()
                    .map(|p| match p {
                        PointSpec::Scalar(s) => vec![s],
                        PointSpec::Vector(v) => v,
                    })
                    .collect()
            }),
        };
        let out = cli
            .out
            .clone()
            .or(file.out)
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
        let config = Self {
            command: command.to_string(),
            problem,
            params,
            x0,
            horizon: mesh.horizon.or(file.horizon).unwrap_or(20.0),
            intervals: mesh.intervals.or(file.intervals).unwrap_or(400),
            infinite: infinite || file.infinite.unwrap_or(false),
            degree: storage.and_then(|s| s.degree).or(file.degree).unwrap_or(4),
            strict: strict || file.strict.unwrap_or(false),
            p_ell: storage.and_then(|s| s.p_ell).or(file.p_ell).unwrap_or(2.0),
            x_only: storage.is_some_and(|s| s.x_only) || file.x_only.unwrap_or(false),
            horizons: match horizons {
                Some(s) => parse_list(s)?,
                None => file.horizons.unwrap_or_else(|| vec![10.0, 20.0, 40.0]),
            },
            epsilons: match epsilons {
                Some(s) => parse_list(s)?,
                None => file.epsilons.unwrap_or_else(|| vec![0.05, 0.1, 0.2]),
            },
            out,
            seed: cli.seed.or(file.seed).unwrap_or(0),
            jobs: cli.jobs.or(file.jobs),
            tol: file.tol.unwrap_or(1e-6),
            step: file.step.unwrap_or(0.05),
        };
        config.validate()?;
        Ok(config)
    }

    fn validate(&self) -> Result<()> {
        if !(self.horizon > 0.0) || self.intervals < 10 {
            return Err(Error::Config(format!("need T > 0 and N >= 10, got T = {}, N = {}", self.horizon, self.intervals)));
        }
        if !(self.tol > 0.0 && self.step > 0.0) {
            return Err(Error::Config("tol and step must be positive".into()));
        }
        if self.horizons.is_empty() || self.horizons.iter().any(|t| !(*t > 0.0)) {
            return Err(Error::Config("horizons must be positive".into()));
        }
        if self.epsilons.iter().any(|e| !(*e > 0.0)) {
            return Err(Error::Config("epsilons must be positive".into()));
        }
        Ok(())
    }

    fn transcription(&self) -> TranscriptionConfig {
        TranscriptionConfig::new(self.intervals + 1, self.horizon)
    }

    fn surrogate(&self) -> SurrogateSettings {
        SurrogateSettings { tol: self.tol, step: self.step, nlp: NlpOptions::default() }
    }
}

/// Default initial states: five points per dimension inside the initial set
/// (kept off its boundary, which may coincide with state constraints).
fn default_x0(problem: &OcpProblem) -> Vec<Vec<f64>> {
    problem.initial_set.shrink(0.1).grid(5)
}

fn initial_states(config: &RunConfig, problem: &OcpProblem) -> Result<Vec<Vec<f64>>> {
    let points = config.x0.clone().unwrap_or_else(|| default_x0(problem));
    if let Some(p) = points.iter().find(|p| p.len() != problem.state_dim()) {
        return Err(Error::Config(format!("initial state {p:?} does not have dimension {}", problem.state_dim())));
    }
    Ok(points)
}

fn load_problem(config: &RunConfig) -> Result<BenchmarkProblem> {
    by_name(&config.problem, &config.params)
}

#[derive(Debug, Serialize)]
struct SolveRecord {
    x0: Vec<f64>,
    file: String,
    value: f64,
    kkt_residual: f64,
    hamiltonian_mean: f64,
    hamiltonian_std: f64,
    #[serde(rename = "T")]
    horizon: f64,
    #[serde(rename = "N")]
    intervals: usize,
    accepted: Option<bool>,
}

fn cmd_solve(config: &RunConfig, exec: Execution) -> Result<serde_json::Value> {
    let bench = load_problem(config)?;
    let problem = &bench.problem;
    let x0s = match &config.x0 {
        Some(_) => initial_states(config, problem)?,
        None => vec![problem.initial_set.center()],
    };
    let steady = if config.infinite { Some(solve_sop_default(problem, config.seed, exec)?) } else { None };
    let solved: Vec<Result<(OcpSolution, Option<bool>)>> = par::map(exec, &x0s, |x0| match &steady {
        Some(s) => {
            let shifted = shift_cost(problem, s);
            let settings = config.surrogate();
            approx_infinite_horizon(&shifted, x0, &SteadyTarget::from(s), settings.tol, settings.step, settings.nlp)
                .map(|ih| (ih.solution, Some(ih.accepted)))
        }
        None => solve_ocp(problem, x0, &config.transcription()).map(|s| (s, None)),
    });
    let mut records = Vec::new();
    for (i, (x0, r)) in x0s.iter().zip(solved).enumerate() {
        let (sol, accepted) = r?;
        let stem = format!("solve_{}_{i}", config.problem);
        write_solution(&config.out, &stem, &sol)?;
        let s = sol.summary();
        records.push(SolveRecord {
            x0: x0.clone(),
            file: format!("{stem}.csv"),
            value: s.value,
            kkt_residual: s.kkt_residual,
            hamiltonian_mean: s.hamiltonian_mean,
            hamiltonian_std: s.hamiltonian_std,
            horizon: s.t,
            intervals: s.n,
            accepted,
        });
    }
    let report = serde_json::json!({ "problem": config.problem, "infinite": config.infinite, "solutions": records });
    write_json(&config.out.join("solve.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Serialize)]
struct SopReport {
    problem: String,
    steady: SteadyStateSolution,
    /// Per steady-state multiplier component: range over the dual set.
    dual_set_bounds: Option<Vec<(f64, f64)>>,
}

fn cmd_sop(config: &RunConfig, exec: Execution) -> Result<serde_json::Value> {
    let bench = load_problem(config)?;
    let steady = solve_sop_default(&bench.problem, config.seed, exec)?;
    let bounds = dual_set_bounds(&bench.problem, &steady, 1e-8).ok();
    let report = SopReport { problem: config.problem.clone(), steady, dual_set_bounds: bounds };
    write_json(&config.out.join("sop.json"), &report)?;
    Ok(serde_json::to_value(&report)?)
}

#[derive(Debug, Serialize)]
struct DissipativityReport {
    problem: String,
    strict: bool,
    x0: Vec<Vec<f64>>,
    certificate: Option<StorageCertificate>,
    error: Option<String>,
    /// `c_ell > 1e-6` with a valid certificate.
    strictness_feasible: bool,
    hjb_violation: Option<f64>,
    steady_alternatives: usize,
}

fn solve_all(problem: &OcpProblem, x0s: &[Vec<f64>], config: &TranscriptionConfig, exec: Execution) -> Result<Vec<OcpSolution>> {
    par::map(exec, x0s, |x0| solve_ocp(problem, x0, config)).into_iter().collect()
}

fn cmd_dissipativity(config: &RunConfig, exec: Execution) -> Result<serde_json::Value> {
    let bench = load_problem(config)?;
    let problem = &bench.problem;
    let x0s = initial_states(config, problem)?;
    let steady = solve_sop_default(problem, config.seed, exec)?;
    let shifted = shift_cost(problem, &steady);
    let transcription = config.transcription();
    let solutions = solve_all(&shifted, &x0s, &transcription, exec)?;
    let mode = if config.strict {
        StrictnessMode::Maximize { p_ell: config.p_ell, x_only: config.x_only }
    } else {
        StrictnessMode::None
    };
    let mut options = FitOptions::new(config.degree, mode);
    let xs = problem.initial_set.grid(50);
    let us = problem.input_set.grid(50);
    if config.strict {
        options.steady_pairs = optimal_steady_alternatives(&shifted, &steady, &transcription);
        options.hjb_grid = Some((xs.clone(), us.clone()));
    }
    let (certificate, error) = match fit_storage(&shifted, &steady, &solutions, &options) {
        Ok(c) => (Some(c), None),
        Err(e) => (None, Some(e.to_string())),
    };
    if let Some(c) = &certificate {
        write_json(&config.out.join("certificate.json"), c)?;
    }
    let report = DissipativityReport {
        problem: config.problem.clone(),
        strict: config.strict,
        x0: x0s,
        strictness_feasible: certificate.as_ref().is_some_and(|c| c.c_ell > 1e-6 && c.is_valid()),
        hjb_violation: certificate.as_ref().map(|c| hjb_subsolution_check(&shifted, c, &xs, &us)),
        certificate,
        error,
        steady_alternatives: options.steady_pairs.len(),
    };
    write_json(&config.out.join("dissipativity.json"), &report)?;
    Ok(serde_json::to_value(&report)?)
}

#[derive(Debug, Serialize)]
struct ReportBundle {
    battery: BatteryReport,
    turnpike: Vec<TurnpikeReport>,
    transversality: Option<TransversalityReport>,
    transversality_error: Option<String>,
    /// Out-of-sample dissipation residual of the certificate on the turnpike solutions.
    certificate_residual: Option<f64>,
}

fn cmd_report(config: &RunConfig, exec: Execution) -> Result<serde_json::Value> {
    let bench = load_problem(config)?;
    let problem = &bench.problem;
    let x0s = initial_states(config, problem)?;
    if x0s.len() < 3 {
        return Err(Error::Config("report needs at least 3 initial states".into()));
    }
    let options = BatteryOptions {
        seed: config.seed,
        degree: config.degree,
        p_ell: config.p_ell,
        x_only: config.x_only,
        surrogate: config.surrogate(),
        exec,
        ..BatteryOptions::default()
    };
    let battery = equivalence_battery(problem, &x0s, &options)?;
    let steady = &battery.steady;
    let shifted = shift_cost(problem, steady);

    let x0 = &x0s[0];
    let turnpike_solutions = par::map(exec, &config.horizons, |t| {
        let n = ((t / config.step).round() as usize).max(10);
        solve_ocp(&shifted, x0, &TranscriptionConfig::new(n + 1, *t))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let strict_cert = battery.certificate.as_ref().filter(|_| battery.strictly_dissipative);
    let w_bound = strict_cert.map(|c| {
        let direct = DirectValue::new(problem, steady, config.surrogate());
        let s_bar = c.value(&steady.x_bar);
        let c_w = x0s
            .iter()
            .filter_map(|x| direct.value(x).map(|v| v + c.value(x) - s_bar))
            .fold(0.0, f64::max);
        (c_w, c.strictness())
    });
    let turnpike = turnpike_metrics(&turnpike_solutions, &steady.x_bar, &config.epsilons, w_bound);
    let certificate_residual = strict_cert.map(|c| dissipation_residual(&shifted, steady, c, &turnpike_solutions));

    let settings = config.surrogate();
    let transversality = approx_infinite_horizon(&shifted, x0, &SteadyTarget::from(steady), settings.tol, settings.step, settings.nlp)
        .and_then(|ih| transversality_check(problem, &ih, steady));
    let (transversality, transversality_error) = match transversality {
        Ok(t) => (Some(t), None),
        Err(e) => (None, Some(e.to_string())),
    };

    let mut csv = String::new();
    for (i, r) in turnpike.iter().enumerate() {
        let table = r.to_csv();
        csv.push_str(if i == 0 { &table } else { table.split_once('\n').map_or("", |(_, rest)| rest) });
    }
    fs::create_dir_all(&config.out)?;
    fs::write(config.out.join("turnpike.csv"), csv)?;
    let bundle = ReportBundle { battery, turnpike, transversality, transversality_error, certificate_residual };
    write_json(&config.out.join("report.json"), &bundle)?;
    Ok(serde_json::to_value(&bundle)?)
}

/// Runs a parsed command line; returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let file = match &cli.config {
        Some(path) => match FileConfig::load(path) {
            Ok(f) => f,
            Err(e) => return fail(None, &e),
        },
        None => FileConfig::default(),
    };
    let config = match RunConfig::resolve(&cli, file) {
        Ok(c) => c,
        Err(e) => return fail(None, &e),
    };
    let result = par::with_jobs(config.jobs, || {
        fs::create_dir_all(&config.out)?;
        let exec = Execution::Parallel;
        match config.command.as_str() {
            "solve" => cmd_solve(&config, exec),
            "sop" => cmd_sop(&config, exec),
            "dissipativity" => cmd_dissipativity(&config, exec),
            _ => cmd_report(&config, exec),
        }
    });
    match result {
        Ok(report) => {
            println!("{}", serde_json::to_string_pretty(&report).unwrap_or_default());
            EXIT_OK
        }
        Err(e) => fail(Some(&config), &e),
    }
}

fn fail(config: Option<&RunConfig>, error: &Error) -> i32 {
    let code = match error {
        Error::Config(_) | Error::InvalidParameter(_) => EXIT_CONFIG,
        _ => EXIT_FAILED,
    };
    let report = serde_json::json!({
        "error": error.to_string(),
        "command": config.map(|c| c.command.clone()),
        "exit_code": code,
    });
    if let Some(c) = config {
        let _ = fs::create_dir_all(&c.out).and_then(|_| {
            fs::write(c.out.join("error.json"), serde_json::to_string_pretty(&report).unwrap_or_default() + "\n")
        });
    }
    eprintln!("{}", serde_json::to_string_pretty(&report).unwrap_or_default());
    code
}
