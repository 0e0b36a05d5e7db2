//! Verification battery: exponential fits, turnpike metrics, transversality,
//! the Lyapunov candidate W, gradient identities and the equivalence report.

use serde::Serialize;

use crate::dissipativity::{
    fit_storage, optimal_steady_alternatives, FitOptions, StorageCertificate, StrictnessForm, StrictnessMode,
};
use crate::error::{Error, Result};
use crate::nlp::NlpOptions;
use crate::ocp::OcpProblem;
use crate::par::{self, Execution};
use crate::sop::{shift_cost, solve_sop_default, SteadyStateSolution};
use crate::transcription::{
    approx_infinite_horizon, solve_ocp, InfiniteHorizonSolution, OcpSolution, SteadyTarget, TerminalMode,
    TranscriptionConfig,
};

pub const MIN_FIT_SAMPLES: usize = 10;

/// `series(t) ~ C exp(-rho t)` fitted in log space over `window`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExponentialFit {
    #[serde(rename = "C")]
    pub c: f64,
    pub rho: f64,
    pub rmse_log: f64,
    pub window: [f64; 2],
}

/// Least squares on `ln(series)` using samples above `1e-12` inside `window`
/// (whole grid when `None`).
pub fn fit_exponential(times: &[f64], series: &[f64], window: Option<(f64, f64)>) -> Result<ExponentialFit> {
    if times.len() != series.len() {
        return Err(Error::Dimension("times and series differ in length".into()));
    }
    let (ta, tb) = window.unwrap_or((f64::NEG_INFINITY, f64::INFINITY));
    let pts: Vec<(f64, f64)> = times
        .iter()
        .zip(series)
        .filter(|(t, v)| **t >= ta && **t <= tb && **v > 1e-12 && v.is_finite())
        .map(|(t, v)| (*t, v.ln()))
        .collect();
    if pts.len() < MIN_FIT_SAMPLES {
        return Err(Error::TooFewSamples { found: pts.len(), required: MIN_FIT_SAMPLES });
    }
    let n = pts.len() as f64;
    let mt = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let stt: f64 = pts.iter().map(|p| (p.0 - mt).powi(2)).sum();
    let sty: f64 = pts.iter().map(|p| (p.0 - mt) * (p.1 - my)).sum();
    let slope = if stt > 0.0 { sty / stt } else { 0.0 };
    let intercept = my - slope * mt;
    let rmse_log = (pts.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum::<f64>() / n).sqrt();
    let window = [pts[0].0, pts[pts.len() - 1].0];
    Ok(ExponentialFit { c: intercept.exp(), rho: -slope, rmse_log, window })
}

/// Fraction of the horizon dropped at the start of mid-horizon windows.
pub const WINDOW_START: f64 = 0.1;
/// End of mid-horizon windows as a fraction of the horizon.
pub const WINDOW_END: f64 = 0.6;
/// A deviation that stays below this inside the window counts as arrival.
pub const ARRIVAL_TOL: f64 = 1e-6;
pub const MAX_RMSE_LOG: f64 = 0.5;
/// Fitted rates below this are read as "no decay".
pub const MIN_RATE: f64 = 1e-2;
pub const STRICT_C_MIN: f64 = 1e-6;

fn norm_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn mid_window(horizon: f64) -> (f64, f64) {
    (WINDOW_START * horizon, WINDOW_END * horizon)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TurnpikeReport {
    pub epsilon: f64,
    pub horizons: Vec<f64>,
    /// Measure of `{t : |x(t) - x_bar| > epsilon}` per horizon.
    pub time_outside: Vec<f64>,
    /// `C_W / alpha(epsilon)` when a strict certificate is supplied.
    pub bound: Option<f64>,
}

impl TurnpikeReport {
    /// Largest pairwise difference of `time_outside` across horizons.
    pub fn spread(&self) -> f64 {
        let hi = self.time_outside.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = self.time_outside.iter().copied().fold(f64::INFINITY, f64::min);
        hi - lo
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("horizon,epsilon,time_outside,bound\n");
        for (t, m) in self.horizons.iter().zip(&self.time_outside) {
            let b = self.bound.map(|b| format!("{b:.16e}")).unwrap_or_default();
            out.push_str(&format!("{t:.16e},{:.16e},{m:.16e},{b}\n", self.epsilon));
        }
        out
    }
}

/// Grid count of the time spent outside the `epsilon` ball: each node outside
/// contributes the length of the interval it starts (the last node the one it
/// ends).
pub fn time_outside(solution: &OcpSolution, x_bar: &[f64], epsilon: f64) -> f64 {
    let grid = &solution.primal.grid;
    let n = grid.len();
    (0..n)
        .filter(|&k| norm_diff(&solution.primal.states[k], x_bar) > epsilon)
        .map(|k| if k + 1 < n { grid[k + 1] - grid[k] } else { grid[k] - grid[k - 1] })
        .sum()
}

/// One report per `epsilon`. `w_bound` carries `C_W` and the strictness
/// form of a certificate; the bound column is filled from it.
pub fn turnpike_metrics(
    solutions: &[OcpSolution],
    x_bar: &[f64],
    epsilons: &[f64],
    w_bound: Option<(f64, StrictnessForm)>,
) -> Vec<TurnpikeReport> {
    epsilons
        .iter()
        .map(|&epsilon| TurnpikeReport {
            epsilon,
            horizons: solutions.iter().map(|s| s.horizon).collect(),
            time_outside: solutions.iter().map(|s| time_outside(s, x_bar, epsilon)).collect(),
            bound: w_bound.and_then(|(c_w, form)| {
                let a = form.alpha(epsilon);
                (a > 0.0).then(|| c_w / a)
            }),
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct TransversalityReport {
    /// `|lambda(T) - lambda_bar|`.
    pub terminal_gap: f64,
    /// Largest `|lambda(t) - lambda_bar|` over `[0.3 T, 0.6 T]`.
    pub mid_gap: f64,
    pub tail_fit: Option<ExponentialFit>,
    /// Set when the gap vanished inside the window so no rate can be fitted.
    pub arrived: bool,
    /// `|f_x^T lambda_bar + l_x + g_x^T mu_bar|` at the final node.
    pub stationarity_residual: f64,
    pub horizon: f64,
}

/// Adjoint limit check on an accepted infinite-horizon surrogate.
pub fn transversality_check(
    problem: &OcpProblem,
    ih: &InfiniteHorizonSolution,
    steady: &SteadyStateSolution,
) -> Result<TransversalityReport> {
    if !ih.accepted {
        return Err(Error::Precondition("infinite-horizon surrogate was not accepted; the adjoint limit is not defined".into()));
    }
    if !matches!(ih.solution.terminal, TerminalMode::LinearPenalty { .. }) {
        return Err(Error::Precondition("transversality needs the linear terminal penalty".into()));
    }
    let sol = &ih.solution;
    let t_end = sol.horizon;
    let gaps: Vec<f64> = sol.dual.adjoints.iter().map(|l| norm_diff(l, &steady.lambda_bar)).collect();
    let times = &sol.dual.grid;
    let mid_gap = times
        .iter()
        .zip(&gaps)
        .filter(|(t, _)| **t >= 0.3 * t_end && **t <= 0.6 * t_end)
        .map(|(_, g)| *g)
        .fold(0.0, f64::max);
    let (ta, tb) = mid_window(t_end);
    let in_window = times.iter().zip(&gaps).filter(|(t, _)| **t >= ta && **t <= tb).map(|(_, g)| *g);
    let arrived = in_window.fold(0.0, f64::max) <= ARRIVAL_TOL;
    let tail_fit = if arrived { None } else { fit_exponential(times, &gaps, Some((ta, tb))).ok() };

    let n = sol.intervals;
    let (x, u) = (&sol.primal.states[n], &sol.primal.inputs[n]);
    let (fx, _) = problem.dynamics_jacobian(x, u);
    let (lx, _) = problem.cost_gradient(x, u);
    let mut r = lx + fx.transpose() * nalgebra::DVector::from_column_slice(&steady.lambda_bar);
    if problem.constraint_count() > 0 {
        let (gx, _) = problem.constraints_jacobian(x, u);
        r += gx.transpose() * nalgebra::DVector::from_column_slice(&steady.mu_bar);
    }
    Ok(TransversalityReport {
        terminal_gap: gaps[n],
        mid_gap,
        tail_fit,
        arrived,
        stationarity_residual: r.norm(),
        horizon: t_end,
    })
}

/// Something that returns `V_inf(x)`, or `None` where it is undefined.
pub trait ValueFunction: Sync {
    fn value(&self, x: &[f64]) -> Option<f64>;
    /// Smallest meaningful finite-difference step.
    fn resolution(&self) -> f64;
}

/// Settings shared by every infinite-horizon solve of a surrogate.
#[derive(Debug, Clone, Copy)]
pub struct SurrogateSettings {
    pub tol: f64,
    pub step: f64,
    pub nlp: NlpOptions,
}

impl Default for SurrogateSettings {
    fn default() -> Self {
        Self { tol: 1e-6, step: 0.05, nlp: NlpOptions::default() }
    }
}

/// `V_inf` on a tensor grid over the initial set, multilinearly interpolated.
/// The problem is shifted so that `l(z_bar) = 0`.
#[derive(Debug, Clone, Serialize)]
pub struct ValueSurrogate {
    pub axes: Vec<Vec<f64>>,
    /// Row-major over `axes`, first axis slowest; `NaN` where a solve failed.
    pub values: Vec<f64>,
    pub failures: usize,
    pub unaccepted: usize,
}

impl ValueSurrogate {
    pub fn build(
        problem: &OcpProblem,
        steady: &SteadyStateSolution,
        per_dim: usize,
        settings: SurrogateSettings,
        exec: Execution,
    ) -> Result<Self> {
        if per_dim < 2 {
            return Err(Error::InvalidParameter("surrogate grid needs at least 2 points per dimension".into()));
        }
        let shifted = shift_cost(problem, steady);
        let target = SteadyTarget::from(steady);
        let set = &problem.initial_set;
        let axes: Vec<Vec<f64>> = (0..set.dim())
            .map(|i| {
                (0..per_dim)
                    .map(|k| set.lower[i] + (set.upper[i] - set.lower[i]) * k as f64 / (per_dim - 1) as f64)
                    .collect()
            })
            .collect();
        let points = set.grid(per_dim);
        let solved = par::map(exec, &points, |x| {
            approx_infinite_horizon(&shifted, x, &target, settings.tol, settings.step, settings.nlp)
        });
        let mut failures = 0;
        let mut unaccepted = 0;
        let values = solved
            .into_iter()
            .map(|r| match r {
                Ok(ih) => {
                    if !ih.accepted {
                        unaccepted += 1;
                    }
                    ih.solution.value
                }
                Err(_) => {
                    failures += 1;
                    f64::NAN
                }
            })
            .collect();
        Ok(Self { axes, values, failures, unaccepted })
    }

    pub fn spacing(&self) -> f64 {
        self.axes.iter().map(|a| (a[a.len() - 1] - a[0]) / (a.len() - 1) as f64).fold(f64::INFINITY, f64::min)
    }

    fn index(&self, idx: &[usize]) -> usize {
        idx.iter().zip(&self.axes).fold(0, |acc, (i, a)| acc * a.len() + i)
    }
}

impl ValueFunction for ValueSurrogate {
    fn value(&self, x: &[f64]) -> Option<f64> {
        if x.len() != self.axes.len() {
            return None;
        }
        let mut cell = Vec::with_capacity(x.len());
        for (xi, a) in x.iter().zip(&self.axes) {
            let (lo, hi) = (a[0], a[a.len() - 1]);
            if !(*xi >= lo - 1e-12 && *xi <= hi + 1e-12) {
                return None;
            }
            let h = (hi - lo) / (a.len() - 1) as f64;
            let k = (((xi - lo) / h).floor() as usize).min(a.len() - 2);
            cell.push((k, ((xi - a[k]) / h).clamp(0.0, 1.0)));
        }
        let d = x.len();
        let mut total = 0.0;
        for corner in 0..(1usize << d) {
            let mut w = 1.0;
            let idx: Vec<usize> = (0..d)
                .map(|i| {
                    let (k, s) = cell[i];
                    if corner >> i & 1 == 1 {
                        w *= s;
                        k + 1
                    } else {
                        w *= 1.0 - s;
                        k
                    }
                })
                .collect();
            if w == 0.0 {
                continue;
            }
            let v = self.values[self.index(&idx)];
            if !v.is_finite() {
                return None;
            }
            total += w * v;
        }
        Some(total)
    }

    fn resolution(&self) -> f64 {
        self.spacing()
    }
}

/// `V_inf` evaluated by one infinite-horizon solve per query.
pub struct DirectValue {
    shifted: OcpProblem,
    target: SteadyTarget,
    settings: SurrogateSettings,
}

impl DirectValue {
    pub fn new(problem: &OcpProblem, steady: &SteadyStateSolution, settings: SurrogateSettings) -> Self {
        Self { shifted: shift_cost(problem, steady), target: SteadyTarget::from(steady), settings }
    }
}

impl ValueFunction for DirectValue {
    fn value(&self, x: &[f64]) -> Option<f64> {
        approx_infinite_horizon(&self.shifted, x, &self.target, self.settings.tol, self.settings.step, self.settings.nlp)
            .ok()
            .filter(|ih| ih.accepted)
            .map(|ih| ih.solution.value)
    }

    fn resolution(&self) -> f64 {
        0.0
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LyapunovReport {
    pub times: Vec<f64>,
    /// `W(x_k)`, `None` where the value function is undefined.
    pub w: Vec<Option<f64>>,
    pub skipped: usize,
    pub w_min: f64,
    pub w_final: Option<f64>,
    /// Largest `W_{k+1} - W_k + h alpha(|x_k - x_bar|)` over defined pairs.
    pub worst_decrease_excess: f64,
    pub decrease_tol: f64,
    pub nonnegative: bool,
    pub decreasing: bool,
}

/// `W(x) = V_inf(x) + S(x) - S(x_bar)` along a solution.
pub fn lyapunov_w(
    steady: &SteadyStateSolution,
    certificate: &StorageCertificate,
    value: &dyn ValueFunction,
    solution: &OcpSolution,
) -> LyapunovReport {
    let s_bar = certificate.value(&steady.x_bar);
    let alpha = certificate.strictness();
    let tr = &solution.primal;
    let w: Vec<Option<f64>> =
        tr.states.iter().map(|x| value.value(x).map(|v| v + certificate.value(x) - s_bar)).collect();
    let h = solution.step();
    let decrease_tol = 1e-6 + 10.0 * h * h;
    let mut worst = f64::NEG_INFINITY;
    for k in 0..w.len().saturating_sub(1) {
        if let (Some(a), Some(b)) = (w[k], w[k + 1]) {
            let dt = tr.grid[k + 1] - tr.grid[k];
            worst = worst.max(b - a + dt * alpha.alpha(norm_diff(&tr.states[k], &steady.x_bar)));
        }
    }
    let defined: Vec<f64> = w.iter().flatten().copied().collect();
    let w_min = defined.iter().copied().fold(f64::INFINITY, f64::min);
    LyapunovReport {
        times: tr.grid.clone(),
        skipped: w.len() - defined.len(),
        w_final: *w.last().unwrap_or(&None),
        w,
        w_min,
        worst_decrease_excess: worst,
        decrease_tol,
        nonnegative: w_min >= -decrease_tol,
        decreasing: worst <= decrease_tol,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradientIdentities {
    /// Central-difference gradient of `V_inf` at `x_bar`.
    pub value_gradient: Vec<f64>,
    /// `|grad V_inf(x_bar) - lambda_bar|`.
    pub value_residual: f64,
    pub storage_gradient: Option<Vec<f64>>,
    /// `|grad S(x_bar) + lambda_bar|`; only reported when the certificate is strict.
    pub storage_residual: Option<f64>,
    /// Set when no strict certificate is available, so the identity is not asserted.
    pub preconditions_violated: bool,
}

pub fn gradient_identities(
    steady: &SteadyStateSolution,
    certificate: Option<&StorageCertificate>,
    value: &dyn ValueFunction,
    fd_step: f64,
) -> Result<GradientIdentities> {
    if !(fd_step > 0.0) || fd_step < value.resolution() {
        return Err(Error::InvalidParameter(format!(
            "finite-difference step {fd_step} is below the value grid resolution {}",
            value.resolution()
        )));
    }
    let nx = steady.x_bar.len();
    let mut grad = vec![0.0; nx];
    for i in 0..nx {
        let mut p = steady.x_bar.clone();
        let mut m = steady.x_bar.clone();
        p[i] += fd_step;
        m[i] -= fd_step;
        let (vp, vm) = match (value.value(&p), value.value(&m)) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Error::Precondition(format!("value function undefined within {fd_step} of x_bar"))),
        };
        grad[i] = (vp - vm) / (2.0 * fd_step);
    }
    let strict = certificate.filter(|c| c.c_ell > STRICT_C_MIN && c.is_valid());
    let storage_gradient = strict.map(|c| c.linear_part());
    Ok(GradientIdentities {
        value_residual: norm_diff(&grad, &steady.lambda_bar),
        storage_residual: storage_gradient
            .as_ref()
            .map(|g| g.iter().zip(&steady.lambda_bar).map(|(a, b)| (a + b).powi(2)).sum::<f64>().sqrt()),
        value_gradient: grad,
        storage_gradient,
        preconditions_violated: strict.is_none(),
    })
}

/// Largest gap between the Hamiltonian at the computed input and its minimum
/// over `u_grid` (feasible points only), over interior nodes. Input-dependent
/// multiplier terms are left out: they describe `U` itself. End nodes are
/// skipped because their inputs see one collocation interval only.
pub fn hamiltonian_pointwise_check(problem: &OcpProblem, solution: &OcpSolution, u_grid: &[Vec<f64>]) -> f64 {
    let tr = &solution.primal;
    let mut worst = f64::NEG_INFINITY;
    for k in 1..tr.len().saturating_sub(1) {
        let (x, lambda) = (&tr.states[k], &solution.dual.adjoints[k]);
        let h0 = |u: &[f64]| {
            let f = problem.dynamics(x, u);
            problem.stage_cost(x, u) + lambda.iter().zip(f.iter()).map(|(a, b)| a * b).sum::<f64>()
        };
        let here = h0(&tr.inputs[k]);
        let best = u_grid
            .iter()
            .filter(|u| problem.max_violation(x, u) <= 1e-12)
            .map(|u| h0(u))
            .fold(f64::INFINITY, f64::min);
        if best.is_finite() {
            worst = worst.max(here - best);
        }
    }
    worst
}

#[derive(Debug, Clone)]
pub struct BatteryOptions {
    pub seed: u64,
    pub degree: usize,
    pub p_ell: f64,
    pub x_only: bool,
    /// Grid points per dimension for the HJB rows of the certificate fit (0 disables).
    pub hjb_points: usize,
    /// Horizon and node count of the finite-horizon solves used for fitting.
    pub fit_horizon: f64,
    pub fit_nodes: usize,
    pub surrogate: SurrogateSettings,
    pub exec: Execution,
}

impl Default for BatteryOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            degree: 4,
            p_ell: 2.0,
            x_only: false,
            hjb_points: 50,
            fit_horizon: 10.0,
            fit_nodes: 401,
            surrogate: SurrogateSettings::default(),
            exec: Execution::Parallel,
        }
    }
}

/// Convergence evidence of one infinite-horizon solution.
#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceEvidence {
    pub x0: Vec<f64>,
    pub horizon: f64,
    pub accepted: bool,
    pub state_fit: Option<ExponentialFit>,
    pub state_arrived: bool,
    pub input_fit: Option<ExponentialFit>,
    pub input_arrived: bool,
    pub adjoint_fit: Option<ExponentialFit>,
    pub adjoint_arrived: bool,
    pub error: Option<String>,
}

impl ConvergenceEvidence {
    fn state_ok(&self) -> bool {
        self.state_arrived || self.state_fit.as_ref().is_some_and(fit_converges)
    }

    fn input_ok(&self) -> bool {
        self.input_arrived || self.input_fit.as_ref().is_some_and(fit_converges)
    }

    fn adjoint_ok(&self) -> bool {
        self.adjoint_arrived || self.adjoint_fit.as_ref().is_some_and(fit_converges)
    }
}

fn fit_converges(fit: &ExponentialFit) -> bool {
    fit.rho >= MIN_RATE && fit.rmse_log <= MAX_RMSE_LOG
}

/// Fit of `series` over the mid-horizon window, or arrival when it vanished there.
fn window_fit(times: &[f64], series: &[f64], horizon: f64) -> (Option<ExponentialFit>, bool) {
    let (ta, tb) = mid_window(horizon);
    let peak = times.iter().zip(series).filter(|(t, _)| **t >= ta && **t <= tb).map(|(_, v)| *v).fold(0.0, f64::max);
    if peak <= ARRIVAL_TOL {
        return (None, true);
    }
    (fit_exponential(times, series, Some((ta, tb))).ok(), false)
}

fn convergence_evidence(
    problem: &OcpProblem,
    steady: &SteadyStateSolution,
    x0: &[f64],
    settings: SurrogateSettings,
) -> ConvergenceEvidence {
    let target = SteadyTarget::from(steady);
    match approx_infinite_horizon(problem, x0, &target, settings.tol, settings.step, settings.nlp) {
        Ok(ih) => {
            let s = &ih.solution;
            let t = &s.primal.grid;
            let dx: Vec<f64> = s.primal.states.iter().map(|x| norm_diff(x, &steady.x_bar)).collect();
            let du: Vec<f64> = s.primal.inputs.iter().map(|u| norm_diff(u, &steady.u_bar)).collect();
            let dl: Vec<f64> = s.dual.adjoints.iter().map(|l| norm_diff(l, &steady.lambda_bar)).collect();
            let (state_fit, state_arrived) = window_fit(t, &dx, s.horizon);
            let (input_fit, input_arrived) = window_fit(t, &du, s.horizon);
            let (adjoint_fit, adjoint_arrived) = window_fit(t, &dl, s.horizon);
            ConvergenceEvidence {
                x0: x0.to_vec(),
                horizon: s.horizon,
                accepted: ih.accepted,
                state_fit,
                state_arrived,
                input_fit,
                input_arrived,
                adjoint_fit,
                adjoint_arrived,
                error: None,
            }
        }
        Err(e) => ConvergenceEvidence {
            x0: x0.to_vec(),
            horizon: f64::NAN,
            accepted: false,
            state_fit: None,
            state_arrived: false,
            input_fit: None,
            input_arrived: false,
            adjoint_fit: None,
            adjoint_arrived: false,
            error: Some(e.to_string()),
        },
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BatteryReport {
    pub problem: String,
    /// (i) a strict storage certificate was found.
    pub strictly_dissipative: bool,
    /// (ii) state and input converge exponentially to `z_bar`.
    pub primal_stable: bool,
    /// (iii) the adjoint converges exponentially to `lambda_bar`.
    pub adjoint_convergent: bool,
    pub agree: bool,
    /// The state alone converges (input may not).
    pub state_converges: bool,
    pub steady: SteadyStateSolution,
    pub steady_interior: bool,
    pub steady_alternatives: Vec<(Vec<f64>, Vec<f64>)>,
    pub certificate: Option<StorageCertificate>,
    pub certificate_error: Option<String>,
    pub convergence: Vec<ConvergenceEvidence>,
    /// Failed preconditions of the equivalence.
    pub violated_preconditions: Vec<String>,
}

impl BatteryReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Evaluates the three equivalent statements on `x0_set` and records why
/// they disagree when they do.
pub fn equivalence_battery(problem: &OcpProblem, x0_set: &[Vec<f64>], options: &BatteryOptions) -> Result<BatteryReport> {
    let steady = solve_sop_default(problem, options.seed, options.exec)?;
    let shifted = shift_cost(problem, &steady);
    let g = problem.constraints(&steady.x_bar, &steady.u_bar);
    let steady_interior = g.iter().all(|v| *v < -1e-8);
    let fit_config = TranscriptionConfig::new(options.fit_nodes, options.fit_horizon);
    let steady_alternatives = optimal_steady_alternatives(&shifted, &steady, &fit_config);

    let mut violated = Vec::new();
    if !steady_interior {
        violated.push("z_bar is not in the interior of the constraint set".to_string());
    }
    if !steady_alternatives.is_empty() {
        violated.push(format!("optimal steady state is not unique ({} other optimal steady pairs)", steady_alternatives.len()));
    }
    if !steady.licq {
        violated.push("LICQ fails at z_bar".to_string());
    }
    if !steady.xu_regular {
        violated.push(format!("x-u regularity fails at lambda_bar = {:?} (det = {:.3e})", steady.lambda_bar, steady.det_hess));
    }

    let solved = par::map(options.exec, x0_set, |x0| solve_ocp(&shifted, x0, &fit_config));
    let (certificate, certificate_error) = match solved.into_iter().collect::<Result<Vec<_>>>() {
        Ok(solutions) => {
            let mut fit = FitOptions::new(options.degree, StrictnessMode::Maximize { p_ell: options.p_ell, x_only: options.x_only });
            fit.steady_pairs = steady_alternatives.clone();
            if options.hjb_points > 0 {
                fit.hjb_grid = Some((problem.initial_set.grid(options.hjb_points), problem.input_set.grid(options.hjb_points)));
            }
            match fit_storage(&shifted, &steady, &solutions, &fit) {
                Ok(c) => (Some(c), None),
                Err(e) => (None, Some(e.to_string())),
            }
        }
        Err(e) => (None, Some(e.to_string())),
    };
    let strictly_dissipative = certificate.as_ref().is_some_and(|c| c.c_ell > STRICT_C_MIN && c.is_valid());

    let convergence = par::map(options.exec, x0_set, |x0| convergence_evidence(&shifted, &steady, x0, options.surrogate));
    let all = |f: fn(&ConvergenceEvidence) -> bool| !convergence.is_empty() && convergence.iter().all(f);
    let state_converges = all(ConvergenceEvidence::state_ok);
    let primal_stable = state_converges && all(ConvergenceEvidence::input_ok);
    let adjoint_convergent = all(ConvergenceEvidence::adjoint_ok);

    Ok(BatteryReport {
        problem: problem.name.clone(),
        strictly_dissipative,
        primal_stable,
        adjoint_convergent,
        agree: strictly_dissipative == primal_stable && primal_stable == adjoint_convergent,
        state_converges,
        steady,
        steady_interior,
        steady_alternatives,
        certificate,
        certificate_error,
        convergence,
        violated_preconditions: violated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dissipativity::DI_TOL;
    use crate::problems::{make_fish, make_halkin, make_lq, FishParams};
    use crate::sop::solve_sop_default;
    use proptest::prelude::*;

    fn riccati(a: f64, b: f64, q: f64, r: f64) -> f64 {
        // positive root of 2 a P - (b P)^2 / r + q = 0
        r * (a + (a * a + b * b * q / r).sqrt()) / (b * b)
    }

    fn horizon_solutions(problem: &OcpProblem, x0: f64, horizons: &[f64], step: f64) -> Vec<OcpSolution> {
        horizons
            .iter()
            .map(|t| solve_ocp(problem, &[x0], &TranscriptionConfig::new((t / step).round() as usize + 1, *t)).unwrap())
            .collect()
    }

    fn infinite(problem: &OcpProblem, steady: &SteadyStateSolution, x0: &[f64], step: f64) -> InfiniteHorizonSolution {
        let shifted = shift_cost(problem, steady);
        approx_infinite_horizon(&shifted, x0, &SteadyTarget::from(steady), 1e-6, step, NlpOptions::default()).unwrap()
    }

    #[test]
    fn exact_exponential_is_recovered() {
        let t: Vec<f64> = (0..100).map(|k| k as f64 * 0.05).collect();
        let s: Vec<f64> = t.iter().map(|t| 3.0 * (-2.0 * t).exp()).collect();
        let fit = fit_exponential(&t, &s, None).unwrap();
        assert!((fit.rho - 2.0).abs() < 1e-10);
        assert!((fit.c - 3.0).abs() < 1e-9);
        assert!(fit.rmse_log <= 1e-10);
    }

    #[test]
    fn constant_series_has_zero_rate() {
        let t: Vec<f64> = (0..20).map(|k| k as f64).collect();
        let fit = fit_exponential(&t, &[0.7; 20], None).unwrap();
        assert!(fit.rho.abs() < 1e-14);
    }

    #[test]
    fn too_few_samples_is_an_error() {
        let t: Vec<f64> = (0..20).map(|k| k as f64).collect();
        let mut s = vec![0.0; 20];
        s[3] = 1.0;
        assert!(matches!(fit_exponential(&t, &s, None), Err(Error::TooFewSamples { found: 1, .. })));
    }

    #[test]
    fn fish_turnpike_time_is_horizon_independent() {
        // [DERIVED] bang-bang arrival from 0.5 takes (1/2) ln(3 * 0.95 / 1.05) = 0.499;
        // the exit arc at the end adds a horizon-independent piece
        let fish = make_fish(FishParams::default()).unwrap();
        let h = 0.05;
        let sols = horizon_solutions(&fish.problem, 0.5, &[10.0, 20.0, 40.0], h);
        let r = &turnpike_metrics(&sols, &[1.0], &[0.05], None)[0];
        assert!(r.spread() <= 2.0 * h, "{r:?}");
        let arrival = 0.5 * (3.0 * 0.95 / 1.05_f64).ln();
        assert!(r.time_outside[0] >= arrival - 2.0 * h);
        assert!(r.time_outside.iter().zip(&r.horizons).all(|(m, t)| m <= t));
    }

    #[test]
    fn large_radius_has_no_time_outside() {
        // [TRIVIAL]
        let fish = make_fish(FishParams::default()).unwrap();
        let sols = horizon_solutions(&fish.problem, 0.5, &[10.0], 0.05);
        let r = turnpike_metrics(&sols, &[1.0], &[0.05, 0.2, 5.0], None);
        assert_eq!(r[2].time_outside[0], 0.0);
        assert!(r[0].time_outside[0] >= r[1].time_outside[0]);
    }

    #[test]
    fn halkin_turnpike_crossing_time() {
        // [DERIVED] x(t) = 1 - 0.5 e^{-t} leaves the 0.1 ball at t = ln 5. Only
        // moderate horizons: the cost depends on u through e^{-T} alone.
        let h = make_halkin();
        let step = 0.05;
        let sols = horizon_solutions(&h.problem, 0.5, &[6.0, 8.0, 10.0], step);
        let r = &turnpike_metrics(&sols, &[1.0], &[0.1], None)[0];
        assert!(r.spread() <= 2.0 * step, "{r:?}");
        assert!((r.time_outside[0] - 5f64.ln()).abs() <= 2.0 * step);
    }

    #[test]
    fn turnpike_bound_uses_alpha() {
        // [TRIVIAL] C_W / (c eps^p)
        let fish = make_fish(FishParams::default()).unwrap();
        let sols = horizon_solutions(&fish.problem, 0.5, &[10.0], 0.05);
        let form = StrictnessForm { c_ell: 0.5, p_ell: 2.0, x_only: true };
        let r = turnpike_metrics(&sols, &[1.0], &[0.1], Some((2.0, form)));
        assert!((r[0].bound.unwrap() - 400.0).abs() < 1e-9);
        assert!(r[0].to_csv().starts_with("horizon,epsilon,time_outside,bound\n"));
    }

    #[test]
    fn fish_adjoint_reaches_steady_multiplier() {
        // [DERIVED] lambda_bar = b / x_bar - c = -1 in the minimization convention
        let fish = make_fish(FishParams::default()).unwrap();
        let steady = solve_sop_default(&fish.problem, 0, Execution::Sequential).unwrap();
        let ih = infinite(&fish.problem, &steady, &[0.5], 0.05);
        let r = transversality_check(&fish.problem, &ih, &steady).unwrap();
        assert!(r.mid_gap <= 1e-3, "{r:?}");
        assert!(r.stationarity_residual <= 1e-4);
        assert!((steady.lambda_bar[0] + 1.0).abs() <= 1e-6);
    }

    #[test]
    fn adjoint_at_steady_state_is_constant() {
        // [TRIVIAL] x0 = x_bar stays put
        let fish = make_fish(FishParams::default()).unwrap();
        let steady = solve_sop_default(&fish.problem, 0, Execution::Sequential).unwrap();
        let ih = infinite(&fish.problem, &steady, &steady.x_bar.clone(), 0.05);
        let worst = ih.solution.dual.adjoints.iter().map(|l| norm_diff(l, &steady.lambda_bar)).fold(0.0, f64::max);
        assert!(worst <= 1e-3, "{worst}");
    }

    #[test]
    fn lq_initial_adjoint_is_value_gradient() {
        // [DERIVED] lambda(0) = dV/dx = 2 P x0
        let lq = make_lq(1.0, 1.0, 1.0, 1.0).unwrap();
        let steady = solve_sop_default(&lq.problem, 0, Execution::Sequential).unwrap();
        let ih = infinite(&lq.problem, &steady, &[1.0], 0.01);
        let p = riccati(1.0, 1.0, 1.0, 1.0);
        assert!((ih.solution.dual.adjoints[0][0] - 2.0 * p).abs() <= 1e-3, "{}", ih.solution.dual.adjoints[0][0]);
        let r = transversality_check(&lq.problem, &ih, &steady).unwrap();
        assert!(r.terminal_gap <= 1e-6);
    }

    #[test]
    fn unaccepted_surrogate_is_refused() {
        // [TRIVIAL]
        let lq = make_lq(1.0, 1.0, 1.0, 1.0).unwrap();
        let steady = solve_sop_default(&lq.problem, 0, Execution::Sequential).unwrap();
        let mut ih = infinite(&lq.problem, &steady, &[1.0], 0.05);
        ih.accepted = false;
        assert!(matches!(transversality_check(&lq.problem, &ih, &steady), Err(Error::Precondition(_))));
    }

    #[test]
    fn lq_decay_rate_is_closed_loop_eigenvalue() {
        // [DERIVED] a - b^2 P / r = -sqrt(2)
        let lq = make_lq(1.0, 1.0, 1.0, 1.0).unwrap();
        let steady = solve_sop_default(&lq.problem, 0, Execution::Sequential).unwrap();
        let ih = infinite(&lq.problem, &steady, &[1.0], 0.05);
        let s = &ih.solution;
        let dev: Vec<f64> = s.primal.states.iter().map(|x| x[0].abs()).collect();
        let fit = fit_exponential(&s.primal.grid, &dev, Some(mid_window(s.horizon))).unwrap();
        let rate = riccati(1.0, 1.0, 1.0, 1.0) - 1.0;
        assert!((fit.rho - rate).abs() <= 0.05 * rate, "{fit:?}");
    }

    #[test]
    fn lq_surrogate_matches_riccati() {
        // [DERIVED] V_inf = P x^2
        let lq = make_lq(1.0, 1.0, 1.0, 1.0).unwrap();
        let steady = solve_sop_default(&lq.problem, 0, Execution::Sequential).unwrap();
        let settings = SurrogateSettings { step: 0.005, ..Default::default() };
        let sur = ValueSurrogate::build(&lq.problem, &steady, 21, settings, Execution::Parallel).unwrap();
        assert_eq!(sur.failures, 0);
        let p = riccati(1.0, 1.0, 1.0, 1.0);
        for i in 0..=10 {
            let x = -1.0 + 0.2 * i as f64;
            assert!((sur.value(&[x]).unwrap() - p * x * x).abs() <= 1e-4);
        }
        assert!(sur.value(&[1.5]).is_none());
    }

    #[test]
    fn multilinear_interpolation_is_exact_on_bilinear_data() {
        // [TRIVIAL]
        let axes = vec![vec![0.0, 0.5, 1.0], vec![-1.0, 1.0]];
        let f = |x: f64, y: f64| 1.0 + 2.0 * x - y + 3.0 * x * y;
        let mut values = Vec::new();
        for x in &axes[0] {
            for y in &axes[1] {
                values.push(f(*x, *y));
            }
        }
        let sur = ValueSurrogate { axes, values, failures: 0, unaccepted: 0 };
        for (x, y) in [(0.1, 0.3), (0.75, -0.9), (1.0, 1.0), (0.5, 0.0)] {
            assert!((sur.value(&[x, y]).unwrap() - f(x, y)).abs() < 1e-12);
        }
        assert_eq!(sur.spacing(), 0.5);
    }

    #[test]
    fn lyapunov_w_decreases_for_fish() {
        // [DERIVED] V_inf + S - S(x_bar) drops by at least alpha along optimal
        // solutions; final value is within interpolation error of 0
        let fish = make_fish(FishParams::default()).unwrap();
        let steady = solve_sop_default(&fish.problem, 0, Execution::Sequential).unwrap();
        let sols: Vec<OcpSolution> = [0.3, 0.7, 0.95, 1.05, 1.5, 2.5]
            .iter()
            .map(|x| solve_ocp(&fish.problem, &[*x], &TranscriptionConfig::new(401, 10.0)).unwrap())
            .collect();
        let mut options = FitOptions::new(4, StrictnessMode::Maximize { p_ell: 2.0, x_only: true });
        options.hjb_grid = Some((fish.problem.initial_set.grid(50), fish.problem.input_set.grid(50)));
        let cert = fit_storage(&fish.problem, &steady, &sols, &options).unwrap();
        let sur = ValueSurrogate::build(&fish.problem, &steady, 21, SurrogateSettings::default(), Execution::Parallel).unwrap();
        let ih = infinite(&fish.problem, &steady, &[0.5], 0.05);
        let w = lyapunov_w(&steady, &cert, &sur, &ih.solution);
        assert_eq!(w.skipped, 0);
        assert!(w.decreasing && w.nonnegative, "{w:?}");
        assert!(w.w_final.unwrap() <= 1e-3);
        assert!(w.w[0].unwrap() > w.w_final.unwrap());
    }

    #[test]
    fn lyapunov_w_vanishes_at_steady_state() {
        // [TRIVIAL] V_inf(x_bar) = 0 and S(x_bar) - S(x_bar) = 0
        let lq = make_lq(1.0, 1.0, 1.0, 1.0).unwrap();
        let steady = solve_sop_default(&lq.problem, 0, Execution::Sequential).unwrap();
        let cert = StorageCertificate {
            degree: 0,
            coefficients: vec![0.0],
            c_ell: 1.0,
            p_ell: 2.0,
            x_only: true,
            nonneg_margin: 0.0,
            worst_di_residual: 0.0,
            n_trajectories: 0,
            center: vec![0.0],
            steady_cost: 0.0,
            exponents: crate::dissipativity::monomials(1, 0),
        };
        let direct = DirectValue::new(&lq.problem, &steady, SurrogateSettings::default());
        let ih = infinite(&lq.problem, &steady, &[0.0], 0.5);
        let w = lyapunov_w(&steady, &cert, &direct, &ih.solution);
        assert!(w.w.iter().all(|v| v.unwrap().abs() <= 1e-6));
    }

    #[test]
    fn gradient_identities_lq_and_fish() {
        // [DERIVED] grad V_inf(x_bar) = lambda_bar = -grad S(x_bar)
        let lq = make_lq(1.0, 1.0, 1.0, 1.0).unwrap();
        let steady = solve_sop_default(&lq.problem, 0, Execution::Sequential).unwrap();
        let sur = ValueSurrogate::build(&lq.problem, &steady, 21, SurrogateSettings::default(), Execution::Parallel).unwrap();
        let gi = gradient_identities(&steady, None, &sur, sur.spacing()).unwrap();
        assert!(gi.value_residual <= 1e-3);
        assert!(matches!(gradient_identities(&steady, None, &sur, 1e-3), Err(Error::InvalidParameter(_))));

        let fish = make_fish(FishParams::default()).unwrap();
        let steady = solve_sop_default(&fish.problem, 0, Execution::Sequential).unwrap();
        let direct = DirectValue::new(&fish.problem, &steady, SurrogateSettings::default());
        let gi = gradient_identities(&steady, None, &direct, 1e-3).unwrap();
        assert!(gi.value_residual <= 1e-2, "{gi:?}");
        assert!(gi.preconditions_violated);
    }

    #[test]
    fn halkin_gradient_identity_not_asserted() {
        // [PAPER] no strict certificate, so the storage side is not reported
        let h = make_halkin();
        let steady = solve_sop_default(&h.problem, 0, Execution::Sequential).unwrap();
        let direct = DirectValue::new(&h.problem, &steady, SurrogateSettings::default());
        let gi = gradient_identities(&steady, None, &direct, 1e-3).unwrap();
        assert!(gi.preconditions_violated);
        assert!(gi.storage_residual.is_none());
    }

    #[test]
    fn pointwise_minimum_principle() {
        // [DERIVED] Halkin: H affine in u with the minimum at u = 1; LQ: interior argmin
        let h = make_halkin();
        let sol = solve_ocp(&h.problem, &[0.5], &TranscriptionConfig::new(201, 10.0)).unwrap();
        let us = h.problem.input_set.grid(101);
        assert!(hamiltonian_pointwise_check(&h.problem, &sol, &us) <= 1e-4);

        let lq = make_lq(1.0, 1.0, 1.0, 1.0).unwrap();
        let sol = solve_ocp(&lq.problem, &[1.0], &TranscriptionConfig::new(201, 10.0)).unwrap();
        let us: Vec<Vec<f64>> = (0..=2000).map(|i| vec![-5.0 + 0.005 * i as f64]).collect();
        let g = hamiltonian_pointwise_check(&lq.problem, &sol, &us);
        assert!(g <= 1e-6, "{g}");
    }

    #[test]
    fn battery_on_fish_and_lq() {
        // [DERIVED] all three statements hold
        let fish = make_fish(FishParams::default()).unwrap();
        let x0: Vec<Vec<f64>> = [0.3, 0.7, 1.5, 2.5].iter().map(|x| vec![*x]).collect();
        let r = equivalence_battery(&fish.problem, &x0, &BatteryOptions::default()).unwrap();
        assert!(r.strictly_dissipative && r.primal_stable && r.adjoint_convergent, "{r:?}");
        assert!(r.agree && r.violated_preconditions.is_empty());
        assert!(r.certificate.as_ref().unwrap().worst_di_residual <= DI_TOL);

        let lq = make_lq(1.0, 1.0, 1.0, 1.0).unwrap();
        let x0: Vec<Vec<f64>> = [-1.0, -0.5, 0.5, 1.0].iter().map(|x| vec![*x]).collect();
        let r = equivalence_battery(&lq.problem, &x0, &BatteryOptions::default()).unwrap();
        assert!(r.strictly_dissipative && r.primal_stable && r.adjoint_convergent);
        let json: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(json["strictly_dissipative"], true);
    }

    #[test]
    fn battery_on_halkin_reports_failed_preconditions() {
        // [PAPER] the state converges, yet no strict certificate exists and
        // x-u regularity fails at lambda_bar = 1
        let h = make_halkin();
        let x0: Vec<Vec<f64>> = [0.1, 0.5, 0.9].iter().map(|x| vec![*x]).collect();
        let r = equivalence_battery(&h.problem, &x0, &BatteryOptions::default()).unwrap();
        assert!(r.state_converges);
        assert!(!r.strictly_dissipative);
        assert!(!r.primal_stable);
        assert!(!r.steady.xu_regular);
        assert!((r.steady.lambda_bar[0] - 1.0).abs() <= 1e-6);
        assert!(!r.agree);
        assert!(r.violated_preconditions.len() >= 2);
    }

    proptest! {
        #[test]
        fn exponential_fit_is_shift_equivariant(c in 0.1f64..10.0, rho in 0.05f64..3.0, shift in -5.0f64..5.0) {
            // [DERIVED] shifting time rescales C by exp(rho shift) and keeps rho
            let t: Vec<f64> = (0..50).map(|k| k as f64 * 0.1).collect();
            let s: Vec<f64> = t.iter().map(|t| c * (-rho * t).exp()).collect();
            let ts: Vec<f64> = t.iter().map(|t| t + shift).collect();
            let a = fit_exponential(&t, &s, None).unwrap();
            let b = fit_exponential(&ts, &s, None).unwrap();
            prop_assert!((a.rho - b.rho).abs() <= 1e-9 * (1.0 + rho));
            prop_assert!((b.c / a.c - (rho * shift).exp()).abs() <= 1e-8 * (rho * shift).exp());
        }
    }
}
