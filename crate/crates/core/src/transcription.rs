//! Trapezoidal collocation, adjoint recovery, horizon sweeps and the
//! infinite-horizon surrogate.

use nalgebra::DVector;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::nlp::{solve_nlp_logged, IterationRecord, NlpOptions, NlpProblem, NlpSolution, NlpStatus, Triplets};
use crate::ocp::{interpolate, uniform_grid, AdjointTrajectory, OcpProblem, Trajectory};
use crate::par::{self, Execution};

/// Terminal treatment of the finite-horizon problem.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalMode {
    Free,
    /// Adds `x_N = x_bar`.
    PinToSteadyState { x_bar: Vec<f64> },
    /// Adds `lambda_bar^T (x_N - x_bar)`, a first-order cost-to-go estimate.
    LinearPenalty { lambda_bar: Vec<f64>, x_bar: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TranscriptionConfig {
    /// Node count `N + 1`.
    pub nodes: usize,
    pub horizon: f64,
    pub terminal: TerminalMode,
    pub nlp: NlpOptions,
}

impl TranscriptionConfig {
    pub fn new(nodes: usize, horizon: f64) -> Self {
        Self { nodes, horizon, terminal: TerminalMode::Free, nlp: NlpOptions::default() }
    }

    pub fn with_terminal(mut self, terminal: TerminalMode) -> Self {
        self.terminal = terminal;
        self
    }

    pub fn intervals(&self) -> usize {
        self.nodes - 1
    }

    pub fn step(&self) -> f64 {
        self.horizon / self.intervals() as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.nodes < 11 {
            return Err(Error::InvalidParameter(format!("need at least 10 intervals, got {}", self.nodes.saturating_sub(1))));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::InvalidParameter("horizon must be positive".into()));
        }
        Ok(())
    }
}

/// Transcribed problem. Variables are `(x_0 .. x_N, u_0 .. u_N)`; equalities
/// are the initial condition, the trapezoidal defects and (if pinned) the
/// terminal state; inequalities are `g` at every node.
pub struct Collocation<'a> {
    problem: &'a OcpProblem,
    x0: Vec<f64>,
    n: usize,
    h: f64,
    terminal: TerminalMode,
}

impl<'a> Collocation<'a> {
    fn nx(&self) -> usize {
        self.problem.state_dim()
    }
    fn nu(&self) -> usize {
        self.problem.input_dim()
    }
    fn xi(&self, k: usize) -> usize {
        k * self.nx()
    }
    fn ui(&self, k: usize) -> usize {
        (self.n + 1) * self.nx() + k * self.nu()
    }
    fn x<'w>(&self, w: &'w [f64], k: usize) -> &'w [f64] {
        &w[self.xi(k)..self.xi(k) + self.nx()]
    }
    fn u<'w>(&self, w: &'w [f64], k: usize) -> &'w [f64] {
        &w[self.ui(k)..self.ui(k) + self.nu()]
    }
    /// Trapezoidal quadrature weight of node `k`.
    pub fn weight(&self, k: usize) -> f64 {
        if k == 0 || k == self.n { 0.5 * self.h } else { self.h }
    }
    pub fn intervals(&self) -> usize {
        self.n
    }
    fn pinned(&self) -> bool {
        matches!(self.terminal, TerminalMode::PinToSteadyState { .. })
    }
    fn pack(&self, states: &[Vec<f64>], inputs: &[Vec<f64>]) -> Vec<f64> {
        let mut w = vec![0.0; self.dim()];
        for k in 0..=self.n {
            w[self.xi(k)..self.xi(k) + self.nx()].copy_from_slice(&states[k]);
            w[self.ui(k)..self.ui(k) + self.nu()].copy_from_slice(&inputs[k]);
        }
        w
    }
}

/// Builds the collocation NLP for `problem` from `x0`.
pub fn transcribe<'a>(problem: &'a OcpProblem, x0: &[f64], config: &TranscriptionConfig) -> Result<Collocation<'a>> {
    config.validate()?;
    if x0.len() != problem.state_dim() {
        return Err(Error::Dimension("initial state has the wrong length".into()));
    }
    match &config.terminal {
        TerminalMode::Free => {}
        TerminalMode::PinToSteadyState { x_bar } => {
            if x_bar.len() != problem.state_dim() {
                return Err(Error::Dimension("pinned terminal state has the wrong length".into()));
            }
        }
        TerminalMode::LinearPenalty { lambda_bar, x_bar } => {
            if lambda_bar.len() != problem.state_dim() || x_bar.len() != problem.state_dim() {
                return Err(Error::Dimension("terminal penalty has the wrong length".into()));
            }
        }
    }
    Ok(Collocation { problem, x0: x0.to_vec(), n: config.intervals(), h: config.step(), terminal: config.terminal.clone() })
}

impl NlpProblem for Collocation<'_> {
    fn dim(&self) -> usize {
        (self.n + 1) * (self.nx() + self.nu())
    }

    fn eq_count(&self) -> usize {
        self.nx() * (self.n + 1) + if self.pinned() { self.nx() } else { 0 }
    }

    fn ineq_count(&self) -> usize {
        self.problem.constraint_count() * (self.n + 1)
    }

    fn objective(&self, w: &[f64]) -> f64 {
        let mut total: f64 = (0..=self.n).map(|k| self.weight(k) * self.problem.stage_cost(self.x(w, k), self.u(w, k))).sum();
        if let TerminalMode::LinearPenalty { lambda_bar, x_bar } = &self.terminal {
            let xn = self.x(w, self.n);
            total += (0..self.nx()).map(|i| lambda_bar[i] * (xn[i] - x_bar[i])).sum::<f64>();
        }
        total
    }

    fn gradient(&self, w: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.dim()];
        for k in 0..=self.n {
            let (lx, lu) = self.problem.cost_gradient(self.x(w, k), self.u(w, k));
            let wk = self.weight(k);
            for i in 0..self.nx() {
                g[self.xi(k) + i] += wk * lx[i];
            }
            for j in 0..self.nu() {
                g[self.ui(k) + j] += wk * lu[j];
            }
        }
        if let TerminalMode::LinearPenalty { lambda_bar, .. } = &self.terminal {
            for i in 0..self.nx() {
                g[self.xi(self.n) + i] += lambda_bar[i];
            }
        }
        g
    }

    fn eq_values(&self, w: &[f64]) -> Vec<f64> {
        let nx = self.nx();
        let mut c = Vec::with_capacity(self.eq_count());
        c.extend(self.x(w, 0).iter().zip(&self.x0).map(|(a, b)| a - b));
        let mut f_prev = self.problem.dynamics(self.x(w, 0), self.u(w, 0));
        for k in 0..self.n {
            let f_next = self.problem.dynamics(self.x(w, k + 1), self.u(w, k + 1));
            let (xa, xb) = (self.x(w, k), self.x(w, k + 1));
            for i in 0..nx {
                c.push(xb[i] - xa[i] - 0.5 * self.h * (f_prev[i] + f_next[i]));
            }
            f_prev = f_next;
        }
        if let TerminalMode::PinToSteadyState { x_bar } = &self.terminal {
            c.extend(self.x(w, self.n).iter().zip(x_bar).map(|(a, b)| a - b));
        }
        c
    }

    fn eq_jacobian(&self, w: &[f64]) -> Triplets {
        let (nx, nu) = (self.nx(), self.nu());
        let mut t = Triplets::new(self.eq_count(), self.dim());
        for i in 0..nx {
            t.push(i, i, 1.0);
        }
        let jac: Vec<_> = (0..=self.n).map(|k| self.problem.dynamics_jacobian(self.x(w, k), self.u(w, k))).collect();
        let hh = 0.5 * self.h;
        for k in 0..self.n {
            let row0 = nx + k * nx;
            for (node, sign) in [(k, -1.0), (k + 1, 1.0)] {
                let (fx, fu) = &jac[node];
                for i in 0..nx {
                    for j in 0..nx {
                        let v = if i == j { sign } else { 0.0 } - hh * fx[(i, j)];
                        t.push(row0 + i, self.xi(node) + j, v);
                    }
                    for j in 0..nu {
                        t.push(row0 + i, self.ui(node) + j, -hh * fu[(i, j)]);
                    }
                }
            }
        }
        if self.pinned() {
            let row0 = nx * (self.n + 1);
            for i in 0..nx {
                t.push(row0 + i, self.xi(self.n) + i, 1.0);
            }
        }
        t
    }

    fn ineq_values(&self, w: &[f64]) -> Vec<f64> {
        (0..=self.n).flat_map(|k| self.problem.constraints(self.x(w, k), self.u(w, k)).iter().copied().collect::<Vec<_>>()).collect()
    }

    fn ineq_jacobian(&self, w: &[f64]) -> Triplets {
        let (nx, nu, ng) = (self.nx(), self.nu(), self.problem.constraint_count());
        let mut t = Triplets::new(self.ineq_count(), self.dim());
        for k in 0..=self.n {
            let (gx, gu) = self.problem.constraints_jacobian(self.x(w, k), self.u(w, k));
            for r in 0..ng {
                for j in 0..nx {
                    t.push(k * ng + r, self.xi(k) + j, gx[(r, j)]);
                }
                for j in 0..nu {
                    t.push(k * ng + r, self.ui(k) + j, gu[(r, j)]);
                }
            }
        }
        t
    }

    fn lagrangian_hessian(&self, w: &[f64], nu_mult: &[f64], mu: &[f64]) -> Option<Triplets> {
        let (nx, nu, ng) = (self.nx(), self.nu(), self.problem.constraint_count());
        let mut t = Triplets::new(self.dim(), self.dim());
        let hh = 0.5 * self.h;
        for k in 0..=self.n {
            let (x, u) = (self.x(w, k), self.u(w, k));
            let mut block = self.problem.cost_hessian(x, u);
            let wk = self.weight(k);
            block.xx *= wk;
            block.xu *= wk;
            block.uu *= wk;
            // defects k-1 and k both contain f at node k with factor -h/2
            let mut cov = vec![0.0; nx];
            for i in 0..nx {
                if k > 0 {
                    cov[i] -= hh * nu_mult[nx + (k - 1) * nx + i];
                }
                if k < self.n {
                    cov[i] -= hh * nu_mult[nx + k * nx + i];
                }
            }
            block.add_scaled(&self.problem.dynamics_hessian(x, u, &cov), 1.0);
            if ng > 0 {
                block.add_scaled(&self.problem.constraints_hessian(x, u, &mu[k * ng..(k + 1) * ng]), 1.0);
            }
            let full = block.assemble();
            let idx = |a: usize| if a < nx { self.xi(k) + a } else { self.ui(k) + a - nx };
            for a in 0..nx + nu {
                for b in 0..nx + nu {
                    t.push(idx(a), idx(b), full[(a, b)]);
                }
            }
        }
        Some(t)
    }
}

/// Primal/dual solution of a transcribed problem.
#[derive(Debug, Clone, Serialize)]
pub struct OcpSolution {
    pub primal: Trajectory,
    pub dual: AdjointTrajectory,
    /// NLP objective: running-cost quadrature plus terminal term.
    pub value: f64,
    pub hamiltonian_profile: Vec<f64>,
    /// Largest per-node magnitude of the Hamiltonian's terms.
    pub hamiltonian_scale: f64,
    pub kkt_residual: f64,
    pub status: NlpStatus,
    pub horizon: f64,
    pub intervals: usize,
    pub terminal: TerminalMode,
}

impl OcpSolution {
    pub fn hamiltonian_mean(&self) -> f64 {
        self.hamiltonian_profile.iter().sum::<f64>() / self.hamiltonian_profile.len() as f64
    }

    pub fn hamiltonian_std(&self) -> f64 {
        let m = self.hamiltonian_mean();
        let n = self.hamiltonian_profile.len() as f64;
        (self.hamiltonian_profile.iter().map(|h| (h - m).powi(2)).sum::<f64>() / n).sqrt()
    }

    /// Standard deviation relative to the Hamiltonian's term magnitudes.
    pub fn hamiltonian_scaled_std(&self) -> f64 {
        self.hamiltonian_std() / self.hamiltonian_scale.max(1e-6)
    }

    pub fn step(&self) -> f64 {
        self.horizon / self.intervals as f64
    }

    /// Sidecar summary.
    pub fn summary(&self) -> SolutionSummary {
        SolutionSummary {
            value: self.value,
            kkt_residual: self.kkt_residual,
            hamiltonian_mean: self.hamiltonian_mean(),
            hamiltonian_std: self.hamiltonian_std(),
            t: self.horizon,
            n: self.intervals,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SolutionSummary {
    pub value: f64,
    pub kkt_residual: f64,
    pub hamiltonian_mean: f64,
    pub hamiltonian_std: f64,
    #[serde(rename = "T")]
    pub t: f64,
    #[serde(rename = "N")]
    pub n: usize,
}

/// Initial guess on an arbitrary grid; resampled onto the collocation mesh.
#[derive(Debug, Clone)]
pub struct Guess {
    pub grid: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub inputs: Vec<Vec<f64>>,
    /// Values held beyond the end of `grid`.
    pub hold: Option<(Vec<f64>, Vec<f64>)>,
}

impl Guess {
    pub fn from_solution(sol: &OcpSolution, hold: Option<(Vec<f64>, Vec<f64>)>) -> Self {
        Self { grid: sol.primal.grid.clone(), states: sol.primal.states.clone(), inputs: sol.primal.inputs.clone(), hold }
    }

    fn sample(&self, t: f64) -> (Vec<f64>, Vec<f64>) {
        let end = self.grid[self.grid.len() - 1];
        match &self.hold {
            Some((x, u)) if t > end => (x.clone(), u.clone()),
            _ => (interpolate(&self.grid, &self.states, t), interpolate(&self.grid, &self.inputs, t)),
        }
    }
}

fn default_guess(problem: &OcpProblem, x0: &[f64], n: usize, hold_input: Option<&[f64]>) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let u = hold_input.map(|u| u.to_vec()).unwrap_or_else(|| problem.input_set.center());
    (vec![x0.to_vec(); n + 1], vec![u; n + 1])
}

pub fn solve_ocp(problem: &OcpProblem, x0: &[f64], config: &TranscriptionConfig) -> Result<OcpSolution> {
    solve_ocp_with(problem, x0, config, None, &mut |_| {})
}

/// Solves from an optional guess, streaming NLP iterations to `log`.
pub fn solve_ocp_with(
    problem: &OcpProblem,
    x0: &[f64],
    config: &TranscriptionConfig,
    guess: Option<&Guess>,
    log: &mut dyn FnMut(&IterationRecord),
) -> Result<OcpSolution> {
    let col = transcribe(problem, x0, config)?;
    let grid = uniform_grid(config.horizon, col.n);
    let (states, inputs) = match guess {
        Some(g) => {
            let (mut xs, mut us) = (Vec::new(), Vec::new());
            for t in &grid {
                let (x, u) = g.sample(*t);
                xs.push(x);
                us.push(u);
            }
            xs[0] = x0.to_vec();
            (xs, us)
        }
        None => default_guess(problem, x0, col.n, None),
    };
    let start = col.pack(&states, &inputs);
    let sol = solve_nlp_logged(&col, &start, &config.nlp, log);
    if sol.status != NlpStatus::Converged {
        return Err(Error::Solver { status: sol.status.to_string(), kkt_residual: sol.kkt_residual });
    }
    extract(&col, &grid, &sol)
}

fn extract(col: &Collocation<'_>, grid: &[f64], sol: &NlpSolution) -> Result<OcpSolution> {
    let problem = col.problem;
    let (nx, ng, n, h) = (col.nx(), problem.constraint_count(), col.n, col.h);
    let w = &sol.primal;
    let states: Vec<Vec<f64>> = (0..=n).map(|k| col.x(w, k).to_vec()).collect();
    let inputs: Vec<Vec<f64>> = (0..=n).map(|k| col.u(w, k).to_vec()).collect();
    let primal = Trajectory::new(problem, grid.to_vec(), states, inputs)?;

    let nu = &sol.eq_multipliers;
    let multipliers: Vec<Vec<f64>> = (0..=n)
        .map(|k| sol.ineq_multipliers[k * ng..(k + 1) * ng].iter().map(|z| z / col.weight(k)).collect())
        .collect();
    // interval adjoints lambda_{k+1/2} = -nu_k
    let mid: Vec<DVector<f64>> = (0..n).map(|k| -DVector::from_column_slice(&nu[nx + k * nx..nx + (k + 1) * nx])).collect();
    let mut adjoints = Vec::with_capacity(n + 1);
    adjoints.push(nu[..nx].iter().map(|v| -v).collect::<Vec<f64>>());
    for k in 1..n {
        adjoints.push(((&mid[k - 1] + &mid[k]) * 0.5).iter().copied().collect());
    }
    {
        // half-step from the last interval using the node-N stationarity
        let (x, u) = (&primal.states[n], &primal.inputs[n]);
        let (lx, _) = problem.cost_gradient(x, u);
        let (fx, _) = problem.dynamics_jacobian(x, u);
        let lam = &mid[n - 1];
        let mut end = lam - (lx + fx.transpose() * lam) * (0.5 * h);
        if ng > 0 {
            let (gx, _) = problem.constraints_jacobian(x, u);
            let z = DVector::from_column_slice(&sol.ineq_multipliers[n * ng..(n + 1) * ng]);
            end -= gx.transpose() * z;
        }
        adjoints.push(end.iter().copied().collect());
    }
    let dual = AdjointTrajectory { grid: grid.to_vec(), adjoints, multipliers };

    let mut scale = 0.0_f64;
    let hamiltonian_profile = (0..=n)
        .map(|k| {
            let (x, u) = (&primal.states[k], &primal.inputs[k]);
            let l = problem.stage_cost(x, u);
            let f = problem.dynamics(x, u);
            let lf: f64 = f.iter().zip(&dual.adjoints[k]).map(|(a, b)| a * b).sum();
            let mg: f64 = if ng > 0 {
                problem.constraints(x, u).iter().zip(&dual.multipliers[k]).map(|(a, b)| a * b).sum()
            } else {
                0.0
            };
            scale = scale.max(l.abs()).max(lf.abs()).max(mg.abs());
            l + lf + mg
        })
        .collect();

    Ok(OcpSolution {
        primal,
        dual,
        value: sol.objective,
        hamiltonian_profile,
        hamiltonian_scale: scale,
        kkt_residual: sol.kkt_residual,
        status: sol.status,
        horizon: grid[grid.len() - 1],
        intervals: n,
        terminal: col.terminal.clone(),
    })
}

/// One entry of a horizon sweep.
#[derive(Debug, Clone)]
pub struct SweepEntry {
    pub horizon: f64,
    pub outcome: std::result::Result<OcpSolution, String>,
}

impl SweepEntry {
    pub fn value(&self) -> Option<f64> {
        self.outcome.as_ref().ok().map(|s| s.value)
    }
}

/// Node count for `horizon` at the mesh step of `base`.
pub fn nodes_for(base: &TranscriptionConfig, horizon: f64) -> usize {
    let n = (horizon / base.step()).round() as usize;
    n.max(10) + 1
}

/// Solves each horizon at the mesh step of `config_base`. With `warm_start`
/// the previous solution extended by `hold` seeds the next solve (sequential);
/// otherwise the horizons are solved independently under `exec`.
pub fn horizon_sweep(
    problem: &OcpProblem,
    x0: &[f64],
    horizons: &[f64],
    config_base: &TranscriptionConfig,
    hold: Option<(Vec<f64>, Vec<f64>)>,
    warm_start: bool,
    exec: Execution,
) -> Result<Vec<SweepEntry>> {
    if horizons.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidParameter("horizons must be increasing".into()));
    }
    let config_for = |t: f64| TranscriptionConfig { nodes: nodes_for(config_base, t), horizon: t, ..config_base.clone() };
    if !warm_start {
        return Ok(par::map(exec, horizons, |t| SweepEntry {
            horizon: *t,
            outcome: solve_ocp(problem, x0, &config_for(*t)).map_err(|e| e.to_string()),
        }));
    }
    let mut out: Vec<SweepEntry> = Vec::with_capacity(horizons.len());
    let mut prev: Option<Guess> = None;
    for t in horizons {
        let outcome = solve_ocp_with(problem, x0, &config_for(*t), prev.as_ref(), &mut |_| {})
            .or_else(|e| match prev {
                Some(_) => solve_ocp(problem, x0, &config_for(*t)),
                None => Err(e),
            })
            .map_err(|e| e.to_string());
        if let Ok(sol) = &outcome {
            prev = Some(Guess::from_solution(sol, hold.clone()));
        }
        out.push(SweepEntry { horizon: *t, outcome });
    }
    Ok(out)
}

/// Steady tuple needed by the infinite-horizon surrogate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SteadyTarget {
    pub x_bar: Vec<f64>,
    pub u_bar: Vec<f64>,
    pub lambda_bar: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct InfiniteHorizonSolution {
    pub solution: OcpSolution,
    /// Set when both the value and the terminal state settled within `tol`.
    pub accepted: bool,
    pub history: Vec<(f64, f64)>,
}

pub const T_START: f64 = 5.0;
pub const T_MAX: f64 = 200.0;

/// Doubles the horizon from `T_START` under the linear terminal penalty until
/// `|V_T - V_2T| <= tol` and `|x_N - x_bar| <= tol`, at mesh step `step`.
pub fn approx_infinite_horizon(
    problem: &OcpProblem,
    x0: &[f64],
    steady: &SteadyTarget,
    tol: f64,
    step: f64,
    nlp: NlpOptions,
) -> Result<InfiniteHorizonSolution> {
    let terminal = TerminalMode::LinearPenalty { lambda_bar: steady.lambda_bar.clone(), x_bar: steady.x_bar.clone() };
    let solve = |t: f64, guess: Option<&Guess>| {
        let nodes = ((t / step).round() as usize).max(10) + 1;
        let config = TranscriptionConfig { nodes, horizon: t, terminal: terminal.clone(), nlp };
        let hold_guess;
        let guess = match guess {
            Some(g) => Some(g),
            None => {
                let n = nodes - 1;
                let (mut xs, us) = default_guess(problem, x0, n, Some(&steady.u_bar));
                // steady hold after a linear blend over the first tenth
                for (k, x) in xs.iter_mut().enumerate() {
                    let s = (k as f64 / (0.1 * n as f64)).min(1.0);
                    for i in 0..x.len() {
                        x[i] = x0[i] + s * (steady.x_bar[i] - x0[i]);
                    }
                }
                hold_guess = Guess { grid: uniform_grid(t, n), states: xs, inputs: us, hold: None };
                Some(&hold_guess)
            }
        };
        solve_ocp_with(problem, x0, &config, guess, &mut |_| {})
            .or_else(|_| solve_ocp(problem, x0, &config))
    };
    let mut t = T_START;
    let mut current = solve(t, None)?;
    let mut history = vec![(t, current.value)];
    loop {
        let next_t = 2.0 * t;
        if next_t > T_MAX + 1e-9 {
            return Ok(InfiniteHorizonSolution { solution: current, accepted: false, history });
        }
        let guess = Guess::from_solution(&current, Some((steady.x_bar.clone(), steady.u_bar.clone())));
        let next = match solve(next_t, Some(&guess)) {
            Ok(s) => s,
            Err(_) => solve(next_t, None)?,
        };
        history.push((next_t, next.value));
        let xn = &next.primal.states[next.intervals];
        let dist = xn.iter().zip(&steady.x_bar).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let settled = (next.value - current.value).abs() <= tol && dist <= tol;
        current = next;
        t = next_t;
        if settled {
            return Ok(InfiniteHorizonSolution { solution: current, accepted: true, history });
        }
    }
}
