//! Storage functions and dissipation inequalities along optimal solutions.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nlp::{solve_lp, LpProblem, LpStatus};
use crate::ocp::{OcpProblem, Trajectory};
use crate::par::Execution;
use crate::sop::{SteadyStateSolution, DISTINCT_TOL, OBJECTIVE_TIE_TOL};
use crate::transcription::{horizon_sweep, solve_ocp, OcpSolution, SweepEntry, TranscriptionConfig};

/// Bound on every storage coefficient in the fitting LP.
pub const COEF_BOUND: f64 = 1e3;
/// Upper bound on the strictness constant in the fitting LP.
pub const C_ELL_MAX: f64 = 1e2;
/// Largest admissible dissipation residual of a valid certificate.
pub const DI_TOL: f64 = 1e-6;
/// Storage may dip this far below zero on the validation grid.
pub const NONNEG_TOL: f64 = 1e-8;
/// Slack added to every dissipation row of the LP. Rows that hold with
/// equality (non-strict problems) are otherwise lost to quadrature and shift
/// round-off.
pub const ROW_SLACK: f64 = 1e-7;

/// `alpha(s) = c s^p`, with `s = |z - z_bar|` or `|x - x_bar|`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrictnessForm {
    pub c_ell: f64,
    pub p_ell: f64,
    #[serde(default)]
    pub x_only: bool,
}

impl StrictnessForm {
    pub fn new(c_ell: f64, p_ell: f64) -> Result<Self> {
        if !(c_ell >= 0.0) || !(p_ell >= 1.0) {
            return Err(Error::InvalidParameter(format!("strictness needs c >= 0 and p >= 1, got c = {c_ell}, p = {p_ell}")));
        }
        Ok(Self { c_ell, p_ell, x_only: false })
    }

    pub fn alpha(&self, s: f64) -> f64 {
        self.c_ell * s.powf(self.p_ell)
    }

    /// Distance entering `alpha`.
    pub fn distance(&self, steady: &SteadyStateSolution, x: &[f64], u: &[f64]) -> f64 {
        let mut d2: f64 = x.iter().zip(&steady.x_bar).map(|(a, b)| (a - b).powi(2)).sum();
        if !self.x_only {
            d2 += u.iter().zip(&steady.u_bar).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        }
        d2.sqrt()
    }

    pub fn alpha_at(&self, steady: &SteadyStateSolution, x: &[f64], u: &[f64]) -> f64 {
        self.alpha(self.distance(steady, x, u))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StrictnessMode {
    None,
    Fixed(StrictnessForm),
    Maximize { p_ell: f64, x_only: bool },
}

/// Polynomial storage in `x - x_bar`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StorageCertificate {
    pub degree: usize,
    pub coefficients: Vec<f64>,
    pub c_ell: f64,
    pub p_ell: f64,
    pub x_only: bool,
    pub nonneg_margin: f64,
    pub worst_di_residual: f64,
    pub n_trajectories: usize,
    pub center: Vec<f64>,
    /// `l(z_bar)` of the problem the certificate was fitted on; supplies are
    /// measured relative to it.
    pub steady_cost: f64,
    /// Exponent vector of each basis monomial.
    pub exponents: Vec<Vec<u32>>,
}

impl StorageCertificate {
    pub fn strictness(&self) -> StrictnessForm {
        StrictnessForm { c_ell: self.c_ell, p_ell: self.p_ell, x_only: self.x_only }
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        let phi = basis_values(&self.exponents, &self.center, x);
        phi.iter().zip(&self.coefficients).map(|(a, b)| a * b).sum()
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        for (dphi, c) in basis_gradients(&self.exponents, &self.center, x).iter().zip(&self.coefficients) {
            for (gi, di) in g.iter_mut().zip(dphi) {
                *gi += c * di;
            }
        }
        g
    }

    /// Coefficients of the degree-one monomials, i.e. `grad S(x_bar)`.
    pub fn linear_part(&self) -> Vec<f64> {
        let nx = self.center.len();
        let mut out = vec![0.0; nx];
        for (e, c) in self.exponents.iter().zip(&self.coefficients) {
            if e.iter().sum::<u32>() == 1 {
                let i = e.iter().position(|p| *p == 1).unwrap();
                out[i] = *c;
            }
        }
        out
    }

    /// Strict certificate with a valid residual.
    pub fn is_valid(&self) -> bool {
        self.worst_di_residual <= DI_TOL && self.nonneg_margin >= -NONNEG_TOL
    }
}

/// Monomials of total degree `0..=degree` in `nx` variables, by degree then
/// lexicographically.
pub fn monomials(nx: usize, degree: usize) -> Vec<Vec<u32>> {
    fn rec(nx: usize, left: u32, prefix: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if prefix.len() == nx - 1 {
            prefix.push(left);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for p in (0..=left).rev() {
            prefix.push(p);
            rec(nx, left - p, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    for d in 0..=degree as u32 {
        rec(nx, d, &mut Vec::new(), &mut out);
    }
    out
}

fn basis_values(exponents: &[Vec<u32>], center: &[f64], x: &[f64]) -> Vec<f64> {
    exponents
        .iter()
        .map(|e| e.iter().zip(x.iter().zip(center)).map(|(p, (a, b))| (a - b).powi(*p as i32)).product())
        .collect()
}

/// Gradient of every basis monomial at `x`.
fn basis_gradients(exponents: &[Vec<u32>], center: &[f64], x: &[f64]) -> Vec<Vec<f64>> {
    let d: Vec<f64> = x.iter().zip(center).map(|(a, b)| a - b).collect();
    exponents
        .iter()
        .map(|e| {
            (0..x.len())
                .map(|i| {
                    if e[i] == 0 {
                        return 0.0;
                    }
                    e.iter()
                        .enumerate()
                        .map(|(j, &p)| d[j].powi(if j == i { p as i32 - 1 } else { p as i32 }))
                        .product::<f64>()
                        * e[i] as f64
                })
                .collect()
        })
        .collect()
}

/// One dissipation row along a trajectory: `S(x_k) - S(x_0) <= L_k - c A_k`.
#[derive(Debug, Clone)]
struct DiRow {
    dphi: Vec<f64>,
    cost: f64,
    alpha_integral: f64,
}

fn trajectory_rows(
    problem: &OcpProblem,
    steady: &SteadyStateSolution,
    traj: &Trajectory,
    exponents: &[Vec<u32>],
    unit: &StrictnessForm,
) -> Vec<DiRow> {
    let phi0 = basis_values(exponents, &steady.x_bar, &traj.states[0]);
    let mut rows = Vec::with_capacity(traj.len());
    let (mut cost, mut alpha) = (0.0, 0.0);
    let l_bar = problem.stage_cost(&steady.x_bar, &steady.u_bar);
    let l = |k: usize| problem.stage_cost(&traj.states[k], &traj.inputs[k]) - l_bar;
    let a = |k: usize| unit.alpha_at(steady, &traj.states[k], &traj.inputs[k]);
    for k in 1..traj.len() {
        let h = traj.grid[k] - traj.grid[k - 1];
        cost += 0.5 * h * (l(k - 1) + l(k));
        alpha += 0.5 * h * (a(k - 1) + a(k));
        let phi = basis_values(exponents, &steady.x_bar, &traj.states[k]);
        rows.push(DiRow { dphi: phi.iter().zip(&phi0).map(|(p, q)| p - q).collect(), cost, alpha_integral: alpha });
    }
    rows
}

/// Options of `fit_storage`.
#[derive(Debug, Clone)]
pub struct FitOptions {
    pub degree: usize,
    pub mode: StrictnessMode,
    /// Points per state dimension of the nonnegativity grid over the initial set.
    pub grid_per_dim: usize,
    /// Steady pairs other than `z_bar` whose constant solutions are optimal.
    pub steady_pairs: Vec<(Vec<f64>, Vec<f64>)>,
    /// Optional `(x_grid, u_grid)`: also impose the differential form
    /// `grad S(x)^T f(x, u) + alpha <= l(x, u)` at every feasible grid pair.
    pub hjb_grid: Option<(Vec<Vec<f64>>, Vec<Vec<f64>>)>,
}

impl FitOptions {
    pub fn new(degree: usize, mode: StrictnessMode) -> Self {
        Self { degree, mode, grid_per_dim: 51, steady_pairs: Vec::new(), hjb_grid: None }
    }
}

/// LP rows in terms of `(coefficients, c)`; `c` enters only when maximizing.
struct Rows {
    a: Vec<Vec<f64>>,
    alpha: Vec<f64>,
    b: Vec<f64>,
}

impl Rows {
    fn push(&mut self, a: Vec<f64>, alpha: f64, b: f64) {
        self.a.push(a);
        self.alpha.push(alpha);
        self.b.push(b);
    }

    fn push_relaxed(&mut self, a: Vec<f64>, alpha: f64, b: f64) {
        self.push(a, alpha, b + ROW_SLACK);
    }

    fn violation(&self, i: usize, coef: &[f64], c: f64) -> f64 {
        let lhs: f64 = self.a[i].iter().zip(coef).map(|(x, y)| x * y).sum::<f64>() + c * self.alpha[i];
        lhs - self.b[i]
    }
}

/// Two-stage LP. With `c` free: maximize `c`, then fix it at half the optimum.
/// Then minimize the l1 norm of the coefficients. Rows are added by
/// constraint generation from a subsampled start.
fn solve_storage_lp(rows: &Rows, m: usize, c_fixed: Option<f64>) -> Result<(Vec<f64>, f64)> {
    let total = rows.a.len();
    let mut active: Vec<bool> = vec![false; total];
    let stride = (total / 60).max(1);
    for i in (0..total).step_by(stride) {
        active[i] = true;
    }

    // variables: coef (m, bounded), c (1), t (m, >= |coef|)
    let solve = |active: &[bool], stage: u8, c_value: f64| -> Result<(Vec<f64>, f64)> {
        let n = 2 * m + 1;
        let mut cost = DVector::zeros(n);
        if stage == 1 {
            cost[m] = -1.0;
        } else {
            for i in 0..m {
                cost[m + 1 + i] = 1.0;
            }
        }
        let mut lp = LpProblem::new(cost);
        for i in 0..m {
            lp.lower[i] = -COEF_BOUND;
            lp.upper[i] = COEF_BOUND;
        }
        if stage == 1 {
            lp.lower[m] = 0.0;
            lp.upper[m] = C_ELL_MAX;
        } else {
            lp.lower[m] = c_value;
            lp.upper[m] = c_value;
        }
        for i in 0..m {
            lp.lower[m + 1 + i] = 0.0;
            lp.upper[m + 1 + i] = COEF_BOUND;
            if stage == 2 {
                let mut r = vec![0.0; n];
                r[i] = 1.0;
                r[m + 1 + i] = -1.0;
                lp.push_ub(&r, 0.0);
                r[i] = -1.0;
                lp.push_ub(&r, 0.0);
            }
        }
        for (i, on) in active.iter().enumerate() {
            if *on {
                let mut r = vec![0.0; n];
                r[..m].copy_from_slice(&rows.a[i]);
                r[m] = rows.alpha[i];
                lp.push_ub(&r, rows.b[i]);
            }
        }
        let sol = solve_lp(&lp);
        match sol.status {
            LpStatus::Optimal => Ok((sol.x[..m].to_vec(), sol.x[m])),
            LpStatus::Infeasible => Err(Error::Solver {
                status: "storage LP infeasible: not even non-strictly certifiable at this degree".into(),
                kkt_residual: sol.infeasibility,
            }),
            LpStatus::Unbounded => Err(Error::Solver { status: "storage LP unbounded".into(), kkt_residual: f64::NAN }),
        }
    };

    let generate = |active: &mut Vec<bool>, stage: u8, c_value: f64| -> Result<(Vec<f64>, f64)> {
        loop {
            let (coef, c) = solve(active, stage, c_value)?;
            let mut violated: Vec<(f64, usize)> = (0..total)
                .filter(|&i| !active[i])
                .map(|i| (rows.violation(i, &coef, c), i))
                .filter(|(v, _)| *v > 1e-10)
                .collect();
            if violated.is_empty() {
                return Ok((coef, c));
            }
            violated.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            for (_, i) in violated.into_iter().take(40) {
                active[i] = true;
            }
        }
    };

    let c_value = match c_fixed {
        Some(c) => c,
        None => {
            let (_, c_star) = generate(&mut active, 1, 0.0)?;
            0.5 * c_star
        }
    };
    generate(&mut active, 2, c_value)
}

/// Fits a polynomial storage so that the dissipation inequality holds from
/// the initial node of every supplied optimal solution, `S >= 0` on a grid
/// over the initial set, and constant solutions at `steady_pairs` are
/// dissipative as well.
pub fn fit_storage(
    problem: &OcpProblem,
    steady: &SteadyStateSolution,
    solutions: &[OcpSolution],
    options: &FitOptions,
) -> Result<StorageCertificate> {
    if solutions.len() < 3 {
        return Err(Error::Precondition(format!("storage fitting needs solutions from at least 3 initial states, got {}", solutions.len())));
    }
    let nx = problem.state_dim();
    let exponents = monomials(nx, options.degree);
    let m = exponents.len();
    let (p_ell, x_only, c_fixed) = match options.mode {
        StrictnessMode::None => (1.0, false, Some(0.0)),
        StrictnessMode::Fixed(f) => (f.p_ell, f.x_only, Some(f.c_ell)),
        StrictnessMode::Maximize { p_ell, x_only } => (p_ell, x_only, None),
    };
    let unit = StrictnessForm { c_ell: 1.0, p_ell, x_only };
    if !(p_ell >= 1.0) {
        return Err(Error::InvalidParameter(format!("p_ell must be >= 1, got {p_ell}")));
    }

    let l_bar = problem.stage_cost(&steady.x_bar, &steady.u_bar);
    let mut rows = Rows { a: Vec::new(), alpha: Vec::new(), b: Vec::new() };
    for sol in solutions {
        for r in trajectory_rows(problem, steady, &sol.primal, &exponents, &unit) {
            rows.push_relaxed(r.dphi, r.alpha_integral, r.cost);
        }
    }
    // constant solutions at other optimal steady pairs: 0 <= t (l - c alpha)
    for (x, u) in &options.steady_pairs {
        rows.push_relaxed(vec![0.0; m], unit.alpha_at(steady, x, u), problem.stage_cost(x, u) - l_bar);
    }
    if let Some((xs, us)) = &options.hjb_grid {
        for x in xs {
            let dphi = basis_gradients(&exponents, &steady.x_bar, x);
            for u in us {
                if problem.max_violation(x, u) > 1e-12 {
                    continue;
                }
                let f = problem.dynamics(x, u);
                let a = dphi.iter().map(|g| g.iter().zip(f.iter()).map(|(p, q)| p * q).sum()).collect();
                rows.push_relaxed(a, unit.alpha_at(steady, x, u), problem.stage_cost(x, u) - l_bar);
            }
        }
    }
    let grid = problem.initial_set.grid(options.grid_per_dim);
    for x in &grid {
        let phi = basis_values(&exponents, &steady.x_bar, x);
        rows.push(phi.iter().map(|v| -v).collect(), 0.0, 0.0);
    }

    let (coefficients, c_ell) = solve_storage_lp(&rows, m, c_fixed)?;
    let mut cert = StorageCertificate {
        degree: options.degree,
        coefficients,
        c_ell,
        p_ell,
        x_only,
        nonneg_margin: 0.0,
        worst_di_residual: 0.0,
        n_trajectories: solutions.len(),
        center: steady.x_bar.clone(),
        steady_cost: l_bar,
        exponents,
    };
    cert.nonneg_margin = grid.iter().map(|x| cert.value(x)).fold(f64::INFINITY, f64::min);
    cert.worst_di_residual = dissipation_residual(problem, steady, &cert, solutions);
    Ok(cert)
}

/// Largest `S(x_k) - S(x_0) - int_0^{t_k} (l - alpha) dt` over all nodes of
/// the given solutions (trapezoidal quadrature).
pub fn dissipation_residual(
    problem: &OcpProblem,
    steady: &SteadyStateSolution,
    cert: &StorageCertificate,
    solutions: &[OcpSolution],
) -> f64 {
    let form = cert.strictness();
    let unit = StrictnessForm { c_ell: 1.0, ..form };
    let mut worst = f64::NEG_INFINITY;
    for sol in solutions {
        for r in trajectory_rows(problem, steady, &sol.primal, &cert.exponents, &unit) {
            let ds: f64 = r.dphi.iter().zip(&cert.coefficients).map(|(a, b)| a * b).sum();
            worst = worst.max(ds - r.cost + cert.c_ell * r.alpha_integral);
        }
    }
    worst
}

/// Other SOP minimizers (tied objective, at least `DISTINCT_TOL` away from
/// `z_bar`) whose constant solution over `horizon` is optimal, i.e. the
/// horizon-`horizon` value from `x'` is not below `horizon * l(z')`.
pub fn optimal_steady_alternatives(
    problem: &OcpProblem,
    steady: &SteadyStateSolution,
    config: &TranscriptionConfig,
) -> Vec<(Vec<f64>, Vec<f64>)> {
    let nx = problem.state_dim();
    let z_bar: Vec<f64> = steady.x_bar.iter().chain(&steady.u_bar).copied().collect();
    let usable: Vec<_> = steady.local_solutions.iter().filter(|l| l.kkt_residual <= 1e-6).collect();
    let best = usable.iter().map(|l| l.objective).fold(f64::INFINITY, f64::min);
    let mut out: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    for l in usable {
        if l.objective > best + OBJECTIVE_TIE_TOL {
            continue;
        }
        let dist = l.point.iter().zip(&z_bar).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        if dist < DISTINCT_TOL || out.iter().any(|(x, u)| {
            x.iter().chain(u).zip(&l.point).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() < DISTINCT_TOL
        }) {
            continue;
        }
        let (x, u) = l.point.split_at(nx);
        let stay = config.horizon * problem.stage_cost(x, u);
        if let Ok(sol) = solve_ocp(problem, x, config) {
            if sol.value >= stay - 1e-6 * config.horizon.max(1.0) {
                out.push((x.to_vec(), u.to_vec()));
            }
        }
    }
    out
}

/// Record of an available-storage estimate.
#[derive(Debug, Clone, Serialize)]
pub struct AvailableStorage {
    pub estimate: f64,
    /// The supremum over the horizons was negative and got clamped to 0.
    pub clamped: bool,
    /// `(T, value of the integral whose supremum is taken)`.
    pub records: Vec<(f64, f64)>,
    /// The last doubling changed the estimate by at most `1e-4`.
    pub saturated: bool,
    /// Least-squares slope of the records against `T`.
    pub slope: f64,
    /// Growth in `T` suggests an unbounded supremum.
    pub diverging: bool,
}

fn sweep_values(entries: &[SweepEntry]) -> Result<Vec<(f64, &OcpSolution)>> {
    entries
        .iter()
        .map(|e| match &e.outcome {
            Ok(s) => Ok((e.horizon, s)),
            Err(msg) => Err(Error::Solver { status: format!("horizon {}: {msg}", e.horizon), kkt_residual: f64::NAN }),
        })
        .collect()
}

fn summarize(records: Vec<(f64, f64)>) -> AvailableStorage {
    let sup = records.iter().map(|r| r.1).fold(f64::NEG_INFINITY, f64::max);
    let n = records.len();
    let saturated = n >= 2 && {
        let (a, b) = (records[n - 2], records[n - 1]);
        (b.0 - 2.0 * a.0).abs() <= 1e-9 * b.0 && (b.1 - a.1).abs() <= 1e-4
    };
    let slope = if n >= 2 {
        let mt = records.iter().map(|r| r.0).sum::<f64>() / n as f64;
        let mv = records.iter().map(|r| r.1).sum::<f64>() / n as f64;
        let sxy: f64 = records.iter().map(|r| (r.0 - mt) * (r.1 - mv)).sum();
        let sxx: f64 = records.iter().map(|r| (r.0 - mt).powi(2)).sum();
        if sxx > 0.0 { sxy / sxx } else { 0.0 }
    } else {
        0.0
    };
    AvailableStorage { estimate: sup.max(0.0), clamped: sup < 0.0, records, saturated, slope, diverging: !saturated && slope > 1e-3 }
}

/// `max(0, sup_T -V_T(x0))` over the given horizons (shifted cost assumed).
pub fn available_storage_nonstrict(
    problem: &OcpProblem,
    x0: &[f64],
    horizons: &[f64],
    config_base: &TranscriptionConfig,
    exec: Execution,
) -> Result<AvailableStorage> {
    let entries = horizon_sweep(problem, x0, horizons, config_base, None, false, exec)?;
    let records = sweep_values(&entries)?.into_iter().map(|(t, s)| (t, -s.value)).collect();
    Ok(summarize(records))
}

/// `max(0, sup_T int_0^T [alpha - l] dt)` along the horizon-`T` optimal solutions.
pub fn available_storage_strict(
    problem: &OcpProblem,
    x0: &[f64],
    steady: &SteadyStateSolution,
    strictness: &StrictnessForm,
    horizons: &[f64],
    config_base: &TranscriptionConfig,
    exec: Execution,
) -> Result<AvailableStorage> {
    let entries = horizon_sweep(problem, x0, horizons, config_base, None, false, exec)?;
    let records = sweep_values(&entries)?
        .into_iter()
        .map(|(t, s)| {
            let tr = &s.primal;
            let g: Vec<f64> = (0..tr.len())
                .map(|k| strictness.alpha_at(steady, &tr.states[k], &tr.inputs[k]) - problem.stage_cost(&tr.states[k], &tr.inputs[k]))
                .collect();
            (t, crate::ocp::trapezoid(&tr.grid, |k| g[k]))
        })
        .collect();
    Ok(summarize(records))
}

/// `max_x -min_u [l(x, u) - grad S(x)^T f(x, u)]` over feasible grid pairs.
/// The dissipation inequality in differential form is `grad S^T f <= l`, so a
/// nonpositive result means `S` passes the subsolution test on the grid.
pub fn hjb_subsolution_check(
    problem: &OcpProblem,
    cert: &StorageCertificate,
    x_grid: &[Vec<f64>],
    u_grid: &[Vec<f64>],
) -> f64 {
    let mut worst = f64::NEG_INFINITY;
    for x in x_grid {
        let gs = cert.gradient(x);
        let mut best = f64::INFINITY;
        for u in u_grid {
            if problem.max_violation(x, u) > 1e-12 {
                continue;
            }
            let f = problem.dynamics(x, u);
            let sf: f64 = gs.iter().zip(f.iter()).map(|(a, b)| a * b).sum();
            best = best.min(problem.stage_cost(x, u) - cert.steady_cost - sf);
        }
        if best.is_finite() {
            worst = worst.max(-best);
        }
    }
    worst
}
