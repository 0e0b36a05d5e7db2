//! Problem definitions, open-loop simulation and the semigroup check.
//!
//! An [`OcpProblem`] minimizes the integral of a stage cost subject to
//! `x' = f(x, u)` and path constraints `g(x, u) <= 0`. The Hamiltonian used
//! throughout the crate is `H = l + lambda^T f + mu^T g` with the cost
//! multiplier fixed to one, so the adjoint obeys `lambda' = -H_x` and equals
//! the gradient of the value function along optimal trajectories.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};

pub const FEASIBILITY_TOL: f64 = 1e-6;
pub const COMPLEMENTARITY_TOL: f64 = 1e-6;

/// Second-order block of a scalar map (or of a covector contraction of a
/// vector map) in `(x, u)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SecondOrder {
    pub xx: DMatrix<f64>,
    /// `d^2 / dx du`, shape `n_x x n_u`.
    pub xu: DMatrix<f64>,
    pub uu: DMatrix<f64>,
}

impl SecondOrder {
    pub fn zeros(nx: usize, nu: usize) -> Self {
        Self { xx: DMatrix::zeros(nx, nx), xu: DMatrix::zeros(nx, nu), uu: DMatrix::zeros(nu, nu) }
    }

    pub fn add_scaled(&mut self, other: &SecondOrder, scale: f64) {
        self.xx += &other.xx * scale;
        self.xu += &other.xu * scale;
        self.uu += &other.uu * scale;
    }

    /// Full symmetric matrix over `(x, u)`.
    pub fn assemble(&self) -> DMatrix<f64> {
        let nx = self.xx.nrows();
        let nu = self.uu.nrows();
        let mut m = DMatrix::zeros(nx + nu, nx + nu);
        m.view_mut((0, 0), (nx, nx)).copy_from(&self.xx);
        m.view_mut((0, nx), (nx, nu)).copy_from(&self.xu);
        m.view_mut((nx, 0), (nu, nx)).copy_from(&self.xu.transpose());
        m.view_mut((nx, nx), (nu, nu)).copy_from(&self.uu);
        m
    }
}

/// Problem data with analytic derivatives. Second derivatives of vector maps
/// are requested as contractions with a covector.
pub trait OcpModel: Send + Sync {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn constraint_count(&self) -> usize;

    fn dynamics(&self, x: &[f64], u: &[f64]) -> DVector<f64>;
    fn stage_cost(&self, x: &[f64], u: &[f64]) -> f64;
    fn constraints(&self, x: &[f64], u: &[f64]) -> DVector<f64>;

    /// `(f_x, f_u)`.
    fn dynamics_jacobian(&self, x: &[f64], u: &[f64]) -> (DMatrix<f64>, DMatrix<f64>);
    /// `(l_x, l_u)`.
    fn cost_gradient(&self, x: &[f64], u: &[f64]) -> (DVector<f64>, DVector<f64>);
    /// `(g_x, g_u)`.
    fn constraints_jacobian(&self, x: &[f64], u: &[f64]) -> (DMatrix<f64>, DMatrix<f64>);

    fn cost_hessian(&self, x: &[f64], u: &[f64]) -> SecondOrder;
    /// `sum_i c_i * Hess f_i`.
    fn dynamics_hessian(&self, x: &[f64], u: &[f64], covector: &[f64]) -> SecondOrder;
    /// `sum_i c_i * Hess g_i`.
    fn constraints_hessian(&self, x: &[f64], u: &[f64], covector: &[f64]) -> SecondOrder;
}

/// Axis-aligned box.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoxSet {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoxSet {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Self {
        assert_eq!(lower.len(), upper.len());
        Self { lower, upper }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        p.iter().zip(&self.lower).zip(&self.upper).all(|((v, lo), hi)| *v >= *lo && *v <= *hi)
    }

    pub fn center(&self) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(l, u)| 0.5 * (l + u)).collect()
    }

    /// Box shrunk towards its center by `fraction` of each side.
    pub fn shrink(&self, fraction: f64) -> Self {
        let (lower, upper) = self
            .lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| {
                let pad = fraction * (u - l);
                (l + pad, u - pad)
            })
            .unzip();
        Self { lower, upper }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(l, u)| l + (u - l) * rng.gen::<f64>()).collect()
    }

    /// Tensor grid with `per_dim` points per coordinate (endpoints included).
    pub fn grid(&self, per_dim: usize) -> Vec<Vec<f64>> {
        let per_dim = per_dim.max(2);
        let axes: Vec<Vec<f64>> = self
            .lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| (0..per_dim).map(|i| l + (u - l) * i as f64 / (per_dim - 1) as f64).collect())
            .collect();
        let mut out = vec![Vec::new()];
        for axis in &axes {
            out = out
                .into_iter()
                .flat_map(|prefix| {
                    axis.iter().map(move |v| {
                        let mut p = prefix.clone();
                        p.push(*v);
                        p
                    })
                })
                .collect();
        }
        out
    }
}

/// An optimal control problem: model plus the boxes the toolkit works in.
#[derive(Clone)]
pub struct OcpProblem {
    pub name: String,
    model: Arc<dyn OcpModel>,
    /// Box in `(x, u)` on which the maps are total.
    pub domain: BoxSet,
    /// Initial conditions of interest.
    pub initial_set: BoxSet,
    /// Box of admissible inputs, used for guesses and pointwise minimization.
    pub input_set: BoxSet,
    cost_offset: f64,
}

impl fmt::Debug for OcpProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("OcpProblem")
            .field("name", &self.name)
            .field("state_dim", &self.state_dim())
            .field("input_dim", &self.input_dim())
            .field("constraint_count", &self.constraint_count())
            .field("cost_offset", &self.cost_offset)
            .finish()
    }
}

impl OcpProblem {
    pub fn new(
        name: impl Into<String>,
        model: Arc<dyn OcpModel>,
        domain: BoxSet,
        initial_set: BoxSet,
        input_set: BoxSet,
    ) -> Result<Self> {
        let (nx, nu) = (model.state_dim(), model.input_dim());
        if nx == 0 || nu == 0 {
            return Err(Error::Dimension("state and input dimensions must be positive".into()));
        }
        if domain.dim() != nx + nu || initial_set.dim() != nx || input_set.dim() != nu {
            return Err(Error::Dimension(format!(
                "boxes do not match n_x = {nx}, n_u = {nu}"
            )));
        }
        Ok(Self { name: name.into(), model, domain, initial_set, input_set, cost_offset: 0.0 })
    }

    pub fn model(&self) -> &Arc<dyn OcpModel> {
        &self.model
    }

    pub fn state_dim(&self) -> usize {
        self.model.state_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.model.input_dim()
    }

    pub fn constraint_count(&self) -> usize {
        self.model.constraint_count()
    }

    /// Constant subtracted from the model's stage cost.
    pub fn cost_offset(&self) -> f64 {
        self.cost_offset
    }

    /// Same problem with `l'(x, u) = l(x, u) - offset` (offsets accumulate).
    pub fn with_cost_offset(&self, offset: f64) -> Self {
        let mut p = self.clone();
        p.cost_offset += offset;
        p
    }

    pub fn state_box(&self) -> BoxSet {
        let nx = self.state_dim();
        BoxSet::new(self.domain.lower[..nx].to_vec(), self.domain.upper[..nx].to_vec())
    }

    pub fn dynamics(&self, x: &[f64], u: &[f64]) -> DVector<f64> {
        self.model.dynamics(x, u)
    }

    pub fn stage_cost(&self, x: &[f64], u: &[f64]) -> f64 {
        self.model.stage_cost(x, u) - self.cost_offset
    }

    pub fn constraints(&self, x: &[f64], u: &[f64]) -> DVector<f64> {
        self.model.constraints(x, u)
    }

    pub fn dynamics_jacobian(&self, x: &[f64], u: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
        self.model.dynamics_jacobian(x, u)
    }

    pub fn cost_gradient(&self, x: &[f64], u: &[f64]) -> (DVector<f64>, DVector<f64>) {
        self.model.cost_gradient(x, u)
    }

    pub fn constraints_jacobian(&self, x: &[f64], u: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
        self.model.constraints_jacobian(x, u)
    }

    pub fn cost_hessian(&self, x: &[f64], u: &[f64]) -> SecondOrder {
        self.model.cost_hessian(x, u)
    }

    pub fn dynamics_hessian(&self, x: &[f64], u: &[f64], covector: &[f64]) -> SecondOrder {
        self.model.dynamics_hessian(x, u, covector)
    }

    pub fn constraints_hessian(&self, x: &[f64], u: &[f64], covector: &[f64]) -> SecondOrder {
        self.model.constraints_hessian(x, u, covector)
    }

    /// `H(1, lambda, mu, x, u) = l + lambda^T f + mu^T g`.
    pub fn hamiltonian(&self, lambda: &[f64], mu: &[f64], x: &[f64], u: &[f64]) -> f64 {
        let f = self.dynamics(x, u);
        let mut h = self.stage_cost(x, u);
        h += f.iter().zip(lambda).map(|(a, b)| a * b).sum::<f64>();
        if !mu.is_empty() {
            let g = self.constraints(x, u);
            h += g.iter().zip(mu).map(|(a, b)| a * b).sum::<f64>();
        }
        h
    }

    /// Primal Hessian of the Hamiltonian at `(1, lambda, mu, x, u)`.
    pub fn hamiltonian_hessian(&self, lambda: &[f64], mu: &[f64], x: &[f64], u: &[f64]) -> DMatrix<f64> {
        let mut h = self.cost_hessian(x, u);
        h.add_scaled(&self.dynamics_hessian(x, u, lambda), 1.0);
        if self.constraint_count() > 0 {
            h.add_scaled(&self.constraints_hessian(x, u, mu), 1.0);
        }
        h.assemble()
    }

    pub fn max_violation(&self, x: &[f64], u: &[f64]) -> f64 {
        self.constraints(x, u).iter().fold(0.0_f64, |m, g| m.max(*g))
    }
}

/// Sampled primal trajectory.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trajectory {
    pub grid: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub inputs: Vec<Vec<f64>>,
    /// Trapezoidal quadrature of the stage cost along the samples.
    pub objective: f64,
}

impl Trajectory {
    pub fn new(problem: &OcpProblem, grid: Vec<f64>, states: Vec<Vec<f64>>, inputs: Vec<Vec<f64>>) -> Result<Self> {
        if grid.len() < 2 || states.len() != grid.len() || inputs.len() != grid.len() {
            return Err(Error::Dimension("grid, states and inputs must share a length >= 2".into()));
        }
        if grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Dimension("time grid must be strictly increasing".into()));
        }
        let objective = trapezoid(&grid, |k| problem.stage_cost(&states[k], &inputs[k]));
        Ok(Self { grid, states, inputs, objective })
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn horizon(&self) -> f64 {
        self.grid[self.grid.len() - 1] - self.grid[0]
    }

    /// Linear interpolation of the state at time `t` (clamped to the grid).
    pub fn state_at(&self, t: f64) -> Vec<f64> {
        interpolate(&self.grid, &self.states, t)
    }

    pub fn max_violation(&self, problem: &OcpProblem) -> f64 {
        self.states
            .iter()
            .zip(&self.inputs)
            .map(|(x, u)| problem.max_violation(x, u))
            .fold(0.0, f64::max)
    }
}

/// Sampled adjoint and path-constraint multipliers.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdjointTrajectory {
    pub grid: Vec<f64>,
    pub adjoints: Vec<Vec<f64>>,
    pub multipliers: Vec<Vec<f64>>,
}

impl AdjointTrajectory {
    /// Largest violation of sign and complementarity conditions.
    pub fn complementarity_violation(&self, problem: &OcpProblem, primal: &Trajectory) -> f64 {
        let mut worst = 0.0_f64;
        for (k, mu) in self.multipliers.iter().enumerate() {
            if mu.is_empty() {
                continue;
            }
            let g = problem.constraints(&primal.states[k], &primal.inputs[k]);
            let comp: f64 = g.iter().zip(mu).map(|(a, b)| a * b).sum();
            worst = worst.max(comp.abs());
            for m in mu {
                worst = worst.max(-m);
            }
        }
        worst
    }
}

pub(crate) fn trapezoid(grid: &[f64], value: impl Fn(usize) -> f64) -> f64 {
    let mut total = 0.0;
    let mut prev = value(0);
    for k in 1..grid.len() {
        let cur = value(k);
        total += 0.5 * (grid[k] - grid[k - 1]) * (prev + cur);
        prev = cur;
    }
    total
}

pub(crate) fn interpolate(grid: &[f64], values: &[Vec<f64>], t: f64) -> Vec<f64> {
    if t <= grid[0] {
        return values[0].clone();
    }
    let last = grid.len() - 1;
    if t >= grid[last] {
        return values[last].clone();
    }
    let k = grid.partition_point(|g| *g <= t).saturating_sub(1).min(last - 1);
    let s = (t - grid[k]) / (grid[k + 1] - grid[k]);
    values[k].iter().zip(&values[k + 1]).map(|(a, b)| a + s * (b - a)).collect()
}

pub fn uniform_grid(horizon: f64, intervals: usize) -> Vec<f64> {
    (0..=intervals).map(|k| horizon * k as f64 / intervals as f64).collect()
}

/// Largest discrepancy per derivative map against central differences.
#[derive(Debug, Clone, Serialize)]
pub struct DerivativeReport {
    pub errors: Vec<(String, f64)>,
    /// Points where a map returned a non-finite value.
    pub failures: Vec<Vec<f64>>,
}

impl DerivativeReport {
    pub fn max_error(&self) -> f64 {
        self.errors.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }

    pub fn error(&self, name: &str) -> Option<f64> {
        self.errors.iter().find(|(n, _)| n == name).map(|(_, e)| *e)
    }
}

fn fd_step(v: f64) -> f64 {
    1e-6 * (1.0 + v.abs())
}

fn rel_err(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / fd.abs().max(1.0)
}

/// Compares every analytic derivative against central finite differences at
/// `samples` random points of the (slightly shrunk) domain box.
pub fn validate_derivatives(problem: &OcpProblem, samples: usize, seed: u64) -> DerivativeReport {
    let (nx, nu, ng) = (problem.state_dim(), problem.input_dim(), problem.constraint_count());
    let names = [
        "f_x", "f_u", "l_x", "l_u", "g_x", "g_u", "l_xx", "l_xu", "l_uu", "f_xx", "f_xu", "f_uu", "g_xx", "g_xu",
        "g_uu",
    ];
    let mut worst = vec![0.0_f64; names.len()];
    let mut failures = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inner = problem.domain.shrink(0.01);

    for _ in 0..samples {
        let z = inner.sample(&mut rng);
        let (x, u) = z.split_at(nx);
        let lam: Vec<f64> = (0..nx).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mu: Vec<f64> = (0..ng).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let f0 = problem.dynamics(x, u);
        let g0 = problem.constraints(x, u);
        if !f0.iter().chain(g0.iter()).all(|v| v.is_finite()) || !problem.stage_cost(x, u).is_finite() {
            failures.push(z.clone());
            continue;
        }

        let (fx, fu) = problem.dynamics_jacobian(x, u);
        let (lx, lu) = problem.cost_gradient(x, u);
        let (gx, gu) = problem.constraints_jacobian(x, u);
        let lh = problem.cost_hessian(x, u);
        let fh = problem.dynamics_hessian(x, u, &lam);
        let gh = if ng > 0 { problem.constraints_hessian(x, u, &mu) } else { SecondOrder::zeros(nx, nu) };

        for j in 0..nx + nu {
            let h = fd_step(z[j]);
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[j] += h;
            zm[j] -= h;
            let (xp, up) = zp.split_at(nx);
            let (xm, um) = zm.split_at(nx);
            let is_x = j < nx;
            let col = if is_x { j } else { j - nx };
            let (fi, li, gi) = if is_x { (0, 2, 4) } else { (1, 3, 5) };

            let df = (problem.dynamics(xp, up) - problem.dynamics(xm, um)) / (2.0 * h);
            for i in 0..nx {
                let a = if is_x { fx[(i, col)] } else { fu[(i, col)] };
                worst[fi] = worst[fi].max(rel_err(a, df[i]));
            }
            let dl = (problem.stage_cost(xp, up) - problem.stage_cost(xm, um)) / (2.0 * h);
            let a = if is_x { lx[col] } else { lu[col] };
            worst[li] = worst[li].max(rel_err(a, dl));
            if ng > 0 {
                let dg = (problem.constraints(xp, up) - problem.constraints(xm, um)) / (2.0 * h);
                for i in 0..ng {
                    let a = if is_x { gx[(i, col)] } else { gu[(i, col)] };
                    worst[gi] = worst[gi].max(rel_err(a, dg[i]));
                }
            }

            // second derivatives: differentiate the (contracted) gradients
            let grad = |xx: &[f64], uu: &[f64]| -> (Vec<f64>, Vec<f64>, Vec<f64>) {
                let (lx, lu) = problem.cost_gradient(xx, uu);
                let (fx, fu) = problem.dynamics_jacobian(xx, uu);
                let lamv = DVector::from_column_slice(&lam);
                let fgrad: Vec<f64> = (fx.transpose() * &lamv).iter().chain((fu.transpose() * &lamv).iter()).copied().collect();
                let ggrad: Vec<f64> = if ng > 0 {
                    let (gx, gu) = problem.constraints_jacobian(xx, uu);
                    let muv = DVector::from_column_slice(&mu);
                    (gx.transpose() * &muv).iter().chain((gu.transpose() * &muv).iter()).copied().collect()
                } else {
                    vec![0.0; nx + nu]
                };
                (lx.iter().chain(lu.iter()).copied().collect(), fgrad, ggrad)
            };
            let (lp, fp, gp) = grad(xp, up);
            let (lm, fm, gm) = grad(xm, um);
            let full = [lh.assemble(), fh.assemble(), gh.assemble()];
            for (block, (p, m)) in [(&lp, &lm), (&fp, &fm), (&gp, &gm)].into_iter().enumerate() {
                if block == 2 && ng == 0 {
                    continue;
                }
                for i in 0..nx + nu {
                    let fd = (p[i] - m[i]) / (2.0 * h);
                    let a = full[block][(i, j)];
                    let slot = 6 + 3 * block + match (i < nx, j < nx) {
                        (true, true) => 0,
                        (false, false) => 2,
                        _ => 1,
                    };
                    worst[slot] = worst[slot].max(rel_err(a, fd));
                }
            }
        }
    }
    let errors = names
        .iter()
        .zip(worst)
        .filter(|(n, _)| ng > 0 || !n.starts_with('g'))
        .map(|(n, e)| (n.to_string(), e))
        .collect();
    DerivativeReport { errors, failures }
}

fn add_scaled(a: &DVector<f64>, b: &DVector<f64>, s: f64) -> Vec<f64> {
    a.iter().zip(b.iter()).map(|(x, y)| x + s * y).collect()
}

/// Fixed-step RK4 under an input given as a function of time and state.
pub fn simulate_feedback(
    problem: &OcpProblem,
    x0: &[f64],
    control: &dyn Fn(f64, &[f64]) -> Vec<f64>,
    grid: &[f64],
) -> Result<Trajectory> {
    if x0.len() != problem.state_dim() {
        return Err(Error::Dimension("initial state has the wrong length".into()));
    }
    let sbox = problem.state_box();
    let mut states = vec![x0.to_vec()];
    let mut inputs = vec![control(grid[0], x0)];
    for k in 0..grid.len() - 1 {
        let (t, h) = (grid[k], grid[k + 1] - grid[k]);
        let x = DVector::from_column_slice(&states[k]);
        let rhs = |tt: f64, xx: &[f64]| problem.dynamics(xx, &control(tt, xx));
        let k1 = rhs(t, x.as_slice());
        let k2 = rhs(t + 0.5 * h, &add_scaled(&x, &k1, 0.5 * h));
        let k3 = rhs(t + 0.5 * h, &add_scaled(&x, &k2, 0.5 * h));
        let k4 = rhs(t + h, &add_scaled(&x, &k3, h));
        let next = x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        let next: Vec<f64> = next.iter().copied().collect();
        if !sbox.contains(&next) || next.iter().any(|v| !v.is_finite()) {
            return Err(Error::SimulationExit { time: grid[k + 1], state: next });
        }
        inputs.push(control(grid[k + 1], &next));
        states.push(next);
    }
    Trajectory::new(problem, grid.to_vec(), states, inputs)
}

/// Fixed-step RK4 of `x' = f(x, u(t))`; step equals the grid spacing.
pub fn simulate_open_loop(
    problem: &OcpProblem,
    x0: &[f64],
    input: &dyn Fn(f64) -> Vec<f64>,
    grid: &[f64],
) -> Result<Trajectory> {
    simulate_feedback(problem, x0, &|t, _| input(t), grid)
}

/// Max over the overlap of `|x*(t + delta; x0) - x*(t; x_delta)|`, where the
/// second trajectory is re-solved from `x_delta = x*(delta; x0)` over the
/// shortened horizon. `solve(x0, horizon)` returns an optimal trajectory.
pub fn check_semigroup(
    solve: &dyn Fn(&[f64], f64) -> Result<Trajectory>,
    x0: &[f64],
    delta: f64,
    horizon: f64,
) -> Result<f64> {
    if !(0.0..horizon).contains(&delta) {
        return Err(Error::InvalidParameter("need 0 <= delta < horizon".into()));
    }
    let full = solve(x0, horizon)?;
    if delta == 0.0 {
        let again = solve(x0, horizon)?;
        return Ok(max_gap(&full, &again, 0.0));
    }
    let x_delta = full.state_at(delta);
    let tail = solve(&x_delta, horizon - delta)?;
    Ok(max_gap(&full, &tail, delta))
}

fn max_gap(full: &Trajectory, tail: &Trajectory, delta: f64) -> f64 {
    tail.grid
        .iter()
        .zip(&tail.states)
        .map(|(t, x)| {
            let y = full.state_at(t + delta);
            x.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
        })
        .fold(0.0, f64::max)
}
