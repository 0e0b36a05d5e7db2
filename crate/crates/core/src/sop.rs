//! Steady-state optimization: `min l(x, u)` s.t. `f(x, u) = 0`, `g(x, u) <= 0`.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::nlp::{licq_rank, solve_lp, solve_nlp, LpProblem, LpStatus, NlpInstance, NlpOptions, NlpStatus, ACTIVE_TOL};
use crate::ocp::OcpProblem;
use crate::par::{self, Execution};
use crate::transcription::SteadyTarget;

/// Determinant threshold for x-u regularity.
pub const REGULARITY_TOL: f64 = 1e-10;
/// Two local minimizers closer than this are the same point.
pub const DISTINCT_TOL: f64 = 1e-3;
/// Objectives closer than this count as tied.
pub const OBJECTIVE_TIE_TOL: f64 = 1e-8;
/// Default number of multi-start points.
pub const DEFAULT_STARTS: usize = 8;

#[derive(Debug, Clone, Serialize)]
pub struct SteadyStateSolution {
    pub x_bar: Vec<f64>,
    pub u_bar: Vec<f64>,
    pub lambda_bar: Vec<f64>,
    pub mu_bar: Vec<f64>,
    /// `l(x_bar, u_bar)` under the problem's current offset.
    pub cost: f64,
    pub licq: bool,
    pub sing_min: f64,
    pub det_hess: f64,
    pub xu_regular: bool,
    pub kkt_residual: f64,
    /// Another start reached a distinct point with the same objective.
    pub non_unique: bool,
    #[serde(skip)]
    pub local_solutions: Vec<LocalSolution>,
}

/// Outcome of one start.
#[derive(Debug, Clone, Serialize)]
pub struct LocalSolution {
    pub start: Vec<f64>,
    pub point: Vec<f64>,
    pub objective: f64,
    pub kkt_residual: f64,
    pub status: NlpStatus,
    pub licq: bool,
}

impl From<&SteadyStateSolution> for SteadyTarget {
    fn from(s: &SteadyStateSolution) -> Self {
        SteadyTarget { x_bar: s.x_bar.clone(), u_bar: s.u_bar.clone(), lambda_bar: s.lambda_bar.clone() }
    }
}

/// Latin-hypercube points in the domain box, pulled slightly inside it.
pub fn lhs_starts(problem: &OcpProblem, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let domain = problem.domain.shrink(0.02);
    let dim = domain.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut columns = Vec::with_capacity(dim);
    for d in 0..dim {
        let mut strata: Vec<usize> = (0..count).collect();
        strata.shuffle(&mut rng);
        let (lo, hi) = (domain.lower[d], domain.upper[d]);
        columns.push(
            strata
                .into_iter()
                .map(|k| lo + (hi - lo) * (k as f64 + rng.gen::<f64>()) / count as f64)
                .collect::<Vec<_>>(),
        );
    }
    (0..count).map(|i| columns.iter().map(|c| c[i]).collect()).collect()
}

fn steady_instance(problem: &OcpProblem) -> NlpInstance {
    let (nx, nu, ng) = (problem.state_dim(), problem.input_dim(), problem.constraint_count());
    let split = move |w: &[f64]| (w[..nx].to_vec(), w[nx..].to_vec());
    let p_obj = problem.clone();
    let p_grad = problem.clone();
    let p_eq = problem.clone();
    let p_jeq = problem.clone();
    let p_in = problem.clone();
    let p_jin = problem.clone();
    let p_hess = problem.clone();
    NlpInstance::new(
        nx + nu,
        move |w| {
            let (x, u) = split(w);
            p_obj.stage_cost(&x, &u)
        },
        move |w| {
            let (x, u) = split(w);
            let (gx, gu) = p_grad.cost_gradient(&x, &u);
            DVector::from_iterator(nx + nu, gx.iter().chain(gu.iter()).copied())
        },
    )
    .with_eq(
        nx,
        move |w| {
            let (x, u) = split(w);
            p_eq.dynamics(&x, &u)
        },
        move |w| {
            let (x, u) = split(w);
            let (fx, fu) = p_jeq.dynamics_jacobian(&x, &u);
            hcat(&fx, &fu)
        },
    )
    .with_ineq(
        ng,
        move |w| {
            let (x, u) = split(w);
            p_in.constraints(&x, &u)
        },
        move |w| {
            let (x, u) = split(w);
            let (gx, gu) = p_jin.constraints_jacobian(&x, &u);
            hcat(&gx, &gu)
        },
    )
    .with_hessian(move |w, nu_eq, mu| {
        let (x, u) = split(w);
        let mut h = p_hess.cost_hessian(&x, &u);
        h.add_scaled(&p_hess.dynamics_hessian(&x, &u, nu_eq), 1.0);
        h.add_scaled(&p_hess.constraints_hessian(&x, &u, &mu[..ng]), 1.0);
        h.assemble()
    })
    .with_bounds(&problem.domain.lower, &problem.domain.upper)
}

fn hcat(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(a.nrows(), a.ncols() + b.ncols());
    m.view_mut((0, 0), a.shape()).copy_from(a);
    m.view_mut((0, a.ncols()), b.shape()).copy_from(b);
    m
}

/// Rows of `[f_x f_u]` stacked over the active rows of `[g_x g_u]`.
pub fn active_jacobian(problem: &OcpProblem, x: &[f64], u: &[f64]) -> DMatrix<f64> {
    let (fx, fu) = problem.dynamics_jacobian(x, u);
    let (gx, gu) = problem.constraints_jacobian(x, u);
    let g = problem.constraints(x, u);
    let jf = hcat(&fx, &fu);
    let jg = hcat(&gx, &gu);
    let active: Vec<usize> = (0..g.len()).filter(|&j| g[j] >= -ACTIVE_TOL).collect();
    let mut m = DMatrix::zeros(jf.nrows() + active.len(), jf.ncols());
    m.view_mut((0, 0), jf.shape()).copy_from(&jf);
    for (r, &j) in active.iter().enumerate() {
        m.row_mut(jf.nrows() + r).copy_from(&jg.row(j));
    }
    m
}

/// Multi-start solve. Among starts whose objectives tie with the best, the
/// reported point prefers LICQ, then the smaller KKT residual, then the
/// lexicographically smaller point.
pub fn solve_sop(problem: &OcpProblem, starts: &[Vec<f64>], exec: Execution) -> Result<SteadyStateSolution> {
    let (nx, nu) = (problem.state_dim(), problem.input_dim());
    let ng = problem.constraint_count();
    let inside: Vec<&Vec<f64>> = starts.iter().filter(|s| s.len() == nx + nu && problem.domain.contains(s)).collect();
    if inside.is_empty() {
        return Err(Error::Precondition("no start lies in the domain box".into()));
    }
    let instance = steady_instance(problem);
    let options = NlpOptions { max_iter: 300, ..NlpOptions::default() };
    let runs = par::map(exec, &inside, |start| {
        let sol = solve_nlp(&instance, start, &options);
        (start.to_vec(), sol)
    });

    let acceptable = |status: NlpStatus, kkt: f64| status == NlpStatus::Converged || kkt <= 1e-6;
    let mut locals = Vec::new();
    let mut duals = Vec::new();
    for (start, sol) in &runs {
        let (x, u) = sol.primal.split_at(nx);
        let licq = licq_rank(&active_jacobian(problem, x, u)).full_rank;
        locals.push(LocalSolution {
            start: start.clone(),
            point: sol.primal.clone(),
            objective: sol.objective,
            kkt_residual: sol.kkt_residual,
            status: sol.status,
            licq,
        });
        duals.push((sol.eq_multipliers.clone(), sol.ineq_multipliers[..ng].to_vec()));
    }
    let ok: Vec<usize> = (0..locals.len()).filter(|&i| acceptable(locals[i].status, locals[i].kkt_residual)).collect();
    if ok.is_empty() {
        let report: Vec<String> = locals
            .iter()
            .map(|l| format!("start {:?}: {} (kkt {:.2e})", l.start, l.status, l.kkt_residual))
            .collect();
        let kkt = locals.iter().map(|l| l.kkt_residual).fold(f64::INFINITY, f64::min);
        return Err(Error::Solver { status: format!("all starts failed: {}", report.join("; ")), kkt_residual: kkt });
    }
    let best_obj = ok.iter().map(|&i| locals[i].objective).fold(f64::INFINITY, f64::min);
    let tied: Vec<usize> = ok.iter().copied().filter(|&i| locals[i].objective <= best_obj + OBJECTIVE_TIE_TOL).collect();
    let chosen = *tied
        .iter()
        .min_by(|&&a, &&b| {
            let (la, lb) = (&locals[a], &locals[b]);
            lb.licq
                .cmp(&la.licq)
                .then(la.kkt_residual.total_cmp(&lb.kkt_residual))
                .then_with(|| {
                    la.point.iter().zip(&lb.point).map(|(p, q)| p.total_cmp(q)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal)
                })
        })
        .unwrap();
    let non_unique = tied.iter().any(|&i| distance(&locals[i].point, &locals[chosen].point) >= DISTINCT_TOL);

    let point = &locals[chosen].point;
    let (x, u) = point.split_at(nx);
    let (lambda_bar, mu_bar) = duals[chosen].clone();
    let rank = licq_rank(&active_jacobian(problem, x, u));
    let mut out = SteadyStateSolution {
        x_bar: x.to_vec(),
        u_bar: u.to_vec(),
        lambda_bar,
        mu_bar,
        cost: problem.stage_cost(x, u),
        licq: rank.full_rank,
        sing_min: rank.smallest_singular_value,
        det_hess: 0.0,
        xu_regular: false,
        kkt_residual: locals[chosen].kkt_residual,
        non_unique,
        local_solutions: locals,
    };
    let (det, regular) = xu_regularity(problem, &out);
    out.det_hess = det;
    out.xu_regular = regular;
    Ok(out)
}

/// Eight seeded Latin-hypercube starts.
pub fn solve_sop_default(problem: &OcpProblem, seed: u64, exec: Execution) -> Result<SteadyStateSolution> {
    solve_sop(problem, &lhs_starts(problem, DEFAULT_STARTS, seed), exec)
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt()
}

/// Determinant of the `(x, u)` Hessian of `H` at the steady tuple.
pub fn xu_regularity(problem: &OcpProblem, steady: &SteadyStateSolution) -> (f64, bool) {
    let h = problem.hamiltonian_hessian(&steady.lambda_bar, &steady.mu_bar, &steady.x_bar, &steady.u_bar);
    let det = h.determinant();
    (det, det.abs() > REGULARITY_TOL)
}

/// Problem with `l' = l - l(z_bar)`.
pub fn shift_cost(problem: &OcpProblem, steady: &SteadyStateSolution) -> OcpProblem {
    problem.with_cost_offset(steady.cost)
}

/// Range of each adjoint component over the steady multiplier set at the
/// reported point: all `(lambda, mu >= 0)` with `mu` supported on the active
/// rows and stationarity holding to `tol`. Unbounded ends are infinite.
pub fn dual_set_bounds(problem: &OcpProblem, steady: &SteadyStateSolution, tol: f64) -> Result<Vec<(f64, f64)>> {
    let (x, u) = (&steady.x_bar[..], &steady.u_bar[..]);
    let nx = problem.state_dim();
    let (lx, lu) = problem.cost_gradient(x, u);
    let (fx, fu) = problem.dynamics_jacobian(x, u);
    let (gx, gu) = problem.constraints_jacobian(x, u);
    let g = problem.constraints(x, u);
    let active: Vec<usize> = (0..g.len()).filter(|&j| g[j] >= -ACTIVE_TOL).collect();
    let jf = hcat(&fx, &fu);
    let jg = hcat(&gx, &gu);
    let grad: Vec<f64> = lx.iter().chain(lu.iter()).copied().collect();
    let n = nx + active.len();

    let mut bounds = Vec::with_capacity(nx);
    for i in 0..nx {
        let mut ends = [0.0; 2];
        for (k, sign) in [1.0, -1.0].into_iter().enumerate() {
            let mut cost = DVector::zeros(n);
            cost[i] = sign;
            let mut lp = LpProblem::new(cost);
            for j in 0..nx {
                lp.lower[j] = f64::NEG_INFINITY;
            }
            // |grad + jf^T lambda + jg_A^T mu| <= tol, componentwise
            for (c, gc) in grad.iter().enumerate() {
                let mut row = vec![0.0; n];
                for j in 0..nx {
                    row[j] = jf[(j, c)];
                }
                for (r, &a) in active.iter().enumerate() {
                    row[nx + r] = jg[(a, c)];
                }
                lp.push_ub(&row, tol - gc);
                let neg: Vec<f64> = row.iter().map(|v| -v).collect();
                lp.push_ub(&neg, tol + gc);
            }
            let sol = solve_lp(&lp);
            ends[k] = match sol.status {
                LpStatus::Optimal => sign * sol.objective,
                LpStatus::Unbounded => -sign * f64::INFINITY,
                LpStatus::Infeasible => {
                    return Err(Error::Precondition("no multiplier satisfies stationarity at the steady point".into()))
                }
            };
        }
        bounds.push((ends[0], ends[1]));
    }
    Ok(bounds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{make_fish, make_halkin, make_lq, FishParams};

    #[test]
    fn lhs_points_stratify_each_axis() {
        let h = make_halkin();
        let pts = lhs_starts(&h.problem, 8, 1);
        assert_eq!(pts.len(), 8);
        for d in 0..2 {
            let (lo, hi) = (h.problem.domain.lower[d], h.problem.domain.upper[d]);
            let mut cells: Vec<usize> = pts.iter().map(|p| ((p[d] - lo) / (hi - lo) * 8.0) as usize).collect();
            cells.sort();
            cells.dedup();
            assert!(cells.len() >= 7, "{cells:?}");
        }
        assert_eq!(pts, lhs_starts(&h.problem, 8, 1));
    }

    #[test]
    fn fish_steady_state() {
        // [DERIVED] x_bar = (c x_s + b - a)/(2c) = 1, u_bar = x_s - x_bar = 1,
        // lambda_bar = b/x_bar - c = -1 in the minimization convention
        let fish = make_fish(FishParams::default()).unwrap();
        let s = solve_sop_default(&fish.problem, 0, Execution::Sequential).unwrap();
        assert!((s.x_bar[0] - 1.0).abs() < 1e-6);
        assert!((s.u_bar[0] - 1.0).abs() < 1e-6);
        assert!((s.lambda_bar[0] + 1.0).abs() < 1e-6);
        assert!(s.cost.abs() < 1e-10);
        assert!(s.licq);
        assert!((s.det_hess + 1.0).abs() < 1e-6, "{}", s.det_hess);
        assert!(s.xu_regular);
        assert!(!s.non_unique);
    }

    #[test]
    fn lq_steady_state() {
        // [DERIVED] H_xx = 2q, H_uu = 2r, no cross term: det = 4 q r
        let lq = make_lq(1.0, 1.0, 1.0, 1.0).unwrap();
        let s = solve_sop_default(&lq.problem, 0, Execution::Sequential).unwrap();
        assert!(s.x_bar[0].abs() < 1e-6 && s.u_bar[0].abs() < 1e-6 && s.lambda_bar[0].abs() < 1e-6);
        assert!(s.licq);
        assert!((s.det_hess - 4.0).abs() < 1e-8);
    }

    #[test]
    fn halkin_minimizer_is_not_unique() {
        // [PAPER] the steady minimizer set is {x = 1} u {u = 0}; at (1, 0) the
        // dynamics gradient vanishes and LICQ fails
        let h = make_halkin();
        let s = solve_sop_default(&h.problem, 0, Execution::Sequential).unwrap();
        assert!(s.cost.abs() < 1e-6);
        let on_set = (s.x_bar[0] - 1.0).abs() < 1e-4 || s.u_bar[0].abs() < 1e-4;
        assert!(on_set, "{:?} {:?}", s.x_bar, s.u_bar);
        assert!(s.non_unique);
        let j = active_jacobian(&h.problem, &[1.0], &[0.0]);
        assert!(!licq_rank(&j).full_rank);
        let (det, regular) = xu_regularity(
            &h.problem,
            &SteadyStateSolution { lambda_bar: vec![1.0], mu_bar: vec![0.0, 0.0], x_bar: vec![1.0], u_bar: vec![0.5], ..s.clone() },
        );
        assert!(det.abs() < 1e-12 && !regular);
    }

    #[test]
    fn halkin_dual_set_at_degenerate_point() {
        // [DERIVED] at (1, 0) every lambda is a steady multiplier; at (1, 1/2)
        // stationarity in u forces lambda = 1
        let h = make_halkin();
        let s = solve_sop_default(&h.problem, 0, Execution::Sequential).unwrap();
        let degenerate = SteadyStateSolution { x_bar: vec![1.0], u_bar: vec![0.0], ..s.clone() };
        let b = dual_set_bounds(&h.problem, &degenerate, 1e-9).unwrap();
        assert!(b[0].0 == f64::NEG_INFINITY && b[0].1 == f64::INFINITY);
        let regular = SteadyStateSolution { x_bar: vec![1.0], u_bar: vec![0.5], ..s };
        let b = dual_set_bounds(&h.problem, &regular, 1e-9).unwrap();
        assert!((b[0].0 - 1.0).abs() < 1e-6 && (b[0].1 - 1.0).abs() < 1e-6, "{b:?}");
    }

    #[test]
    fn shift_moves_steady_cost_to_zero() {
        // [TRIVIAL] additive constant
        let lq = make_lq(1.0, 1.0, 1.0, 1.0).unwrap();
        let plus5 = lq.problem.with_cost_offset(-5.0);
        let s = solve_sop_default(&plus5, 0, Execution::Sequential).unwrap();
        assert!((s.cost - 5.0).abs() < 1e-6);
        let shifted = shift_cost(&plus5, &s);
        assert!((shifted.stage_cost(&[0.3], &[0.2]) - lq.problem.stage_cost(&[0.3], &[0.2])).abs() < 1e-6);
    }

    #[test]
    fn parallel_and_sequential_agree() {
        let fish = make_fish(FishParams::default()).unwrap();
        let a = solve_sop_default(&fish.problem, 3, Execution::Sequential).unwrap();
        let b = solve_sop_default(&fish.problem, 3, Execution::Parallel).unwrap();
        assert_eq!(a.x_bar, b.x_bar);
        assert_eq!(a.lambda_bar, b.lambda_bar);
    }

    #[test]
    fn starts_outside_domain_are_rejected() {
        let lq = make_lq(1.0, 1.0, 1.0, 1.0).unwrap();
        assert!(matches!(solve_sop(&lq.problem, &[vec![100.0, 0.0]], Execution::Sequential), Err(Error::Precondition(_))));
    }
}
