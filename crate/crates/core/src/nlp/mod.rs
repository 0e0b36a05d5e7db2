//! Nonlinear programming kernel: a primal-dual interior-point method for
//! `min F(w)` s.t. `c_E(w) = 0`, `c_I(w) <= 0`, plus the LP solver and the
//! rank test used for LICQ.

pub mod band;
pub mod lp;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

pub use band::{is_positive_definite, SparseLu, Triplets};
pub use lp::{solve_lp, LpProblem, LpSolution, LpStatus};

/// Problem interface. Jacobians and the Lagrangian Hessian are sparse; the
/// Hessian must list entries of both triangles.
pub trait NlpProblem: Sync {
    fn dim(&self) -> usize;
    fn eq_count(&self) -> usize;
    fn ineq_count(&self) -> usize;
    fn objective(&self, w: &[f64]) -> f64;
    fn gradient(&self, w: &[f64]) -> Vec<f64>;
    fn eq_values(&self, w: &[f64]) -> Vec<f64>;
    fn eq_jacobian(&self, w: &[f64]) -> Triplets;
    fn ineq_values(&self, w: &[f64]) -> Vec<f64>;
    fn ineq_jacobian(&self, w: &[f64]) -> Triplets;
    /// Hessian of `F + nu^T c_E + mu^T c_I`; `None` selects the quasi-Newton
    /// fallback.
    fn lagrangian_hessian(&self, _w: &[f64], _nu: &[f64], _mu: &[f64]) -> Option<Triplets> {
        None
    }
}

type ScalarFn = Box<dyn Fn(&[f64]) -> f64 + Send + Sync>;
type VectorFn = Box<dyn Fn(&[f64]) -> DVector<f64> + Send + Sync>;
type MatrixFn = Box<dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync>;
type HessianFn = Box<dyn Fn(&[f64], &[f64], &[f64]) -> DMatrix<f64> + Send + Sync>;

/// Dense closure-backed instance for small problems. Box bounds are added as
/// inequality rows after the general ones.
pub struct NlpInstance {
    pub dim: usize,
    objective: ScalarFn,
    gradient: VectorFn,
    eq: Option<(usize, VectorFn, MatrixFn)>,
    ineq: Option<(usize, VectorFn, MatrixFn)>,
    hessian: Option<HessianFn>,
    bounds: Vec<(usize, f64, f64)>,
}

impl NlpInstance {
    pub fn new(
        dim: usize,
        objective: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        gradient: impl Fn(&[f64]) -> DVector<f64> + Send + Sync + 'static,
    ) -> Self {
        Self { dim, objective: Box::new(objective), gradient: Box::new(gradient), eq: None, ineq: None, hessian: None, bounds: Vec::new() }
    }

    pub fn with_eq(
        mut self,
        count: usize,
        values: impl Fn(&[f64]) -> DVector<f64> + Send + Sync + 'static,
        jacobian: impl Fn(&[f64]) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        self.eq = Some((count, Box::new(values), Box::new(jacobian)));
        self
    }

    pub fn with_ineq(
        mut self,
        count: usize,
        values: impl Fn(&[f64]) -> DVector<f64> + Send + Sync + 'static,
        jacobian: impl Fn(&[f64]) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        self.ineq = Some((count, Box::new(values), Box::new(jacobian)));
        self
    }

    /// Hessian of `F + nu^T c_E + mu^T c_I` over the general rows (bounds are
    /// linear and contribute nothing).
    pub fn with_hessian(mut self, h: impl Fn(&[f64], &[f64], &[f64]) -> DMatrix<f64> + Send + Sync + 'static) -> Self {
        self.hessian = Some(Box::new(h));
        self
    }

    pub fn with_bounds(mut self, lower: &[f64], upper: &[f64]) -> Self {
        for j in 0..self.dim {
            self.bounds.push((j, lower[j], upper[j]));
        }
        self
    }

    fn general_ineq(&self) -> usize {
        self.ineq.as_ref().map_or(0, |i| i.0)
    }

    fn bound_list(&self) -> Vec<(usize, f64, f64)> {
        let mut out = Vec::new();
        for &(j, lo, hi) in &self.bounds {
            if lo.is_finite() {
                out.push((j, -1.0, lo));
            }
            if hi.is_finite() {
                out.push((j, 1.0, hi));
            }
        }
        out
    }
}

impl NlpProblem for NlpInstance {
    fn dim(&self) -> usize {
        self.dim
    }
    fn eq_count(&self) -> usize {
        self.eq.as_ref().map_or(0, |e| e.0)
    }
    fn ineq_count(&self) -> usize {
        self.general_ineq() + self.bound_list().len()
    }
    fn objective(&self, w: &[f64]) -> f64 {
        (self.objective)(w)
    }
    fn gradient(&self, w: &[f64]) -> Vec<f64> {
        (self.gradient)(w).iter().copied().collect()
    }
    fn eq_values(&self, w: &[f64]) -> Vec<f64> {
        self.eq.as_ref().map_or(Vec::new(), |e| (e.1)(w).iter().copied().collect())
    }
    fn eq_jacobian(&self, w: &[f64]) -> Triplets {
        match &self.eq {
            Some(e) => Triplets::from_dense(&(e.2)(w)),
            None => Triplets::new(0, self.dim),
        }
    }
    fn ineq_values(&self, w: &[f64]) -> Vec<f64> {
        let mut v: Vec<f64> = self.ineq.as_ref().map_or(Vec::new(), |i| (i.1)(w).iter().copied().collect());
        for (j, s, b) in self.bound_list() {
            v.push(s * (w[j] - b));
        }
        v
    }
    fn ineq_jacobian(&self, w: &[f64]) -> Triplets {
        let mut t = Triplets::new(self.ineq_count(), self.dim);
        if let Some(i) = &self.ineq {
            let d = (i.2)(w);
            for c in 0..d.ncols() {
                for r in 0..d.nrows() {
                    t.push(r, c, d[(r, c)]);
                }
            }
        }
        let base = self.general_ineq();
        for (k, (j, s, _)) in self.bound_list().into_iter().enumerate() {
            t.push(base + k, j, s);
        }
        t
    }
    fn lagrangian_hessian(&self, w: &[f64], nu: &[f64], mu: &[f64]) -> Option<Triplets> {
        let h = self.hessian.as_ref()?;
        Some(Triplets::from_dense(&h(w, nu, &mu[..self.general_ineq()])))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum NlpStatus {
    Converged,
    MaxIter,
    Infeasible,
}

impl std::fmt::Display for NlpStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            NlpStatus::Converged => "converged",
            NlpStatus::MaxIter => "max_iter",
            NlpStatus::Infeasible => "infeasible",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct NlpSolution {
    pub primal: Vec<f64>,
    pub eq_multipliers: Vec<f64>,
    pub ineq_multipliers: Vec<f64>,
    pub objective: f64,
    pub kkt_residual: f64,
    /// Largest constraint violation at the returned point.
    pub infeasibility: f64,
    pub status: NlpStatus,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub merit: f64,
    pub kkt_residual: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NlpOptions {
    pub kkt_tol: f64,
    pub max_iter: usize,
    pub mu_init: f64,
}

impl Default for NlpOptions {
    fn default() -> Self {
        Self { kkt_tol: 1e-8, max_iter: 200, mu_init: 0.1 }
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct Eval {
    f: f64,
    grad: Vec<f64>,
    ce: Vec<f64>,
    je: Triplets,
    ci: Vec<f64>,
    ji: Triplets,
}

fn evaluate(p: &dyn NlpProblem, w: &[f64]) -> Eval {
    Eval {
        f: p.objective(w),
        grad: p.gradient(w),
        ce: p.eq_values(w),
        je: p.eq_jacobian(w),
        ci: p.ineq_values(w),
        ji: p.ineq_jacobian(w),
    }
}

fn lagrangian_gradient(e: &Eval, nu: &[f64], z: &[f64]) -> Vec<f64> {
    let a = e.je.tr_mul(nu);
    let b = e.ji.tr_mul(z);
    e.grad.iter().zip(a).zip(b).map(|((g, a), b)| g + a + b).collect()
}

/// KKT residual: stationarity, primal feasibility and complementarity.
pub fn kkt_residual(p: &dyn NlpProblem, w: &[f64], nu: &[f64], z: &[f64]) -> f64 {
    let e = evaluate(p, w);
    residual_of(&e, nu, z)
}

fn residual_of(e: &Eval, nu: &[f64], z: &[f64]) -> f64 {
    let stat = inf_norm(&lagrangian_gradient(e, nu, z));
    let feas = inf_norm(&e.ce).max(e.ci.iter().fold(0.0_f64, |m, c| m.max(*c)));
    let comp = e.ci.iter().zip(z).fold(0.0_f64, |m, (c, z)| m.max((c * z).abs()));
    let sign = z.iter().fold(0.0_f64, |m, z| m.max(-z));
    stat.max(feas).max(comp).max(sign)
}

fn violation(e: &Eval) -> f64 {
    inf_norm(&e.ce).max(e.ci.iter().fold(0.0_f64, |m, c| m.max(*c)))
}

/// Damped BFGS approximation used when no Hessian is supplied.
struct Bfgs {
    b: DMatrix<f64>,
}

impl Bfgs {
    fn update(&mut self, s: &[f64], y: &[f64]) {
        let s = DVector::from_column_slice(s);
        let y = DVector::from_column_slice(y);
        let bs = &self.b * &s;
        let sbs = s.dot(&bs);
        if sbs <= 1e-16 {
            return;
        }
        let sy = s.dot(&y);
        let theta = if sy >= 0.2 * sbs { 1.0 } else { 0.8 * sbs / (sbs - sy) };
        let r = &y * theta + &bs * (1.0 - theta);
        let sr = s.dot(&r);
        if sr <= 1e-16 {
            return;
        }
        self.b -= &bs * bs.transpose() / sbs;
        self.b += &r * r.transpose() / sr;
    }
}

pub fn solve_nlp(p: &dyn NlpProblem, start: &[f64], options: &NlpOptions) -> NlpSolution {
    solve_nlp_logged(p, start, options, &mut |_| {})
}

/// Interior-point iteration with an augmented Lagrangian merit line search.
/// The reduced KKT system is solved sparsely. A primal regularization is
/// raised until the Hessian is positive definite on the null space of the
/// equality Jacobian, and again when the line search cuts the step hard.
pub fn solve_nlp_logged(
    p: &dyn NlpProblem,
    start: &[f64],
    options: &NlpOptions,
    log: &mut dyn FnMut(&IterationRecord),
) -> NlpSolution {
    let n = p.dim();
    let (me, mi) = (p.eq_count(), p.ineq_count());
    let mut w = start.to_vec();
    let mut e = evaluate(p, &w);
    let mut s: Vec<f64> = e.ci.iter().map(|c| (-c).max(1e-2)).collect();
    let mut mu = options.mu_init;
    let mut z: Vec<f64> = s.iter().map(|s| mu / s).collect();
    let mut nu = vec![0.0; me];
    let mut rho = 1.0_f64;
    let mut delta_last = 0.0_f64;
    let mut bfgs: Option<Bfgs> = None;
    let mut best: Option<(f64, Vec<f64>, Vec<f64>, Vec<f64>)> = None;
    let mut status = NlpStatus::MaxIter;
    let mut iterations = 0;
    let mut stalls = 0;

    for iter in 0..options.max_iter {
        iterations = iter;
        let res = residual_of(&e, &nu, &z);
        if best.as_ref().map_or(true, |b| res < b.0) {
            best = Some((res, w.clone(), nu.clone(), z.clone()));
        }
        let rp: Vec<f64> = e.ci.iter().zip(&s).map(|(c, s)| c + s).collect();
        let merit_now = e.f - mu * s.iter().map(|s| s.ln()).sum::<f64>() + dot(&nu, &e.ce) + dot(&z, &rp) + 0.5 * rho * (dot(&e.ce, &e.ce) + dot(&rp, &rp));
        log(&IterationRecord { iter, merit: merit_now, kkt_residual: res });
        if res <= options.kkt_tol {
            status = NlpStatus::Converged;
            break;
        }

        let grad_l = lagrangian_gradient(&e, &nu, &z);
        // barrier subproblem error, then monotone decrease of mu
        loop {
            let comp = s.iter().zip(&z).fold(0.0_f64, |m, (s, z)| m.max((s * z - mu).abs()));
            let err = inf_norm(&grad_l).max(inf_norm(&e.ce)).max(inf_norm(&rp)).max(comp);
            let floor = options.kkt_tol / 10.0;
            if err <= 10.0 * mu && mu > floor {
                mu = (0.2 * mu).max(floor);
            } else {
                break;
            }
        }

        // Hessian
        let hess = match p.lagrangian_hessian(&w, &nu, &z) {
            Some(h) => h,
            None => {
                let b = bfgs.get_or_insert_with(|| Bfgs { b: DMatrix::identity(n, n) });
                Triplets::from_dense(&b.b)
            }
        };
        let sigma: Vec<f64> = z.iter().zip(&s).map(|(z, s)| z / s).collect();
        let mut base = Triplets::new(n + me, n + me);
        base.entries.extend(hess.entries.iter().copied());
        // J_I^T Sigma J_I, row by row
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); mi];
        for &(i, j, v) in &e.ji.entries {
            rows[i].push((j, v));
        }
        for (i, row) in rows.iter().enumerate() {
            for &(a, va) in row {
                for &(b, vb) in row {
                    base.push(a, b, sigma[i] * va * vb);
                }
            }
        }
        for &(i, j, v) in &e.je.entries {
            base.push(n + i, j, v);
            base.push(j, n + i, v);
        }
        let mut rhs = vec![0.0; n + me];
        let corr: Vec<f64> = (0..mi).map(|i| z[i] * e.ci[i] / s[i] + mu / s[i]).collect();
        let jc = e.ji.tr_mul(&corr);
        for j in 0..n {
            rhs[j] = -grad_l[j] - jc[j];
        }
        for i in 0..me {
            rhs[n + i] = -e.ce[i];
        }

        // factor with increasing regularization until the curvature test holds;
        // a step that the line search cuts hard is recomputed with more damping
        let w_mat = {
            let mut t = Triplets::new(n, n);
            t.entries = base.entries.iter().copied().filter(|(i, j, _)| *i < n && *j < n).collect();
            t
        };
        // curvature on the null space of J_E, tested on W + rho_pen J_E^T J_E
        let w_aug = {
            let w_max = hess.entries.iter().fold(1.0_f64, |m, e| m.max(e.2.abs()));
            let j_max = e.je.entries.iter().fold(0.0_f64, |m, e| m.max(e.2.abs()));
            let rho_pen = if j_max > 0.0 { 1e6 * w_max / (j_max * j_max) } else { 0.0 };
            let mut t = w_mat.clone();
            let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); me];
            for &(i, j, v) in &e.je.entries {
                rows[i].push((j, v));
            }
            for row in &rows {
                for &(a, va) in row {
                    for &(b, vb) in row {
                        t.push(a, b, rho_pen * va * vb);
                    }
                }
            }
            t
        };
        let mut delta_min = 0.0_f64;
        let mut outcome = None;
        for retry in 0..10 {
            let mut delta = delta_min;
            let mut delta_c = 0.0_f64;
            let mut step: Option<(Vec<f64>, SparseLu)> = None;
            for _attempt in 0..40 {
                let mut k = base.clone();
                for j in 0..n {
                    k.entries.push((j, j, delta));
                }
                for i in 0..me {
                    k.entries.push((n + i, n + i, -delta_c));
                }
                match SparseLu::factor(&k) {
                    Ok(lu) => {
                        let d = lu.solve(&rhs);
                        let dw = &d[..n];
                        let wdw = dot(dw, &w_mat.mul(dw)) + delta * dot(dw, dw);
                        let ok = d.iter().all(|v| v.is_finite()) && wdw >= 1e-12 * dot(dw, dw) && {
                            let mut a = w_aug.clone();
                            a.entries.extend((0..n).map(|j| (j, j, delta)));
                            is_positive_definite(&a)
                        };
                        if ok {
                            step = Some((d, lu));
                            break;
                        }
                    }
                    Err(_) => {
                        if delta_c == 0.0 && me > 0 {
                            delta_c = 1e-8 * mu.powf(0.25).max(1e-4);
                        }
                    }
                }
                delta = if delta == 0.0 {
                    if delta_last == 0.0 { 1e-4 } else { (delta_last / 3.0).max(1e-20) }
                } else if delta_last == 0.0 {
                    delta * 100.0
                } else {
                    delta * 8.0
                };
            }
            let Some((d, lu)) = step else { break };
            if delta > 0.0 && retry == 0 {
                delta_last = delta;
            }
            let dw = d[..n].to_vec();
            let dnu = d[n..].to_vec();
            let jdw = e.ji.mul(&dw);
            let dz: Vec<f64> = (0..mi).map(|i| sigma[i] * (jdw[i] + e.ci[i] + mu / z[i])).collect();
            let ds: Vec<f64> = (0..mi).map(|i| mu / z[i] - s[i] - dz[i] / sigma[i]).collect();

            // fraction to the boundary
            let tau = (1.0 - mu).max(0.99);
            let max_step = |v: &[f64], dv: &[f64]| {
                v.iter().zip(dv).fold(1.0_f64, |a, (v, d)| if *d < 0.0 { a.min(-tau * v / d) } else { a })
            };
            let alpha_max = max_step(&s, &ds);
            let alpha_z = max_step(&z, &dz);

            // augmented Lagrangian merit with the trial multipliers; the penalty
            // grows until the step is a descent direction
            let lam_e: Vec<f64> = nu.iter().zip(&dnu).map(|(a, b)| a + b).collect();
            let lam_i: Vec<f64> = z.iter().zip(&dz).map(|(a, b)| a + b).collect();
            let merit = |ev: &Eval, sv: &[f64], rho: f64| {
                let mut v = ev.f - mu * sv.iter().map(|s| s.ln()).sum::<f64>();
                for (c, l) in ev.ce.iter().zip(&lam_e) {
                    v += l * c + 0.5 * rho * c * c;
                }
                for ((c, s), l) in ev.ci.iter().zip(sv).zip(&lam_i) {
                    let r = c + s;
                    v += l * r + 0.5 * rho * r * r;
                }
                v
            };
            let c_sq = dot(&e.ce, &e.ce) + dot(&rp, &rp);
            let curv = dot(&dw, &w_mat.mul(&dw)).max(0.0);
            let dphi0 = dot(&e.grad, &dw) - mu * ds.iter().zip(&s).map(|(d, s)| d / s).sum::<f64>()
                - dot(&lam_e, &e.ce)
                - dot(&lam_i, &rp);
            if c_sq > 0.0 && dphi0 - rho * c_sq > -0.5 * curv {
                rho = (2.0 * rho).max((dphi0 + 0.5 * curv) / c_sq + 1.0);
            }
            let phi0 = merit(&e, &s, rho);
            let dphi = dphi0 - rho * c_sq;
            let merit = |ev: &Eval, sv: &[f64]| merit(ev, sv, rho);

            let mut alpha = alpha_max;
            let mut accepted: Option<(Vec<f64>, Vec<f64>, Eval)> = None;
            let mut tried_soc = false;
            while alpha > 1e-14 {
                let wt: Vec<f64> = w.iter().zip(&dw).map(|(w, d)| w + alpha * d).collect();
                let st: Vec<f64> = s.iter().zip(&ds).map(|(s, d)| s + alpha * d).collect();
                let et = evaluate(p, &wt);
                let finite = et.f.is_finite() && et.ce.iter().chain(&et.ci).all(|v| v.is_finite());
                if finite && merit(&et, &st) <= phi0 + 1e-4 * alpha * dphi.min(0.0) {
                    accepted = Some((wt, st, et));
                    break;
                }
                if finite && !tried_soc && alpha == alpha_max {
                    // second-order correction for the constraint curvature
                    tried_soc = true;
                    let rp_new: Vec<f64> = et.ci.iter().zip(&st).map(|(c, s)| c + s).collect();
                    let srp: Vec<f64> = (0..mi).map(|i| sigma[i] * rp_new[i]).collect();
                    let jt = e.ji.tr_mul(&srp);
                    let mut rhs_c = vec![0.0; n + me];
                    for j in 0..n {
                        rhs_c[j] = -jt[j];
                    }
                    for i in 0..me {
                        rhs_c[n + i] = -et.ce[i];
                    }
                    let dc = lu.solve(&rhs_c);
                    let jdc = e.ji.mul(&dc[..n]);
                    let ds_c: Vec<f64> = (0..mi).map(|i| -(jdc[i] + rp_new[i])).collect();
                    let ws: Vec<f64> = wt.iter().zip(&dc[..n]).map(|(a, b)| a + b).collect();
                    let ss: Vec<f64> = st.iter().zip(&ds_c).map(|(a, b)| a + b).collect();
                    if ss.iter().zip(&s).all(|(a, b)| *a >= (1.0 - tau) * b) {
                        let es = evaluate(p, &ws);
                        let ok = es.f.is_finite() && es.ce.iter().chain(&es.ci).all(|v| v.is_finite());
                        if ok && merit(&es, &ss) <= phi0 + 1e-4 * alpha * dphi.min(0.0) {
                            accepted = Some((ws, ss, es));
                            break;
                        }
                    }
                }
                alpha *= 0.5;
            }
            let short = accepted.is_none() || alpha < 0.1 * alpha_max;
            let last = retry == 9 || delta >= 1e8;
            if !short || last {
                outcome = Some((dw, dnu, dz, ds, alpha, alpha_z, alpha_max, accepted));
                break;
            }
            delta_min = (10.0 * delta).max(1e-6);
        }
        let Some((dw, dnu, dz, ds, alpha, alpha_z, alpha_max, accepted)) = outcome else {
            status = NlpStatus::Infeasible;
            break;
        };
        let (wt, st, et) = match accepted {
            Some(a) => {
                stalls = 0;
                a
            }
            None => {
                stalls += 1;
                if stalls >= 5 {
                    status = if violation(&e) > options.kkt_tol { NlpStatus::Infeasible } else { NlpStatus::MaxIter };
                    break;
                }
                // take a short step anyway to escape
                let alpha = alpha_max * 1e-3;
                let wt: Vec<f64> = w.iter().zip(&dw).map(|(w, d)| w + alpha * d).collect();
                let st: Vec<f64> = s.iter().zip(&ds).map(|(s, d)| s + alpha * d).collect();
                let et = evaluate(p, &wt);
                (wt, st, et)
            }
        };
        let nu_new: Vec<f64> = nu.iter().zip(&dnu).map(|(a, b)| a + alpha.max(alpha_z.min(alpha_max)) * b).collect();
        let mut z_new: Vec<f64> = z.iter().zip(&dz).map(|(a, b)| a + alpha_z * b).collect();
        if let Some(b) = bfgs.as_mut() {
            let g_old = lagrangian_gradient(&e, &nu_new, &z_new);
            let g_new = lagrangian_gradient(&et, &nu_new, &z_new);
            let sk: Vec<f64> = wt.iter().zip(&w).map(|(a, b)| a - b).collect();
            let yk: Vec<f64> = g_new.iter().zip(&g_old).map(|(a, b)| a - b).collect();
            b.update(&sk, &yk);
        }
        // keep z within a band of the central path
        for i in 0..mi {
            let c = mu / st[i];
            z_new[i] = z_new[i].clamp(c / 1e10, c * 1e10);
        }
        w = wt;
        s = st;
        e = et;
        nu = nu_new;
        z = z_new;
    }

    let res = residual_of(&e, &nu, &z);
    let (kkt, w, nu, z) = match best {
        Some(b) if status != NlpStatus::Converged && b.0 < res => b,
        _ => (res, w, nu, z),
    };
    let e = evaluate(p, &w);
    NlpSolution {
        objective: e.f,
        infeasibility: violation(&e),
        primal: w,
        eq_multipliers: nu,
        ineq_multipliers: z,
        kkt_residual: kkt,
        status,
        iterations,
    }
}

/// Rank test for the active constraint gradients (one per row).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RankTest {
    pub full_rank: bool,
    pub smallest_singular_value: f64,
    pub largest_singular_value: f64,
}

pub const RANK_TOL: f64 = 1e-8;
pub const ACTIVE_TOL: f64 = 1e-6;

/// Full row rank iff `sigma_min > RANK_TOL * sigma_max` (and `sigma_max > 0`).
pub fn licq_rank(active_jacobian: &DMatrix<f64>) -> RankTest {
    let (r, c) = active_jacobian.shape();
    if r == 0 {
        return RankTest { full_rank: true, smallest_singular_value: f64::INFINITY, largest_singular_value: 0.0 };
    }
    if r > c {
        let sv = active_jacobian.clone().svd(false, false).singular_values;
        return RankTest { full_rank: false, smallest_singular_value: 0.0, largest_singular_value: sv.max() };
    }
    let sv = active_jacobian.clone().svd(false, false).singular_values;
    let (smin, smax) = (sv.min(), sv.max());
    RankTest { full_rank: smax > 0.0 && smin > RANK_TOL * smax, smallest_singular_value: smin, largest_singular_value: smax }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_dimensional_bound() {
        // min (w - 1)^2 s.t. w <= 0
        let inst = NlpInstance::new(1, |w| (w[0] - 1.0).powi(2), |w| DVector::from_element(1, 2.0 * (w[0] - 1.0)))
            .with_ineq(1, |w| DVector::from_element(1, w[0]), |_| DMatrix::from_element(1, 1, 1.0))
            .with_hessian(|_, _, _| DMatrix::from_element(1, 1, 2.0));
        let sol = solve_nlp(&inst, &[-0.5], &NlpOptions::default());
        assert_eq!(sol.status, NlpStatus::Converged);
        assert!(sol.primal[0].abs() < 1e-8);
        assert!((sol.ineq_multipliers[0] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn equality_constrained_quadratic() {
        // min x^2 + y^2 s.t. x + y = 1 -> (0.5, 0.5), nu = -1
        let inst = NlpInstance::new(2, |w| w[0] * w[0] + w[1] * w[1], |w| DVector::from_vec(vec![2.0 * w[0], 2.0 * w[1]]))
            .with_eq(1, |w| DVector::from_element(1, w[0] + w[1] - 1.0), |_| DMatrix::from_row_slice(1, 2, &[1.0, 1.0]))
            .with_hessian(|_, _, _| DMatrix::identity(2, 2) * 2.0);
        let sol = solve_nlp(&inst, &[3.0, -1.0], &NlpOptions::default());
        assert_eq!(sol.status, NlpStatus::Converged);
        assert!((sol.primal[0] - 0.5).abs() < 1e-9);
        assert!((sol.eq_multipliers[0] + 1.0).abs() < 1e-9);
    }

    #[test]
    fn quasi_newton_fallback_converges() {
        // Rosenbrock-type with a bound: min (1-x)^2 + 10 (y - x^2)^2, x <= 0.8
        let inst = NlpInstance::new(
            2,
            |w| (1.0 - w[0]).powi(2) + 10.0 * (w[1] - w[0] * w[0]).powi(2),
            |w| {
                let r = w[1] - w[0] * w[0];
                DVector::from_vec(vec![-2.0 * (1.0 - w[0]) - 40.0 * w[0] * r, 20.0 * r])
            },
        )
        .with_bounds(&[f64::NEG_INFINITY, f64::NEG_INFINITY], &[0.8, f64::INFINITY]);
        let opts = NlpOptions { max_iter: 500, ..NlpOptions::default() };
        let sol = solve_nlp(&inst, &[0.0, 0.0], &opts);
        assert_eq!(sol.status, NlpStatus::Converged, "{sol:?}");
        assert!((sol.primal[0] - 0.8).abs() < 1e-7);
        assert!((sol.primal[1] - 0.64).abs() < 1e-7);
    }

    #[test]
    fn iteration_log_is_emitted() {
        let inst = NlpInstance::new(1, |w| w[0] * w[0], |w| DVector::from_element(1, 2.0 * w[0]))
            .with_hessian(|_, _, _| DMatrix::from_element(1, 1, 2.0));
        let mut records = Vec::new();
        solve_nlp_logged(&inst, &[1.0], &NlpOptions::default(), &mut |r| records.push(*r));
        assert!(!records.is_empty());
        assert!(records.last().unwrap().kkt_residual <= 1e-8);
    }

    #[test]
    fn rank_tests() {
        let fish = DMatrix::from_row_slice(1, 2, &[-1.0, -1.0]);
        assert!(licq_rank(&fish).full_rank);
        let dup = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 1.0, 2.0]);
        assert!(!licq_rank(&dup).full_rank);
        let halkin = DMatrix::from_row_slice(1, 2, &[0.0, 0.0]);
        assert!(!licq_rank(&halkin).full_rank);
        assert!(licq_rank(&DMatrix::zeros(0, 2)).full_rank);
    }
}
