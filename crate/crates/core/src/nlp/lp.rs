//! Dense two-phase simplex with Bland's rule.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

const PIVOT_TOL: f64 = 1e-10;
const PHASE1_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
}

/// `min c^T x` s.t. `A_eq x = b_eq`, `A_ub x <= b_ub`, `lower <= x <= upper`
/// (bounds may be infinite).
#[derive(Debug, Clone)]
pub struct LpProblem {
    pub cost: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub a_ub: DMatrix<f64>,
    pub b_ub: DVector<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl LpProblem {
    /// Problem with no rows and `x >= 0`.
    pub fn new(cost: DVector<f64>) -> Self {
        let n = cost.len();
        Self {
            cost,
            a_eq: DMatrix::zeros(0, n),
            b_eq: DVector::zeros(0),
            a_ub: DMatrix::zeros(0, n),
            b_ub: DVector::zeros(0),
            lower: vec![0.0; n],
            upper: vec![f64::INFINITY; n],
        }
    }

    pub fn dim(&self) -> usize {
        self.cost.len()
    }

    pub fn push_ub(&mut self, row: &[f64], rhs: f64) {
        self.a_ub = push_row(&self.a_ub, row);
        self.b_ub = self.b_ub.push(rhs);
    }

    pub fn push_eq(&mut self, row: &[f64], rhs: f64) {
        self.a_eq = push_row(&self.a_eq, row);
        self.b_eq = self.b_eq.push(rhs);
    }
}

fn push_row(m: &DMatrix<f64>, row: &[f64]) -> DMatrix<f64> {
    let r = m.nrows();
    let mut out = m.clone().insert_row(r, 0.0);
    for (j, v) in row.iter().enumerate() {
        out[(r, j)] = *v;
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct LpSolution {
    pub status: LpStatus,
    pub x: Vec<f64>,
    pub objective: f64,
    /// Multipliers `nu` with `c + A_eq^T nu + A_ub^T z - r = 0`.
    pub eq_duals: Vec<f64>,
    /// Nonnegative multipliers of the `<=` rows.
    pub ub_duals: Vec<f64>,
    pub duality_gap: f64,
    /// Phase-1 infeasibility measure (0 when feasible).
    pub infeasibility: f64,
}

/// How an original variable maps onto nonnegative standard-form columns.
#[derive(Debug, Clone, Copy)]
enum VarMap {
    /// `x = offset + y`
    Shift(usize, f64),
    /// `x = offset - y`
    Mirror(usize, f64),
    /// `x = y+ - y-`
    Split(usize, usize),
}

pub fn solve_lp(lp: &LpProblem) -> LpSolution {
    let n = lp.dim();
    assert_eq!(lp.a_eq.ncols(), n);
    assert_eq!(lp.a_ub.ncols(), n);

    // variable substitution
    let mut maps = Vec::with_capacity(n);
    let mut ncols = 0;
    let mut extra_ub: Vec<(usize, f64)> = Vec::new();
    for j in 0..n {
        let (l, u) = (lp.lower[j], lp.upper[j]);
        if l.is_finite() {
            maps.push(VarMap::Shift(ncols, l));
            if u.is_finite() {
                extra_ub.push((ncols, u - l));
            }
            ncols += 1;
        } else if u.is_finite() {
            maps.push(VarMap::Mirror(ncols, u));
            ncols += 1;
        } else {
            maps.push(VarMap::Split(ncols, ncols + 1));
            ncols += 2;
        }
    }
    // rows: eq rows, ub rows, bound rows; each row gets a slack if it is `<=`
    let m_eq = lp.a_eq.nrows();
    let m_ub = lp.a_ub.nrows() + extra_ub.len();
    let m = m_eq + m_ub;
    let total = ncols + m_ub;
    let mut a = DMatrix::zeros(m, total);
    let mut b = DVector::zeros(m);
    let mut c = DVector::zeros(total);
    let expand = |row: &[f64], a: &mut DMatrix<f64>, r: usize| -> f64 {
        let mut shift = 0.0;
        for (j, map) in maps.iter().enumerate() {
            let v = row[j];
            match *map {
                VarMap::Shift(k, off) => {
                    a[(r, k)] += v;
                    shift += v * off;
                }
                VarMap::Mirror(k, off) => {
                    a[(r, k)] -= v;
                    shift += v * off;
                }
                VarMap::Split(p, q) => {
                    a[(r, p)] += v;
                    a[(r, q)] -= v;
                }
            }
        }
        shift
    };
    for r in 0..m_eq {
        let row: Vec<f64> = lp.a_eq.row(r).iter().copied().collect();
        let s = expand(&row, &mut a, r);
        b[r] = lp.b_eq[r] - s;
    }
    for r in 0..lp.a_ub.nrows() {
        let row: Vec<f64> = lp.a_ub.row(r).iter().copied().collect();
        let s = expand(&row, &mut a, m_eq + r);
        b[m_eq + r] = lp.b_ub[r] - s;
    }
    for (k, (col, cap)) in extra_ub.iter().enumerate() {
        let r = m_eq + lp.a_ub.nrows() + k;
        a[(r, *col)] = 1.0;
        b[r] = *cap;
    }
    for r in 0..m_ub {
        a[(m_eq + r, ncols + r)] = 1.0;
    }
    {
        let cost: Vec<f64> = lp.cost.iter().copied().collect();
        let mut tmp = DMatrix::zeros(1, total);
        expand(&cost, &mut tmp, 0);
        for j in 0..total {
            c[j] = tmp[(0, j)];
        }
    }
    let mut sign = vec![1.0; m];
    for r in 0..m {
        if b[r] < 0.0 {
            sign[r] = -1.0;
            b[r] = -b[r];
            for j in 0..total {
                a[(r, j)] = -a[(r, j)];
            }
        }
    }

    let std = standard_simplex(&a, &b, &c);
    let recover = |y: &DVector<f64>| -> Vec<f64> {
        maps.iter()
            .map(|map| match *map {
                VarMap::Shift(k, off) => off + y[k],
                VarMap::Mirror(k, off) => off - y[k],
                VarMap::Split(p, q) => y[p] - y[q],
            })
            .collect()
    };
    match std {
        StdResult::Infeasible(measure) => LpSolution {
            status: LpStatus::Infeasible,
            x: vec![f64::NAN; n],
            objective: f64::NAN,
            eq_duals: vec![],
            ub_duals: vec![],
            duality_gap: f64::NAN,
            infeasibility: measure,
        },
        StdResult::Unbounded(y) => LpSolution {
            status: LpStatus::Unbounded,
            x: recover(&y),
            objective: f64::NEG_INFINITY,
            eq_duals: vec![],
            ub_duals: vec![],
            duality_gap: f64::NAN,
            infeasibility: 0.0,
        },
        StdResult::Optimal { x: y, duals } => {
            let x = recover(&y);
            let objective = lp.cost.iter().zip(&x).map(|(c, x)| c * x).sum::<f64>();
            // standard-form duals satisfy A^T pi <= c; undo row signs
            let pi: Vec<f64> = duals.iter().zip(&sign).map(|(d, s)| d * s).collect();
            let primal_std = c.dot(&y);
            let dual_std: f64 = duals.iter().zip(b.iter()).map(|(d, b)| d * b).sum();
            let eq_duals = pi[..m_eq].iter().map(|v| -v).collect();
            let ub_duals = pi[m_eq..m_eq + lp.a_ub.nrows()].iter().map(|v| (-v).max(0.0)).collect();
            LpSolution {
                status: LpStatus::Optimal,
                x,
                objective,
                eq_duals,
                ub_duals,
                duality_gap: (primal_std - dual_std).abs(),
                infeasibility: 0.0,
            }
        }
    }
}

enum StdResult {
    Optimal { x: DVector<f64>, duals: Vec<f64> },
    Infeasible(f64),
    Unbounded(DVector<f64>),
}

struct Tableau {
    /// `m + 1` rows (last is the objective), `cols + 1` columns (last is rhs).
    t: DMatrix<f64>,
    basis: Vec<usize>,
}

impl Tableau {
    fn pivot(&mut self, r: usize, col: usize) {
        let rows = self.t.nrows();
        let p = self.t[(r, col)];
        self.t.row_mut(r).scale_mut(1.0 / p);
        let prow = self.t.row(r).clone_owned();
        for i in 0..rows {
            if i != r {
                let f = self.t[(i, col)];
                if f != 0.0 {
                    for j in 0..self.t.ncols() {
                        self.t[(i, j)] -= f * prow[j];
                    }
                }
            }
        }
        self.basis[r] = col;
    }

    /// Bland's rule over columns `< allowed`. Returns false when unbounded.
    fn run(&mut self, allowed: usize) -> bool {
        let m = self.basis.len();
        let rhs = self.t.ncols() - 1;
        loop {
            let obj = m;
            let Some(col) = (0..allowed).find(|&j| self.t[(obj, j)] < -PIVOT_TOL) else {
                return true;
            };
            let mut best: Option<(f64, usize)> = None;
            for i in 0..m {
                let a = self.t[(i, col)];
                if a > PIVOT_TOL {
                    let ratio = self.t[(i, rhs)] / a;
                    match best {
                        Some((r, bi)) if ratio > r + 1e-12 || (ratio >= r - 1e-12 && self.basis[i] >= self.basis[bi]) => {}
                        _ => best = Some((ratio, i)),
                    }
                }
            }
            match best {
                Some((_, r)) => self.pivot(r, col),
                None => return false,
            }
        }
    }
}

/// `min c^T x` s.t. `A x = b`, `x >= 0`, with `b >= 0`.
fn standard_simplex(a: &DMatrix<f64>, b: &DVector<f64>, c: &DVector<f64>) -> StdResult {
    let (m, n) = (a.nrows(), a.ncols());
    let cols = n + m;
    let mut t = DMatrix::zeros(m + 1, cols + 1);
    t.view_mut((0, 0), (m, n)).copy_from(a);
    for i in 0..m {
        t[(i, n + i)] = 1.0;
        t[(i, cols)] = b[i];
    }
    // phase 1 objective: sum of artificials, expressed in nonbasic columns
    for j in 0..=cols {
        if j < n || j == cols {
            t[(m, j)] = -(0..m).map(|i| t[(i, j)]).sum::<f64>();
        }
    }
    let mut tab = Tableau { t, basis: (n..n + m).collect() };
    tab.run(n);
    let infeas = -tab.t[(m, cols)];
    // phase 1 sums m artificials, each carrying round-off on the scale of b
    if infeas > PHASE1_TOL * (1.0 + b.amax()) * (m as f64).sqrt() {
        return StdResult::Infeasible(infeas);
    }
    // drive remaining artificials out of the basis
    for r in 0..m {
        if tab.basis[r] >= n {
            if let Some(col) = (0..n).find(|&j| tab.t[(r, j)].abs() > 1e-9) {
                tab.pivot(r, col);
            }
        }
    }
    // phase 2 objective
    for j in 0..=cols {
        tab.t[(m, j)] = if j < n { c[j] } else { 0.0 };
    }
    for r in 0..m {
        let col = tab.basis[r];
        let cb = if col < n { c[col] } else { 0.0 };
        if cb != 0.0 {
            for j in 0..=cols {
                let v = tab.t[(r, j)];
                tab.t[(m, j)] -= cb * v;
            }
        }
    }
    // artificial columns stay out (degenerate rows with an artificial at 0
    // are redundant)
    let bounded = tab.run(n);
    let mut x = DVector::zeros(n);
    for r in 0..m {
        if tab.basis[r] < n {
            x[tab.basis[r]] = tab.t[(r, cols)];
        }
    }
    if !bounded {
        return StdResult::Unbounded(x);
    }
    // duals: reduced cost of artificial i is 0 - pi_i
    let duals = (0..m).map(|i| -tab.t[(m, n + i)]).collect();
    StdResult::Optimal { x, duals }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn maximize_bounded_scalar() {
        // max c s.t. c <= 3, c free
        let mut lp = LpProblem::new(DVector::from_vec(vec![-1.0]));
        lp.lower = vec![f64::NEG_INFINITY];
        lp.push_ub(&[1.0], 3.0);
        let s = solve_lp(&lp);
        assert_eq!(s.status, LpStatus::Optimal);
        assert!((s.x[0] - 3.0).abs() < 1e-12);
        assert!((s.ub_duals[0] - 1.0).abs() < 1e-12);
        assert!(s.duality_gap <= 1e-8);
    }

    #[test]
    fn contradictory_rows_are_infeasible() {
        let mut lp = LpProblem::new(DVector::from_vec(vec![0.0]));
        lp.lower = vec![f64::NEG_INFINITY];
        lp.push_ub(&[1.0], 0.0);
        lp.push_ub(&[-1.0], -1.0);
        assert_eq!(solve_lp(&lp).status, LpStatus::Infeasible);
    }

    #[test]
    fn unbounded_is_flagged() {
        let mut lp = LpProblem::new(DVector::from_vec(vec![-1.0, 0.0]));
        lp.push_ub(&[-1.0, 1.0], 1.0);
        assert_eq!(solve_lp(&lp).status, LpStatus::Unbounded);
    }

    #[test]
    fn equality_and_box_bounds() {
        // min x + 2y s.t. x + y = 1, 0.25 <= y <= 2, x <= 0.5
        let mut lp = LpProblem::new(DVector::from_vec(vec![1.0, 2.0]));
        lp.lower = vec![f64::NEG_INFINITY, 0.25];
        lp.upper = vec![0.5, 2.0];
        lp.push_eq(&[1.0, 1.0], 1.0);
        let s = solve_lp(&lp);
        assert_eq!(s.status, LpStatus::Optimal);
        assert!((s.x[0] - 0.5).abs() < 1e-12 && (s.x[1] - 0.5).abs() < 1e-12);
        assert!((s.objective - 1.5).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn optimum_beats_feasible_samples(
            c in proptest::collection::vec(-2.0f64..2.0, 3),
            row in proptest::collection::vec(0.1f64..2.0, 3),
            rhs in 0.5f64..5.0,
            samples in proptest::collection::vec(proptest::collection::vec(0.0f64..1.0, 3), 20),
        ) {
            // [DERIVED] min c^T x over {x in [0, 1]^3, row^T x <= rhs}
            let mut lp = LpProblem::new(DVector::from_vec(c.clone()));
            lp.upper = vec![1.0; 3];
            lp.push_ub(&row, rhs);
            let s = solve_lp(&lp);
            prop_assert_eq!(s.status, LpStatus::Optimal);
            let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
            prop_assert!(dot(&row, &s.x) <= rhs + 1e-9);
            prop_assert!(s.x.iter().all(|v| *v >= -1e-12 && *v <= 1.0 + 1e-12));
            for p in samples.iter().filter(|p| dot(&row, p) <= rhs) {
                prop_assert!(s.objective <= dot(&c, p) + 1e-9);
            }
        }
    }
}
