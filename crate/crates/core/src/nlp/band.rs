//! Banded LU with partial pivoting and reverse Cuthill-McKee ordering for the
//! sparse KKT systems produced by collocation.

use std::collections::VecDeque;

/// Sparse matrix in coordinate form; duplicate entries are summed.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Triplets {
    pub nrows: usize,
    pub ncols: usize,
    pub entries: Vec<(usize, usize, f64)>,
}

impl Triplets {
    pub fn new(nrows: usize, ncols: usize) -> Self {
        Self { nrows, ncols, entries: Vec::new() }
    }

    pub fn push(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.nrows && j < self.ncols);
        if v != 0.0 {
            self.entries.push((i, j, v));
        }
    }

    pub fn mul(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.nrows];
        for &(i, j, v) in &self.entries {
            y[i] += v * x[j];
        }
        y
    }

    /// `A^T y`.
    pub fn tr_mul(&self, y: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; self.ncols];
        for &(i, j, v) in &self.entries {
            x[j] += v * y[i];
        }
        x
    }

    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let mut m = nalgebra::DMatrix::zeros(self.nrows, self.ncols);
        for &(i, j, v) in &self.entries {
            m[(i, j)] += v;
        }
        m
    }

    pub fn from_dense(m: &nalgebra::DMatrix<f64>) -> Self {
        let mut t = Self::new(m.nrows(), m.ncols());
        for j in 0..m.ncols() {
            for i in 0..m.nrows() {
                t.push(i, j, m[(i, j)]);
            }
        }
        t
    }
}

/// Reverse Cuthill-McKee permutation of a square pattern (symmetrized).
/// Returns `perm` with `perm[new] = old`.
pub fn rcm(n: usize, entries: &[(usize, usize, f64)]) -> Vec<usize> {
    let mut adj = vec![Vec::new(); n];
    for &(i, j, _) in entries {
        if i != j {
            adj[i].push(j);
            adj[j].push(i);
        }
    }
    for a in &mut adj {
        a.sort_unstable();
        a.dedup();
    }
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let bfs = |start: usize, visited: &mut Vec<bool>, order: &mut Vec<usize>| {
        let mut queue = VecDeque::new();
        visited[start] = true;
        queue.push_back(start);
        while let Some(v) = queue.pop_front() {
            order.push(v);
            let mut next: Vec<usize> = adj[v].iter().copied().filter(|w| !visited[*w]).collect();
            next.sort_by_key(|w| (adj[*w].len(), *w));
            for w in next {
                visited[w] = true;
                queue.push_back(w);
            }
        }
    };
    while order.len() < n {
        // lowest-degree unvisited node, then one BFS sweep to reach a
        // pseudo-peripheral start
        let seed = (0..n).filter(|v| !visited[*v]).min_by_key(|v| (adj[*v].len(), *v)).unwrap();
        let mut probe_visited = visited.clone();
        let mut probe = Vec::new();
        bfs(seed, &mut probe_visited, &mut probe);
        let start = *probe.last().unwrap();
        bfs(start, &mut visited, &mut order);
    }
    order.reverse();
    order
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SingularMatrix;

/// LU factors of a band matrix, `P A = L U`, with row interchanges applied
/// progressively.
#[derive(Debug, Clone)]
pub struct BandLu {
    n: usize,
    kl: usize,
    ku: usize,
    width: usize,
    /// Row `i` holds columns `i - kl ..= i + kl + ku`.
    rows: Vec<f64>,
    lower: Vec<f64>,
    pivots: Vec<usize>,
}

impl BandLu {
    fn idx(&self, i: usize, j: usize) -> usize {
        i * self.width + (j + self.kl - i)
    }

    /// Factors an `n x n` matrix given by triplets (already permuted).
    pub fn factor(n: usize, entries: &[(usize, usize, f64)]) -> Result<Self, SingularMatrix> {
        let mut kl = 0;
        let mut ku = 0;
        for &(i, j, _) in entries {
            if i > j {
                kl = kl.max(i - j);
            } else {
                ku = ku.max(j - i);
            }
        }
        let width = 2 * kl + ku + 1;
        let mut lu = Self { n, kl, ku, width, rows: vec![0.0; n * width], lower: vec![0.0; n * kl.max(1)], pivots: vec![0; n] };
        for &(i, j, v) in entries {
            let k = lu.idx(i, j);
            lu.rows[k] += v;
        }
        let scale = lu.rows.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(1e-300);
        for k in 0..n {
            let last = (k + kl).min(n - 1);
            let mut p = k;
            let mut best = lu.rows[lu.idx(k, k)].abs();
            for i in k + 1..=last {
                let v = lu.rows[lu.idx(i, k)].abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if best <= 1e-14 * scale || !best.is_finite() {
                return Err(SingularMatrix);
            }
            lu.pivots[k] = p;
            let jmax = (k + kl + ku).min(n - 1);
            if p != k {
                for j in k..=jmax {
                    let (a, b) = (lu.idx(k, j), lu.idx(p, j));
                    lu.rows.swap(a, b);
                }
            }
            let piv = lu.rows[lu.idx(k, k)];
            for i in k + 1..=last {
                let ik = lu.idx(i, k);
                let m = lu.rows[ik] / piv;
                lu.rows[ik] = 0.0;
                lu.lower[k * kl.max(1) + (i - k - 1)] = m;
                if m != 0.0 {
                    for j in k + 1..=jmax {
                        let kj = lu.rows[lu.idx(k, j)];
                        let ij = lu.idx(i, j);
                        lu.rows[ij] -= m * kj;
                    }
                }
            }
        }
        Ok(lu)
    }

    pub fn solve(&self, b: &mut [f64]) {
        let (n, kl) = (self.n, self.kl);
        for k in 0..n {
            let p = self.pivots[k];
            if p != k {
                b.swap(k, p);
            }
            let bk = b[k];
            for i in k + 1..=(k + kl).min(n.saturating_sub(1)) {
                b[i] -= self.lower[k * kl.max(1) + (i - k - 1)] * bk;
            }
        }
        for i in (0..n).rev() {
            let mut acc = b[i];
            for j in i + 1..=(i + kl + self.ku).min(n - 1) {
                acc -= self.rows[self.idx(i, j)] * b[j];
            }
            b[i] = acc / self.rows[self.idx(i, i)];
        }
    }

    pub fn bandwidths(&self) -> (usize, usize) {
        (self.kl, self.ku)
    }
}

/// Sparse square solver: RCM ordering, then banded LU.
#[derive(Debug, Clone)]
pub struct SparseLu {
    perm: Vec<usize>,
    inv: Vec<usize>,
    lu: BandLu,
}

impl SparseLu {
    pub fn factor(a: &Triplets) -> Result<Self, SingularMatrix> {
        assert_eq!(a.nrows, a.ncols);
        let n = a.nrows;
        let perm = rcm(n, &a.entries);
        let mut inv = vec![0; n];
        for (new, old) in perm.iter().enumerate() {
            inv[*old] = new;
        }
        let permuted: Vec<(usize, usize, f64)> = a.entries.iter().map(|&(i, j, v)| (inv[i], inv[j], v)).collect();
        let lu = BandLu::factor(n, &permuted)?;
        Ok(Self { perm, inv, lu })
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut pb: Vec<f64> = self.perm.iter().map(|old| b[*old]).collect();
        self.lu.solve(&mut pb);
        self.inv.iter().map(|new| pb[*new]).collect()
    }

    pub fn bandwidths(&self) -> (usize, usize) {
        self.lu.bandwidths()
    }
}

/// Cholesky test on a symmetric matrix given by its triplets (both
/// triangles, duplicates summed). RCM ordering, banded elimination.
pub fn is_positive_definite(a: &Triplets) -> bool {
    assert_eq!(a.nrows, a.ncols);
    let n = a.nrows;
    let perm = rcm(n, &a.entries);
    let mut inv = vec![0; n];
    for (new, old) in perm.iter().enumerate() {
        inv[*old] = new;
    }
    let mut kl = 0;
    for &(i, j, _) in &a.entries {
        kl = kl.max(inv[i].abs_diff(inv[j]));
    }
    let width = kl + 1;
    // row i holds columns i - kl ..= i
    let mut band = vec![0.0; n * width];
    for &(i, j, v) in &a.entries {
        let (r, c) = (inv[i], inv[j]);
        if c <= r {
            band[r * width + (c + kl - r)] += v;
        }
    }
    for j in 0..n {
        let lo = j.saturating_sub(kl);
        let mut d = band[j * width + kl];
        let scale = d.abs().max(1e-300);
        for k in lo..j {
            let l = band[j * width + (k + kl - j)];
            d -= l * l;
        }
        if !(d > 1e-13 * scale) {
            return false;
        }
        let d = d.sqrt();
        band[j * width + kl] = d;
        for i in j + 1..(j + kl + 1).min(n) {
            let ilo = i.saturating_sub(kl).max(lo);
            let mut v = band[i * width + (j + kl - i)];
            for k in ilo..j {
                v -= band[i * width + (k + kl - i)] * band[j * width + (k + kl - j)];
            }
            band[i * width + (j + kl - i)] = v / d;
        }
    }
    true
}
