//! Dense two-phase tableau simplex for `max/min c.x  s.t.  A x <= b`, `x` free.
//!
//! Free variables are split as `x = x+ - x-`. Rows are scaled to unit
//! infinity norm before solving. Phase one uses a single auxiliary column so
//! that only one pivot is needed to reach a feasible basis. Bland's rule is
//! used throughout, which guarantees termination on degenerate problems.

use nalgebra::{DMatrix, DVector};

use crate::error::PolyError;

pub const TOL_FEAS: f64 = 1e-8;
pub const TOL_PIVOT: f64 = 1e-10;
const TOL_OPT: f64 = 1e-11;
const MAX_PIVOTS: usize = 200_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sense {
    Max,
    Min,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpResult {
    pub status: LpStatus,
    pub x_star: Option<DVector<f64>>,
    pub value: Option<f64>,
    /// Multipliers `y >= 0` with `A^T y = s c` and `b.y = s value`, where
    /// `s = 1` for maximization and `-1` for minimization.
    pub dual: Option<DVector<f64>>,
}

impl LpResult {
    fn bare(status: LpStatus) -> Self {
        Self { status, x_star: None, value: None, dual: None }
    }
}

struct Tableau {
    rows: usize,
    cols: usize,
    // rows x (cols + 1), last column is the right-hand side
    t: Vec<f64>,
    obj: Vec<f64>,
    basis: Vec<usize>,
}

enum RunEnd {
    Optimal,
    Unbounded,
}

impl Tableau {
    fn w(&self) -> usize {
        self.cols + 1
    }

    fn at(&self, i: usize, j: usize) -> f64 {
        self.t[i * self.w() + j]
    }

    fn rhs(&self, i: usize) -> f64 {
        self.at(i, self.cols)
    }

    fn pivot(&mut self, r: usize, c: usize) {
        let w = self.w();
        let p = self.t[r * w + c];
        for v in &mut self.t[r * w..(r + 1) * w] {
            *v /= p;
        }
        let prow: Vec<f64> = self.t[r * w..(r + 1) * w].to_vec();
        for i in 0..self.rows {
            if i == r {
                continue;
            }
            let f = self.t[i * w + c];
            if f != 0.0 {
                for (v, pv) in self.t[i * w..(i + 1) * w].iter_mut().zip(&prow) {
                    *v -= f * pv;
                }
                self.t[i * w + c] = 0.0;
            }
        }
        let f = self.obj[c];
        if f != 0.0 {
            for (v, pv) in self.obj.iter_mut().zip(&prow) {
                *v -= f * pv;
            }
            self.obj[c] = 0.0;
        }
        self.basis[r] = c;
    }

    /// Install the cost vector `f` (minimization) in reduced form.
    fn set_objective(&mut self, f: &[f64]) {
        let w = self.w();
        self.obj = vec![0.0; w];
        self.obj[..self.cols].copy_from_slice(f);
        for i in 0..self.rows {
            let fb = f[self.basis[i]];
            if fb != 0.0 {
                for j in 0..w {
                    self.obj[j] -= fb * self.t[i * w + j];
                }
            }
        }
    }

    fn run(&mut self, allowed: &[bool]) -> Result<RunEnd, PolyError> {
        for _ in 0..MAX_PIVOTS {
            let Some(c) = (0..self.cols).find(|&j| allowed[j] && self.obj[j] < -TOL_OPT) else {
                return Ok(RunEnd::Optimal);
            };
            let mut best: Option<(usize, f64)> = None;
            for i in 0..self.rows {
                let a = self.at(i, c);
                if a > TOL_PIVOT {
                    let ratio = self.rhs(i).max(0.0) / a;
                    best = match best {
                        None => Some((i, ratio)),
                        Some((bi, br)) => {
                            let tie = (ratio - br).abs() <= 1e-12 * (1.0 + br.abs());
                            if ratio < br && !tie || tie && self.basis[i] < self.basis[bi] {
                                Some((i, ratio))
                            } else {
                                Some((bi, br))
                            }
                        }
                    };
                }
            }
            match best {
                None => return Ok(RunEnd::Unbounded),
                Some((r, _)) => self.pivot(r, c),
            }
        }
        Err(PolyError::NumericalBreakdown("pivot limit reached".into()))
    }
}

/// Solve `sense c.x` subject to `a x <= b`.
pub fn lp_solve(c: &DVector<f64>, a: &DMatrix<f64>, b: &DVector<f64>, sense: Sense) -> Result<LpResult, PolyError> {
    let (m, n) = a.shape();
    if c.len() != n || b.len() != m {
        return Err(PolyError::Dimension(format!(
            "objective {} / matrix {}x{} / rhs {}",
            c.len(),
            m,
            n,
            b.len()
        )));
    }
    if a.iter().chain(b.iter()).chain(c.iter()).any(|v| !v.is_finite()) {
        return Err(PolyError::NumericalBreakdown("non-finite problem data".into()));
    }
    let sgn = if sense == Sense::Max { 1.0 } else { -1.0 };

    // scale rows, dropping all-zero rows after checking their sign
    let mut scale = vec![0.0; m];
    let mut keep = Vec::with_capacity(m);
    for i in 0..m {
        let s = a.row(i).amax();
        if s == 0.0 {
            if b[i] < -TOL_FEAS {
                return Ok(LpResult::bare(LpStatus::Infeasible));
            }
            continue;
        }
        scale[i] = 1.0 / s;
        keep.push(i);
    }
    let rows = keep.len();
    if n == 0 {
        return Ok(LpResult {
            status: LpStatus::Optimal,
            x_star: Some(DVector::zeros(0)),
            value: Some(0.0),
            dual: Some(DVector::zeros(m)),
        });
    }

    // columns: x+ (n), x- (n), slacks (rows), auxiliary (1)
    let cols = 2 * n + rows + 1;
    let aux = cols - 1;
    let w = cols + 1;
    let mut t = vec![0.0; rows * w];
    for (r, &i) in keep.iter().enumerate() {
        for j in 0..n {
            let v = a[(i, j)] * scale[i];
            t[r * w + j] = v;
            t[r * w + n + j] = -v;
        }
        t[r * w + 2 * n + r] = 1.0;
        t[r * w + aux] = -1.0;
        t[r * w + cols] = b[i] * scale[i];
    }
    let mut tab = Tableau { rows, cols, t, obj: vec![0.0; w], basis: (0..rows).map(|r| 2 * n + r).collect() };
    let mut allowed = vec![true; cols];

    let worst = (0..rows).min_by(|&p, &q| tab.rhs(p).total_cmp(&tab.rhs(q)));
    if let Some(r0) = worst.filter(|&r| tab.rhs(r) < 0.0) {
        tab.pivot(r0, aux);
        let mut f = vec![0.0; cols];
        f[aux] = 1.0;
        tab.set_objective(&f);
        tab.run(&allowed)?;
        if -tab.obj[cols] > TOL_FEAS {
            return Ok(LpResult::bare(LpStatus::Infeasible));
        }
        if let Some(r) = tab.basis.iter().position(|&bj| bj == aux) {
            if let Some(c) = (0..aux).find(|&j| tab.at(r, j).abs() > TOL_PIVOT) {
                tab.pivot(r, c);
            }
        }
    }
    allowed[aux] = false;

    let mut f = vec![0.0; cols];
    for j in 0..n {
        f[j] = -sgn * c[j];
        f[n + j] = sgn * c[j];
    }
    tab.set_objective(&f);
    if let RunEnd::Unbounded = tab.run(&allowed)? {
        return Ok(LpResult::bare(LpStatus::Unbounded));
    }

    let mut xs = DVector::zeros(n);
    for (r, &bj) in tab.basis.iter().enumerate() {
        let v = tab.rhs(r);
        if bj < n {
            xs[bj] += v;
        } else if bj < 2 * n {
            xs[bj - n] -= v;
        }
    }
    let resid = a * &xs - b;
    let worst_resid = resid.iter().zip(b.iter()).map(|(r, bi)| r / (1.0 + bi.abs())).fold(0.0, f64::max);
    if worst_resid > TOL_FEAS {
        return Err(PolyError::NumericalBreakdown(format!("residual {worst_resid:e} after simplex")));
    }
    let mut dual = DVector::zeros(m);
    for (r, &i) in keep.iter().enumerate() {
        dual[i] = tab.obj[2 * n + r].max(0.0) * scale[i];
    }
    Ok(LpResult { status: LpStatus::Optimal, value: Some(c.dot(&xs)), x_star: Some(xs), dual: Some(dual) })
}
