//! H-polytopes, the symmetric generator sets used as candidate invariant
//! sets, and the geometric operations built on the LP solver.

mod lp;

pub use lp::{lp_solve, LpResult, LpStatus, Sense, TOL_FEAS, TOL_PIVOT};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::PolyError;
use crate::linalg::{from_rows, to_rows};

pub const TOL_VERTEX: f64 = 1e-7;
const TOL_REDUNDANT: f64 = 1e-9;

/// `{x : a x <= b}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "PolyDoc", try_from = "PolyDoc")]
pub struct HPolytope {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

#[derive(Serialize, Deserialize)]
struct PolyDoc {
    #[serde(rename = "H")]
    h: Vec<Vec<f64>>,
    #[serde(rename = "h")]
    rhs: Vec<f64>,
    dim: usize,
}

impl From<HPolytope> for PolyDoc {
    fn from(p: HPolytope) -> Self {
        PolyDoc { h: to_rows(&p.a), rhs: p.b.iter().cloned().collect(), dim: p.dim() }
    }
}

impl TryFrom<PolyDoc> for HPolytope {
    type Error = PolyError;
    fn try_from(d: PolyDoc) -> Result<Self, PolyError> {
        let a = if d.h.is_empty() { DMatrix::zeros(0, d.dim) } else { from_rows(&d.h) };
        HPolytope::new(a, DVector::from_vec(d.rhs))
    }
}

impl HPolytope {
    pub fn new(a: DMatrix<f64>, b: DVector<f64>) -> Result<Self, PolyError> {
        if a.nrows() != b.len() {
            return Err(PolyError::Dimension(format!("{} rows but {} bounds", a.nrows(), b.len())));
        }
        if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(PolyError::NumericalBreakdown("non-finite polytope data".into()));
        }
        Ok(Self { a, b })
    }

    /// The canonical empty set `0 x <= -1`.
    pub fn empty(n: usize) -> Self {
        Self { a: DMatrix::zeros(1, n), b: DVector::from_element(1, -1.0) }
    }

    /// The whole space.
    pub fn universe(n: usize) -> Self {
        Self { a: DMatrix::zeros(0, n), b: DVector::zeros(0) }
    }

    /// Box `{x : |x_k| <= r_k}`.
    pub fn boxed(r: &[f64]) -> Self {
        let n = r.len();
        let mut a = DMatrix::zeros(2 * n, n);
        let mut b = DVector::zeros(2 * n);
        for k in 0..n {
            a[(k, k)] = 1.0;
            a[(n + k, k)] = -1.0;
            b[k] = r[k];
            b[n + k] = r[k];
        }
        Self { a, b }
    }

    pub fn dim(&self) -> usize {
        self.a.ncols()
    }

    pub fn rows(&self) -> usize {
        self.a.nrows()
    }

    pub fn contains_point(&self, x: &DVector<f64>, tol: f64) -> bool {
        self.residual(x) <= tol
    }

    /// Largest constraint violation `max_k (a_k x - b_k)` (negative inside).
    pub fn residual(&self, x: &DVector<f64>) -> f64 {
        if self.rows() == 0 {
            return f64::NEG_INFINITY;
        }
        (&self.a * x - &self.b).max()
    }

    pub fn intersect(&self, other: &HPolytope) -> Result<HPolytope, PolyError> {
        if self.dim() != other.dim() {
            return Err(PolyError::Dimension(format!("{} vs {}", self.dim(), other.dim())));
        }
        let mut a = DMatrix::zeros(self.rows() + other.rows(), self.dim());
        a.rows_mut(0, self.rows()).copy_from(&self.a);
        a.rows_mut(self.rows(), other.rows()).copy_from(&other.a);
        let b = DVector::from_iterator(a.nrows(), self.b.iter().chain(other.b.iter()).cloned());
        Ok(HPolytope { a, b })
    }

    pub fn is_empty(&self) -> Result<bool, PolyError> {
        let r = lp_solve(&DVector::zeros(self.dim()), &self.a, &self.b, Sense::Max)?;
        Ok(r.status == LpStatus::Infeasible)
    }

    pub fn is_bounded(&self) -> Result<bool, PolyError> {
        for k in 0..self.dim() {
            for s in [1.0, -1.0] {
                let mut c = DVector::zeros(self.dim());
                c[k] = s;
                if lp_solve(&c, &self.a, &self.b, Sense::Max)?.status == LpStatus::Unbounded {
                    return Ok(false);
                }
            }
        }
        Ok(true)
    }

    /// Rows scaled to unit Euclidean norm; zero rows are dropped if trivially
    /// satisfied and turn the set into [`HPolytope::empty`] otherwise.
    pub fn normalized(&self) -> HPolytope {
        let mut rows = Vec::new();
        let mut rhs = Vec::new();
        for k in 0..self.rows() {
            let nrm = self.a.row(k).norm();
            if nrm <= 1e-14 * (1.0 + self.b[k].abs()) {
                if self.b[k] < -TOL_FEAS {
                    return HPolytope::empty(self.dim());
                }
                continue;
            }
            rows.push(self.a.row(k) / nrm);
            rhs.push(self.b[k] / nrm);
        }
        let a = if rows.is_empty() { DMatrix::zeros(0, self.dim()) } else { DMatrix::from_rows(&rows) };
        HPolytope { a, b: DVector::from_vec(rhs) }
    }

    /// Normalize and merge rows with (numerically) identical normals.
    pub fn deduplicated(&self) -> HPolytope {
        let p = self.normalized();
        let mut keep: Vec<usize> = Vec::new();
        let mut b = p.b.clone();
        'outer: for k in 0..p.rows() {
            for &q in &keep {
                if (p.a.row(k) - p.a.row(q)).amax() < 1e-12 {
                    b[q] = b[q].min(b[k]);
                    continue 'outer;
                }
            }
            keep.push(k);
        }
        let a = p.a.select_rows(keep.iter());
        let b = DVector::from_iterator(keep.len(), keep.iter().map(|&k| b[k]));
        HPolytope { a, b }
    }

    /// Remove strictly redundant rows (those whose maximum over the other
    /// remaining rows falls short of their bound by more than `1e-9`).
    pub fn reduced(&self) -> Result<HPolytope, PolyError> {
        let p = self.deduplicated();
        if p.rows() > 0 && p.is_empty()? {
            return Ok(HPolytope::empty(p.dim()));
        }
        let mut alive = vec![true; p.rows()];
        for k in 0..p.rows() {
            let others: Vec<usize> = (0..p.rows()).filter(|&q| q != k && alive[q]).collect();
            let a = p.a.select_rows(others.iter());
            let b = DVector::from_iterator(others.len(), others.iter().map(|&q| p.b[q]));
            let c = p.a.row(k).transpose();
            let r = lp_solve(&c, &a, &b, Sense::Max)?;
            if r.status == LpStatus::Optimal && r.value.unwrap() < p.b[k] - TOL_REDUNDANT {
                alive[k] = false;
            }
        }
        let idx: Vec<usize> = (0..p.rows()).filter(|&k| alive[k]).collect();
        Ok(HPolytope { a: p.a.select_rows(idx.iter()), b: DVector::from_iterator(idx.len(), idx.iter().map(|&k| p.b[k])) })
    }

    /// Chebyshev-style interior check: is there a point strictly inside?
    pub fn has_interior(&self, margin: f64) -> Result<bool, PolyError> {
        let p = self.normalized();
        let n = p.dim();
        // max t s.t. a x + t <= b, t <= 1
        let mut a = DMatrix::zeros(p.rows() + 1, n + 1);
        a.view_mut((0, 0), (p.rows(), n)).copy_from(&p.a);
        for k in 0..p.rows() {
            a[(k, n)] = 1.0;
        }
        a[(p.rows(), n)] = 1.0;
        let b = DVector::from_iterator(p.rows() + 1, p.b.iter().cloned().chain(std::iter::once(1.0)));
        let mut c = DVector::zeros(n + 1);
        c[n] = 1.0;
        let r = lp_solve(&c, &a, &b, Sense::Max)?;
        Ok(r.status == LpStatus::Optimal && r.value.unwrap() > margin)
    }
}

/// Symmetric candidate set `{x : -1 <= z h x <= 1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct GenSet {
    pub z: DMatrix<f64>,
    pub h: DMatrix<f64>,
}

impl GenSet {
    pub fn new(z: DMatrix<f64>, h: DMatrix<f64>) -> Result<Self, PolyError> {
        if z.ncols() != h.nrows() || !h.is_square() {
            return Err(PolyError::Dimension(format!(
                "Z is {}x{}, H is {}x{}",
                z.nrows(),
                z.ncols(),
                h.nrows(),
                h.ncols()
            )));
        }
        Ok(Self { z, h })
    }

    pub fn dim(&self) -> usize {
        self.h.ncols()
    }

    /// Rows `[Z H; -Z H] x <= 1`.
    pub fn to_hpolytope(&self) -> HPolytope {
        let zh = &self.z * &self.h;
        let r = zh.nrows();
        let mut a = DMatrix::zeros(2 * r, self.dim());
        a.rows_mut(0, r).copy_from(&zh);
        a.rows_mut(r, r).copy_from(&(-zh));
        HPolytope { a, b: DVector::from_element(2 * r, 1.0) }
    }

    pub fn contains_point(&self, x: &DVector<f64>, tol: f64) -> bool {
        (&self.z * (&self.h * x)).amax() <= 1.0 + tol
    }
}

/// Anything that can be viewed as an H-polytope.
pub trait AsPolytope {
    fn polytope(&self) -> std::borrow::Cow<'_, HPolytope>;
}

impl AsPolytope for HPolytope {
    fn polytope(&self) -> std::borrow::Cow<'_, HPolytope> {
        std::borrow::Cow::Borrowed(self)
    }
}

impl AsPolytope for GenSet {
    fn polytope(&self) -> std::borrow::Cow<'_, HPolytope> {
        std::borrow::Cow::Owned(self.to_hpolytope())
    }
}

/// `max_{x in S} dir.x`.
pub fn support(set: &impl AsPolytope, dir: &DVector<f64>) -> Result<f64, PolyError> {
    let p = set.polytope();
    let r = lp_solve(dir, &p.a, &p.b, Sense::Max)?;
    match r.status {
        LpStatus::Optimal => Ok(r.value.unwrap()),
        LpStatus::Unbounded => Err(PolyError::Unbounded),
        LpStatus::Infeasible => Err(PolyError::Infeasible),
    }
}

/// Margins `b_k - support(inner, a_k)`; contained iff all are `>= -TOL_FEAS`.
pub fn contains(outer: &HPolytope, inner: &impl AsPolytope) -> Result<(bool, DVector<f64>), PolyError> {
    let ip = inner.polytope();
    if ip.dim() != outer.dim() {
        return Err(PolyError::Dimension(format!("{} vs {}", outer.dim(), ip.dim())));
    }
    let mut margins = DVector::zeros(outer.rows());
    for k in 0..outer.rows() {
        let dir = outer.a.row(k).transpose();
        margins[k] = outer.b[k] - support(ip.as_ref(), &dir)?;
    }
    let ok = margins.iter().all(|&m| m >= -TOL_FEAS);
    Ok((ok, margins))
}

/// All vertices of a bounded polytope of dimension at most 3.
pub fn enumerate_vertices(p: &HPolytope) -> Result<Vec<DVector<f64>>, PolyError> {
    let n = p.dim();
    if n > 3 || n == 0 {
        return Err(PolyError::UnsupportedDimension(n));
    }
    let q = p.deduplicated();
    if q.is_empty()? {
        return Ok(Vec::new());
    }
    if !q.is_bounded()? {
        return Err(PolyError::Unbounded);
    }
    let r = q.rows();
    let mut out: Vec<DVector<f64>> = Vec::new();
    let mut push = |idx: &[usize]| {
        let a = q.a.select_rows(idx.iter());
        let b = DVector::from_iterator(n, idx.iter().map(|&k| q.b[k]));
        let lu = a.clone().lu();
        if a.clone().svd(false, false).singular_values.min() < 1e-10 {
            return;
        }
        let Some(x) = lu.solve(&b) else { return };
        if q.residual(&x) > 1e-9 * (1.0 + x.amax()) {
            return;
        }
        if out.iter().all(|v| (v - &x).norm() > TOL_VERTEX) {
            out.push(x);
        }
    };
    match n {
        1 => (0..r).for_each(|i| push(&[i])),
        2 => {
            for i in 0..r {
                for j in i + 1..r {
                    push(&[i, j]);
                }
            }
        }
        _ => {
            for i in 0..r {
                for j in i + 1..r {
                    for k in j + 1..r {
                        push(&[i, j, k]);
                    }
                }
            }
        }
    }
    if n == 2 {
        order_ccw(&mut out);
    }
    Ok(out)
}

fn order_ccw(v: &mut [DVector<f64>]) {
    if v.is_empty() {
        return;
    }
    let c = v.iter().fold(DVector::zeros(2), |acc, x| acc + x) / v.len() as f64;
    v.sort_by(|p, q| {
        let ap = (p[1] - c[1]).atan2(p[0] - c[0]);
        let aq = (q[1] - c[1]).atan2(q[0] - c[0]);
        ap.total_cmp(&aq)
    });
}

/// Eliminate the coordinates in `drop` by Fourier-Motzkin, pruning redundant
/// rows after every step. The result lives in the remaining coordinates, in
/// their original order.
pub fn fm_project(p: &HPolytope, drop: &[usize]) -> Result<HPolytope, PolyError> {
    let n = p.dim();
    if let Some(&bad) = drop.iter().find(|&&k| k >= n) {
        return Err(PolyError::Dimension(format!("cannot eliminate coordinate {bad} of {n}")));
    }
    let mut drop: Vec<usize> = drop.to_vec();
    drop.sort_unstable();
    drop.dedup();
    let keep: Vec<usize> = (0..n).filter(|k| !drop.contains(k)).collect();
    if p.is_empty()? {
        return Ok(HPolytope::empty(keep.len()));
    }
    let mut cur = p.reduced()?;
    // eliminate from the highest index so lower indices stay valid
    for &k in drop.iter().rev() {
        cur = eliminate(&cur, k).reduced()?;
    }
    Ok(cur)
}

fn eliminate(p: &HPolytope, k: usize) -> HPolytope {
    let n = p.dim();
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    let mut zero = Vec::new();
    for r in 0..p.rows() {
        let c = p.a[(r, k)];
        if c.abs() <= 1e-12 * p.a.row(r).amax() {
            zero.push(r);
        } else if c > 0.0 {
            pos.push(r);
        } else {
            neg.push(r);
        }
    }
    let others: Vec<usize> = (0..n).filter(|&j| j != k).collect();
    let mut rows: Vec<DVector<f64>> = Vec::new();
    let mut rhs = Vec::new();
    for &r in &zero {
        rows.push(DVector::from_iterator(n - 1, others.iter().map(|&j| p.a[(r, j)])));
        rhs.push(p.b[r]);
    }
    for &i in &pos {
        for &j in &neg {
            let (ci, cj) = (p.a[(i, k)], -p.a[(j, k)]);
            rows.push(DVector::from_iterator(n - 1, others.iter().map(|&c| cj * p.a[(i, c)] + ci * p.a[(j, c)])));
            rhs.push(cj * p.b[i] + ci * p.b[j]);
        }
    }
    let a = if rows.is_empty() {
        DMatrix::zeros(0, n - 1)
    } else {
        DMatrix::from_fn(rows.len(), n - 1, |r, c| rows[r][c])
    };
    HPolytope { a, b: DVector::from_vec(rhs) }
}

/// One vertex per line, coordinates comma separated, with a header row.
pub fn vertices_csv(vertices: &[DVector<f64>], names: &[&str]) -> String {
    let mut s = names.join(",");
    s.push('\n');
    for v in vertices {
        let line: Vec<String> = v.iter().map(|x| format!("{x:.16e}")).collect();
        s.push_str(&line.join(","));
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(x)
    }

    #[test]
    fn genset_support() {
        let g = GenSet::new(DMatrix::identity(2, 2), DMatrix::from_diagonal(&v(&[2.0, 1.0]))).unwrap();
        assert!((support(&g, &v(&[1.0, 0.0])).unwrap() - 0.5).abs() < 1e-12);
        let bx = HPolytope::boxed(&[1.0, 1.0]);
        assert!((support(&bx, &v(&[1.0, 0.0])).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn box_containment() {
        let big = HPolytope::boxed(&[1.0, 1.0]);
        let small = HPolytope::boxed(&[0.5, 0.5]);
        let (ok, m) = contains(&big, &small).unwrap();
        assert!(ok);
        assert!(m.iter().all(|&x| (x - 0.5).abs() < 1e-12));
        assert!(!contains(&small, &big).unwrap().0);
    }

    #[test]
    fn square_and_hexagon_vertices() {
        assert_eq!(enumerate_vertices(&HPolytope::boxed(&[1.0, 1.0])).unwrap().len(), 4);
        let z = DMatrix::from_fn(3, 2, |k, c| {
            let ang = PI * k as f64 / 3.0;
            if c == 0 { ang.cos() } else { ang.sin() }
        });
        let hex = GenSet::new(z, DMatrix::identity(2, 2)).unwrap().to_hpolytope();
        assert_eq!(enumerate_vertices(&hex).unwrap().len(), 6);
        let half = HPolytope::new(DMatrix::from_row_slice(1, 2, &[1.0, 0.0]), v(&[1.0])).unwrap();
        assert_eq!(enumerate_vertices(&half), Err(PolyError::Unbounded));
        assert_eq!(
            enumerate_vertices(&HPolytope::boxed(&[1.0; 4])),
            Err(PolyError::UnsupportedDimension(4))
        );
    }

    #[test]
    fn fm_by_hand() {
        // |x| <= 1, |u| <= 1, x + u <= 0.5 over (x, u)
        let a = DMatrix::from_row_slice(5, 2, &[1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0, 1.0, 1.0]);
        let p = HPolytope::new(a, v(&[1.0, 1.0, 1.0, 1.0, 0.5])).unwrap();
        let s = fm_project(&p, &[1]).unwrap();
        assert_eq!(s.rows(), 2);
        assert!((support(&s, &v(&[1.0])).unwrap() - 1.0).abs() < 1e-12);
        assert!((support(&s, &v(&[-1.0])).unwrap() - 1.0).abs() < 1e-12);
        let same = fm_project(&p, &[]).unwrap();
        assert_eq!(same.dim(), 2);
        assert_eq!(same.rows(), 5);
    }

    #[test]
    fn empty_projection() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, -1.0]);
        let p = HPolytope::new(a, v(&[-1.0, -1.0])).unwrap();
        let s = fm_project(&p, &[1]).unwrap();
        assert!(s.is_empty().unwrap());
    }

    #[test]
    fn serde_roundtrip() {
        let p = HPolytope::boxed(&[1.0, 2.0]);
        let s = serde_json::to_string(&p).unwrap();
        let q: HPolytope = serde_json::from_str(&s).unwrap();
        assert_eq!(p, q);
    }
}
