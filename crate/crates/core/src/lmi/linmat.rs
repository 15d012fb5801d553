//! Matrices whose entries are affine in the scalar decision variables.

use nalgebra::{DMatrix, DVector};

/// `c0 + sum_t coeff_t * y[var_t] * E(row_t, col_t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinMat {
    pub c0: DMatrix<f64>,
    /// `(var, row, col, coeff)`, merged and sorted by [`LinMat::compact`].
    pub terms: Vec<(usize, usize, usize, f64)>,
}

impl LinMat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { c0: DMatrix::zeros(rows, cols), terms: Vec::new() }
    }

    pub fn constant(m: DMatrix<f64>) -> Self {
        Self { c0: m, terms: Vec::new() }
    }

    pub fn rows(&self) -> usize {
        self.c0.nrows()
    }

    pub fn cols(&self) -> usize {
        self.c0.ncols()
    }

    /// Entry `(r, c)` is the single variable `var`.
    pub fn push_var(&mut self, var: usize, r: usize, c: usize) {
        self.terms.push((var, r, c, 1.0));
    }

    pub fn transpose(&self) -> Self {
        Self {
            c0: self.c0.transpose(),
            terms: self.terms.iter().map(|&(v, r, c, a)| (v, c, r, a)).collect(),
        }
    }

    /// `m * self`.
    pub fn lmul(&self, m: &DMatrix<f64>) -> Self {
        assert_eq!(m.ncols(), self.rows());
        let mut terms = Vec::new();
        for &(v, k, c, a) in &self.terms {
            for r in 0..m.nrows() {
                let f = m[(r, k)];
                if f != 0.0 {
                    terms.push((v, r, c, f * a));
                }
            }
        }
        Self { c0: m * &self.c0, terms }.compact()
    }

    /// `self * m`.
    pub fn rmul(&self, m: &DMatrix<f64>) -> Self {
        self.transpose().lmul(&m.transpose()).transpose()
    }

    pub fn scale(mut self, s: f64) -> Self {
        self.c0 *= s;
        for t in &mut self.terms {
            t.3 *= s;
        }
        self
    }

    pub fn add(&self, other: &LinMat) -> Self {
        assert_eq!(self.c0.shape(), other.c0.shape());
        let mut terms = self.terms.clone();
        terms.extend_from_slice(&other.terms);
        Self { c0: &self.c0 + &other.c0, terms }.compact()
    }

    pub fn sub(&self, other: &LinMat) -> Self {
        self.add(&other.clone().scale(-1.0))
    }

    pub fn add_const(mut self, m: &DMatrix<f64>) -> Self {
        self.c0 += m;
        self
    }

    /// Sort terms and merge duplicates, dropping exact zeros.
    pub fn compact(mut self) -> Self {
        self.terms.sort_by(|a, b| (a.0, a.1, a.2).cmp(&(b.0, b.1, b.2)));
        let mut out: Vec<(usize, usize, usize, f64)> = Vec::with_capacity(self.terms.len());
        for t in self.terms {
            match out.last_mut() {
                Some(last) if (last.0, last.1, last.2) == (t.0, t.1, t.2) => last.3 += t.3,
                _ => out.push(t),
            }
        }
        out.retain(|t| t.3 != 0.0);
        self.terms = out;
        self
    }

    pub fn eval(&self, y: &DVector<f64>) -> DMatrix<f64> {
        let mut m = self.c0.clone();
        for &(v, r, c, a) in &self.terms {
            m[(r, c)] += a * y[v];
        }
        m
    }
}
