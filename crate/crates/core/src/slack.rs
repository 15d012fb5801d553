//! Constructive versions of the three matrix-inequality lemmas behind the
//! LMI derivation: product splitting with a slack `X`, inverse elimination
//! with a slack `Psi`, and the `Theta`/`Gamma`/`Xi` linearization.
//!
//! These double as test oracles for the LMI assembly.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::linalg::{block_matrix, is_pd, min_eig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LemmaKind {
    Lemma1,
    Lemma2,
    Lemma3,
}

#[derive(Debug, Clone)]
pub struct LemmaWitness {
    pub kind: LemmaKind,
    pub matrices: BTreeMap<&'static str, DMatrix<f64>>,
    /// Smallest eigenvalue over the matrices the lemma requires to be PD.
    pub min_eig: f64,
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum Refusal {
    #[error("hypothesis is not positive definite (min eigenvalue {0:e})")]
    NotPositive(f64),
    #[error("`{0}` is not symmetric")]
    Asymmetric(&'static str),
    #[error("`{0}` is singular")]
    Singular(&'static str),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("conclusion failed although the hypothesis holds (min eigenvalue {0:e})")]
    InternalConsistency(f64),
}

fn check_sym(m: &DMatrix<f64>, label: &'static str) -> Result<(), Refusal> {
    if !m.is_square() {
        return Err(Refusal::Dimension(format!("`{label}` is not square")));
    }
    let tol = 1e-12 * (1.0 + m.amax());
    if (m - m.transpose()).amax() > tol {
        return Err(Refusal::Asymmetric(label));
    }
    Ok(())
}

fn dims(ok: bool, what: &str) -> Result<(), Refusal> {
    if ok {
        Ok(())
    } else {
        Err(Refusal::Dimension(what.to_string()))
    }
}

/// Split `[R, AB; *, Z] > 0` into `[R, A; *, X^-1] > 0` and `[X, B; *, Z] > 0`.
///
/// Uses `X = B Z^-1 B^T + delta I` with `delta` chosen so that half of the
/// composite's Schur margin survives in the first block.
pub fn lemma1_split(
    r: &DMatrix<f64>,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    z: &DMatrix<f64>,
) -> Result<LemmaWitness, Refusal> {
    check_sym(r, "R")?;
    check_sym(z, "Z")?;
    dims(a.nrows() == r.nrows() && b.ncols() == z.nrows() && a.ncols() == b.nrows(), "R/A/B/Z")?;
    let ab = a * b;
    let comp = block_matrix(&[vec![r.clone(), ab.clone()], vec![ab.transpose(), z.clone()]]);
    let lam = min_eig(&comp);
    if !is_pd(&comp) {
        return Err(Refusal::NotPositive(lam));
    }
    let zinv = z.clone().try_inverse().ok_or(Refusal::Singular("Z"))?;
    let bzb = b * &zinv * b.transpose();
    let schur = r - &ab * &zinv * ab.transpose();
    let margin = min_eig(&schur);
    let an2 = a.norm_squared();
    let delta = if an2 > 0.0 { (0.5 * margin / an2).min(1.0) } else { 1.0 };
    let k = a.ncols();
    let x = (&bzb + &bzb.transpose()) * 0.5 + DMatrix::identity(k, k) * delta;
    let xinv = x.clone().try_inverse().ok_or(Refusal::Singular("X"))?;
    let first = block_matrix(&[vec![r.clone(), a.clone()], vec![a.transpose(), xinv]]);
    let second = block_matrix(&[vec![x.clone(), b.clone()], vec![b.transpose(), z.clone()]]);
    let me = min_eig(&first).min(min_eig(&second));
    let mut matrices = BTreeMap::new();
    matrices.insert("X", x);
    matrices.insert("first", first);
    matrices.insert("second", second);
    Ok(LemmaWitness { kind: LemmaKind::Lemma1, matrices, min_eig: me })
}

/// Witness `Psi` for `[C Psi + Psi^T C^T - X^-1, Psi^T Y; *, Z] > 0` given
/// `[C^T X C, Y; *, Z] > 0`.
///
/// The exact choice is `Psi = C^-1 X^-1`, which makes the slack block
/// congruent to the hypothesis. After constructing it, the reverse direction
/// is replayed: adding back the dropped square term must restore the
/// hypothesis.
pub fn lemma2_witness(
    c: &DMatrix<f64>,
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    z: &DMatrix<f64>,
) -> Result<LemmaWitness, Refusal> {
    check_sym(x, "X")?;
    check_sym(z, "Z")?;
    dims(c.is_square() && c.nrows() == x.nrows() && y.nrows() == c.nrows() && y.ncols() == z.nrows(), "C/X/Y/Z")?;
    let cinv = c.clone().try_inverse().ok_or(Refusal::Singular("C"))?;
    if c.clone().svd(false, false).singular_values.min() <= 1e-12 * c.amax().max(1.0) {
        return Err(Refusal::Singular("C"));
    }
    let xe = min_eig(x);
    if !is_pd(x) {
        return Err(Refusal::NotPositive(xe));
    }
    let ctxc = c.transpose() * x * c;
    let hyp = block_matrix(&[vec![ctxc.clone(), y.clone()], vec![y.transpose(), z.clone()]]);
    if !is_pd(&hyp) {
        return Err(Refusal::NotPositive(min_eig(&hyp)));
    }
    let xinv = x.clone().try_inverse().ok_or(Refusal::Singular("X"))?;
    let psi = &cinv * &xinv;
    let block = lemma2_block(c, x, y, z, &psi).ok_or(Refusal::Singular("X"))?;
    let me = min_eig(&block);
    if !is_pd(&block) {
        return Err(Refusal::InternalConsistency(me));
    }
    // reverse: the block with the square term restored is congruent to the hypothesis
    if !lemma2_reverse(c, x, y, z, &psi).unwrap_or(false) {
        return Err(Refusal::InternalConsistency(min_eig(&hyp)));
    }
    let mut matrices = BTreeMap::new();
    matrices.insert("Psi", psi);
    matrices.insert("block", block);
    Ok(LemmaWitness { kind: LemmaKind::Lemma2, matrices, min_eig: me })
}

/// `[C Psi + Psi^T C^T - X^-1, Psi^T Y; *, Z]`.
pub fn lemma2_block(
    c: &DMatrix<f64>,
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    z: &DMatrix<f64>,
    psi: &DMatrix<f64>,
) -> Option<DMatrix<f64>> {
    let xinv = x.clone().try_inverse()?;
    let cp = c * psi;
    let tl = &cp + cp.transpose() - xinv;
    let tr = psi.transpose() * y;
    Some(block_matrix(&[vec![tl, tr.clone()], vec![tr.transpose(), z.clone()]]))
}

/// Given a `Psi` for which the slack block is PD, conclude that the
/// hypothesis `[C^T X C, Y; *, Z]` is PD. Returns `None` when `X` is not
/// invertible.
pub fn lemma2_reverse(
    c: &DMatrix<f64>,
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    z: &DMatrix<f64>,
    psi: &DMatrix<f64>,
) -> Option<bool> {
    let block = lemma2_block(c, x, y, z, psi)?;
    if !is_pd(&block) {
        return Some(false);
    }
    let ctxc = c.transpose() * x * c;
    let hyp = block_matrix(&[vec![ctxc, y.clone()], vec![y.transpose(), z.clone()]]);
    Some(is_pd(&hyp))
}

/// Matrices of the linearization lemma. Shapes: `Z, Xi: s x s`,
/// `X: s x t`, `Y: t x s`, `Gamma: t x t`, `Theta: (t+s) x (t+s)`,
/// `V: s x v`, `W: v x v`.
#[derive(Debug, Clone)]
pub struct Lemma3Data {
    pub x: DMatrix<f64>,
    pub y: DMatrix<f64>,
    pub z: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub w: DMatrix<f64>,
    pub theta: DMatrix<f64>,
    pub gamma: DMatrix<f64>,
    pub xi: DMatrix<f64>,
}

impl Lemma3Data {
    fn check(&self) -> Result<(usize, usize), Refusal> {
        let s = self.z.nrows();
        let t = self.gamma.nrows();
        check_sym(&self.z, "Z")?;
        check_sym(&self.w, "W")?;
        check_sym(&self.gamma, "Gamma")?;
        check_sym(&self.xi, "Xi")?;
        dims(self.x.shape() == (s, t), "X must be s x t")?;
        dims(self.y.shape() == (t, s), "Y must be t x s")?;
        dims(self.xi.nrows() == s, "Xi must be s x s")?;
        dims(self.theta.shape() == (t + s, t + s), "Theta must be (t+s) square")?;
        dims(self.v.nrows() == s && self.v.ncols() == self.w.nrows(), "V/W")?;
        Ok((s, t))
    }

    pub fn delta(&self) -> DMatrix<f64> {
        block_matrix(&[
            vec![self.gamma.clone(), self.y.clone()],
            vec![self.y.transpose(), self.xi.clone()],
        ])
    }

    /// `[-X I] Theta`.
    fn mix(&self, s: usize) -> DMatrix<f64> {
        let left = block_matrix(&[vec![-&self.x, DMatrix::identity(s, s)]]);
        left * &self.theta
    }

    /// The large hypothesis matrix; `with_gamma` adds `X Gamma X^T` to its
    /// top-left block.
    pub fn hypothesis(&self, with_gamma: bool) -> DMatrix<f64> {
        let s = self.z.nrows();
        let t = self.gamma.nrows();
        let vcols = self.w.nrows();
        let mut tl = &self.z + &self.xi;
        if with_gamma {
            tl += &self.x * &self.gamma * self.x.transpose();
        }
        let mid = &self.theta + self.theta.transpose() - self.delta();
        let mix = self.mix(s);
        block_matrix(&[
            vec![tl, mix.clone(), self.v.clone()],
            vec![mix.transpose(), mid, DMatrix::zeros(t + s, vcols)],
            vec![self.v.transpose(), DMatrix::zeros(vcols, t + s), self.w.clone()],
        ])
    }

    pub fn conclusion(&self) -> DMatrix<f64> {
        let xy = &self.x * &self.y;
        let tl = &self.z + &xy + xy.transpose();
        block_matrix(&[vec![tl, self.v.clone()], vec![self.v.transpose(), self.w.clone()]])
    }
}

/// True iff both hypothesis matrices are PD; in that case the conclusion is
/// checked too and a failure is reported as an internal inconsistency.
pub fn lemma3_check(data: &Lemma3Data) -> Result<bool, Refusal> {
    data.check()?;
    if !is_pd(&data.delta()) || !is_pd(&data.hypothesis(false)) {
        return Ok(false);
    }
    let c = data.conclusion();
    if !is_pd(&c) {
        return Err(Refusal::InternalConsistency(min_eig(&c)));
    }
    Ok(true)
}

/// Reverse direction: with `X Gamma X^T` added, the conclusion implies the
/// hypothesis for `Theta = Delta`. Returns the `Theta` used, or refuses
/// when the conclusion or `Delta` is not PD.
pub fn lemma3_reverse(data: &Lemma3Data) -> Result<LemmaWitness, Refusal> {
    data.check()?;
    let delta = data.delta();
    if !is_pd(&delta) {
        return Err(Refusal::NotPositive(min_eig(&delta)));
    }
    let c = data.conclusion();
    if !is_pd(&c) {
        return Err(Refusal::NotPositive(min_eig(&c)));
    }
    let mut d = data.clone();
    d.theta = delta;
    let h = d.hypothesis(true);
    let me = min_eig(&h);
    if !is_pd(&h) {
        return Err(Refusal::InternalConsistency(me));
    }
    let mut matrices = BTreeMap::new();
    matrices.insert("Theta", d.theta);
    matrices.insert("hypothesis", h);
    Ok(LemmaWitness { kind: LemmaKind::Lemma3, matrices, min_eig: me })
}

pub fn random_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

pub fn random_sym<R: Rng>(rng: &mut R, n: usize) -> DMatrix<f64> {
    let m = random_matrix(rng, n, n);
    (&m + m.transpose()) * 0.5
}

/// Random symmetric matrix shifted by `(|lambda_min| + 1) I`.
pub fn random_pd<R: Rng>(rng: &mut R, n: usize) -> DMatrix<f64> {
    let s = random_sym(rng, n);
    let shift = min_eig(&s).abs() + 1.0;
    s + DMatrix::identity(n, n) * shift
}
