//! Admissible local inputs: for a point of `X_i`, every `u_i` that meets the
//! input constraints and keeps the successor in `X_i` against the worst
//! coupling from the neighbours' sets and the worst disturbance.

use nalgebra::{DMatrix, DVector};

use crate::error::ControlError;
use crate::lmi::SynthesisSolution;
use crate::model::ComposedSystem;
use crate::polytope::{support, HPolytope};
use crate::verify::disturbance_set;

/// Membership tolerance for the envelope point.
pub const POINT_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct InputEnvelope {
    pub subsystem: usize,
    pub point: DVector<f64>,
    pub poly: HPolytope,
    pub coupling_upper: DVector<f64>,
    pub coupling_lower: DVector<f64>,
}

pub(crate) fn check_index(cs: &ComposedSystem, i: usize) -> Result<(), ControlError> {
    if i >= cs.d() {
        return Err(ControlError::BadSubsystem(i + 1));
    }
    Ok(())
}

/// Worst case of `m w` over `w` in `(+)_{j != i} A_ij X_j (+) E_i D_i`, one
/// value per row of `m` (`m` acts on the state of subsystem `i`).
pub fn worst_case_rows(
    cs: &ComposedSystem,
    sol: &SynthesisSolution,
    i: usize,
    m: &DMatrix<f64>,
) -> Result<DVector<f64>, ControlError> {
    check_index(cs, i)?;
    let mut out = DVector::zeros(m.nrows());
    for c in &cs.model.couplings {
        if c.i != i {
            continue;
        }
        let ma = m * &c.a;
        for r in 0..m.nrows() {
            let dir = ma.row(r).transpose();
            if dir.iter().any(|&v| v != 0.0) {
                out[r] += support(&sol.gen_sets[c.j], &dir)?;
            }
        }
    }
    let s = cs.subsystem(i);
    if s.p() > 0 {
        let ds = disturbance_set(cs, i);
        let me = m * &s.e;
        for r in 0..m.nrows() {
            let dir = me.row(r).transpose();
            if dir.iter().any(|&v| v != 0.0) {
                out[r] += support(&ds, &dir)?;
            }
        }
    }
    Ok(out)
}

pub fn coupling_bounds(
    cs: &ComposedSystem,
    sol: &SynthesisSolution,
    i: usize,
) -> Result<(DVector<f64>, DVector<f64>), ControlError> {
    check_index(cs, i)?;
    let zh = &sol.gen_sets[i].z * &sol.gen_sets[i].h;
    let upper = worst_case_rows(cs, sol, i, &zh)?;
    let lower = -&upper;
    Ok((upper, lower))
}

/// Envelope rows in the joint `(x_i, u_i)` space:
/// `[0, H_u; ZHA, ZHB; -ZHA, -ZHB] (x, u) <= [h_u; 1 - upper; 1 - upper]`.
pub(crate) fn joint_rows(
    cs: &ComposedSystem,
    sol: &SynthesisSolution,
    i: usize,
    upper: &DVector<f64>,
) -> (DMatrix<f64>, DVector<f64>) {
    let s = cs.subsystem(i);
    let (n, m) = (s.n(), s.m());
    let zh = &sol.gen_sets[i].z * &sol.gen_sets[i].h;
    let zha = &zh * &s.a;
    let zhb = &zh * &s.b;
    let (nu, nx) = (s.n_u(), zh.nrows());
    let mut a = DMatrix::zeros(nu + 2 * nx, n + m);
    let mut b = DVector::zeros(nu + 2 * nx);
    a.view_mut((0, n), (nu, m)).copy_from(&s.h_u);
    b.rows_mut(0, nu).copy_from(&s.h_u_rhs);
    for r in 0..nx {
        for c in 0..n {
            a[(nu + r, c)] = zha[(r, c)];
            a[(nu + nx + r, c)] = -zha[(r, c)];
        }
        for c in 0..m {
            a[(nu + r, n + c)] = zhb[(r, c)];
            a[(nu + nx + r, n + c)] = -zhb[(r, c)];
        }
        b[nu + r] = 1.0 - upper[r];
        b[nu + nx + r] = 1.0 - upper[r];
    }
    (a, b)
}

pub fn admissible_inputs(
    cs: &ComposedSystem,
    sol: &SynthesisSolution,
    i: usize,
    x0: &DVector<f64>,
) -> Result<InputEnvelope, ControlError> {
    check_index(cs, i)?;
    let (upper, lower) = coupling_bounds(cs, sol, i)?;
    envelope_with_bounds(cs, sol, i, x0, upper, lower)
}

/// Same as [`admissible_inputs`] with precomputed coupling bounds.
pub fn envelope_with_bounds(
    cs: &ComposedSystem,
    sol: &SynthesisSolution,
    i: usize,
    x0: &DVector<f64>,
    upper: DVector<f64>,
    lower: DVector<f64>,
) -> Result<InputEnvelope, ControlError> {
    let s = cs.subsystem(i);
    if x0.len() != s.n() {
        return Err(ControlError::Invalid(format!("point has {} entries, subsystem {} has {}", x0.len(), i + 1, s.n())));
    }
    let residual = (&sol.gen_sets[i].z * (&sol.gen_sets[i].h * x0)).amax() - 1.0;
    if residual > POINT_TOL {
        return Err(ControlError::OutsideSet { subsystem: i + 1, residual });
    }
    let (a, b) = joint_rows(cs, sol, i, &upper);
    let n = s.n();
    let au = a.columns(n, s.m()).into_owned();
    let bx = b - a.columns(0, n) * x0;
    Ok(InputEnvelope {
        subsystem: i,
        point: x0.clone(),
        poly: HPolytope { a: au, b: bx },
        coupling_upper: upper,
        coupling_lower: lower,
    })
}

/// Largest residual of `x+ = A_ii x0 + B_i u + w` over the facets of `X_i`,
/// maximized over every coupling/disturbance `w`; `<= 0` means `x+` stays in
/// the set for all of them.
pub fn worst_successor_residual(
    cs: &ComposedSystem,
    sol: &SynthesisSolution,
    i: usize,
    x0: &DVector<f64>,
    u: &DVector<f64>,
) -> Result<f64, ControlError> {
    let s = cs.subsystem(i);
    let zh = &sol.gen_sets[i].z * &sol.gen_sets[i].h;
    let nominal = &zh * (&s.a * x0 + &s.b * u);
    let w = worst_case_rows(cs, sol, i, &zh)?;
    let mut worst = f64::NEG_INFINITY;
    for r in 0..zh.nrows() {
        worst = worst.max(nominal[r] + w[r] - 1.0).max(-nominal[r] + w[r] - 1.0);
    }
    Ok(worst)
}
