//! LP certification of a candidate (sets, gains) pair, independent of how it
//! was produced.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::SynthesisError;
use crate::lmi::SynthesisSolution;
use crate::model::ComposedSystem;
use crate::polytope::{contains, support, GenSet, HPolytope};

/// Margins below `-VALID_TOL` invalidate a certificate.
pub const VALID_TOL: f64 = 1e-7;
const BURN_IN: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct Certificate {
    /// `1 - max_{x in X, d in D} e_j' Z H_x (A_K x + E d)` per facet row.
    pub invariance_margins: DVector<f64>,
    pub state_margins: DVector<f64>,
    pub input_margins: DVector<f64>,
    pub valid: bool,
    pub tolerance: f64,
}

impl Certificate {
    pub fn worst_facet(&self) -> Option<(usize, f64)> {
        argmin(&self.invariance_margins)
    }

    pub fn min_margin(&self) -> f64 {
        self.invariance_margins
            .iter()
            .chain(self.state_margins.iter())
            .chain(self.input_margins.iter())
            .fold(f64::INFINITY, |a, &b| a.min(b))
    }

    /// Smallest invariance margin over the facets owned by each subsystem.
    pub fn subsystem_margins(&self, cs: &ComposedSystem) -> Vec<f64> {
        let mut out = vec![f64::INFINITY; cs.d()];
        for (j, &m) in self.invariance_margins.iter().enumerate() {
            let i = cs.row_owner[j];
            out[i] = out[i].min(m);
        }
        out
    }
}

fn argmin(v: &DVector<f64>) -> Option<(usize, f64)> {
    v.iter().copied().enumerate().fold(None, |best, (k, m)| match best {
        Some((_, b)) if b <= m => best,
        _ => Some((k, m)),
    })
}

fn check_dims(cs: &ComposedSystem, sol: &SynthesisSolution) -> Result<(), SynthesisError> {
    if sol.h_x.shape() != (cs.n, cs.n) || sol.k.shape() != (cs.m, cs.n) || sol.gen_sets.len() != cs.d() {
        return Err(SynthesisError::Mismatch(format!(
            "H_x {:?}, K {:?}, {} sets for n={}, m={}, d={}",
            sol.h_x.shape(),
            sol.k.shape(),
            sol.gen_sets.len(),
            cs.n,
            cs.m,
            cs.d()
        )));
    }
    Ok(())
}

/// `{d : -1 <= H_d d <= 1}` of subsystem `i`.
pub fn disturbance_set(cs: &ComposedSystem, i: usize) -> HPolytope {
    GenSet { z: DMatrix::identity(cs.subsystem(i).p(), cs.subsystem(i).p()), h: cs.subsystem(i).h_d.clone() }
        .to_hpolytope()
}

/// `max_{x in X} c.x`, split over the product structure of `X`.
fn support_x(cs: &ComposedSystem, sol: &SynthesisSolution, c: &DVector<f64>) -> Result<f64, SynthesisError> {
    let mut total = 0.0;
    for (i, r) in cs.state_blocks.iter().enumerate() {
        let ci = c.rows(r.start, r.len()).into_owned();
        if ci.iter().all(|&v| v == 0.0) {
            continue;
        }
        total += support(&sol.gen_sets[i], &ci)?;
    }
    Ok(total)
}

fn support_d(cs: &ComposedSystem, c: &DVector<f64>) -> Result<f64, SynthesisError> {
    let mut total = 0.0;
    for (i, r) in cs.dist_blocks.iter().enumerate() {
        if r.is_empty() {
            continue;
        }
        let ci = c.rows(r.start, r.len()).into_owned();
        total += support(&disturbance_set(cs, i), &ci)?;
    }
    Ok(total)
}

pub fn certify(cs: &ComposedSystem, sol: &SynthesisSolution) -> Result<Certificate, SynthesisError> {
    check_dims(cs, sol)?;
    let zh = &cs.z * &sol.h_x;
    let ak = &cs.a + &cs.b * &sol.k;
    // the sets are symmetric, so only the upper facet of each row is checked
    let mut inv = DVector::zeros(cs.n_x);
    for j in 0..cs.n_x {
        let row = zh.row(j);
        let cx = (row * &ak).transpose();
        let mut worst = support_x(cs, sol, &cx)?;
        if cs.disturbed() {
            worst += support_d(cs, &(row * &cs.e).transpose())?;
        }
        inv[j] = 1.0 - worst;
    }
    let mut state = DVector::zeros(cs.n_s);
    for (i, r) in cs.hs_blocks.iter().enumerate() {
        let s = cs.subsystem(i);
        let outer = HPolytope { a: s.h_s.clone(), b: s.h_s_rhs.clone() };
        let (_, m) = contains(&outer, &sol.gen_sets[i])?;
        state.rows_mut(r.start, r.len()).copy_from(&m);
    }
    let hk = &cs.h_u * &sol.k;
    let mut input = DVector::zeros(cs.n_u);
    for l in 0..cs.n_u {
        input[l] = cs.h_u_rhs[l] - support_x(cs, sol, &hk.row(l).transpose())?;
    }
    let valid = inv.iter().chain(state.iter()).chain(input.iter()).all(|&m| m >= -VALID_TOL);
    Ok(Certificate { invariance_margins: inv, state_margins: state, input_margins: input, valid, tolerance: VALID_TOL })
}

/// Plain-text report: one line per margin, worst entries flagged.
pub fn report(cs: &ComposedSystem, cert: &Certificate) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "valid {}", cert.valid);
    let _ = writeln!(s, "tolerance {:e}", cert.tolerance);
    if let Some((j, m)) = cert.worst_facet() {
        let _ = writeln!(s, "worst_facet {} subsystem {} margin {:.16e}", j + 1, cs.row_owner[j] + 1, m);
    }
    for (j, m) in cert.invariance_margins.iter().enumerate() {
        let _ = writeln!(s, "invariance {} subsystem {} {:.16e}", j + 1, cs.row_owner[j] + 1, m);
    }
    for (k, m) in cert.state_margins.iter().enumerate() {
        let _ = writeln!(s, "state {} {:.16e}", k + 1, m);
    }
    for (l, m) in cert.input_margins.iter().enumerate() {
        let _ = writeln!(s, "input {} {:.16e}", l + 1, m);
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleReport {
    /// Largest observed `|e_j' Z H_x x+| - 1` with the worst disturbance vertex.
    pub worst_violation: f64,
    pub worst_point: DVector<f64>,
    pub violations: usize,
    pub samples: usize,
}

/// Hit-and-run sampler over the product of candidate sets.
pub struct HitAndRun {
    poly: HPolytope,
    x: DVector<f64>,
    rng: ChaCha8Rng,
}

impl HitAndRun {
    /// Starts from `x0`, which must be an interior point of `poly`.
    pub fn new(poly: HPolytope, x0: DVector<f64>, seed: u64) -> Self {
        let mut s = Self { poly, x: x0, rng: ChaCha8Rng::seed_from_u64(seed) };
        for _ in 0..BURN_IN {
            s.step();
        }
        s
    }

    pub fn step(&mut self) -> &DVector<f64> {
        let n = self.x.len();
        let dir = DVector::from_fn(n, |_, _| self.rng.sample::<f64, _>(StandardNormal));
        let ad = &self.poly.a * &dir;
        let slack = &self.poly.b - &self.poly.a * &self.x;
        let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
        for k in 0..ad.len() {
            let s = slack[k].max(0.0);
            if ad[k] > 1e-14 {
                hi = hi.min(s / ad[k]);
            } else if ad[k] < -1e-14 {
                lo = lo.max(s / ad[k]);
            }
        }
        if lo.is_finite() && hi.is_finite() && hi > lo {
            let t = self.rng.gen_range(lo..=hi);
            self.x += dir * t;
        }
        &self.x
    }
}

/// The candidate set of the whole system as one polytope.
pub fn product_set(sol: &SynthesisSolution) -> HPolytope {
    let polys: Vec<HPolytope> = sol.gen_sets.iter().map(|g| g.to_hpolytope()).collect();
    let rows: usize = polys.iter().map(|p| p.rows()).sum();
    let n: usize = polys.iter().map(|p| p.dim()).sum();
    let mut a = DMatrix::zeros(rows, n);
    let mut b = DVector::zeros(rows);
    let (mut r0, mut c0) = (0, 0);
    for p in &polys {
        a.view_mut((r0, c0), (p.rows(), p.dim())).copy_from(&p.a);
        b.rows_mut(r0, p.rows()).copy_from(&p.b);
        r0 += p.rows();
        c0 += p.dim();
    }
    HPolytope { a, b }
}

/// Vertices of the disturbance set `H_d^{-1} {-1, 1}^p`, per subsystem.
fn disturbance_vertices(cs: &ComposedSystem) -> Result<Vec<Vec<DVector<f64>>>, SynthesisError> {
    let mut out = Vec::new();
    for i in 0..cs.d() {
        let s = cs.subsystem(i);
        let p = s.p();
        if p == 0 {
            out.push(Vec::new());
            continue;
        }
        if p > 16 {
            return Err(SynthesisError::Malformed(format!("disturbance dimension {p} too large to enumerate")));
        }
        let inv = s.h_d.clone().try_inverse().ok_or_else(|| SynthesisError::Malformed("singular H_d".into()))?;
        let verts = (0..1usize << p)
            .map(|mask| {
                let sgn = DVector::from_fn(p, |k, _| if mask >> k & 1 == 1 { 1.0 } else { -1.0 });
                &inv * sgn
            })
            .collect();
        out.push(verts);
    }
    Ok(out)
}

/// Monte-Carlo cross-check of the invariance margins: `x` sampled uniformly
/// in the candidate set, `d` at the disturbance vertices.
pub fn sample_check(
    cs: &ComposedSystem,
    sol: &SynthesisSolution,
    count: usize,
    seed: u64,
) -> Result<SampleReport, SynthesisError> {
    check_dims(cs, sol)?;
    if count == 0 {
        return Err(SynthesisError::Malformed("sample count must be at least 1".into()));
    }
    let zh = &cs.z * &sol.h_x;
    let zhak = &zh * (&cs.a + &cs.b * &sol.k);
    // worst disturbance contribution per facet, exact over the vertices
    let mut dmax = DVector::zeros(cs.n_x);
    if cs.disturbed() {
        let zhe = &zh * &cs.e;
        let verts = disturbance_vertices(cs)?;
        for j in 0..cs.n_x {
            for (i, r) in cs.dist_blocks.iter().enumerate() {
                if r.is_empty() {
                    continue;
                }
                let c = zhe.view((j, r.start), (1, r.len()));
                dmax[j] += verts[i].iter().map(|v| (c * v)[0]).fold(f64::NEG_INFINITY, f64::max);
            }
        }
    }
    let mut sampler = HitAndRun::new(product_set(sol), DVector::zeros(cs.n), seed);
    let mut rep = SampleReport {
        worst_violation: f64::NEG_INFINITY,
        worst_point: DVector::zeros(cs.n),
        violations: 0,
        samples: count,
    };
    for _ in 0..count {
        let x = sampler.step().clone();
        let v = (&zhak * &x).abs() + &dmax;
        let worst = v.max() - 1.0;
        if worst > 0.0 {
            rep.violations += 1;
        }
        if worst > rep.worst_violation {
            rep.worst_violation = worst;
            rep.worst_point = x;
        }
    }
    Ok(rep)
}
