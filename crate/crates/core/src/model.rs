//! Coupled linear subsystem networks and their block composition.
//!
//! Each subsystem `i` evolves as
//! `x_i+ = A_ii x_i + sum_j A_ij x_j + B_i u_i + E_i d_i`
//! with polytopic input, state and disturbance sets. [`compose`] stacks the
//! subsystems into one block-structured system.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::ops::Range;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::ModelError;
use crate::linalg::{block_diag, from_rows, rank, stack_vectors};

#[derive(Debug, Clone, PartialEq)]
pub struct Subsystem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    /// Disturbance input matrix; `n_i x 0` for undisturbed subsystems.
    pub e: DMatrix<f64>,
    pub h_u: DMatrix<f64>,
    pub h_u_rhs: DVector<f64>,
    /// Disturbance set `{d : -1 <= H_d d <= 1}`; `0 x 0` when undisturbed.
    pub h_d: DMatrix<f64>,
    pub h_s: DMatrix<f64>,
    pub h_s_rhs: DVector<f64>,
    /// Generator (facet direction) matrix of the candidate set.
    pub z: DMatrix<f64>,
}

impl Subsystem {
    pub fn n(&self) -> usize {
        self.a.nrows()
    }
    pub fn m(&self) -> usize {
        self.b.ncols()
    }
    pub fn p(&self) -> usize {
        self.e.ncols()
    }
    pub fn n_x(&self) -> usize {
        self.z.nrows()
    }
    pub fn n_u(&self) -> usize {
        self.h_u.nrows()
    }
    pub fn n_s(&self) -> usize {
        self.h_s.nrows()
    }
    pub fn disturbed(&self) -> bool {
        self.p() > 0
    }

    /// Checks every structural invariant. `idx` is 1-based for messages.
    pub fn validate(&self, idx: usize) -> Result<(), ModelError> {
        let n = self.n();
        let dim = |field: &'static str, detail: String| ModelError::Dimension {
            subsystem: idx,
            field,
            detail,
        };
        if n == 0 || self.a.ncols() != n {
            return Err(dim("A", format!("expected square, got {}x{}", n, self.a.ncols())));
        }
        if self.b.nrows() != n || self.b.ncols() == 0 {
            return Err(dim("B", format!("expected {}xm with m>0, got {}x{}", n, self.b.nrows(), self.b.ncols())));
        }
        if self.e.nrows() != n {
            return Err(dim("E", format!("expected {} rows, got {}", n, self.e.nrows())));
        }
        if self.h_u.ncols() != self.m() || self.h_u.nrows() != self.h_u_rhs.len() || self.h_u.nrows() == 0 {
            return Err(dim("H_u", format!("{}x{} with {} bounds", self.h_u.nrows(), self.h_u.ncols(), self.h_u_rhs.len())));
        }
        if self.h_s.ncols() != n || self.h_s.nrows() != self.h_s_rhs.len() || self.h_s.nrows() == 0 {
            return Err(dim("H_s", format!("{}x{} with {} bounds", self.h_s.nrows(), self.h_s.ncols(), self.h_s_rhs.len())));
        }
        if self.h_u_rhs.iter().any(|&v| !(v > 0.0)) {
            return Err(ModelError::NotPositive { subsystem: idx, field: "h_u" });
        }
        if self.h_s_rhs.iter().any(|&v| !(v > 0.0)) {
            return Err(ModelError::NotPositive { subsystem: idx, field: "h_s" });
        }
        let p = self.p();
        if self.h_d.nrows() != p || self.h_d.ncols() != p {
            return Err(dim("H_d", format!("expected {}x{}, got {}x{}", p, p, self.h_d.nrows(), self.h_d.ncols())));
        }
        if p > 0 && rank(&self.h_d) < p {
            return Err(ModelError::Singular { subsystem: idx, field: "H_d" });
        }
        if self.z.ncols() != n {
            return Err(dim("Z", format!("expected {} columns, got {}", n, self.z.ncols())));
        }
        let r = rank(&self.z);
        if self.z.nrows() < n || r < n {
            return Err(ModelError::RankDeficient { subsystem: idx, field: "Z", rank: r, needed: n });
        }
        let all_finite = [&self.a, &self.b, &self.e, &self.h_u, &self.h_d, &self.h_s, &self.z]
            .iter()
            .all(|m| m.iter().all(|v| v.is_finite()));
        if !all_finite {
            return Err(ModelError::Schema(format!("subsystem {idx}: non-finite matrix entry")));
        }
        Ok(())
    }
}

/// Off-diagonal dynamic coupling `A_ij` (0-based indices, `i != j`).
#[derive(Debug, Clone, PartialEq)]
pub struct Coupling {
    pub i: usize,
    pub j: usize,
    pub a: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SystemModel {
    pub subsystems: Vec<Subsystem>,
    pub couplings: Vec<Coupling>,
    /// Pairs `(i, j)` (0-based) where the feedback block `K_ij` may be nonzero.
    pub k_pattern: BTreeSet<(usize, usize)>,
}

impl SystemModel {
    /// Validates and builds a model; the diagonal is always added to `k_pattern`.
    pub fn new(
        subsystems: Vec<Subsystem>,
        couplings: Vec<Coupling>,
        k_pattern: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self, ModelError> {
        let d = subsystems.len();
        if d == 0 {
            return Err(ModelError::Schema("model has no subsystems".into()));
        }
        for (idx, s) in subsystems.iter().enumerate() {
            s.validate(idx + 1)?;
        }
        let mut seen = BTreeSet::new();
        for c in &couplings {
            if c.i >= d || c.j >= d || c.i == c.j {
                return Err(ModelError::Coupling { i: c.i + 1, j: c.j + 1, detail: "invalid subsystem pair".into() });
            }
            if !seen.insert((c.i, c.j)) {
                return Err(ModelError::Coupling { i: c.i + 1, j: c.j + 1, detail: "declared twice".into() });
            }
            let (ni, nj) = (subsystems[c.i].n(), subsystems[c.j].n());
            if c.a.nrows() != ni || c.a.ncols() != nj {
                return Err(ModelError::Coupling {
                    i: c.i + 1,
                    j: c.j + 1,
                    detail: format!("expected {}x{}, got {}x{}", ni, nj, c.a.nrows(), c.a.ncols()),
                });
            }
        }
        let mut pattern: BTreeSet<(usize, usize)> = (0..d).map(|i| (i, i)).collect();
        for (i, j) in k_pattern {
            if i >= d || j >= d {
                return Err(ModelError::Schema(format!("k_pattern entry ({}, {}) out of range", i + 1, j + 1)));
            }
            pattern.insert((i, j));
        }
        Ok(Self { subsystems, couplings, k_pattern: pattern })
    }

    pub fn d(&self) -> usize {
        self.subsystems.len()
    }

    pub fn coupling(&self, i: usize, j: usize) -> Option<&DMatrix<f64>> {
        self.couplings.iter().find(|c| c.i == i && c.j == j).map(|c| &c.a)
    }
}

/// Block-composed global system.
#[derive(Debug, Clone, PartialEq)]
pub struct ComposedSystem {
    pub n: usize,
    pub m: usize,
    pub p: usize,
    pub n_x: usize,
    pub n_u: usize,
    pub n_s: usize,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub e: DMatrix<f64>,
    pub z: DMatrix<f64>,
    pub h_u: DMatrix<f64>,
    pub h_u_rhs: DVector<f64>,
    pub h_d: DMatrix<f64>,
    pub h_s: DMatrix<f64>,
    pub h_s_rhs: DVector<f64>,
    /// Column ranges of each subsystem's state in `x`.
    pub state_blocks: Vec<Range<usize>>,
    pub input_blocks: Vec<Range<usize>>,
    pub dist_blocks: Vec<Range<usize>>,
    /// Row ranges of each subsystem's generators in `Z`.
    pub z_blocks: Vec<Range<usize>>,
    pub hu_blocks: Vec<Range<usize>>,
    pub hs_blocks: Vec<Range<usize>>,
    /// Owning subsystem (0-based) of every global `Z` row.
    pub row_owner: Vec<usize>,
    pub k_pattern: BTreeSet<(usize, usize)>,
    pub model: SystemModel,
}

impl ComposedSystem {
    pub fn d(&self) -> usize {
        self.state_blocks.len()
    }
    pub fn disturbed(&self) -> bool {
        self.p > 0
    }
    pub fn subsystem(&self, i: usize) -> &Subsystem {
        &self.model.subsystems[i]
    }
}

fn ranges(sizes: impl Iterator<Item = usize>) -> Vec<Range<usize>> {
    let mut off = 0;
    sizes
        .map(|s| {
            let r = off..off + s;
            off += s;
            r
        })
        .collect()
}

/// Assemble the block-structured global system.
pub fn compose(model: &SystemModel) -> ComposedSystem {
    let subs = &model.subsystems;
    let state_blocks = ranges(subs.iter().map(|s| s.n()));
    let n = state_blocks.last().map_or(0, |r| r.end);
    let mut a = DMatrix::zeros(n, n);
    for (i, s) in subs.iter().enumerate() {
        a.view_mut((state_blocks[i].start, state_blocks[i].start), (s.n(), s.n()))
            .copy_from(&s.a);
    }
    for c in &model.couplings {
        a.view_mut((state_blocks[c.i].start, state_blocks[c.j].start), (c.a.nrows(), c.a.ncols()))
            .copy_from(&c.a);
    }
    let cat = |f: &dyn Fn(&Subsystem) -> DMatrix<f64>| block_diag(&subs.iter().map(f).collect::<Vec<_>>());
    let z_blocks = ranges(subs.iter().map(|s| s.n_x()));
    let row_owner = z_blocks
        .iter()
        .enumerate()
        .flat_map(|(i, r)| std::iter::repeat(i).take(r.len()))
        .collect();
    ComposedSystem {
        n,
        m: subs.iter().map(|s| s.m()).sum(),
        p: subs.iter().map(|s| s.p()).sum(),
        n_x: subs.iter().map(|s| s.n_x()).sum(),
        n_u: subs.iter().map(|s| s.n_u()).sum(),
        n_s: subs.iter().map(|s| s.n_s()).sum(),
        a,
        b: cat(&|s| s.b.clone()),
        e: cat(&|s| s.e.clone()),
        z: cat(&|s| s.z.clone()),
        h_u: cat(&|s| s.h_u.clone()),
        h_u_rhs: stack_vectors(&subs.iter().map(|s| s.h_u_rhs.clone()).collect::<Vec<_>>()),
        h_d: cat(&|s| s.h_d.clone()),
        h_s: cat(&|s| s.h_s.clone()),
        h_s_rhs: stack_vectors(&subs.iter().map(|s| s.h_s_rhs.clone()).collect::<Vec<_>>()),
        state_blocks,
        input_blocks: ranges(subs.iter().map(|s| s.m())),
        dist_blocks: ranges(subs.iter().map(|s| s.p())),
        z_blocks,
        hu_blocks: ranges(subs.iter().map(|s| s.n_u())),
        hs_blocks: ranges(subs.iter().map(|s| s.n_s())),
        row_owner,
        k_pattern: model.k_pattern.clone(),
        model: model.clone(),
    }
}

/// Euler-forward discretization `A = I + dt A_c`, `B = dt B_c`, `E = dt E_c`.
pub fn discretize_euler(
    a_cont: &DMatrix<f64>,
    b_cont: &DMatrix<f64>,
    e_cont: &DMatrix<f64>,
    dt: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>), ModelError> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(ModelError::NonPositiveStep(dt));
    }
    let n = a_cont.nrows();
    if a_cont.ncols() != n {
        return Err(ModelError::Dimension { subsystem: 0, field: "A", detail: "continuous-time A must be square".into() });
    }
    Ok((DMatrix::identity(n, n) + a_cont * dt, b_cont * dt, e_cont * dt))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeneratorMode {
    Even,
    Random,
}

/// Unit generator directions on the half sphere `{g : |g| = 1, g_1 >= 0}`.
///
/// `Even` spaces angles uniformly (half-step offset from `-pi/2`) for `n = 2`, uses a golden-angle spiral on
/// the hemisphere for `n = 3` and falls back to seeded random directions
/// above that.
pub fn generators(n: usize, count: usize, mode: GeneratorMode, seed: u64) -> DMatrix<f64> {
    let mut z = DMatrix::zeros(count, n);
    if n == 1 {
        z.fill(1.0);
        return z;
    }
    match (mode, n) {
        (GeneratorMode::Even, 2) => {
            for k in 0..count {
                let ang = -PI / 2.0 + PI * (k as f64 + 0.5) / count as f64;
                z[(k, 0)] = ang.cos();
                z[(k, 1)] = ang.sin();
            }
        }
        (GeneratorMode::Even, 3) => {
            let golden = PI * (3.0 - 5f64.sqrt());
            for k in 0..count {
                // first coordinate runs over (0, 1]
                let g1 = 1.0 - (k as f64 + 0.5) / count as f64;
                let r = (1.0 - g1 * g1).sqrt();
                let phi = golden * k as f64;
                z[(k, 0)] = g1;
                z[(k, 1)] = r * phi.cos();
                z[(k, 2)] = r * phi.sin();
            }
        }
        _ => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for k in 0..count {
                let mut g: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
                let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
                let sign = if g[0] < 0.0 { -1.0 } else { 1.0 };
                for v in g.iter_mut() {
                    *v *= sign / norm;
                }
                for (c, v) in g.into_iter().enumerate() {
                    z[(k, c)] = v;
                }
            }
        }
    }
    z
}

// ---------------------------------------------------------------------------
// Document schema

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    pub subsystems: Vec<SubsystemDoc>,
    #[serde(default)]
    pub couplings: Vec<CouplingDoc>,
    /// 1-based `(i, j)` pairs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_pattern: Option<Vec<(usize, usize)>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BoxBound {
    Scalar(f64),
    PerCoordinate(Vec<f64>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorDoc {
    pub count: usize,
    #[serde(default = "default_mode")]
    pub mode: GeneratorMode,
    #[serde(default)]
    pub seed: u64,
}

fn default_mode() -> GeneratorMode {
    GeneratorMode::Even
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubsystemDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub index: Option<usize>,
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    pub b: Vec<Vec<f64>>,
    #[serde(rename = "E", default, skip_serializing_if = "Option::is_none")]
    pub e: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_box: Option<BoxBound>,
    #[serde(rename = "H_u", default, skip_serializing_if = "Option::is_none")]
    pub h_u: Option<Vec<Vec<f64>>>,
    #[serde(rename = "h_u", default, skip_serializing_if = "Option::is_none")]
    pub h_u_rhs: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state_box: Option<BoxBound>,
    #[serde(rename = "H_s", default, skip_serializing_if = "Option::is_none")]
    pub h_s: Option<Vec<Vec<f64>>>,
    #[serde(rename = "h_s", default, skip_serializing_if = "Option::is_none")]
    pub h_s_rhs: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_box: Option<BoxBound>,
    #[serde(rename = "H_d", default, skip_serializing_if = "Option::is_none")]
    pub h_d: Option<Vec<Vec<f64>>>,
    #[serde(rename = "Z", default, skip_serializing_if = "Option::is_none")]
    pub z: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generators: Option<GeneratorDoc>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CouplingDoc {
    pub i: usize,
    pub j: usize,
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
}

fn matrix(rows: &[Vec<f64>], idx: usize, field: &'static str) -> Result<DMatrix<f64>, ModelError> {
    if let Some(first) = rows.first() {
        if rows.iter().any(|r| r.len() != first.len()) {
            return Err(ModelError::Dimension { subsystem: idx, field, detail: "ragged rows".into() });
        }
    }
    Ok(from_rows(rows))
}

fn box_rows(bound: &BoxBound, dim: usize, idx: usize, field: &'static str) -> Result<(DMatrix<f64>, DVector<f64>), ModelError> {
    let b: Vec<f64> = match bound {
        BoxBound::Scalar(v) => vec![*v; dim],
        BoxBound::PerCoordinate(v) => v.clone(),
    };
    if b.len() != dim {
        return Err(ModelError::Dimension { subsystem: idx, field, detail: format!("expected {} bounds, got {}", dim, b.len()) });
    }
    let mut h = DMatrix::zeros(2 * dim, dim);
    for k in 0..dim {
        h[(k, k)] = 1.0;
        h[(dim + k, k)] = -1.0;
    }
    let rhs = DVector::from_iterator(2 * dim, b.iter().chain(b.iter()).cloned());
    Ok((h, rhs))
}

fn polytope_fields(
    boxed: &Option<BoxBound>,
    h: &Option<Vec<Vec<f64>>>,
    rhs: &Option<Vec<f64>>,
    dim: usize,
    idx: usize,
    names: (&'static str, &'static str),
) -> Result<(DMatrix<f64>, DVector<f64>), ModelError> {
    match (boxed, h, rhs) {
        (Some(b), None, None) => box_rows(b, dim, idx, names.0),
        (None, Some(h), Some(r)) => Ok((matrix(h, idx, names.1)?, DVector::from_vec(r.clone()))),
        _ => Err(ModelError::Schema(format!(
            "subsystem {idx}: give exactly one of `{}` or `{}`/`{}`",
            names.0,
            names.1,
            names.1.to_lowercase()
        ))),
    }
}

impl SubsystemDoc {
    fn build(&self, idx: usize, dt: Option<f64>) -> Result<Subsystem, ModelError> {
        let a = matrix(&self.a, idx, "A")?;
        let b = matrix(&self.b, idx, "B")?;
        let n = a.nrows();
        let e = match &self.e {
            Some(e) => matrix(e, idx, "E")?,
            None => DMatrix::zeros(n, 0),
        };
        let (a, b, e) = match dt {
            Some(dt) => discretize_euler(&a, &b, &e, dt)?,
            None => (a, b, e),
        };
        let m = b.ncols();
        let p = e.ncols();
        let (h_u, h_u_rhs) = polytope_fields(&self.input_box, &self.h_u, &self.h_u_rhs, m, idx, ("input_box", "H_u"))?;
        let (h_s, h_s_rhs) = polytope_fields(&self.state_box, &self.h_s, &self.h_s_rhs, n, idx, ("state_box", "H_s"))?;
        let h_d = match (&self.d_box, &self.h_d) {
            (_, _) if p == 0 => {
                if self.d_box.is_some() || self.h_d.is_some() {
                    return Err(ModelError::Schema(format!("subsystem {idx}: disturbance set given without `E`")));
                }
                DMatrix::zeros(0, 0)
            }
            (Some(b), None) => {
                let bounds: Vec<f64> = match b {
                    BoxBound::Scalar(v) => vec![*v; p],
                    BoxBound::PerCoordinate(v) => v.clone(),
                };
                if bounds.len() != p {
                    return Err(ModelError::Dimension { subsystem: idx, field: "d_box", detail: format!("expected {} bounds", p) });
                }
                if bounds.iter().any(|&v| !(v > 0.0)) {
                    return Err(ModelError::NotPositive { subsystem: idx, field: "d_box" });
                }
                DMatrix::from_diagonal(&DVector::from_iterator(p, bounds.iter().map(|v| 1.0 / v)))
            }
            (None, Some(h)) => matrix(h, idx, "H_d")?,
            _ => {
                return Err(ModelError::Schema(format!(
                    "subsystem {idx}: disturbed subsystem needs exactly one of `d_box` or `H_d`"
                )))
            }
        };
        let z = match (&self.z, &self.generators) {
            (Some(z), None) => matrix(z, idx, "Z")?,
            (None, Some(g)) => generators(n, g.count, g.mode, g.seed),
            (None, None) => generators(n, 2 * n, GeneratorMode::Even, 0),
            (Some(_), Some(_)) => {
                return Err(ModelError::Schema(format!("subsystem {idx}: give either `Z` or `generators`")))
            }
        };
        let sub = Subsystem { a, b, e, h_u, h_u_rhs, h_d, h_s, h_s_rhs, z };
        sub.validate(idx)?;
        Ok(sub)
    }
}

impl ModelDoc {
    pub fn build(&self) -> Result<SystemModel, ModelError> {
        let mut subs = Vec::with_capacity(self.subsystems.len());
        for (k, s) in self.subsystems.iter().enumerate() {
            if let Some(idx) = s.index {
                if idx != k + 1 {
                    return Err(ModelError::Schema(format!(
                        "subsystem indices must be 1..d without gaps; position {} declares {}",
                        k + 1,
                        idx
                    )));
                }
            }
            subs.push(s.build(k + 1, self.dt)?);
        }
        let d = subs.len();
        let mut couplings = Vec::new();
        for c in &self.couplings {
            if c.i == 0 || c.j == 0 || c.i > d || c.j > d {
                return Err(ModelError::Coupling { i: c.i, j: c.j, detail: "index out of range (1-based)".into() });
            }
            let mut a = matrix(&c.a, c.i, "couplings.A")?;
            if let Some(dt) = self.dt {
                a *= dt;
            }
            couplings.push(Coupling { i: c.i - 1, j: c.j - 1, a });
        }
        let mut pattern = Vec::new();
        for &(i, j) in self.k_pattern.iter().flatten() {
            if i == 0 || j == 0 {
                return Err(ModelError::Schema("k_pattern indices are 1-based".into()));
            }
            pattern.push((i - 1, j - 1));
        }
        SystemModel::new(subs, couplings, pattern)
    }
}

/// Parse and validate a model document.
pub fn load_model(source: &str) -> Result<SystemModel, ModelError> {
    let doc: ModelDoc = serde_json::from_str(source).map_err(|e| ModelError::Schema(e.to_string()))?;
    doc.build()
}

pub fn load_model_file(path: impl AsRef<Path>) -> Result<SystemModel, ModelError> {
    let text = std::fs::read_to_string(path)?;
    load_model(&text)
}
