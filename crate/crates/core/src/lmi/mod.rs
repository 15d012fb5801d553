//! Assembly of the separable-invariance LMI problem.
//!
//! Decision variables: the block-diagonal `W = H_x^-1`, the gain
//! `K_hat = K W` on the declared block pattern, one scale `lambda_i` per
//! subsystem, and for every facet row `j` the multipliers and slacks
//! `D_x^j, D_d^j, P_j, Gamma_j, Xi_j, Psi_j, Omega1_j, Omega2_j`; `D_s^k` for
//! every state-constraint row and `D_u^l` for every input-constraint row.
//!
//! The lifted dimension `q` is `2n` for disturbed models and `n` otherwise;
//! without disturbance the second copy of the state carries no information
//! and is dropped.

mod linmat;

pub use linmat::LinMat;

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};

use crate::error::{PolyError, SynthesisError};
use crate::linalg::{block_diag, block_matrix, cond, min_eig, norm_inf};
use crate::model::ComposedSystem;
use crate::polytope::{lp_solve, GenSet, Sense};

/// A matrix-shaped block of scalar variables.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatVar {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    /// Symmetric blocks store the upper triangle only, row by row.
    pub sym: bool,
}

impl MatVar {
    pub fn len(&self) -> usize {
        if self.sym {
            self.rows * (self.rows + 1) / 2
        } else {
            self.rows * self.cols
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, r: usize, c: usize) -> usize {
        if self.sym {
            let (r, c) = if r <= c { (r, c) } else { (c, r) };
            // row r of the upper triangle starts after r*rows - r(r-1)/2 entries
            self.offset + r * self.rows - r * r.saturating_sub(1) / 2 + (c - r)
        } else {
            self.offset + r * self.cols + c
        }
    }

    pub fn linmat(&self) -> LinMat {
        let mut m = LinMat::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            for c in 0..self.cols {
                m.push_var(self.index(r, c), r, c);
            }
        }
        m
    }

    pub fn value(&self, y: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(self.rows, self.cols, |r, c| y[self.index(r, c)])
    }

    /// Write `m` into `y` (symmetric blocks read the upper triangle).
    pub fn store(&self, y: &mut DVector<f64>, m: &DMatrix<f64>) {
        for r in 0..self.rows {
            for c in 0..self.cols {
                if !self.sym || r <= c {
                    y[self.index(r, c)] = m[(r, c)];
                }
            }
        }
    }
}

/// A diagonal matrix variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DiagVar {
    pub offset: usize,
    pub len: usize,
}

impl DiagVar {
    pub fn linmat(&self) -> LinMat {
        let mut m = LinMat::zeros(self.len, self.len);
        for k in 0..self.len {
            m.push_var(self.offset + k, k, k);
        }
        m
    }

    pub fn value(&self, y: &DVector<f64>) -> DVector<f64> {
        y.rows(self.offset, self.len).into_owned()
    }

    /// `1^T D 1` as a 1x1 expression.
    pub fn sum(&self) -> LinMat {
        let mut m = LinMat::zeros(1, 1);
        for k in 0..self.len {
            m.push_var(self.offset + k, 0, 0);
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FacetVars {
    pub dx: DiagVar,
    pub dd: Option<DiagVar>,
    pub p: MatVar,
    pub gamma: MatVar,
    pub xi: MatVar,
    pub psi: MatVar,
    pub omega1: MatVar,
    pub omega2: MatVar,
}

/// Layout of all scalar decision variables.
#[derive(Debug, Clone, PartialEq)]
pub struct VarMap {
    pub n_vars: usize,
    pub q: usize,
    pub w: Vec<MatVar>,
    /// `(i, j, var)` for every pattern block `K_hat_ij` (`m_i x n_j`).
    pub k_hat: Vec<(usize, usize, MatVar)>,
    pub lambda: DiagVar,
    pub facets: Vec<FacetVars>,
    pub ds: Vec<DiagVar>,
    pub du: Vec<DiagVar>,
    /// Local group of each variable (`None` for variables shared by all blocks).
    pub group: Vec<Option<usize>>,
    pub n_groups: usize,
}

struct Alloc {
    next: usize,
    group: Vec<Option<usize>>,
}

impl Alloc {
    fn mat(&mut self, rows: usize, cols: usize, sym: bool, g: Option<usize>) -> MatVar {
        let v = MatVar { offset: self.next, rows, cols, sym };
        self.bump(v.len(), g);
        v
    }
    fn diag(&mut self, len: usize, g: Option<usize>) -> DiagVar {
        let v = DiagVar { offset: self.next, len };
        self.bump(len, g);
        v
    }
    fn bump(&mut self, len: usize, g: Option<usize>) {
        self.next += len;
        self.group.extend(std::iter::repeat(g).take(len));
    }
}

impl VarMap {
    pub fn new(cs: &ComposedSystem) -> Self {
        let q = if cs.disturbed() { 2 * cs.n } else { cs.n };
        let mut al = Alloc { next: 0, group: Vec::new() };
        let w = cs.state_blocks.iter().map(|r| al.mat(r.len(), r.len(), false, None)).collect();
        let k_hat = cs
            .k_pattern
            .iter()
            .map(|&(i, j)| (i, j, al.mat(cs.input_blocks[i].len(), cs.state_blocks[j].len(), false, None)))
            .collect();
        let lambda = al.diag(cs.d(), None);
        let facets = (0..cs.n_x)
            .map(|j| {
                let g = Some(j);
                FacetVars {
                    dx: al.diag(cs.n_x, g),
                    dd: cs.disturbed().then(|| al.diag(cs.p, g)),
                    p: al.mat(q, q, true, g),
                    gamma: al.mat(q, q, true, g),
                    xi: al.mat(q, q, true, g),
                    psi: al.mat(q, q, false, g),
                    omega1: al.mat(q, q, false, g),
                    omega2: al.mat(q, q, false, g),
                }
            })
            .collect();
        let ds = (0..cs.n_s).map(|k| al.diag(cs.n_x, Some(cs.n_x + k))).collect();
        let du = (0..cs.n_u).map(|l| al.diag(cs.n_x, Some(cs.n_x + cs.n_s + l))).collect();
        VarMap {
            n_vars: al.next,
            q,
            w,
            k_hat,
            lambda,
            facets,
            ds,
            du,
            group: al.group,
            n_groups: cs.n_x + cs.n_s + cs.n_u,
        }
    }

    /// Global block-diagonal `W` as an expression.
    pub fn w_expr(&self, cs: &ComposedSystem) -> LinMat {
        let mut m = LinMat::zeros(cs.n, cs.n);
        for (i, v) in self.w.iter().enumerate() {
            let o = cs.state_blocks[i].start;
            for r in 0..v.rows {
                for c in 0..v.cols {
                    m.push_var(v.index(r, c), o + r, o + c);
                }
            }
        }
        m
    }

    pub fn k_hat_expr(&self, cs: &ComposedSystem) -> LinMat {
        let mut m = LinMat::zeros(cs.m, cs.n);
        for &(i, j, v) in &self.k_hat {
            let (ro, co) = (cs.input_blocks[i].start, cs.state_blocks[j].start);
            for r in 0..v.rows {
                for c in 0..v.cols {
                    m.push_var(v.index(r, c), ro + r, co + c);
                }
            }
        }
        m
    }

    /// `Lambda = blkdiag(lambda_i I_{n_i})`.
    pub fn lambda_expr(&self, cs: &ComposedSystem) -> LinMat {
        let mut m = LinMat::zeros(cs.n, cs.n);
        for (i, r) in cs.state_blocks.iter().enumerate() {
            for k in r.clone() {
                m.push_var(self.lambda.offset + i, k, k);
            }
        }
        m
    }

    pub fn w_value(&self, cs: &ComposedSystem, y: &DVector<f64>) -> DMatrix<f64> {
        self.w_expr(cs).eval(y)
    }

    pub fn k_hat_value(&self, cs: &ComposedSystem, y: &DVector<f64>) -> DMatrix<f64> {
        self.k_hat_expr(cs).eval(y)
    }

    /// Human-readable name of a variable, e.g. `Psi_3[1,2]` (1-based).
    pub fn describe(&self, var: usize) -> String {
        let within = |v: &MatVar| -> Option<(usize, usize)> {
            if var < v.offset || var >= v.offset + v.len() {
                return None;
            }
            (0..v.rows)
                .flat_map(|r| (0..v.cols).map(move |c| (r, c)))
                .find(|&(r, c)| v.index(r, c) == var && (!v.sym || r <= c))
        };
        let dwithin = |d: &DiagVar| (var >= d.offset && var < d.offset + d.len).then(|| var - d.offset);
        for (i, v) in self.w.iter().enumerate() {
            if let Some((r, c)) = within(v) {
                return format!("W_{}[{},{}]", i + 1, r + 1, c + 1);
            }
        }
        for (i, j, v) in &self.k_hat {
            if let Some((r, c)) = within(v) {
                return format!("Khat_{}{}[{},{}]", i + 1, j + 1, r + 1, c + 1);
            }
        }
        if let Some(k) = dwithin(&self.lambda) {
            return format!("lambda_{}", k + 1);
        }
        for (j, f) in self.facets.iter().enumerate() {
            if let Some(k) = dwithin(&f.dx) {
                return format!("Dx_{}[{}]", j + 1, k + 1);
            }
            if let Some(k) = f.dd.as_ref().and_then(dwithin) {
                return format!("Dd_{}[{}]", j + 1, k + 1);
            }
            for (name, v) in [
                ("P", &f.p),
                ("Gamma", &f.gamma),
                ("Xi", &f.xi),
                ("Psi", &f.psi),
                ("Omega1", &f.omega1),
                ("Omega2", &f.omega2),
            ] {
                if let Some((r, c)) = within(v) {
                    return format!("{}_{}[{},{}]", name, j + 1, r + 1, c + 1);
                }
            }
        }
        for (k, d) in self.ds.iter().enumerate() {
            if let Some(e) = dwithin(d) {
                return format!("Ds_{}[{}]", k + 1, e + 1);
            }
        }
        for (l, d) in self.du.iter().enumerate() {
            if let Some(e) = dwithin(d) {
                return format!("Du_{}[{}]", l + 1, e + 1);
            }
        }
        format!("y[{var}]")
    }
}

/// One symmetric affine pencil `F0 + sum_v y_v F_v`.
#[derive(Debug, Clone, PartialEq)]
pub struct PencilBlock {
    pub label: String,
    pub size: usize,
    /// Local group shared by all non-shared variables of this block.
    pub group: Option<usize>,
    pub f0: DMatrix<f64>,
    /// Distinct variables in increasing order.
    pub vars: Vec<usize>,
    /// For `vars[k]`: entries `(row, col, coeff)` with `row <= col`.
    pub entries: Vec<Vec<(usize, usize, f64)>>,
}

impl PencilBlock {
    pub fn eval(&self, y: &DVector<f64>) -> DMatrix<f64> {
        let mut m = self.f0.clone();
        for (k, &v) in self.vars.iter().enumerate() {
            let yv = y[v];
            if yv == 0.0 {
                continue;
            }
            for &(r, c, a) in &self.entries[k] {
                m[(r, c)] += a * yv;
                if r != c {
                    m[(c, r)] += a * yv;
                }
            }
        }
        m
    }

    /// Dense `F_v` for the `k`-th variable of this block.
    pub fn coefficient(&self, k: usize) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.size, self.size);
        for &(r, c, a) in &self.entries[k] {
            m[(r, c)] += a;
            if r != c {
                m[(c, r)] += a;
            }
        }
        m
    }
}

/// Places affine sub-blocks into a symmetric block matrix.
struct Assembler {
    offsets: Vec<usize>,
    size: usize,
    f0: DMatrix<f64>,
    terms: Vec<(usize, usize, usize, f64)>,
}

impl Assembler {
    fn new(sizes: &[usize]) -> Self {
        let mut offsets = Vec::with_capacity(sizes.len());
        let mut off = 0;
        for s in sizes {
            offsets.push(off);
            off += s;
        }
        Self { offsets, size: off, f0: DMatrix::zeros(off, off), terms: Vec::new() }
    }

    /// Place `m` at block position `(bi, bj)` with `bi <= bj`; the mirror is implied.
    fn set(&mut self, label: &str, bi: usize, bj: usize, m: &LinMat) -> Result<(), SynthesisError> {
        debug_assert!(bi <= bj);
        let (ro, co) = (self.offsets[bi], self.offsets[bj]);
        if bi == bj {
            check_symmetric(label, m)?;
        }
        for r in 0..m.rows() {
            for c in 0..m.cols() {
                let v = m.c0[(r, c)];
                if bi != bj || r <= c {
                    self.f0[(ro + r, co + c)] += v;
                    if bi != bj || r != c {
                        self.f0[(co + c, ro + r)] += v;
                    }
                }
            }
        }
        for &(v, r, c, a) in &m.terms {
            if bi != bj || r <= c {
                self.terms.push((v, ro + r, co + c, a));
            }
        }
        Ok(())
    }

    fn finish(self, label: String, vm: &VarMap) -> Result<PencilBlock, SynthesisError> {
        let lm = LinMat { c0: self.f0, terms: self.terms }.compact();
        let mut vars = Vec::new();
        let mut entries: Vec<Vec<(usize, usize, f64)>> = Vec::new();
        let mut group = None;
        for &(v, r, c, a) in &lm.terms {
            if vars.last() != Some(&v) {
                vars.push(v);
                entries.push(Vec::new());
                if let Some(g) = vm.group[v] {
                    match group {
                        None => group = Some(g),
                        Some(h) if h != g => {
                            return Err(SynthesisError::Malformed(format!("block {label} mixes groups {h} and {g}")))
                        }
                        _ => {}
                    }
                }
            }
            entries.last_mut().unwrap().push((r, c, a));
        }
        Ok(PencilBlock { label, size: self.size, group, f0: lm.c0, vars, entries })
    }
}

fn check_symmetric(label: &str, m: &LinMat) -> Result<(), SynthesisError> {
    let scale = 1e-12 * (1.0 + m.c0.amax());
    for r in 0..m.rows() {
        for c in r + 1..m.cols() {
            if (m.c0[(r, c)] - m.c0[(c, r)]).abs() > scale {
                return Err(SynthesisError::Asymmetric { label: label.to_string(), row: r, col: c });
            }
        }
    }
    let t = m.clone().compact();
    for &(v, r, c, a) in &t.terms {
        if r == c {
            continue;
        }
        let mirror = t
            .terms
            .binary_search_by(|x| (x.0, x.1, x.2).cmp(&(v, c, r)))
            .map(|k| t.terms[k].3)
            .unwrap_or(0.0);
        if (mirror - a).abs() > 1e-12 * (1.0 + a.abs()) {
            return Err(SynthesisError::Asymmetric { label: label.to_string(), row: r, col: c });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmiProblem {
    pub blocks: Vec<PencilBlock>,
    pub var_map: VarMap,
    /// Strictness margin: feasibility means every block is `>= eps I`.
    pub eps: f64,
}

/// Default strictness margin `1e-6 max(1, |A|_inf)`.
pub fn default_eps(cs: &ComposedSystem) -> f64 {
    1e-6 * norm_inf(&cs.a).max(1.0)
}

/// Assemble all pencils for the composed system.
pub fn build_problem(cs: &ComposedSystem, eps: f64) -> Result<LmiProblem, SynthesisError> {
    if !(eps > 0.0) {
        return Err(SynthesisError::Malformed(format!("eps must be positive, got {eps}")));
    }
    for (i, s) in cs.model.subsystems.iter().enumerate() {
        if s.p() > 0 && s.h_d.nrows() != s.p() {
            return Err(SynthesisError::MissingDisturbanceSet(i + 1));
        }
    }
    let vm = VarMap::new(cs);
    let q = vm.q;
    let n = cs.n;
    let dist = cs.disturbed();
    let w = vm.w_expr(cs);
    let khat = vm.k_hat_expr(cs);
    let lam = vm.lambda_expr(cs);
    let dup = |m: &LinMat| -> LinMat {
        if !dist {
            return m.clone();
        }
        // blkdiag(m, m) = [I;0] m [I 0] + [0;I] m [0 I]
        let top = DMatrix::from_fn(2 * n, n, |r, c| if r == c { 1.0 } else { 0.0 });
        let bot = DMatrix::from_fn(2 * n, n, |r, c| if r == c + n { 1.0 } else { 0.0 });
        m.lmul(&top).rmul(&top.transpose()).add(&m.lmul(&bot).rmul(&bot.transpose()))
    };
    let w_bar = dup(&w);
    let lam_bar = dup(&lam);
    // -1/2 (W^T A^T + K_hat^T B^T), n x n
    let akt = w.transpose().rmul(&cs.a.transpose()).add(&khat.transpose().rmul(&cs.b.transpose())).scale(-0.5);
    let hd_inv_t_et = if dist {
        let hd_inv = cs.h_d.clone().try_inverse().ok_or(SynthesisError::Malformed("H_d is singular".into()))?;
        Some(hd_inv.transpose() * cs.e.transpose() * -0.5)
    } else {
        None
    };
    let zt = cs.z.transpose();
    let mut blocks = Vec::new();

    for j in 0..cs.n_x {
        let f = &vm.facets[j];
        let owner = cs.row_owner[j];
        let (gamma, xi, psi, p) = (f.gamma.linmat(), f.xi.linmat(), f.psi.linmat(), f.p.linmat());
        let (om1, om2) = (f.omega1.linmat(), f.omega2.linmat());

        let label = format!("slack_{}", j + 1);
        let mut asm = Assembler::new(&[q, q]);
        asm.set(&label, 0, 0, &gamma)?;
        asm.set(&label, 0, 1, &psi)?;
        asm.set(&label, 1, 1, &xi)?;
        blocks.push(asm.finish(label, &vm)?);

        let ztej = zt.column(j).into_owned();
        let yj = if dist {
            DMatrix::from_fn(q, 1, |r, _| ztej[r % n])
        } else {
            DMatrix::from_fn(q, 1, |r, _| ztej[r])
        };
        let mut scalar = LinMat::zeros(1, 1);
        scalar.push_var(vm.lambda.offset + owner, 0, 0);
        let mut scalar = scalar.sub(&f.dx.sum());
        if let Some(dd) = &f.dd {
            scalar = scalar.sub(&dd.sum());
        }
        let label = format!("invariance_{}", j + 1);
        let mut asm = Assembler::new(&[q, q, q, 1]);
        asm.set(&label, 0, 0, &xi.sub(&p))?;
        asm.set(&label, 0, 1, &om1.sub(&w_bar))?;
        asm.set(&label, 0, 2, &om2.sub(&w_bar))?;
        asm.set(&label, 0, 3, &psi.transpose().rmul(&yj))?;
        asm.set(&label, 1, 1, &lam_bar.scale_ref(2.0).sub(&gamma))?;
        asm.set(&label, 1, 2, &lam_bar.add(&om1.transpose()).sub(&psi))?;
        asm.set(&label, 2, 2, &om2.add(&om2.transpose()).sub(&xi))?;
        asm.set(&label, 3, 3, &scalar)?;
        blocks.push(asm.finish(label, &vm)?);

        let dx = f.dx.linmat();
        let ztdz = dx.lmul(&zt).rmul(&cs.z);
        let label = format!("multiplier_{}", j + 1);
        if let (Some(dd), Some(het)) = (&f.dd, &hd_inv_t_et) {
            let mut asm = Assembler::new(&[n, cs.p, q]);
            asm.set(&label, 0, 0, &ztdz)?;
            asm.set(&label, 1, 1, &dd.linmat())?;
            // [akt, 0] : n x 2n
            let left = DMatrix::from_fn(n, q, |r, c| if r == c { 1.0 } else { 0.0 });
            asm.set(&label, 0, 2, &akt.rmul(&left))?;
            let mut off = DMatrix::zeros(cs.p, q);
            off.view_mut((0, n), (cs.p, n)).copy_from(het);
            asm.set(&label, 1, 2, &LinMat::constant(off))?;
            asm.set(&label, 2, 2, &p)?;
            blocks.push(asm.finish(label, &vm)?);
        } else {
            let mut asm = Assembler::new(&[n, q]);
            asm.set(&label, 0, 0, &ztdz)?;
            asm.set(&label, 0, 1, &akt)?;
            asm.set(&label, 1, 1, &p)?;
            blocks.push(asm.finish(label, &vm)?);
        }

        let label = format!("pd_Dx_{}", j + 1);
        let mut asm = Assembler::new(&[cs.n_x]);
        asm.set(&label, 0, 0, &dx)?;
        blocks.push(asm.finish(label, &vm)?);
        if let Some(dd) = &f.dd {
            let label = format!("pd_Dd_{}", j + 1);
            let mut asm = Assembler::new(&[cs.p]);
            asm.set(&label, 0, 0, &dd.linmat())?;
            blocks.push(asm.finish(label, &vm)?);
        }
    }

    let mut side = |tag: &str, pd_tag: &str, k: usize, d: &DiagVar, gain: &LinMat, rhs: f64, hrow: DMatrix<f64>| -> Result<(), SynthesisError> {
        let dm = d.linmat();
        let label = format!("{tag}_{}", k + 1);
        let mut asm = Assembler::new(&[n, 1]);
        asm.set(&label, 0, 0, &dm.lmul(&zt).rmul(&cs.z))?;
        asm.set(&label, 0, 1, &gain.transpose().rmul(&hrow).scale(-0.5))?;
        asm.set(&label, 1, 1, &LinMat::constant(DMatrix::from_element(1, 1, rhs)).sub(&d.sum()))?;
        blocks.push(asm.finish(label, &vm)?);
        let label = format!("{pd_tag}_{}", k + 1);
        let mut asm = Assembler::new(&[cs.n_x]);
        asm.set(&label, 0, 0, &dm)?;
        blocks.push(asm.finish(label, &vm)?);
        Ok(())
    };
    for k in 0..cs.n_s {
        let hrow = DMatrix::from_iterator(n, 1, cs.h_s.row(k).iter().cloned());
        side("state", "pd_Ds", k, &vm.ds[k], &w, cs.h_s_rhs[k], hrow)?;
    }
    for l in 0..cs.n_u {
        let hrow = DMatrix::from_iterator(cs.m, 1, cs.h_u.row(l).iter().cloned());
        side("input", "pd_Du", l, &vm.du[l], &khat, cs.h_u_rhs[l], hrow)?;
    }
    let mut asm = Assembler::new(&[cs.d()]);
    asm.set("pd_lambda", 0, 0, &vm.lambda.linmat())?;
    blocks.push(asm.finish("pd_lambda".into(), &vm)?);

    Ok(LmiProblem { blocks, var_map: vm, eps })
}

impl LinMat {
    fn scale_ref(&self, s: f64) -> LinMat {
        self.clone().scale(s)
    }
}

#[derive(Debug, Clone)]
pub struct BlockEval {
    pub label: String,
    pub matrix: DMatrix<f64>,
    pub min_eig: f64,
}

/// Evaluate every block at `y` together with its smallest eigenvalue.
pub fn eval_pencil(prob: &LmiProblem, y: &DVector<f64>) -> Result<Vec<BlockEval>, SynthesisError> {
    if y.len() != prob.var_map.n_vars {
        return Err(SynthesisError::Length { got: y.len(), expected: prob.var_map.n_vars });
    }
    Ok(prob
        .blocks
        .iter()
        .map(|b| {
            let matrix = b.eval(y);
            let min_eig = min_eig(&matrix);
            BlockEval { label: b.label.clone(), matrix, min_eig }
        })
        .collect())
}

impl LmiProblem {
    pub fn n_vars(&self) -> usize {
        self.var_map.n_vars
    }

    /// Smallest `min_eig - eps` over all blocks (`>= 0` means feasible).
    pub fn margin(&self, y: &DVector<f64>) -> Result<f64, SynthesisError> {
        Ok(eval_pencil(self, y)?.iter().map(|b| b.min_eig).fold(f64::INFINITY, f64::min) - self.eps)
    }

    /// Sparse triplet serialization: a header, then per block a
    /// `block <label> <size>` line followed by `<label> <var> <row> <col> <coeff>`
    /// lines with `var = 0` for `F0` and `var = index + 1` otherwise
    /// (upper triangle, 0-based rows and columns).
    pub fn to_triplets(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "vars {}", self.n_vars());
        let _ = writeln!(s, "eps {:.16e}", self.eps);
        for b in &self.blocks {
            let _ = writeln!(s, "block {} {}", b.label, b.size);
            for r in 0..b.size {
                for c in r..b.size {
                    let v = b.f0[(r, c)];
                    if v != 0.0 {
                        let _ = writeln!(s, "{} 0 {} {} {:.16e}", b.label, r, c, v);
                    }
                }
            }
            for (k, &var) in b.vars.iter().enumerate() {
                for &(r, c, a) in &b.entries[k] {
                    let _ = writeln!(s, "{} {} {} {} {:.16e}", b.label, var + 1, r, c, a);
                }
            }
        }
        s
    }

    /// Parse the triplet format back into blocks, using this problem's
    /// variable map to assign groups.
    pub fn blocks_from_triplets(&self, text: &str) -> Result<Vec<PencilBlock>, SynthesisError> {
        let bad = |line: &str| SynthesisError::Malformed(format!("bad triplet line `{line}`"));
        let mut blocks: Vec<(String, usize, Vec<(usize, usize, usize, f64)>)> = Vec::new();
        for line in text.lines() {
            let parts: Vec<&str> = line.split_whitespace().collect();
            match parts.as_slice() {
                [] => {}
                ["vars", _] | ["eps", _] => {}
                ["block", label, size] => {
                    blocks.push((label.to_string(), size.parse().map_err(|_| bad(line))?, Vec::new()))
                }
                [label, var, r, c, a] => {
                    let cur = blocks.last_mut().filter(|b| b.0 == *label).ok_or_else(|| bad(line))?;
                    let parse = |t: &str| t.parse::<usize>().map_err(|_| bad(line));
                    cur.2.push((parse(var)?, parse(r)?, parse(c)?, a.parse().map_err(|_| bad(line))?));
                }
                _ => return Err(bad(line)),
            }
        }
        let mut out = Vec::new();
        for (label, size, trip) in blocks {
            let mut lm = LinMat::zeros(size, size);
            for (v, r, c, a) in trip {
                if r >= size || c >= size || r > c || v > self.n_vars() {
                    return Err(SynthesisError::Malformed(format!("entry out of range in block {label}")));
                }
                if v == 0 {
                    lm.c0[(r, c)] += a;
                    if r != c {
                        lm.c0[(c, r)] += a;
                    }
                } else {
                    lm.terms.push((v - 1, r, c, a));
                }
            }
            let mut asm = Assembler::new(&[size]);
            asm.f0 = lm.c0.clone();
            asm.terms = lm.terms;
            out.push(asm.finish(label, &self.var_map)?);
        }
        Ok(out)
    }
}

/// Recovered sets and gains plus the raw decision vector.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisSolution {
    pub h_x: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub lambda: DVector<f64>,
    pub w: DMatrix<f64>,
    pub k_hat: DMatrix<f64>,
    /// Full decision vector (empty for hand-built candidates).
    pub y: DVector<f64>,
    pub gen_sets: Vec<GenSet>,
    /// Condition number of each `W_i` block.
    pub cond: Vec<f64>,
}

impl SynthesisSolution {
    /// Candidate built directly from `H_x` and `K` (no multipliers).
    pub fn from_gains(cs: &ComposedSystem, h_x: DMatrix<f64>, k: DMatrix<f64>) -> Result<Self, SynthesisError> {
        if h_x.shape() != (cs.n, cs.n) || k.shape() != (cs.m, cs.n) {
            return Err(SynthesisError::Mismatch(format!(
                "H_x {:?} / K {:?} for n={}, m={}",
                h_x.shape(),
                k.shape(),
                cs.n,
                cs.m
            )));
        }
        let mut gen_sets = Vec::new();
        let mut w = DMatrix::zeros(cs.n, cs.n);
        let mut conds = Vec::new();
        for (i, r) in cs.state_blocks.iter().enumerate() {
            let hi = h_x.view((r.start, r.start), (r.len(), r.len())).into_owned();
            let c = cond(&hi);
            let wi = hi.clone().try_inverse().ok_or(SynthesisError::SingularTransform { subsystem: i + 1, cond: c })?;
            w.view_mut((r.start, r.start), (r.len(), r.len())).copy_from(&wi);
            conds.push(c);
            gen_sets.push(GenSet::new(cs.subsystem(i).z.clone(), hi)?);
        }
        let k_hat = &k * &w;
        Ok(Self {
            h_x,
            k,
            lambda: DVector::from_element(cs.d(), 1.0),
            w,
            k_hat,
            y: DVector::zeros(0),
            gen_sets,
            cond: conds,
        })
    }

    /// Gain block `K_ij`.
    pub fn k_block(&self, cs: &ComposedSystem, i: usize, j: usize) -> DMatrix<f64> {
        let (r, c) = (&cs.input_blocks[i], &cs.state_blocks[j]);
        self.k.view((r.start, c.start), (r.len(), c.len())).into_owned()
    }

    pub fn h_block(&self, cs: &ComposedSystem, i: usize) -> DMatrix<f64> {
        let r = &cs.state_blocks[i];
        self.h_x.view((r.start, r.start), (r.len(), r.len())).into_owned()
    }

    /// Sum over subsystems of `log |det W_i|`, the set-size score.
    pub fn score(&self, cs: &ComposedSystem) -> f64 {
        cs.state_blocks
            .iter()
            .map(|r| self.w.view((r.start, r.start), (r.len(), r.len())).into_owned().determinant().abs().ln())
            .sum()
    }
}

const MAX_COND: f64 = 1e12;

/// Extract `H_x = W^-1` blockwise, `K = K_hat H_x`, and the generator sets.
pub fn recover(cs: &ComposedSystem, prob: &LmiProblem, y: &DVector<f64>) -> Result<SynthesisSolution, SynthesisError> {
    let vm = &prob.var_map;
    if y.len() != vm.n_vars {
        return Err(SynthesisError::Length { got: y.len(), expected: vm.n_vars });
    }
    let w = vm.w_value(cs, y);
    let mut h_x = DMatrix::zeros(cs.n, cs.n);
    let mut conds = Vec::new();
    let mut gen_sets = Vec::new();
    for (i, r) in cs.state_blocks.iter().enumerate() {
        let wi = w.view((r.start, r.start), (r.len(), r.len())).into_owned();
        let c = cond(&wi);
        if !(c <= MAX_COND) {
            return Err(SynthesisError::SingularTransform { subsystem: i + 1, cond: c });
        }
        let hi = wi.try_inverse().ok_or(SynthesisError::SingularTransform { subsystem: i + 1, cond: c })?;
        h_x.view_mut((r.start, r.start), (r.len(), r.len())).copy_from(&hi);
        conds.push(c);
        gen_sets.push(GenSet::new(cs.subsystem(i).z.clone(), hi)?);
    }
    let k_hat = vm.k_hat_value(cs, y);
    let k = &k_hat * &h_x;
    Ok(SynthesisSolution {
        h_x,
        k,
        lambda: vm.lambda.value(y),
        w,
        k_hat,
        y: y.clone(),
        gen_sets,
        cond: conds,
    })
}

/// The S-procedure matrices of the invariance, state and input conditions,
/// with the facet multipliers rescaled by `1 / lambda_{i(j)}`.
pub fn sproc_matrices(
    cs: &ComposedSystem,
    prob: &LmiProblem,
    sol: &SynthesisSolution,
) -> Result<Vec<(String, DMatrix<f64>)>, SynthesisError> {
    let vm = &prob.var_map;
    let y = &sol.y;
    if y.len() != vm.n_vars {
        return Err(SynthesisError::Length { got: y.len(), expected: vm.n_vars });
    }
    let zh = &cs.z * &sol.h_x;
    let ak = &cs.a + &cs.b * &sol.k;
    let mut out = Vec::new();
    for j in 0..cs.n_x {
        let f = &vm.facets[j];
        let lam = sol.lambda[cs.row_owner[j]];
        let dx = DMatrix::from_diagonal(&(f.dx.value(y) / lam));
        let zhj = DMatrix::from_iterator(cs.n, 1, zh.row(j).iter().cloned());
        let top = zh.transpose() * &dx * &zh;
        let mut scalar = 1.0 - dx.trace();
        let col_x = ak.transpose() * &zhj * -0.5;
        let m = if let Some(dd) = &f.dd {
            let dd = DMatrix::from_diagonal(&(dd.value(y) / lam));
            scalar -= dd.trace();
            let col_d = cs.e.transpose() * &zhj * -0.5;
            block_matrix(&[
                vec![top, DMatrix::zeros(cs.n, cs.p), col_x.clone()],
                vec![DMatrix::zeros(cs.p, cs.n), cs.h_d.transpose() * dd * &cs.h_d, col_d.clone()],
                vec![col_x.transpose(), col_d.transpose(), DMatrix::from_element(1, 1, scalar)],
            ])
        } else {
            block_matrix(&[
                vec![top, col_x.clone()],
                vec![col_x.transpose(), DMatrix::from_element(1, 1, scalar)],
            ])
        };
        out.push((format!("Lx_{}", j + 1), m));
    }
    let side = |d: DVector<f64>, col: DVector<f64>, rhs: f64| {
        let dm = DMatrix::from_diagonal(&d);
        let top = zh.transpose() * &dm * &zh;
        let col = DMatrix::from_column_slice(cs.n, 1, (col * -0.5).as_slice());
        block_matrix(&[vec![top, col.clone()], vec![col.transpose(), DMatrix::from_element(1, 1, rhs - d.sum())]])
    };
    for k in 0..cs.n_s {
        let col = cs.h_s.row(k).transpose();
        out.push((format!("Ls_{}", k + 1), side(vm.ds[k].value(y), col, cs.h_s_rhs[k])));
    }
    for l in 0..cs.n_u {
        let col = sol.k.transpose() * cs.h_u.row(l).transpose();
        out.push((format!("Lu_{}", l + 1), side(vm.du[l].value(y), col, cs.h_u_rhs[l])));
    }
    Ok(out)
}

/// `blkdiag(W, W)` or `W` depending on the lifted dimension.
pub fn lifted(m: &DMatrix<f64>, q: usize) -> DMatrix<f64> {
    if q == m.nrows() {
        m.clone()
    } else {
        block_diag(&[m.clone(), m.clone()])
    }
}

/// Objective `sum_i trace(W_i)`, which enlarges the sets when maximized.
pub fn w_trace_objective(vm: &VarMap) -> DVector<f64> {
    let mut c = DVector::zeros(vm.n_vars);
    for w in &vm.w {
        for k in 0..w.rows {
            c[w.index(k, k)] = 1.0;
        }
    }
    c
}

/// Objective `sum_i d_i' W_i y_i`, with `y_i` the point of `{y : |Z_i y| <= 1}`
/// furthest along `d_i`. Maximizing it stretches each set `X_i = W_i P_i`
/// along `d_i`.
pub fn extent_objective(cs: &ComposedSystem, vm: &VarMap, dirs: &[DVector<f64>]) -> Result<DVector<f64>, SynthesisError> {
    if dirs.len() != cs.d() {
        return Err(SynthesisError::Mismatch(format!("{} directions for {} subsystems", dirs.len(), cs.d())));
    }
    let mut c = DVector::zeros(vm.n_vars);
    for (i, (w, d)) in vm.w.iter().zip(dirs).enumerate() {
        let z = &cs.subsystem(i).z;
        if d.len() != w.rows {
            return Err(SynthesisError::Mismatch(format!("direction {} has {} entries, expected {}", i + 1, d.len(), w.rows)));
        }
        let base = GenSet::new(z.clone(), DMatrix::identity(w.rows, w.rows))?.to_hpolytope();
        let r = lp_solve(d, &base.a, &base.b, Sense::Max)?;
        let y = r.x_star.ok_or(SynthesisError::Poly(PolyError::Unbounded))?;
        for r in 0..w.rows {
            for q in 0..w.cols {
                c[w.index(r, q)] += d[r] * y[q];
            }
        }
    }
    Ok(c)
}
