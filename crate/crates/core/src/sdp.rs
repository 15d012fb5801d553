//! Barrier path-following solver for the LMI feasibility problem.
//!
//! Maximizes the common margin `t` subject to `F_b(y) - (eps + t) I >= 0`
//! for every block `b`, with a box `|y_i| <= R` that keeps the problem
//! bounded. Variables local to one group of blocks (one facet row, one
//! state row or one input row) produce a block-arrow Hessian that is
//! eliminated group by group onto the few shared variables.
//!
//! An optional second phase maximizes a linear objective `c.y` over the
//! feasible set, keeping every iterate strictly feasible.

use std::time::{Duration, Instant};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::SynthesisError;
use crate::lmi::{eval_pencil, LmiProblem};

#[derive(Debug, Clone, PartialEq)]
pub enum Backend {
    Internal,
    /// Command that reads a triplet file path as its last argument and
    /// prints the decision vector (whitespace separated) on stdout.
    External(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveOptions {
    pub max_iter: usize,
    /// Required margin `min_eig - eps` for the feasibility phase to stop.
    pub tol_margin: f64,
    pub backend: Backend,
    pub time_limit: Duration,
    pub seed: u64,
    /// Box radius on every decision variable.
    pub box_radius: f64,
    /// Optional objective `c` maximized after a feasible point is found.
    pub objective: Option<DVector<f64>>,
    /// Newton iterations allowed for the objective phase.
    pub objective_iter: usize,
    /// Margin kept by every iterate of the objective phase; trades set size
    /// against slack left in the invariance conditions.
    pub objective_margin: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            max_iter: 400,
            tol_margin: 0.0,
            backend: Backend::Internal,
            time_limit: Duration::from_secs(1800),
            seed: 0,
            box_radius: 1e4,
            objective: None,
            objective_iter: 150,
            objective_margin: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Feasible,
    NoFeasiblePointFound,
    IterationLimit,
    TimeLimit,
}

impl SolveStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            SolveStatus::Feasible => "feasible",
            SolveStatus::NoFeasiblePointFound => "no_feasible_point_found",
            SolveStatus::IterationLimit => "iteration_limit",
            SolveStatus::TimeLimit => "time_limit",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceEntry {
    pub iter: usize,
    pub phase: u8,
    pub sigma: f64,
    pub margin: f64,
    pub objective: f64,
    pub decrement: f64,
    pub step: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveOutcome {
    pub status: SolveStatus,
    pub y: Option<DVector<f64>>,
    /// Smallest `min_eig - eps` over all blocks at the returned point (or at
    /// the last iterate when no feasible point was found).
    pub min_margin: f64,
    pub iterations: usize,
    pub trace: Vec<TraceEntry>,
    pub message: String,
}

pub fn solve(prob: &LmiProblem, opts: &SolveOptions) -> Result<SolveOutcome, SynthesisError> {
    warm_start(prob, &DVector::zeros(prob.n_vars()), opts)
}

pub fn warm_start(prob: &LmiProblem, y0: &DVector<f64>, opts: &SolveOptions) -> Result<SolveOutcome, SynthesisError> {
    if y0.len() != prob.n_vars() {
        return Err(SynthesisError::Length { got: y0.len(), expected: prob.n_vars() });
    }
    if let Some(c) = &opts.objective {
        if c.len() != prob.n_vars() {
            return Err(SynthesisError::Length { got: c.len(), expected: prob.n_vars() });
        }
    }
    if opts.max_iter == 0 || !(opts.box_radius > 0.0) {
        return Err(SynthesisError::Malformed("solver limits must be positive".into()));
    }
    let raw = match &opts.backend {
        Backend::Internal => Barrier::new(prob, opts, y0)?.run(y0),
        Backend::External(cmd) => external(prob, cmd)?,
    };
    Ok(reverify(prob, raw))
}

/// Never trust a claimed feasible point: replay it through `eval_pencil`.
fn reverify(prob: &LmiProblem, mut out: SolveOutcome) -> SolveOutcome {
    if let Some(y) = &out.y {
        let m = prob.margin(y).unwrap_or(f64::NEG_INFINITY);
        out.min_margin = m;
        if out.status == SolveStatus::Feasible && !(m >= 0.0) {
            out.status = SolveStatus::NoFeasiblePointFound;
            out.message = format!("returned point fails re-verification (margin {m:e})");
        }
    }
    if out.status != SolveStatus::Feasible {
        out.y = None;
    }
    out
}

fn external(prob: &LmiProblem, cmd: &str) -> Result<SolveOutcome, SynthesisError> {
    let path = std::env::temp_dir().join(format!("sepinv-lmi-{}.txt", std::process::id()));
    std::fs::write(&path, prob.to_triplets()).map_err(|e| SynthesisError::Malformed(e.to_string()))?;
    let mut parts = cmd.split_whitespace();
    let prog = parts.next().ok_or_else(|| SynthesisError::Malformed("empty backend command".into()))?;
    let output = std::process::Command::new(prog).args(parts).arg(&path).output();
    let _ = std::fs::remove_file(&path);
    let fail = |msg: String| SolveOutcome {
        status: SolveStatus::NoFeasiblePointFound,
        y: None,
        min_margin: f64::NEG_INFINITY,
        iterations: 0,
        trace: Vec::new(),
        message: msg,
    };
    let output = match output {
        Ok(o) if o.status.success() => o,
        Ok(o) => return Ok(fail(format!("backend exited with {}", o.status))),
        Err(e) => return Ok(fail(format!("backend failed to start: {e}"))),
    };
    let text = String::from_utf8_lossy(&output.stdout);
    let vals: Result<Vec<f64>, _> = text.split_whitespace().map(str::parse).collect();
    match vals {
        Ok(v) if v.len() == prob.n_vars() => Ok(SolveOutcome {
            status: SolveStatus::Feasible,
            y: Some(DVector::from_vec(v)),
            min_margin: 0.0,
            iterations: 0,
            trace: Vec::new(),
            message: "external backend".into(),
        }),
        _ => Ok(fail("backend output is not a decision vector of the right length".into())),
    }
}

#[derive(Clone, Copy)]
enum Slot {
    Local(usize),
    Shared(usize),
}

/// Flattened block data for the Newton system.
struct BlockData {
    group: Option<usize>,
    slots: Vec<Slot>,
    starts: Vec<usize>,
    // (row, col, coeff * kappa), kappa = 1/2 on the diagonal
    ents: Vec<(usize, usize, f64)>,
}

struct Barrier<'a> {
    prob: &'a LmiProblem,
    opts: &'a SolveOptions,
    blocks: Vec<BlockData>,
    /// Variables of each group.
    group_vars: Vec<Vec<usize>>,
    /// Shared variables; `t` is the extra last shared slot.
    shared_vars: Vec<usize>,
    slot_of: Vec<Slot>,
    nu: f64,
    radius: f64,
    start: Instant,
}

struct Eval {
    chol: Vec<Cholesky<f64, Dyn>>,
    value: f64,
}

impl<'a> Barrier<'a> {
    fn new(prob: &'a LmiProblem, opts: &'a SolveOptions, y0: &DVector<f64>) -> Result<Self, SynthesisError> {
        let vm = &prob.var_map;
        let mut group_vars = vec![Vec::new(); vm.n_groups];
        let mut shared_vars = Vec::new();
        let mut slot_of = Vec::with_capacity(vm.n_vars);
        for v in 0..vm.n_vars {
            match vm.group[v] {
                Some(g) => {
                    slot_of.push(Slot::Local(group_vars[g].len()));
                    group_vars[g].push(v);
                }
                None => {
                    slot_of.push(Slot::Shared(shared_vars.len()));
                    shared_vars.push(v);
                }
            }
        }
        let mut blocks = Vec::with_capacity(prob.blocks.len());
        let mut nu = 0.0;
        for b in &prob.blocks {
            nu += b.size as f64;
            let mut slots = Vec::with_capacity(b.vars.len());
            let mut starts = Vec::with_capacity(b.vars.len() + 1);
            let mut ents = Vec::new();
            for (k, &v) in b.vars.iter().enumerate() {
                if let (Slot::Local(_), Some(bg)) = (slot_of[v], b.group) {
                    if vm.group[v] != Some(bg) {
                        return Err(SynthesisError::Malformed(format!("block {} has foreign locals", b.label)));
                    }
                }
                if let (Slot::Local(_), None) = (slot_of[v], b.group) {
                    return Err(SynthesisError::Malformed(format!("block {} lacks a group", b.label)));
                }
                slots.push(slot_of[v]);
                starts.push(ents.len());
                for &(r, c, a) in &b.entries[k] {
                    ents.push((r, c, if r == c { 0.5 * a } else { a }));
                }
            }
            starts.push(ents.len());
            blocks.push(BlockData { group: b.group, slots, starts, ents });
        }
        nu += 2.0 * vm.n_vars as f64;
        // a warm start outside the box widens the box instead of being clipped
        let radius = opts.box_radius.max(2.0 * y0.amax());
        Ok(Self { prob, opts, blocks, group_vars, shared_vars, slot_of, nu, radius, start: Instant::now() })
    }

    fn n_shared(&self) -> usize {
        self.shared_vars.len() + 1
    }

    /// Barrier value (without the linear term) and factors, or `None` when
    /// the point is outside the domain.
    fn evaluate(&self, y: &DVector<f64>, t: f64) -> Option<Eval> {
        let r = self.radius;
        let mut value = 0.0;
        for &v in y.iter() {
            if !(v.abs() < r) {
                return None;
            }
            value -= (r - v).ln() + (r + v).ln();
        }
        let shift = self.prob.eps + t;
        let mut chol = Vec::with_capacity(self.blocks.len());
        for b in &self.prob.blocks {
            let mut s = b.eval(y);
            for k in 0..b.size {
                s[(k, k)] -= shift;
            }
            let c = Cholesky::new(s)?;
            let ld: f64 = c.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
            if !ld.is_finite() {
                return None;
            }
            value -= ld;
            chol.push(c);
        }
        Some(Eval { chol, value })
    }

    fn margin_of(&self, y: &DVector<f64>) -> f64 {
        self.prob.margin(y).unwrap_or(f64::NEG_INFINITY)
    }

    /// Newton direction for `sigma_t * (-t) + sigma_c * (-c.y) + barrier`.
    /// Returns `(dy, dt, decrement^2)`.
    fn newton(
        &self,
        y: &DVector<f64>,
        ev: &Eval,
        sigma_t: f64,
        sigma_c: f64,
        fix_t: bool,
    ) -> Option<(DVector<f64>, f64, f64)> {
        let ns = self.n_shared();
        let ts = ns - 1;
        let mut hss = DMatrix::<f64>::zeros(ns, ns);
        let mut gs = DVector::<f64>::zeros(ns);
        let mut hg: Vec<DMatrix<f64>> = self.group_vars.iter().map(|v| DMatrix::zeros(v.len(), v.len())).collect();
        let mut cg: Vec<DMatrix<f64>> = self.group_vars.iter().map(|v| DMatrix::zeros(v.len(), ns)).collect();
        let mut gg: Vec<DVector<f64>> = self.group_vars.iter().map(|v| DVector::zeros(v.len())).collect();

        for (bd, ch) in self.blocks.iter().zip(&ev.chol) {
            let u = ch.inverse();
            let u2 = &u * &u;
            let g = bd.group;
            let nvb = bd.slots.len();
            // gradient and coupling with t
            for k in 0..nvb {
                let mut gr = 0.0;
                let mut ht = 0.0;
                for &(r, c, a) in &bd.ents[bd.starts[k]..bd.starts[k + 1]] {
                    gr -= 2.0 * a * u[(r, c)];
                    ht -= 2.0 * a * u2[(r, c)];
                }
                match bd.slots[k] {
                    Slot::Local(i) => {
                        let gi = g.unwrap();
                        gg[gi][i] += gr;
                        cg[gi][(i, ts)] += ht;
                    }
                    Slot::Shared(s) => {
                        gs[s] += gr;
                        hss[(s, ts)] += ht;
                        hss[(ts, s)] += ht;
                    }
                }
            }
            gs[ts] += u.trace();
            hss[(ts, ts)] += u.norm_squared();
            // Hessian pairs
            for ka in 0..nvb {
                let ea = &bd.ents[bd.starts[ka]..bd.starts[ka + 1]];
                for kb in ka..nvb {
                    let eb = &bd.ents[bd.starts[kb]..bd.starts[kb + 1]];
                    let mut h = 0.0;
                    for &(r, c, a) in ea {
                        for &(p, q, b) in eb {
                            h += a * b * (u[(c, p)] * u[(q, r)] + u[(c, q)] * u[(p, r)]);
                        }
                    }
                    h *= 2.0;
                    if h == 0.0 {
                        continue;
                    }
                    match (bd.slots[ka], bd.slots[kb]) {
                        (Slot::Local(i), Slot::Local(j)) => {
                            let m = &mut hg[g.unwrap()];
                            m[(i, j)] += h;
                            if i != j {
                                m[(j, i)] += h;
                            }
                        }
                        (Slot::Local(i), Slot::Shared(s)) | (Slot::Shared(s), Slot::Local(i)) => {
                            cg[g.unwrap()][(i, s)] += h;
                        }
                        (Slot::Shared(s), Slot::Shared(w)) => {
                            hss[(s, w)] += h;
                            if s != w {
                                hss[(w, s)] += h;
                            }
                        }
                    }
                }
            }
        }

        // box barrier and linear terms
        let r = self.radius;
        let c = self.opts.objective.as_ref();
        for (v, &yv) in y.iter().enumerate() {
            let g = 1.0 / (r - yv) - 1.0 / (r + yv) - sigma_c * c.map_or(0.0, |c| c[v]);
            let h = 1.0 / ((r - yv) * (r - yv)) + 1.0 / ((r + yv) * (r + yv));
            match self.slot_of[v] {
                Slot::Local(i) => {
                    let gi = self.prob.var_map.group[v].unwrap();
                    gg[gi][i] += g;
                    hg[gi][(i, i)] += h;
                }
                Slot::Shared(s) => {
                    gs[s] += g;
                    hss[(s, s)] += h;
                }
            }
        }
        gs[ts] -= sigma_t;
        if fix_t {
            // freeze t: decouple it with a unit diagonal and no gradient
            for k in 0..ns {
                hss[(ts, k)] = 0.0;
                hss[(k, ts)] = 0.0;
            }
            hss[(ts, ts)] = 1.0;
            gs[ts] = 0.0;
            for m in cg.iter_mut() {
                m.column_mut(ts).fill(0.0);
            }
        }

        // eliminate groups onto the shared variables
        let mut schur = hss;
        let mut rhs = -&gs;
        let mut facts = Vec::with_capacity(hg.len());
        for (gi, h) in hg.into_iter().enumerate() {
            let ch = factor(h)?;
            let yg = ch.solve(&cg[gi]);
            let zg = ch.solve(&gg[gi]);
            schur -= cg[gi].transpose() * &yg;
            rhs += cg[gi].transpose() * &zg;
            facts.push((yg, zg));
        }
        let ds = factor(schur)?.solve(&rhs);
        let mut dy = DVector::zeros(y.len());
        let mut dec2 = -gs.dot(&ds);
        for (gi, (yg, zg)) in facts.into_iter().enumerate() {
            let dx = -(zg + yg * &ds);
            dec2 -= gg[gi].dot(&dx);
            for (k, &v) in self.group_vars[gi].iter().enumerate() {
                dy[v] = dx[k];
            }
        }
        for (s, &v) in self.shared_vars.iter().enumerate() {
            dy[v] = ds[s];
        }
        Some((dy, if fix_t { 0.0 } else { ds[ts] }, dec2.max(0.0)))
    }

    fn target_margin(&self) -> f64 {
        let floor = if self.opts.objective.is_some() { self.opts.objective_margin } else { 0.0 };
        self.opts.tol_margin.max(floor).max(0.0)
    }

    fn out_of_time(&self) -> bool {
        self.start.elapsed() > self.opts.time_limit
    }

    fn run(&self, y0: &DVector<f64>) -> SolveOutcome {
        let mut trace = Vec::new();
        let mut y = y0.clone();
        let m0 = self.margin_of(&y);
        let finish = |status, y: Option<DVector<f64>>, margin, iters, trace, msg: &str| SolveOutcome {
            status,
            y,
            min_margin: margin,
            iterations: iters,
            trace,
            message: msg.to_string(),
        };
        if !m0.is_finite() {
            return finish(SolveStatus::NoFeasiblePointFound, None, m0, 0, trace, "non-finite start");
        }
        let mut iters = 0;
        if m0 < self.target_margin() || m0 <= 0.0 {
            // phase 1: maximize the margin t
            let mut t = m0 - 1.0;
            // start near the center of the shifted problem, where the
            // barrier gradient is comparable to the weight on t
            let mut sigma = self.nu;
            let mut reached = false;
            'outer: loop {
                let mut inner = 0;
                loop {
                    if iters >= self.opts.max_iter {
                        let m = self.margin_of(&y);
                        return finish(SolveStatus::IterationLimit, None, m, iters, trace, "iteration limit in phase 1");
                    }
                    if self.out_of_time() {
                        let m = self.margin_of(&y);
                        return finish(SolveStatus::TimeLimit, None, m, iters, trace, "time limit in phase 1");
                    }
                    let Some(ev) = self.evaluate(&y, t) else {
                        return finish(SolveStatus::NoFeasiblePointFound, None, t, iters, trace, "lost interior");
                    };
                    let Some((dy, dt, dec2)) = self.newton(&y, &ev, sigma, 0.0, false) else {
                        return finish(SolveStatus::NoFeasiblePointFound, None, t, iters, trace, "singular Newton system");
                    };
                    let dec = dec2.sqrt();
                    let f0 = ev.value - sigma * t;
                    let mut alpha = 1.0;
                    let mut accepted = false;
                    for _ in 0..60 {
                        let yn = &y + &dy * alpha;
                        let tn = t + dt * alpha;
                        if let Some(e2) = self.evaluate(&yn, tn) {
                            if e2.value - sigma * tn <= f0 - 0.01 * alpha * dec2 || alpha < 1e-12 {
                                y = yn;
                                t = tn;
                                accepted = true;
                                break;
                            }
                        }
                        alpha *= 0.5;
                    }
                    iters += 1;
                    inner += 1;
                    trace.push(TraceEntry { iter: iters, phase: 1, sigma, margin: t, objective: 0.0, decrement: dec, step: alpha });
                    if !accepted {
                        break;
                    }
                    if t >= self.target_margin() && t > 0.0 {
                        reached = true;
                        break 'outer;
                    }
                    if dec < 0.25 || inner >= 50 {
                        break;
                    }
                }
                // t(sigma) + nu / sigma bounds the best margin from above
                if t + self.nu / sigma < 0.0 {
                    break;
                }
                sigma *= 8.0;
                if sigma > 1e14 {
                    break;
                }
            }
            if !reached {
                let m = self.margin_of(&y);
                return finish(
                    SolveStatus::NoFeasiblePointFound,
                    None,
                    m,
                    iters,
                    trace,
                    &format!("margin upper bound negative (best margin {m:e})"),
                );
            }
        }
        if let Some(c) = &self.opts.objective {
            y = self.maximize(y, c, &mut iters, &mut trace);
        }
        let m = self.margin_of(&y);
        finish(SolveStatus::Feasible, Some(y), m, iters, trace, "feasible")
    }

    /// Barrier method for `max c.y` at fixed `t = 0`; every accepted iterate
    /// stays strictly feasible.
    fn maximize(&self, mut y: DVector<f64>, c: &DVector<f64>, iters: &mut usize, trace: &mut Vec<TraceEntry>) -> DVector<f64> {
        let cn = c.amax().max(1e-300);
        let mut sigma = 1.0 / cn;
        let mut used = 0;
        let t = self.opts.objective_margin.max(0.0);
        while used < self.opts.objective_iter && !self.out_of_time() {
            let mut centered = false;
            while used < self.opts.objective_iter && !self.out_of_time() {
                let Some(ev) = self.evaluate(&y, t) else { return y };
                let Some((dy, _, dec2)) = self.newton(&y, &ev, 0.0, sigma, true) else { return y };
                let dec = dec2.sqrt();
                let f0 = ev.value - sigma * c.dot(&y);
                let mut alpha = 1.0;
                let mut moved = false;
                for _ in 0..60 {
                    let yn = &y + &dy * alpha;
                    if let Some(e2) = self.evaluate(&yn, t) {
                        if e2.value - sigma * c.dot(&yn) <= f0 - 0.01 * alpha * dec2 {
                            y = yn;
                            moved = true;
                            break;
                        }
                    }
                    alpha *= 0.5;
                }
                used += 1;
                *iters += 1;
                trace.push(TraceEntry {
                    iter: *iters,
                    phase: 2,
                    sigma,
                    margin: self.margin_of(&y),
                    objective: c.dot(&y),
                    decrement: dec,
                    step: alpha,
                });
                if !moved || dec < 0.25 {
                    centered = moved;
                    break;
                }
            }
            if !centered {
                break;
            }
            let gap = self.nu / sigma;
            if gap <= 1e-4 * c.dot(&y).abs().max(1.0) {
                break;
            }
            sigma *= 8.0;
        }
        y
    }
}

fn factor(h: DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    let n = h.nrows();
    if n == 0 {
        return Cholesky::new(h);
    }
    let scale = h.diagonal().amax().max(1e-300);
    let mut reg = 0.0;
    for _ in 0..8 {
        let mut m = h.clone();
        for k in 0..n {
            m[(k, k)] += reg;
        }
        if let Some(c) = Cholesky::new(m) {
            return Some(c);
        }
        reg = if reg == 0.0 { 1e-14 * scale } else { reg * 100.0 };
    }
    None
}

/// Eigenvalue margins per block, used by reports.
pub fn block_margins(prob: &LmiProblem, y: &DVector<f64>) -> Result<Vec<(String, f64)>, SynthesisError> {
    Ok(eval_pencil(prob, y)?.into_iter().map(|b| (b.label, b.min_eig - prob.eps)).collect())
}
