//! Verifier-gated enlargement of a certified solution.
//!
//! Each round maximizes the set-size score `sum_i log|det W_i|` linearized at
//! the previous iterate, inside a Frobenius trust region around the previous
//! `W`, starting the barrier solver from the previous decision vector. A
//! candidate is accepted only if `certify` says valid and the score did not
//! drop; otherwise the trust region is halved.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};

use crate::error::ControlError;
use crate::lmi::{build_problem, default_eps, recover, LmiProblem, PencilBlock, SynthesisSolution};
use crate::model::ComposedSystem;
use crate::sdp::{warm_start, SolveOptions, SolveStatus};
use crate::verify::certify;

pub const MAX_HALVINGS: usize = 40;

/// Called on every candidate before it is gated (round, attempt, candidate).
pub type Tamper<'a> = dyn FnMut(usize, usize, &mut SynthesisSolution) + 'a;

pub struct RefineOptions<'a> {
    pub iters: usize,
    /// Trust-region radius relative to `|W0|_F`; infinite means no bound.
    pub step_cap: f64,
    pub eps: Option<f64>,
    pub solve: SolveOptions,
    /// Test hook that may corrupt candidates before gating.
    pub tamper: Option<Box<Tamper<'a>>>,
}

impl Default for RefineOptions<'_> {
    fn default() -> Self {
        Self {
            iters: 5,
            step_cap: 0.5,
            eps: None,
            solve: SolveOptions { objective_iter: 60, ..Default::default() },
            tamper: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundLog {
    pub round: usize,
    pub attempt: usize,
    pub cap: f64,
    pub score: f64,
    pub min_margin: f64,
    pub accepted: bool,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct RefineResult {
    /// Accepted solutions, starting with the input.
    pub solutions: Vec<SynthesisSolution>,
    pub log: Vec<RoundLog>,
}

impl RefineResult {
    pub fn scores(&self, cs: &ComposedSystem) -> Vec<f64> {
        self.solutions.iter().map(|s| s.score(cs)).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("round,attempt,cap,score,min_margin,accepted,reason\n");
        for r in &self.log {
            let _ = writeln!(
                s,
                "{},{},{:.16e},{:.16e},{:.16e},{},{}",
                r.round, r.attempt, r.cap, r.score, r.min_margin, r.accepted, r.reason
            );
        }
        s
    }
}

pub fn refine(cs: &ComposedSystem, sol0: &SynthesisSolution, mut opts: RefineOptions) -> Result<RefineResult, ControlError> {
    let cert = certify(cs, sol0)?;
    if !cert.valid {
        return Err(ControlError::InvalidCertificate);
    }
    let mut out = RefineResult { solutions: vec![sol0.clone()], log: Vec::new() };
    if opts.iters == 0 {
        return Ok(out);
    }
    let eps = opts.eps.unwrap_or_else(|| default_eps(cs));
    let base = build_problem(cs, eps)?;
    if sol0.y.len() != base.n_vars() {
        return Err(ControlError::Invalid("refinement needs the full decision vector of the starting solution".into()));
    }
    if !(base.margin(&sol0.y)? >= 0.0) {
        return Err(ControlError::Invalid("starting decision vector does not satisfy the LMIs".into()));
    }
    let mut prev = sol0.clone();
    let mut prev_score = prev.score(cs);
    for round in 1..=opts.iters {
        let mut cap = opts.step_cap;
        let mut accepted = None;
        for attempt in 0..=MAX_HALVINGS {
            let prob = with_trust_region(&base, cs, &prev.w, cap);
            let margin0 = prob.margin(&prev.y)?;
            let solve = SolveOptions {
                objective: Some(score_gradient(&base, cs, &prev.w)),
                // the objective phase must start strictly inside its own region
                objective_margin: opts.solve.objective_margin.min(0.5 * margin0).max(0.0),
                ..opts.solve.clone()
            };
            let outcome = warm_start(&prob, &prev.y, &solve)?;
            let mut entry = RoundLog {
                round,
                attempt,
                cap,
                score: f64::NAN,
                min_margin: f64::NAN,
                accepted: false,
                reason: String::new(),
            };
            let candidate = match (outcome.status, outcome.y) {
                (SolveStatus::Feasible, Some(y)) => recover(cs, &base, &y).map_err(|e| e.to_string()),
                (st, _) => Err(format!("solver {}", st.as_str())),
            };
            match candidate {
                Ok(mut cand) => {
                    if let Some(t) = opts.tamper.as_mut() {
                        t(round, attempt, &mut cand);
                    }
                    let c = certify(cs, &cand)?;
                    let score = cand.score(cs);
                    entry.score = score;
                    entry.min_margin = c.min_margin();
                    if !c.valid {
                        entry.reason = "certificate invalid".into();
                    } else if !(score >= prev_score) {
                        entry.reason = "score decreased".into();
                    } else {
                        entry.accepted = true;
                        entry.reason = "ok".into();
                        out.log.push(entry);
                        accepted = Some((cand, score));
                        break;
                    }
                }
                Err(e) => entry.reason = e,
            }
            log::debug!("refine round {round} attempt {attempt} rejected: {}", entry.reason);
            out.log.push(entry);
            cap = if cap.is_finite() { cap / 2.0 } else { 1.0 };
        }
        match accepted {
            Some((cand, score)) => {
                prev = cand;
                prev_score = score;
                out.solutions.push(prev.clone());
            }
            None => break,
        }
    }
    Ok(out)
}

/// `d/dW sum_i log|det W_i| = W_i^-T`, laid out on the W variables.
fn score_gradient(prob: &LmiProblem, cs: &ComposedSystem, w: &DMatrix<f64>) -> DVector<f64> {
    let mut c = DVector::zeros(prob.n_vars());
    for (i, v) in prob.var_map.w.iter().enumerate() {
        let r = &cs.state_blocks[i];
        let wi = w.view((r.start, r.start), (r.len(), r.len())).into_owned();
        let Some(inv) = wi.try_inverse() else { continue };
        for a in 0..v.rows {
            for b in 0..v.cols {
                c[v.index(a, b)] += inv[(b, a)];
            }
        }
    }
    c
}

/// Appends `[rho, vec(W - W0)^T; vec(W - W0), rho I] >= 0` with
/// `rho = cap |W0|_F`, which is `|W - W0|_F <= rho`.
fn with_trust_region(base: &LmiProblem, cs: &ComposedSystem, w0: &DMatrix<f64>, cap: f64) -> LmiProblem {
    let mut prob = base.clone();
    if !cap.is_finite() {
        return prob;
    }
    let rho = cap * w0.norm();
    let mut cells = Vec::new();
    for (i, v) in base.var_map.w.iter().enumerate() {
        let o = cs.state_blocks[i].start;
        for a in 0..v.rows {
            for b in 0..v.cols {
                cells.push((v.index(a, b), w0[(o + a, o + b)]));
            }
        }
    }
    cells.sort_by_key(|c| c.0);
    let size = cells.len() + 1;
    let mut f0 = DMatrix::identity(size, size) * rho;
    let mut vars = Vec::new();
    let mut entries = Vec::new();
    for (k, &(var, value)) in cells.iter().enumerate() {
        f0[(0, k + 1)] = -value;
        f0[(k + 1, 0)] = -value;
        vars.push(var);
        entries.push(vec![(0, k + 1, 1.0)]);
    }
    prob.blocks.push(PencilBlock { label: "trust_region".into(), size, group: None, f0, vars, entries });
    prob
}
