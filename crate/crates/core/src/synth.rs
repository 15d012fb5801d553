//! Local controllers inside a certified invariant set: robust one-step
//! pre-images under the input envelope, reach ladders towards a goal, and a
//! two-goal recurrence policy.

use nalgebra::{DMatrix, DVector};

use crate::envelope::{check_index, coupling_bounds, joint_rows, worst_case_rows};
use crate::error::ControlError;
use crate::lmi::SynthesisSolution;
use crate::model::ComposedSystem;
use crate::polytope::{contains, fm_project, lp_solve, HPolytope, LpStatus, Sense};

pub const DEFAULT_MAX_LEVELS: usize = 100;
const MEMBER_TOL: f64 = 1e-9;

/// `target` with every row tightened by the worst coupling/disturbance.
fn tightened(cs: &ComposedSystem, sol: &SynthesisSolution, i: usize, target: &HPolytope) -> Result<HPolytope, ControlError> {
    let w = worst_case_rows(cs, sol, i, &target.a)?;
    Ok(HPolytope { a: target.a.clone(), b: &target.b - w })
}

/// States of `X_i` from which some envelope input reaches `target` for every
/// coupling and disturbance.
pub fn robust_pre(cs: &ComposedSystem, sol: &SynthesisSolution, i: usize, target: &HPolytope) -> Result<HPolytope, ControlError> {
    check_index(cs, i)?;
    let s = cs.subsystem(i);
    let (n, m) = (s.n(), s.m());
    if target.dim() != n {
        return Err(ControlError::Invalid(format!("target has dimension {}, subsystem {} has {}", target.dim(), i + 1, n)));
    }
    let t = tightened(cs, sol, i, target)?;
    let (upper, _) = coupling_bounds(cs, sol, i)?;
    let (env_a, env_b) = joint_rows(cs, sol, i, &upper);
    let xset = sol.gen_sets[i].to_hpolytope();
    let rows = t.rows() + env_a.nrows() + xset.rows();
    let mut a = DMatrix::zeros(rows, n + m);
    let mut b = DVector::zeros(rows);
    let ta = &t.a * &s.a;
    let tb = &t.a * &s.b;
    a.view_mut((0, 0), (t.rows(), n)).copy_from(&ta);
    a.view_mut((0, n), (t.rows(), m)).copy_from(&tb);
    b.rows_mut(0, t.rows()).copy_from(&t.b);
    let r0 = t.rows();
    a.view_mut((r0, 0), env_a.shape()).copy_from(&env_a);
    b.rows_mut(r0, env_b.len()).copy_from(&env_b);
    let r1 = r0 + env_a.nrows();
    a.view_mut((r1, 0), (xset.rows(), n)).copy_from(&xset.a);
    b.rows_mut(r1, xset.rows()).copy_from(&xset.b);
    let drop: Vec<usize> = (n..n + m).collect();
    Ok(fm_project(&HPolytope { a, b }, &drop)?)
}

fn subset(inner: &HPolytope, outer: &HPolytope) -> Result<bool, ControlError> {
    if inner.rows() > 0 && inner.is_empty()? {
        return Ok(true);
    }
    if outer.rows() == 0 {
        return Ok(true);
    }
    Ok(contains(outer, inner)?.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReachLadder {
    pub subsystem: usize,
    pub target: HPolytope,
    /// `levels[0]` is the robust controlled invariant core of the target
    /// (the target itself if the core iteration does not settle);
    /// `levels[r]` is the robust pre-image of `levels[r - 1]`.
    pub levels: Vec<HPolytope>,
    pub converged: bool,
    /// `levels[r] ⊆ levels[r + 1]` for every `r`.
    pub nested: bool,
}

impl ReachLadder {
    /// Smallest level containing `x`.
    pub fn level_of(&self, x: &DVector<f64>) -> Option<usize> {
        self.levels.iter().position(|l| l.contains_point(x, MEMBER_TOL))
    }
}

/// Largest subset of `target` that can be kept inside itself against every
/// coupling and disturbance: `C <- target ∩ pre(C)` until it stops
/// shrinking. `None` if it empties or does not settle in `max_iter` rounds.
pub fn invariant_core(
    cs: &ComposedSystem,
    sol: &SynthesisSolution,
    i: usize,
    target: &HPolytope,
    max_iter: usize,
) -> Result<Option<HPolytope>, ControlError> {
    let mut cur = target.reduced()?;
    for _ in 0..max_iter {
        let next = robust_pre(cs, sol, i, &cur)?.intersect(target)?.reduced()?;
        if next.rows() > 0 && next.is_empty()? {
            return Ok(None);
        }
        if subset(&cur, &next)? {
            return Ok(Some(next));
        }
        cur = next;
    }
    Ok(None)
}

pub fn reach_ladder(
    cs: &ComposedSystem,
    sol: &SynthesisSolution,
    i: usize,
    target: &HPolytope,
    other_goal: &HPolytope,
    max_levels: usize,
) -> Result<ReachLadder, ControlError> {
    check_index(cs, i)?;
    let base = invariant_core(cs, sol, i, target, max_levels)?.unwrap_or_else(|| target.clone());
    let mut converged = subset(other_goal, target)?;
    let mut levels = vec![base];
    let mut nested = true;
    while !converged && levels.len() <= max_levels {
        let prev = levels.last().unwrap();
        let next = robust_pre(cs, sol, i, prev)?;
        if next.rows() > 0 && next.is_empty()? {
            break;
        }
        let grew = subset(prev, &next)?;
        nested &= grew;
        let stalled = grew && subset(&next, prev)?;
        converged = subset(other_goal, &next)?;
        levels.push(next);
        if stalled && !converged {
            break;
        }
    }
    Ok(ReachLadder { subsystem: i, target: target.clone(), levels, converged, nested })
}

/// Everything the policy needs, detached from the model and the solution.
#[derive(Debug, Clone, PartialEq)]
struct LocalData {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    xset: HPolytope,
    env_a: DMatrix<f64>,
    env_b: DVector<f64>,
    /// Per ladder, per level: rows tightened by the worst coupling.
    tight: [Vec<HPolytope>; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecurrenceController {
    pub subsystem: usize,
    pub goals: [HPolytope; 2],
    /// `ladders[k]` leads to `goals[k]` and should cover the other goal.
    pub ladders: [ReachLadder; 2],
    /// Index of the goal currently pursued.
    pub mode: usize,
    local: LocalData,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyStep {
    pub mode: usize,
    /// Ladder level of the state before the step, if any.
    pub level: Option<usize>,
    /// Level the input was chosen to reach (`None` for the envelope fallback).
    pub aim: Option<usize>,
}

impl RecurrenceController {
    pub fn new(
        cs: &ComposedSystem,
        sol: &SynthesisSolution,
        i: usize,
        goal_a: HPolytope,
        goal_b: HPolytope,
        max_levels: usize,
    ) -> Result<Self, ControlError> {
        check_index(cs, i)?;
        let la = reach_ladder(cs, sol, i, &goal_a, &goal_b, max_levels)?;
        let lb = reach_ladder(cs, sol, i, &goal_b, &goal_a, max_levels)?;
        let s = cs.subsystem(i);
        let (upper, _) = coupling_bounds(cs, sol, i)?;
        let (env_a, env_b) = joint_rows(cs, sol, i, &upper);
        let tight_of = |l: &ReachLadder| -> Result<Vec<HPolytope>, ControlError> {
            l.levels.iter().map(|p| tightened(cs, sol, i, p)).collect()
        };
        let local = LocalData {
            a: s.a.clone(),
            b: s.b.clone(),
            xset: sol.gen_sets[i].to_hpolytope(),
            env_a,
            env_b,
            tight: [tight_of(&la)?, tight_of(&lb)?],
        };
        Ok(Self { subsystem: i, goals: [goal_a, goal_b], ladders: [la, lb], mode: 0, local })
    }

    pub fn converged(&self) -> bool {
        self.ladders[0].converged && self.ladders[1].converged
    }

    /// Input for local state `x`; flips the pursued goal on arrival.
    pub fn policy(&mut self, x: &DVector<f64>) -> Result<(DVector<f64>, PolicyStep), ControlError> {
        if !self.converged() {
            let k = if self.ladders[0].converged { 1 } else { 0 };
            return Err(ControlError::NotConverged(k + 1));
        }
        let residual = self.local.xset.residual(x);
        if residual > MEMBER_TOL {
            return Err(ControlError::OutsideSet { subsystem: self.subsystem + 1, residual });
        }
        if self.goals[self.mode].contains_point(x, MEMBER_TOL) {
            self.mode = 1 - self.mode;
        }
        let ladder = &self.ladders[self.mode];
        let level = ladder.level_of(x);
        let start = level.map_or(ladder.levels.len(), |r| r.saturating_sub(1));
        for aim in start..ladder.levels.len() {
            if let Some(u) = self.min_input(x, Some(&self.local.tight[self.mode][aim]))? {
                return Ok((u, PolicyStep { mode: self.mode, level, aim: Some(aim) }));
            }
        }
        // off the ladder: any envelope input keeps the state in X_i
        let u = self
            .min_input(x, None)?
            .ok_or_else(|| ControlError::Invalid("empty input envelope inside the invariant set".into()))?;
        Ok((u, PolicyStep { mode: self.mode, level, aim: None }))
    }

    /// `argmin ||u||_inf` over the envelope, optionally also steering
    /// `A x + B u` into the tightened `aim`.
    fn min_input(&self, x: &DVector<f64>, aim: Option<&HPolytope>) -> Result<Option<DVector<f64>>, ControlError> {
        let d = &self.local;
        let (n, m) = (d.a.nrows(), d.b.ncols());
        let env_u = d.env_a.columns(n, m);
        let env_rhs = &d.env_b - d.env_a.columns(0, n) * x;
        let (aim_a, aim_b) = match aim {
            Some(p) => (&p.a * &d.b, &p.b - &p.a * (&d.a * x)),
            None => (DMatrix::zeros(0, m), DVector::zeros(0)),
        };
        let rows = env_u.nrows() + aim_a.nrows() + 2 * m;
        let mut a = DMatrix::zeros(rows, m + 1);
        let mut b = DVector::zeros(rows);
        a.view_mut((0, 0), (env_u.nrows(), m)).copy_from(&env_u);
        b.rows_mut(0, env_rhs.len()).copy_from(&env_rhs);
        let r0 = env_u.nrows();
        a.view_mut((r0, 0), aim_a.shape()).copy_from(&aim_a);
        b.rows_mut(r0, aim_b.len()).copy_from(&aim_b);
        let r1 = r0 + aim_a.nrows();
        for k in 0..m {
            a[(r1 + 2 * k, k)] = 1.0;
            a[(r1 + 2 * k, m)] = -1.0;
            a[(r1 + 2 * k + 1, k)] = -1.0;
            a[(r1 + 2 * k + 1, m)] = -1.0;
        }
        let mut c = DVector::zeros(m + 1);
        c[m] = 1.0;
        let r = lp_solve(&c, &a, &b, Sense::Min)?;
        Ok(match r.status {
            LpStatus::Optimal => Some(r.x_star.unwrap().rows(0, m).into_owned()),
            _ => None,
        })
    }
}

/// `{x in X_i : lo <= x_k <= hi}`.
pub fn strip(cs: &ComposedSystem, sol: &SynthesisSolution, i: usize, k: usize, lo: f64, hi: f64) -> Result<HPolytope, ControlError> {
    check_index(cs, i)?;
    let n = cs.subsystem(i).n();
    if k >= n || !(lo <= hi) {
        return Err(ControlError::Invalid(format!("bad strip on coordinate {k}: [{lo}, {hi}]")));
    }
    let mut a = DMatrix::zeros(2, n);
    a[(0, k)] = 1.0;
    a[(1, k)] = -1.0;
    let s = HPolytope { a, b: DVector::from_vec(vec![hi, -lo]) };
    Ok(s.intersect(&sol.gen_sets[i].to_hpolytope())?.reduced()?)
}
