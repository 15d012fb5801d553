//! JSON artifacts exchanged between pipeline stages. Matrices are nested row
//! arrays; floats are written in shortest round-trip form, so reading a file
//! back reproduces every value bit for bit.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::envelope::InputEnvelope;
use crate::error::SynthesisError;
use crate::linalg::{from_rows, to_rows};
use crate::lmi::SynthesisSolution;
use crate::model::ComposedSystem;
use crate::polytope::HPolytope;
use crate::refine::RoundLog;
use crate::sim::{EventKind, Trajectory};
use crate::synth::ReachLadder;
use crate::verify::Certificate;

type Rows = Vec<Vec<f64>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolytopeDoc {
    #[serde(rename = "A")]
    pub a: Rows,
    pub b: Vec<f64>,
}

impl From<&HPolytope> for PolytopeDoc {
    fn from(p: &HPolytope) -> Self {
        Self { a: to_rows(&p.a), b: p.b.iter().cloned().collect() }
    }
}

impl PolytopeDoc {
    pub fn to_polytope(&self, dim: usize) -> HPolytope {
        if self.a.is_empty() {
            return HPolytope::universe(dim);
        }
        HPolytope { a: from_rows(&self.a), b: DVector::from_vec(self.b.clone()) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionDoc {
    /// `H_x` blocks, one per subsystem.
    #[serde(rename = "H_x")]
    pub h_x: Vec<Rows>,
    /// Full feedback matrix.
    #[serde(rename = "K")]
    pub k: Rows,
    #[serde(rename = "K_hat")]
    pub k_hat: Rows,
    pub lambda: Vec<f64>,
    /// Generator directions, one block per subsystem.
    #[serde(rename = "Z")]
    pub z: Vec<Rows>,
    /// Strictness margin the LMIs were solved with.
    pub eps: Option<f64>,
    /// Full decision vector, multipliers included (empty for hand-built sets).
    pub y: Vec<f64>,
    pub score: f64,
}

impl SolutionDoc {
    pub fn new(cs: &ComposedSystem, sol: &SynthesisSolution, eps: Option<f64>) -> Self {
        Self {
            h_x: (0..cs.d()).map(|i| to_rows(&sol.h_block(cs, i))).collect(),
            k: to_rows(&sol.k),
            k_hat: to_rows(&sol.k_hat),
            lambda: sol.lambda.iter().cloned().collect(),
            z: sol.gen_sets.iter().map(|g| to_rows(&g.z)).collect(),
            eps,
            y: sol.y.iter().cloned().collect(),
            score: sol.score(cs),
        }
    }

    /// Rebuilds the solution from `H_x` and `K` as stored; the decision
    /// vector is attached untouched.
    pub fn to_solution(&self, cs: &ComposedSystem) -> Result<SynthesisSolution, SynthesisError> {
        if self.h_x.len() != cs.d() || self.z.len() != cs.d() {
            return Err(SynthesisError::Mismatch(format!("{} set blocks for {} subsystems", self.h_x.len(), cs.d())));
        }
        let mut h = DMatrix::zeros(cs.n, cs.n);
        for (i, r) in cs.state_blocks.iter().enumerate() {
            let hi = from_rows(&self.h_x[i]);
            if hi.shape() != (r.len(), r.len()) {
                return Err(SynthesisError::Mismatch(format!("H_x block {} has shape {:?}", i + 1, hi.shape())));
            }
            if from_rows(&self.z[i]) != cs.subsystem(i).z {
                return Err(SynthesisError::Mismatch(format!("generators of subsystem {} differ from the model", i + 1)));
            }
            h.view_mut((r.start, r.start), hi.shape()).copy_from(&hi);
        }
        let mut sol = SynthesisSolution::from_gains(cs, h, from_rows(&self.k))?;
        if self.lambda.len() == cs.d() {
            sol.lambda = DVector::from_vec(self.lambda.clone());
        }
        sol.y = DVector::from_vec(self.y.clone());
        Ok(sol)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateDoc {
    pub valid: bool,
    pub tolerance: f64,
    pub worst_facet: Option<usize>,
    pub invariance_margins: Vec<f64>,
    pub state_margins: Vec<f64>,
    pub input_margins: Vec<f64>,
}

impl From<&Certificate> for CertificateDoc {
    fn from(c: &Certificate) -> Self {
        Self {
            valid: c.valid,
            tolerance: c.tolerance,
            worst_facet: c.worst_facet().map(|(j, _)| j + 1),
            invariance_margins: c.invariance_margins.iter().cloned().collect(),
            state_margins: c.state_margins.iter().cloned().collect(),
            input_margins: c.input_margins.iter().cloned().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum EventDoc {
    LeftSet { step: usize, subsystem: usize, residual: f64 },
    InputViolation { step: usize, subsystem: usize, residual: f64 },
    GoalVisit { step: usize, subsystem: usize, goal: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryDoc {
    pub states: Rows,
    pub inputs: Rows,
    pub disturbances: Rows,
    /// 1-based subsystem and goal indices.
    pub events: Vec<EventDoc>,
}

impl From<&Trajectory> for TrajectoryDoc {
    fn from(t: &Trajectory) -> Self {
        let rows = |v: &[DVector<f64>]| v.iter().map(|x| x.iter().cloned().collect()).collect();
        let events = t
            .violations
            .iter()
            .chain(t.visits.iter())
            .map(|(step, e)| match *e {
                EventKind::LeftSet { subsystem, residual } => EventDoc::LeftSet { step: *step, subsystem: subsystem + 1, residual },
                EventKind::InputViolation { subsystem, residual } => {
                    EventDoc::InputViolation { step: *step, subsystem: subsystem + 1, residual }
                }
                EventKind::GoalVisit { subsystem, goal } => EventDoc::GoalVisit { step: *step, subsystem: subsystem + 1, goal: goal + 1 },
            })
            .collect();
        Self { states: rows(&t.states), inputs: rows(&t.inputs), disturbances: rows(&t.disturbances), events }
    }
}

impl From<&TrajectoryDoc> for Trajectory {
    fn from(d: &TrajectoryDoc) -> Self {
        let vecs = |r: &Rows| r.iter().map(|x| DVector::from_vec(x.clone())).collect();
        let mut t = Trajectory {
            states: vecs(&d.states),
            inputs: vecs(&d.inputs),
            disturbances: vecs(&d.disturbances),
            violations: Vec::new(),
            visits: Vec::new(),
        };
        for e in &d.events {
            match *e {
                EventDoc::LeftSet { step, subsystem, residual } => {
                    t.violations.push((step, EventKind::LeftSet { subsystem: subsystem - 1, residual }))
                }
                EventDoc::InputViolation { step, subsystem, residual } => {
                    t.violations.push((step, EventKind::InputViolation { subsystem: subsystem - 1, residual }))
                }
                EventDoc::GoalVisit { step, subsystem, goal } => {
                    t.visits.push((step, EventKind::GoalVisit { subsystem: subsystem - 1, goal: goal - 1 }))
                }
            }
        }
        t
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeDoc {
    pub subsystem: usize,
    pub point: Vec<f64>,
    pub inputs: PolytopeDoc,
    pub coupling_upper: Vec<f64>,
    pub coupling_lower: Vec<f64>,
}

impl From<&InputEnvelope> for EnvelopeDoc {
    fn from(e: &InputEnvelope) -> Self {
        Self {
            subsystem: e.subsystem + 1,
            point: e.point.iter().cloned().collect(),
            inputs: (&e.poly).into(),
            coupling_upper: e.coupling_upper.iter().cloned().collect(),
            coupling_lower: e.coupling_lower.iter().cloned().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LadderDoc {
    pub subsystem: usize,
    pub target: PolytopeDoc,
    pub levels: Vec<PolytopeDoc>,
    pub converged: bool,
    pub nested: bool,
}

impl From<&ReachLadder> for LadderDoc {
    fn from(l: &ReachLadder) -> Self {
        Self {
            subsystem: l.subsystem + 1,
            target: (&l.target).into(),
            levels: l.levels.iter().map(PolytopeDoc::from).collect(),
            converged: l.converged,
            nested: l.nested,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundDoc {
    pub round: usize,
    pub attempt: usize,
    /// `None` stands for an unbounded trust region.
    pub cap: Option<f64>,
    pub score: Option<f64>,
    pub min_margin: Option<f64>,
    pub accepted: bool,
    pub reason: String,
}

impl From<&RoundLog> for RoundDoc {
    fn from(r: &RoundLog) -> Self {
        let finite = |v: f64| v.is_finite().then_some(v);
        Self {
            round: r.round,
            attempt: r.attempt,
            cap: finite(r.cap),
            score: finite(r.score),
            min_margin: finite(r.min_margin),
            accepted: r.accepted,
            reason: r.reason.clone(),
        }
    }
}

/// Every file written by the command line tool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Artifact {
    Solution {
        status: String,
        solution: Option<SolutionDoc>,
        certificate: Option<CertificateDoc>,
    },
    Refinement {
        solutions: Vec<SolutionDoc>,
        rounds: Vec<RoundDoc>,
    },
    Envelope(EnvelopeDoc),
    Reach(LadderDoc),
    Trajectory(TrajectoryDoc),
}

impl Artifact {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("artifacts contain only finite numbers")
    }

    pub fn from_json(text: &str) -> Result<Self, SynthesisError> {
        serde_json::from_str(text).map_err(|e| SynthesisError::Malformed(format!("artifact: {e}")))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, SynthesisError> {
        let p = path.as_ref();
        let text = std::fs::read_to_string(p).map_err(|e| SynthesisError::Malformed(format!("{}: {e}", p.display())))?;
        Self::from_json(&text)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        std::fs::write(path, self.to_json())
    }

    /// The solution carried by a `Solution` artifact, or the last accepted
    /// iterate of a `Refinement`.
    pub fn solution(&self) -> Option<&SolutionDoc> {
        match self {
            Artifact::Solution { solution, .. } => solution.as_ref(),
            Artifact::Refinement { solutions, .. } => solutions.last(),
            _ => None,
        }
    }
}
