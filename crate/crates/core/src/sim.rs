//! Closed-loop simulation of the composed system with per-subsystem policies
//! and a monitor for set exits, input violations and goal visits.

use std::fmt::Write as _;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::ControlError;
use crate::lmi::SynthesisSolution;
use crate::model::ComposedSystem;
use crate::polytope::HPolytope;
use crate::synth::RecurrenceController;

const MONITOR_TOL: f64 = 1e-9;

/// Local feedback for one subsystem. Receives the full state so that gains
/// with neighbour blocks can be applied.
pub trait Policy {
    fn input(&mut self, x: &DVector<f64>) -> Result<DVector<f64>, ControlError>;
}

/// `u_i = sum_j K_ij x_j`.
pub struct GainPolicy {
    k_row: nalgebra::DMatrix<f64>,
}

impl GainPolicy {
    pub fn new(cs: &ComposedSystem, sol: &SynthesisSolution, i: usize) -> Self {
        let r = &cs.input_blocks[i];
        Self { k_row: sol.k.rows(r.start, r.len()).into_owned() }
    }

    pub fn all(cs: &ComposedSystem, sol: &SynthesisSolution) -> Vec<Box<dyn Policy>> {
        (0..cs.d()).map(|i| Box::new(Self::new(cs, sol, i)) as Box<dyn Policy>).collect()
    }
}

impl Policy for GainPolicy {
    fn input(&mut self, x: &DVector<f64>) -> Result<DVector<f64>, ControlError> {
        Ok(&self.k_row * x)
    }
}

/// Recurrence controller acting on its own subsystem's slice of the state.
pub struct LocalRecurrence {
    pub ctrl: RecurrenceController,
    range: std::ops::Range<usize>,
}

impl LocalRecurrence {
    pub fn new(cs: &ComposedSystem, ctrl: RecurrenceController) -> Self {
        let range = cs.state_blocks[ctrl.subsystem].clone();
        Self { ctrl, range }
    }
}

impl Policy for LocalRecurrence {
    fn input(&mut self, x: &DVector<f64>) -> Result<DVector<f64>, ControlError> {
        let xi = x.rows(self.range.start, self.range.len()).into_owned();
        Ok(self.ctrl.policy(&xi)?.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DistMode {
    Zero,
    /// Cycles through the vertices of each disturbance set.
    Vertices,
    /// Uniform over each disturbance set.
    Random(u64),
}

#[derive(Debug, Clone, PartialEq)]
pub enum EventKind {
    LeftSet { subsystem: usize, residual: f64 },
    InputViolation { subsystem: usize, residual: f64 },
    GoalVisit { subsystem: usize, goal: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
    pub disturbances: Vec<DVector<f64>>,
    /// Set exits and input violations, with the step at which they occur.
    pub violations: Vec<(usize, EventKind)>,
    pub visits: Vec<(usize, EventKind)>,
}

impl Trajectory {
    pub fn visit_count(&self, subsystem: usize, goal: usize) -> usize {
        self.visits
            .iter()
            .filter(|(_, e)| matches!(e, EventKind::GoalVisit { subsystem: s, goal: g } if *s == subsystem && *g == goal))
            .count()
    }

    /// `step, x1.., u1.., d1.., events`.
    pub fn to_csv(&self) -> String {
        let n = self.states.first().map_or(0, |x| x.len());
        let m = self.inputs.first().map_or(0, |u| u.len());
        let p = self.disturbances.first().map_or(0, |d| d.len());
        let mut s = String::from("step");
        for k in 0..n {
            let _ = write!(s, ",x{}", k + 1);
        }
        for k in 0..m {
            let _ = write!(s, ",u{}", k + 1);
        }
        for k in 0..p {
            let _ = write!(s, ",d{}", k + 1);
        }
        s.push_str(",events\n");
        for (t, x) in self.states.iter().enumerate() {
            let _ = write!(s, "{t}");
            for v in x.iter() {
                let _ = write!(s, ",{v:.16e}");
            }
            for k in 0..m {
                match self.inputs.get(t) {
                    Some(u) => {
                        let _ = write!(s, ",{:.16e}", u[k]);
                    }
                    None => s.push(','),
                }
            }
            for k in 0..p {
                match self.disturbances.get(t) {
                    Some(d) => {
                        let _ = write!(s, ",{:.16e}", d[k]);
                    }
                    None => s.push(','),
                }
            }
            let events: Vec<String> = self
                .violations
                .iter()
                .chain(self.visits.iter())
                .filter(|(st, _)| *st == t)
                .map(|(_, e)| match e {
                    EventKind::LeftSet { subsystem, .. } => format!("left_set_{}", subsystem + 1),
                    EventKind::InputViolation { subsystem, .. } => format!("input_{}", subsystem + 1),
                    EventKind::GoalVisit { subsystem, goal } => format!("goal_{}_{}", subsystem + 1, goal + 1),
                })
                .collect();
            let _ = writeln!(s, ",{}", events.join(" "));
        }
        s
    }
}

fn disturbance(cs: &ComposedSystem, mode: DistMode, step: usize, rng: &mut ChaCha8Rng) -> Result<DVector<f64>, ControlError> {
    let mut d = DVector::zeros(cs.p);
    if mode == DistMode::Zero {
        return Ok(d);
    }
    for (i, r) in cs.dist_blocks.iter().enumerate() {
        let p = r.len();
        if p == 0 {
            continue;
        }
        let hd = &cs.subsystem(i).h_d;
        let inv = hd.clone().try_inverse().ok_or_else(|| ControlError::Invalid("singular H_d".into()))?;
        let s = match mode {
            DistMode::Vertices => {
                // Gray-code walk so consecutive steps flip one sign
                let g = step ^ (step >> 1);
                DVector::from_fn(p, |k, _| if (g >> (k % usize::BITS as usize)) & 1 == 1 { 1.0 } else { -1.0 })
            }
            DistMode::Random(_) => DVector::from_fn(p, |_, _| rng.gen_range(-1.0..=1.0)),
            DistMode::Zero => unreachable!(),
        };
        d.rows_mut(r.start, p).copy_from(&(inv * s));
    }
    Ok(d)
}

fn monitor(
    cs: &ComposedSystem,
    sol: &SynthesisSolution,
    goals: &[Vec<HPolytope>],
    step: usize,
    x: &DVector<f64>,
    traj: &mut Trajectory,
) {
    for (i, r) in cs.state_blocks.iter().enumerate() {
        let xi = x.rows(r.start, r.len()).into_owned();
        let residual = (&sol.gen_sets[i].z * (&sol.gen_sets[i].h * &xi)).amax() - 1.0;
        if residual > MONITOR_TOL {
            traj.violations.push((step, EventKind::LeftSet { subsystem: i, residual }));
        }
        if let Some(gs) = goals.get(i) {
            for (g, set) in gs.iter().enumerate() {
                if set.contains_point(&xi, MONITOR_TOL) {
                    traj.visits.push((step, EventKind::GoalVisit { subsystem: i, goal: g }));
                }
            }
        }
    }
}

/// Simulates `x+ = A x + B u + E d`. `goals[i]` lists the goal sets of
/// subsystem `i` whose visits are recorded.
pub fn run(
    cs: &ComposedSystem,
    sol: &SynthesisSolution,
    policies: &mut [Box<dyn Policy>],
    x0: &DVector<f64>,
    steps: usize,
    dist_mode: DistMode,
    goals: &[Vec<HPolytope>],
) -> Result<Trajectory, ControlError> {
    if policies.len() != cs.d() || x0.len() != cs.n {
        return Err(ControlError::Invalid(format!(
            "{} policies / state of length {} for {} subsystems of total dimension {}",
            policies.len(),
            x0.len(),
            cs.d(),
            cs.n
        )));
    }
    for (i, r) in cs.state_blocks.iter().enumerate() {
        let xi = x0.rows(r.start, r.len()).into_owned();
        let residual = (&sol.gen_sets[i].z * (&sol.gen_sets[i].h * &xi)).amax() - 1.0;
        if residual > MONITOR_TOL {
            return Err(ControlError::OutsideSet { subsystem: i + 1, residual });
        }
    }
    let seed = match dist_mode {
        DistMode::Random(s) => s,
        _ => 0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut traj = Trajectory {
        states: vec![x0.clone()],
        inputs: Vec::new(),
        disturbances: Vec::new(),
        violations: Vec::new(),
        visits: Vec::new(),
    };
    monitor(cs, sol, goals, 0, x0, &mut traj);
    let mut x = x0.clone();
    for t in 0..steps {
        let mut u = DVector::zeros(cs.m);
        for (i, pol) in policies.iter_mut().enumerate() {
            let r = &cs.input_blocks[i];
            let ui = pol.input(&x)?;
            if ui.len() != r.len() {
                return Err(ControlError::Invalid(format!("policy {} returned {} inputs, expected {}", i + 1, ui.len(), r.len())));
            }
            u.rows_mut(r.start, r.len()).copy_from(&ui);
            let s = cs.subsystem(i);
            let residual = (&s.h_u * &ui - &s.h_u_rhs).max();
            if residual > MONITOR_TOL {
                traj.violations.push((t, EventKind::InputViolation { subsystem: i, residual }));
            }
        }
        let d = disturbance(cs, dist_mode, t, &mut rng)?;
        x = &cs.a * &x + &cs.b * &u + &cs.e * &d;
        traj.inputs.push(u);
        traj.disturbances.push(d);
        traj.states.push(x.clone());
        monitor(cs, sol, goals, t + 1, &x, &mut traj);
    }
    Ok(traj)
}
