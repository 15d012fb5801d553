use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use serde::Deserialize;

use sepinv::envelope::admissible_inputs;
use sepinv::io::{Artifact, CertificateDoc, LadderDoc, PolytopeDoc, SolutionDoc};
use sepinv::lmi::{build_problem, default_eps, extent_objective, recover, w_trace_objective, SynthesisSolution};
use sepinv::model::{compose, load_model_file, ComposedSystem};
use sepinv::polytope::{enumerate_vertices, vertices_csv, HPolytope};
use sepinv::refine::{refine, RefineOptions};
use sepinv::sdp::{solve, Backend, SolveOptions, SolveStatus};
use sepinv::sim::{run, DistMode, GainPolicy, LocalRecurrence, Policy, Trajectory};
use sepinv::synth::{reach_ladder, strip, RecurrenceController, DEFAULT_MAX_LEVELS};
use sepinv::verify::{certify, report, sample_check};

/// Separable robust invariant sets for coupled linear subsystems.
#[derive(Parser)]
#[command(name = "sepinv", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the LMIs, recover sets and gains, certify, write a solution artifact.
    Synth {
        model: PathBuf,
        #[arg(long)]
        eps: Option<f64>,
        /// Barrier solver iteration limit.
        #[arg(long, default_value_t = 400)]
        iters: usize,
        /// `none`, `trace`, or `extent:a,b,...` (one direction for every subsystem).
        #[arg(long, default_value = "none")]
        objective: String,
        /// Slack kept in every LMI while the objective is pushed.
        #[arg(long, default_value_t = 0.0)]
        objective_margin: f64,
        #[arg(long, default_value_t = 1800)]
        time_limit: u64,
        /// `internal`, or a command that is given the LMI triplet file as its
        /// last argument and prints the decision vector.
        #[arg(long, env = "SEPINV_BACKEND", default_value = "internal")]
        backend: String,
        #[arg(long, short, default_value = "solution.json")]
        out: PathBuf,
    },
    /// Certify a stored solution against a model.
    Verify {
        model: PathBuf,
        solution: PathBuf,
        /// Additional sampled successor checks.
        #[arg(long, default_value_t = 0)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Enlarge a certified solution over a number of gated rounds.
    Refine {
        model: PathBuf,
        solution: PathBuf,
        #[arg(long, default_value_t = 5)]
        iters: usize,
        #[arg(long, default_value_t = 0.5)]
        step_cap: f64,
        #[arg(long, short, default_value = "refined.json")]
        out: PathBuf,
    },
    /// Polytope of admissible inputs of subsystem `i` at a point.
    Envelope {
        model: PathBuf,
        solution: PathBuf,
        #[arg(short, long)]
        i: usize,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        point: Vec<f64>,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Reach ladder of subsystem `i` towards a target strip `lo,hi` on one coordinate.
    Reach {
        model: PathBuf,
        solution: PathBuf,
        #[arg(short, long)]
        i: usize,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        target: Vec<f64>,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        goal: Vec<f64>,
        #[arg(long, default_value_t = 1)]
        coord: usize,
        #[arg(long, default_value_t = DEFAULT_MAX_LEVELS)]
        max_levels: usize,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Closed-loop simulation.
    Simulate {
        model: PathBuf,
        solution: PathBuf,
        #[arg(long, value_enum, default_value_t = PolicyKind::Gain)]
        policy: PolicyKind,
        /// Goal strips per subsystem, required for `--policy recurrence`.
        #[arg(long)]
        tasks: Option<PathBuf>,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long, value_enum, default_value_t = DistKind::Vertices)]
        dist: DistKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        x0: Option<Vec<f64>>,
        #[arg(long, short, default_value = "trajectory.json")]
        out: PathBuf,
    },
    /// Convert an artifact to CSV for plotting.
    ExportPlot {
        artifact: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyKind {
    Gain,
    Recurrence,
}

#[derive(Clone, Copy, ValueEnum)]
enum DistKind {
    Zero,
    Vertices,
    Random,
}

/// Goal strips `[lo, hi]` on one coordinate (1-based), two per subsystem
/// that runs a recurrence controller; an empty list keeps the linear gain.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Tasks {
    coordinate: usize,
    goals: Vec<Vec<[f64; 2]>>,
    #[serde(default)]
    max_levels: Option<usize>,
}

const EXIT_NEGATIVE: u8 = 2;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match execute(cli.cmd) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_NEGATIVE),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn system(path: &Path) -> Result<ComposedSystem> {
    let model = load_model_file(path).with_context(|| format!("reading model {}", path.display()))?;
    Ok(compose(&model))
}

fn load_solution(cs: &ComposedSystem, path: &Path) -> Result<(SynthesisSolution, Option<f64>)> {
    let art = Artifact::read(path)?;
    let doc = art.solution().ok_or_else(|| anyhow!("{} holds no solution", path.display()))?;
    Ok((doc.to_solution(cs)?, doc.eps))
}

fn subsystem(cs: &ComposedSystem, i: usize) -> Result<usize> {
    if i == 0 || i > cs.d() {
        bail!("subsystem index {i} out of range 1..={}", cs.d());
    }
    Ok(i - 1)
}

fn interval(v: &[f64], what: &str) -> Result<(f64, f64)> {
    match v {
        [lo, hi] if lo <= hi => Ok((*lo, *hi)),
        _ => bail!("--{what} expects lo,hi"),
    }
}

fn objective(text: &str, cs: &ComposedSystem, prob: &sepinv::lmi::LmiProblem) -> Result<Option<DVector<f64>>> {
    match text {
        "none" => Ok(None),
        "trace" => Ok(Some(w_trace_objective(&prob.var_map))),
        s if s.starts_with("extent:") => {
            let d: Vec<f64> = s["extent:".len()..].split(',').map(str::parse).collect::<Result<_, _>>().context("extent direction")?;
            let dirs = (0..cs.d())
                .map(|i| {
                    if d.len() != cs.subsystem(i).n() {
                        bail!("extent direction has {} entries, subsystem {} has {} states", d.len(), i + 1, cs.subsystem(i).n());
                    }
                    Ok(DVector::from_vec(d.clone()))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Some(extent_objective(cs, &prob.var_map, &dirs)?))
        }
        other => bail!("unknown objective `{other}`"),
    }
}

fn execute(cmd: Command) -> Result<bool> {
    match cmd {
        Command::Synth { model, eps, iters, objective: obj, objective_margin, time_limit, backend, out } => {
            let cs = system(&model)?;
            let eps = eps.unwrap_or_else(|| default_eps(&cs));
            let prob = build_problem(&cs, eps)?;
            let opts = SolveOptions {
                max_iter: iters,
                time_limit: Duration::from_secs(time_limit),
                objective: objective(&obj, &cs, &prob)?,
                objective_margin,
                backend: match backend.as_str() {
                    "internal" => Backend::Internal,
                    cmd => Backend::External(cmd.to_string()),
                },
                ..Default::default()
            };
            let outcome = solve(&prob, &opts)?;
            println!("status {} iterations {} margin {:.16e}", outcome.status.as_str(), outcome.iterations, outcome.min_margin);
            let (solution, certificate, ok) = match (outcome.status, &outcome.y) {
                (SolveStatus::Feasible, Some(y)) => {
                    let sol = recover(&cs, &prob, y)?;
                    let cert = certify(&cs, &sol)?;
                    print!("{}", report(&cs, &cert));
                    println!("score {:.16e}", sol.score(&cs));
                    (Some(SolutionDoc::new(&cs, &sol, Some(eps))), Some(CertificateDoc::from(&cert)), cert.valid)
                }
                _ => {
                    println!("{}", outcome.message);
                    (None, None, false)
                }
            };
            Artifact::Solution { status: outcome.status.as_str().into(), solution, certificate }.write(&out)?;
            Ok(ok)
        }
        Command::Verify { model, solution, samples, seed } => {
            let cs = system(&model)?;
            let (sol, _) = load_solution(&cs, &solution)?;
            let cert = certify(&cs, &sol)?;
            print!("{}", report(&cs, &cert));
            let mut ok = cert.valid;
            if samples > 0 {
                let rep = sample_check(&cs, &sol, samples, seed)?;
                println!("sampled {} violations {} worst {:.16e}", rep.samples, rep.violations, rep.worst_violation);
                ok &= rep.violations == 0;
            }
            Ok(ok)
        }
        Command::Refine { model, solution, iters, step_cap, out } => {
            let cs = system(&model)?;
            let (sol, eps) = load_solution(&cs, &solution)?;
            if !certify(&cs, &sol)?.valid {
                println!("starting solution is not valid");
                return Ok(false);
            }
            let res = refine(&cs, &sol, RefineOptions { iters, step_cap, eps, ..Default::default() })?;
            print!("{}", res.to_csv());
            for (k, s) in res.scores(&cs).iter().enumerate() {
                println!("iterate {k} score {s:.16e}");
            }
            Artifact::Refinement {
                solutions: res.solutions.iter().map(|s| SolutionDoc::new(&cs, s, eps)).collect(),
                rounds: res.log.iter().map(Into::into).collect(),
            }
            .write(&out)?;
            Ok(true)
        }
        Command::Envelope { model, solution, i, point, out } => {
            let cs = system(&model)?;
            let (sol, _) = load_solution(&cs, &solution)?;
            let i = subsystem(&cs, i)?;
            let env = admissible_inputs(&cs, &sol, i, &DVector::from_vec(point))?;
            let names: Vec<String> = (1..=env.poly.dim()).map(|k| format!("u{k}")).collect();
            match enumerate_vertices(&env.poly) {
                Ok(v) => print!("{}", vertices_csv(&sort_ccw(v), &names.iter().map(String::as_str).collect::<Vec<_>>())),
                Err(_) => println!("{} inequalities", env.poly.rows()),
            }
            if let Some(p) = out {
                Artifact::Envelope((&env).into()).write(p)?;
            }
            Ok(true)
        }
        Command::Reach { model, solution, i, target, goal, coord, max_levels, out } => {
            let cs = system(&model)?;
            let (sol, _) = load_solution(&cs, &solution)?;
            let i = subsystem(&cs, i)?;
            let k = coord.checked_sub(1).ok_or_else(|| anyhow!("--coord is 1-based"))?;
            let (tl, th) = interval(&target, "target")?;
            let (gl, gh) = interval(&goal, "goal")?;
            let t = strip(&cs, &sol, i, k, tl, th)?;
            let g = strip(&cs, &sol, i, k, gl, gh)?;
            let ladder = reach_ladder(&cs, &sol, i, &t, &g, max_levels)?;
            println!("levels {} converged {} nested {}", ladder.levels.len(), ladder.converged, ladder.nested);
            if let Some(p) = out {
                Artifact::Reach((&ladder).into()).write(p)?;
            }
            Ok(ladder.converged)
        }
        Command::Simulate { model, solution, policy, tasks, steps, dist, seed, x0, out } => {
            let cs = system(&model)?;
            let (sol, _) = load_solution(&cs, &solution)?;
            let x0 = match x0 {
                Some(v) if v.len() == cs.n => DVector::from_vec(v),
                Some(v) => bail!("--x0 has {} entries, the model has {} states", v.len(), cs.n),
                None => DVector::zeros(cs.n),
            };
            let (mut policies, goals) = match policy {
                PolicyKind::Gain => (GainPolicy::all(&cs, &sol), Vec::new()),
                PolicyKind::Recurrence => {
                    let path = tasks.ok_or_else(|| anyhow!("--policy recurrence needs --tasks"))?;
                    recurrence_policies(&cs, &sol, &path)?
                }
            };
            let mode = match dist {
                DistKind::Zero => DistMode::Zero,
                DistKind::Vertices => DistMode::Vertices,
                DistKind::Random => DistMode::Random(seed),
            };
            let traj = run(&cs, &sol, &mut policies, &x0, steps, mode, &goals)?;
            println!("steps {} violations {}", steps, traj.violations.len());
            for (i, gs) in goals.iter().enumerate() {
                for g in 0..gs.len() {
                    println!("subsystem {} goal {} visits {}", i + 1, g + 1, traj.visit_count(i, g));
                }
            }
            Artifact::Trajectory((&traj).into()).write(&out)?;
            Ok(traj.violations.is_empty())
        }
        Command::ExportPlot { artifact, out } => {
            let art = Artifact::read(&artifact)?;
            std::fs::write(&out, export_csv(&art)?).with_context(|| format!("writing {}", out.display()))?;
            Ok(true)
        }
    }
}

fn recurrence_policies(cs: &ComposedSystem, sol: &SynthesisSolution, path: &Path) -> Result<(Vec<Box<dyn Policy>>, Vec<Vec<HPolytope>>)> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let tasks: Tasks = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    if tasks.goals.len() != cs.d() {
        bail!("tasks list goals for {} subsystems, the model has {}", tasks.goals.len(), cs.d());
    }
    let k = tasks.coordinate.checked_sub(1).ok_or_else(|| anyhow!("coordinate is 1-based"))?;
    let mut policies: Vec<Box<dyn Policy>> = Vec::new();
    let mut goals = Vec::new();
    for (i, g) in tasks.goals.iter().enumerate() {
        match g.as_slice() {
            [] => {
                policies.push(Box::new(GainPolicy::new(cs, sol, i)));
                goals.push(Vec::new());
            }
            [a, b] => {
                let ga = strip(cs, sol, i, k, a[0], a[1])?;
                let gb = strip(cs, sol, i, k, b[0], b[1])?;
                let ctrl = RecurrenceController::new(cs, sol, i, ga.clone(), gb.clone(), tasks.max_levels.unwrap_or(DEFAULT_MAX_LEVELS))?;
                if !ctrl.converged() {
                    bail!("reach ladders of subsystem {} do not cover the opposite goal", i + 1);
                }
                policies.push(Box::new(LocalRecurrence::new(cs, ctrl)));
                goals.push(vec![ga, gb]);
            }
            _ => bail!("subsystem {} needs zero or two goals", i + 1),
        }
    }
    Ok((policies, goals))
}

/// Orders planar vertices counter-clockwise so they plot as a closed outline.
fn sort_ccw(mut v: Vec<DVector<f64>>) -> Vec<DVector<f64>> {
    if v.first().map_or(true, |x| x.len() != 2) {
        return v;
    }
    let c = v.iter().fold(DVector::zeros(2), |a, x| a + x) / v.len() as f64;
    v.sort_by(|a, b| {
        let ta = (a[1] - c[1]).atan2(a[0] - c[0]);
        let tb = (b[1] - c[1]).atan2(b[0] - c[0]);
        ta.total_cmp(&tb)
    });
    v
}

fn polytope_rows(out: &mut String, tag: &str, p: &PolytopeDoc, dim: usize) -> Result<()> {
    let verts = sort_ccw(enumerate_vertices(&p.to_polytope(dim))?);
    for v in verts {
        let coords: Vec<String> = v.iter().map(|x| format!("{x:.16e}")).collect();
        out.push_str(&format!("{tag},{}\n", coords.join(",")));
    }
    Ok(())
}

fn export_csv(art: &Artifact) -> Result<String> {
    match art {
        Artifact::Solution { .. } | Artifact::Refinement { .. } => {
            let doc = art.solution().ok_or_else(|| anyhow!("artifact holds no solution"))?;
            let mut s = String::from("subsystem,x1,x2\n");
            for (i, (h, z)) in doc.h_x.iter().zip(&doc.z).enumerate() {
                let h = sepinv::linalg::from_rows(h);
                let z = sepinv::linalg::from_rows(z);
                let set = sepinv::polytope::GenSet::new(z, h)?.to_hpolytope();
                if set.dim() != 2 {
                    bail!("set of subsystem {} is {}-dimensional; only planar sets are exported", i + 1, set.dim());
                }
                polytope_rows(&mut s, &(i + 1).to_string(), &PolytopeDoc::from(&set), 2)?;
            }
            Ok(s)
        }
        Artifact::Envelope(e) => {
            let dim = e.inputs.a.first().map_or(0, Vec::len);
            let names: Vec<String> = (1..=dim).map(|k| format!("u{k}")).collect();
            let v = sort_ccw(enumerate_vertices(&e.inputs.to_polytope(dim))?);
            Ok(vertices_csv(&v, &names.iter().map(String::as_str).collect::<Vec<_>>()))
        }
        Artifact::Reach(l) => reach_csv(l),
        Artifact::Trajectory(t) => Ok(Trajectory::from(t).to_csv()),
    }
}

fn reach_csv(l: &LadderDoc) -> Result<String> {
    let dim = l.target.a.first().map_or(0, Vec::len);
    let names: Vec<String> = (1..=dim).map(|k| format!("x{k}")).collect();
    let mut s = format!("level,{}\n", names.join(","));
    for (r, level) in l.levels.iter().enumerate() {
        polytope_rows(&mut s, &r.to_string(), level, dim)?;
    }
    Ok(s)
}
