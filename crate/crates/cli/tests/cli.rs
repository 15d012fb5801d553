use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn models() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../models")
}

fn sepinv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sepinv")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn model(name: &str) -> String {
    models().join(name).to_string_lossy().into_owned()
}

fn path(dir: &tempfile::TempDir, name: &str) -> String {
    dir.path().join(name).to_string_lossy().into_owned()
}

fn read_json(p: &str) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn scalar_pipeline_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let m = model("scalar.json");
    let sol = path(&dir, "sol.json");
    let o = sepinv(&["synth", &m, "-o", &sol]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(stdout(&o).contains("valid true"));
    let art = read_json(&sol);
    assert_eq!(art["kind"], "solution");
    assert_eq!(art["status"], "feasible");

    let o = sepinv(&["verify", &m, &sol, "--samples", "200"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));

    let refined = path(&dir, "refined.json");
    let o = sepinv(&["refine", &m, &sol, "--iters", "2", "-o", &refined]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert_eq!(read_json(&refined)["kind"], "refinement");
    // a refinement artifact is accepted wherever a solution is
    assert_eq!(code(&sepinv(&["verify", &m, &refined])), 0);

    let env = path(&dir, "env.json");
    let o = sepinv(&["envelope", &m, &sol, "-i", "1", "--point", "0.0", "-o", &env]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(stdout(&o).starts_with("u1\n"));

    let traj = path(&dir, "traj.json");
    let o = sepinv(&["simulate", &m, &sol, "--steps", "20", "--dist", "zero", "--x0", "0.001", "-o", &traj]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));

    for (art, header) in [(&traj, "step,x1,u1,events"), (&env, "u1")] {
        let csv = path(&dir, "out.csv");
        assert_eq!(code(&sepinv(&["export-plot", art, "--out", &csv])), 0);
        let text = std::fs::read_to_string(&csv).unwrap();
        assert_eq!(text.lines().next().unwrap(), header);
    }
}

#[test]
fn solution_values_survive_the_file_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let m = model("scalar.json");
    let a = path(&dir, "a.json");
    assert_eq!(code(&sepinv(&["synth", &m, "-o", &a])), 0);
    let doc = read_json(&a);
    let text = serde_json::to_string_pretty(&doc).unwrap();
    let again: Value = serde_json::from_str(&text).unwrap();
    assert_eq!(doc, again);
    let y = doc["solution"]["y"].as_array().unwrap();
    assert!(!y.is_empty());
}

#[test]
fn over_disturbed_scalar_is_reported_infeasible() {
    let dir = tempfile::tempdir().unwrap();
    let sol = path(&dir, "sol.json");
    let o = sepinv(&["synth", &model("scalar_disturbed.json"), "-o", &sol]);
    assert_eq!(code(&o), 2);
    assert!(stdout(&o).contains("no_feasible_point_found"));
    let art = read_json(&sol);
    assert_eq!(art["status"], "no_feasible_point_found");
    assert!(art["solution"].is_null());
    // nothing to verify
    assert_eq!(code(&sepinv(&["verify", &model("scalar_disturbed.json"), &sol])), 1);
}

#[test]
fn tampered_rotational_solution_fails_verification() {
    let dir = tempfile::tempdir().unwrap();
    let m = model("rotational.json");
    let sol = path(&dir, "sol.json");
    let o = sepinv(&["synth", &m, "-o", &sol]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert_eq!(code(&sepinv(&["verify", &m, &sol])), 0);

    let mut doc = read_json(&sol);
    for row in doc["solution"]["K"].as_array_mut().unwrap() {
        for v in row.as_array_mut().unwrap() {
            *v = Value::from(0.0);
        }
    }
    let bad = path(&dir, "bad.json");
    std::fs::write(&bad, serde_json::to_string(&doc).unwrap()).unwrap();
    let o = sepinv(&["verify", &m, &bad]);
    assert_eq!(code(&o), 2);
    assert!(stdout(&o).starts_with("valid false"));

    let csv = path(&dir, "sets.csv");
    assert_eq!(code(&sepinv(&["export-plot", &sol, "--out", &csv])), 0);
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().next().unwrap(), "subsystem,x1,x2");
    assert!(text.lines().skip(1).all(|l| l.split(',').count() == 3));
}

#[test]
fn usage_and_input_errors_exit_one() {
    assert_eq!(code(&sepinv(&["synth", "/nonexistent/model.json"])), 1);
    assert_eq!(code(&sepinv(&["synth", &model("scalar.json"), "--bogus"])), 1);
    assert_eq!(code(&sepinv(&["frobnicate"])), 1);
    assert_eq!(code(&sepinv(&["synth", &model("scalar.json"), "--objective", "volume", "-o", "/dev/null"])), 1);
    assert_eq!(code(&sepinv(&["--help"])), 0);
}

#[test]
fn envelope_and_reach_check_their_arguments() {
    let dir = tempfile::tempdir().unwrap();
    let m = model("scalar.json");
    let sol = path(&dir, "sol.json");
    assert_eq!(code(&sepinv(&["synth", &m, "-o", &sol])), 0);
    assert_eq!(code(&sepinv(&["envelope", &m, &sol, "-i", "2", "--point", "0"])), 1);
    assert_eq!(code(&sepinv(&["envelope", &m, &sol, "-i", "1", "--point", "50"])), 1);
    assert_eq!(code(&sepinv(&["reach", &m, &sol, "-i", "1", "--target", "0.2"])), 1);
}

#[test]
fn external_backend_is_rechecked() {
    let dir = tempfile::tempdir().unwrap();
    let m = model("scalar.json");
    let sol = path(&dir, "sol.json");
    assert_eq!(code(&sepinv(&["synth", &m, "-o", &sol])), 0);
    let y: Vec<f64> = read_json(&sol)["solution"]["y"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();

    // a backend replaying a genuine point is accepted
    let good = path(&dir, "good.txt");
    std::fs::write(&good, y.iter().map(|v| format!("{v:e}")).collect::<Vec<_>>().join(" ")).unwrap();
    let replay = path(&dir, "replay.sh");
    std::fs::write(&replay, format!("cat {good}\n")).unwrap();
    let o = sepinv(&["synth", &m, "--backend", &format!("sh {replay}"), "-o", &path(&dir, "a.json")]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));

    // one claiming the all-zero vector is not
    let zeros = path(&dir, "zeros.sh");
    std::fs::write(&zeros, format!("echo {}\n", vec!["0"; y.len()].join(" "))).unwrap();
    let out = path(&dir, "b.json");
    let o = Command::new(env!("CARGO_BIN_EXE_sepinv"))
        .args(["synth", &m, "-o", &out])
        .env("SEPINV_BACKEND", format!("sh {zeros}"))
        .output()
        .unwrap();
    assert_eq!(code(&o), 2, "{}", stdout(&o));
    assert_eq!(read_json(&out)["status"], "no_feasible_point_found");
}
