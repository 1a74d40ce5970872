use std::fs;
use std::path::Path;

use rwm_mpc::cli::{main_with_args, EXIT_CONFIG, EXIT_OK};
use rwm_mpc::solver::SolveReport;

fn run(args: &[&str]) -> i32 {
    main_with_args(std::iter::once("rwm-mpc").chain(args.iter().copied()))
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn bad_backend_is_usage_error() {
    assert_eq!(run(&["solve", "--backend", "double"]), EXIT_CONFIG);
}

#[test]
fn malformed_config_is_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, "{\"schema_version\": 1,\n \"preset\": {").unwrap();
    assert_eq!(run(&["design", "--config", path(&cfg), "--out", path(dir.path())]), EXIT_CONFIG);
    fs::write(&cfg, "{\"schema_version\": 99}").unwrap();
    assert_eq!(run(&["design", "--config", path(&cfg), "--out", path(dir.path())]), EXIT_CONFIG);
}

#[test]
fn design_solve_simulate_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    assert_eq!(run(&["design", "--out", path(out)]), EXIT_OK);
    let design = fs::read_to_string(out.join("design.json")).unwrap();
    assert!(fs::read_to_string(out.join("design_report.txt")).unwrap().contains("d 81"));

    let cfg = out.join("run.json");
    fs::write(&cfg, r#"{"schema_version": 1, "design": "design.json", "scenario": {"amplitude": 0.0, "steps": 50}}"#).unwrap();

    // zero state: the cold start is already optimal
    let state = out.join("zero.json");
    fs::write(&state, format!("{{\"schema_version\": 1, \"x\": {:?}}}", vec![0.0; 116])).unwrap();
    assert_eq!(run(&["solve", "--config", path(&cfg), "--out", path(out), "--state", path(&state), "--dump-iterates"]), EXIT_OK);
    let rep: SolveReport = serde_json::from_str(&fs::read_to_string(out.join("solve_report.json")).unwrap()).unwrap();
    assert!(rep.u_opt.iter().all(|&u| u == 0.0));
    assert_eq!(rep.cost_history.len(), 20);
    assert_eq!(fs::read_to_string(out.join("iterates.csv")).unwrap().lines().count(), 21);

    fs::write(&state, "[1.0, 2.0]").unwrap();
    assert_eq!(run(&["solve", "--config", path(&cfg), "--out", path(out), "--state", path(&state)]), EXIT_CONFIG);

    let sim = out.join("sim");
    assert_eq!(run(&["simulate", "--config", path(&cfg), "--out", path(&sim), "--backend", "fwl"]), EXIT_OK);
    let trace = fs::read_to_string(sim.join("trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 51);
    for line in trace.lines().skip(1) {
        // every signal after step and t stays zero; the untracked accuracy column is empty
        assert!(line.split(',').skip(2).all(|v| v.is_empty() || v.parse::<f64>().unwrap() == 0.0), "{line}");
    }
    assert!(sim.join("trace.svg").exists());
    let metrics: serde_json::Value = serde_json::from_str(&fs::read_to_string(sim.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["schema_version"], 1);

    // a rebuilt design is byte-identical
    let again = out.join("again");
    assert_eq!(run(&["design", "--out", path(&again)]), EXIT_OK);
    assert_eq!(fs::read_to_string(again.join("design.json")).unwrap(), design);
}
