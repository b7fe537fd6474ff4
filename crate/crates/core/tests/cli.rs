mod common;

use irlq::cli::{RunReport, ControllerArtifact};
use irlq::layering::Verdict;
use irlq::simulate::SimulationReport;
use std::path::Path;
use std::process::{Command, Output};

fn irlq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_irlq"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn fixture(name: &str) -> String {
    common::problems_dir().join(name).to_str().unwrap().to_string()
}

fn text(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn read_report(dir: &Path) -> RunReport {
    serde_json::from_slice(&std::fs::read(dir.join("report.json")).unwrap()).unwrap()
}

#[test]
fn solve_two_channel_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = irlq(&["solve", &fixture("two_channel.json"), "--out", out]);
    assert_eq!(o.status.code(), Some(0));
    assert!(text(&o).contains("WARN layer 1: side condition Z17"));

    let report = read_report(dir.path());
    assert!(matches!(report.verdict, Verdict::IrregularSolvable { depth: 1, .. }));
    assert!(report.simulation.is_none());
    let again: RunReport = serde_json::from_str(&report.to_json()).unwrap();
    assert_eq!(again, report);

    let r = irlq(&["report", out]);
    assert_eq!(r.status.code(), Some(0));
    let summary = text(&r);
    assert!(summary.contains("IrregularSolvable at depth 1"));
    assert!(summary.contains("    1     1         0         0  [[-1.0]]"), "{summary}");
    assert!(summary.contains("WARN layer 1: side condition Z17"));
    assert!(!summary.contains("cost:"));

    let s = irlq(&["simulate", &fixture("two_channel.json"), "--controller", out, "--paths", "200", "--out", out]);
    assert_eq!(s.status.code(), Some(0), "{}", String::from_utf8_lossy(&s.stderr));
    let summary = text(&irlq(&["report", out]));
    assert!(summary.contains("cost: "));
    assert!(summary.contains("terminal residual: "));
    assert!(summary.contains("equilibrium residual: "));
}

#[test]
fn csv_artifacts_have_headers_and_all_nodes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(irlq(&["solve", &fixture("two_channel.json"), "--out", out, "--simulate"]).status.code(), Some(0));
    for (file, first) in [
        ("riccati.csv", "t,P0_0_0,Upsilon0_0_0,Upsilon0_0_1"),
        ("controller.csv", "t,closed_loop_gain_0_0,closed_loop_gain_1_0"),
        ("trajectory.csv", "t,mean_x_0,var_x_0,mean_u_0,mean_u_1"),
    ] {
        let body = std::fs::read_to_string(dir.path().join(file)).unwrap();
        let lines: Vec<&str> = body.lines().collect();
        assert!(lines[0].starts_with(first), "{file}: {}", lines[0]);
        assert_eq!(lines.len(), 1002, "{file}");
        let width = lines[0].split(',').count();
        assert!(lines.iter().all(|l| l.split(',').count() == width), "{file}");
    }
    let report = read_report(dir.path());
    assert!(report.simulation.is_some());
    let riccati_header = std::fs::read_to_string(dir.path().join("riccati.csv")).unwrap();
    assert!(riccati_header.lines().next().unwrap().contains("P1_0_0"));
}

#[test]
fn regular_scalar_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let o = irlq(&["solve", &fixture("scalar_regular.json"), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(read_report(dir.path()).verdict, Verdict::Regular);
    let art: ControllerArtifact =
        serde_json::from_slice(&std::fs::read(dir.path().join("controller.json")).unwrap()).unwrap();
    // u = -P x with P(0) = 1/2
    assert!((art.controllers[0].gain.at(0)[(0, 0)] + 0.5).abs() < 1e-10);
}

#[test]
fn malformed_and_missing_inputs_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\"n\": 1,").unwrap();
    let o = irlq(&["solve", bad.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line"));

    let empty = tempfile::tempdir().unwrap();
    assert_eq!(irlq(&["report", empty.path().to_str().unwrap()]).status.code(), Some(1));
    assert_eq!(irlq(&["simulate", &fixture("two_channel.json")]).status.code(), Some(1));
}

#[test]
fn base_blowup_is_inconclusive() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(common::problems_dir().join("scalar_regular.json"))
        .unwrap()
        .replace("\"H\": [[1.0]]", "\"H\": [[-10.0]]");
    let path = dir.path().join("blowup.json");
    std::fs::write(&path, text).unwrap();
    let out = dir.path().join("out");
    let o = irlq(&["solve", path.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(matches!(read_report(&out).verdict, Verdict::Inconclusive { .. }));
}

#[test]
fn controller_problem_mismatch_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(irlq(&["solve", &fixture("scalar_regular.json"), "--out", out]).status.code(), Some(0));
    let o = irlq(&["simulate", &fixture("two_channel.json"), "--controller", out, "--out", out]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn simulate_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let mut bodies = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let o = irlq(&[
            "simulate",
            &fixture("two_channel.json"),
            "--resolve",
            "--paths",
            "1",
            "--seed",
            "7",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(o.status.code(), Some(0));
        bodies.push(std::fs::read(out.join("simulation.json")).unwrap());
    }
    assert_eq!(bodies[0], bodies[1]);
    let sim: SimulationReport = serde_json::from_slice(&bodies[0]).unwrap();
    assert_eq!((sim.paths, sim.seed), (1, 7));
}

#[test]
fn open_loop_reaches_constraint() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = irlq(&["simulate", &fixture("two_channel.json"), "--resolve", "--open-loop", "--paths", "500", "--out", out]);
    assert_eq!(o.status.code(), Some(0));
    let sim: SimulationReport =
        serde_json::from_slice(&std::fs::read(dir.path().join("simulation.json")).unwrap()).unwrap();
    assert!(sim.terminal_residual <= 3.0 * sim.terminal_residual_stderr + 1e-12);
}

#[test]
fn extra_terminal_candidates_are_tried() {
    let dir = tempfile::tempdir().unwrap();
    let cands = dir.path().join("cands.json");
    std::fs::write(&cands, "[[[0.25]]]").unwrap();
    let out = dir.path().join("out");
    let o = irlq(&[
        "solve",
        &fixture("two_channel.json"),
        "--terminal-candidates",
        cands.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let report = read_report(&out);
    assert_eq!(report.layer_summaries[0].trials.len(), 3);

    std::fs::write(&cands, "[[[0.25, 0.0]]]").unwrap();
    let o = irlq(&["solve", &fixture("two_channel.json"), "--terminal-candidates", cands.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}
