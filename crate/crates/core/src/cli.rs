//! Command-line front end: `solve`, `simulate` and `report`.
//!
//! Machine-readable artifacts are JSON, numeric paths are CSV. Wall-clock
//! timings go to their own file so that `report.json` only depends on the
//! inputs and the seed.

use crate::layering::{
    reconstruct_controller, reduce, CandidateTrial, ControlLaw, ControllerSpec, LayerError, LayerStack,
    SideConditionReport, SteeringMode, TerminalPolicy, TrialOutcome, Verdict,
};
use crate::matops::{serde_rows, to_rows, Matrix, Tolerance};
use crate::problem::{load_matrix_list, load_problem, LqProblem, MatrixPath};
use crate::riccati::RiccatiError;
use crate::simulate::{simulate, MonteCarloConfig, SimulationReport};
use crate::synthesis::Branch;
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub const REPORT_FILE: &str = "report.json";
pub const CONTROLLER_FILE: &str = "controller.json";
pub const CONTROLLER_CSV: &str = "controller.csv";
pub const RICCATI_CSV: &str = "riccati.csv";
pub const SIMULATION_FILE: &str = "simulation.json";
pub const TRAJECTORY_CSV: &str = "trajectory.csv";
pub const TIMINGS_FILE: &str = "timings.json";

#[derive(Debug, Parser)]
#[command(name = "irlq", version, about = "Irregular stochastic LQ solver")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Classify a problem, reduce it and build its controllers.
    Solve(SolveArgs),
    /// Monte Carlo simulation of a controller.
    Simulate(SimulateArgs),
    /// Print a summary of an output directory.
    Report {
        dir: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    pub problem: PathBuf,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[arg(long)]
    pub rtol: Option<f64>,
    /// JSON list of extra terminal values to try at every layer.
    #[arg(long)]
    pub terminal_candidates: Option<PathBuf>,
    /// Also simulate the primary controller and embed the result.
    #[arg(long)]
    pub simulate: bool,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    pub problem: PathBuf,
    /// Solve the problem first instead of loading a controller.
    #[arg(long, conflicts_with = "controller")]
    pub resolve: bool,
    /// Directory holding `controller.json`.
    #[arg(long)]
    pub controller: Option<PathBuf>,
    #[arg(long)]
    pub paths: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Absolute time before `T` after which closed-loop gains are frozen.
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long, conflicts_with = "closed_loop")]
    pub open_loop: bool,
    #[arg(long)]
    pub closed_loop: bool,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemSummary {
    pub n: usize,
    pub m: usize,
    pub t0: f64,
    #[serde(rename = "T")]
    pub t_end: f64,
    pub steps: usize,
    pub x0: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSummary {
    pub k: usize,
    pub m_k: usize,
    pub rank_min: usize,
    pub rank_max: usize,
    #[serde(with = "serde_rows")]
    pub chosen_terminal: Matrix,
    pub singular_nodes: usize,
    pub diagnostics: Vec<SideConditionReport>,
    pub trials: Vec<CandidateTrial>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerSummary {
    pub law: ControlLaw,
    pub epsilon: f64,
    pub gain_t0: Vec<Vec<f64>>,
    pub feedforward_t0: Vec<Vec<f64>>,
    pub max_gain_norm: f64,
    pub branch: Option<Branch>,
    pub gramian_condition: Option<f64>,
    pub mc_gramian_stderr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub problem: ProblemSummary,
    pub verdict: Verdict,
    pub base_rank_min: Option<usize>,
    pub base_rank_max: Option<usize>,
    pub layer_summaries: Vec<LayerSummary>,
    pub controller_summary: Vec<ControllerSummary>,
    /// Controllers that could not be built although the verdict is solvable.
    pub synthesis_errors: Vec<String>,
    pub simulation: Option<SimulationReport>,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        for l in &self.layer_summaries {
            for d in l.diagnostics.iter().filter(|d| d.nodes_violated > 0) {
                out.push(format!(
                    "WARN layer {}: side condition {:?} violated at {} nodes (max {:.3e})",
                    l.k, d.condition_id, d.nodes_violated, d.max_violation
                ));
            }
        }
        for e in &self.synthesis_errors {
            out.push(format!("WARN {e}"));
        }
        out
    }
}

/// The controllers written by `solve`, one per law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerArtifact {
    pub controllers: Vec<ControllerSpec>,
}

impl ControllerArtifact {
    /// The requested law, or closed loop when available, else the first.
    pub fn select(&self, mode: Option<SteeringMode>) -> Option<&ControllerSpec> {
        match mode {
            Some(SteeringMode::OpenLoop) => self.controllers.iter().find(|c| c.law == ControlLaw::OpenLoop),
            Some(SteeringMode::ClosedLoop) => {
                self.controllers.iter().find(|c| c.law == ControlLaw::ClosedLoop)
            }
            None => self
                .controllers
                .iter()
                .find(|c| c.law == ControlLaw::ClosedLoop)
                .or(self.controllers.first()),
        }
    }
}

/// Everything `solve` computes.
#[derive(Debug)]
pub struct Solved {
    pub report: RunReport,
    pub stack: Option<LayerStack>,
    pub controllers: ControllerArtifact,
}

fn problem_summary(p: &LqProblem) -> ProblemSummary {
    ProblemSummary {
        n: p.n,
        m: p.m,
        t0: p.grid.t0,
        t_end: p.grid.t_end,
        steps: p.grid.steps,
        x0: p.x0.clone(),
    }
}

fn summarize_controller(c: &ControllerSpec) -> ControllerSummary {
    let steering = c.steering.as_ref();
    ControllerSummary {
        law: c.law,
        epsilon: c.epsilon,
        gain_t0: to_rows(c.gain.at(0)),
        feedforward_t0: to_rows(c.feedforward.at(0)),
        max_gain_norm: c.gain.max_norm(),
        branch: steering.map(|s| s.branch),
        gramian_condition: steering.and_then(|s| s.gramian_condition),
        mc_gramian_stderr: steering.and_then(|s| s.mc_gramian_stderr),
    }
}

fn layer_summary(rec: &crate::layering::LayerRecord) -> LayerSummary {
    let ranks = &rec.riccati.rank_profile;
    LayerSummary {
        k: rec.k,
        m_k: rec.m_k,
        rank_min: ranks.iter().copied().min().unwrap_or(0),
        rank_max: ranks.iter().copied().max().unwrap_or(0),
        chosen_terminal: rec.riccati.terminal.clone(),
        singular_nodes: rec.riccati.singular_nodes.len(),
        diagnostics: rec.diagnostics.clone(),
        trials: rec.trials.clone(),
    }
}

/// Reduces `p` and builds every controller its verdict allows.
pub fn solve_problem(p: &LqProblem, policy: &TerminalPolicy) -> Result<Solved> {
    let tol = Tolerance::with_rtol(p.solver.rtol);
    let mc = MonteCarloConfig {
        paths: p.solver.mc_paths,
        seed: p.solver.seed,
    };
    let mut report = RunReport {
        problem: problem_summary(p),
        verdict: Verdict::Regular,
        base_rank_min: None,
        base_rank_max: None,
        layer_summaries: Vec::new(),
        controller_summary: Vec::new(),
        synthesis_errors: Vec::new(),
        simulation: None,
    };
    let stack = match reduce(p, policy, &tol) {
        Ok(s) => s,
        Err(LayerError::Riccati(RiccatiError::Blowup { time })) => {
            report.verdict = Verdict::Inconclusive {
                reason: format!("base Riccati solution blew up at t = {time}"),
            };
            return Ok(Solved {
                report,
                stack: None,
                controllers: ControllerArtifact { controllers: Vec::new() },
            });
        }
        Err(e) => return Err(e).context("reduction failed"),
    };
    report.verdict = stack.verdict.clone();
    report.base_rank_min = stack.base.rank_profile.iter().copied().min();
    report.base_rank_max = stack.base.rank_profile.iter().copied().max();
    report.layer_summaries = stack.layers.iter().map(layer_summary).collect();

    let mut controllers = Vec::new();
    if stack.verdict.is_solvable() {
        for mode in [SteeringMode::ClosedLoop, SteeringMode::OpenLoop] {
            match reconstruct_controller(p, &stack, mode, &mc) {
                Ok(c) => {
                    let single = matches!(c.law, ControlLaw::Feedback | ControlLaw::Unconstrained);
                    controllers.push(c);
                    if single {
                        break;
                    }
                }
                Err(e) => report.synthesis_errors.push(format!("{mode:?} controller: {e}")),
            }
        }
    }
    report.controller_summary = controllers.iter().map(summarize_controller).collect();
    Ok(Solved {
        report,
        stack: Some(stack),
        controllers: ControllerArtifact { controllers },
    })
}

fn read_problem(path: &Path) -> Result<LqProblem> {
    let bytes = fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
    load_problem(&bytes).with_context(|| format!("invalid problem file {}", path.display()))
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("cannot write {}", path.display()))
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("artifact serializes")
}

fn record_timing(dir: &Path, key: &str, seconds: f64) -> Result<()> {
    let path = dir.join(TIMINGS_FILE);
    let mut map: BTreeMap<String, f64> = fs::read(&path)
        .ok()
        .and_then(|b| serde_json::from_slice(&b).ok())
        .unwrap_or_default();
    map.insert(key.to_string(), seconds);
    write(dir, TIMINGS_FILE, &json(&map))
}

fn push_matrix_header(header: &mut Vec<String>, prefix: &str, m: &Matrix) {
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            header.push(format!("{prefix}_{r}_{c}"));
        }
    }
}

fn push_matrix_values(row: &mut Vec<f64>, m: &Matrix) {
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            row.push(m[(r, c)]);
        }
    }
}

/// Wide CSV: a time column and one column per entry of every path.
fn paths_csv(times: &[f64], columns: &[(String, &MatrixPath)]) -> String {
    let mut header = vec!["t".to_string()];
    for (name, path) in columns {
        push_matrix_header(&mut header, name, path.at(0));
    }
    let mut out = header.join(",");
    out.push('\n');
    for (j, t) in times.iter().enumerate() {
        let mut row = vec![*t];
        for (_, path) in columns {
            push_matrix_values(&mut row, path.at(j));
        }
        let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

pub fn riccati_csv(stack: &LayerStack) -> String {
    let mut cols = vec![
        ("P0".to_string(), &stack.base.p),
        ("Upsilon0".to_string(), &stack.base.upsilon),
        ("Gamma0".to_string(), &stack.base.gamma),
    ];
    for l in &stack.layers {
        cols.push((format!("P{}", l.k), &l.riccati.p));
        cols.push((format!("Upsilon{}", l.k), &l.riccati.upsilon));
        cols.push((format!("Gamma{}", l.k), &l.riccati.gamma));
    }
    paths_csv(&stack.base.p.grid.times(), &cols)
}

fn law_name(law: ControlLaw) -> &'static str {
    match law {
        ControlLaw::Feedback => "feedback",
        ControlLaw::Unconstrained => "unconstrained",
        ControlLaw::OpenLoop => "open_loop",
        ControlLaw::ClosedLoop => "closed_loop",
    }
}

pub fn controller_csv(art: &ControllerArtifact) -> Option<String> {
    let first = art.controllers.first()?;
    let mut cols = Vec::new();
    for c in &art.controllers {
        cols.push((format!("{}_gain", law_name(c.law)), &c.gain));
        cols.push((format!("{}_ff", law_name(c.law)), &c.feedforward));
    }
    Some(paths_csv(&first.grid.times(), &cols))
}

pub fn trajectory_csv(times: &[f64], sim: &SimulationReport) -> String {
    let n = sim.mean_x.first().map_or(0, Vec::len);
    let m = sim.mean_u.first().map_or(0, Vec::len);
    let mut header = vec!["t".to_string()];
    header.extend((0..n).map(|i| format!("mean_x_{i}")));
    header.extend((0..n).map(|i| format!("var_x_{i}")));
    header.extend((0..m).map(|i| format!("mean_u_{i}")));
    let mut out = header.join(",");
    out.push('\n');
    for (j, t) in times.iter().enumerate() {
        let mut row = vec![*t];
        row.extend(&sim.mean_x[j]);
        row.extend(&sim.var_x[j]);
        row.extend(&sim.mean_u[j]);
        let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

fn write_simulation(dir: &Path, p: &LqProblem, sim: &SimulationReport) -> Result<()> {
    write(dir, SIMULATION_FILE, &json(sim))?;
    write(dir, TRAJECTORY_CSV, &trajectory_csv(&p.grid.times(), sim))
}

fn cmd_solve(args: &SolveArgs) -> Result<i32> {
    let start = Instant::now();
    let mut p = read_problem(&args.problem)?;
    if let Some(rtol) = args.rtol {
        if !(rtol > 0.0 && rtol < 1.0) {
            bail!("--rtol must lie in (0, 1), got {rtol}");
        }
        p.solver.rtol = rtol;
    }
    if let Some(file) = &args.terminal_candidates {
        let bytes = fs::read(file).with_context(|| format!("cannot read {}", file.display()))?;
        let extra = load_matrix_list(&bytes).context("invalid terminal candidate file")?;
        if let Some(bad) = extra.iter().find(|c| c.shape() != (p.n, p.n)) {
            bail!("terminal candidate has shape {:?}, expected ({}, {})", bad.shape(), p.n, p.n);
        }
        p.solver.terminal_candidates.extend(extra);
    }
    let policy = TerminalPolicy::for_problem(&p);
    let mut solved = solve_problem(&p, &policy)?;
    let solve_seconds = start.elapsed().as_secs_f64();

    fs::create_dir_all(&args.out).with_context(|| format!("cannot create {}", args.out.display()))?;
    if args.simulate {
        if let Some(ctrl) = solved.controllers.select(None) {
            let mc = MonteCarloConfig {
                paths: p.solver.mc_paths,
                seed: p.solver.seed,
            };
            let t = Instant::now();
            let sim = simulate(&p, ctrl, &mc, ctrl.epsilon)?;
            write_simulation(&args.out, &p, &sim)?;
            record_timing(&args.out, "simulate_seconds", t.elapsed().as_secs_f64())?;
            solved.report.simulation = Some(sim);
        }
    }
    write(&args.out, REPORT_FILE, &solved.report.to_json())?;
    write(&args.out, CONTROLLER_FILE, &json(&solved.controllers))?;
    if let Some(csv) = controller_csv(&solved.controllers) {
        write(&args.out, CONTROLLER_CSV, &csv)?;
    }
    if let Some(stack) = &solved.stack {
        write(&args.out, RICCATI_CSV, &riccati_csv(stack))?;
    }
    record_timing(&args.out, "solve_seconds", solve_seconds)?;

    println!("verdict: {}", describe_verdict(&solved.report.verdict));
    for w in solved.report.warnings() {
        println!("{w}");
    }
    Ok(solved.report.verdict.exit_code())
}

fn cmd_simulate(args: &SimulateArgs) -> Result<i32> {
    let start = Instant::now();
    let mut p = read_problem(&args.problem)?;
    if let Some(eps) = args.epsilon {
        if !(eps > 0.0 && eps < p.grid.span()) {
            bail!("--epsilon must lie in (0, T - t0), got {eps}");
        }
        p.solver.epsilon_clamp = Some(eps);
    }
    if let Some(n) = args.paths {
        p.solver.mc_paths = n;
    }
    if let Some(s) = args.seed {
        p.solver.seed = s;
    }
    let mode = if args.open_loop {
        Some(SteeringMode::OpenLoop)
    } else if args.closed_loop {
        Some(SteeringMode::ClosedLoop)
    } else {
        None
    };
    let artifact = if args.resolve {
        let solved = solve_problem(&p, &TerminalPolicy::for_problem(&p))?;
        if !solved.report.verdict.is_solvable() {
            bail!("no controller: verdict is {}", describe_verdict(&solved.report.verdict));
        }
        solved.controllers
    } else {
        let Some(dir) = &args.controller else {
            bail!("pass --controller DIR or --resolve");
        };
        let path = dir.join(CONTROLLER_FILE);
        let bytes = fs::read(&path).with_context(|| format!("cannot read {}", path.display()))?;
        serde_json::from_slice(&bytes).with_context(|| format!("invalid controller file {}", path.display()))?
    };
    let Some(ctrl) = artifact.select(mode) else {
        bail!("no {mode:?} controller available");
    };
    let epsilon = args.epsilon.unwrap_or(ctrl.epsilon);
    let mc = MonteCarloConfig {
        paths: p.solver.mc_paths,
        seed: p.solver.seed,
    };
    let sim = simulate(&p, ctrl, &mc, epsilon).context("simulation failed")?;
    fs::create_dir_all(&args.out).with_context(|| format!("cannot create {}", args.out.display()))?;
    write_simulation(&args.out, &p, &sim)?;
    record_timing(&args.out, "simulate_seconds", start.elapsed().as_secs_f64())?;
    println!(
        "{} controller: cost {:.6e} ± {:.2e}, terminal residual {:.6e} ± {:.2e}, equilibrium residual {:.3e}",
        law_name(ctrl.law),
        sim.cost_mean,
        sim.cost_stderr,
        sim.terminal_residual,
        sim.terminal_residual_stderr,
        sim.mp_residual_max
    );
    Ok(0)
}

fn describe_verdict(v: &Verdict) -> String {
    match v {
        Verdict::Regular => "Regular".into(),
        Verdict::IrregularSolvable {
            depth,
            terminal_constraint,
        } => format!("IrregularSolvable at depth {depth}, M = {:?}", to_rows(terminal_constraint)),
        Verdict::Unsolvable { depth, caveat } => format!("Unsolvable at depth {depth} ({caveat})"),
        Verdict::Inconclusive { reason } => format!("Inconclusive ({reason})"),
    }
}

fn describe_outcome(o: &TrialOutcome) -> String {
    match o {
        TrialOutcome::RangeHolds => "range holds".into(),
        TrialOutcome::Degenerate => "degenerate".into(),
        TrialOutcome::RangeFails { rank } => format!("range fails (rank {rank})"),
        TrialOutcome::NonConstantRank { min_rank, max_rank } => {
            format!("rank varies {min_rank}..{max_rank}")
        }
        TrialOutcome::Blowup { time } => format!("blow-up at t = {time}"),
    }
}

/// Text summary of an output directory.
pub fn render_report(report: &RunReport, simulation: Option<&SimulationReport>) -> String {
    let mut s = String::new();
    let pr = &report.problem;
    let _ = writeln!(
        s,
        "problem: n = {}, m = {}, horizon [{}, {}], {} steps",
        pr.n, pr.m, pr.t0, pr.t_end, pr.steps
    );
    let _ = writeln!(s, "verdict: {}", describe_verdict(&report.verdict));
    if let (Some(lo), Some(hi)) = (report.base_rank_min, report.base_rank_max) {
        let _ = writeln!(s, "layer 0: rank of Upsilon in [{lo}, {hi}]");
    }
    if !report.layer_summaries.is_empty() {
        let _ = writeln!(s, "{:>5} {:>5} {:>9} {:>9}  terminal", "layer", "m_k", "rank_min", "rank_max");
        for l in &report.layer_summaries {
            let _ = writeln!(
                s,
                "{:>5} {:>5} {:>9} {:>9}  {:?}",
                l.k,
                l.m_k,
                l.rank_min,
                l.rank_max,
                to_rows(&l.chosen_terminal)
            );
            for t in &l.trials {
                let _ = writeln!(s, "      candidate {:?}: {}", to_rows(&t.terminal), describe_outcome(&t.outcome));
            }
            for d in &l.diagnostics {
                let _ = writeln!(
                    s,
                    "      side condition {:?}: max {:.3e}, violated at {} nodes",
                    d.condition_id, d.max_violation, d.nodes_violated
                );
            }
        }
    }
    for c in &report.controller_summary {
        let _ = writeln!(
            s,
            "controller {}: gain(t0) = {:?}, feedforward(t0) = {:?}, max gain norm {:.3e}",
            law_name(c.law),
            c.gain_t0,
            c.feedforward_t0,
            c.max_gain_norm
        );
        if let Some(k) = c.gramian_condition {
            let _ = writeln!(s, "  gramian condition number {k:.3e}");
        }
    }
    for w in report.warnings() {
        let _ = writeln!(s, "{w}");
    }
    if let Some(sim) = simulation {
        let _ = writeln!(
            s,
            "simulation: {} paths, seed {}, epsilon {}",
            sim.paths, sim.seed, sim.epsilon
        );
        let _ = writeln!(s, "cost: {:.6e} ± {:.2e}", sim.cost_mean, sim.cost_stderr);
        let _ = writeln!(
            s,
            "terminal residual: {:.6e} ± {:.2e}",
            sim.terminal_residual, sim.terminal_residual_stderr
        );
        let _ = writeln!(s, "equilibrium residual: {:.3e}", sim.mp_residual_max);
    }
    s
}

fn cmd_report(dir: &Path) -> Result<i32> {
    let path = dir.join(REPORT_FILE);
    let bytes = fs::read(&path).with_context(|| format!("cannot read {}", path.display()))?;
    let report: RunReport =
        serde_json::from_slice(&bytes).with_context(|| format!("invalid report {}", path.display()))?;
    let from_file: Option<SimulationReport> = match fs::read(dir.join(SIMULATION_FILE)) {
        Ok(b) => Some(serde_json::from_slice(&b).context("invalid simulation.json")?),
        Err(_) => None,
    };
    let sim = from_file.as_ref().or(report.simulation.as_ref());
    print!("{}", render_report(&report, sim));
    Ok(0)
}

fn thread_pool() -> Result<Option<rayon::ThreadPool>> {
    let Ok(value) = std::env::var("IRLQ_THREADS") else {
        return Ok(None);
    };
    let n: usize = value
        .trim()
        .parse()
        .with_context(|| format!("IRLQ_THREADS must be a positive integer, got {value:?}"))?;
    if n == 0 {
        bail!("IRLQ_THREADS must be positive");
    }
    Ok(Some(rayon::ThreadPoolBuilder::new().num_threads(n).build()?))
}

pub fn execute(cli: &Cli) -> Result<i32> {
    let body = || match &cli.command {
        Command::Solve(a) => cmd_solve(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Report { dir } => cmd_report(dir),
    };
    match thread_pool()? {
        Some(pool) => pool.install(body),
        None => body(),
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::TimeGrid;

    fn s(v: f64) -> Matrix {
        Matrix::from_element(1, 1, v)
    }

    fn regular() -> LqProblem {
        LqProblem::constant(
            s(0.0),
            s(1.0),
            s(0.0),
            s(0.0),
            s(0.0),
            s(1.0),
            s(1.0),
            TimeGrid::new(0.0, 1.0, 100).unwrap(),
            vec![1.0],
        )
        .unwrap()
    }

    #[test]
    fn regular_report_round_trips() {
        let solved = solve_problem(&regular(), &TerminalPolicy::default()).unwrap();
        assert_eq!(solved.report.verdict, Verdict::Regular);
        let back: RunReport = serde_json::from_str(&solved.report.to_json()).unwrap();
        assert_eq!(back, solved.report);
        assert_eq!(solved.controllers.controllers.len(), 1);
        assert_eq!(solved.controllers.controllers[0].law, ControlLaw::Feedback);
    }

    #[test]
    fn csv_shapes() {
        let solved = solve_problem(&regular(), &TerminalPolicy::default()).unwrap();
        let csv = riccati_csv(solved.stack.as_ref().unwrap());
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 102);
        assert_eq!(lines[0], "t,P0_0_0,Upsilon0_0_0,Gamma0_0_0");
        let ctrl = controller_csv(&solved.controllers).unwrap();
        assert_eq!(ctrl.lines().next().unwrap(), "t,feedback_gain_0_0,feedback_ff_0_0");
        assert!(ctrl.lines().skip(1).all(|l| l.split(',').count() == 3));
    }

    #[test]
    fn select_prefers_closed_loop() {
        let solved = solve_problem(&regular(), &TerminalPolicy::default()).unwrap();
        let art = solved.controllers;
        assert_eq!(art.select(None).unwrap().law, ControlLaw::Feedback);
        assert!(art.select(Some(SteeringMode::OpenLoop)).is_none());
    }

    #[test]
    fn warnings_listed() {
        let mut report = solve_problem(&regular(), &TerminalPolicy::default()).unwrap().report;
        assert!(report.warnings().is_empty());
        report.synthesis_errors.push("boom".into());
        assert_eq!(report.warnings(), vec!["WARN boom".to_string()]);
    }

    #[test]
    fn bad_arguments_exit_one() {
        assert_eq!(run(["irlq", "solve"]), 1);
        assert_eq!(run(["irlq", "frobnicate"]), 1);
    }
}
