//! Monte Carlo validation: Euler–Maruyama paths of the controlled state,
//! cost and terminal residual estimates, the equilibrium residual, and a
//! discrete dynamic-programming oracle for regular problems.

use crate::layering::{ControlLaw, ControllerSpec, LayerStack};
use crate::matops::Matrix;
use crate::problem::{LqProblem, MatrixPath};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const BLOWUP_STATE: f64 = 1e12;
/// Paths per work unit; fixed so that accumulation order never depends on
/// the number of threads.
const BLOCK: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimulationError {
    #[error("state blew up on path {path} at t = {time}")]
    Blowup { path: usize, time: f64 },
    #[error("controller does not fit the problem: {0}")]
    Mismatch(String),
    #[error("no optimality residual for verdict {0}")]
    NotSolvable(String),
    #[error("dynamic-programming oracle inapplicable at t = {time}: curvature matrix is not positive definite")]
    OracleInapplicable { time: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MonteCarloConfig {
    pub paths: usize,
    pub seed: u64,
}

/// Independent stream `path` of the generator seeded with `seed`.
pub fn path_rng(seed: u64, path: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub paths: usize,
    pub seed: u64,
    pub epsilon: f64,
    pub cost_mean: f64,
    pub cost_stderr: f64,
    /// Estimate of `E‖M x(T)‖²`.
    pub terminal_residual: f64,
    pub terminal_residual_stderr: f64,
    /// Equilibrium residual along path 0, max over nodes up to `T − ε`.
    pub mp_residual_max: f64,
    pub mean_x: Vec<Vec<f64>>,
    pub var_x: Vec<Vec<f64>>,
    pub mean_u: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub mean: f64,
    pub stderr: f64,
}

/// Row-major copies of a path's samples, one block per node.
fn flat(path: &MatrixPath) -> Vec<f64> {
    path.samples
        .iter()
        .flat_map(|m| m.transpose().as_slice().to_vec())
        .collect()
}

/// `out = M x` for a row-major `rows × cols` block.
#[inline]
fn matvec(m: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for (r, o) in out.iter_mut().enumerate() {
        let row = &m[r * cols..(r + 1) * cols];
        *o = row.iter().zip(x).map(|(a, b)| a * b).sum();
    }
}

#[inline]
fn quad(m: &[f64], x: &[f64]) -> f64 {
    let n = x.len();
    let mut s = 0.0;
    for i in 0..n {
        let row = &m[i * n..(i + 1) * n];
        s += x[i] * row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
    s
}

/// Sum in a fixed binary tree, independent of how the input was produced.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 8 {
        v.iter().sum()
    } else {
        let mid = v.len() / 2;
        pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
    }
}

fn mean_stderr(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = pairwise_sum(v) / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let dev: Vec<f64> = v.iter().map(|x| (x - mean) * (x - mean)).collect();
    let var = pairwise_sum(&dev) / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Everything a path needs, flattened per node.
struct Engine<'a> {
    p: &'a LqProblem,
    a: Vec<f64>,
    b: Vec<f64>,
    abar: Vec<f64>,
    bbar: Vec<f64>,
    q: Vec<f64>,
    r: Vec<f64>,
    h: Vec<f64>,
    gain: Vec<f64>,
    ff: Vec<f64>,
    constraint: Option<(usize, Vec<f64>)>,
    /// Index of the node whose gain is used from there on.
    gain_index: Vec<usize>,
}

struct PathOutcome {
    cost: f64,
    terminal: f64,
    xs: Vec<f64>,
    us: Vec<f64>,
}

struct BlockSums {
    costs: Vec<f64>,
    terminals: Vec<f64>,
    sum_x: Vec<f64>,
    sum_x2: Vec<f64>,
    sum_u: Vec<f64>,
    first_path_x: Option<Vec<f64>>,
}

impl<'a> Engine<'a> {
    fn new(
        p: &'a LqProblem,
        gain: &MatrixPath,
        ff: &MatrixPath,
        constraint: Option<&Matrix>,
        freeze_after: Option<usize>,
    ) -> Self {
        let nodes = p.grid.nodes();
        let gain_index = (0..nodes)
            .map(|j| freeze_after.map_or(j, |last| j.min(last)))
            .collect();
        Engine {
            p,
            a: flat(&p.a),
            b: flat(&p.b),
            abar: flat(&p.abar),
            bbar: flat(&p.bbar),
            q: flat(&p.q),
            r: flat(&p.r),
            h: p.h.transpose().as_slice().to_vec(),
            gain: flat(gain),
            ff: flat(ff),
            constraint: constraint.map(|m| (m.nrows(), m.transpose().as_slice().to_vec())),
            gain_index,
        }
    }

    fn run_path(&self, path: usize, seed: u64) -> Result<PathOutcome, SimulationError> {
        let (n, m) = (self.p.n, self.p.m);
        let grid = &self.p.grid;
        let h = grid.h();
        let sqrt_h = h.sqrt();
        let mut rng = path_rng(seed, path as u64);
        let mut x = self.p.x0.clone();
        let mut u = vec![0.0; m];
        let mut tmp_n = vec![0.0; n];
        let mut drift = vec![0.0; n];
        let mut diff = vec![0.0; n];
        let mut xs = Vec::with_capacity(grid.nodes() * n);
        let mut us = Vec::with_capacity(grid.nodes() * m);
        let mut running = 0.0;
        for j in 0..grid.nodes() {
            let gj = self.gain_index[j];
            matvec(&self.gain[gj * m * n..(gj + 1) * m * n], &x, &mut u);
            for (ui, fi) in u.iter_mut().zip(&self.ff[j * m..(j + 1) * m]) {
                *ui += fi;
            }
            let w = if j == 0 || j == grid.steps { 0.5 } else { 1.0 };
            running += w
                * (quad(&self.q[j * n * n..(j + 1) * n * n], &x)
                    + quad(&self.r[j * m * m..(j + 1) * m * m], &u));
            xs.extend_from_slice(&x);
            us.extend_from_slice(&u);
            if j == grid.steps {
                break;
            }
            let dw: f64 = StandardNormal.sample(&mut rng);
            let dw = dw * sqrt_h;
            matvec(&self.a[j * n * n..(j + 1) * n * n], &x, &mut drift);
            matvec(&self.b[j * n * m..(j + 1) * n * m], &u, &mut tmp_n);
            for (d, t) in drift.iter_mut().zip(&tmp_n) {
                *d += t;
            }
            matvec(&self.abar[j * n * n..(j + 1) * n * n], &x, &mut diff);
            matvec(&self.bbar[j * n * m..(j + 1) * n * m], &u, &mut tmp_n);
            let mut norm2 = 0.0;
            for i in 0..n {
                x[i] += h * drift[i] + (diff[i] + tmp_n[i]) * dw;
                norm2 += x[i] * x[i];
            }
            if norm2.is_nan() || norm2.sqrt() > BLOWUP_STATE {
                return Err(SimulationError::Blowup {
                    path,
                    time: grid.time(j + 1),
                });
            }
        }
        let terminal = match &self.constraint {
            Some((rows, mflat)) => {
                let mut mx = vec![0.0; *rows];
                matvec(mflat, &x, &mut mx);
                mx.iter().map(|v| v * v).sum()
            }
            None => 0.0,
        };
        Ok(PathOutcome {
            cost: running * h + quad(&self.h, &x),
            terminal,
            xs,
            us,
        })
    }

    fn run_block(&self, block: usize, paths: usize, seed: u64) -> Result<BlockSums, SimulationError> {
        let (n, m) = (self.p.n, self.p.m);
        let nodes = self.p.grid.nodes();
        let start = block * BLOCK;
        let end = (start + BLOCK).min(paths);
        let mut sums = BlockSums {
            costs: Vec::with_capacity(end - start),
            terminals: Vec::with_capacity(end - start),
            sum_x: vec![0.0; nodes * n],
            sum_x2: vec![0.0; nodes * n],
            sum_u: vec![0.0; nodes * m],
            first_path_x: None,
        };
        for path in start..end {
            let out = self.run_path(path, seed)?;
            for (k, v) in out.xs.iter().enumerate() {
                sums.sum_x[k] += v;
                sums.sum_x2[k] += v * v;
            }
            for (k, v) in out.us.iter().enumerate() {
                sums.sum_u[k] += v;
            }
            sums.costs.push(out.cost);
            sums.terminals.push(out.terminal);
            if path == 0 {
                sums.first_path_x = Some(out.xs);
            }
        }
        Ok(sums)
    }

    /// All paths, merged in block order.
    fn run(&self, mc: &MonteCarloConfig) -> Result<Merged, SimulationError> {
        let blocks = mc.paths.div_ceil(BLOCK);
        let results: Vec<Result<BlockSums, SimulationError>> = (0..blocks)
            .into_par_iter()
            .map(|b| self.run_block(b, mc.paths, mc.seed))
            .collect();
        let mut merged: Option<BlockSums> = None;
        for r in results {
            let r = r?;
            merged = Some(match merged {
                None => r,
                Some(mut acc) => {
                    for (a, b) in acc.sum_x.iter_mut().zip(&r.sum_x) {
                        *a += b;
                    }
                    for (a, b) in acc.sum_x2.iter_mut().zip(&r.sum_x2) {
                        *a += b;
                    }
                    for (a, b) in acc.sum_u.iter_mut().zip(&r.sum_u) {
                        *a += b;
                    }
                    acc.costs.extend(r.costs);
                    acc.terminals.extend(r.terminals);
                    acc
                }
            });
        }
        let s = merged.expect("at least one path");
        Ok(Merged { sums: s, paths: mc.paths })
    }
}

struct Merged {
    sums: BlockSums,
    paths: usize,
}

impl Merged {
    /// Per-node mean and variance of the state and mean of the control.
    fn summary(&self, n: usize, m: usize, nodes: usize) -> [Vec<Vec<f64>>; 3] {
        let count = self.paths as f64;
        let mut mean_x = Vec::with_capacity(nodes);
        let mut var_x = Vec::with_capacity(nodes);
        let mut mean_u = Vec::with_capacity(nodes);
        for j in 0..nodes {
            let mx: Vec<f64> = (0..n).map(|i| self.sums.sum_x[j * n + i] / count).collect();
            let vx: Vec<f64> = (0..n)
                .map(|i| {
                    let e2 = self.sums.sum_x2[j * n + i] / count;
                    (e2 - mx[i] * mx[i]).max(0.0)
                })
                .collect();
            mean_u.push((0..m).map(|i| self.sums.sum_u[j * m + i] / count).collect());
            mean_x.push(mx);
            var_x.push(vx);
        }
        [mean_x, var_x, mean_u]
    }
}

fn check_dims(p: &LqProblem, ctrl: &ControllerSpec) -> Result<(), SimulationError> {
    if ctrl.grid != p.grid {
        return Err(SimulationError::Mismatch("time grids differ".into()));
    }
    if ctrl.gain.shape() != (p.m, p.n) || ctrl.feedforward.shape() != (p.m, 1) {
        return Err(SimulationError::Mismatch(format!(
            "gain is {:?} and feedforward {:?}, expected ({}, {}) and ({}, 1)",
            ctrl.gain.shape(),
            ctrl.feedforward.shape(),
            p.m,
            p.n,
            p.m
        )));
    }
    if ctrl.eq_u.shape() != (p.m, p.m) || ctrl.eq_x.shape() != (p.m, p.n) {
        return Err(SimulationError::Mismatch("equilibrium blocks have wrong shapes".into()));
    }
    if let Some(c) = &ctrl.constraint {
        if c.ncols() != p.n {
            return Err(SimulationError::Mismatch("terminal constraint has wrong width".into()));
        }
    }
    Ok(())
}

/// Max over nodes in `[t0, T − ε]` of `‖eq_u u + eq_x x + eq_ff‖` along a
/// state trajectory (row-major, one state per node), with `u` from `ctrl`.
pub fn equilibrium_residual(ctrl: &ControllerSpec, trajectory: &[f64], epsilon: f64) -> f64 {
    let n = ctrl.gain.shape().1;
    let last = ctrl.grid.clamp_index(epsilon);
    let freeze = frozen_index(ctrl, epsilon);
    (0..=last)
        .map(|j| {
            let x = Matrix::from_column_slice(n, 1, &trajectory[j * n..(j + 1) * n]);
            let gj = freeze.map_or(j, |f| j.min(f));
            let u = ctrl.gain.at(gj) * &x + ctrl.feedforward.at(j);
            (ctrl.eq_u.at(j) * u + ctrl.eq_x.at(j) * &x + ctrl.eq_ff.at(j)).norm()
        })
        .fold(0.0, f64::max)
}

fn frozen_index(ctrl: &ControllerSpec, epsilon: f64) -> Option<usize> {
    (ctrl.law == ControlLaw::ClosedLoop).then(|| ctrl.grid.clamp_index(epsilon))
}

/// Equilibrium residual of a solvable stack's controller along a trajectory.
pub fn mp_residual(
    stack: &LayerStack,
    ctrl: &ControllerSpec,
    trajectory: &[f64],
) -> Result<f64, SimulationError> {
    if !stack.verdict.is_solvable() {
        return Err(SimulationError::NotSolvable(stack.verdict.name().into()));
    }
    Ok(equilibrium_residual(ctrl, trajectory, ctrl.epsilon))
}

/// Simulates the closed system under `ctrl`. Closed-loop gains are frozen
/// from the last node not later than `T − epsilon`.
pub fn simulate(
    p: &LqProblem,
    ctrl: &ControllerSpec,
    mc: &MonteCarloConfig,
    epsilon: f64,
) -> Result<SimulationReport, SimulationError> {
    check_dims(p, ctrl)?;
    if mc.paths == 0 {
        return Err(SimulationError::Mismatch("need at least one path".into()));
    }
    let engine = Engine::new(
        p,
        &ctrl.gain,
        &ctrl.feedforward,
        ctrl.constraint.as_ref(),
        frozen_index(ctrl, epsilon),
    );
    let merged = engine.run(mc)?;
    let (cost_mean, cost_stderr) = mean_stderr(&merged.sums.costs);
    let (terminal_residual, terminal_residual_stderr) = mean_stderr(&merged.sums.terminals);
    let first = merged.sums.first_path_x.as_ref().expect("path 0 recorded");
    let mp_residual_max = equilibrium_residual(ctrl, first, epsilon);
    let [mean_x, var_x, mean_u] = merged.summary(p.n, p.m, p.grid.nodes());
    Ok(SimulationReport {
        paths: mc.paths,
        seed: mc.seed,
        epsilon,
        cost_mean,
        cost_stderr,
        terminal_residual,
        terminal_residual_stderr,
        mp_residual_max,
        mean_x,
        var_x,
        mean_u,
    })
}

/// Cost of an exogenous control signal (`m × 1` samples on the grid).
pub fn cost_of(
    p: &LqProblem,
    signal: &MatrixPath,
    mc: &MonteCarloConfig,
) -> Result<CostEstimate, SimulationError> {
    if signal.grid != p.grid || signal.shape() != (p.m, 1) {
        return Err(SimulationError::Mismatch("signal must be m x 1 on the problem grid".into()));
    }
    if mc.paths == 0 {
        return Err(SimulationError::Mismatch("need at least one path".into()));
    }
    let zero_gain = MatrixPath::constant(p.grid, Matrix::zeros(p.m, p.n));
    let engine = Engine::new(p, &zero_gain, signal, None, None);
    let merged = engine.run(mc)?;
    let (mean, stderr) = mean_stderr(&merged.sums.costs);
    Ok(CostEstimate { mean, stderr })
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    pub cost: f64,
    /// Optimal feedback per node; the one at `T` is the decision of the last sub-step.
    pub gains: MatrixPath,
}

/// Exact dynamic programming for the Euler–Maruyama discretization
/// `x⁺ = (I + δA)x + δBu + (Āx + B̄u)√δ ξ` with cost
/// `δ Σ (x'Qx + u'Ru) + x_N'Hx_N`, on a grid `substeps` times finer than
/// the problem's. Gains are reported at the problem's nodes.
///
/// A singular curvature `R + δB'SB + B̄'SB̄` is reported as an error.
pub fn dp_oracle(p: &LqProblem, substeps: usize) -> Result<OracleResult, SimulationError> {
    let grid = p.grid;
    let substeps = substeps.max(1);
    let delta = grid.h() / substeps as f64;
    let n = p.n;
    let mut s = p.h.clone();
    let mut gains = vec![Matrix::zeros(p.m, n); grid.nodes()];
    let coefficient = |path: &MatrixPath, j: usize, t: f64| {
        if path.is_constant() {
            path.at(j).clone()
        } else {
            path.eval_at(t).expect("sub-step time lies on the horizon")
        }
    };
    for j in (0..grid.steps).rev() {
        for sub in (0..substeps).rev() {
            let t = grid.time(j) + sub as f64 * delta;
            let f = Matrix::identity(n, n) + coefficient(&p.a, j, t) * delta;
            let g = coefficient(&p.b, j, t) * delta;
            let bbar = coefficient(&p.bbar, j, t);
            let abar = coefficient(&p.abar, j, t);
            // curvature and cross term, divided by δ
            let psi = coefficient(&p.r, j, t) + (g.transpose() * &s * &g) / delta + bbar.transpose() * &s * &bbar;
            let psi = (&psi + psi.transpose()) * 0.5;
            let lam = (g.transpose() * &s * &f) / delta + bbar.transpose() * &s * &abar;
            let floor = 1e-6 * (1.0 + psi.norm()).sqrt();
            let chol = psi
                .clone()
                .cholesky()
                .filter(|c| c.l().diagonal().iter().all(|d| *d > floor))
                .ok_or(SimulationError::OracleInapplicable { time: t })?;
            let k = -chol.solve(&lam);
            s = f.transpose() * &s * &f
                + (abar.transpose() * &s * &abar + coefficient(&p.q, j, t)) * delta
                + lam.transpose() * &k * delta;
            s = (&s + s.transpose()) * 0.5;
            if j + 1 == grid.steps && sub + 1 == substeps {
                gains[grid.steps] = k.clone();
            }
            if sub == 0 {
                gains[j] = k;
            }
        }
    }
    let x0 = p.x0_matrix();
    let cost = (x0.transpose() * &s * &x0)[(0, 0)];
    Ok(OracleResult {
        cost,
        gains: MatrixPath { grid, samples: gains },
    })
}
