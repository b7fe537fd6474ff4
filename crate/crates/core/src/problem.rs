//! Problem instances: time grid, sampled coefficient paths, file ingestion.

use crate::matops::{asymmetry, from_rows, symmetrize, to_rows, Matrix};
use crate::simulate::{cost_of, MonteCarloConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_STEPS: usize = 1000;
const SYMMETRY_REJECT: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum ProblemError {
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid problem: {0}")]
    Validation(String),
    #[error("time {t} outside [{t0}, {t_end}]")]
    Range { t: f64, t0: f64, t_end: f64 },
}

fn invalid(msg: impl Into<String>) -> ProblemError {
    ProblemError::Validation(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub t0: f64,
    #[serde(rename = "T")]
    pub t_end: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, t_end: f64, steps: usize) -> Result<Self, ProblemError> {
        if !(t0.is_finite() && t_end.is_finite()) || t_end <= t0 {
            return Err(invalid(format!("horizon [{t0}, {t_end}] is empty")));
        }
        if steps < 2 {
            return Err(invalid(format!("steps = {steps}, need at least 2")));
        }
        Ok(TimeGrid { t0, t_end, steps })
    }

    pub fn h(&self) -> f64 {
        (self.t_end - self.t0) / self.steps as f64
    }

    pub fn span(&self) -> f64 {
        self.t_end - self.t0
    }

    pub fn nodes(&self) -> usize {
        self.steps + 1
    }

    pub fn time(&self, i: usize) -> f64 {
        if i == self.steps {
            self.t_end
        } else {
            self.t0 + i as f64 * self.h()
        }
    }

    /// Last node not later than `T − eps` (up to rounding of the node times).
    pub fn clamp_index(&self, eps: f64) -> usize {
        let cutoff = self.t_end - eps + 1e-9 * self.h();
        (0..self.nodes())
            .rev()
            .find(|&i| self.time(i) <= cutoff)
            .unwrap_or(0)
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.nodes()).map(|i| self.time(i)).collect()
    }
}

/// Matrix-valued function of time, sampled at every grid node and
/// interpolated piecewise-linearly in between.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "PathRepr", try_from = "PathRepr")]
pub struct MatrixPath {
    pub grid: TimeGrid,
    pub samples: Vec<Matrix>,
}

impl MatrixPath {
    pub fn new(grid: TimeGrid, samples: Vec<Matrix>) -> Result<Self, ProblemError> {
        if samples.len() != grid.nodes() {
            return Err(invalid(format!(
                "path has {} samples, grid has {} nodes",
                samples.len(),
                grid.nodes()
            )));
        }
        let shape = samples[0].shape();
        if samples.iter().any(|s| s.shape() != shape) {
            return Err(invalid("path samples have differing shapes"));
        }
        Ok(MatrixPath { grid, samples })
    }

    pub fn constant(grid: TimeGrid, m: Matrix) -> Self {
        MatrixPath {
            grid,
            samples: vec![m; grid.nodes()],
        }
    }

    pub fn from_fn(grid: TimeGrid, mut f: impl FnMut(usize, f64) -> Matrix) -> Self {
        MatrixPath {
            grid,
            samples: (0..grid.nodes()).map(|i| f(i, grid.time(i))).collect(),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.samples[0].shape()
    }

    pub fn at(&self, i: usize) -> &Matrix {
        &self.samples[i]
    }

    /// Value halfway between nodes `i` and `i + 1`.
    pub fn midpoint(&self, i: usize) -> Matrix {
        (&self.samples[i] + &self.samples[i + 1]) * 0.5
    }

    pub fn is_constant(&self) -> bool {
        self.samples.iter().all(|s| s == &self.samples[0])
    }

    pub fn eval_at(&self, t: f64) -> Result<Matrix, ProblemError> {
        let g = &self.grid;
        let slack = 1e-12 * g.span();
        if !(t >= g.t0 - slack && t <= g.t_end + slack) {
            return Err(ProblemError::Range {
                t,
                t0: g.t0,
                t_end: g.t_end,
            });
        }
        let t = t.clamp(g.t0, g.t_end);
        let i = (((t - g.t0) / g.h()).floor() as usize).min(g.steps - 1);
        let (ta, tb) = (g.time(i), g.time(i + 1));
        if t == ta {
            return Ok(self.samples[i].clone());
        }
        if t == tb {
            return Ok(self.samples[i + 1].clone());
        }
        let w = (t - ta) / (tb - ta);
        Ok(&self.samples[i] * (1.0 - w) + &self.samples[i + 1] * w)
    }

    pub fn map(&self, f: impl Fn(&Matrix) -> Matrix) -> MatrixPath {
        MatrixPath {
            grid: self.grid,
            samples: self.samples.iter().map(f).collect(),
        }
    }

    pub fn max_norm(&self) -> f64 {
        self.samples.iter().map(|s| s.norm()).fold(0.0, f64::max)
    }
}

#[derive(Serialize, Deserialize)]
struct PathRepr {
    grid: TimeGrid,
    rows: usize,
    cols: usize,
    /// One row-major block per node.
    samples: Vec<Vec<f64>>,
}

impl From<MatrixPath> for PathRepr {
    fn from(p: MatrixPath) -> Self {
        let (rows, cols) = p.shape();
        PathRepr {
            grid: p.grid,
            rows,
            cols,
            samples: p
                .samples
                .iter()
                .map(|m| m.transpose().as_slice().to_vec())
                .collect(),
        }
    }
}

impl TryFrom<PathRepr> for MatrixPath {
    type Error = String;

    fn try_from(r: PathRepr) -> Result<Self, String> {
        let grid = TimeGrid::new(r.grid.t0, r.grid.t_end, r.grid.steps).map_err(|e| e.to_string())?;
        if r.samples.iter().any(|s| s.len() != r.rows * r.cols) {
            return Err("path sample has the wrong number of entries".into());
        }
        let samples = r
            .samples
            .iter()
            .map(|s| Matrix::from_row_slice(r.rows, r.cols, s))
            .collect();
        MatrixPath::new(grid, samples).map_err(|e| e.to_string())
    }
}

/// Solver knobs that may travel with a problem file.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverSettings {
    pub rtol: f64,
    pub mc_paths: usize,
    pub seed: u64,
    /// Absolute time; `None` means `1e-3 · (T − t0)`.
    pub epsilon_clamp: Option<f64>,
    pub terminal_candidates: Vec<Matrix>,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings {
            rtol: 1e-10,
            mc_paths: 20000,
            seed: 42,
            epsilon_clamp: None,
            terminal_candidates: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LqProblem {
    pub n: usize,
    pub m: usize,
    pub a: MatrixPath,
    pub b: MatrixPath,
    pub abar: MatrixPath,
    pub bbar: MatrixPath,
    pub q: MatrixPath,
    pub r: MatrixPath,
    pub h: Matrix,
    pub grid: TimeGrid,
    pub x0: Vec<f64>,
    pub solver: SolverSettings,
}

impl LqProblem {
    /// Builds and validates an instance with time-invariant coefficients.
    #[allow(clippy::too_many_arguments)]
    pub fn constant(
        a: Matrix,
        b: Matrix,
        abar: Matrix,
        bbar: Matrix,
        q: Matrix,
        r: Matrix,
        h: Matrix,
        grid: TimeGrid,
        x0: Vec<f64>,
    ) -> Result<Self, ProblemError> {
        let c = |m: Matrix| MatrixPath::constant(grid, m);
        LqProblem {
            n: a.nrows(),
            m: b.ncols(),
            a: c(a),
            b: c(b),
            abar: c(abar),
            bbar: c(bbar),
            q: c(q),
            r: c(r),
            h,
            grid,
            x0,
            solver: SolverSettings::default(),
        }
        .validated()
    }

    /// Checks dimensions and finiteness and symmetrizes the weights.
    pub fn validated(mut self) -> Result<Self, ProblemError> {
        let (n, m) = (self.n, self.m);
        if n == 0 || m == 0 {
            return Err(invalid("n and m must be at least 1"));
        }
        if self.x0.len() != n {
            return Err(invalid(format!("x0 has length {}, expected {n}", self.x0.len())));
        }
        if self.x0.iter().any(|v| !v.is_finite()) {
            return Err(invalid("x0 has non-finite entries"));
        }
        let grid = self.grid;
        for (name, path, shape) in [
            ("A", &self.a, (n, n)),
            ("B", &self.b, (n, m)),
            ("Abar", &self.abar, (n, n)),
            ("Bbar", &self.bbar, (n, m)),
            ("Q", &self.q, (n, n)),
            ("R", &self.r, (m, m)),
        ] {
            if path.grid != grid || path.samples.len() != grid.nodes() {
                return Err(invalid(format!("{name} is not sampled on the problem grid")));
            }
            for (i, s) in path.samples.iter().enumerate() {
                if s.shape() != shape {
                    return Err(invalid(format!(
                        "{name} at node {i} is {}x{}, expected {}x{}",
                        s.nrows(),
                        s.ncols(),
                        shape.0,
                        shape.1
                    )));
                }
                if s.iter().any(|v| !v.is_finite()) {
                    return Err(invalid(format!("{name} at node {i} has non-finite entries")));
                }
            }
        }
        if self.h.shape() != (n, n) || self.h.iter().any(|v| !v.is_finite()) {
            return Err(invalid(format!("H must be a finite {n}x{n} matrix")));
        }
        for (name, path) in [("Q", &mut self.q), ("R", &mut self.r)] {
            for (i, s) in path.samples.iter_mut().enumerate() {
                let asym = asymmetry(s);
                if asym > SYMMETRY_REJECT {
                    return Err(invalid(format!(
                        "{name} at node {i} is not symmetric (asymmetry {asym:e})"
                    )));
                }
                *s = symmetrize(s);
            }
        }
        let asym = asymmetry(&self.h);
        if asym > SYMMETRY_REJECT {
            return Err(invalid(format!("H is not symmetric (asymmetry {asym:e})")));
        }
        self.h = symmetrize(&self.h);

        let s = &self.solver;
        if !(s.rtol > 0.0 && s.rtol.is_finite()) {
            return Err(invalid("solver.rtol must be positive"));
        }
        if s.mc_paths == 0 {
            return Err(invalid("solver.mc_paths must be at least 1"));
        }
        if let Some(e) = s.epsilon_clamp {
            if !(e > 0.0 && e < grid.span()) {
                return Err(invalid("solver.epsilon_clamp must lie in (0, T - t0)"));
            }
        }
        for (i, c) in s.terminal_candidates.iter().enumerate() {
            if c.shape() != (n, n) || c.iter().any(|v| !v.is_finite()) {
                return Err(invalid(format!("terminal candidate {i} must be a finite {n}x{n} matrix")));
            }
        }
        Ok(self)
    }

    pub fn x0_matrix(&self) -> Matrix {
        Matrix::from_column_slice(self.n, 1, &self.x0)
    }

    /// ε-clamp as absolute time.
    pub fn epsilon(&self) -> f64 {
        self.solver
            .epsilon_clamp
            .unwrap_or(1e-3 * self.grid.span())
    }

    pub fn with_x0(&self, x0: Vec<f64>) -> LqProblem {
        LqProblem { x0, ..self.clone() }
    }

    pub fn to_json(&self) -> String {
        let file = ProblemFile::from_problem(self);
        serde_json::to_string_pretty(&file).expect("problem serializes")
    }
}

type Rows = Vec<Vec<f64>>;

#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum CoefficientFile {
    Constant(Rows),
    Samples(Vec<Rows>),
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SolverFile {
    #[serde(skip_serializing_if = "Option::is_none")]
    rtol: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mc_paths: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    epsilon_clamp: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    terminal_candidates: Option<Vec<Rows>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[allow(non_snake_case)]
struct ProblemFile {
    n: usize,
    m: usize,
    t0: f64,
    T: f64,
    #[serde(default = "default_steps")]
    steps: usize,
    x0: Vec<f64>,
    A: CoefficientFile,
    B: CoefficientFile,
    Abar: CoefficientFile,
    Bbar: CoefficientFile,
    Q: CoefficientFile,
    R: CoefficientFile,
    H: Rows,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    solver: Option<SolverFile>,
}

fn default_steps() -> usize {
    DEFAULT_STEPS
}

fn matrix_from_rows(name: &str, rows: &Rows) -> Result<Matrix, ProblemError> {
    from_rows(rows).ok_or_else(|| invalid(format!("{name} is empty or ragged")))
}

impl CoefficientFile {
    fn into_path(self, name: &str, grid: TimeGrid) -> Result<MatrixPath, ProblemError> {
        match self {
            CoefficientFile::Constant(rows) => {
                Ok(MatrixPath::constant(grid, matrix_from_rows(name, &rows)?))
            }
            CoefficientFile::Samples(list) => {
                if list.len() != grid.nodes() {
                    return Err(invalid(format!(
                        "{name} has {} samples, expected steps+1 = {}",
                        list.len(),
                        grid.nodes()
                    )));
                }
                let samples = list
                    .iter()
                    .map(|r| matrix_from_rows(name, r))
                    .collect::<Result<Vec<_>, _>>()?;
                MatrixPath::new(grid, samples)
            }
        }
    }

    fn from_path(path: &MatrixPath) -> Self {
        if path.is_constant() {
            CoefficientFile::Constant(to_rows(&path.samples[0]))
        } else {
            CoefficientFile::Samples(path.samples.iter().map(to_rows).collect())
        }
    }
}

impl ProblemFile {
    fn from_problem(p: &LqProblem) -> Self {
        let s = &p.solver;
        let d = SolverSettings::default();
        let solver = SolverFile {
            rtol: (s.rtol != d.rtol).then_some(s.rtol),
            mc_paths: (s.mc_paths != d.mc_paths).then_some(s.mc_paths),
            seed: (s.seed != d.seed).then_some(s.seed),
            epsilon_clamp: s.epsilon_clamp,
            terminal_candidates: (!s.terminal_candidates.is_empty())
                .then(|| s.terminal_candidates.iter().map(to_rows).collect()),
        };
        let empty = solver.rtol.is_none()
            && solver.mc_paths.is_none()
            && solver.seed.is_none()
            && solver.epsilon_clamp.is_none()
            && solver.terminal_candidates.is_none();
        ProblemFile {
            n: p.n,
            m: p.m,
            t0: p.grid.t0,
            T: p.grid.t_end,
            steps: p.grid.steps,
            x0: p.x0.clone(),
            A: CoefficientFile::from_path(&p.a),
            B: CoefficientFile::from_path(&p.b),
            Abar: CoefficientFile::from_path(&p.abar),
            Bbar: CoefficientFile::from_path(&p.bbar),
            Q: CoefficientFile::from_path(&p.q),
            R: CoefficientFile::from_path(&p.r),
            H: to_rows(&p.h),
            solver: (!empty).then_some(solver),
        }
    }
}

pub fn load_problem(text: &[u8]) -> Result<LqProblem, ProblemError> {
    let file: ProblemFile = serde_json::from_slice(text).map_err(|e| ProblemError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let grid = TimeGrid::new(file.t0, file.T, file.steps)?;
    let sf = file.solver.unwrap_or_default();
    let d = SolverSettings::default();
    let terminal_candidates = sf
        .terminal_candidates
        .unwrap_or_default()
        .iter()
        .enumerate()
        .map(|(i, rows)| matrix_from_rows(&format!("terminal candidate {i}"), rows))
        .collect::<Result<Vec<_>, _>>()?;
    LqProblem {
        n: file.n,
        m: file.m,
        a: file.A.into_path("A", grid)?,
        b: file.B.into_path("B", grid)?,
        abar: file.Abar.into_path("Abar", grid)?,
        bbar: file.Bbar.into_path("Bbar", grid)?,
        q: file.Q.into_path("Q", grid)?,
        r: file.R.into_path("R", grid)?,
        h: matrix_from_rows("H", &file.H)?,
        grid,
        x0: file.x0,
        solver: SolverSettings {
            rtol: sf.rtol.unwrap_or(d.rtol),
            mc_paths: sf.mc_paths.unwrap_or(d.mc_paths),
            seed: sf.seed.unwrap_or(d.seed),
            epsilon_clamp: sf.epsilon_clamp,
            terminal_candidates,
        },
    }
    .validated()
}

/// Reads a JSON list of square matrices (`[[[..]], ...]`).
pub fn load_matrix_list(text: &[u8]) -> Result<Vec<Matrix>, ProblemError> {
    let list: Vec<Rows> = serde_json::from_slice(text).map_err(|e| ProblemError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    list.iter()
        .enumerate()
        .map(|(i, rows)| matrix_from_rows(&format!("matrix {i}"), rows))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvexityReport {
    pub min_cost_observed: f64,
    pub violated: bool,
    /// (mean, stderr) per probed control; the first is the zero control.
    /// NaN marks a control whose simulation blew up.
    pub costs: Vec<(f64, f64)>,
}

pub const PROBE_PATHS: usize = 1000;
const PROBE_PIECES: usize = 10;

/// Monte Carlo falsification test for `J(t0, 0; u) ≥ 0`.
///
/// Starts from `x0 = 0` and tries the zero control followed by random
/// piecewise-constant controls. A cost below `-3·stderr` is a violation.
/// A negative answer proves nothing.
pub fn convexity_probe(p: &LqProblem, num_controls: usize, seed: u64) -> ConvexityReport {
    let zero_start = p.with_x0(vec![0.0; p.n]);
    let mc = MonteCarloConfig {
        paths: PROBE_PATHS,
        seed,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = p.grid;
    let mut costs = Vec::with_capacity(num_controls.max(1));
    for k in 0..num_controls.max(1) {
        let signal = if k == 0 {
            MatrixPath::constant(grid, Matrix::zeros(p.m, 1))
        } else {
            let pieces: Vec<Matrix> = (0..PROBE_PIECES)
                .map(|_| Matrix::from_fn(p.m, 1, |_, _| StandardNormal.sample(&mut rng)))
                .collect();
            MatrixPath::from_fn(grid, |i, _| {
                pieces[(i * PROBE_PIECES / grid.nodes()).min(PROBE_PIECES - 1)].clone()
            })
        };
        let est = match cost_of(&zero_start, &signal, &mc) {
            Ok(e) => (e.mean, e.stderr),
            // a blown-up path says nothing about the sign of the cost
            Err(_) => (f64::NAN, 0.0),
        };
        costs.push(est);
    }
    let min_cost_observed = costs.iter().map(|c| c.0).fold(f64::INFINITY, f64::min);
    let violated = costs.iter().any(|&(mean, se)| mean < -3.0 * se);
    ConvexityReport {
        min_cost_observed,
        violated,
        costs,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const EXAMPLE: &str = r#"{
        "n": 1, "m": 2, "t0": 0.0, "T": 1.0, "steps": 1000, "x0": [1.0],
        "A": {"constant": [[0.0]]},
        "B": {"constant": [[1.0, 1.0]]},
        "Abar": {"constant": [[0.0]]},
        "Bbar": {"constant": [[1.0, -1.0]]},
        "Q": {"constant": [[0.0]]},
        "R": {"constant": [[0.0, 0.0], [0.0, 0.0]]},
        "H": [[1.0]]
    }"#;

    #[test]
    fn loads_two_channel_example() {
        let p = load_problem(EXAMPLE.as_bytes()).unwrap();
        assert_eq!((p.n, p.m), (1, 2));
        assert_eq!(p.grid.nodes(), 1001);
        assert_eq!(p.b.at(500)[(0, 1)], 1.0);
        assert_eq!(p.bbar.at(0)[(0, 1)], -1.0);
        assert_eq!(p.solver, SolverSettings::default());
    }

    #[test]
    fn rejects_wrong_b_columns() {
        let text = EXAMPLE.replace(r#""B": {"constant": [[1.0, 1.0]]}"#, r#""B": {"constant": [[1.0]]}"#);
        assert!(matches!(load_problem(text.as_bytes()), Err(ProblemError::Validation(_))));
    }

    #[test]
    fn rejects_asymmetric_weight() {
        let text = EXAMPLE.replace("[[0.0, 0.0], [0.0, 0.0]]", "[[0.0, 1.0], [0.0, 0.0]]");
        assert!(matches!(load_problem(text.as_bytes()), Err(ProblemError::Validation(_))));
    }

    #[test]
    fn symmetrizes_small_asymmetry() {
        let text = EXAMPLE.replace("[[0.0, 0.0], [0.0, 0.0]]", "[[1.0, 1e-10], [0.0, 1.0]]");
        let p = load_problem(text.as_bytes()).unwrap();
        assert_eq!(p.r.at(3)[(0, 1)], p.r.at(3)[(1, 0)]);
    }

    #[test]
    fn parse_error_has_position() {
        match load_problem(b"{\n  \"n\": 1,\n  \"m\": }") {
            Err(ProblemError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        match load_problem(b"{\"n\": 1}") {
            Err(ProblemError::Parse { message, .. }) => assert!(message.contains("missing field")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn sample_count_checked() {
        let text = EXAMPLE
            .replace("\"steps\": 1000", "\"steps\": 2")
            .replace(r#""A": {"constant": [[0.0]]}"#, r#""A": {"samples": [[[0.0]], [[1.0]]]}"#);
        assert!(matches!(load_problem(text.as_bytes()), Err(ProblemError::Validation(_))));
    }

    #[test]
    fn round_trip() {
        let mut p = load_problem(EXAMPLE.as_bytes()).unwrap();
        p.a = MatrixPath::from_fn(p.grid, |_, t| Matrix::from_element(1, 1, (3.0 * t).sin() / 7.0));
        p.solver.seed = 7;
        p.solver.terminal_candidates = vec![Matrix::from_element(1, 1, -0.1)];
        let back = load_problem(p.to_json().as_bytes()).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn interpolation() {
        let grid = TimeGrid::new(0.0, 1.0, 2).unwrap();
        let path = MatrixPath::from_fn(grid, |_, t| Matrix::from_element(1, 1, t));
        assert_eq!(path.eval_at(0.25).unwrap()[(0, 0)], 0.25);
        assert_eq!(path.eval_at(0.5).unwrap(), *path.at(1));
        assert_eq!(path.eval_at(1.0).unwrap(), *path.at(2));
        assert!(matches!(path.eval_at(1.5), Err(ProblemError::Range { .. })));
        assert!(matches!(path.eval_at(-0.1), Err(ProblemError::Range { .. })));

        let c = MatrixPath::constant(grid, Matrix::from_element(2, 2, 3.5));
        assert_eq!(c.eval_at(0.731).unwrap(), Matrix::from_element(2, 2, 3.5));
    }

    #[test]
    fn interpolation_exact_at_nodes() {
        let grid = TimeGrid::new(0.3, 2.9, 37).unwrap();
        let path = MatrixPath::from_fn(grid, |i, t| Matrix::from_element(1, 2, t * t + i as f64));
        for i in 0..grid.nodes() {
            assert_eq!(path.eval_at(grid.time(i)).unwrap(), *path.at(i));
        }
    }

    #[test]
    fn grid_validation() {
        assert!(TimeGrid::new(1.0, 1.0, 10).is_err());
        assert!(TimeGrid::new(0.0, 1.0, 1).is_err());
        let g = TimeGrid::new(0.0, 1.0, 3).unwrap();
        assert_eq!(g.time(3), 1.0);
    }
}
