//! Multi-layer reduction of irregular problems.
//!
//! Layer `i` coefficients (`A_i, Ā_i, D_i, …, G_i`) are built from the
//! Riccati solution `P_i` (the base solution when `i = 0`) and drive the
//! Riccati equation for `P_{i+1}`. The recursion stops when the range
//! condition holds for some candidate terminal value, when every candidate
//! leaves `Υ ≡ 0` with `Γ ≢ 0`, or when the free input directions run out.

use crate::matops::{
    last_columns, pinv, range_included, rank_of, row_compress, serde_rows, MatError, Matrix,
    RowCompression, Tolerance,
};
use crate::problem::{LqProblem, MatrixPath, TimeGrid};
use crate::riccati::{integrate_base, integrate_layer, RiccatiError, RiccatiSolution};
use crate::simulate::MonteCarloConfig;
pub use crate::synthesis::SteeringMode;
use crate::synthesis::{closed_loop_steer, open_loop_steer, ReducedSystem, SteeringResult, SynthesisError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

const SIDE_CONDITION_TOL: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum LayerError {
    #[error(transparent)]
    Riccati(#[from] RiccatiError),
    #[error(transparent)]
    Matrix(#[from] MatError),
    #[error("rank of Υ_{layer} changes along the horizon ({detail})")]
    RankProfile { layer: usize, detail: String },
    #[error("no controller exists for verdict {0}")]
    NotSolvable(String),
    #[error(transparent)]
    Synthesis(#[from] SynthesisError),
}

/// Coefficients of layer `index`, i.e. the data driving the Riccati
/// equation of `P_{index+1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCoefficients {
    pub index: usize,
    pub a: MatrixPath,
    pub abar: MatrixPath,
    pub d: MatrixPath,
    pub dbar: MatrixPath,
    pub f: MatrixPath,
    pub fbar: MatrixPath,
    pub b: MatrixPath,
    pub bbar: MatrixPath,
    pub c: MatrixPath,
    /// `H_index` (`B` for the base layer).
    pub h_in: MatrixPath,
    /// `H̄_index` (`B̄` for the base layer).
    pub hbar_in: MatrixPath,
    pub g: MatrixPath,
    /// Dimension of `u_{index+1}`.
    pub input_dim: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConditionId {
    Z17,
    Z3,
    SEC20,
    SEC16,
    JNJ5,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SideConditionReport {
    pub condition_id: ConditionId,
    pub max_violation: f64,
    pub nodes_violated: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum Verdict {
    Regular,
    IrregularSolvable {
        depth: usize,
        #[serde(with = "serde_rows")]
        terminal_constraint: Matrix,
    },
    Unsolvable {
        depth: usize,
        caveat: String,
    },
    Inconclusive {
        reason: String,
    },
}

impl Verdict {
    pub fn exit_code(&self) -> i32 {
        match self {
            Verdict::Regular | Verdict::IrregularSolvable { .. } => 0,
            Verdict::Unsolvable { .. } => 2,
            Verdict::Inconclusive { .. } => 3,
        }
    }

    pub fn is_solvable(&self) -> bool {
        self.exit_code() == 0
    }

    pub fn name(&self) -> &'static str {
        match self {
            Verdict::Regular => "Regular",
            Verdict::IrregularSolvable { .. } => "IrregularSolvable",
            Verdict::Unsolvable { .. } => "Unsolvable",
            Verdict::Inconclusive { .. } => "Inconclusive",
        }
    }
}

/// Which terminal values `P_k(T)` to try at each layer.
#[derive(Debug, Clone, PartialEq)]
pub struct TerminalPolicy {
    /// Try `0` and `−(Σ_{j<k} P_j(T) + H)` first.
    pub include_defaults: bool,
    pub extra: Vec<Matrix>,
}

impl Default for TerminalPolicy {
    fn default() -> Self {
        TerminalPolicy {
            include_defaults: true,
            extra: Vec::new(),
        }
    }
}

impl TerminalPolicy {
    pub fn for_problem(p: &LqProblem) -> Self {
        TerminalPolicy {
            include_defaults: true,
            extra: p.solver.terminal_candidates.clone(),
        }
    }

    pub fn candidates(&self, h: &Matrix, sum_previous: &Matrix) -> Vec<Matrix> {
        let n = h.nrows();
        let mut out: Vec<Matrix> = Vec::new();
        if self.include_defaults {
            out.push(Matrix::zeros(n, n));
            out.push(-(sum_previous + h));
        }
        out.extend(self.extra.iter().cloned());
        let mut unique: Vec<Matrix> = Vec::with_capacity(out.len());
        for c in out {
            if !unique.contains(&c) {
                unique.push(c);
            }
        }
        unique
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome")]
pub enum TrialOutcome {
    /// Range condition holds at every node.
    RangeHolds,
    /// `Υ ≡ 0` and `Γ ≢ 0`.
    Degenerate,
    /// Constant rank, range fails somewhere.
    RangeFails { rank: usize },
    NonConstantRank { min_rank: usize, max_rank: usize },
    Blowup { time: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateTrial {
    #[serde(with = "serde_rows")]
    pub terminal: Matrix,
    pub outcome: TrialOutcome,
    pub singular_nodes: usize,
}

/// Layer `k ≥ 1`: the coefficients of layer `k − 1`, the chosen `P_k`
/// solution, and the compressions of `I − Υ_{k−1}†Υ_{k−1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerRecord {
    pub k: usize,
    pub coeffs: LayerCoefficients,
    pub riccati: RiccatiSolution,
    pub compression: Vec<RowCompression>,
    /// `dim(u_k)`.
    pub m_k: usize,
    pub diagnostics: Vec<SideConditionReport>,
    pub trials: Vec<CandidateTrial>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerStack {
    pub base: RiccatiSolution,
    pub layers: Vec<LayerRecord>,
    pub verdict: Verdict,
    pub tol: Tolerance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaseClass {
    Regular,
    Irregular,
}

pub fn classify_base(sol: &RiccatiSolution, tol: &Tolerance) -> Result<BaseClass, MatError> {
    for (u, g) in sol.upsilon.samples.iter().zip(&sol.gamma.samples) {
        if !range_included(u, g, tol)? {
            return Ok(BaseClass::Irregular);
        }
    }
    Ok(BaseClass::Regular)
}

/// Where the coefficients of a new layer come from.
pub enum Parent<'a> {
    Base(&'a LqProblem),
    /// Coefficients of the previous layer; the accompanying solution is `P_index+1`.
    Layer(&'a LayerCoefficients),
}

/// Per-node inputs of the layer construction: `M, M̄, H, H̄` and the
/// parts of `D, D̄, F, F̄` that do not involve the current `Υ`.
struct Composite {
    m: Matrix,
    mbar: Matrix,
    h: Matrix,
    hbar: Matrix,
    d: Matrix,
    dbar: Matrix,
    f: Matrix,
    fbar: Matrix,
}

fn composite_base(p: &LqProblem, j: usize) -> Composite {
    let n = p.n;
    Composite {
        m: p.a.at(j).clone(),
        mbar: p.abar.at(j).clone(),
        h: p.b.at(j).clone(),
        hbar: p.bbar.at(j).clone(),
        d: Matrix::zeros(n, n),
        dbar: Matrix::zeros(n, n),
        f: Matrix::zeros(n, n),
        fbar: Matrix::zeros(n, n),
    }
}

fn composite_layer(
    c: &LayerCoefficients,
    pk: &Matrix,
    j: usize,
    tol: &Tolerance,
) -> Result<Composite, MatError> {
    let n = pk.nrows();
    let x = Matrix::identity(n, n) - pk * c.fbar.at(j);
    let xp = pinv(&x, tol)?;
    let xpp = &xp * pk;
    let (a, abar, d, dbar) = (c.a.at(j), c.abar.at(j), c.d.at(j), c.dbar.at(j));
    let (f, fbar, b, bbar) = (c.f.at(j), c.fbar.at(j), c.b.at(j), c.bbar.at(j));
    let drift = abar + dbar * pk;
    let h_t = b.transpose() + bbar.transpose() * &xpp * dbar;
    let hbar_t = bbar.transpose() * &xp;
    Ok(Composite {
        m: a + d * pk + f * &xpp * &drift,
        mbar: &drift + fbar * &xpp * &drift,
        h: h_t.transpose(),
        hbar: hbar_t.transpose(),
        d: d + f * &xpp * dbar,
        dbar: dbar + fbar * &xpp * dbar,
        f: f * &xp,
        fbar: fbar * &xp,
    })
}

/// Builds the coefficients of layer `index` from `sol` (the solution `P_index`,
/// or the base solution) and its parent.
///
/// `bottom_scale` multiplies the rows of every compression's bottom block;
/// the resulting controller must not depend on it.
pub fn build_layer(
    parent: Parent<'_>,
    sol: &RiccatiSolution,
    index: usize,
    tol: &Tolerance,
    bottom_scale: Option<&[f64]>,
) -> Result<(LayerCoefficients, Vec<RowCompression>), LayerError> {
    let grid = sol.p.grid;
    let nodes = grid.nodes();
    let mut cols: [Vec<Matrix>; 12] = Default::default();
    let mut compressions = Vec::with_capacity(nodes);
    let mut input_dim = None;

    for j in 0..nodes {
        let comp = match parent {
            Parent::Base(p) => composite_base(p, j),
            Parent::Layer(c) => composite_layer(c, sol.p.at(j), j, tol)?,
        };
        let upsilon = sol.upsilon.at(j);
        let gamma = sol.gamma.at(j);
        let up = pinv(upsilon, tol)?;
        let dim = upsilon.nrows();
        let proj = Matrix::identity(dim, dim) - &up * upsilon;
        let mut rc = row_compress(&proj, tol)?;
        if let Some(s) = bottom_scale {
            rc = rc.rescale_bottom(s);
        }
        let free = rc.rank();
        let expected = dim - rank_of(upsilon, tol)?.rank;
        if free != expected {
            return Err(LayerError::RankProfile {
                layer: index,
                detail: format!(
                    "at t = {} the projector has rank {free}, expected {expected}",
                    grid.time(j)
                ),
            });
        }
        match input_dim {
            None => input_dim = Some(free),
            Some(r) if r != free => {
                return Err(LayerError::RankProfile {
                    layer: index,
                    detail: format!("free dimension {r} at t0, {free} at t = {}", grid.time(j)),
                })
            }
            _ => {}
        }
        let tinv = last_columns(&rc.inverse_transform, free);
        let proj_tinv = &proj * &tinv;
        let hu = &comp.h * &up;
        let hbu = &comp.hbar * &up;
        let h_t = comp.h.transpose();
        let hbar_t = comp.hbar.transpose();
        let values = [
            &comp.m - &hu * gamma,
            &comp.mbar - &hbu * gamma,
            &comp.d - &hu * &h_t,
            &comp.dbar - &hbu * &h_t,
            &comp.f - &hu * &hbar_t,
            &comp.fbar - &hbu * &hbar_t,
            &comp.h * &proj_tinv,
            &comp.hbar * &proj_tinv,
            (gamma.transpose() * &proj_tinv).transpose(),
            comp.h,
            comp.hbar,
            tinv,
        ];
        for (col, v) in cols.iter_mut().zip(values) {
            col.push(v);
        }
        compressions.push(rc);
    }

    let [a, abar, d, dbar, f, fbar, b, bbar, c, h_in, hbar_in, g] =
        cols.map(|samples| MatrixPath { grid, samples });
    Ok((
        LayerCoefficients {
            index,
            a,
            abar,
            d,
            dbar,
            f,
            fbar,
            b,
            bbar,
            c,
            h_in,
            hbar_in,
            g,
            input_dim: input_dim.unwrap_or(0),
        },
        compressions,
    ))
}

/// `I − X†X` for `X = I − P F̄`.
fn x_projector(pk: &Matrix, fbar: &Matrix, tol: &Tolerance) -> Result<(Matrix, Matrix), MatError> {
    let n = pk.nrows();
    let x = Matrix::identity(n, n) - pk * fbar;
    let xp = pinv(&x, tol)?;
    let proj = Matrix::identity(n, n) - &xp * &x;
    Ok((xp, proj))
}

/// Left-hand sides of the necessary conditions of layer `k`, per node.
///
/// `coeffs` are the layer-`(k−1)` coefficients and `pk` the solution `P_k`.
/// `previous` carries the layer-`(k−2)` coefficients with `P_{k−1}` (k ≥ 2);
/// `bbar0` is the problem's `B̄` (k = 1).
pub fn side_condition_values(
    k: usize,
    coeffs: &LayerCoefficients,
    pk: &MatrixPath,
    previous: Option<(&LayerCoefficients, &MatrixPath)>,
    bbar0: Option<&MatrixPath>,
    tol: &Tolerance,
) -> Result<Vec<(ConditionId, Vec<f64>)>, MatError> {
    let nodes = pk.grid.nodes();
    let mut out: Vec<(ConditionId, Vec<f64>)> = Vec::new();
    let mut push = |id: ConditionId, j: usize, v: f64| {
        if let Some(entry) = out.iter_mut().find(|(c, _)| *c == id) {
            entry.1[j] = entry.1[j].max(v);
        } else {
            let mut vals = vec![0.0; nodes];
            vals[j] = v;
            out.push((id, vals));
        }
    };
    for j in 0..nodes {
        let (_, proj) = x_projector(pk.at(j), coeffs.fbar.at(j), tol)?;
        let drift_id = if k == 1 { ConditionId::Z3 } else { ConditionId::SEC16 };
        push(drift_id, j, (coeffs.abar.at(j).transpose() * &proj).norm());
        if k == 1 {
            if let Some(bb) = bbar0 {
                push(ConditionId::Z17, j, (bb.at(j).transpose() * &proj).norm());
            }
        } else if let Some((prev, pprev)) = previous {
            let (xp_prev, _) = x_projector(pprev.at(j), prev.fbar.at(j), tol)?;
            let tail = &xp_prev * &proj;
            if k == 2 {
                push(ConditionId::SEC20, j, (prev.bbar.at(j).transpose() * &tail).norm());
            } else {
                for l in [prev.bbar.at(j), prev.dbar.at(j), prev.fbar.at(j)] {
                    push(ConditionId::JNJ5, j, (l.transpose() * &tail).norm());
                }
            }
        }
    }
    Ok(out)
}

pub fn summarize_side_conditions(values: &[(ConditionId, Vec<f64>)]) -> Vec<SideConditionReport> {
    values
        .iter()
        .map(|(id, v)| SideConditionReport {
            condition_id: *id,
            max_violation: v.iter().copied().fold(0.0, f64::max),
            nodes_violated: v.iter().filter(|&&x| x > SIDE_CONDITION_TOL).count(),
        })
        .collect()
}

/// Side-condition diagnostics of `layers[idx]`, given the layers before it.
pub fn check_side_conditions(
    layers: &[LayerRecord],
    idx: usize,
    bbar0: Option<&MatrixPath>,
    tol: &Tolerance,
) -> Result<Vec<SideConditionReport>, MatError> {
    let rec = &layers[idx];
    let previous = (idx > 0).then(|| (&layers[idx - 1].coeffs, &layers[idx - 1].riccati.p));
    let values = side_condition_values(rec.k, &rec.coeffs, &rec.riccati.p, previous, bbar0, tol)?;
    Ok(summarize_side_conditions(&values))
}

fn classify_trial(sol: &RiccatiSolution, tol: &Tolerance) -> Result<TrialOutcome, MatError> {
    let ranks = &sol.rank_profile;
    let min_rank = *ranks.iter().min().unwrap_or(&0);
    let max_rank = *ranks.iter().max().unwrap_or(&0);
    let mut holds = true;
    for (u, g) in sol.upsilon.samples.iter().zip(&sol.gamma.samples) {
        if !range_included(u, g, tol)? {
            holds = false;
            break;
        }
    }
    Ok(if holds {
        TrialOutcome::RangeHolds
    } else if max_rank == 0 {
        TrialOutcome::Degenerate
    } else if min_rank != max_rank {
        TrialOutcome::NonConstantRank { min_rank, max_rank }
    } else {
        TrialOutcome::RangeFails { rank: min_rank }
    })
}

const UNSOLVABLE_CAVEAT: &str =
    "decided over the finite set of candidate terminal values, not over all terminal values";

/// Runs the layer loop from given first-layer coefficients.
///
/// `h` is the terminal weight of the original problem, used by the default
/// candidate `−(Σ P_j(T) + H)`. `bbar0` enables the first-layer `Z17` check.
#[allow(clippy::too_many_arguments)]
pub fn reduce_from_layer(
    first: LayerCoefficients,
    first_compression: Vec<RowCompression>,
    h: &Matrix,
    bbar0: Option<&MatrixPath>,
    max_depth: usize,
    policy: &TerminalPolicy,
    tol: &Tolerance,
    bottom_scale: Option<&[f64]>,
) -> Result<(Vec<LayerRecord>, Verdict), LayerError> {
    let n = h.nrows();
    let mut layers: Vec<LayerRecord> = Vec::new();
    let mut coeffs = first;
    let mut compression = first_compression;
    let mut sum_terminal = Matrix::zeros(n, n);

    for k in 1..=max_depth {
        if coeffs.input_dim == 0 {
            return Ok((
                layers,
                Verdict::Unsolvable {
                    depth: k - 1,
                    caveat: "no free input directions remain".into(),
                },
            ));
        }
        let mut trials = Vec::new();
        let mut solutions = Vec::new();
        for cand in policy.candidates(h, &sum_terminal) {
            match integrate_layer(&coeffs, &cand, tol) {
                Ok(sol) => {
                    let outcome = classify_trial(&sol, tol)?;
                    trials.push(CandidateTrial {
                        terminal: cand,
                        outcome,
                        singular_nodes: sol.singular_nodes.len(),
                    });
                    solutions.push(Some(sol));
                }
                Err(RiccatiError::Blowup { time }) => {
                    trials.push(CandidateTrial {
                        terminal: cand,
                        outcome: TrialOutcome::Blowup { time },
                        singular_nodes: 0,
                    });
                    solutions.push(None);
                }
                Err(RiccatiError::Matrix(e)) => return Err(e.into()),
            }
        }

        let pick = |pred: &dyn Fn(&TrialOutcome) -> bool| trials.iter().position(|t| pred(&t.outcome));
        let winner = pick(&|o| matches!(o, TrialOutcome::RangeHolds));
        let descend = pick(&|o| matches!(o, TrialOutcome::RangeFails { .. }));
        let all_degenerate =
            !trials.is_empty() && trials.iter().all(|t| t.outcome == TrialOutcome::Degenerate);
        let chosen = winner.or(descend).or(if all_degenerate { Some(0) } else { None });

        let Some(ci) = chosen else {
            let reason = trials
                .iter()
                .map(|t| format!("{:?}", t.outcome))
                .collect::<Vec<_>>()
                .join("; ");
            return Ok((
                layers,
                Verdict::Inconclusive {
                    reason: format!("layer {k}: no usable candidate terminal ({reason})"),
                },
            ));
        };

        let sol = solutions[ci].take().expect("chosen trial has a solution");
        let terminal = trials[ci].terminal.clone();
        layers.push(LayerRecord {
            k,
            m_k: coeffs.input_dim,
            coeffs,
            riccati: sol,
            compression,
            diagnostics: Vec::new(),
            trials,
        });
        let idx = layers.len() - 1;
        layers[idx].diagnostics = check_side_conditions(&layers, idx, bbar0, tol)?;
        sum_terminal += &terminal;

        if winner.is_some() {
            return Ok((
                layers,
                Verdict::IrregularSolvable {
                    depth: k,
                    terminal_constraint: sum_terminal,
                },
            ));
        }
        if all_degenerate {
            return Ok((
                layers,
                Verdict::Unsolvable {
                    depth: k,
                    caveat: UNSOLVABLE_CAVEAT.into(),
                },
            ));
        }
        let rec = &layers[idx];
        match build_layer(Parent::Layer(&rec.coeffs), &rec.riccati, k, tol, bottom_scale) {
            Ok((next, next_comp)) => {
                coeffs = next;
                compression = next_comp;
            }
            Err(LayerError::RankProfile { layer, detail }) => {
                return Ok((
                    layers,
                    Verdict::Inconclusive {
                        reason: format!("rank profile of layer {layer} is not constant: {detail}"),
                    },
                ))
            }
            Err(e) => return Err(e),
        }
    }
    Ok((
        layers,
        Verdict::Unsolvable {
            depth: max_depth,
            caveat: "recursion reached the input dimension without a regular exit".into(),
        },
    ))
}

/// Full reduction. A base-equation blow-up is returned as an error; the
/// caller reports it as an inconclusive verdict.
pub fn reduce(p: &LqProblem, policy: &TerminalPolicy, tol: &Tolerance) -> Result<LayerStack, LayerError> {
    reduce_scaled(p, policy, tol, None)
}

pub fn reduce_scaled(
    p: &LqProblem,
    policy: &TerminalPolicy,
    tol: &Tolerance,
    bottom_scale: Option<&[f64]>,
) -> Result<LayerStack, LayerError> {
    let base = integrate_base(p, tol)?;
    let stack = |layers, verdict| LayerStack {
        base: base.clone(),
        layers,
        verdict,
        tol: *tol,
    };
    if classify_base(&base, tol)? == BaseClass::Regular {
        return Ok(stack(Vec::new(), Verdict::Regular));
    }
    let (first, comp) = match build_layer(Parent::Base(p), &base, 0, tol, bottom_scale) {
        Ok(v) => v,
        Err(LayerError::RankProfile { detail, .. }) => {
            return Ok(stack(
                Vec::new(),
                Verdict::Inconclusive {
                    reason: format!("rank of Υ_0 is not constant: {detail}"),
                },
            ))
        }
        Err(e) => return Err(e),
    };
    let (layers, verdict) =
        reduce_from_layer(first, comp, &p.h, Some(&p.bbar), p.m, policy, tol, bottom_scale)?;
    Ok(stack(layers, verdict))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlLaw {
    /// Regular problem, `u = −Υ_0†Γ_0 x`.
    Feedback,
    /// Irregular with a vacuous terminal constraint.
    Unconstrained,
    OpenLoop,
    ClosedLoop,
}

/// The composed control law `u(t) = gain(t) x(t) + feedforward(t)`.
///
/// The `eq_*` paths give the equilibrium expression
/// `Υ_0 u + Γ_0 x + B'Θ + B̄'Θ̄ = eq_u·u + eq_x·x + eq_ff` used as the
/// optimality residual.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerSpec {
    pub grid: TimeGrid,
    pub law: ControlLaw,
    pub gain: MatrixPath,
    pub feedforward: MatrixPath,
    /// Absolute time; closed-loop gains are frozen on `(T − ε, T]`.
    pub epsilon: f64,
    pub steering: Option<SteeringResult>,
    /// `M` of the terminal requirement `M x(T) = 0`, absent for regular problems.
    #[serde(default, with = "crate::matops::serde_opt_rows")]
    pub constraint: Option<Matrix>,
    pub eq_u: MatrixPath,
    pub eq_x: MatrixPath,
    pub eq_ff: MatrixPath,
}

impl ControllerSpec {
    pub fn control(&self, i: usize, x: &Matrix) -> Matrix {
        self.gain.at(i) * x + self.feedforward.at(i)
    }
}

/// The chain `u = Ux·x + Uz·z` with `z = u_k`, plus the maps needed by the
/// equilibrium residual, at one node.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeComposition {
    pub ux: Matrix,
    pub uz: Matrix,
    /// `Σ_j P_j`.
    pub s0: Matrix,
    pub thetabar_x: Matrix,
    pub thetabar_z: Matrix,
}

/// Composes the controller chain of a solvable irregular stack at node `j`.
pub fn compose_node(stack: &LayerStack, j: usize) -> Result<NodeComposition, MatError> {
    let tol = &stack.tol;
    let layers = &stack.layers;
    let k = layers.len();
    let last = &layers[k - 1];
    let n = last.riccati.p.at(j).nrows();
    let upk = pinv(last.riccati.upsilon.at(j), tol)?;
    let mk = last.m_k;
    let mut ux = -(&upk * last.riccati.gamma.at(j));
    let mut uz = Matrix::identity(mk, mk) - &upk * last.riccati.upsilon.at(j);
    let mut tbx = Matrix::zeros(n, n);
    let mut tbz = Matrix::zeros(n, mk);
    let mut s = Matrix::zeros(n, n);

    for i in (0..k).rev() {
        let rec = &layers[i];
        let c = &rec.coeffs;
        let pnext = rec.riccati.p.at(j);
        s += pnext;
        let x = Matrix::identity(n, n) - pnext * c.fbar.at(j);
        let xp = pinv(&x, tol)?;
        let new_tbx = &xp * (&tbx + pnext * (c.abar.at(j) + c.dbar.at(j) * &s + c.bbar.at(j) * &ux));
        let new_tbz = &xp * (&tbz + pnext * c.bbar.at(j) * &uz);
        let (ups, gam) = if i == 0 {
            (stack.base.upsilon.at(j), stack.base.gamma.at(j))
        } else {
            (layers[i - 1].riccati.upsilon.at(j), layers[i - 1].riccati.gamma.at(j))
        };
        let up = pinv(ups, tol)?;
        let h_t = c.h_in.at(j).transpose();
        let hbar_t = c.hbar_in.at(j).transpose();
        ux = -(&up * (gam + &h_t * &s + &hbar_t * &new_tbx)) + c.g.at(j) * &ux;
        uz = -(&up * &hbar_t * &new_tbz) + c.g.at(j) * &uz;
        tbx = new_tbx;
        tbz = new_tbz;
    }
    Ok(NodeComposition {
        ux,
        uz,
        s0: s,
        thetabar_x: tbx,
        thetabar_z: tbz,
    })
}

/// Reduced system seen by the innermost input `z`, using the composed chain.
pub fn reduced_system(
    p: &LqProblem,
    comps: &[NodeComposition],
    constraint: Matrix,
) -> ReducedSystem {
    let grid = p.grid;
    let path = |f: &dyn Fn(usize, &NodeComposition) -> Matrix| MatrixPath {
        grid,
        samples: comps.iter().enumerate().map(|(j, c)| f(j, c)).collect(),
    };
    ReducedSystem {
        ahat: path(&|j, c| p.a.at(j) + p.b.at(j) * &c.ux),
        bhat: path(&|j, c| p.b.at(j) * &c.uz),
        atilde: path(&|j, c| p.abar.at(j) + p.bbar.at(j) * &c.ux),
        btilde: path(&|j, c| p.bbar.at(j) * &c.uz),
        constraint,
    }
}

/// Builds the controller for a solvable stack. `mc` is used only by the
/// stochastic open-loop branch.
pub fn reconstruct_controller(
    p: &LqProblem,
    stack: &LayerStack,
    mode: SteeringMode,
    mc: &MonteCarloConfig,
) -> Result<ControllerSpec, LayerError> {
    let grid = p.grid;
    let epsilon = p.epsilon();
    let tol = &stack.tol;
    let nodes = grid.nodes();
    let path = |samples: Vec<Matrix>| MatrixPath { grid, samples };

    match &stack.verdict {
        Verdict::Regular => {
            let gain = (0..nodes)
                .map(|j| {
                    pinv(stack.base.upsilon.at(j), tol).map(|up| -(up * stack.base.gamma.at(j)))
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ok(ControllerSpec {
                grid,
                law: ControlLaw::Feedback,
                gain: path(gain),
                feedforward: MatrixPath::constant(grid, Matrix::zeros(p.m, 1)),
                epsilon,
                steering: None,
                constraint: None,
                eq_u: stack.base.upsilon.clone(),
                eq_x: stack.base.gamma.clone(),
                eq_ff: MatrixPath::constant(grid, Matrix::zeros(p.m, 1)),
            })
        }
        Verdict::IrregularSolvable {
            terminal_constraint,
            ..
        } => {
            let comps = (0..nodes)
                .map(|j| compose_node(stack, j))
                .collect::<Result<Vec<_>, _>>()?;
            let mk = comps[0].uz.ncols();
            let vacuous = terminal_constraint.norm() <= tol.residual_bound(0.0);
            let (law, steering, zx, zff): (ControlLaw, Option<SteeringResult>, Vec<Matrix>, Vec<Matrix>) =
                if vacuous {
                    (
                        ControlLaw::Unconstrained,
                        None,
                        vec![Matrix::zeros(mk, p.n); nodes],
                        vec![Matrix::zeros(mk, 1); nodes],
                    )
                } else {
                    let sys = reduced_system(p, &comps, terminal_constraint.clone());
                    let res = match mode {
                        SteeringMode::ClosedLoop => closed_loop_steer(&sys, &grid, epsilon, tol)?,
                        SteeringMode::OpenLoop => open_loop_steer(&sys, &p.x0_matrix(), &grid, mc, tol)?,
                    };
                    let zx = res
                        .gain
                        .as_ref()
                        .map(|g| g.samples.clone())
                        .unwrap_or_else(|| vec![Matrix::zeros(mk, p.n); nodes]);
                    let zff = res
                        .open_signal
                        .as_ref()
                        .map(|s| s.samples.clone())
                        .unwrap_or_else(|| vec![Matrix::zeros(mk, 1); nodes]);
                    let law = match mode {
                        SteeringMode::ClosedLoop => ControlLaw::ClosedLoop,
                        SteeringMode::OpenLoop => ControlLaw::OpenLoop,
                    };
                    (law, Some(res), zx, zff)
                };
            let mut gain = Vec::with_capacity(nodes);
            let mut ff = Vec::with_capacity(nodes);
            let mut eq_x = Vec::with_capacity(nodes);
            let mut eq_ff = Vec::with_capacity(nodes);
            for (j, c) in comps.iter().enumerate() {
                gain.push(&c.ux + &c.uz * &zx[j]);
                ff.push(&c.uz * &zff[j]);
                let bbar_t = p.bbar.at(j).transpose();
                eq_x.push(
                    stack.base.gamma.at(j)
                        + p.b.at(j).transpose() * &c.s0
                        + &bbar_t * (&c.thetabar_x + &c.thetabar_z * &zx[j]),
                );
                eq_ff.push(&bbar_t * &c.thetabar_z * &zff[j]);
            }
            Ok(ControllerSpec {
                grid,
                law,
                gain: path(gain),
                feedforward: path(ff),
                epsilon,
                steering,
                constraint: Some(terminal_constraint.clone()),
                eq_u: stack.base.upsilon.clone(),
                eq_x: path(eq_x),
                eq_ff: path(eq_ff),
            })
        }
        other => Err(LayerError::NotSolvable(other.name().into())),
    }
}
