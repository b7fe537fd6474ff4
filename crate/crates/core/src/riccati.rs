//! Backward RK4 for the base generalized Riccati equation and for the layer
//! equations of the reduction.

use crate::layering::LayerCoefficients;
use crate::matops::{pinv, rank_of, symmetrize, MatError, Matrix, Tolerance};
use crate::problem::{LqProblem, MatrixPath, TimeGrid};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const BLOWUP_NORM: f64 = 1e12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RiccatiError {
    #[error("Riccati solution blew up at t = {time}")]
    Blowup { time: f64 },
    #[error(transparent)]
    Matrix(#[from] MatError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiSolution {
    pub p: MatrixPath,
    pub upsilon: MatrixPath,
    pub gamma: MatrixPath,
    pub terminal: Matrix,
    /// rank of Υ at every node.
    pub rank_profile: Vec<usize>,
    /// Nodes where `I − P F̄` (layer equations only) is singular.
    pub singular_nodes: Vec<usize>,
}

impl RiccatiSolution {
    pub fn constant_rank(&self) -> Option<usize> {
        let r0 = *self.rank_profile.first()?;
        self.rank_profile.iter().all(|&r| r == r0).then_some(r0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    Node,
    Mid,
    Next,
}

/// Coefficient value at node `i`, the midpoint of `[t_i, t_{i+1}]`, or node `i+1`.
pub fn sample(path: &MatrixPath, i: usize, stage: Stage) -> Matrix {
    match stage {
        Stage::Node => path.samples[i].clone(),
        Stage::Mid => path.midpoint(i),
        Stage::Next => path.samples[i + 1].clone(),
    }
}

/// Integrates `Ṗ = f(i, stage, P)` from `P(T) = terminal` back to `t0`.
///
/// Step `i` goes from node `i+1` to node `i`; `f` is asked for the
/// coefficients at `Next`, `Mid` and `Node` of that interval.
pub fn integrate_backward<F>(
    grid: &TimeGrid,
    terminal: &Matrix,
    f: F,
) -> Result<Vec<Matrix>, RiccatiError>
where
    F: Fn(usize, Stage, &Matrix) -> Result<Matrix, MatError>,
{
    let h = grid.h();
    let mut out = vec![Matrix::zeros(0, 0); grid.nodes()];
    out[grid.steps] = terminal.clone();
    let mut p = terminal.clone();
    for i in (0..grid.steps).rev() {
        let k1 = f(i, Stage::Next, &p)?;
        let k2 = f(i, Stage::Mid, &(&p - &k1 * (0.5 * h)))?;
        let k3 = f(i, Stage::Mid, &(&p - &k2 * (0.5 * h)))?;
        let k4 = f(i, Stage::Node, &(&p - &k3 * h))?;
        p = symmetrize(&(&p - (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0)));
        if !p.iter().all(|v| v.is_finite()) || p.norm() > BLOWUP_NORM {
            return Err(RiccatiError::Blowup { time: grid.time(i) });
        }
        out[i] = p.clone();
    }
    Ok(out)
}

struct BaseCoefficients {
    a: Matrix,
    b: Matrix,
    abar: Matrix,
    bbar: Matrix,
    q: Matrix,
    r: Matrix,
}

impl BaseCoefficients {
    fn at(p: &LqProblem, i: usize, stage: Stage) -> Self {
        BaseCoefficients {
            a: sample(&p.a, i, stage),
            b: sample(&p.b, i, stage),
            abar: sample(&p.abar, i, stage),
            bbar: sample(&p.bbar, i, stage),
            q: sample(&p.q, i, stage),
            r: sample(&p.r, i, stage),
        }
    }

    /// (Υ0, Γ0) for a given P.
    fn upsilon_gamma(&self, p: &Matrix) -> (Matrix, Matrix) {
        let pbb = p * &self.bbar;
        let upsilon = symmetrize(&(&self.r + self.bbar.transpose() * &pbb));
        let gamma = self.b.transpose() * p + pbb.transpose() * &self.abar;
        (upsilon, gamma)
    }

    fn rhs(&self, p: &Matrix, tol: &Tolerance) -> Result<Matrix, MatError> {
        let (upsilon, gamma) = self.upsilon_gamma(p);
        let up = pinv(&upsilon, tol)?;
        let at = self.a.transpose();
        let lin = &at * p + p * &self.a + self.abar.transpose() * p * &self.abar + &self.q;
        Ok(-(lin - gamma.transpose() * up * gamma))
    }
}

/// Base equation, terminal `P(T) = H`.
pub fn integrate_base(p: &LqProblem, tol: &Tolerance) -> Result<RiccatiSolution, RiccatiError> {
    let grid = p.grid;
    let ps = integrate_backward(&grid, &p.h, |i, stage, pm| {
        BaseCoefficients::at(p, i, stage).rhs(pm, tol)
    })?;
    let mut upsilon = Vec::with_capacity(grid.nodes());
    let mut gamma = Vec::with_capacity(grid.nodes());
    let mut rank_profile = Vec::with_capacity(grid.nodes());
    for (i, pi) in ps.iter().enumerate() {
        let (u, g) = BaseCoefficients::at(p, i, Stage::Node).upsilon_gamma(pi);
        rank_profile.push(rank_of(&u, tol)?.rank);
        upsilon.push(u);
        gamma.push(g);
    }
    Ok(RiccatiSolution {
        p: MatrixPath { grid, samples: ps },
        upsilon: MatrixPath { grid, samples: upsilon },
        gamma: MatrixPath { grid, samples: gamma },
        terminal: p.h.clone(),
        rank_profile,
        singular_nodes: Vec::new(),
    })
}

/// Parent-layer coefficients frozen at one time point.
pub struct LayerPoint {
    pub a: Matrix,
    pub abar: Matrix,
    pub d: Matrix,
    pub dbar: Matrix,
    pub f: Matrix,
    pub fbar: Matrix,
    pub b: Matrix,
    pub bbar: Matrix,
    pub c: Matrix,
}

/// Quantities of the layer equation at one `(t, P)`.
pub struct LayerTerms {
    /// `(I − P F̄)†`
    pub x_pinv: Matrix,
    pub x_singular: bool,
    pub upsilon: Matrix,
    pub gamma: Matrix,
    /// `P (Ā + D̄ P)`, shared by several terms.
    pub p_drift: Matrix,
}

impl LayerPoint {
    pub fn at(c: &LayerCoefficients, i: usize, stage: Stage) -> Self {
        LayerPoint {
            a: sample(&c.a, i, stage),
            abar: sample(&c.abar, i, stage),
            d: sample(&c.d, i, stage),
            dbar: sample(&c.dbar, i, stage),
            f: sample(&c.f, i, stage),
            fbar: sample(&c.fbar, i, stage),
            b: sample(&c.b, i, stage),
            bbar: sample(&c.bbar, i, stage),
            c: sample(&c.c, i, stage),
        }
    }

    pub fn terms(&self, p: &Matrix, tol: &Tolerance) -> Result<LayerTerms, MatError> {
        let n = p.nrows();
        let x = Matrix::identity(n, n) - p * &self.fbar;
        let x_rank = rank_of(&x, tol)?.rank;
        let x_pinv = pinv(&x, tol)?;
        let p_drift = p * (&self.abar + &self.dbar * p);
        let bbar_t_xp = self.bbar.transpose() * &x_pinv;
        let upsilon = symmetrize(&(&bbar_t_xp * p * &self.bbar));
        let gamma = &self.c + self.b.transpose() * p + &bbar_t_xp * &p_drift;
        Ok(LayerTerms {
            x_pinv,
            x_singular: x_rank < n,
            upsilon,
            gamma,
            p_drift,
        })
    }

    fn rhs(&self, p: &Matrix, tol: &Tolerance) -> Result<Matrix, MatError> {
        let t = self.terms(p, tol)?;
        let up = pinv(&t.upsilon, tol)?;
        let body = p * &self.a
            + self.a.transpose() * p
            + p * &self.d * p
            + (self.abar.transpose() + p * &self.f) * &t.x_pinv * &t.p_drift
            - t.gamma.transpose() * up * &t.gamma;
        Ok(-body)
    }
}

/// Layer equation for `P_k`, driven by the coefficients of layer `k − 1`.
pub fn integrate_layer(
    coeffs: &LayerCoefficients,
    terminal: &Matrix,
    tol: &Tolerance,
) -> Result<RiccatiSolution, RiccatiError> {
    let grid = coeffs.a.grid;
    let ps = integrate_backward(&grid, terminal, |i, stage, pm| {
        LayerPoint::at(coeffs, i, stage).rhs(pm, tol)
    })?;
    let mut upsilon = Vec::with_capacity(grid.nodes());
    let mut gamma = Vec::with_capacity(grid.nodes());
    let mut rank_profile = Vec::with_capacity(grid.nodes());
    let mut singular_nodes = Vec::new();
    for (i, pi) in ps.iter().enumerate() {
        let t = LayerPoint::at(coeffs, i, Stage::Node).terms(pi, tol)?;
        rank_profile.push(rank_of(&t.upsilon, tol)?.rank);
        if t.x_singular {
            singular_nodes.push(i);
        }
        upsilon.push(t.upsilon);
        gamma.push(t.gamma);
    }
    Ok(RiccatiSolution {
        p: MatrixPath { grid, samples: ps },
        upsilon: MatrixPath { grid, samples: upsilon },
        gamma: MatrixPath { grid, samples: gamma },
        terminal: terminal.clone(),
        rank_profile,
        singular_nodes,
    })
}
