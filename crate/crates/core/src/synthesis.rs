//! Steering the innermost reduced system onto its terminal constraint.
//!
//! Open loop: minimum-energy signal from the controllability Gramian.
//! Closed loop: the gain solving `Â + B̂K = I/(t − T)`, frozen near `T`.
//! When the reduced diffusion input `B̃` has full row rank, the input is
//! first split with `Λ` so that `B̃Λ = [I 0]`; the first block cancels the
//! noise and the second steers the drift.

use crate::matops::{condition_number, pinv, rank_of, symmetrize, MatError, Matrix, Tolerance};
use crate::problem::{MatrixPath, TimeGrid};
use crate::simulate::{path_rng, MonteCarloConfig};
use nalgebra::SymmetricEigen;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const GRAMIAN_COND_LIMIT: f64 = 1e10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthesisError {
    #[error("diffusion input has rank {rank} < {rows} rows")]
    NotFullRowRank { rank: usize, rows: usize },
    #[error("diffusion input is neither zero nor of full row rank at t = {time}")]
    BranchUndetermined { time: f64 },
    #[error("controllability Gramian is singular (condition number {condition:e})")]
    GramianSingular { condition: f64 },
    #[error("closed-loop gain equation has no solution at t = {time} (residual {residual:e})")]
    GainInfeasible { time: f64, residual: f64 },
    #[error(transparent)]
    Matrix(#[from] MatError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SteeringMode {
    OpenLoop,
    ClosedLoop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Deterministic,
    Stochastic,
}

/// `dx = (Â x + B̂ z) dt + (Ã x + B̃ z) dw` with target `M x(T) = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedSystem {
    pub ahat: MatrixPath,
    pub bhat: MatrixPath,
    pub atilde: MatrixPath,
    pub btilde: MatrixPath,
    pub constraint: Matrix,
}

/// Steering law in the reduced input: `z(t) = gain(t) x(t) + open_signal(t)`.
///
/// Open loop on the stochastic branch carries both parts: the gain only
/// cancels the noise, the signal does the steering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringResult {
    pub mode: SteeringMode,
    pub branch: Branch,
    pub open_signal: Option<MatrixPath>,
    pub gain: Option<MatrixPath>,
    /// Gramian inverted for the open-loop signal.
    #[serde(default, with = "crate::matops::serde_opt_rows")]
    pub gramian: Option<Matrix>,
    pub gramian_condition: Option<f64>,
    /// Monte Carlo estimate of `E ∫ Φ'G₂G₂'Φ` on the stochastic branch.
    #[serde(default, with = "crate::matops::serde_opt_rows")]
    pub mc_gramian: Option<Matrix>,
    pub mc_gramian_stderr: Option<f64>,
}

/// Invertible `Λ` with `B̃Λ = [I 0]`: the pseudoinverse columns followed by
/// an orthonormal basis of `ker B̃`.
pub fn lambda_factor(btilde: &Matrix, tol: &Tolerance) -> Result<Matrix, SynthesisError> {
    let (rows, cols) = btilde.shape();
    let rank = rank_of(btilde, tol)?.rank;
    if rank < rows {
        return Err(SynthesisError::NotFullRowRank { rank, rows });
    }
    let bp = pinv(btilde, tol)?;
    let proj = Matrix::identity(cols, cols) - &bp * btilde;
    let eig = SymmetricEigen::new(proj);
    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let mut lambda = Matrix::zeros(cols, cols);
    lambda.columns_mut(0, rows).copy_from(&bp);
    for (slot, &idx) in order.iter().take(cols - rows).enumerate() {
        lambda.set_column(rows + slot, &eig.eigenvectors.column(idx));
    }
    Ok(lambda)
}

/// `B̂Λ = [G₁ G₂]` with `G₁` taking the first `rows(B̃)` columns.
pub fn split_input(bhat: &Matrix, lambda: &Matrix, noise_rows: usize) -> (Matrix, Matrix) {
    let bl = bhat * lambda;
    let g1 = bl.columns(0, noise_rows).clone_owned();
    let g2 = bl.columns(noise_rows, bl.ncols() - noise_rows).clone_owned();
    (g1, g2)
}

/// Per-node data of the steering problem after the branch split.
struct Effective {
    branch: Branch,
    /// Drift state matrix after noise cancellation.
    a: Vec<Matrix>,
    /// Steering input.
    g2: Vec<Matrix>,
    /// Noise input of the adjoint (stochastic branch).
    g1: Vec<Matrix>,
    lambda: Vec<Matrix>,
}

fn effective(sys: &ReducedSystem, tol: &Tolerance) -> Result<Effective, SynthesisError> {
    let grid = sys.ahat.grid;
    let scale = 1.0 + sys.bhat.max_norm();
    if sys.btilde.max_norm() <= tol.residual_bound(scale) {
        return Ok(Effective {
            branch: Branch::Deterministic,
            a: sys.ahat.samples.clone(),
            g2: sys.bhat.samples.clone(),
            g1: Vec::new(),
            lambda: Vec::new(),
        });
    }
    let n = sys.btilde.shape().0;
    let mut out = Effective {
        branch: Branch::Stochastic,
        a: Vec::new(),
        g2: Vec::new(),
        g1: Vec::new(),
        lambda: Vec::new(),
    };
    for j in 0..grid.nodes() {
        let lambda = lambda_factor(sys.btilde.at(j), tol).map_err(|e| match e {
            SynthesisError::NotFullRowRank { .. } => SynthesisError::BranchUndetermined { time: grid.time(j) },
            other => other,
        })?;
        let (g1, g2) = split_input(sys.bhat.at(j), &lambda, n);
        out.a.push(sys.ahat.at(j) - &g1 * sys.atilde.at(j));
        out.g1.push(g1);
        out.g2.push(g2);
        out.lambda.push(lambda);
    }
    Ok(out)
}

/// `z = Λ [top; bottom]`.
fn lift(lambda: &Matrix, top: &Matrix, bottom: &Matrix) -> Matrix {
    let mut stacked = Matrix::zeros(top.nrows() + bottom.nrows(), top.ncols());
    stacked.rows_mut(0, top.nrows()).copy_from(top);
    stacked.rows_mut(top.nrows(), bottom.nrows()).copy_from(bottom);
    lambda * stacked
}

/// Forward RK4 for `dΦ/dt = −A'Φ`, `Φ(t0) = I`, with `A` interpolated linearly.
fn adjoint_flow(a: &[Matrix], grid: &TimeGrid) -> Vec<Matrix> {
    let n = a[0].nrows();
    let h = grid.h();
    let mut phi = Matrix::identity(n, n);
    let mut out = Vec::with_capacity(grid.nodes());
    out.push(phi.clone());
    for j in 0..grid.steps {
        let a0 = a[j].transpose();
        let a1 = a[j + 1].transpose();
        let am = (&a0 + &a1) * 0.5;
        let k1 = -(&a0 * &phi);
        let k2 = -(&am * (&phi + &k1 * (0.5 * h)));
        let k3 = -(&am * (&phi + &k2 * (0.5 * h)));
        let k4 = -(&a1 * (&phi + &k3 * h));
        phi += (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0);
        out.push(phi.clone());
    }
    out
}

fn trapezoid(values: &[Matrix], h: f64) -> Matrix {
    let last = values.len() - 1;
    let mut acc = (&values[0] + &values[last]) * 0.5;
    for v in &values[1..last] {
        acc += v;
    }
    acc * h
}

/// Monte Carlo estimate of `E ∫ Φ'G₂G₂'Φ dt` for
/// `dΦ = −A'Φ dt − G₁'Φ dw`, `Φ(t0) = I`, by Euler–Maruyama.
fn mc_gramian(eff: &Effective, grid: &TimeGrid, mc: &MonteCarloConfig) -> (Matrix, f64) {
    let h = grid.h();
    let sqrt_h = h.sqrt();
    let n = eff.a[0].nrows();
    let per_path: Vec<Matrix> = (0..mc.paths)
        .into_par_iter()
        .map(|path| {
            let mut rng = path_rng(mc.seed, path as u64);
            let mut phi = Matrix::identity(n, n);
            let mut integrand = Vec::with_capacity(grid.nodes());
            for j in 0..grid.nodes() {
                let g = eff.g2[j].transpose() * &phi;
                integrand.push(g.transpose() * g);
                if j < grid.steps {
                    let dw: f64 = StandardNormal.sample(&mut rng);
                    let drift = eff.a[j].transpose() * &phi * h;
                    let noise = eff.g1[j].transpose() * &phi * (dw * sqrt_h);
                    phi -= drift + noise;
                }
            }
            trapezoid(&integrand, h)
        })
        .collect();
    let count = per_path.len() as f64;
    let mean = per_path.iter().fold(Matrix::zeros(n, n), |acc, g| acc + g) / count;
    let var = per_path
        .iter()
        .fold(Matrix::zeros(n, n), |acc, g| acc + (g - &mean).map(|v| v * v));
    let denom = (count - 1.0).max(1.0);
    let stderr = var.iter().map(|v| (v / denom / count).sqrt()).fold(0.0, f64::max);
    (mean, stderr)
}

/// Minimum-energy open-loop steering from `x0` to `x(T) = 0`.
pub fn open_loop_steer(
    sys: &ReducedSystem,
    x0: &Matrix,
    grid: &TimeGrid,
    mc: &MonteCarloConfig,
    tol: &Tolerance,
) -> Result<SteeringResult, SynthesisError> {
    let eff = effective(sys, tol)?;
    let phi = adjoint_flow(&eff.a, grid);
    let integrand: Vec<Matrix> = phi
        .iter()
        .zip(&eff.g2)
        .map(|(p, g)| {
            let v = g.transpose() * p;
            v.transpose() * v
        })
        .collect();
    let gramian = symmetrize(&trapezoid(&integrand, grid.h()));
    let condition = condition_number(&gramian);
    if condition.is_nan() || condition > GRAMIAN_COND_LIMIT {
        return Err(SynthesisError::GramianSingular { condition });
    }
    let weight = pinv(&gramian, tol)? * x0;
    let nu: Vec<Matrix> = phi
        .iter()
        .zip(&eff.g2)
        .map(|(p, g)| -(g.transpose() * p * &weight))
        .collect();

    let (open, gain, mc_g, mc_se) = match eff.branch {
        Branch::Deterministic => (nu, None, None, None),
        Branch::Stochastic => {
            let mut open = Vec::with_capacity(nu.len());
            let mut gain = Vec::with_capacity(nu.len());
            for (j, v) in nu.iter().enumerate() {
                let lam = &eff.lambda[j];
                let noise_rows = eff.g1[j].ncols();
                let n = x0.nrows();
                open.push(lift(lam, &Matrix::zeros(noise_rows, 1), v));
                gain.push(lift(lam, &-sys.atilde.at(j), &Matrix::zeros(v.nrows(), n)));
            }
            let (g, se) = mc_gramian(&eff, grid, mc);
            (
                open,
                Some(MatrixPath { grid: *grid, samples: gain }),
                Some(g),
                Some(se),
            )
        }
    };
    Ok(SteeringResult {
        mode: SteeringMode::OpenLoop,
        branch: eff.branch,
        open_signal: Some(MatrixPath { grid: *grid, samples: open }),
        gain,
        gramian: Some(gramian),
        gramian_condition: Some(condition),
        mc_gramian: mc_g,
        mc_gramian_stderr: mc_se,
    })
}

/// Feedback `K(t)` with `A_eff + G₂K = I/(t − T)` on `[t0, T − ε]`, frozen afterwards.
pub fn closed_loop_steer(
    sys: &ReducedSystem,
    grid: &TimeGrid,
    epsilon: f64,
    tol: &Tolerance,
) -> Result<SteeringResult, SynthesisError> {
    let eff = effective(sys, tol)?;
    let n = eff.a[0].nrows();
    let last = grid.clamp_index(epsilon);
    let mut k_path = Vec::with_capacity(grid.nodes());
    for j in 0..=last {
        let t = grid.time(j);
        let rhs = Matrix::identity(n, n) / (t - grid.t_end) - &eff.a[j];
        let k = pinv(&eff.g2[j], tol)? * &rhs;
        let residual = (&eff.g2[j] * &k - &rhs).norm();
        if residual > tol.residual_bound(rhs.norm()) {
            return Err(SynthesisError::GainInfeasible { time: t, residual });
        }
        k_path.push(k);
    }
    let frozen = k_path[last].clone();
    k_path.resize(grid.nodes(), frozen);
    let gain = match eff.branch {
        Branch::Deterministic => k_path,
        Branch::Stochastic => k_path
            .iter()
            .enumerate()
            .map(|(j, k)| lift(&eff.lambda[j], &-sys.atilde.at(j), k))
            .collect(),
    };
    Ok(SteeringResult {
        mode: SteeringMode::ClosedLoop,
        branch: eff.branch,
        open_signal: None,
        gain: Some(MatrixPath { grid: *grid, samples: gain }),
        gramian: None,
        gramian_condition: None,
        mc_gramian: None,
        mc_gramian_stderr: None,
    })
}
