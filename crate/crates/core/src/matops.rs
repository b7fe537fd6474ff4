//! Dense matrix kernel.
//!
//! Everything downstream (Riccati right-hand sides, layer construction,
//! steering) decides ranks and ranges through this module, using one
//! [`Tolerance`] value so the decisions never disagree with each other.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Matrix = DMatrix<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MatError {
    #[error("matrix contains non-finite entries")]
    InvalidMatrix,
    #[error("dimension mismatch in {op}: {detail}")]
    DimensionError { op: &'static str, detail: String },
}

/// Shared rank tolerance.
///
/// A singular value `s` counts as zero when
/// `s <= max(rtol * s_max * max(rows, cols), atol)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerance {
    pub rtol: f64,
    /// Absolute floor. Products that cancel analytically leave residues
    /// around 1e-16; without a floor those would be inverted to 1e16.
    pub atol: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Tolerance {
            rtol: 1e-10,
            atol: 1e-12,
        }
    }
}

impl Tolerance {
    pub fn with_rtol(rtol: f64) -> Self {
        Tolerance {
            rtol,
            ..Tolerance::default()
        }
    }

    pub fn cutoff(&self, sigma_max: f64, rows: usize, cols: usize) -> f64 {
        (self.rtol * sigma_max * rows.max(cols) as f64).max(self.atol)
    }

    /// Threshold for "this residual is zero" relative to the size of `reference`.
    pub fn residual_bound(&self, reference_norm: f64) -> f64 {
        self.rtol * (1.0 + reference_norm)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankDecision {
    pub rank: usize,
    pub tolerance_used: f64,
    /// Descending.
    pub singular_values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RowCompression {
    pub transform: Matrix,
    pub inverse_transform: Matrix,
    /// Full row rank; may have zero rows when the input has rank 0.
    pub bottom_block: Matrix,
    pub zero_rows: usize,
}

pub fn check_finite(m: &Matrix) -> Result<(), MatError> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(MatError::InvalidMatrix)
    }
}

/// Thin SVD `(U, σ, V)` with `σ` descending. nalgebra's own SVD loses
/// accuracy on some small well-conditioned inputs, so this goes through faer.
fn thin_svd(m: &Matrix) -> Result<(Matrix, Vec<f64>, Matrix), MatError> {
    let f = faer::Mat::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)]);
    let svd = f.thin_svd().map_err(|_| MatError::InvalidMatrix)?;
    let (u, v) = (svd.U(), svd.V());
    let s = svd.S().column_vector();
    let k = s.nrows();
    let sigma: Vec<f64> = (0..k).map(|i| s[i]).collect();
    Ok((
        Matrix::from_fn(m.nrows(), k, |i, j| u[(i, j)]),
        sigma,
        Matrix::from_fn(m.ncols(), k, |i, j| v[(i, j)]),
    ))
}

fn sorted_singular_values(m: &Matrix) -> Result<Vec<f64>, MatError> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Ok(Vec::new());
    }
    let mut sv = thin_svd(m)?.1;
    sv.sort_by(|a, b| b.total_cmp(a));
    Ok(sv)
}

pub fn rank_of(m: &Matrix, tol: &Tolerance) -> Result<RankDecision, MatError> {
    check_finite(m)?;
    let singular_values = sorted_singular_values(m)?;
    let sigma_max = singular_values.first().copied().unwrap_or(0.0);
    let cutoff = tol.cutoff(sigma_max, m.nrows(), m.ncols());
    let rank = singular_values.iter().filter(|&&s| s > cutoff).count();
    Ok(RankDecision {
        rank,
        tolerance_used: cutoff,
        singular_values,
    })
}

/// Moore-Penrose inverse by truncated SVD.
pub fn pinv(m: &Matrix, tol: &Tolerance) -> Result<Matrix, MatError> {
    check_finite(m)?;
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 {
        return Ok(Matrix::zeros(cols, rows));
    }
    let (u, sigma, v) = thin_svd(m)?;
    let sigma_max = sigma.iter().copied().fold(0.0, f64::max);
    let cutoff = tol.cutoff(sigma_max, rows, cols);

    let mut out = Matrix::zeros(cols, rows);
    for (i, &s) in sigma.iter().enumerate() {
        if s > cutoff {
            // out += v_i * u_i' / s
            out.ger(1.0 / s, &v.column(i), &u.column(i), 1.0);
        }
    }
    // The pseudoinverse of a symmetric matrix is symmetric; the SVD only
    // delivers that up to cond(m)·eps, which is visible at moderate conditioning.
    if rows == cols && m == &m.transpose() {
        out = symmetrize(&out);
    }
    Ok(out)
}

/// `I - M M†` applied to `n`, i.e. the component of `n` outside `Range(M)`.
fn range_residual(l: &Matrix, n: &Matrix, tol: &Tolerance) -> Result<Matrix, MatError> {
    let lp = pinv(l, tol)?;
    Ok(n - l * (lp * n))
}

/// `Range(n) ⊆ Range(l)`, decided as `‖(I − L L†) N‖_F ≤ rtol·(1 + ‖N‖_F)`.
pub fn range_included(l: &Matrix, n: &Matrix, tol: &Tolerance) -> Result<bool, MatError> {
    if l.nrows() != n.nrows() {
        return Err(MatError::DimensionError {
            op: "range_included",
            detail: format!("L has {} rows, N has {}", l.nrows(), n.nrows()),
        });
    }
    check_finite(n)?;
    let r = range_residual(l, n, tol)?;
    Ok(r.norm() <= tol.residual_bound(n.norm()))
}

/// Particular solution `X = L† N M†` of `L X M = N`, or `None` when the
/// solvability condition `L L† N M M† = N` fails.
pub fn solve_lxm(
    l: &Matrix,
    m: &Matrix,
    n: &Matrix,
    tol: &Tolerance,
) -> Result<Option<Matrix>, MatError> {
    if l.nrows() != n.nrows() || m.ncols() != n.ncols() {
        return Err(MatError::DimensionError {
            op: "solve_lxm",
            detail: format!(
                "L is {}x{}, M is {}x{}, N is {}x{}",
                l.nrows(),
                l.ncols(),
                m.nrows(),
                m.ncols(),
                n.nrows(),
                n.ncols()
            ),
        });
    }
    check_finite(n)?;
    let lp = pinv(l, tol)?;
    let mp = pinv(m, tol)?;
    let x = &lp * n * &mp;
    let reproduced = l * &x * m;
    if (reproduced - n).norm() <= tol.residual_bound(n.norm()) {
        Ok(Some(x))
    } else {
        Ok(None)
    }
}

/// Row-echelon compression `T p = [0; bottom]` with unit pivots.
///
/// Partial pivoting on the largest absolute entry (ties go to the later
/// row). The number of pivots is the SVD rank from [`rank_of`], so this
/// agrees with [`pinv`] on what counts as zero. Zero rows end up on top.
pub fn row_compress(p: &Matrix, tol: &Tolerance) -> Result<RowCompression, MatError> {
    let decision = rank_of(p, tol)?;
    let (rows, cols) = p.shape();
    let mut w = p.clone();
    let mut t = Matrix::identity(rows, rows);
    let mut pivots = 0usize;

    for col in 0..cols {
        if pivots == decision.rank {
            break;
        }
        let mut best = pivots;
        let mut best_val = -1.0;
        for i in pivots..rows {
            let v = w[(i, col)].abs();
            if v >= best_val {
                best_val = v;
                best = i;
            }
        }
        if best_val <= decision.tolerance_used {
            continue;
        }
        w.swap_rows(best, pivots);
        t.swap_rows(best, pivots);
        let inv = 1.0 / w[(pivots, col)];
        w.row_mut(pivots).scale_mut(inv);
        t.row_mut(pivots).scale_mut(inv);
        for i in (pivots + 1)..rows {
            let f = w[(i, col)];
            if f != 0.0 {
                for j in 0..cols {
                    w[(i, j)] -= f * w[(pivots, j)];
                }
                for j in 0..rows {
                    t[(i, j)] -= f * t[(pivots, j)];
                }
            }
        }
        pivots += 1;
    }

    let zero_rows = rows - pivots;
    let mut transform = Matrix::zeros(rows, rows);
    for (dst, src) in (pivots..rows).chain(0..pivots).enumerate() {
        transform.set_row(dst, &t.row(src));
    }
    let bottom_block = w.rows(0, pivots).clone_owned();
    let inverse_transform = transform
        .clone()
        .try_inverse()
        .ok_or(MatError::InvalidMatrix)?;
    Ok(RowCompression {
        transform,
        inverse_transform,
        bottom_block,
        zero_rows,
    })
}

impl RowCompression {
    /// Rank of the compressed input (rows of the bottom block).
    pub fn rank(&self) -> usize {
        self.bottom_block.nrows()
    }

    /// Multiply the bottom rows by a positive diagonal. `scale` is cycled
    /// when shorter than the block. The block shape `[0; bottom]` is kept.
    pub fn rescale_bottom(&self, scale: &[f64]) -> RowCompression {
        if scale.is_empty() || self.rank() == 0 {
            return self.clone();
        }
        let mut transform = self.transform.clone();
        let mut bottom_block = self.bottom_block.clone();
        for i in 0..self.rank() {
            let s = scale[i % scale.len()];
            transform.row_mut(self.zero_rows + i).scale_mut(s);
            bottom_block.row_mut(i).scale_mut(s);
        }
        let inverse_transform = transform
            .clone()
            .try_inverse()
            .expect("positive rescaling keeps the transform invertible");
        RowCompression {
            transform,
            inverse_transform,
            bottom_block,
            zero_rows: self.zero_rows,
        }
    }
}

pub fn symmetrize(m: &Matrix) -> Matrix {
    (m + m.transpose()) * 0.5
}

pub fn asymmetry(m: &Matrix) -> f64 {
    (m - m.transpose()).amax()
}

/// Last `k` columns.
pub fn last_columns(m: &Matrix, k: usize) -> Matrix {
    m.columns(m.ncols() - k, k).clone_owned()
}

pub fn column(values: &[f64]) -> Matrix {
    Matrix::from_column_slice(values.len(), 1, values)
}

pub fn to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

pub fn from_rows(rows: &[Vec<f64>]) -> Option<Matrix> {
    let r = rows.len();
    let c = rows.first().map(|row| row.len()).unwrap_or(0);
    if r == 0 || c == 0 || rows.iter().any(|row| row.len() != c) {
        return None;
    }
    Some(Matrix::from_fn(r, c, |i, j| rows[i][j]))
}

/// Spectral condition number; infinite for singular input.
pub fn condition_number(m: &Matrix) -> f64 {
    let sv = sorted_singular_values(m).unwrap_or_default();
    match (sv.first(), sv.last()) {
        (Some(&hi), Some(&lo)) if lo > 0.0 => hi / lo,
        _ => f64::INFINITY,
    }
}

pub fn vector_to_matrix(v: &DVector<f64>) -> Matrix {
    Matrix::from_column_slice(v.len(), 1, v.as_slice())
}

/// Serde adapter: a matrix as a list of rows.
pub mod serde_rows {
    use super::{from_rows, to_rows, Matrix};
    use serde::{de::Error, Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &Matrix, s: S) -> Result<S::Ok, S::Error> {
        to_rows(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Matrix, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        from_rows(&rows).ok_or_else(|| D::Error::custom("matrix must be a non-empty rectangular list of rows"))
    }
}

/// Serde adapter for an optional matrix.
pub mod serde_opt_rows {
    use crate::matops::{from_rows, to_rows, Matrix};
    use serde::{de::Error, Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &Option<Matrix>, s: S) -> Result<S::Ok, S::Error> {
        m.as_ref().map(to_rows).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Matrix>, D::Error> {
        match Option::<Vec<Vec<f64>>>::deserialize(d)? {
            None => Ok(None),
            Some(rows) => from_rows(&rows)
                .map(Some)
                .ok_or_else(|| D::Error::custom("matrix must be rectangular")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn tol() -> Tolerance {
        Tolerance::default()
    }

    fn assert_close(a: &Matrix, b: &Matrix, eps: f64) {
        assert_eq!(a.shape(), b.shape());
        assert!((a - b).amax() <= eps, "{a} vs {b}");
    }

    #[test]
    fn pinv_of_rank_one_symmetric() {
        let a = m(&[&[1.0, -1.0], &[-1.0, 1.0]]);
        let p = pinv(&a, &tol()).unwrap();
        assert_close(&p, &(&a * 0.25), 1e-14);
        // the four axioms
        assert_close(&(&a * &p * &a), &a, 1e-14);
        assert_close(&(&p * &a * &p), &p, 1e-14);
        assert_close(&(&a * &p).transpose(), &(&a * &p), 1e-14);
        assert_close(&(&p * &a).transpose(), &(&p * &a), 1e-14);
    }

    #[test]
    fn pinv_identity_and_zero() {
        let i3 = Matrix::identity(3, 3);
        assert_close(&pinv(&i3, &tol()).unwrap(), &i3, 1e-15);
        let z = Matrix::zeros(2, 3);
        let zp = pinv(&z, &tol()).unwrap();
        assert_eq!(zp.shape(), (3, 2));
        assert_eq!(zp.amax(), 0.0);
    }

    #[test]
    fn pinv_rejects_nan() {
        let a = m(&[&[1.0, f64::NAN]]);
        assert_eq!(pinv(&a, &tol()), Err(MatError::InvalidMatrix));
    }

    #[test]
    fn pinv_floors_cancellation_residue() {
        let a = m(&[&[3e-17]]);
        assert_eq!(pinv(&a, &tol()).unwrap()[(0, 0)], 0.0);
    }

    #[test]
    fn range_examples() {
        let l = m(&[&[1.0, -1.0], &[-1.0, 1.0]]);
        assert!(!range_included(&l, &m(&[&[1.0], &[1.0]]), &tol()).unwrap());
        let n = m(&[&[3.0, -1.0, 2.0], &[0.5, 7.0, -4.0]]);
        assert!(range_included(&Matrix::identity(2, 2), &n, &tol()).unwrap());
        assert!(range_included(&m(&[&[1.0], &[1.0]]), &m(&[&[2.0], &[2.0]]), &tol()).unwrap());
    }

    #[test]
    fn range_dimension_mismatch() {
        let err = range_included(&Matrix::identity(2, 2), &Matrix::zeros(3, 1), &tol());
        assert!(matches!(err, Err(MatError::DimensionError { .. })));
    }

    #[test]
    fn solve_lxm_examples() {
        let n = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let i2 = Matrix::identity(2, 2);
        assert_close(&solve_lxm(&i2, &i2, &n, &tol()).unwrap().unwrap(), &n, 1e-14);

        let l = m(&[&[1.0, 0.0], &[0.0, 0.0]]);
        let n2 = m(&[&[0.0, 0.0], &[1.0, 0.0]]);
        assert!(solve_lxm(&l, &i2, &n2, &tol()).unwrap().is_none());

        let l = m(&[&[1.0, 1.0]]);
        let x = solve_lxm(&l, &Matrix::identity(1, 1), &m(&[&[2.0]]), &tol())
            .unwrap()
            .unwrap();
        assert_close(&x, &m(&[&[1.0], &[1.0]]), 1e-14);
    }

    #[test]
    fn solve_lxm_dimension_mismatch() {
        let r = solve_lxm(
            &Matrix::identity(2, 2),
            &Matrix::identity(3, 3),
            &Matrix::zeros(2, 2),
            &tol(),
        );
        assert!(matches!(r, Err(MatError::DimensionError { .. })));
    }

    #[test]
    fn row_compress_projector() {
        let p = m(&[&[0.5, 0.5], &[0.5, 0.5]]);
        let rc = row_compress(&p, &tol()).unwrap();
        assert_eq!(rc.zero_rows, 1);
        assert_close(&rc.transform, &m(&[&[1.0, -1.0], &[0.0, 2.0]]), 1e-15);
        assert_close(&rc.bottom_block, &m(&[&[1.0, 1.0]]), 1e-15);
        assert_close(&(&rc.transform * &p), &m(&[&[0.0, 0.0], &[1.0, 1.0]]), 1e-15);
        assert_close(
            &(&rc.transform * &rc.inverse_transform),
            &Matrix::identity(2, 2),
            1e-15,
        );
    }

    #[test]
    fn row_compress_degenerate_inputs() {
        let rc = row_compress(&Matrix::zeros(2, 2), &tol()).unwrap();
        assert_eq!(rc.zero_rows, 2);
        assert_eq!(rc.bottom_block.nrows(), 0);

        let rc = row_compress(&Matrix::identity(2, 2), &tol()).unwrap();
        assert_eq!(rc.zero_rows, 0);
        assert_eq!(rank_of(&rc.bottom_block, &tol()).unwrap().rank, 2);
    }

    #[test]
    fn rescale_keeps_block_shape() {
        let p = m(&[&[0.5, 0.5], &[0.5, 0.5]]);
        let rc = row_compress(&p, &tol()).unwrap().rescale_bottom(&[3.0]);
        assert_close(&(&rc.transform * &p), &m(&[&[0.0, 0.0], &[3.0, 3.0]]), 1e-14);
        assert_close(&rc.bottom_block, &m(&[&[3.0, 3.0]]), 1e-14);
    }

    #[test]
    fn rank_examples() {
        let a = m(&[&[1.0, -1.0], &[-1.0, 1.0]]);
        let d = rank_of(&a, &tol()).unwrap();
        assert_eq!(d.rank, 1);
        assert!((d.singular_values[0] - 2.0).abs() < 1e-14);
        assert_eq!(rank_of(&Matrix::zeros(3, 3), &tol()).unwrap().rank, 0);
        assert_eq!(rank_of(&Matrix::identity(4, 4), &tol()).unwrap().rank, 4);
    }

    fn matrix_strategy(max: usize) -> impl Strategy<Value = Matrix> {
        (1..=max, 1..=max, 0..=max).prop_flat_map(|(r, c, k)| {
            let k = k.min(r).min(c);
            (
                proptest::collection::vec(-2.0f64..2.0, r * k.max(1)),
                proptest::collection::vec(-2.0f64..2.0, k.max(1) * c),
                Just((r, c, k)),
            )
                .prop_map(|(a, b, (r, c, k))| {
                    if k == 0 {
                        Matrix::zeros(r, c)
                    } else {
                        Matrix::from_row_slice(r, k, &a) * Matrix::from_row_slice(k, c, &b)
                    }
                })
        })
    }

    proptest! {
        #[test]
        fn rank_decision_is_consistent(a in matrix_strategy(6)) {
            let d = rank_of(&a, &tol()).unwrap();
            prop_assert!(d.rank <= a.nrows().min(a.ncols()));
            for w in d.singular_values.windows(2) {
                prop_assert!(w[0] >= w[1] && w[1] >= 0.0);
            }
            if d.rank > 0 {
                prop_assert!(d.singular_values[d.rank - 1] > d.tolerance_used);
            }
            if d.rank < d.singular_values.len() {
                prop_assert!(d.singular_values[d.rank] <= d.tolerance_used);
            }
        }

        #[test]
        fn row_compress_invariants(a in matrix_strategy(6)) {
            let rc = row_compress(&a, &tol()).unwrap();
            let n = a.nrows();
            prop_assert!((&rc.transform * &rc.inverse_transform - Matrix::identity(n, n)).amax() <= 1e-10);
            let tp = &rc.transform * &a;
            let top = tp.rows(0, rc.zero_rows);
            prop_assert!(top.norm() <= 1e-10 * (1.0 + a.norm()));
            prop_assert_eq!(rank_of(&rc.bottom_block, &tol()).unwrap().rank, rc.bottom_block.nrows());
            prop_assert_eq!(rc.zero_rows, n - rank_of(&a, &tol()).unwrap().rank);
        }

        #[test]
        fn pinv_of_symmetric_is_symmetric(a in matrix_strategy(6)) {
            let s = &a * a.transpose();
            let p = pinv(&s, &tol()).unwrap();
            prop_assert!(asymmetry(&p) <= 1e-10 * (1.0 + p.amax()));
        }

        #[test]
        fn solve_lxm_is_sound(l in matrix_strategy(4), x in matrix_strategy(4)) {
            // N built from an actual solution whenever shapes allow
            let mm = Matrix::identity(x.ncols(), x.ncols());
            let n = if l.ncols() == x.nrows() { &l * &x } else { Matrix::from_element(l.nrows(), x.ncols(), 1.0) };
            if let Some(sol) = solve_lxm(&l, &mm, &n, &tol()).unwrap() {
                prop_assert!((&l * sol * &mm - &n).norm() <= tol().residual_bound(n.norm()));
            }
            if l.ncols() == x.nrows() {
                prop_assert!(solve_lxm(&l, &mm, &n, &tol()).unwrap().is_some());
            }
        }
    }
}
