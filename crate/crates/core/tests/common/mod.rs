#![allow(dead_code)]

use irlq::matops::Matrix;
use irlq::problem::{load_problem, LqProblem, TimeGrid};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::path::PathBuf;

pub fn problems_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../problems")
}

pub fn load(name: &str) -> LqProblem {
    let bytes = std::fs::read(problems_dir().join(name)).expect("fixture exists");
    load_problem(&bytes).expect("fixture is valid")
}

pub fn s(v: f64) -> Matrix {
    Matrix::from_element(1, 1, v)
}

pub fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        scale * z
    })
}

/// `dP/dt = P²`, `P(1) = 1`, so `P(t) = 1/(2 − t)` on `[0, 1]`.
pub fn scalar_closed_form(steps: usize) -> LqProblem {
    LqProblem::constant(
        s(0.0),
        s(1.0),
        s(0.0),
        s(0.0),
        s(0.0),
        s(1.0),
        s(1.0),
        TimeGrid::new(0.0, 1.0, steps).unwrap(),
        vec![1.0],
    )
    .unwrap()
}

/// Random instance with `Q, H ⪰ 0` and `R ⪰ I/2`, hence regular.
pub fn random_regular(seed: u64, steps: usize) -> LqProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=3);
    let m = rng.random_range(1..=3);
    let a = gaussian(&mut rng, n, n, 0.5);
    let b = gaussian(&mut rng, n, m, 1.0);
    let abar = gaussian(&mut rng, n, n, 0.3);
    let bbar = gaussian(&mut rng, n, m, 0.3);
    let lq = gaussian(&mut rng, n, n, 0.7);
    let lr = gaussian(&mut rng, m, m, 0.7);
    let lh = gaussian(&mut rng, n, n, 0.7);
    let x0: Vec<f64> = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z + z.signum()
        })
        .collect();
    LqProblem::constant(
        a,
        b,
        abar,
        bbar,
        &lq * lq.transpose(),
        Matrix::identity(m, m) * 0.5 + &lr * lr.transpose(),
        &lh * lh.transpose(),
        TimeGrid::new(0.0, 1.0, steps).unwrap(),
        x0,
    )
    .unwrap()
}

/// `U diag(σ) V'` with orthonormal factors and the last `rows − rank`
/// singular values zero.
pub fn random_with_rank(rng: &mut ChaCha8Rng, rows: usize, cols: usize, rank: usize) -> Matrix {
    let u = gaussian(rng, rows, rows, 1.0).qr().q();
    let v = gaussian(rng, cols, cols, 1.0).qr().q();
    let mut sigma = Matrix::zeros(rows, cols);
    for i in 0..rank.min(rows).min(cols) {
        sigma[(i, i)] = 10f64.powf(rng.random_range(-2.0..2.0));
    }
    u * sigma * v.transpose()
}
