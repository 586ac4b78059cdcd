//! Fixtures shared by the benchmarks.

use epsmooth::model::benchmark;
use epsmooth::{NormalStream, QpProblem};
use nalgebra::{DMatrix, DVector};

/// Measurements of one benchmark replay over `steps` steps.
pub fn replay_measurements(seed: u64, steps: usize) -> Vec<DVector<f64>> {
    benchmark::replay(seed, steps).measurements
}

/// A random strictly convex QP of dimension `dim`.
pub fn random_qp(seed: u64, dim: usize) -> QpProblem {
    let mut rng = NormalStream::new(seed);
    let g = DMatrix::from_fn(dim, dim, |_, _| rng.standard_normal());
    let h = g.transpose() * &g + DMatrix::identity(dim, dim) * 0.05;
    let q = DVector::from_fn(dim, |_, _| rng.standard_normal());
    QpProblem::new(h, q)
}
