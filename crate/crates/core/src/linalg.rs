//! Small dense linear-algebra helpers shared by the builders and solvers.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

/// Largest absolute entry of `m - m'`.
pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows().min(m.ncols());
    let mut worst = 0.0_f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

pub fn cholesky(m: &DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    Cholesky::new(m.clone())
}

/// Inverse of a symmetric positive definite matrix through its Cholesky factor.
pub fn spd_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    cholesky(m).map(|c| c.inverse())
}

/// `A^0, A^1, ..., A^k`.
pub fn powers(a: &DMatrix<f64>, k: usize) -> Vec<DMatrix<f64>> {
    let mut out = Vec::with_capacity(k + 1);
    out.push(DMatrix::identity(a.nrows(), a.ncols()));
    for i in 0..k {
        let next = a * &out[i];
        out.push(next);
    }
    out
}

pub fn stack(blocks: &[DVector<f64>]) -> DVector<f64> {
    let len = blocks.iter().map(|b| b.len()).sum();
    let mut out = DVector::zeros(len);
    let mut at = 0;
    for b in blocks {
        out.rows_mut(at, b.len()).copy_from(b);
        at += b.len();
    }
    out
}

/// Splits a stacked vector into consecutive blocks of length `block`.
pub fn split(v: &DVector<f64>, block: usize) -> Vec<DVector<f64>> {
    if block == 0 {
        return Vec::new();
    }
    (0..v.len() / block)
        .map(|k| v.rows(k * block, block).into_owned())
        .collect()
}

pub fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
}

pub fn mat_inf_norm(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
}

/// A block diagonal matrix with one repeated square block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockDiag {
    pub block: DMatrix<f64>,
    pub count: usize,
}

impl BlockDiag {
    pub fn new(block: DMatrix<f64>, count: usize) -> Self {
        Self { block, count }
    }

    pub fn dim(&self) -> usize {
        self.block.nrows() * self.count
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let b = self.block.nrows();
        let mut out = DMatrix::zeros(self.dim(), self.dim());
        for k in 0..self.count {
            out.view_mut((k * b, k * b), (b, b)).copy_from(&self.block);
        }
        out
    }

    /// `x * self` computed block column by block column.
    pub fn right_mul(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(x.ncols(), self.dim());
        let b = self.block.nrows();
        let mut out = DMatrix::zeros(x.nrows(), x.ncols());
        for k in 0..self.count {
            let cols = x.columns(k * b, b);
            out.columns_mut(k * b, b).copy_from(&(cols * &self.block));
        }
        out
    }

    pub fn mul_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        assert_eq!(v.len(), self.dim());
        let b = self.block.nrows();
        let mut out = DVector::zeros(v.len());
        for k in 0..self.count {
            out.rows_mut(k * b, b)
                .copy_from(&(&self.block * v.rows(k * b, b)));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_diag_products_match_dense() {
        let blk = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 3.0]);
        let bd = BlockDiag::new(blk, 3);
        let x = DMatrix::from_fn(4, 6, |i, j| (i * 7 + j) as f64 * 0.1 - 1.0);
        let dense = bd.to_dense();
        assert!((bd.right_mul(&x) - &x * &dense).abs().max() < 1e-14);
        let v = DVector::from_fn(6, |i, _| i as f64 - 2.5);
        assert!((bd.mul_vec(&v) - &dense * &v).abs().max() < 1e-14);
    }

    #[test]
    fn split_inverts_stack() {
        let parts = vec![DVector::from_vec(vec![1.0, 2.0]), DVector::from_vec(vec![3.0, 4.0])];
        assert_eq!(split(&stack(&parts), 2), parts);
    }

    #[test]
    fn powers_start_at_identity() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]);
        let p = powers(&a, 3);
        assert_eq!(p[0], DMatrix::identity(2, 2));
        assert_eq!(p[3], DMatrix::from_row_slice(2, 2, &[1.0, 3.0, 0.0, 1.0]));
    }
}
