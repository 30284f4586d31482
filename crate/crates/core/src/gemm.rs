//! Dense row-major matrices and a blocked GEMM.
//!
//! Every output element `c[i][j]` is accumulated over `p = 0..k` in ascending
//! order no matter how the work is split, so results are bit-identical for any
//! thread count. Parallelism splits output rows across the rayon pool; the
//! pool size can be fixed once per process with [`set_threads`].

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::real::Real;

const K_BLOCK: usize = 128;
const N_BLOCK: usize = 512;
const ROWS_PER_TASK: usize = 16;
/// Below this many multiply-adds the GEMM runs on the calling thread.
const PARALLEL_MIN_WORK: usize = 1 << 18;

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "matrix",
                format!("{} elements for a {rows}x{cols} matrix", data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// Copies the listed rows, in order, into a new matrix.
    pub fn gather_rows(&self, rows: &[usize]) -> Self {
        let mut data = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Self { rows: rows.len(), cols: self.cols, data }
    }

    /// Copies the listed columns, in order, into a new matrix.
    pub fn gather_cols(&self, cols: &[usize]) -> Self {
        let mut data = Vec::with_capacity(self.rows * cols.len());
        for i in 0..self.rows {
            let row = self.row(i);
            data.extend(cols.iter().map(|&c| row[c]));
        }
        Self { rows: self.rows, cols: cols.len(), data }
    }
}

/// `a (m x k) * b (k x n)`.
pub fn matmul<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.rows {
        return Err(Error::shape(
            "gemm",
            format!("({}x{}) * ({}x{})", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    let mut c = Matrix::zeros(a.rows, b.cols);
    gemm_slices(a.rows, a.cols, b.cols, &a.data, &b.data, &mut c.data);
    Ok(c)
}

/// `a^T * b` for `a (k x m)`, `b (k x n)`.
pub fn matmul_tn<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    matmul(&a.transpose(), b)
}

/// `a * b^T` for `a (m x k)`, `b (n x k)`.
pub fn matmul_nt<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    matmul(a, &b.transpose())
}

/// Raw GEMM on row-major slices: `c (m x n) = a (m x k) * b (k x n)`.
/// `c` is overwritten.
pub fn gemm_slices<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    c.iter_mut().for_each(|v| *v = T::zero());
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let parallel = rayon::current_num_threads() > 1 && m * k * n >= PARALLEL_MIN_WORK;
    if parallel {
        c.par_chunks_mut(ROWS_PER_TASK * n)
            .enumerate()
            .for_each(|(t, c_rows)| {
                let r0 = t * ROWS_PER_TASK;
                let rows = c_rows.len() / n;
                gemm_block(&a[r0 * k..(r0 + rows) * k], b, c_rows, rows, k, n);
            });
    } else {
        gemm_block(a, b, c, m, k, n);
    }
}

fn gemm_block<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for j0 in (0..n).step_by(N_BLOCK) {
        let j1 = (j0 + N_BLOCK).min(n);
        for p0 in (0..k).step_by(K_BLOCK) {
            let p1 = (p0 + K_BLOCK).min(k);
            for i in 0..m {
                let a_row = &a[i * k..(i + 1) * k];
                let c_row = &mut c[i * n + j0..i * n + j1];
                for p in p0..p1 {
                    let aip = a_row[p];
                    let b_row = &b[p * n + j0..p * n + j1];
                    for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                        *cv += aip * bv;
                    }
                }
            }
        }
    }
}

/// Fixes the global rayon pool size. Only the first call in a process takes effect.
pub fn set_threads(n: usize) -> bool {
    rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global().is_ok()
}

pub fn current_threads() -> usize {
    rayon::current_num_threads()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &Matrix<f64>, b: &Matrix<f64>) -> Matrix<f64> {
        let mut c = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for p in 0..a.cols() {
                    s += a.get(i, p) * b.get(p, j);
                }
                c.set(i, j, s);
            }
        }
        c
    }

    fn filled(rows: usize, cols: usize, seed: u64) -> Matrix<f64> {
        let mut state = seed;
        let data = (0..rows * cols)
            .map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((state >> 33) as f64 / (1u64 << 31) as f64) - 0.5
            })
            .collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn blocked_matches_naive_across_block_edges() {
        let a = filled(37, 300, 1);
        let b = filled(300, 601, 2);
        let c = matmul(&a, &b).unwrap();
        let r = naive(&a, &b);
        for (x, y) in c.data().iter().zip(r.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn transposed_variants() {
        let a = filled(5, 4, 3);
        let b = filled(5, 6, 4);
        let tn = matmul_tn(&a, &b).unwrap();
        assert_eq!(tn, naive(&a.transpose(), &b));
        let d = filled(6, 5, 5);
        let nt = matmul_nt(&a.transpose(), &d).unwrap();
        assert_eq!(nt.rows(), 4);
        assert_eq!(nt, naive(&a.transpose(), &d.transpose()));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = Matrix::<f32>::zeros(2, 3);
        let b = Matrix::<f32>::zeros(4, 2);
        assert!(matches!(matmul(&a, &b), Err(Error::Shape { .. })));
    }

    #[test]
    fn gather_rows_and_cols() {
        let m = Matrix::from_vec(3, 3, (0..9).map(|v| v as f64).collect()).unwrap();
        assert_eq!(m.gather_rows(&[2, 0]).data(), &[6.0, 7.0, 8.0, 0.0, 1.0, 2.0]);
        assert_eq!(m.gather_cols(&[1]).data(), &[1.0, 4.0, 7.0]);
    }
}
