//! Dense row-major f64 matrices with deterministic multiply kernels.
//!
//! Every reduction runs in a fixed order per output element, so results are
//! bit-identical regardless of how many worker threads rayon hands us.

use crate::error::{Error, Result};
use rayon::prelude::*;

/// Work threshold (multiply-adds) below which kernels stay single-threaded;
/// splitting tiny products across threads costs more than it saves.
const PAR_WORK_THRESHOLD: usize = 1 << 20;

/// Dense row-major matrix of 64-bit reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix from row-major data, validating length and finiteness.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "matrix data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Param(format!(
                "matrix {rows}x{cols} contains non-finite entries"
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// All-zero matrix.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Builds from a slice of equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n_cols) {
            return Err(Error::Shape("rows have unequal lengths".into()));
        }
        Matrix::new(n_rows, n_cols, rows.concat())
    }

    /// Identity matrix of order `n`.
    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Row-major backing slice.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable row-major backing slice (callers must keep entries finite).
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    /// Borrow of row `r`.
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Copies out a contiguous subset of rows `[start, end)`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Matrix> {
        if start > end || end > self.rows {
            return Err(Error::Shape(format!(
                "row slice {start}..{end} outside 0..{}",
                self.rows
            )));
        }
        Ok(Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        })
    }

    /// Horizontal concatenation `[self ‖ other]` (same row count).
    pub fn hcat(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::Shape(format!(
                "hcat row mismatch: {} vs {}",
                self.rows, other.rows
            )));
        }
        let cols = self.cols + other.cols;
        let mut data = Vec::with_capacity(self.rows * cols);
        for r in 0..self.rows {
            data.extend_from_slice(self.row(r));
            data.extend_from_slice(other.row(r));
        }
        Ok(Matrix {
            rows: self.rows,
            cols,
            data,
        })
    }

    /// Copies out columns `[start, end)`.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Matrix> {
        if start > end || end > self.cols {
            return Err(Error::Shape(format!(
                "column slice {start}..{end} outside 0..{}",
                self.cols
            )));
        }
        let cols = end - start;
        let mut data = Vec::with_capacity(self.rows * cols);
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[start..end]);
        }
        Ok(Matrix {
            rows: self.rows,
            cols,
            data,
        })
    }

    /// Standard product `self · b`; fixed k-order summation per output element.
    pub fn matmul(&self, b: &Matrix) -> Result<Matrix> {
        if self.cols != b.rows {
            return Err(Error::Shape(format!(
                "matmul {}x{} · {}x{}",
                self.rows, self.cols, b.rows, b.cols
            )));
        }
        let (m, k_dim, n) = (self.rows, self.cols, b.cols);
        let mut out = vec![0.0; m * n];
        let body = |i: usize, out_row: &mut [f64]| {
            let a_row = &self.data[i * k_dim..(i + 1) * k_dim];
            for (k, &aik) in a_row.iter().enumerate() {
                let b_row = &b.data[k * n..(k + 1) * n];
                for (o, &bkj) in out_row.iter_mut().zip(b_row.iter()) {
                    *o += aik * bkj;
                }
            }
        };
        if m * k_dim * n >= PAR_WORK_THRESHOLD {
            out.par_chunks_mut(n)
                .enumerate()
                .for_each(|(i, out_row)| body(i, out_row));
        } else {
            for (i, out_row) in out.chunks_mut(n).enumerate() {
                body(i, out_row);
            }
        }
        Ok(Matrix {
            rows: m,
            cols: n,
            data: out,
        })
    }

    /// Transposed-left product `selfᵀ · b`, computed as an accumulation of
    /// rank-1 updates so both operands stream row-major.
    pub fn matmul_tn(&self, b: &Matrix) -> Result<Matrix> {
        if self.rows != b.rows {
            return Err(Error::Shape(format!(
                "matmul_tn {}x{} ᵀ· {}x{}",
                self.rows, self.cols, b.rows, b.cols
            )));
        }
        let (m, n, batch) = (self.cols, b.cols, self.rows);
        let mut out = vec![0.0; m * n];
        for k in 0..batch {
            let a_row = &self.data[k * m..(k + 1) * m];
            let b_row = &b.data[k * n..(k + 1) * n];
            for (i, &aki) in a_row.iter().enumerate() {
                let out_row = &mut out[i * n..(i + 1) * n];
                for (o, &bkj) in out_row.iter_mut().zip(b_row.iter()) {
                    *o += aki * bkj;
                }
            }
        }
        Ok(Matrix {
            rows: m,
            cols: n,
            data: out,
        })
    }

    /// Transposed-right product `self · bᵀ` via contiguous row dot products.
    pub fn matmul_nt(&self, b: &Matrix) -> Result<Matrix> {
        if self.cols != b.cols {
            return Err(Error::Shape(format!(
                "matmul_nt {}x{} · {}x{}ᵀ",
                self.rows, self.cols, b.rows, b.cols
            )));
        }
        let (m, n, k_dim) = (self.rows, b.rows, self.cols);
        let mut out = vec![0.0; m * n];
        let body = |i: usize, out_row: &mut [f64]| {
            let a_row = &self.data[i * k_dim..(i + 1) * k_dim];
            for (j, o) in out_row.iter_mut().enumerate() {
                let b_row = &b.data[j * k_dim..(j + 1) * k_dim];
                let mut acc = 0.0;
                for (&av, &bv) in a_row.iter().zip(b_row.iter()) {
                    acc += av * bv;
                }
                *o = acc;
            }
        };
        if m * n * k_dim >= PAR_WORK_THRESHOLD {
            out.par_chunks_mut(n)
                .enumerate()
                .for_each(|(i, out_row)| body(i, out_row));
        } else {
            for (i, out_row) in out.chunks_mut(n).enumerate() {
                body(i, out_row);
            }
        }
        Ok(Matrix {
            rows: m,
            cols: n,
            data: out,
        })
    }

    /// Materialized transpose.
    pub fn transpose(&self) -> Matrix {
        let mut out = vec![0.0; self.rows * self.cols];
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        Matrix {
            rows: self.cols,
            cols: self.rows,
            data: out,
        }
    }

    /// Adds `v` to every row in place (bias broadcast).
    pub fn add_row_vector(&mut self, v: &[f64]) -> Result<()> {
        if v.len() != self.cols {
            return Err(Error::Shape(format!(
                "row vector length {} vs {} columns",
                v.len(),
                self.cols
            )));
        }
        for row in self.data.chunks_mut(self.cols) {
            for (o, &b) in row.iter_mut().zip(v.iter()) {
                *o += b;
            }
        }
        Ok(())
    }

    /// Applies `f` to every entry, returning a new matrix.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mat(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_identity_returns_input() {
        let a = mat(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(a.matmul(&Matrix::identity(2)).unwrap(), a);
    }

    #[test]
    fn matmul_hand_case() {
        let a = mat(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = mat(&[&[5.0, 6.0], &[7.0, 8.0]]);
        let expect = mat(&[&[19.0, 22.0], &[43.0, 50.0]]);
        assert_eq!(a.matmul(&b).unwrap(), expect);
    }

    #[test]
    fn matmul_by_zero_annihilates() {
        let a = mat(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let z = Matrix::zeros(2, 3);
        assert_eq!(a.matmul(&z).unwrap(), Matrix::zeros(2, 3));
    }

    #[test]
    fn matmul_dimension_mismatch_is_shape_error() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 3);
        assert!(matches!(a.matmul(&b), Err(Error::Shape(_))));
    }

    #[test]
    fn construction_rejects_bad_length_and_nonfinite() {
        assert!(matches!(
            Matrix::new(2, 2, vec![1.0; 3]),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            Matrix::new(1, 2, vec![1.0, f64::NAN]),
            Err(Error::Param(_))
        ));
    }

    #[test]
    fn transposed_kernels_agree_with_explicit_transpose() {
        let a = mat(&[&[1.0, -2.0, 0.5], &[0.0, 3.0, 1.0]]);
        let b = mat(&[&[2.0, 1.0], &[0.0, -1.0]]);
        // aᵀ(2x3 -> 3x2) · b(2x2)
        assert_eq!(
            a.matmul_tn(&b).unwrap(),
            a.transpose().matmul(&b).unwrap()
        );
        let c = mat(&[&[1.0, 0.0, 2.0], &[3.0, -1.0, 1.0]]);
        // a(2x3) · cᵀ(3x2)
        assert_eq!(
            a.matmul_nt(&c).unwrap(),
            a.matmul(&c.transpose()).unwrap()
        );
    }

    #[test]
    fn hcat_and_slice_cols_are_inverses() {
        let a = mat(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = mat(&[&[5.0], &[6.0]]);
        let joined = a.hcat(&b).unwrap();
        assert_eq!(joined.cols(), 3);
        assert_eq!(joined.slice_cols(0, 2).unwrap(), a);
        assert_eq!(joined.slice_cols(2, 3).unwrap(), b);
    }

    #[test]
    fn large_product_is_bit_identical_across_thread_counts() {
        // Rows are partitioned across threads but each output element keeps a
        // fixed summation order, so pools of different sizes must agree bit
        // for bit. Matrix is sized above the parallel threshold.
        let n = 128;
        let data_a: Vec<f64> = (0..n * n).map(|i| ((i * 37 + 11) % 101) as f64 * 0.013).collect();
        let data_b: Vec<f64> = (0..n * n).map(|i| ((i * 53 + 7) % 97) as f64 * -0.017).collect();
        let a = Matrix::new(n, n, data_a).unwrap();
        let b = Matrix::new(n, n, data_b).unwrap();

        let pool1 = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let pool4 = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let r1 = pool1.install(|| a.matmul(&b).unwrap());
        let r4 = pool4.install(|| a.matmul(&b).unwrap());
        assert_eq!(r1, r4);
        let s1 = pool1.install(|| a.matmul_nt(&b).unwrap());
        let s4 = pool4.install(|| a.matmul_nt(&b).unwrap());
        assert_eq!(s1, s4);
    }

    proptest! {
        #[test]
        fn matmul_matches_naive_triple_loop(
            m in 1usize..6, k in 1usize..6, n in 1usize..6,
            seed in 0u64..1000
        ) {
            let gen = |s: u64, len: usize| -> Vec<f64> {
                (0..len).map(|i| {
                    let x = s
                        .wrapping_mul(6364136223846793005)
                        .wrapping_add((i as u64).wrapping_mul(1442695040888963407));
                    ((x >> 11) as f64 / (1u64 << 53) as f64) * 4.0 - 2.0
                }).collect()
            };
            let a = Matrix::new(m, k, gen(seed, m * k)).unwrap();
            let b = Matrix::new(k, n, gen(seed ^ 0xabcdef, k * n)).unwrap();
            let fast = a.matmul(&b).unwrap();
            for i in 0..m {
                for j in 0..n {
                    let mut acc = 0.0;
                    for kk in 0..k {
                        acc += a.get(i, kk) * b.get(kk, j);
                    }
                    prop_assert!((fast.get(i, j) - acc).abs() <= 1e-12);
                }
            }
        }

        #[test]
        fn products_of_finite_inputs_stay_finite(
            m in 1usize..5, k in 1usize..5, n in 1usize..5
        ) {
            let a = Matrix::new(m, k, vec![1e100; m * k]).unwrap();
            let b = Matrix::new(k, n, vec![1e-100; k * n]).unwrap();
            let out = a.matmul(&b).unwrap();
            prop_assert!(out.data().iter().all(|v| v.is_finite()));
        }
    }
}
