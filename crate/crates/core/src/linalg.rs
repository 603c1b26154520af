//! Dense row-major matrices and the minimum-norm least-squares solver.
//!
//! Everything downstream (GCN passes, feature recovery, decoder training)
//! runs on 64-bit floats: the attack solves near-singular systems and 32-bit
//! rounding would swamp the recovered signal.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default reciprocal-condition cutoff for [`solve_min_norm`]: singular
/// values below `rcond * sigma_max` are treated as zero.
pub const DEFAULT_RCOND: f64 = 1e-10;

/// Dense row-major matrix of `f64`.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl std::fmt::Debug for Matrix {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows.min(8) {
            write!(f, "  ")?;
            for j in 0..self.cols.min(8) {
                write!(f, "{:>10.4} ", self[(i, j)])?;
            }
            writeln!(f, "{}", if self.cols > 8 { "..." } else { "" })?;
        }
        if self.rows > 8 {
            writeln!(f, "  ...")?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Shape("matrix needs at least one row".into()));
        }
        let cols = rows[0].len();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        Ok(Matrix { rows: rows.len(), cols, data })
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "storage length {} does not match {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Column vector from a slice.
    pub fn column(values: &[f64]) -> Self {
        Matrix { rows: values.len(), cols: 1, data: values.to_vec() }
    }

    /// Row vector from a slice.
    pub fn row_vector(values: &[f64]) -> Self {
        Matrix { rows: 1, cols: values.len(), data: values.to_vec() }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::Numeric(format!("{what} contains non-finite entries")))
        }
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[(j, i)] = self[(i, j)];
            }
        }
        out
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "matmul {}x{} * {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = other.row(k);
                for (o, &b) in out_row.iter_mut().zip(b_row.iter()) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self^T * other` without materializing the transpose.
    pub fn transpose_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::Shape(format!(
                "transpose_matmul {}x{} ^T * {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let a_row = self.row(k);
            let b_row = other.row(k);
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row.iter()) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self * other^T` without materializing the transpose.
    pub fn matmul_transpose(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::Shape(format!(
                "matmul_transpose {}x{} * {}x{}^T",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a_row = self.row(i);
            for j in 0..other.rows {
                let b_row = other.row(j);
                let mut acc = 0.0;
                for (&a, &b) in a_row.iter().zip(b_row.iter()) {
                    acc += a * b;
                }
                out[(i, j)] = acc;
            }
        }
        Ok(out)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a * b)
    }

    pub fn zip_with(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "elementwise op on {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Matrix { rows: self.rows, cols: self.cols, data })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    /// `self += other * s`.
    pub fn add_scaled_in_place(&mut self, other: &Matrix, s: f64) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape("add_scaled_in_place shape mismatch".into()));
        }
        for (a, &b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b * s;
        }
        Ok(())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    /// Maximum absolute elementwise difference; infinity on shape mismatch.
    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        if self.shape() != other.shape() {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(other.data.iter())
            .fold(0.0, |m, (&a, &b)| m.max((a - b).abs()))
    }

    /// Top-left `rows x cols` block.
    pub fn crop(&self, rows: usize, cols: usize) -> Result<Matrix> {
        if rows > self.rows || cols > self.cols {
            return Err(Error::Shape("crop larger than matrix".into()));
        }
        Ok(Matrix::from_fn(rows, cols, |i, j| self[(i, j)]))
    }

    /// Zero-pad to `rows x cols`, keeping `self` in the top-left block.
    pub fn pad(&self, rows: usize, cols: usize) -> Result<Matrix> {
        if rows < self.rows || cols < self.cols {
            return Err(Error::Shape("pad smaller than matrix".into()));
        }
        let mut out = Matrix::zeros(rows, cols);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[(i, j)] = self[(i, j)];
            }
        }
        Ok(out)
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

// Serialized form keeps the exact f64 bit patterns so checkpoints round-trip
// bit-for-bit.
#[derive(Serialize, Deserialize)]
struct MatrixRepr {
    rows: usize,
    cols: usize,
    bits: Vec<String>,
}

impl Serialize for Matrix {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let repr = MatrixRepr {
            rows: self.rows,
            cols: self.cols,
            bits: self.data.iter().map(|v| format!("{:016x}", v.to_bits())).collect(),
        };
        repr.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Matrix {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let repr = MatrixRepr::deserialize(d)?;
        if repr.bits.len() != repr.rows * repr.cols {
            return Err(serde::de::Error::custom("matrix storage length mismatch"));
        }
        let mut data = Vec::with_capacity(repr.bits.len());
        for b in &repr.bits {
            let bits = u64::from_str_radix(b, 16)
                .map_err(|_| serde::de::Error::custom("invalid f64 bit pattern"))?;
            data.push(f64::from_bits(bits));
        }
        Ok(Matrix { rows: repr.rows, cols: repr.cols, data })
    }
}

/// Minimum-Frobenius-norm solution of `A X = B` in the least-squares sense.
///
/// Computed through the SVD of `A`, dropping singular values below
/// [`DEFAULT_RCOND`] times the largest one. Underdetermined systems return
/// the smallest solution, inconsistent ones the least-squares fit.
pub fn solve_min_norm(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    solve_min_norm_rcond(a, b, DEFAULT_RCOND)
}

/// [`solve_min_norm`] with an explicit singular-value cutoff.
pub fn solve_min_norm_rcond(a: &Matrix, b: &Matrix, rcond: f64) -> Result<Matrix> {
    a.check_finite("solver lhs")?;
    b.check_finite("solver rhs")?;
    if a.rows() != b.rows() {
        return Err(Error::Shape(format!(
            "solve {}x{} against rhs {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let (m, n) = a.shape();
    let k = b.cols();

    let na_a = nalgebra::DMatrix::from_row_slice(m, n, a.data());
    let na_b = nalgebra::DMatrix::from_row_slice(m, k, b.data());
    let svd = na_a
        .try_svd(true, true, 1e-14, 100_000)
        .ok_or_else(|| Error::Numeric("SVD failed to converge".into()))?;
    let u = svd.u.expect("u requested");
    let v_t = svd.v_t.expect("v_t requested");
    let sigma = svd.singular_values;

    let sigma_max = sigma.iter().fold(0.0f64, |acc, &s| acc.max(s));
    let cutoff = rcond * sigma_max;

    // X = V * diag(1/sigma_i) * U^T * B, zeroing the dropped directions.
    let mut ut_b = u.transpose() * na_b;
    for (i, &s) in sigma.iter().enumerate() {
        let factor = if s > cutoff && s > 0.0 { 1.0 / s } else { 0.0 };
        for j in 0..k {
            ut_b[(i, j)] *= factor;
        }
    }
    let x = v_t.transpose() * ut_b;

    let out = Matrix::from_fn(n, k, |i, j| x[(i, j)]);
    out.check_finite("solver result")?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn matmul_matches_naive_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_matrix(&mut rng, 4, 6);
        let b = random_matrix(&mut rng, 6, 3);
        let c = a.matmul(&b).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                let mut acc = 0.0;
                for k in 0..6 {
                    acc += a[(i, k)] * b[(k, j)];
                }
                assert!((c[(i, j)] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn transpose_matmul_agrees_with_explicit_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_matrix(&mut rng, 5, 4);
        let b = random_matrix(&mut rng, 5, 3);
        let fast = a.transpose_matmul(&b).unwrap();
        let slow = a.transpose().matmul(&b).unwrap();
        assert!(fast.max_abs_diff(&slow) < 1e-12);

        let c = random_matrix(&mut rng, 3, 4);
        let fast = a.matmul_transpose(&c).unwrap();
        let slow = a.matmul(&c.transpose()).unwrap();
        assert!(fast.max_abs_diff(&slow) < 1e-12);
    }

    #[test]
    fn solve_identity_returns_rhs() {
        let a = Matrix::identity(4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = random_matrix(&mut rng, 4, 2);
        let x = solve_min_norm(&a, &b).unwrap();
        assert!(x.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn solve_zero_matrix_returns_zero() {
        let a = Matrix::zeros(3, 5);
        let b = Matrix::from_fn(3, 2, |i, j| (i + j) as f64 + 1.0);
        let x = solve_min_norm(&a, &b).unwrap();
        assert_eq!(x.shape(), (5, 2));
        assert!(x.is_zero());
    }

    #[test]
    fn solve_recovers_constructed_solution() {
        // Overdetermined consistent system: A (8x4) * X0 (4x2) = B.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_matrix(&mut rng, 8, 4);
        let x0 = random_matrix(&mut rng, 4, 2);
        let b = a.matmul(&x0).unwrap();
        let x = solve_min_norm(&a, &b).unwrap();
        assert!(x.max_abs_diff(&x0) < 1e-8, "residual {}", x.max_abs_diff(&x0));
    }

    #[test]
    fn solve_residual_is_orthogonal_to_column_space() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..20 {
            let m = rng.random_range(2..8);
            let n = rng.random_range(2..8);
            let k = rng.random_range(1..4);
            let a = random_matrix(&mut rng, m, n);
            let b = random_matrix(&mut rng, m, k);
            let x = solve_min_norm(&a, &b).unwrap();
            let residual = a.matmul(&x).unwrap().sub(&b).unwrap();
            let at_r = a.transpose_matmul(&residual).unwrap();
            let at_b = a.transpose_matmul(&b).unwrap();
            let bound = 1e-8 * at_b.frobenius_norm() + 1e-12;
            assert!(
                at_r.frobenius_norm() < bound,
                "trial {trial}: |A^T r| = {} vs bound {}",
                at_r.frobenius_norm(),
                bound
            );
        }
    }

    #[test]
    fn solve_rejects_non_finite_input() {
        let mut a = Matrix::zeros(2, 2);
        a[(0, 0)] = f64::NAN;
        let b = Matrix::zeros(2, 1);
        assert!(matches!(solve_min_norm(&a, &b), Err(Error::Numeric(_))));
    }

    #[test]
    fn serde_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = random_matrix(&mut rng, 3, 7).map(|v| v * 1e-7);
        let json = serde_json::to_string(&m).unwrap();
        let back: Matrix = serde_json::from_str(&json).unwrap();
        assert_eq!(m.shape(), back.shape());
        for (a, b) in m.data().iter().zip(back.data().iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
