//! Dense real matrix kernel.
//!
//! Row-major `f64` matrices with the handful of primitives the rest of the
//! crate needs: multiplication, transpose, Kronecker products, a sign-fixed
//! Householder QR, and a cyclic-Jacobi symmetric eigensolver. Everything is
//! deterministic: summation orders are fixed, so repeated single-threaded
//! runs are bit-identical.
//!
//! Non-finite values are rejected at construction and at the output of the
//! compound operations, so NaN/Inf never propagate silently.

use crate::error::{Error, Result};
use std::io::{Read, Write};

/// Magic bytes of the matrix wire format.
pub const MATRIX_MAGIC: &[u8; 4] = b"IDCP";
/// Wire format version.
pub const MATRIX_FORMAT_VERSION: u32 = 1;

/// Dense row-major matrix of 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// All-ones matrix.
    pub fn ones(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![1.0; rows * cols],
        }
    }

    /// Centering matrix `I - (1/n) * 1 * 1^T`.
    pub fn centering(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        let inv = 1.0 / n as f64;
        for i in 0..n {
            for j in 0..n {
                m.data[i * n + j] = if i == j { 1.0 - inv } else { -inv };
            }
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "data length {} does not match {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("matrix construction".into()));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::Shape("ragged rows".into()));
            }
            data.extend_from_slice(row);
        }
        Matrix::from_vec(r, c, data)
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

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Matrix product with a fixed left-to-right reduction over the inner
    /// dimension.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::DimensionMismatch {
                left_rows: self.rows,
                left_cols: self.cols,
                right_rows: other.rows,
                right_cols: other.cols,
            });
        }
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &self.data[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (p, &a) in arow.iter().enumerate() {
                let brow = &other.data[p * n..(p + 1) * n];
                for j in 0..n {
                    orow[j] += a * brow[j];
                }
            }
        }
        if !out.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("matmul".into()));
        }
        Ok(Matrix {
            rows: m,
            cols: n,
            data: out,
        })
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn trace(&self) -> f64 {
        let n = self.rows.min(self.cols);
        (0..n).map(|i| self.data[i * self.cols + i]).sum()
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a - b)
    }

    fn zip_with(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::DimensionMismatch {
                left_rows: self.rows,
                left_cols: self.cols,
                right_rows: other.rows,
                right_cols: other.cols,
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    /// Frobenius inner product `<A, B> = sum_ij A_ij B_ij`.
    pub fn dot(&self, other: &Matrix) -> Result<f64> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::DimensionMismatch {
                left_rows: self.rows,
                left_cols: self.cols,
                right_rows: other.rows,
                right_cols: other.cols,
            });
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Symmetric part `(A + A^T) / 2` of a square matrix.
    pub fn symmetrize(&self) -> Result<Matrix> {
        if self.rows != self.cols {
            return Err(Error::Shape(format!(
                "symmetrize needs a square matrix, got {}x{}",
                self.rows, self.cols
            )));
        }
        let n = self.rows;
        let mut out = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                out.data[i * n + j] = 0.5 * (self.data[i * n + j] + self.data[j * n + i]);
            }
        }
        Ok(out)
    }

    /// Kronecker product with block ordering `a[i][j] * b`.
    pub fn kron(&self, other: &Matrix) -> Matrix {
        let (p, q) = (other.rows, other.cols);
        let mut out = Matrix::zeros(self.rows * p, self.cols * q);
        for i in 0..self.rows {
            for j in 0..self.cols {
                let a = self.data[i * self.cols + j];
                for u in 0..p {
                    for v in 0..q {
                        out.data[(i * p + u) * out.cols + (j * q + v)] =
                            a * other.data[u * q + v];
                    }
                }
            }
        }
        out
    }

    /// Thin Householder QR with the R diagonal sign-fixed strictly positive,
    /// which makes the factorization unique (`qf` in the retraction).
    ///
    /// Requires `rows >= cols` and full column rank; a raw R diagonal entry
    /// below `1e-12 * ||a||_F` is treated as rank deficiency.
    pub fn qr_positive(&self) -> Result<(Matrix, Matrix)> {
        let (m, n) = (self.rows, self.cols);
        if m < n {
            return Err(Error::Shape(format!(
                "qr_positive needs rows >= cols, got {}x{}",
                m, n
            )));
        }
        let norm_a = self.frobenius_norm();
        let tol = 1e-12 * norm_a;
        let mut r_full = self.clone();
        // Householder vectors, stored per column.
        let mut vs: Vec<Vec<f64>> = Vec::with_capacity(n);
        for k in 0..n {
            // Column k below the diagonal.
            let mut v: Vec<f64> = (k..m).map(|i| r_full.get(i, k)).collect();
            let alpha = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if alpha <= tol {
                return Err(Error::Singular(format!(
                    "qr_positive: column {} is rank deficient (pivot {:.3e} <= {:.3e})",
                    k, alpha, tol
                )));
            }
            let sign = if v[0] >= 0.0 { 1.0 } else { -1.0 };
            v[0] += sign * alpha;
            let vnorm2: f64 = v.iter().map(|x| x * x).sum();
            if vnorm2 > 0.0 {
                // Apply reflector H = I - 2 v v^T / (v^T v) to the trailing block.
                for j in k..n {
                    let mut s = 0.0;
                    for (idx, i) in (k..m).enumerate() {
                        s += v[idx] * r_full.get(i, j);
                    }
                    let f = 2.0 * s / vnorm2;
                    for (idx, i) in (k..m).enumerate() {
                        let val = r_full.get(i, j) - f * v[idx];
                        r_full.set(i, j, val);
                    }
                }
            }
            vs.push(v);
        }
        // Accumulate the thin Q by applying reflectors to the first n columns
        // of the identity, in reverse order.
        let mut q = Matrix::zeros(m, n);
        for j in 0..n {
            q.set(j, j, 1.0);
        }
        for k in (0..n).rev() {
            let v = &vs[k];
            let vnorm2: f64 = v.iter().map(|x| x * x).sum();
            if vnorm2 == 0.0 {
                continue;
            }
            for j in 0..n {
                let mut s = 0.0;
                for (idx, i) in (k..m).enumerate() {
                    s += v[idx] * q.get(i, j);
                }
                let f = 2.0 * s / vnorm2;
                for (idx, i) in (k..m).enumerate() {
                    let val = q.get(i, j) - f * v[idx];
                    q.set(i, j, val);
                }
            }
        }
        // Truncate R to n x n and fix signs so diag(R) > 0.
        let mut r = Matrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                r.set(i, j, r_full.get(i, j));
            }
        }
        for i in 0..n {
            let d = r.get(i, i);
            if d.abs() <= tol {
                return Err(Error::Singular(format!(
                    "qr_positive: R[{0}][{0}] = {1:.3e} below tolerance {2:.3e}",
                    i, d, tol
                )));
            }
            if d < 0.0 {
                for j in i..n {
                    let val = -r.get(i, j);
                    r.set(i, j, val);
                }
                for row in 0..m {
                    let val = -q.get(row, i);
                    q.set(row, i, val);
                }
            }
        }
        if !q.is_finite() || !r.is_finite() {
            return Err(Error::NonFinite("qr_positive".into()));
        }
        Ok((q, r))
    }

    /// Relative asymmetry `||A - A^T||_F / max(1, ||A||_F)`.
    pub fn asymmetry(&self) -> f64 {
        if self.rows != self.cols {
            return f64::INFINITY;
        }
        let n = self.rows;
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                let d = self.data[i * n + j] - self.data[j * n + i];
                s += d * d;
            }
        }
        s.sqrt() / self.frobenius_norm().max(1.0)
    }

    /// Symmetric eigendecomposition by cyclic Jacobi rotations.
    ///
    /// Eigenvalues are returned in descending order with matching orthonormal
    /// eigenvector columns. Intended as a deterministic reference routine,
    /// not a hot path.
    pub fn sym_eig(&self) -> Result<EigDecomposition> {
        if self.rows != self.cols {
            return Err(Error::Shape(format!(
                "sym_eig needs a square matrix, got {}x{}",
                self.rows, self.cols
            )));
        }
        let asym = self.asymmetry();
        if asym > 1e-10 {
            return Err(Error::NotSymmetric(asym));
        }
        let n = self.rows;
        let mut a = self.symmetrize()?;
        let mut v = Matrix::identity(n);
        let off = |a: &Matrix| -> f64 {
            let mut s = 0.0;
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        s += a.get(i, j) * a.get(i, j);
                    }
                }
            }
            s.sqrt()
        };
        let scale = self.frobenius_norm().max(f64::MIN_POSITIVE);
        for _sweep in 0..100 {
            if off(&a) <= 1e-15 * scale {
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    let apq = a.get(p, q);
                    if apq.abs() <= 1e-300 {
                        continue;
                    }
                    let app = a.get(p, p);
                    let aqq = a.get(q, q);
                    let theta = (aqq - app) / (2.0 * apq);
                    let t = if theta >= 0.0 {
                        1.0 / (theta + (1.0 + theta * theta).sqrt())
                    } else {
                        -1.0 / (-theta + (1.0 + theta * theta).sqrt())
                    };
                    let c = 1.0 / (1.0 + t * t).sqrt();
                    let s = t * c;
                    // Rotate rows/columns p and q of A.
                    for k in 0..n {
                        let akp = a.get(k, p);
                        let akq = a.get(k, q);
                        a.set(k, p, c * akp - s * akq);
                        a.set(k, q, s * akp + c * akq);
                    }
                    for k in 0..n {
                        let apk = a.get(p, k);
                        let aqk = a.get(q, k);
                        a.set(p, k, c * apk - s * aqk);
                        a.set(q, k, s * apk + c * aqk);
                    }
                    for k in 0..n {
                        let vkp = v.get(k, p);
                        let vkq = v.get(k, q);
                        v.set(k, p, c * vkp - s * vkq);
                        v.set(k, q, s * vkp + c * vkq);
                    }
                }
            }
        }
        let mut pairs: Vec<(f64, usize)> = (0..n).map(|i| (a.get(i, i), i)).collect();
        pairs.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap());
        let eigenvalues: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let mut vectors = Matrix::zeros(n, n);
        for (new_col, &(_, old_col)) in pairs.iter().enumerate() {
            for i in 0..n {
                vectors.set(i, new_col, v.get(i, old_col));
            }
        }
        Ok(EigDecomposition {
            eigenvalues,
            eigenvectors: vectors,
        })
    }

    /// Serialize in the matrix wire format: magic "IDCP", version u32,
    /// rows u32, cols u32, then row-major little-endian f64 payload.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MATRIX_MAGIC)?;
        w.write_all(&MATRIX_FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.rows as u32).to_le_bytes())?;
        w.write_all(&(self.cols as u32).to_le_bytes())?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Matrix> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MATRIX_MAGIC {
            return Err(Error::Checkpoint("bad matrix magic".into()));
        }
        let mut buf4 = [0u8; 4];
        r.read_exact(&mut buf4)?;
        let version = u32::from_le_bytes(buf4);
        if version != MATRIX_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported matrix format version {}",
                version
            )));
        }
        r.read_exact(&mut buf4)?;
        let rows = u32::from_le_bytes(buf4) as usize;
        r.read_exact(&mut buf4)?;
        let cols = u32::from_le_bytes(buf4) as usize;
        let mut data = Vec::with_capacity(rows * cols);
        let mut buf8 = [0u8; 8];
        for _ in 0..rows * cols {
            r.read_exact(&mut buf8)?;
            data.push(f64::from_le_bytes(buf8));
        }
        Matrix::from_vec(rows, cols, data)
    }
}

/// Eigendecomposition of a symmetric matrix, eigenvalues descending.
#[derive(Debug, Clone)]
pub struct EigDecomposition {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Matrix,
}

impl EigDecomposition {
    /// Reconstruct `Psi Lambda Psi^T`.
    pub fn reconstruct(&self) -> Result<Matrix> {
        let n = self.eigenvalues.len();
        let mut lambda = Matrix::zeros(n, n);
        for i in 0..n {
            lambda.set(i, i, self.eigenvalues[i]);
        }
        self.eigenvectors
            .matmul(&lambda)?
            .matmul(&self.eigenvectors.transpose())
    }
}
