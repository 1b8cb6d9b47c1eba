//! Dense matrices and a deterministic symmetric eigensolver.
//!
//! Everything downstream (pooling, spectral normalization, the classifier)
//! is built on these types. All math is `f64`; matrices are row-major.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LinalgError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite entry at index {0}")]
    NonFinite(usize),
    #[error("eigensolver failed to converge within {0} sweeps")]
    NonConvergence(usize),
}

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix from row-major data, rejecting NaN/Inf entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, LinalgError> {
        if data.len() != rows * cols {
            return Err(LinalgError::DimensionMismatch(format!(
                "expected {}x{}={} entries, got {}",
                rows,
                cols,
                rows * cols,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(LinalgError::NonFinite(i));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
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

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
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

    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix, LinalgError> {
        if self.cols != rhs.rows {
            return Err(LinalgError::DimensionMismatch(format!(
                "matmul: {}x{} * {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        let n = rhs.cols;
        for i in 0..self.rows {
            let arow = self.row(i);
            let orow = &mut out.data[i * n..(i + 1) * n];
            for (k, &a) in arow.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let brow = &rhs.data[k * n..(k + 1) * n];
                for j in 0..n {
                    orow[j] += a * brow[j];
                }
            }
        }
        Ok(out)
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

    pub fn add(&self, rhs: &Matrix) -> Result<Matrix, LinalgError> {
        self.zip_with(rhs, "add", |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Matrix) -> Result<Matrix, LinalgError> {
        self.zip_with(rhs, "sub", |a, b| a - b)
    }

    /// Element-wise (Hadamard) product.
    pub fn hadamard(&self, rhs: &Matrix) -> Result<Matrix, LinalgError> {
        self.zip_with(rhs, "hadamard", |a, b| a * b)
    }

    fn zip_with(
        &self,
        rhs: &Matrix,
        op: &str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Matrix, LinalgError> {
        if self.rows != rhs.rows || self.cols != rhs.cols {
            return Err(LinalgError::DimensionMismatch(format!(
                "{op}: {}x{} vs {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&rhs.data)
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

    pub fn trace(&self) -> f64 {
        let n = self.rows.min(self.cols);
        (0..n).map(|i| self.get(i, i)).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// 1/2 (M + Mᵀ); requires a square matrix.
    pub fn symmetrized(&self) -> Result<Matrix, LinalgError> {
        if self.rows != self.cols {
            return Err(LinalgError::DimensionMismatch(format!(
                "symmetrize: {}x{}",
                self.rows, self.cols
            )));
        }
        let n = self.rows;
        let mut out = self.clone();
        for i in 0..n {
            for j in (i + 1)..n {
                let v = 0.5 * (self.get(i, j) + self.get(j, i));
                out.set(i, j, v);
                out.set(j, i, v);
            }
        }
        Ok(out)
    }
}

/// Square symmetric matrix. Construction checks symmetry to a relative
/// 1e-10 tolerance, then stores the exactly symmetrized matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    mat: Matrix,
}

impl SymMatrix {
    pub const SYMMETRY_TOL: f64 = 1e-10;

    pub fn new(m: Matrix) -> Result<Self, LinalgError> {
        if m.rows != m.cols {
            return Err(LinalgError::DimensionMismatch(format!(
                "symmetric matrix must be square, got {}x{}",
                m.rows, m.cols
            )));
        }
        for i in 0..m.rows {
            for j in (i + 1)..m.cols {
                let a = m.get(i, j);
                let b = m.get(j, i);
                if (a - b).abs() > Self::SYMMETRY_TOL * 1.0f64.max(a.abs()) {
                    return Err(LinalgError::DimensionMismatch(format!(
                        "asymmetry at ({i},{j}): {a} vs {b}"
                    )));
                }
            }
        }
        Ok(Self {
            mat: m.symmetrized().expect("square"),
        })
    }

    pub fn from_rows(n: usize, data: Vec<f64>) -> Result<Self, LinalgError> {
        Self::new(Matrix::from_vec(n, n, data)?)
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            mat: Matrix::zeros(n, n),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            mat: Matrix::identity(n),
        }
    }

    /// diag(d) as a symmetric matrix.
    pub fn from_diag(d: &[f64]) -> Self {
        let mut m = Matrix::zeros(d.len(), d.len());
        for (i, &v) in d.iter().enumerate() {
            m.set(i, i, v);
        }
        Self { mat: m }
    }

    pub fn order(&self) -> usize {
        self.mat.rows
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.mat.get(i, j)
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.mat
    }

    pub fn into_matrix(self) -> Matrix {
        self.mat
    }

    pub fn scale(&self, s: f64) -> SymMatrix {
        SymMatrix {
            mat: self.mat.scale(s),
        }
    }

    pub fn add(&self, rhs: &SymMatrix) -> Result<SymMatrix, LinalgError> {
        Ok(SymMatrix {
            mat: self.mat.add(&rhs.mat)?,
        })
    }

    pub fn trace(&self) -> f64 {
        self.mat.trace()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.mat.frobenius_norm()
    }
}

/// Eigendecomposition of a symmetric matrix: columns of `eigvecs` are unit
/// eigenvectors, `eigvals` sorted non-increasing.
#[derive(Debug, Clone)]
pub struct EigSystem {
    pub eigvecs: Matrix,
    pub eigvals: Vec<f64>,
}

impl EigSystem {
    pub fn order(&self) -> usize {
        self.eigvals.len()
    }
}

/// Sweep budget for the cyclic Jacobi iteration.
pub const JACOBI_MAX_SWEEPS: usize = 100;
/// Off-diagonal Frobenius-norm stopping tolerance, relative to the input scale.
pub const JACOBI_TOL: f64 = 1e-12;

fn off_diagonal_norm(a: &Matrix) -> f64 {
    let n = a.rows;
    let mut s = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let v = a.get(i, j);
            s += 2.0 * v * v;
        }
    }
    s.sqrt()
}

/// Symmetric eigendecomposition by cyclic Jacobi sweeps.
///
/// Deterministic: fixed sweep order (row-cyclic), eigenpairs sorted by
/// eigenvalue non-increasing (stable in the original index on ties), and
/// each eigenvector's first nonzero component made positive.
pub fn sym_eig(m: &SymMatrix) -> Result<EigSystem, LinalgError> {
    let n = m.order();
    let mut a = m.mat.clone();
    let mut u = Matrix::identity(n);
    let stop = JACOBI_TOL * 1.0f64.max(a.frobenius_norm());

    let mut converged = off_diagonal_norm(&a) <= stop;
    let mut sweeps = 0;
    while !converged {
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(LinalgError::NonConvergence(JACOBI_MAX_SWEEPS));
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let app = a.get(p, p);
                let aqq = a.get(q, q);
                // Stable rotation: t = sign(tau) / (|tau| + sqrt(1 + tau^2)).
                let tau = (aqq - app) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;

                // A ← Jᵀ A J on rows/cols p and q.
                for k in 0..n {
                    if k == p || k == q {
                        continue;
                    }
                    let akp = a.get(k, p);
                    let akq = a.get(k, q);
                    let np = c * akp - s * akq;
                    let nq = s * akp + c * akq;
                    a.set(k, p, np);
                    a.set(p, k, np);
                    a.set(k, q, nq);
                    a.set(q, k, nq);
                }
                a.set(p, p, app - t * apq);
                a.set(q, q, aqq + t * apq);
                a.set(p, q, 0.0);
                a.set(q, p, 0.0);

                // U ← U J.
                for k in 0..n {
                    let ukp = u.get(k, p);
                    let ukq = u.get(k, q);
                    u.set(k, p, c * ukp - s * ukq);
                    u.set(k, q, s * ukp + c * ukq);
                }
            }
        }
        sweeps += 1;
        converged = off_diagonal_norm(&a) <= stop;
    }

    let mut order: Vec<usize> = (0..n).collect();
    // Stable descending sort keeps tie order deterministic.
    order.sort_by(|&i, &j| a.get(j, j).partial_cmp(&a.get(i, i)).expect("finite"));

    let mut eigvals = Vec::with_capacity(n);
    let mut eigvecs = Matrix::zeros(n, n);
    for (col, &src) in order.iter().enumerate() {
        eigvals.push(a.get(src, src));
        let mut sign = 0.0;
        for k in 0..n {
            let v = u.get(k, src);
            if v != 0.0 {
                sign = if v > 0.0 { 1.0 } else { -1.0 };
                break;
            }
        }
        let sign = if sign == 0.0 { 1.0 } else { sign };
        for k in 0..n {
            eigvecs.set(k, col, sign * u.get(k, src));
        }
    }

    Ok(EigSystem { eigvecs, eigvals })
}

/// Rebuilds U·diag(f(ν))·Uᵀ, symmetrized. `f` must map eigenvalues to
/// finite scalars.
pub fn reconstruct(e: &EigSystem, f: impl Fn(f64) -> f64) -> Result<SymMatrix, LinalgError> {
    let n = e.order();
    let mut out = Matrix::zeros(n, n);
    for (col, &v) in e.eigvals.iter().enumerate() {
        let fv = f(v);
        if !fv.is_finite() {
            return Err(LinalgError::NonFinite(col));
        }
        if fv == 0.0 {
            continue;
        }
        for i in 0..n {
            let ui = e.eigvecs.get(i, col) * fv;
            if ui == 0.0 {
                continue;
            }
            for j in 0..n {
                let cur = out.get(i, j);
                out.set(i, j, cur + ui * e.eigvecs.get(j, col));
            }
        }
    }
    SymMatrix::new(out.symmetrized()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    /// Closed-form eigendecomposition of [[a,b],[b,c]]; independent of sym_eig.
    fn eig2x2(a: f64, b: f64, c: f64) -> ([f64; 2], [[f64; 2]; 2]) {
        let mean = 0.5 * (a + c);
        let d = (0.25 * (a - c) * (a - c) + b * b).sqrt();
        let l1 = mean + d;
        let l2 = mean - d;
        let v1 = if b != 0.0 {
            [b, l1 - a]
        } else if a >= c {
            [1.0, 0.0]
        } else {
            [0.0, 1.0]
        };
        let n1 = (v1[0] * v1[0] + v1[1] * v1[1]).sqrt();
        let v1 = [v1[0] / n1, v1[1] / n1];
        let v2 = [-v1[1], v1[0]];
        ([l1, l2], [v1, v2])
    }

    #[test]
    fn eig_2x2_matches_closed_form() {
        let m = SymMatrix::from_rows(2, vec![2.0, 1.0, 1.0, 2.0]).unwrap();
        let e = sym_eig(&m).unwrap();
        let ([l1, l2], [v1, _]) = eig2x2(2.0, 1.0, 2.0);
        assert_close(l1, 3.0, 1e-12);
        assert_close(l2, 1.0, 1e-12);
        assert_close(e.eigvals[0], 3.0, 1e-10);
        assert_close(e.eigvals[1], 1.0, 1e-10);
        // Frozen values, sign convention: first component positive.
        assert_close(e.eigvecs.get(0, 0), 0.70711, 1e-5);
        assert_close(e.eigvecs.get(1, 0), 0.70711, 1e-5);
        assert_close(e.eigvecs.get(0, 1), 0.70711, 1e-5);
        assert_close(e.eigvecs.get(1, 1), -0.70711, 1e-5);
        assert_close(e.eigvecs.get(0, 0), v1[0], 1e-10);
    }

    #[test]
    fn eig_identity_order_4() {
        let e = sym_eig(&SymMatrix::identity(4)).unwrap();
        assert_eq!(e.eigvals, vec![1.0; 4]);
        assert_eq!(e.eigvecs, Matrix::identity(4));
    }

    #[test]
    fn eig_diagonal_sorted_non_increasing() {
        let m = SymMatrix::from_diag(&[5.0, 2.0, -1.0]);
        let e = sym_eig(&m).unwrap();
        assert_eq!(e.eigvals, vec![5.0, 2.0, -1.0]);
        assert_eq!(e.eigvecs, Matrix::identity(3));

        // Unsorted diagonal comes out sorted, with matching vectors.
        let m = SymMatrix::from_diag(&[2.0, 5.0, -1.0]);
        let e = sym_eig(&m).unwrap();
        assert_eq!(e.eigvals, vec![5.0, 2.0, -1.0]);
        assert_close(e.eigvecs.get(1, 0), 1.0, 1e-12);
        assert_close(e.eigvecs.get(0, 1), 1.0, 1e-12);
    }

    #[test]
    fn eig_orthonormality_and_reconstruction() {
        // Deterministic pseudorandom symmetric matrix.
        let n = 12;
        let mut x = 0x9e3779b97f4a7c15u64;
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                x = x
                    .wrapping_mul(6364136223846793005)
                    .wrapping_add(1442695040888963407);
                let v = (x >> 11) as f64 / (1u64 << 53) as f64 - 0.5;
                m.set(i, j, v);
                m.set(j, i, v);
            }
        }
        let m = SymMatrix::new(m).unwrap();
        let e = sym_eig(&m).unwrap();

        let utu = e.eigvecs.transpose().matmul(&e.eigvecs).unwrap();
        let diff = utu.sub(&Matrix::identity(n)).unwrap();
        assert!(diff.max_abs() <= 1e-9, "UtU deviation {}", diff.max_abs());

        let rec = reconstruct(&e, |v| v).unwrap();
        let err = rec.as_matrix().sub(m.as_matrix()).unwrap().max_abs();
        assert!(err <= 1e-9 * 1.0f64.max(m.as_matrix().max_abs()));
    }

    #[test]
    fn reconstruct_sqrt_2x2() {
        let m = SymMatrix::from_rows(2, vec![2.0, 1.0, 1.0, 2.0]).unwrap();
        let e = sym_eig(&m).unwrap();
        let r = reconstruct(&e, |v| v.sqrt()).unwrap();
        assert_close(r.get(0, 0), 1.36603, 1e-5);
        assert_close(r.get(0, 1), 0.36603, 1e-5);
        assert_close(r.get(1, 1), 1.36603, 1e-5);
        // Squaring recovers the input.
        let sq = r.as_matrix().matmul(r.as_matrix()).unwrap();
        assert!(sq.sub(m.as_matrix()).unwrap().max_abs() <= 1e-10);
    }

    #[test]
    fn reconstruct_identity_spectrum_roundtrip() {
        let m = SymMatrix::from_rows(2, vec![2.0, 1.0, 1.0, 2.0]).unwrap();
        let e = sym_eig(&m).unwrap();
        let r = reconstruct(&e, |v| v).unwrap();
        assert!(r.as_matrix().sub(m.as_matrix()).unwrap().max_abs() <= 1e-12);

        let e = sym_eig(&SymMatrix::identity(5)).unwrap();
        let r = reconstruct(&e, |v| v * v).unwrap();
        assert!(r.as_matrix().sub(&Matrix::identity(5)).unwrap().max_abs() <= 1e-12);
    }

    #[test]
    fn solver_is_deterministic() {
        let m =
            SymMatrix::from_rows(3, vec![4.0, 1.0, 0.5, 1.0, 3.0, 0.25, 0.5, 0.25, 2.0]).unwrap();
        let a = sym_eig(&m).unwrap();
        let b = sym_eig(&m).unwrap();
        for (x, y) in a.eigvals.iter().zip(&b.eigvals) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        for (x, y) in a.eigvecs.data().iter().zip(b.eigvecs.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn plumbing_ops() {
        // trace of the Gaussian-embedding example: diagonal (2.5, 12.5, 1).
        let g =
            SymMatrix::from_rows(3, vec![2.5, 5.5, 1.5, 5.5, 12.5, 3.5, 1.5, 3.5, 1.0]).unwrap();
        assert_close(g.trace(), 16.0, 1e-12);

        let m = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let h = Matrix::identity(2).hadamard(&m).unwrap();
        assert_eq!(h.get(0, 0), 1.0);
        assert_eq!(h.get(0, 1), 0.0);
        assert_eq!(h.get(1, 1), 4.0);

        assert_eq!(m.transpose().transpose(), m);

        let bad = m.matmul(&Matrix::zeros(3, 3));
        assert!(matches!(bad, Err(LinalgError::DimensionMismatch(_))));
    }

    #[test]
    fn construction_rejects_non_finite() {
        let r = Matrix::from_vec(1, 2, vec![1.0, f64::NAN]);
        assert!(matches!(r, Err(LinalgError::NonFinite(1))));
        let r = Matrix::from_vec(1, 2, vec![f64::INFINITY, 1.0]);
        assert!(matches!(r, Err(LinalgError::NonFinite(0))));
    }

    #[test]
    fn symmetry_check_rejects_asymmetric() {
        let r = SymMatrix::from_rows(2, vec![1.0, 2.0, 2.1, 1.0]);
        assert!(r.is_err());
    }
}
