//! Second-order pooling: covariance of spatial features, Gaussian embedding
//! of (mean, covariance) into one SPD matrix, and the trace-ridge
//! regularizer. Each forward has a matching backward that takes the
//! upstream gradient with respect to its output and returns the gradient
//! with respect to its input.

use crate::linalg::{LinalgError, Matrix, SymMatrix};

/// CNN activations flattened to a C'×N matrix; column n is the feature
/// vector at spatial location n.
#[derive(Debug, Clone)]
pub struct FeatureMatrix {
    mat: Matrix,
}

impl FeatureMatrix {
    pub fn new(mat: Matrix) -> Result<Self, LinalgError> {
        if mat.rows() == 0 || mat.cols() == 0 {
            return Err(LinalgError::DimensionMismatch(
                "feature matrix needs C' >= 1 and N >= 1".into(),
            ));
        }
        Ok(Self { mat })
    }

    pub fn channels(&self) -> usize {
        self.mat.rows()
    }

    pub fn locations(&self) -> usize {
        self.mat.cols()
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.mat
    }

    /// Per-channel mean over locations.
    pub fn column_mean(&self) -> Vec<f64> {
        let n = self.locations() as f64;
        (0..self.channels())
            .map(|c| self.mat.row(c).iter().sum::<f64>() / n)
            .collect()
    }

    /// Per-channel sum over locations.
    pub fn column_sum(&self) -> Vec<f64> {
        (0..self.channels())
            .map(|c| self.mat.row(c).iter().sum::<f64>())
            .collect()
    }
}

/// How the first-order vector of the Gaussian embedding is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeanConvention {
    /// μ = (1/N) Σ fₙ. Default; keeps μμᵀ on the same scale as C.
    Mean,
    /// μ = Σ fₙ.
    Sum,
}

#[derive(Debug, Clone, Copy)]
pub struct SopConfig {
    pub lambda: f64,
    pub use_gaussian: bool,
    pub mean_convention: MeanConvention,
}

impl Default for SopConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-4,
            use_gaussian: true,
            mean_convention: MeanConvention::Mean,
        }
    }
}

/// C = F·Ī·Fᵀ with Ī = (1/N)(I − 11ᵀ/N), i.e. the mean-centered
/// second-moment matrix. Output is symmetric PSD.
pub fn covariance(f: &FeatureMatrix) -> Result<SymMatrix, LinalgError> {
    let c = f.channels();
    let n = f.locations();
    let mean = f.column_mean();
    let inv_n = 1.0 / n as f64;

    let mut out = Matrix::zeros(c, c);
    for i in 0..c {
        let ri = f.as_matrix().row(i);
        for j in i..c {
            let rj = f.as_matrix().row(j);
            let mut acc = 0.0;
            for k in 0..n {
                acc += (ri[k] - mean[i]) * (rj[k] - mean[j]);
            }
            let v = acc * inv_n;
            out.set(i, j, v);
            out.set(j, i, v);
        }
    }
    SymMatrix::new(out)
}

/// ∂L/∂F = (W + Wᵀ)·F·Ī where W is the upstream gradient w.r.t. C.
/// Using F·Ī = (F − μ̄1ᵀ)/N this is 2·W_sym·F_centered/N.
pub fn covariance_backward(
    f: &FeatureMatrix,
    upstream: &SymMatrix,
) -> Result<FeatureMatrix, LinalgError> {
    let c = f.channels();
    let n = f.locations();
    if upstream.order() != c {
        return Err(LinalgError::DimensionMismatch(format!(
            "covariance_backward: upstream order {} vs {} channels",
            upstream.order(),
            c
        )));
    }
    let mean = f.column_mean();
    let inv_n = 1.0 / n as f64;

    let mut grad = Matrix::zeros(c, n);
    for i in 0..c {
        for j in 0..c {
            // upstream is stored symmetrized, so W + Wᵀ = 2W.
            let w = 2.0 * upstream.get(i, j) * inv_n;
            if w == 0.0 {
                continue;
            }
            let src = f.as_matrix().row(j);
            let m = mean[j];
            let dst = &mut grad.data_mut()[i * n..(i + 1) * n];
            for k in 0..n {
                dst[k] += w * (src[k] - m);
            }
        }
    }
    FeatureMatrix::new(grad)
}

/// Lifts (C, μ) into the (C'+1)×(C'+1) block matrix [[C + μμᵀ, μ], [μᵀ, 1]].
pub fn gaussian_embed(c: &SymMatrix, mu: &[f64]) -> Result<SymMatrix, LinalgError> {
    let d = c.order();
    if mu.len() != d {
        return Err(LinalgError::DimensionMismatch(format!(
            "gaussian_embed: mu length {} vs order {}",
            mu.len(),
            d
        )));
    }
    let mut out = Matrix::zeros(d + 1, d + 1);
    for i in 0..d {
        for j in 0..d {
            out.set(i, j, c.get(i, j) + mu[i] * mu[j]);
        }
        out.set(i, d, mu[i]);
        out.set(d, i, mu[i]);
    }
    out.set(d, d, 1.0);
    SymMatrix::new(out)
}

/// Gradients of the Gaussian embedding. The upstream gradient is
/// symmetrized first; then ∂L/∂C is its upper-left block and
/// ∂L/∂μ = (W_UL + W_ULᵀ)·μ + border column + border rowᵀ.
pub fn gaussian_embed_backward(
    _c: &SymMatrix,
    mu: &[f64],
    upstream: &SymMatrix,
) -> Result<(SymMatrix, Vec<f64>), LinalgError> {
    let d = mu.len();
    if upstream.order() != d + 1 {
        return Err(LinalgError::DimensionMismatch(format!(
            "gaussian_embed_backward: upstream order {} vs {}",
            upstream.order(),
            d + 1
        )));
    }
    let mut dc = Matrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            dc.set(i, j, upstream.get(i, j));
        }
    }
    let mut dmu = vec![0.0; d];
    for i in 0..d {
        let mut acc = 0.0;
        for j in 0..d {
            // W_UL + W_ULᵀ = 2·W_UL on the symmetrized upstream.
            acc += 2.0 * upstream.get(i, j) * mu[j];
        }
        // Border column and border row coincide after symmetrization.
        acc += 2.0 * upstream.get(i, d);
        dmu[i] = acc;
    }
    Ok((SymMatrix::new(dc)?, dmu))
}

/// G + λ·trace(G)·I.
pub fn trace_ridge(g: &SymMatrix, lambda: f64) -> SymMatrix {
    let ridge = lambda * g.trace();
    let n = g.order();
    let mut out = g.as_matrix().clone();
    for i in 0..n {
        let v = out.get(i, i);
        out.set(i, i, v + ridge);
    }
    SymMatrix::new(out).expect("ridge preserves symmetry")
}

/// ∂L/∂G = W + λ·trace(W)·I.
pub fn trace_ridge_backward(lambda: f64, upstream: &SymMatrix) -> SymMatrix {
    let ridge = lambda * upstream.trace();
    let n = upstream.order();
    let mut out = upstream.as_matrix().clone();
    for i in 0..n {
        let v = out.get(i, i);
        out.set(i, i, v + ridge);
    }
    SymMatrix::new(out).expect("symmetric")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::sym_eig;

    fn fm(rows: usize, cols: usize, data: Vec<f64>) -> FeatureMatrix {
        FeatureMatrix::new(Matrix::from_vec(rows, cols, data).unwrap()).unwrap()
    }

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    /// Brute-force oracle: Σ (fₙ−μ̄)(fₙ−μ̄)ᵀ / N.
    fn covariance_oracle(f: &FeatureMatrix) -> Matrix {
        let c = f.channels();
        let n = f.locations();
        let mean = f.column_mean();
        let mut out = Matrix::zeros(c, c);
        for k in 0..n {
            for i in 0..c {
                for j in 0..c {
                    let v = out.get(i, j)
                        + (f.as_matrix().get(i, k) - mean[i]) * (f.as_matrix().get(j, k) - mean[j])
                            / n as f64;
                    out.set(i, j, v);
                }
            }
        }
        out
    }

    #[test]
    fn covariance_2x2_example() {
        let f = fm(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let c = covariance(&f).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert_close(c.get(i, j), 0.25, 1e-12);
            }
        }
        let oracle = covariance_oracle(&f);
        assert!(c.as_matrix().sub(&oracle).unwrap().max_abs() <= 1e-12);
    }

    #[test]
    fn covariance_constant_columns_is_zero() {
        let f = fm(3, 4, vec![2.0; 12]);
        let c = covariance(&f).unwrap();
        assert_eq!(c.as_matrix().max_abs(), 0.0);

        // N = 1 also centers away everything.
        let f = fm(3, 1, vec![1.0, -2.0, 0.5]);
        assert_eq!(covariance(&f).unwrap().as_matrix().max_abs(), 0.0);
    }

    #[test]
    fn covariance_is_psd() {
        let mut x = 7u64;
        let mut next = move || {
            x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (x >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        for _ in 0..50 {
            let c = 5;
            let n = 9;
            let data: Vec<f64> = (0..c * n).map(|_| next() * 3.0).collect();
            let cov = covariance(&fm(c, n, data)).unwrap();
            let e = sym_eig(&cov).unwrap();
            for v in e.eigvals {
                assert!(v >= -1e-12, "negative eigenvalue {v}");
            }
        }
    }

    #[test]
    fn covariance_backward_example() {
        let f = fm(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let g = covariance_backward(&f, &SymMatrix::identity(2)).unwrap();
        let expect = [[-0.5, 0.5], [-0.5, 0.5]];
        for i in 0..2 {
            for j in 0..2 {
                assert_close(g.as_matrix().get(i, j), expect[i][j], 1e-12);
            }
        }
    }

    #[test]
    fn covariance_backward_zero_upstream() {
        let f = fm(2, 3, vec![1.0, 2.0, 0.0, 3.0, 4.0, 1.0]);
        let g = covariance_backward(&f, &SymMatrix::zeros(2)).unwrap();
        assert_eq!(g.as_matrix().max_abs(), 0.0);
    }

    #[test]
    fn covariance_backward_matches_finite_differences() {
        let f = fm(3, 5, vec![
            0.3, -0.2, 0.9, 0.1, -0.7, //
            1.1, 0.4, -0.3, 0.8, 0.2, //
            -0.5, 0.6, 0.0, -0.1, 0.9,
        ]);
        let w = SymMatrix::from_rows(3, vec![0.5, -0.2, 0.1, -0.2, 0.3, 0.7, 0.1, 0.7, -0.4])
            .unwrap();
        let analytic = covariance_backward(&f, &w).unwrap();

        let loss = |data: &[f64]| -> f64 {
            let f = fm(3, 5, data.to_vec());
            let c = covariance(&f).unwrap();
            let mut l = 0.0;
            for i in 0..3 {
                for j in 0..3 {
                    l += w.get(i, j) * c.get(i, j);
                }
            }
            l
        };
        let h = 1e-5;
        let base = f.as_matrix().data().to_vec();
        for idx in 0..base.len() {
            let mut plus = base.clone();
            plus[idx] += h;
            let mut minus = base.clone();
            minus[idx] -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let a = analytic.as_matrix().data()[idx];
            assert!(
                (fd - a).abs() <= 1e-6 * 1.0f64.max(fd.abs().max(a.abs())),
                "idx {idx}: fd {fd} analytic {a}"
            );
        }

        // Constant-column features: gradient columns sum to zero per channel.
        let f = fm(2, 4, vec![1.0; 8]);
        let g = covariance_backward(&f, &w2(0.4, 0.1, -0.3)).unwrap();
        for i in 0..2 {
            let s: f64 = g.as_matrix().row(i).iter().sum();
            assert!(s.abs() <= 1e-12);
        }
    }

    fn w2(a: f64, b: f64, c: f64) -> SymMatrix {
        SymMatrix::from_rows(2, vec![a, b, b, c]).unwrap()
    }

    #[test]
    fn gaussian_embed_example() {
        let c = SymMatrix::from_rows(2, vec![0.25, 0.25, 0.25, 0.25]).unwrap();
        let g = gaussian_embed(&c, &[1.5, 3.5]).unwrap();
        let expect = [
            [2.5, 5.5, 1.5],
            [5.5, 12.5, 3.5],
            [1.5, 3.5, 1.0],
        ];
        for i in 0..3 {
            for j in 0..3 {
                assert_close(g.get(i, j), expect[i][j], 1e-12);
            }
        }
        assert_eq!(g.get(2, 2), 1.0);
    }

    #[test]
    fn gaussian_embed_zero_case() {
        let g = gaussian_embed(&SymMatrix::zeros(3), &[0.0; 3]).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                if i != j {
                    assert_eq!(g.get(i, j), 0.0);
                }
            }
            assert_eq!(g.get(i, i), 0.0);
        }
        assert_eq!(g.get(3, 3), 1.0);
    }

    #[test]
    fn gaussian_embed_backward_identity_upstream() {
        let c = SymMatrix::zeros(2);
        let (dc, dmu) = gaussian_embed_backward(&c, &[0.0, 0.0], &SymMatrix::identity(3)).unwrap();
        assert!(dc.as_matrix().sub(&Matrix::identity(2)).unwrap().max_abs() <= 1e-12);
        assert_eq!(dmu, vec![0.0, 0.0]);
    }

    #[test]
    fn gaussian_embed_backward_zero_upstream() {
        let c = SymMatrix::identity(2);
        let (dc, dmu) = gaussian_embed_backward(&c, &[1.0, -2.0], &SymMatrix::zeros(3)).unwrap();
        assert_eq!(dc.as_matrix().max_abs(), 0.0);
        assert_eq!(dmu, vec![0.0, 0.0]);
    }

    #[test]
    fn gaussian_embed_backward_border_cell() {
        // Unit weight at border cell (0, 2), symmetrized on construction:
        // the μ gradient picks up 2 × the symmetrized half-weight.
        let upstream = SymMatrix::from_rows(
            3,
            vec![0.0, 0.0, 0.5, 0.0, 0.0, 0.0, 0.5, 0.0, 0.0],
        )
        .unwrap();
        let c = SymMatrix::zeros(2);
        let (_, dmu) = gaussian_embed_backward(&c, &[0.0, 0.0], &upstream).unwrap();
        assert_close(dmu[0], 1.0, 1e-12);
        assert_close(dmu[1], 0.0, 1e-12);
    }

    #[test]
    fn gaussian_embed_backward_matches_finite_differences() {
        let c0 = SymMatrix::from_rows(2, vec![0.8, 0.3, 0.3, 1.2]).unwrap();
        let mu0 = [0.4, -0.9];
        let w = SymMatrix::from_rows(
            3,
            vec![0.2, -0.5, 0.7, -0.5, 0.9, 0.1, 0.7, 0.1, -0.3],
        )
        .unwrap();
        let (dc, dmu) = gaussian_embed_backward(&c0, &mu0, &w).unwrap();

        let loss = |c: &SymMatrix, mu: &[f64]| -> f64 {
            let g = gaussian_embed(c, mu).unwrap();
            let mut l = 0.0;
            for i in 0..3 {
                for j in 0..3 {
                    l += w.get(i, j) * g.get(i, j);
                }
            }
            l
        };
        let h = 1e-5;
        // μ entries.
        for i in 0..2 {
            let mut p = mu0;
            p[i] += h;
            let mut m = mu0;
            m[i] -= h;
            let fd = (loss(&c0, &p) - loss(&c0, &m)) / (2.0 * h);
            assert!((fd - dmu[i]).abs() <= 1e-6 * 1.0f64.max(fd.abs()));
        }
        // Symmetric perturbations of C.
        for i in 0..2 {
            for j in i..2 {
                let mut p = c0.as_matrix().clone();
                p.set(i, j, p.get(i, j) + h);
                p.set(j, i, p.get(i, j));
                let mut m = c0.as_matrix().clone();
                m.set(i, j, m.get(i, j) - h);
                m.set(j, i, m.get(i, j));
                let fd = (loss(&SymMatrix::new(p).unwrap(), &mu0)
                    - loss(&SymMatrix::new(m).unwrap(), &mu0))
                    / (2.0 * h);
                let a = if i == j {
                    dc.get(i, i)
                } else {
                    2.0 * dc.get(i, j)
                };
                assert!((fd - a).abs() <= 1e-6 * 1.0f64.max(fd.abs()), "({i},{j})");
            }
        }
    }

    #[test]
    fn trace_ridge_example() {
        let g =
            SymMatrix::from_rows(3, vec![2.5, 5.5, 1.5, 5.5, 12.5, 3.5, 1.5, 3.5, 1.0]).unwrap();
        let r = trace_ridge(&g, 1e-4);
        assert_close(r.get(0, 0), 2.5016, 1e-12);
        assert_close(r.get(1, 1), 12.5016, 1e-12);
        assert_close(r.get(2, 2), 1.0016, 1e-12);
        assert_eq!(r.get(0, 1), 5.5);
        assert_eq!(r.get(0, 2), 1.5);

        // λ = 0 is the identity map.
        let r0 = trace_ridge(&g, 0.0);
        assert_eq!(r0.as_matrix(), g.as_matrix());
    }

    #[test]
    fn trace_ridge_backward_cases() {
        let up = SymMatrix::identity(3);
        let g = trace_ridge_backward(1e-4, &up);
        for i in 0..3 {
            assert_close(g.get(i, i), 1.0 + 3e-4, 1e-15);
        }

        let up = SymMatrix::from_rows(2, vec![0.3, 0.7, 0.7, -0.1]).unwrap();
        assert_eq!(trace_ridge_backward(0.0, &up).as_matrix(), up.as_matrix());

        // Traceless upstream passes through unchanged.
        let up = SymMatrix::from_rows(2, vec![1.0, 0.4, 0.4, -1.0]).unwrap();
        assert_eq!(trace_ridge_backward(1e-4, &up).as_matrix(), up.as_matrix());
    }

    #[test]
    fn trace_ridge_positive_definite_on_psd_input() {
        // Gaussian-embedded PSD matrix: minimum eigenvalue after the ridge
        // is at least λ·trace(G).
        let f = fm(2, 3, vec![0.2, 0.9, 0.4, 0.5, 0.1, 0.8]);
        let c = covariance(&f).unwrap();
        let g = gaussian_embed(&c, &f.column_mean()).unwrap();
        let lambda = 1e-4;
        let r = trace_ridge(&g, lambda);
        let min_eig = sym_eig(&r)
            .unwrap()
            .eigvals
            .into_iter()
            .fold(f64::INFINITY, f64::min);
        assert!(min_eig >= lambda * g.trace() - 1e-10);
    }

    #[test]
    fn mean_vs_sum_convention() {
        let f = fm(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(f.column_mean(), vec![1.5, 3.5]);
        assert_eq!(f.column_sum(), vec![3.0, 7.0]);
    }
}
