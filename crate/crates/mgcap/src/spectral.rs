//! Spectral normalization of SPD descriptors: one eigendecomposition per
//! forward pass, eigenvalue rectification into [ε_lo, ε_hi], a log / sqrt /
//! identity spectrum map, and the matrix backward pass assembled from the
//! eigenvector coupling (Loewner) matrix and the rectifier mask.

use crate::linalg::{sym_eig, EigSystem, LinalgError, Matrix, SymMatrix};

/// Default lower eigenvalue clip.
pub const EPS_LO: f64 = 1e-5;
/// Default upper eigenvalue clip.
pub const EPS_HI: f64 = 1e5;
/// Relative tolerance below which an eigenvalue pair counts as degenerate
/// and its coupling gradient is zeroed.
pub const DEGENERACY_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormalizationMode {
    LogE,
    SqrtE,
    Identity,
}

impl NormalizationMode {
    /// Spectrum map g applied to rectified eigenvalues.
    pub fn g(&self, v: f64) -> f64 {
        match self {
            NormalizationMode::LogE => v.ln(),
            NormalizationMode::SqrtE => v.sqrt(),
            NormalizationMode::Identity => v,
        }
    }

    /// Derivative g' of the spectrum map.
    pub fn g_prime(&self, v: f64) -> f64 {
        match self {
            NormalizationMode::LogE => 1.0 / v,
            NormalizationMode::SqrtE => 0.5 / v.sqrt(),
            NormalizationMode::Identity => 1.0,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            NormalizationMode::LogE => "log_e",
            NormalizationMode::SqrtE => "sqrt_e",
            NormalizationMode::Identity => "identity",
        }
    }
}

impl std::str::FromStr for NormalizationMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "log_e" => Ok(NormalizationMode::LogE),
            "sqrt_e" => Ok(NormalizationMode::SqrtE),
            "identity" => Ok(NormalizationMode::Identity),
            other => Err(format!(
                "unknown normalization mode '{other}' (expected log_e|sqrt_e|identity)"
            )),
        }
    }
}

/// Eigenvalues clamped into [ε_lo, ε_hi] plus the pass-through mask used by
/// the backward pass: 1 where the eigenvalue lies strictly inside the clip
/// range, 0 where the clamp is active.
#[derive(Debug, Clone)]
pub struct RectifiedSpectrum {
    pub values: Vec<f64>,
    pub epsilon_lo: f64,
    pub epsilon_hi: f64,
    pub mask: Vec<bool>,
}

/// R(i,i) = clamp(ν_i, ε_lo, ε_hi); mask(i) = 1 iff ε_lo < ν_i < ε_hi.
pub fn rectify(eig: &EigSystem, eps_lo: f64, eps_hi: f64) -> RectifiedSpectrum {
    assert!(
        eps_hi > eps_lo && eps_lo > 0.0,
        "clip range must satisfy 0 < eps_lo < eps_hi"
    );
    let values: Vec<f64> = eig
        .eigvals
        .iter()
        .map(|&v| v.clamp(eps_lo, eps_hi))
        .collect();
    let mask: Vec<bool> = eig
        .eigvals
        .iter()
        .map(|&v| v > eps_lo && v < eps_hi)
        .collect();
    RectifiedSpectrum {
        values,
        epsilon_lo: eps_lo,
        epsilon_hi: eps_hi,
        mask,
    }
}

/// Antisymmetric eigenvector-coupling matrix: Q(i,j) = 1/(ν_i − ν_j) off the
/// diagonal, zero on the diagonal and wherever the pair is degenerate.
#[derive(Debug, Clone)]
pub struct LoewnerMatrix {
    q: Matrix,
}

impl LoewnerMatrix {
    pub fn new(eigvals: &[f64], degeneracy_tol: f64) -> Self {
        let n = eigvals.len();
        let mut q = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let d = eigvals[i] - eigvals[j];
                let scale = 1.0f64.max(eigvals[i].abs()).max(eigvals[j].abs());
                if d.abs() < degeneracy_tol * scale {
                    continue;
                }
                q.set(i, j, 1.0 / d);
            }
        }
        Self { q }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.q.get(i, j)
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.q
    }
}

/// Forward state consumed by `normalize_backward`.
#[derive(Debug, Clone)]
pub struct SpectralCache {
    pub input: SymMatrix,
    pub eig: EigSystem,
    pub rect: RectifiedSpectrum,
    pub mode: NormalizationMode,
}

/// U·g(R)·Uᵀ with R the rectified spectrum. One eigendecomposition per call;
/// the rectifier applies for every mode.
pub fn normalize_forward(
    input: &SymMatrix,
    mode: NormalizationMode,
    eps_lo: f64,
    eps_hi: f64,
) -> Result<(SymMatrix, SpectralCache), LinalgError> {
    let eig = sym_eig(input)?;
    let rect = rectify(&eig, eps_lo, eps_hi);
    let n = input.order();
    let mut out = Matrix::zeros(n, n);
    for (col, &r) in rect.values.iter().enumerate() {
        let fv = mode.g(r);
        for i in 0..n {
            let ui = eig.eigvecs.get(i, col) * fv;
            if ui == 0.0 {
                continue;
            }
            for j in 0..n {
                let cur = out.get(i, j);
                out.set(i, j, cur + ui * eig.eigvecs.get(j, col));
            }
        }
    }
    let output = SymMatrix::new(out.symmetrized()?)?;
    let cache = SpectralCache {
        input: input.clone(),
        eig,
        rect,
        mode,
    };
    Ok((output, cache))
}

/// Gradient with respect to the layer input.
///
/// With W = Uᵀ·sym(upstream)·U, assembles
///   M(i,j) = Qᵀ(i,j) · 2·W(i,j)·g(R_j)      for i ≠ j
///   M(i,i) = mask(i) · g'(R_i) · W(i,i)
/// and returns sym(U·M·Uᵀ). Degenerate eigenvalue pairs have their Q entry
/// zeroed, so the output is finite for every symmetric input.
pub fn normalize_backward(
    cache: &SpectralCache,
    upstream: &SymMatrix,
    degeneracy_tol: f64,
) -> Result<SymMatrix, LinalgError> {
    let n = cache.input.order();
    if upstream.order() != n {
        return Err(LinalgError::DimensionMismatch(format!(
            "normalize_backward: upstream order {} vs {n}",
            upstream.order()
        )));
    }
    let u = &cache.eig.eigvecs;
    let q = LoewnerMatrix::new(&cache.eig.eigvals, degeneracy_tol);

    // W = Uᵀ (dL/dY) U; upstream is stored symmetrized.
    let w = u
        .transpose()
        .matmul(upstream.as_matrix())?
        .matmul(u)?;

    let mut m = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                let gp = if cache.rect.mask[i] {
                    cache.mode.g_prime(cache.rect.values[i])
                } else {
                    0.0
                };
                m.set(i, i, gp * w.get(i, i));
            } else {
                // Qᵀ(i,j) = Q(j,i).
                m.set(i, j, q.get(j, i) * 2.0 * w.get(i, j) * cache.mode.g(cache.rect.values[j]));
            }
        }
    }

    let grad = u.matmul(&m)?.matmul(&u.transpose())?;
    SymMatrix::new(grad.symmetrized()?)
}
