//! Finite-difference verification of every backward pass, scope by scope.
//! Each scope draws seeded random problems (with tie and eigen-gap guards
//! where the analytic gradient is only defined away from kinks), compares
//! the analytic gradient against central differences, and reports the worst
//! relative error.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::canonical::{maxout, maxout_backward, TransformSet};
use crate::data::{synthetic_image, SyntheticSpec};
use crate::error::Result;
use crate::linalg::{Matrix, SymMatrix};
use crate::net::{cross_entropy, relu, Backbone, Tensor};
use crate::pipeline::{sample_backward, sample_forward, Model, PipelineSettings};
use crate::rng;
use crate::sop::{
    covariance, covariance_backward, gaussian_embed, gaussian_embed_backward, trace_ridge,
    trace_ridge_backward, FeatureMatrix, MeanConvention, SopConfig,
};
use crate::spectral::{
    normalize_backward, normalize_forward, NormalizationMode, DEGENERACY_TOL, EPS_HI, EPS_LO,
};

pub const FD_STEP: f64 = 1e-5;
/// Closed-form layers must match finite differences this tightly.
pub const THRESHOLD_TIGHT: f64 = 1e-5;
/// Spectral and network scopes allow for conditioning of the eig pass.
pub const THRESHOLD_LOOSE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Covariance,
    Gaussian,
    Ridge,
    Maxout,
    SpectralLog,
    SpectralSqrt,
    Backbone,
    Full,
}

impl Scope {
    pub const ALL: [Scope; 8] = [
        Scope::Covariance,
        Scope::Gaussian,
        Scope::Ridge,
        Scope::Maxout,
        Scope::SpectralLog,
        Scope::SpectralSqrt,
        Scope::Backbone,
        Scope::Full,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Scope::Covariance => "covariance",
            Scope::Gaussian => "gaussian",
            Scope::Ridge => "ridge",
            Scope::Maxout => "maxout",
            Scope::SpectralLog => "spectral_log",
            Scope::SpectralSqrt => "spectral_sqrt",
            Scope::Backbone => "backbone",
            Scope::Full => "full",
        }
    }

    pub fn threshold(&self) -> f64 {
        match self {
            Scope::Covariance | Scope::Gaussian | Scope::Ridge | Scope::Maxout => THRESHOLD_TIGHT,
            _ => THRESHOLD_LOOSE,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScopeReport {
    pub scope: Scope,
    pub trials: usize,
    pub max_rel_err: f64,
    pub threshold: f64,
}

impl ScopeReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.threshold
    }
}

/// ‖a − n‖∞ / max(‖a‖∞, ‖n‖∞, 1e-6).
fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let mut diff: f64 = 0.0;
    let mut scale: f64 = 1e-6;
    for (a, n) in analytic.iter().zip(numeric) {
        diff = diff.max((a - n).abs());
        scale = scale.max(a.abs()).max(n.abs());
    }
    diff / scale
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.gen_range(lo..hi)
}

fn random_sym(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> SymMatrix {
    let mut m = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = uniform(rng, -scale, scale);
            m.set(i, j, v);
            m.set(j, i, v);
        }
    }
    SymMatrix::new(m).expect("constructed symmetric")
}

/// Random orthogonal matrix from Gram-Schmidt over a Gaussian draw.
fn random_orthogonal(rng: &mut ChaCha8Rng, n: usize) -> Matrix {
    loop {
        let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n);
        let mut ok = true;
        for _ in 0..n {
            let mut v: Vec<f64> = (0..n).map(|_| uniform(rng, -1.0, 1.0)).collect();
            for c in &cols {
                let dot: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
                for (x, y) in v.iter_mut().zip(c) {
                    *x -= dot * y;
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-6 {
                ok = false;
                break;
            }
            v.iter_mut().for_each(|x| *x /= norm);
            cols.push(v);
        }
        if !ok {
            continue;
        }
        let mut u = Matrix::zeros(n, n);
        for (j, c) in cols.iter().enumerate() {
            for (i, &v) in c.iter().enumerate() {
                u.set(i, j, v);
            }
        }
        return u;
    }
}

/// SPD matrix with a jittered log-stratified spectrum in [lo, hi]: each
/// eigenvalue sits in its own log-space stratum, so adjacent eigenvalues are
/// separated by a factor of at least exp(span/(2n)) — no degenerate pairs by
/// construction.
pub fn random_spd(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> SymMatrix {
    let (ln_lo, ln_hi) = (lo.ln(), hi.ln());
    let span = ln_hi - ln_lo;
    let mut eigs: Vec<f64> = (0..n)
        .map(|i| {
            let t = (i as f64 + 0.25 + 0.5 * uniform(rng, 0.0, 1.0)) / n as f64;
            (ln_lo + t * span).exp()
        })
        .collect();
    eigs.reverse();
    let u = random_orthogonal(rng, n);
    let mut lam = Matrix::zeros(n, n);
    for (i, &v) in eigs.iter().enumerate() {
        lam.set(i, i, v);
    }
    let a = u.matmul(&lam).unwrap().matmul(&u.transpose()).unwrap();
    SymMatrix::new(a.symmetrized().unwrap()).unwrap()
}

/// trace(W · M) over symmetric matrices.
fn frob_inner(w: &SymMatrix, m: &SymMatrix) -> f64 {
    w.as_matrix()
        .data()
        .iter()
        .zip(m.as_matrix().data())
        .map(|(a, b)| a * b)
        .sum()
}

/// Central difference of `loss` along symmetric basis directions, expressed
/// in the same per-entry layout as the analytic symmetric gradients.
fn fd_sym_gradient(base: &SymMatrix, mut loss: impl FnMut(&SymMatrix) -> f64) -> Matrix {
    let n = base.order();
    let mut grad = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let mut p = base.as_matrix().clone();
            p.set(i, j, p.get(i, j) + FD_STEP);
            p.set(j, i, p.get(i, j));
            let mut q = base.as_matrix().clone();
            q.set(i, j, q.get(i, j) - FD_STEP);
            q.set(j, i, q.get(i, j));
            let d = (loss(&SymMatrix::new(p).unwrap()) - loss(&SymMatrix::new(q).unwrap()))
                / (2.0 * FD_STEP);
            if i == j {
                grad.set(i, i, d);
            } else {
                grad.set(i, j, d / 2.0);
                grad.set(j, i, d / 2.0);
            }
        }
    }
    grad
}

fn check_covariance(rng: &mut ChaCha8Rng) -> f64 {
    let c = rng.gen_range(2..=6usize);
    let n = rng.gen_range(3..=10usize);
    let data: Vec<f64> = (0..c * n).map(|_| uniform(rng, -2.0, 2.0)).collect();
    let f = FeatureMatrix::new(Matrix::from_vec(c, n, data.clone()).unwrap()).unwrap();
    let w = random_sym(rng, c, 1.0);
    let analytic = covariance_backward(&f, &w).unwrap();

    let mut numeric = vec![0.0; c * n];
    for idx in 0..c * n {
        let mut p = data.clone();
        p[idx] += FD_STEP;
        let mut q = data.clone();
        q[idx] -= FD_STEP;
        let lp = frob_inner(
            &w,
            &covariance(&FeatureMatrix::new(Matrix::from_vec(c, n, p).unwrap()).unwrap()).unwrap(),
        );
        let lq = frob_inner(
            &w,
            &covariance(&FeatureMatrix::new(Matrix::from_vec(c, n, q).unwrap()).unwrap()).unwrap(),
        );
        numeric[idx] = (lp - lq) / (2.0 * FD_STEP);
    }
    rel_err(analytic.as_matrix().data(), &numeric)
}

fn check_gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let c = rng.gen_range(2..=6usize);
    let cm = random_sym(rng, c, 1.5);
    let mu: Vec<f64> = (0..c).map(|_| uniform(rng, -1.5, 1.5)).collect();
    let w = random_sym(rng, c + 1, 1.0);
    let (dc, dmu) = gaussian_embed_backward(&cm, &mu, &w).unwrap();

    let loss_c = |m: &SymMatrix| frob_inner(&w, &gaussian_embed(m, &mu).unwrap());
    let fd_c = fd_sym_gradient(&cm, loss_c);

    let mut fd_mu = vec![0.0; c];
    for (i, slot) in fd_mu.iter_mut().enumerate() {
        let mut p = mu.clone();
        p[i] += FD_STEP;
        let mut q = mu.clone();
        q[i] -= FD_STEP;
        *slot = (frob_inner(&w, &gaussian_embed(&cm, &p).unwrap())
            - frob_inner(&w, &gaussian_embed(&cm, &q).unwrap()))
            / (2.0 * FD_STEP);
    }

    let e1 = rel_err(dc.as_matrix().data(), fd_c.data());
    let e2 = rel_err(&dmu, &fd_mu);
    e1.max(e2)
}

fn check_ridge(rng: &mut ChaCha8Rng) -> f64 {
    let n = rng.gen_range(2..=8usize);
    let g = random_sym(rng, n, 2.0);
    let lambda = [0.0, 1e-4, 0.1][rng.gen_range(0..3usize)];
    let w = random_sym(rng, n, 1.0);
    let analytic = trace_ridge_backward(lambda, &w);
    let fd = fd_sym_gradient(&g, |m| frob_inner(&w, &trace_ridge(m, lambda)));
    rel_err(analytic.as_matrix().data(), fd.data())
}

fn check_maxout(rng: &mut ChaCha8Rng) -> f64 {
    let n = rng.gen_range(2..=6usize);
    let k = rng.gen_range(2..=4usize);
    // Tie guard: regenerate until every cross-branch element gap is clear of
    // the FD step.
    let branches: Vec<SymMatrix> = loop {
        let cand: Vec<SymMatrix> = (0..k).map(|_| random_sym(rng, n, 1.0)).collect();
        let mut ok = true;
        'outer: for a in 0..k {
            for b in (a + 1)..k {
                for (x, y) in cand[a]
                    .as_matrix()
                    .data()
                    .iter()
                    .zip(cand[b].as_matrix().data())
                {
                    if (x - y).abs() < 1e-3 {
                        ok = false;
                        break 'outer;
                    }
                }
            }
        }
        if ok {
            break cand;
        }
    };
    let w = random_sym(rng, n, 1.0);
    let (_, cache) = maxout(&branches).unwrap();
    let analytic = maxout_backward(&cache, &w).unwrap();

    let mut worst: f64 = 0.0;
    for (bi, branch) in branches.iter().enumerate() {
        let fd = fd_sym_gradient(branch, |m| {
            let mut set: Vec<SymMatrix> = branches.clone();
            set[bi] = m.clone();
            let (out, _) = maxout(&set).unwrap();
            frob_inner(&w, &out)
        });
        worst = worst.max(rel_err(analytic[bi].as_matrix().data(), fd.data()));
    }
    worst
}

fn check_spectral(rng: &mut ChaCha8Rng, mode: NormalizationMode) -> f64 {
    // Orders cycle small to descriptor-sized; large orders use directional
    // probes to keep the oracle cheap.
    let order = [3, 8, 33][rng.gen_range(0..3usize)];
    let g = random_spd(rng, order, 0.05, 50.0);
    let w = random_sym(rng, order, 1.0);
    let (_, cache) = normalize_forward(&g, mode, EPS_LO, EPS_HI).unwrap();
    let analytic = normalize_backward(&cache, &w, DEGENERACY_TOL).unwrap();

    let loss = |m: &SymMatrix| {
        let (y, _) = normalize_forward(m, mode, EPS_LO, EPS_HI).unwrap();
        frob_inner(&w, &y)
    };

    if order <= 8 {
        let fd = fd_sym_gradient(&g, loss);
        rel_err(analytic.as_matrix().data(), fd.data())
    } else {
        let mut a = Vec::new();
        let mut nvec = Vec::new();
        for _ in 0..12 {
            let dir = random_sym(rng, order, 1.0);
            let mut p = g.as_matrix().clone();
            let mut q = g.as_matrix().clone();
            for idx in 0..order * order {
                p.data_mut()[idx] += FD_STEP * dir.as_matrix().data()[idx];
                q.data_mut()[idx] -= FD_STEP * dir.as_matrix().data()[idx];
            }
            let fd = (loss(&SymMatrix::new(p).unwrap()) - loss(&SymMatrix::new(q).unwrap()))
                / (2.0 * FD_STEP);
            a.push(frob_inner(&analytic, &dir));
            nvec.push(fd);
        }
        rel_err(&a, &nvec)
    }
}

/// Margin guards for the piecewise-linear layers: ReLU pre-activations and
/// pool windows must be clear of their kinks for the FD step to be valid.
fn backbone_margins_ok(bb: &Backbone, input: &Tensor, h: usize, w: usize) -> bool {
    let pre1 = bb.conv1.forward(input, h, w);
    if pre1.data.iter().any(|v| v.abs() < 5e-4) {
        return false;
    }
    let a1 = relu(&pre1);
    let (p1, _) = crate::net::maxpool2(&a1, bb.conv1.out_ch, h, w);
    let pre2 = bb.conv2.forward(&p1, h / 2, w / 2);
    if pre2.data.iter().any(|v| v.abs() < 5e-4) {
        return false;
    }
    true
}

fn check_backbone(rng: &mut ChaCha8Rng) -> f64 {
    let (h, w) = (8usize, 8usize);
    let d = 4;
    let (bb, input) = loop {
        let mut init = rng.clone();
        let bb = Backbone::new(1, d, &mut init);
        *rng = init;
        let data: Vec<f64> = (0..h * w).map(|_| uniform(rng, 0.05, 1.0)).collect();
        let input = Tensor {
            shape: vec![1, h, w],
            data,
        };
        if backbone_margins_ok(&bb, &input, h, w) {
            break (bb, input);
        }
    };
    let (f0, cache) = bb.forward(input.clone(), h, w).unwrap();
    let wvec: Vec<f64> = (0..f0.len()).map(|_| uniform(rng, -1.0, 1.0)).collect();
    let grads = bb.backward(
        &cache,
        &Tensor {
            shape: f0.shape.clone(),
            data: wvec.clone(),
        },
    );
    let loss = |bb: &Backbone| {
        let (f, _) = bb.forward(input.clone(), h, w).unwrap();
        f.data.iter().zip(&wvec).map(|(a, b)| a * b).sum::<f64>()
    };

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for layer in 0..3usize {
        let len = match layer {
            0 => bb.conv1.weight.data.len(),
            1 => bb.conv2.weight.data.len(),
            _ => bb.conv3.weight.data.len(),
        };
        for _ in 0..8 {
            let idx = rng.gen_range(0..len);
            let mut plus = bb.clone();
            let mut minus = bb.clone();
            let (p, m, a) = match layer {
                0 => (
                    &mut plus.conv1.weight.data,
                    &mut minus.conv1.weight.data,
                    grads.conv1.weight.data[idx],
                ),
                1 => (
                    &mut plus.conv2.weight.data,
                    &mut minus.conv2.weight.data,
                    grads.conv2.weight.data[idx],
                ),
                _ => (
                    &mut plus.conv3.weight.data,
                    &mut minus.conv3.weight.data,
                    grads.conv3.weight.data[idx],
                ),
            };
            p[idx] += FD_STEP;
            m[idx] -= FD_STEP;
            numeric.push((loss(&plus) - loss(&minus)) / (2.0 * FD_STEP));
            analytic.push(a);
        }
    }
    rel_err(&analytic, &numeric)
}

fn full_settings(mode: NormalizationMode, seed: u64) -> PipelineSettings {
    PipelineSettings {
        transforms: TransformSet::rotations(2).unwrap(),
        granularities: crate::canonical::GranularitySpec::new(vec![1.0]).unwrap(),
        mode,
        eps_lo: EPS_LO,
        eps_hi: EPS_HI,
        sop: SopConfig {
            lambda: 1e-4,
            use_gaussian: true,
            mean_convention: MeanConvention::Mean,
        },
        input_size: 8,
        image_channels: 1,
        feat_channels: 4,
        num_classes: 2,
        seed,
    }
}

fn check_full(rng: &mut ChaCha8Rng, trial: u64) -> f64 {
    let mode = [
        NormalizationMode::SqrtE,
        NormalizationMode::LogE,
        NormalizationMode::Identity,
    ][(trial % 3) as usize];
    let settings = full_settings(mode, rng.gen());
    let model = Model::new(&settings);
    let spec = SyntheticSpec {
        image_size: 8,
        master_seed: rng.gen(),
        ..Default::default()
    };

    // Guards: away from maxout ties and eigenvalue degeneracies.
    let (img, fwd) = loop {
        let class = rng.gen_range(0..8usize);
        let index = rng.gen_range(0..32usize);
        let img = synthetic_image(&spec, class, index);
        let fwd = sample_forward(&model, &settings, &img).unwrap();
        let eigs = &fwd.spectral.eig.eigvals;
        let gap_ok = eigs
            .windows(2)
            .all(|w| (w[0] - w[1]).abs() > 1e-4 * w[0].abs().max(1.0));
        let spds: Vec<&SymMatrix> = fwd.branch_caches[0]
            .iter()
            .map(|_| &fwd.fused)
            .collect();
        let _ = spds;
        if gap_ok {
            break (img, fwd);
        }
    };

    let label = rng.gen_range(0..2usize);
    let (_, grads) = sample_backward(&model, &settings, &fwd, label, true).unwrap();
    let loss_of = |m: &Model| {
        let f = sample_forward(m, &settings, &img).unwrap();
        cross_entropy(&f.probs, label).unwrap().0
    };

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let mut probe = |a: f64, plus: Model, minus: Model| {
        numeric.push((loss_of(&plus) - loss_of(&minus)) / (2.0 * FD_STEP));
        analytic.push(a);
    };
    for _ in 0..3 {
        let idx = rng.gen_range(0..model.backbones[0].conv1.weight.data.len());
        let mut p = model.clone();
        let mut m = model.clone();
        p.backbones[0].conv1.weight.data[idx] += FD_STEP;
        m.backbones[0].conv1.weight.data[idx] -= FD_STEP;
        probe(grads.backbones[0].conv1.weight.data[idx], p, m);
    }
    for _ in 0..3 {
        let idx = rng.gen_range(0..model.backbones[0].conv3.weight.data.len());
        let mut p = model.clone();
        let mut m = model.clone();
        p.backbones[0].conv3.weight.data[idx] += FD_STEP;
        m.backbones[0].conv3.weight.data[idx] -= FD_STEP;
        probe(grads.backbones[0].conv3.weight.data[idx], p, m);
    }
    for _ in 0..3 {
        let idx = rng.gen_range(0..model.head.weight.data.len());
        let mut p = model.clone();
        let mut m = model.clone();
        p.head.weight.data[idx] += FD_STEP;
        m.head.weight.data[idx] -= FD_STEP;
        probe(grads.head.weight.data[idx], p, m);
    }
    rel_err(&analytic, &numeric)
}

/// Runs `trials` seeded trials of one scope.
pub fn run_scope(scope: Scope, trials: usize, seed: u64) -> Result<ScopeReport> {
    let mut worst: f64 = 0.0;
    for trial in 0..trials {
        let mut rng = rng::stream(seed, &[0x6c, scope as u64, trial as u64]);
        let err = match scope {
            Scope::Covariance => check_covariance(&mut rng),
            Scope::Gaussian => check_gaussian(&mut rng),
            Scope::Ridge => check_ridge(&mut rng),
            Scope::Maxout => check_maxout(&mut rng),
            Scope::SpectralLog => check_spectral(&mut rng, NormalizationMode::LogE),
            Scope::SpectralSqrt => check_spectral(&mut rng, NormalizationMode::SqrtE),
            Scope::Backbone => check_backbone(&mut rng),
            Scope::Full => check_full(&mut rng, trial as u64),
        };
        worst = worst.max(err);
    }
    Ok(ScopeReport {
        scope,
        trials,
        max_rel_err: worst,
        threshold: scope.threshold(),
    })
}

#[derive(Debug, Clone)]
pub struct DegenerateReport {
    pub all_finite: bool,
    /// |∂ trace(√G)/∂G − (1/(2√2))·I|_∞ at G = 2I.
    pub sqrt_2i_err: f64,
}

impl DegenerateReport {
    pub fn passed(&self) -> bool {
        self.all_finite && self.sqrt_2i_err <= 1e-6
    }
}

/// Degenerate-spectrum suite: λI and rank-1-plus-ridge inputs must yield
/// all-finite gradients; at G = 2I the trace(√G) gradient has a closed form.
pub fn run_degenerate(mode: NormalizationMode, seed: u64) -> Result<DegenerateReport> {
    let mut all_finite = true;
    let mut rng = rng::stream(seed, &[0x6d]);
    for order in [2usize, 5, 33] {
        for lam in [1e-4, 1.0, 1e3] {
            let g = SymMatrix::identity(order).scale(lam);
            let w = random_sym(&mut rng, order, 1.0);
            let (_, cache) = normalize_forward(&g, mode, EPS_LO, EPS_HI)?;
            let grad = normalize_backward(&cache, &w, DEGENERACY_TOL)?;
            all_finite &= grad.as_matrix().data().iter().all(|v| v.is_finite());
        }
        // Rank-1 plus ridge.
        let dir: Vec<f64> = (0..order).map(|_| uniform(&mut rng, -1.0, 1.0)).collect();
        let mut m = Matrix::zeros(order, order);
        for i in 0..order {
            for j in 0..order {
                m.set(i, j, dir[i] * dir[j]);
            }
            m.set(i, i, m.get(i, i) + 1e-4);
        }
        let g = SymMatrix::new(m)?;
        let w = random_sym(&mut rng, order, 1.0);
        let (_, cache) = normalize_forward(&g, mode, EPS_LO, EPS_HI)?;
        let grad = normalize_backward(&cache, &w, DEGENERACY_TOL)?;
        all_finite &= grad.as_matrix().data().iter().all(|v| v.is_finite());
    }

    // G = 2I, f(G) = trace(√G): gradient is (1/(2√2))·I.
    let g = SymMatrix::identity(4).scale(2.0);
    let (_, cache) = normalize_forward(&g, NormalizationMode::SqrtE, EPS_LO, EPS_HI)?;
    let grad = normalize_backward(&cache, &SymMatrix::identity(4), DEGENERACY_TOL)?;
    let expect = 1.0 / (2.0 * 2.0f64.sqrt());
    let mut err: f64 = 0.0;
    for i in 0..4 {
        for j in 0..4 {
            let want = if i == j { expect } else { 0.0 };
            err = err.max((grad.get(i, j) - want).abs());
        }
    }
    Ok(DegenerateReport {
        all_finite,
        sqrt_2i_err: err,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quick_scope_smoke() {
        for scope in [Scope::Covariance, Scope::Gaussian, Scope::Ridge, Scope::Maxout] {
            let r = run_scope(scope, 5, 42).unwrap();
            assert!(r.passed(), "{}: {}", scope.name(), r.max_rel_err);
        }
    }

    #[test]
    fn spectral_scopes_smoke() {
        for scope in [Scope::SpectralLog, Scope::SpectralSqrt] {
            let r = run_scope(scope, 5, 42).unwrap();
            assert!(r.passed(), "{}: {}", scope.name(), r.max_rel_err);
        }
    }

    #[test]
    fn degenerate_suite_smoke() {
        for mode in [NormalizationMode::SqrtE, NormalizationMode::LogE] {
            let r = run_degenerate(mode, 7).unwrap();
            assert!(r.passed(), "{mode:?}: {r:?}");
        }
    }

    #[test]
    fn random_spd_has_requested_spectrum() {
        let mut rng = rng::stream(1, &[2]);
        let g = random_spd(&mut rng, 8, 1e-3, 1e3);
        let e = crate::linalg::sym_eig(&g).unwrap();
        let min_ratio = ((1e3f64.ln() - 1e-3f64.ln()) / 16.0).exp();
        for v in &e.eigvals {
            assert!(*v >= 1e-3 * 0.99 && *v <= 1e3 * 1.01);
        }
        for w in e.eigvals.windows(2) {
            assert!(w[0] / w[1] >= min_ratio * 0.999, "{} / {}", w[0], w[1]);
        }
    }
}
