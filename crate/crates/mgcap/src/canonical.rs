//! Canonical appearance pooling: the Siamese branch forward over a rotation
//! set, element-wise maxout over the per-transform SPD descriptors, mean
//! fusion across granularities, and the dominance report that names each
//! granularity's winning rotation.

use crate::data::{pad_rotate_resize, Image};
use crate::error::Result as PipelineResult;
use crate::linalg::{LinalgError, Matrix, SymMatrix};
use crate::net::{Backbone, BackboneGrads, Tensor};
use crate::sop::{
    covariance, covariance_backward, gaussian_embed, gaussian_embed_backward, trace_ridge,
    trace_ridge_backward, FeatureMatrix, MeanConvention, SopConfig,
};

/// The rotation set Φ: `count` angles spaced 360/count degrees apart,
/// starting at 0.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformSet {
    angles_deg: Vec<f64>,
}

impl TransformSet {
    pub fn rotations(count: usize) -> Result<Self, LinalgError> {
        if count == 0 {
            return Err(LinalgError::DimensionMismatch(
                "transform set needs at least one rotation".into(),
            ));
        }
        let step = 360.0 / count as f64;
        Ok(Self {
            angles_deg: (0..count).map(|j| step * j as f64).collect(),
        })
    }

    pub fn count(&self) -> usize {
        self.angles_deg.len()
    }

    pub fn angles_deg(&self) -> &[f64] {
        &self.angles_deg
    }
}

/// Granularity levels as central-crop side fractions, strictly decreasing,
/// each in (0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct GranularitySpec {
    crop_ratios: Vec<f64>,
}

impl GranularitySpec {
    pub fn new(crop_ratios: Vec<f64>) -> Result<Self, LinalgError> {
        if crop_ratios.is_empty() {
            return Err(LinalgError::DimensionMismatch(
                "granularity spec needs at least one level".into(),
            ));
        }
        for (i, &r) in crop_ratios.iter().enumerate() {
            if !(r > 0.0 && r <= 1.0) {
                return Err(LinalgError::DimensionMismatch(format!(
                    "crop ratio {r} out of (0, 1]"
                )));
            }
            if i > 0 && r >= crop_ratios[i - 1] {
                return Err(LinalgError::DimensionMismatch(
                    "crop ratios must be strictly decreasing".into(),
                ));
            }
        }
        Ok(Self { crop_ratios })
    }

    pub fn levels(&self) -> usize {
        self.crop_ratios.len()
    }

    pub fn crop_ratios(&self) -> &[f64] {
        &self.crop_ratios
    }
}

/// Per-element winner bookkeeping from a maxout pass.
#[derive(Debug, Clone)]
pub struct MaxoutCache {
    order: usize,
    branch_count: usize,
    /// Row-major winner index per SPD-matrix element; ties go to the lowest
    /// branch index.
    argmax_index: Vec<usize>,
    /// Elements won per branch; sums to order².
    dominance: Vec<usize>,
}

impl MaxoutCache {
    pub fn branch_count(&self) -> usize {
        self.branch_count
    }

    pub fn argmax(&self, i: usize, j: usize) -> usize {
        self.argmax_index[i * self.order + j]
    }

    pub fn dominance(&self) -> &[usize] {
        &self.dominance
    }

    /// Branch index with the highest dominance count (lowest index on ties).
    pub fn canonical_index(&self) -> usize {
        let mut best = 0;
        for (i, &d) in self.dominance.iter().enumerate() {
            if d > self.dominance[best] {
                best = i;
            }
        }
        best
    }
}

/// Element-wise maximum across branches. The result is symmetric but not
/// necessarily positive definite; the spectral rectifier restores
/// definiteness downstream.
pub fn maxout(branches: &[SymMatrix]) -> Result<(SymMatrix, MaxoutCache), LinalgError> {
    let first = branches
        .first()
        .ok_or_else(|| LinalgError::DimensionMismatch("maxout over zero branches".into()))?;
    let n = first.order();
    for b in branches {
        if b.order() != n {
            return Err(LinalgError::DimensionMismatch(format!(
                "maxout: branch order {} vs {n}",
                b.order()
            )));
        }
    }
    let mut out = first.as_matrix().clone();
    let mut argmax = vec![0usize; n * n];
    for (bi, b) in branches.iter().enumerate().skip(1) {
        for (k, (&v, o)) in b.as_matrix().data().iter().zip(out.data_mut()).enumerate() {
            if v > *o {
                *o = v;
                argmax[k] = bi;
            }
        }
    }
    let mut dominance = vec![0usize; branches.len()];
    for &a in &argmax {
        dominance[a] += 1;
    }
    let cache = MaxoutCache {
        order: n,
        branch_count: branches.len(),
        argmax_index: argmax,
        dominance,
    };
    Ok((SymMatrix::new(out)?, cache))
}

/// Routes every upstream element to its recorded argmax branch; all other
/// branches receive zero there, so the per-element sum over branches equals
/// the upstream exactly.
pub fn maxout_backward(cache: &MaxoutCache, upstream: &SymMatrix) -> Result<Vec<SymMatrix>, LinalgError> {
    let n = upstream.order();
    if n != cache.order {
        return Err(LinalgError::DimensionMismatch(format!(
            "maxout_backward: upstream order {n} vs cache order {}",
            cache.order
        )));
    }
    // Routing a symmetric upstream through a symmetric argmax map keeps each
    // branch gradient symmetric (ties resolve identically at (i,j) and (j,i)).
    let mut raw = vec![crate::linalg::Matrix::zeros(n, n); cache.branch_count];
    for i in 0..n {
        for j in 0..n {
            let b = cache.argmax(i, j);
            raw[b].set(i, j, upstream.get(i, j));
        }
    }
    raw.into_iter().map(SymMatrix::new).collect()
}

/// Element-wise mean (1/S)·Σ G_s⁺ across granularity levels.
pub fn fuse_granularities(per_level: &[SymMatrix]) -> Result<SymMatrix, LinalgError> {
    let first = per_level
        .first()
        .ok_or_else(|| LinalgError::DimensionMismatch("fuse over zero levels".into()))?;
    let mut acc = first.as_matrix().clone();
    for m in &per_level[1..] {
        acc = acc.add(m.as_matrix())?;
    }
    SymMatrix::new(acc.scale(1.0 / per_level.len() as f64))
}

/// Backward of the mean fusion: each level receives upstream / S.
pub fn fuse_backward(levels: usize, upstream: &SymMatrix) -> Vec<SymMatrix> {
    let per = upstream.scale(1.0 / levels as f64);
    vec![per; levels]
}

/// Forward state of one Siamese branch, kept for the backward pass.
#[derive(Debug)]
pub struct BranchCache {
    pub backbone: crate::net::BackboneCache,
    pub features: FeatureMatrix,
    pub mu: Vec<f64>,
    /// (D, h', w') of the feature map before flattening.
    pub feat_shape: (usize, usize, usize),
}

/// Runs every rotation of `transforms` through the shared-weight backbone
/// and second-order pooling: rotate with zero padding, resize to
/// `input_size`, extract features, then covariance → Gaussian embedding →
/// trace ridge. Returns one SPD descriptor plus cache per branch.
pub fn branch_forward(
    image: &Image,
    transforms: &TransformSet,
    backbone: &Backbone,
    sop_cfg: &SopConfig,
    input_size: usize,
) -> PipelineResult<Vec<(SymMatrix, BranchCache)>> {
    let mut out = Vec::with_capacity(transforms.count());
    for &angle in transforms.angles_deg() {
        let rotated = pad_rotate_resize(image, angle, input_size)?;
        let tensor = Tensor {
            shape: vec![rotated.channels(), input_size, input_size],
            data: rotated.data().to_vec(),
        };
        let (feats, bb_cache) = backbone.forward(tensor, input_size, input_size)?;
        let d = feats.shape[0];
        let (fh, fw) = (feats.shape[1], feats.shape[2]);
        // [D][h'][w'] is already channel-major: columns are spatial locations.
        let fm = FeatureMatrix::new(Matrix::from_vec(d, fh * fw, feats.data)?)?;
        let mu = match sop_cfg.mean_convention {
            MeanConvention::Mean => fm.column_mean(),
            MeanConvention::Sum => fm.column_sum(),
        };
        let c = covariance(&fm)?;
        let g = if sop_cfg.use_gaussian {
            gaussian_embed(&c, &mu)?
        } else {
            c
        };
        let gp = trace_ridge(&g, sop_cfg.lambda);
        out.push((
            gp,
            BranchCache {
                backbone: bb_cache,
                features: fm,
                mu,
                feat_shape: (d, fh, fw),
            },
        ));
    }
    Ok(out)
}

/// Backward through one branch's pooling chain (ridge → embedding →
/// covariance/mean → backbone), yielding the shared-weight gradients.
pub fn branch_backward(
    cache: &BranchCache,
    upstream: &SymMatrix,
    backbone: &Backbone,
    sop_cfg: &SopConfig,
) -> PipelineResult<BackboneGrads> {
    let up_g = trace_ridge_backward(sop_cfg.lambda, upstream);
    let n = cache.features.locations();
    let (dc, dmu) = if sop_cfg.use_gaussian {
        let c_dims = SymMatrix::zeros(cache.features.channels());
        gaussian_embed_backward(&c_dims, &cache.mu, &up_g)?
    } else {
        (up_g, vec![0.0; cache.features.channels()])
    };
    let mut grad_f = covariance_backward(&cache.features, &dc)?
        .as_matrix()
        .clone();
    // μ contribution: every location shares dμ (scaled by 1/N for the mean
    // convention).
    let scale = match sop_cfg.mean_convention {
        MeanConvention::Mean => 1.0 / n as f64,
        MeanConvention::Sum => 1.0,
    };
    for (ch, &dm) in dmu.iter().enumerate() {
        if dm == 0.0 {
            continue;
        }
        let row = &mut grad_f.data_mut()[ch * n..(ch + 1) * n];
        for v in row.iter_mut() {
            *v += dm * scale;
        }
    }
    let (d, fh, fw) = cache.feat_shape;
    let grad_feats = Tensor {
        shape: vec![d, fh, fw],
        data: grad_f.data().to_vec(),
    };
    Ok(backbone.backward(&cache.backbone, &grad_feats))
}

/// Canonical appearance per granularity: the rotation whose branch won the
/// most maxout elements.
#[derive(Debug, Clone, PartialEq)]
pub struct CanonicalReport {
    /// (branch index, angle in degrees, dominance counts) per granularity.
    pub per_granularity: Vec<(usize, f64, Vec<usize>)>,
}

pub fn canonical_report(caches: &[MaxoutCache], transforms: &TransformSet) -> CanonicalReport {
    let per_granularity = caches
        .iter()
        .map(|c| {
            let idx = c.canonical_index();
            (idx, transforms.angles_deg()[idx], c.dominance().to_vec())
        })
        .collect();
    CanonicalReport { per_granularity }
}
