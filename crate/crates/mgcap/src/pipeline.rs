//! End-to-end model: per-granularity Siamese backbones feeding canonical
//! maxout pooling, granularity fusion, spectral normalization and the
//! classifier head — plus the training epoch and evaluation loops.

use rayon::prelude::*;

use crate::canonical::{
    branch_backward, branch_forward, canonical_report, fuse_backward, fuse_granularities, maxout,
    maxout_backward, BranchCache, CanonicalReport, GranularitySpec, MaxoutCache, TransformSet,
};
use crate::data::{center_crop, maybe_hflip, random_crop, Image, LoadedDataset, TRAIN_SPLIT};
use crate::error::{Error, Result};
use crate::linalg::SymMatrix;
use crate::net::{
    cross_entropy, devectorize_grad, lr_at, sgd_momentum_step, softmax, sym_vec_len,
    vectorize_sym, Backbone, BackboneGrads, ClassifierHead, NetError, Stage,
};
use crate::rng;
use crate::sop::SopConfig;
use crate::spectral::{normalize_forward, normalize_backward, NormalizationMode, SpectralCache, DEGENERACY_TOL};

// RNG stream tags.
const TAG_INIT: u64 = 0x10;
const TAG_SHUFFLE: u64 = 0x11;
const TAG_AUG: u64 = 0x12;

/// Everything the pipeline needs at run time, resolved from the CLI config.
#[derive(Debug, Clone)]
pub struct PipelineSettings {
    pub transforms: TransformSet,
    pub granularities: GranularitySpec,
    pub mode: NormalizationMode,
    pub eps_lo: f64,
    pub eps_hi: f64,
    pub sop: SopConfig,
    /// Backbone input side; augmentation crops to this size.
    pub input_size: usize,
    pub image_channels: usize,
    pub feat_channels: usize,
    pub num_classes: usize,
    pub seed: u64,
}

impl PipelineSettings {
    /// Order of the fused SPD descriptor: C'+1 with the Gaussian embedding,
    /// C' with plain covariance pooling.
    pub fn feature_order(&self) -> usize {
        if self.sop.use_gaussian {
            self.feat_channels + 1
        } else {
            self.feat_channels
        }
    }
}

/// Weight-shared within a granularity, independent across granularities,
/// with one classifier head over the fused descriptor.
#[derive(Debug, Clone)]
pub struct Model {
    pub backbones: Vec<Backbone>,
    pub head: ClassifierHead,
}

/// Gradient (or velocity) storage shaped exactly like `Model`'s parameters.
#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub backbones: Vec<BackboneGrads>,
    pub head: ClassifierHead,
}

impl Model {
    pub fn new(settings: &PipelineSettings) -> Self {
        let backbones = (0..settings.granularities.levels())
            .map(|s| {
                let mut r = rng::stream(settings.seed, &[TAG_INIT, s as u64]);
                Backbone::new(settings.image_channels, settings.feat_channels, &mut r)
            })
            .collect();
        let mut r = rng::stream(settings.seed, &[TAG_INIT, 0xbead]);
        let dim = sym_vec_len(settings.feature_order());
        Self {
            backbones,
            head: ClassifierHead::new(settings.num_classes, dim, &mut r),
        }
    }

    pub fn zero_grads(&self) -> ModelGrads {
        ModelGrads {
            backbones: self.backbones.iter().map(|b| b.zero_grads()).collect(),
            head: self.head.zeros_like(),
        }
    }

    /// Visits every parameter tensor in a fixed order: per granularity the
    /// three conv layers (weight then bias), then the head.
    pub fn visit<'a>(&'a self, mut f: impl FnMut(String, &'a [usize], &'a [f64])) {
        for (s, bb) in self.backbones.iter().enumerate() {
            for (li, layer) in [&bb.conv1, &bb.conv2, &bb.conv3].into_iter().enumerate() {
                f(
                    format!("g{s}.conv{}.weight", li + 1),
                    &layer.weight.shape,
                    &layer.weight.data,
                );
                f(
                    format!("g{s}.conv{}.bias", li + 1),
                    &layer.bias.shape,
                    &layer.bias.data,
                );
            }
        }
        f("head.weight".into(), &self.head.weight.shape, &self.head.weight.data);
        f("head.bias".into(), &self.head.bias.shape, &self.head.bias.data);
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(String, &mut Vec<f64>)) {
        for (s, bb) in self.backbones.iter_mut().enumerate() {
            for (li, layer) in [&mut bb.conv1, &mut bb.conv2, &mut bb.conv3]
                .into_iter()
                .enumerate()
            {
                f(format!("g{s}.conv{}.weight", li + 1), &mut layer.weight.data);
                f(format!("g{s}.conv{}.bias", li + 1), &mut layer.bias.data);
            }
        }
        f("head.weight".into(), &mut self.head.weight.data);
        f("head.bias".into(), &mut self.head.bias.data);
    }
}

impl ModelGrads {
    fn add_scaled(&mut self, other: &ModelGrads, scale: f64) {
        for (a, b) in self.backbones.iter_mut().zip(&other.backbones) {
            for (la, lb) in [
                (&mut a.conv1, &b.conv1),
                (&mut a.conv2, &b.conv2),
                (&mut a.conv3, &b.conv3),
            ] {
                axpy(&mut la.weight.data, &lb.weight.data, scale);
                axpy(&mut la.bias.data, &lb.bias.data, scale);
            }
        }
        axpy(&mut self.head.weight.data, &other.head.weight.data, scale);
        axpy(&mut self.head.bias.data, &other.head.bias.data, scale);
    }
}

fn axpy(dst: &mut [f64], src: &[f64], a: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

/// Full forward state of one sample.
pub struct SampleForward {
    pub probs: Vec<f64>,
    pub fused: SymMatrix,
    pub normalized: SymMatrix,
    pub feature_vec: Vec<f64>,
    pub spectral: SpectralCache,
    pub maxout_caches: Vec<MaxoutCache>,
    pub branch_caches: Vec<Vec<BranchCache>>,
}

impl SampleForward {
    pub fn prediction(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }

    pub fn report(&self, transforms: &TransformSet) -> CanonicalReport {
        canonical_report(&self.maxout_caches, transforms)
    }
}

/// Forward over all granularities and transforms for one (already
/// augmented) image at the backbone input size.
pub fn sample_forward(
    model: &Model,
    settings: &PipelineSettings,
    image: &Image,
) -> Result<SampleForward> {
    let mut per_level = Vec::with_capacity(settings.granularities.levels());
    let mut maxout_caches = Vec::with_capacity(settings.granularities.levels());
    let mut branch_caches = Vec::with_capacity(settings.granularities.levels());

    for (s, &ratio) in settings.granularities.crop_ratios().iter().enumerate() {
        let granule = center_crop(image, ratio)?;
        let branches = branch_forward(
            &granule,
            &settings.transforms,
            &model.backbones[s],
            &settings.sop,
            settings.input_size,
        )?;
        let (spds, caches): (Vec<_>, Vec<_>) = branches.into_iter().unzip();
        let (pooled, cache) = maxout(&spds)?;
        per_level.push(pooled);
        maxout_caches.push(cache);
        branch_caches.push(caches);
    }

    let fused = fuse_granularities(&per_level)?;
    let (normalized, spectral) =
        normalize_forward(&fused, settings.mode, settings.eps_lo, settings.eps_hi)?;
    let feature_vec = vectorize_sym(&normalized);
    let logits = model.head.logits(&feature_vec)?;
    let probs = softmax(&logits);

    Ok(SampleForward {
        probs,
        fused,
        normalized,
        feature_vec,
        spectral,
        maxout_caches,
        branch_caches,
    })
}

/// Backward from the cross-entropy loss. When `backbone_grads` is false
/// (warm-up stage) only the head gradient is populated.
pub fn sample_backward(
    model: &Model,
    settings: &PipelineSettings,
    fwd: &SampleForward,
    label: usize,
    backbone_grads: bool,
) -> Result<(f64, ModelGrads)> {
    let (loss, dlogits) = cross_entropy(&fwd.probs, label)?;
    let (gw, gb, gv) = model.head.backward(&fwd.feature_vec, &dlogits);
    let mut grads = ModelGrads {
        backbones: if backbone_grads {
            model.backbones.iter().map(|b| b.zero_grads()).collect()
        } else {
            Vec::new()
        },
        head: ClassifierHead {
            classes: model.head.classes,
            dim: model.head.dim,
            weight: gw,
            bias: gb,
        },
    };
    if !backbone_grads {
        return Ok((loss, grads));
    }

    let order = settings.feature_order();
    let up_norm = devectorize_grad(&gv, order)?;
    let up_fused = normalize_backward(&fwd.spectral, &up_norm, DEGENERACY_TOL)?;
    let per_level = fuse_backward(settings.granularities.levels(), &up_fused);

    for (s, up) in per_level.iter().enumerate() {
        let branch_ups = maxout_backward(&fwd.maxout_caches[s], up)?;
        // Fixed accumulation order: branch index ascending within the level.
        for (cache, bup) in fwd.branch_caches[s].iter().zip(&branch_ups) {
            let bg = branch_backward(cache, bup, &model.backbones[s], &settings.sop)?;
            let dst = &mut grads.backbones[s];
            for (la, lb) in [
                (&mut dst.conv1, &bg.conv1),
                (&mut dst.conv2, &bg.conv2),
                (&mut dst.conv3, &bg.conv3),
            ] {
                axpy(&mut la.weight.data, &lb.weight.data, 1.0);
                axpy(&mut la.bias.data, &lb.bias.data, 1.0);
            }
        }
    }
    Ok((loss, grads))
}

// ---------------------------------------------------------------------------
// Training / evaluation
// ---------------------------------------------------------------------------

/// Momentum buffers shaped like the model.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub velocity: ModelGrads,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl OptimizerState {
    pub fn new(model: &Model, momentum: f64, weight_decay: f64) -> Self {
        Self {
            velocity: model.zero_grads(),
            momentum,
            weight_decay,
        }
    }

    /// Applies one SGD-with-momentum step. Warm-up updates the head only;
    /// fine-tuning updates everything.
    pub fn step(&mut self, model: &mut Model, grads: &ModelGrads, lr: f64, stage: Stage) {
        if stage == Stage::Finetune {
            for ((bb, gb), vb) in model
                .backbones
                .iter_mut()
                .zip(&grads.backbones)
                .zip(&mut self.velocity.backbones)
            {
                for ((layer, glayer), vlayer) in [
                    (&mut bb.conv1, (&gb.conv1, &mut vb.conv1)),
                    (&mut bb.conv2, (&gb.conv2, &mut vb.conv2)),
                    (&mut bb.conv3, (&gb.conv3, &mut vb.conv3)),
                ]
                .map(|(a, (b, c))| ((a, b), c))
                {
                    sgd_momentum_step(
                        &mut layer.weight.data,
                        &glayer.weight.data,
                        &mut vlayer.weight.data,
                        lr,
                        self.momentum,
                        self.weight_decay,
                    );
                    sgd_momentum_step(
                        &mut layer.bias.data,
                        &glayer.bias.data,
                        &mut vlayer.bias.data,
                        lr,
                        self.momentum,
                        self.weight_decay,
                    );
                }
            }
        }
        sgd_momentum_step(
            &mut model.head.weight.data,
            &grads.head.weight.data,
            &mut self.velocity.head.weight.data,
            lr,
            self.momentum,
            self.weight_decay,
        );
        sgd_momentum_step(
            &mut model.head.bias.data,
            &grads.head.bias.data,
            &mut self.velocity.head.bias.data,
            lr,
            self.momentum,
            self.weight_decay,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub loss: f64,
    pub top1: f64,
}

/// Training-time augmentation: seeded random crop to the backbone input
/// size followed by a coin-flip horizontal mirror.
fn augment_train(
    image: &Image,
    input_size: usize,
    seed: u64,
    stage_id: u64,
    epoch: u64,
    sample: u64,
) -> Result<Image> {
    let mut r = rng::stream(seed, &[TAG_AUG, stage_id, epoch, sample]);
    let cropped = random_crop(image, input_size, &mut r)?;
    Ok(maybe_hflip(&cropped, &mut r))
}

/// Evaluation-time preparation: central crop to the backbone input size.
pub fn prepare_eval(image: &Image, input_size: usize) -> Result<Image> {
    let ratio = input_size as f64 / image.height() as f64;
    let c = center_crop(image, ratio)?;
    if c.height() != input_size {
        // Ratio rounding mismatch; crop exactly.
        return Err(Error::Net(NetError::ShapeMismatch(format!(
            "eval crop {} vs input size {input_size}",
            c.height()
        ))));
    }
    Ok(c)
}

/// One pass over the training split in seeded-shuffled mini-batches.
/// Returns the running loss/accuracy over the augmented samples.
pub fn train_epoch(
    model: &mut Model,
    opt: &mut OptimizerState,
    ds: &LoadedDataset,
    settings: &PipelineSettings,
    stage: Stage,
    base_lr: f64,
    epoch_in_stage: usize,
    batch_size: usize,
) -> Result<EpochStats> {
    let mut indices = ds.indices_for(TRAIN_SPLIT);
    if indices.is_empty() {
        return Err(NetError::EmptyDataset.into());
    }
    let stage_id = match stage {
        Stage::Warmup => 1,
        Stage::Finetune => 2,
    };
    let mut shuffle_rng = rng::stream(
        settings.seed,
        &[TAG_SHUFFLE, stage_id, epoch_in_stage as u64],
    );
    for i in (1..indices.len()).rev() {
        let j = rand::Rng::gen_range(&mut shuffle_rng, 0..=i);
        indices.swap(i, j);
    }

    let lr = lr_at(stage, base_lr, epoch_in_stage);
    let backbone_grads = stage == Stage::Finetune;
    let mut total_loss = 0.0;
    let mut correct = 0usize;

    for batch in indices.chunks(batch_size) {
        // Per-sample passes are independent; order of the collected results
        // is fixed by the batch order regardless of scheduling.
        let results: Vec<Result<(f64, bool, ModelGrads)>> = batch
            .par_iter()
            .map(|&idx| {
                let rec = &ds.manifest.records[idx];
                let img = augment_train(
                    &ds.images[idx],
                    settings.input_size,
                    settings.seed,
                    stage_id,
                    epoch_in_stage as u64,
                    idx as u64,
                )?;
                let fwd = sample_forward(model, settings, &img)?;
                let (loss, grads) =
                    sample_backward(model, settings, &fwd, rec.label, backbone_grads)?;
                Ok((loss, fwd.prediction() == rec.label, grads))
            })
            .collect();

        let mut acc = model.zero_grads();
        if !backbone_grads {
            acc.backbones.clear();
        }
        let scale = 1.0 / batch.len() as f64;
        for r in results {
            let (loss, ok, grads) = r?;
            total_loss += loss;
            correct += ok as usize;
            acc.add_scaled(&grads, scale);
        }
        if !backbone_grads {
            // Keep velocity shapes intact: pair head-only grads with a
            // head-only step.
            acc.backbones = Vec::new();
        }
        let step_grads = ModelGrads {
            backbones: if backbone_grads {
                std::mem::take(&mut acc.backbones)
            } else {
                model.backbones.iter().map(|b| b.zero_grads()).collect()
            },
            head: acc.head,
        };
        opt.step(model, &step_grads, lr, stage);
    }

    Ok(EpochStats {
        loss: total_loss / indices.len() as f64,
        top1: correct as f64 / indices.len() as f64,
    })
}

#[derive(Debug, Clone)]
pub struct EvalStats {
    pub loss: f64,
    pub top1: f64,
    /// confusion[label][prediction]
    pub confusion: Vec<Vec<usize>>,
}

/// Forward-only pass over a split with central cropping.
pub fn evaluate(
    model: &Model,
    ds: &LoadedDataset,
    settings: &PipelineSettings,
    split: &str,
) -> Result<EvalStats> {
    let indices = ds.indices_for(split);
    if indices.is_empty() {
        return Err(NetError::EmptyDataset.into());
    }
    let results: Vec<Result<(usize, usize, f64)>> = indices
        .par_iter()
        .map(|&idx| {
            let rec = &ds.manifest.records[idx];
            let img = prepare_eval(&ds.images[idx], settings.input_size)?;
            let fwd = sample_forward(model, settings, &img)?;
            let (loss, _) = cross_entropy(&fwd.probs, rec.label)?;
            Ok((rec.label, fwd.prediction(), loss))
        })
        .collect();

    let classes = settings.num_classes;
    let mut confusion = vec![vec![0usize; classes]; classes];
    let mut total_loss = 0.0;
    let mut correct = 0usize;
    for r in results {
        let (label, pred, loss) = r?;
        confusion[label][pred] += 1;
        total_loss += loss;
        correct += (label == pred) as usize;
    }
    Ok(EvalStats {
        loss: total_loss / indices.len() as f64,
        top1: correct as f64 / indices.len() as f64,
        confusion,
    })
}
