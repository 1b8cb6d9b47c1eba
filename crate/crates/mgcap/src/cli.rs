//! Command-line surface: run configuration, the binary checkpoint format,
//! metrics CSV bookkeeping, and the train / eval / gradcheck / synth /
//! inspect commands.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::canonical::{GranularitySpec, TransformSet};
use crate::data::{self, LoadedDataset, SyntheticSpec, TEST_SPLIT, TRAIN_SPLIT};
use crate::error::{Error, Result};
use crate::gradcheck::{self, Scope};
use crate::net::{lr_at, Stage};
use crate::pipeline::{
    evaluate, prepare_eval, sample_forward, train_epoch, EvalStats, Model, ModelGrads,
    OptimizerState, PipelineSettings,
};
use crate::sop::{MeanConvention, SopConfig};
use crate::spectral::NormalizationMode;

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

/// All pipeline knobs as `key = value` text. Defaults follow the reference
/// training recipe where one exists.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data_dir: String,
    pub transforms: usize,
    pub granularity_ratios: Vec<f64>,
    pub norm_mode: NormalizationMode,
    pub lambda: f64,
    pub eps_lo: f64,
    pub eps_hi: f64,
    pub channels: usize,
    pub batch_size: usize,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub lr_stage1: f64,
    pub lr_stage2: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub crop: f64,
    pub use_gaussian: bool,
    pub mean_convention: MeanConvention,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data_dir: String::new(),
            transforms: 12,
            granularity_ratios: vec![1.0, 0.75, 0.5],
            norm_mode: NormalizationMode::SqrtE,
            lambda: 1e-4,
            eps_lo: 1e-5,
            eps_hi: 1e5,
            channels: 32,
            batch_size: 12,
            epochs_stage1: 10,
            epochs_stage2: 10,
            lr_stage1: 0.1,
            lr_stage2: 1e-3,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 0,
            crop: 0.875,
            use_gaussian: true,
            mean_convention: MeanConvention::Mean,
        }
    }
}

impl RunConfig {
    pub fn apply_line(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::Config(format!("bad value for {what}: {value}"));
        match key {
            "data_dir" => self.data_dir = value.to_string(),
            "transforms" => self.transforms = value.parse().map_err(|_| bad(key))?,
            "granularity_ratios" => {
                let ratios: std::result::Result<Vec<f64>, _> =
                    value.split(',').map(|s| s.trim().parse()).collect();
                self.granularity_ratios = ratios.map_err(|_| bad(key))?;
            }
            "norm_mode" => {
                self.norm_mode = value.parse().map_err(|e: String| Error::Config(e))?
            }
            "lambda" => self.lambda = value.parse().map_err(|_| bad(key))?,
            "eps_lo" => self.eps_lo = value.parse().map_err(|_| bad(key))?,
            "eps_hi" => self.eps_hi = value.parse().map_err(|_| bad(key))?,
            "channels" => self.channels = value.parse().map_err(|_| bad(key))?,
            "batch_size" => self.batch_size = value.parse().map_err(|_| bad(key))?,
            "epochs_stage1" => self.epochs_stage1 = value.parse().map_err(|_| bad(key))?,
            "epochs_stage2" => self.epochs_stage2 = value.parse().map_err(|_| bad(key))?,
            "lr_stage1" => self.lr_stage1 = value.parse().map_err(|_| bad(key))?,
            "lr_stage2" => self.lr_stage2 = value.parse().map_err(|_| bad(key))?,
            "momentum" => self.momentum = value.parse().map_err(|_| bad(key))?,
            "weight_decay" => self.weight_decay = value.parse().map_err(|_| bad(key))?,
            "seed" => self.seed = value.parse().map_err(|_| bad(key))?,
            "crop" => self.crop = value.parse().map_err(|_| bad(key))?,
            "use_gaussian" => {
                self.use_gaussian = value.parse().map_err(|_| bad(key))?;
            }
            "mean_convention" => {
                self.mean_convention = match value {
                    "mean" => MeanConvention::Mean,
                    "sum" => MeanConvention::Sum,
                    _ => return Err(bad(key)),
                }
            }
            other => return Err(Error::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    /// Parses UTF-8 `key = value` lines with `#` comments.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", ln + 1)))?;
            cfg.apply_line(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Canonical serialization; equal configs produce equal bytes.
    pub fn to_text(&self) -> String {
        let ratios = self
            .granularity_ratios
            .iter()
            .map(|r| r.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let mut s = String::new();
        let _ = writeln!(s, "data_dir = {}", self.data_dir);
        let _ = writeln!(s, "transforms = {}", self.transforms);
        let _ = writeln!(s, "granularity_ratios = {ratios}");
        let _ = writeln!(s, "norm_mode = {}", self.norm_mode.name());
        let _ = writeln!(s, "lambda = {}", self.lambda);
        let _ = writeln!(s, "eps_lo = {}", self.eps_lo);
        let _ = writeln!(s, "eps_hi = {}", self.eps_hi);
        let _ = writeln!(s, "channels = {}", self.channels);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "epochs_stage1 = {}", self.epochs_stage1);
        let _ = writeln!(s, "epochs_stage2 = {}", self.epochs_stage2);
        let _ = writeln!(s, "lr_stage1 = {}", self.lr_stage1);
        let _ = writeln!(s, "lr_stage2 = {}", self.lr_stage2);
        let _ = writeln!(s, "momentum = {}", self.momentum);
        let _ = writeln!(s, "weight_decay = {}", self.weight_decay);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "crop = {}", self.crop);
        let _ = writeln!(s, "use_gaussian = {}", self.use_gaussian);
        let _ = writeln!(
            s,
            "mean_convention = {}",
            match self.mean_convention {
                MeanConvention::Mean => "mean",
                MeanConvention::Sum => "sum",
            }
        );
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.data_dir.is_empty() {
            return Err(Error::Config("data_dir is required".into()));
        }
        if self.transforms == 0 {
            return Err(Error::Config("transforms must be >= 1".into()));
        }
        GranularitySpec::new(self.granularity_ratios.clone())
            .map_err(|e| Error::Config(e.to_string()))?;
        if self.lambda < 0.0 {
            return Err(Error::Config("lambda must be >= 0".into()));
        }
        if !(self.eps_lo > 0.0 && self.eps_hi > self.eps_lo) {
            return Err(Error::Config("need 0 < eps_lo < eps_hi".into()));
        }
        if self.channels == 0 || self.batch_size == 0 {
            return Err(Error::Config("channels and batch_size must be >= 1".into()));
        }
        if !(self.crop > 0.0 && self.crop <= 1.0) {
            return Err(Error::Config("crop must be in (0, 1]".into()));
        }
        Ok(())
    }

    /// Resolves runtime settings against the dataset (image geometry).
    pub fn settings_for(&self, ds: &LoadedDataset) -> Result<PipelineSettings> {
        self.validate()?;
        let first = ds
            .images
            .first()
            .ok_or_else(|| Error::Config("dataset has no images".into()))?;
        let side = first.height();
        if first.width() != side {
            return Err(Error::Config("dataset images must be square".into()));
        }
        for img in &ds.images {
            if img.height() != side || img.width() != side || img.channels() != first.channels() {
                return Err(Error::Config(
                    "dataset images must share one size and channel count".into(),
                ));
            }
        }
        if side < 8 {
            return Err(Error::Config("images must be at least 8x8".into()));
        }
        let input_size = (side as f64 * self.crop).round() as usize;
        if input_size % 4 != 0 {
            return Err(Error::Config(format!(
                "crop {} of side {side} gives input {input_size}, not divisible by 4",
                self.crop
            )));
        }
        Ok(PipelineSettings {
            transforms: TransformSet::rotations(self.transforms)
                .map_err(|e| Error::Config(e.to_string()))?,
            granularities: GranularitySpec::new(self.granularity_ratios.clone())
                .map_err(|e| Error::Config(e.to_string()))?,
            mode: self.norm_mode,
            eps_lo: self.eps_lo,
            eps_hi: self.eps_hi,
            sop: SopConfig {
                lambda: self.lambda,
                use_gaussian: self.use_gaussian,
                mean_convention: self.mean_convention,
            },
            input_size,
            image_channels: first.channels(),
            feat_channels: self.channels,
            num_classes: ds.manifest.num_classes(),
            seed: self.seed,
        })
    }
}

// ---------------------------------------------------------------------------
// Checkpoint format
// ---------------------------------------------------------------------------

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"MGCAP1";
const DTYPE_F32: u8 = 0x01;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointRecord {
    pub name: String,
    pub dims: Vec<u32>,
    pub values: Vec<f32>,
}

/// Serializes records: magic, then per record name length (u32 LE), name
/// bytes, dtype tag, rank (u32), dims (u32 each), little-endian f32 payload;
/// a CRC32 of everything before it closes the file.
pub fn encode_checkpoint(records: &[CheckpointRecord]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    for r in records {
        out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
        out.extend_from_slice(r.name.as_bytes());
        out.push(DTYPE_F32);
        out.extend_from_slice(&(r.dims.len() as u32).to_le_bytes());
        for &d in &r.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for &v in &r.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<CheckpointRecord>> {
    let fail = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < CHECKPOINT_MAGIC.len() + 4 {
        return Err(fail("file too short"));
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(fail("CRC mismatch"));
    }
    if &body[..6] != CHECKPOINT_MAGIC {
        return Err(fail("bad magic"));
    }
    let mut pos = 6usize;
    let mut records = Vec::new();
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > body.len() {
            return Err(Error::Checkpoint("truncated record".into()));
        }
        let s = &body[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    while pos < body.len() {
        let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| fail("record name is not UTF-8"))?;
        let dtype = take(&mut pos, 1)?[0];
        if dtype != DTYPE_F32 {
            return Err(fail("unsupported dtype"));
        }
        let rank = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut dims = Vec::with_capacity(rank);
        let mut count = 1usize;
        for _ in 0..rank {
            let d = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
            count = count.saturating_mul(d as usize);
            dims.push(d);
        }
        let payload = take(&mut pos, count * 4)?;
        let values = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        records.push(CheckpointRecord { name, dims, values });
    }
    Ok(records)
}

/// Model parameters plus optimizer velocity as checkpoint records.
pub fn model_records(model: &Model, opt: &OptimizerState) -> Vec<CheckpointRecord> {
    let mut records = Vec::new();
    model.visit(|name, shape, data| {
        records.push(CheckpointRecord {
            name,
            dims: shape.iter().map(|&d| d as u32).collect(),
            values: data.iter().map(|&v| v as f32).collect(),
        });
    });
    let vel_model = Model {
        backbones: opt
            .velocity
            .backbones
            .iter()
            .map(|b| crate::net::Backbone {
                conv1: b.conv1.clone(),
                conv2: b.conv2.clone(),
                conv3: b.conv3.clone(),
            })
            .collect(),
        head: opt.velocity.head.clone(),
    };
    vel_model.visit(|name, shape, data| {
        records.push(CheckpointRecord {
            name: format!("v.{name}"),
            dims: shape.iter().map(|&d| d as u32).collect(),
            values: data.iter().map(|&v| v as f32).collect(),
        });
    });
    records
}

/// Restores model and velocity from records; every expected record must be
/// present with matching shape, and no extras are allowed.
pub fn apply_records(
    model: &mut Model,
    opt: &mut OptimizerState,
    records: &[CheckpointRecord],
) -> Result<()> {
    let mut by_name: std::collections::BTreeMap<&str, &CheckpointRecord> =
        records.iter().map(|r| (r.name.as_str(), r)).collect();
    if by_name.len() != records.len() {
        return Err(Error::Checkpoint("duplicate record names".into()));
    }
    let mut missing = Vec::new();
    let mut apply = |name: String, data: &mut Vec<f64>| {
        if let Some(r) = by_name.remove(name.as_str()) {
            if r.values.len() != data.len() {
                missing.push(format!("{name}: shape mismatch"));
            } else {
                for (d, &v) in data.iter_mut().zip(&r.values) {
                    *d = v as f64;
                }
            }
        } else {
            missing.push(format!("{name}: missing"));
        }
    };
    model.visit_mut(|name, data| apply(name, data));
    // Velocity buffers mirror the parameter tree under the v. prefix.
    let mut vel_model = Model {
        backbones: opt
            .velocity
            .backbones
            .iter()
            .map(|b| crate::net::Backbone {
                conv1: b.conv1.clone(),
                conv2: b.conv2.clone(),
                conv3: b.conv3.clone(),
            })
            .collect(),
        head: opt.velocity.head.clone(),
    };
    vel_model.visit_mut(|name, data| apply(format!("v.{name}"), data));
    opt.velocity = ModelGrads {
        backbones: vel_model
            .backbones
            .into_iter()
            .map(|b| crate::net::BackboneGrads {
                conv1: b.conv1,
                conv2: b.conv2,
                conv3: b.conv3,
            })
            .collect(),
        head: vel_model.head,
    };
    if !missing.is_empty() {
        return Err(Error::Checkpoint(format!(
            "parameter mismatch: {}",
            missing.join("; ")
        )));
    }
    if !by_name.is_empty() {
        let extras: Vec<&str> = by_name.keys().copied().collect();
        return Err(Error::Checkpoint(format!(
            "unexpected records: {}",
            extras.join(", ")
        )));
    }
    Ok(())
}

/// Atomic write: temp file in the same directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_checkpoint(path: &Path, model: &Model, opt: &OptimizerState) -> Result<()> {
    write_atomic(path, &encode_checkpoint(&model_records(model, opt)))
}

pub fn load_checkpoint(path: &Path, model: &mut Model, opt: &mut OptimizerState) -> Result<()> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    apply_records(model, opt, &decode_checkpoint(&bytes)?)
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub stage: usize,
    pub split: String,
    pub loss: f64,
    pub top1: f64,
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from("epoch,stage,split,loss,top1\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{:.6},{:.6}",
            r.epoch, r.stage, r.split, r.loss, r.top1
        );
    }
    s
}

pub fn parse_metrics(text: &str) -> Result<Vec<MetricsRow>> {
    let mut rows = Vec::new();
    let mut lines = text.lines();
    if lines.next() != Some("epoch,stage,split,loss,top1") {
        return Err(Error::Config("bad metrics header".into()));
    }
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let p: Vec<&str> = line.split(',').collect();
        if p.len() != 5 {
            return Err(Error::Config(format!("bad metrics row: {line}")));
        }
        rows.push(MetricsRow {
            epoch: p[0].parse().map_err(|_| Error::Config("epoch".into()))?,
            stage: p[1].parse().map_err(|_| Error::Config("stage".into()))?,
            split: p[2].to_string(),
            loss: p[3].parse().map_err(|_| Error::Config("loss".into()))?,
            top1: p[4].parse().map_err(|_| Error::Config("top1".into()))?,
        });
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

fn ckpt_name(stage: usize, epoch: usize) -> String {
    format!("ckpt_s{stage}e{epoch:03}.mgcap")
}

/// Largest (stage, epoch) checkpoint present in `out_dir`.
fn latest_checkpoint(out_dir: &Path) -> Option<(usize, usize, PathBuf)> {
    let mut best: Option<(usize, usize, PathBuf)> = None;
    let entries = std::fs::read_dir(out_dir).ok()?;
    for e in entries.flatten() {
        let name = e.file_name().to_string_lossy().to_string();
        if let Some(rest) = name.strip_prefix("ckpt_s").and_then(|s| s.strip_suffix(".mgcap")) {
            if let Some((s, ep)) = rest.split_once('e') {
                if let (Ok(stage), Ok(epoch)) = (s.parse::<usize>(), ep.parse::<usize>()) {
                    if best
                        .as_ref()
                        .map(|(bs, be, _)| (stage, epoch) > (*bs, *be))
                        .unwrap_or(true)
                    {
                        best = Some((stage, epoch, e.path()));
                    }
                }
            }
        }
    }
    best
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub final_train: EvalStats,
    pub final_test: EvalStats,
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
    pub total_epochs: usize,
}

/// Two-stage training: warm-up trains the classifier head, fine-tuning
/// updates everything. Writes a checkpoint per epoch, metrics CSV rows per
/// epoch, and clean final train/test evaluation rows; resumable from the
/// latest checkpoint in `out_dir`.
pub fn cmd_train(cfg: &RunConfig, out_dir: &Path) -> Result<TrainOutcome> {
    std::fs::create_dir_all(out_dir)?;
    let config_path = out_dir.join("config.txt");
    let text = cfg.to_text();
    if config_path.exists() {
        let existing = std::fs::read_to_string(&config_path)?;
        if existing != text {
            return Err(Error::Config(format!(
                "{} exists with a different configuration; refusing to mix runs",
                config_path.display()
            )));
        }
    } else {
        std::fs::write(&config_path, &text)?;
    }

    let ds = LoadedDataset::load(Path::new(&cfg.data_dir))?;
    let settings = cfg.settings_for(&ds)?;
    let mut model = Model::new(&settings);
    let mut opt = OptimizerState::new(&model, cfg.momentum, cfg.weight_decay);

    // Resume from the newest per-epoch checkpoint, if any.
    let metrics_path = out_dir.join("metrics.csv");
    let mut rows: Vec<MetricsRow> = Vec::new();
    let mut done = 0usize; // epochs completed across both stages
    if let Some((stage, epoch, path)) = latest_checkpoint(out_dir) {
        load_checkpoint(&path, &mut model, &mut opt)?;
        done = match stage {
            1 => epoch,
            _ => cfg.epochs_stage1 + epoch,
        };
        if metrics_path.exists() {
            rows = parse_metrics(&std::fs::read_to_string(&metrics_path)?)?;
            rows.retain(|r| r.epoch <= done);
        }
    }

    let total = cfg.epochs_stage1 + cfg.epochs_stage2;
    for global in done..total {
        let (stage, stage_id, epoch_in_stage, base_lr) = if global < cfg.epochs_stage1 {
            (Stage::Warmup, 1usize, global, cfg.lr_stage1)
        } else {
            (
                Stage::Finetune,
                2usize,
                global - cfg.epochs_stage1,
                cfg.lr_stage2,
            )
        };
        let stats = train_epoch(
            &mut model,
            &mut opt,
            &ds,
            &settings,
            stage,
            base_lr,
            epoch_in_stage,
            cfg.batch_size,
        )?;
        println!(
            "epoch {}/{total} stage {stage_id} lr {:.6} loss {:.4} top1 {:.4}",
            global + 1,
            lr_at(stage, base_lr, epoch_in_stage),
            stats.loss,
            stats.top1
        );
        rows.push(MetricsRow {
            epoch: global + 1,
            stage: stage_id,
            split: TRAIN_SPLIT.to_string(),
            loss: stats.loss,
            top1: stats.top1,
        });
        write_atomic(&metrics_path, metrics_csv(&rows).as_bytes())?;
        save_checkpoint(
            &out_dir.join(ckpt_name(stage_id, epoch_in_stage + 1)),
            &model,
            &opt,
        )?;
    }

    // Clean final evaluations with the finished weights.
    let final_train = evaluate(&model, &ds, &settings, TRAIN_SPLIT)?;
    let final_test = evaluate(&model, &ds, &settings, TEST_SPLIT)?;
    let last_stage = if cfg.epochs_stage2 > 0 { 2 } else { 1 };
    rows.push(MetricsRow {
        epoch: total,
        stage: last_stage,
        split: TRAIN_SPLIT.to_string(),
        loss: final_train.loss,
        top1: final_train.top1,
    });
    rows.push(MetricsRow {
        epoch: total,
        stage: last_stage,
        split: TEST_SPLIT.to_string(),
        loss: final_test.loss,
        top1: final_test.top1,
    });
    write_atomic(&metrics_path, metrics_csv(&rows).as_bytes())?;

    let checkpoint_path = out_dir.join("ckpt_final.mgcap");
    save_checkpoint(&checkpoint_path, &model, &opt)?;

    Ok(TrainOutcome {
        final_train,
        final_test,
        metrics_path,
        checkpoint_path,
        total_epochs: total,
    })
}

/// Loads a checkpoint next to its config and evaluates one split,
/// optionally writing the confusion matrix CSV.
pub fn cmd_eval(
    checkpoint: &Path,
    config: Option<&Path>,
    split: &str,
    confusion_out: Option<&Path>,
) -> Result<EvalStats> {
    let cfg_path = match config {
        Some(p) => p.to_path_buf(),
        None => checkpoint
            .parent()
            .map(|d| d.join("config.txt"))
            .ok_or_else(|| Error::Config("cannot infer config path".into()))?,
    };
    let cfg = RunConfig::load(&cfg_path)?;
    let ds = LoadedDataset::load(Path::new(&cfg.data_dir))?;
    let settings = cfg.settings_for(&ds)?;
    let mut model = Model::new(&settings);
    let mut opt = OptimizerState::new(&model, cfg.momentum, cfg.weight_decay);
    load_checkpoint(checkpoint, &mut model, &mut opt)?;

    let stats = evaluate(&model, &ds, &settings, split)?;
    if let Some(path) = confusion_out {
        let names = &ds.manifest.class_names;
        let mut s = String::from("label");
        for n in names {
            let _ = write!(s, ",pred_{n}");
        }
        s.push('\n');
        for (i, row) in stats.confusion.iter().enumerate() {
            let _ = write!(s, "{}", names[i]);
            for v in row {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        write_atomic(path, s.as_bytes())?;
    }
    Ok(stats)
}

/// Prints one verdict line per scope; `Ok(true)` means every scope passed.
pub fn cmd_gradcheck(
    scopes: &[Scope],
    trials: usize,
    seed: u64,
    degenerate: bool,
) -> Result<bool> {
    let mut all_ok = true;
    for &scope in scopes {
        if degenerate && matches!(scope, Scope::SpectralLog | Scope::SpectralSqrt) {
            let mode = if scope == Scope::SpectralLog {
                NormalizationMode::LogE
            } else {
                NormalizationMode::SqrtE
            };
            let r = gradcheck::run_degenerate(mode, seed)?;
            let ok = r.passed();
            all_ok &= ok;
            println!(
                "{} (degenerate): all_finite={} sqrt_2i_err={:.3e} {}",
                scope.name(),
                r.all_finite,
                r.sqrt_2i_err,
                if ok { "PASS" } else { "FAIL" }
            );
            continue;
        }
        let r = gradcheck::run_scope(scope, trials, seed)?;
        let ok = r.passed();
        all_ok &= ok;
        println!(
            "{}: trials={} max_rel_err={:.3e} threshold={:.0e} {}",
            scope.name(),
            r.trials,
            r.max_rel_err,
            r.threshold,
            if ok { "PASS" } else { "FAIL" }
        );
    }
    Ok(all_ok)
}

/// Generates the synthetic dataset and applies the stratified split.
pub fn cmd_synth(
    out: &Path,
    classes: usize,
    samples_per_class: usize,
    image_size: usize,
    noise_sigma: f64,
    seed: u64,
    train_ratio: f64,
) -> Result<PathBuf> {
    let spec = SyntheticSpec {
        num_classes: classes,
        samples_per_class,
        image_size,
        noise_sigma,
        master_seed: seed,
    };
    let manifest = data::generate_synthetic(&spec, out)?;
    let manifest = data::split(&manifest, train_ratio, seed)?;
    manifest.save(out)?;
    Ok(out.join("manifest.csv"))
}

#[derive(Debug)]
pub struct InspectOutput {
    pub probs: Vec<f64>,
    pub class_names: Vec<String>,
    pub canonical: Vec<(usize, f64)>,
    pub spectrum_before: Vec<f64>,
    pub spectrum_after: Vec<f64>,
}

/// Single-image forward pass: class probabilities, the canonical rotation
/// per granularity, and the descriptor spectrum before/after normalization.
pub fn cmd_inspect(checkpoint: &Path, image: &Path, config: Option<&Path>) -> Result<InspectOutput> {
    let cfg_path = match config {
        Some(p) => p.to_path_buf(),
        None => checkpoint
            .parent()
            .map(|d| d.join("config.txt"))
            .ok_or_else(|| Error::Config("cannot infer config path".into()))?,
    };
    let cfg = RunConfig::load(&cfg_path)?;
    let ds = LoadedDataset::load(Path::new(&cfg.data_dir))?;
    let settings = cfg.settings_for(&ds)?;
    let mut model = Model::new(&settings);
    let mut opt = OptimizerState::new(&model, cfg.momentum, cfg.weight_decay);
    load_checkpoint(checkpoint, &mut model, &mut opt)?;

    let img = data::load_ppm(image)?;
    let prepared = prepare_eval(&img, settings.input_size)?;
    let fwd = sample_forward(&model, &settings, &prepared)?;
    let report = fwd.report(&settings.transforms);

    let spectrum_before = fwd.spectral.eig.eigvals.clone();
    let spectrum_after: Vec<f64> = fwd
        .spectral
        .rect
        .values
        .iter()
        .map(|&r| settings.mode.g(r))
        .collect();

    Ok(InspectOutput {
        probs: fwd.probs,
        class_names: ds.manifest.class_names.clone(),
        canonical: report
            .per_granularity
            .iter()
            .map(|(i, a, _)| (*i, *a))
            .collect(),
        spectrum_before,
        spectrum_after,
    })
}
