//! Losses, the two-stage training loops, and checkpointing.
//!
//! Stage 1 (`pretrain`) fits a single-decoder U-Net on partial labels with
//! plain cross-entropy. Stage 2 (`joint_train`) builds a MO-Net, optionally
//! loads stage-1 parameters into it, and minimizes the weighted sum
//! `lambda_s * L_s + lambda_w * L_w` of the full-task and partial-task
//! cross-entropies. Both loops are batch-size-1 patch loops and are bitwise
//! deterministic given (config, seed): every random draw comes from a
//! ChaCha stream keyed by the run seed, the stream name, and the step index.
//!
//! Images are expected to be z-score normalized at load time; the loops do
//! not renormalize patches.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint};

use crate::data::{elastic_deform, extract_partial, sample_patch, LabelMap, LabelVolume, Volume};
use crate::derive_seed;
use crate::engine::{
    finite_diff_check, AdamState, GradCheckEntry, Scalar, Tape, Tensor, TensorId,
};
use crate::error::{Error, Result};
use crate::models::{
    build_monet, build_unet, forward, transfer_params, ArchConfig, BoundParams, ForwardOutput,
    ModelParams, TransferManifest,
};
use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::time::Instant;

fn default_patch_size() -> usize {
    32
}
fn default_lr() -> f64 {
    0.001
}
fn default_lambda() -> f64 {
    0.5
}
fn default_pretrain_epochs() -> usize {
    3
}
fn default_joint_epochs() -> usize {
    200
}
fn default_true() -> bool {
    true
}
fn default_augment_magnitude() -> f64 {
    2.0
}

/// Every training hyperparameter; JSON keys mirror the field names.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_patch_size")]
    pub patch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_lambda")]
    pub lambda_s: f64,
    #[serde(default = "default_lambda")]
    pub lambda_w: f64,
    #[serde(default = "default_pretrain_epochs")]
    pub pretrain_epochs: usize,
    #[serde(default = "default_joint_epochs")]
    pub joint_epochs: usize,
    /// Patch draws per epoch; defaults to the dataset size.
    #[serde(default)]
    pub steps_per_epoch: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    /// Elastic augmentation toggle (applies to both stages).
    #[serde(default = "default_true")]
    pub augment: bool,
    /// Per-axis control-point displacement bound in voxels.
    #[serde(default = "default_augment_magnitude")]
    pub augment_magnitude: f64,
    #[serde(default)]
    pub arch: ArchConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").unwrap()
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if self.lambda_s < 0.0 || self.lambda_w < 0.0 {
            return Err(Error::Config(format!(
                "loss weights must be non-negative, got lambda_s={} lambda_w={}",
                self.lambda_s, self.lambda_w
            )));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr {} must be positive", self.lr)));
        }
        if self.patch_size == 0 || self.patch_size % self.arch.spatial_divisor() != 0 {
            return Err(Error::Config(format!(
                "patch_size {} must be a positive multiple of {}",
                self.patch_size,
                self.arch.spatial_divisor()
            )));
        }
        if self.augment_magnitude < 0.0 {
            return Err(Error::Config(format!(
                "augment_magnitude {} must be non-negative",
                self.augment_magnitude
            )));
        }
        if self.steps_per_epoch == Some(0) {
            return Err(Error::Config("steps_per_epoch must be positive".into()));
        }
        Ok(())
    }
}

/// One stage-1 subject: normalized image plus partial labels.
#[derive(Debug, Clone)]
pub struct PartialSubject {
    pub image: Volume,
    pub labels: LabelVolume,
}

/// One stage-2 subject: normalized image plus full labels; the partial
/// target is derived from the full labels via the dataset's label map.
#[derive(Debug, Clone)]
pub struct FullSubject {
    pub image: Volume,
    pub labels: LabelVolume,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogEntry {
    pub step: u64,
    pub stage: String,
    pub loss_total: f64,
    pub loss_w: f64,
    /// Absent in stage 1, which has no full-task head.
    pub loss_s: Option<f64>,
    pub wall_ms: f64,
}

/// Per-step training records; steps increase monotonically.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub entries: Vec<LogEntry>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,stage,loss_total,loss_w,loss_s,wall_ms\n");
        for e in &self.entries {
            let loss_s = e.loss_s.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                e.step, e.stage, e.loss_total, e.loss_w, loss_s, e.wall_ms
            ));
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Cross-entropy of the partial head: `CE(softmax(logits_w), target)`.
pub fn loss_partial<T: Scalar>(
    tape: &mut Tape<T>,
    logits_w: TensorId,
    target: &LabelVolume,
) -> Result<TensorId> {
    let prob = tape.softmax_channels(logits_w)?;
    tape.cross_entropy(prob, target)
}

/// Scalar ids for the joint loss and its two components.
pub struct JointLoss {
    pub total: TensorId,
    pub loss_w: TensorId,
    pub loss_s: TensorId,
}

/// Weighted two-task loss `lambda_s * L_s + lambda_w * L_w`, built on-tape
/// so its gradient flows to both decoders and the shared encoder.
pub fn loss_joint<T: Scalar>(
    tape: &mut Tape<T>,
    out: &ForwardOutput,
    target_s: &LabelVolume,
    target_w: &LabelVolume,
    lambda_s: T,
    lambda_w: T,
) -> Result<JointLoss> {
    let logits_s = out
        .logits_s
        .ok_or_else(|| Error::MissingHead("loss_joint requires the full-task head".into()))?;
    let prob_s = tape.softmax_channels(logits_s)?;
    let loss_s = tape.cross_entropy(prob_s, target_s)?;
    let loss_w = loss_partial(tape, out.logits_w, target_w)?;
    let ws = tape.scale(loss_s, lambda_s);
    let ww = tape.scale(loss_w, lambda_w);
    let total = tape.add(ws, ww)?;
    Ok(JointLoss {
        total,
        loss_w,
        loss_s,
    })
}

fn collect_grads<T: Scalar>(
    tape: &Tape<T>,
    bound: &BoundParams,
    params: &ModelParams<T>,
) -> Result<IndexMap<String, Vec<T>>> {
    bound
        .ids
        .iter()
        .map(|(name, &id)| {
            let g = match tape.grad(id) {
                Some(g) => g.to_vec(),
                None => vec![T::zero(); params.get(name)?.numel()],
            };
            Ok((name.clone(), g))
        })
        .collect()
}

fn patch_tensor(v: &Volume) -> Tensor<f32> {
    let [d, h, w] = v.dims;
    Tensor::new(vec![1, d, h, w], v.data.clone()).unwrap()
}

/// Draws one training patch: subject choice, random crop, and (optionally)
/// elastic deformation, all from a stream keyed by the step index.
fn draw_patch(
    images: &[&Volume],
    labels: &[Vec<&LabelVolume>],
    cfg: &TrainConfig,
    stream: &str,
    step: u64,
) -> Result<(Volume, Vec<LabelVolume>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, stream, step));
    let subject = rng.gen_range(0..images.len());
    let (patch, patch_labels, _) =
        sample_patch(images[subject], &labels[subject], cfg.patch_size, &mut rng)?;
    if cfg.augment && cfg.augment_magnitude > 0.0 {
        let refs: Vec<&LabelVolume> = patch_labels.iter().collect();
        elastic_deform(&patch, &refs, cfg.augment_magnitude, &mut rng)
    } else {
        Ok((patch, patch_labels))
    }
}

/// Stage 1: fits a fresh U-Net on partial labels. Returns the trained
/// parameters and the per-step log.
pub fn pretrain(dataset: &[PartialSubject], cfg: &TrainConfig) -> Result<(ModelParams<f32>, TrainLog)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    crate::engine::enable_flush_to_zero();
    let mut params = build_unet::<f32>(&cfg.arch, derive_seed(cfg.seed, "init-unet", 0))?;
    let mut adam = AdamState::new(cfg.lr as f32, params.tensors());
    let images: Vec<&Volume> = dataset.iter().map(|s| &s.image).collect();
    let labels: Vec<Vec<&LabelVolume>> = dataset.iter().map(|s| vec![&s.labels]).collect();
    let steps = cfg.steps_per_epoch.unwrap_or(dataset.len());
    let mut log = TrainLog::default();
    for step in 0..(cfg.pretrain_epochs * steps) as u64 {
        let t0 = Instant::now();
        let (patch, patch_labels) = draw_patch(&images, &labels, cfg, "pretrain-draw", step)?;
        let mut tape = Tape::new();
        let (out, bound) = forward(&params, &patch_tensor(&patch), &mut tape, true)?;
        let loss = loss_partial(&mut tape, out.logits_w, &patch_labels[0])?;
        let loss_val = tape.value(loss).item()? as f64;
        if !loss_val.is_finite() {
            return Err(Error::Divergence(step as usize));
        }
        tape.backward(loss)?;
        let grads = collect_grads(&tape, &bound, &params)?;
        adam.step(params.tensors_mut(), &grads)?;
        log.entries.push(LogEntry {
            step,
            stage: "pretrain".into(),
            loss_total: loss_val,
            loss_w: loss_val,
            loss_s: None,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok((params, log))
}

/// Stage 2: builds a MO-Net, optionally loads stage-1 parameters into it,
/// and jointly trains on full labels plus partial labels derived through
/// `map`. `init: None` is the from-scratch baseline.
pub fn joint_train(
    dataset: &[FullSubject],
    map: &LabelMap,
    init: Option<&ModelParams<f32>>,
    cfg: &TrainConfig,
) -> Result<(ModelParams<f32>, Option<TransferManifest>, TrainLog)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    crate::engine::enable_flush_to_zero();
    let mut params = build_monet::<f32>(&cfg.arch, derive_seed(cfg.seed, "init-monet", 0))?;
    let manifest = match init {
        Some(stage1) => Some(transfer_params(stage1, &mut params)?),
        None => None,
    };
    let mut adam = AdamState::new(cfg.lr as f32, params.tensors());
    let partials: Vec<LabelVolume> = dataset
        .iter()
        .map(|s| extract_partial(&s.labels, map))
        .collect();
    let images: Vec<&Volume> = dataset.iter().map(|s| &s.image).collect();
    // labels[i] = [full, partial]; both are cropped/warped identically
    let labels: Vec<Vec<&LabelVolume>> = dataset
        .iter()
        .zip(&partials)
        .map(|(s, p)| vec![&s.labels, p])
        .collect();
    let steps = cfg.steps_per_epoch.unwrap_or(dataset.len());
    let (ls, lw) = (cfg.lambda_s as f32, cfg.lambda_w as f32);
    let mut log = TrainLog::default();
    for step in 0..(cfg.joint_epochs * steps) as u64 {
        let t0 = Instant::now();
        let (patch, patch_labels) = draw_patch(&images, &labels, cfg, "joint-draw", step)?;
        let mut tape = Tape::new();
        let (out, bound) = forward(&params, &patch_tensor(&patch), &mut tape, true)?;
        let joint = loss_joint(&mut tape, &out, &patch_labels[0], &patch_labels[1], ls, lw)?;
        let loss_val = tape.value(joint.total).item()? as f64;
        if !loss_val.is_finite() {
            return Err(Error::Divergence(step as usize));
        }
        let (loss_w, loss_s) = (
            tape.value(joint.loss_w).item()? as f64,
            tape.value(joint.loss_s).item()? as f64,
        );
        tape.backward(joint.total)?;
        let grads = collect_grads(&tape, &bound, &params)?;
        adam.step(params.tensors_mut(), &grads)?;
        log.entries.push(LogEntry {
            step,
            stage: "joint".into(),
            loss_total: loss_val,
            loss_w,
            loss_s: Some(loss_s),
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok((params, manifest, log))
}

/// Finite-difference check of the full MO-Net joint loss in double
/// precision: every backward rule, the dual-decoder wiring, and the loss
/// composition in one shot.
pub fn monet_gradcheck(
    arch: &ArchConfig,
    size: usize,
    seed: u64,
    samples: usize,
) -> Result<GradCheckEntry> {
    let monet = build_monet::<f64>(arch, derive_seed(seed, "gradcheck-init", 0))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "gradcheck-data", 0));
    let n = size * size * size;
    let patch = Tensor::new(
        vec![1, size, size, size],
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )?;
    let target_s = LabelVolume::new(
        [size; 3],
        (0..n)
            .map(|_| rng.gen_range(0..arch.num_full_classes as u16))
            .collect(),
        arch.num_full_classes,
    )?;
    let target_w = LabelVolume::new(
        [size; 3],
        (0..n)
            .map(|_| rng.gen_range(0..arch.num_partial_classes as u16))
            .collect(),
        arch.num_partial_classes,
    )?;
    let arch = *arch;
    let f = move |tensors: &IndexMap<String, Tensor<f64>>,
                  want_grads: bool|
          -> Result<(f64, Option<IndexMap<String, Vec<f64>>>)> {
        let params = ModelParams::from_tensors(arch, tensors.clone())?;
        let mut tape = Tape::new();
        let (out, bound) = forward(&params, &patch, &mut tape, want_grads)?;
        let joint = loss_joint(&mut tape, &out, &target_s, &target_w, 0.5, 0.5)?;
        let loss = tape.value(joint.total).item()?;
        if !want_grads {
            return Ok((loss, None));
        }
        tape.backward(joint.total)?;
        Ok((loss, Some(collect_grads(&tape, &bound, &params)?)))
    };
    finite_diff_check("monet_joint_loss", monet.tensors(), &f, samples, seed)
}
