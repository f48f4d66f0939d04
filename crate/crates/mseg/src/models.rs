//! Network construction and parameter transfer.
//!
//! Two architectures share one schema: the stage-1 U-Net (one encoder, one
//! decoder) and the stage-2 MO-Net (the same encoder, two structurally
//! identical decoders, one per task).
//!
//! # Parameter name grammar
//!
//! Canonical names are dot paths; this grammar is the contract the
//! checkpoint format and the transfer manifest rely on:
//!
//! ```text
//! name    := trunk "." layer "." leaf
//! trunk   := "encoder" | "decoder" | "decoder_w" | "decoder_s"
//! layer   := "level" INDEX ".conv" {0|1} | "bottleneck.conv" {0|1} | "final"
//! leaf    := "weight" | "bias"
//! ```
//!
//! `decoder` appears only in stage-1 models; `decoder_w` (partial task) and
//! `decoder_s` (full task) only in MO-Net. The bottleneck lives under
//! `encoder.` so stage-1 pre-training transfers it.

use crate::engine::{Scalar, Tape, Tensor, TensorId};
use crate::error::{Error, Result};
use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// LeakyReLU negative slope used throughout both networks.
pub const LEAKY_SLOPE: f64 = 0.01;

fn default_base_channels() -> usize {
    8
}
fn default_depth() -> usize {
    3
}
fn default_kernel() -> usize {
    3
}
fn default_partial_classes() -> usize {
    16
}
fn default_full_classes() -> usize {
    7
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    #[serde(default = "default_base_channels")]
    pub base_channels: usize,
    /// Number of pooling levels.
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default = "default_kernel")]
    pub kernel_size: usize,
    /// C_w: partial-task classes including background.
    #[serde(default = "default_partial_classes")]
    pub num_partial_classes: usize,
    /// C_s: full-task classes including background.
    #[serde(default = "default_full_classes")]
    pub num_full_classes: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            base_channels: default_base_channels(),
            depth: default_depth(),
            kernel_size: default_kernel(),
            num_partial_classes: default_partial_classes(),
            num_full_classes: default_full_classes(),
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(Error::Config("depth must be at least 1".into()));
        }
        if self.base_channels < 1 {
            return Err(Error::Config("base_channels must be at least 1".into()));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::Config(format!(
                "kernel_size {} must be odd",
                self.kernel_size
            )));
        }
        if self.num_partial_classes < 2 || self.num_full_classes < 2 {
            return Err(Error::Config(
                "class counts must be at least 2 (background + 1)".into(),
            ));
        }
        Ok(())
    }

    /// Patch extents must be divisible by this.
    pub fn spatial_divisor(&self) -> usize {
        1 << self.depth
    }

    fn channels_at(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    /// Stage 1: encoder + one decoder ending at C_w.
    Unet,
    /// Stage 2: shared encoder + decoder_w (C_w) + decoder_s (C_s).
    Monet,
}

/// Parameter shapes in canonical order, the single source of truth shared by
/// the builder, the forward pass, and checkpoint validation.
pub fn param_schema(arch: &ArchConfig, kind: ModelKind) -> Vec<(String, Vec<usize>)> {
    let k = arch.kernel_size;
    let mut out = Vec::new();
    let conv = |out_vec: &mut Vec<(String, Vec<usize>)>, prefix: &str, c_in, c_out| {
        out_vec.push((format!("{prefix}.weight"), vec![c_out, c_in, k, k, k]));
        out_vec.push((format!("{prefix}.bias"), vec![c_out]));
    };
    for i in 0..arch.depth {
        let c_in = if i == 0 { 1 } else { arch.channels_at(i - 1) };
        let c = arch.channels_at(i);
        conv(&mut out, &format!("encoder.level{i}.conv0"), c_in, c);
        conv(&mut out, &format!("encoder.level{i}.conv1"), c, c);
    }
    let cb = arch.channels_at(arch.depth);
    conv(
        &mut out,
        "encoder.bottleneck.conv0",
        arch.channels_at(arch.depth - 1),
        cb,
    );
    conv(&mut out, "encoder.bottleneck.conv1", cb, cb);

    let decoders: &[(&str, usize)] = match kind {
        ModelKind::Unet => &[("decoder", 0)],
        ModelKind::Monet => &[("decoder_w", 0), ("decoder_s", 1)],
    };
    for &(dec, which) in decoders {
        for i in (0..arch.depth).rev() {
            let c = arch.channels_at(i);
            let c_in = arch.channels_at(i + 1) + c; // upsampled + skip
            conv(&mut out, &format!("{dec}.level{i}.conv0"), c_in, c);
            conv(&mut out, &format!("{dec}.level{i}.conv1"), c, c);
        }
        let classes = if which == 1 {
            arch.num_full_classes
        } else {
            arch.num_partial_classes
        };
        out.push((
            format!("{dec}.final.weight"),
            vec![classes, arch.base_channels, 1, 1, 1],
        ));
        out.push((format!("{dec}.final.bias"), vec![classes]));
    }
    out
}

/// Named parameter tensors of one model instance.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T: Scalar> {
    pub arch: ArchConfig,
    pub kind: ModelKind,
    tensors: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))
    }

    pub fn tensors(&self) -> &IndexMap<String, Tensor<T>> {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut IndexMap<String, Tensor<T>> {
        &mut self.tensors
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|s| s.as_str())
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            arch: self.arch,
            kind: self.kind,
            tensors: self
                .tensors
                .iter()
                .map(|(n, t)| (n.clone(), t.cast()))
                .collect(),
        }
    }

    /// Rebuilds a ModelParams from externally loaded tensors, verifying the
    /// name set and shapes against the schema. Kind is inferred from the
    /// decoder prefixes present.
    pub fn from_tensors(arch: ArchConfig, tensors: IndexMap<String, Tensor<T>>) -> Result<Self> {
        arch.validate()?;
        let kind = if tensors.keys().any(|n| n.starts_with("decoder.")) {
            ModelKind::Unet
        } else {
            ModelKind::Monet
        };
        let schema = param_schema(&arch, kind);
        if schema.len() != tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                schema.len(),
                tensors.len()
            )));
        }
        for (name, shape) in &schema {
            let t = tensors.get(name).ok_or_else(|| {
                Error::Checkpoint(format!("missing parameter {name}"))
            })?;
            if t.shape() != &shape[..] {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    shape
                )));
            }
        }
        // canonical order regardless of file order
        let tensors = schema
            .iter()
            .map(|(n, _)| {
                let t = tensors.get(n).unwrap().clone();
                (n.clone(), t)
            })
            .collect();
        Ok(ModelParams { arch, kind, tensors })
    }
}

fn build<T: Scalar>(arch: &ArchConfig, seed: u64, kind: ModelKind) -> Result<ModelParams<T>> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = IndexMap::new();
    for (name, shape) in param_schema(arch, kind) {
        let t = if name.ends_with(".bias") {
            Tensor::zeros(shape)
        } else {
            // He init scaled for LeakyReLU
            let fan_in: usize = shape[1..].iter().product();
            let gain = 2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE);
            let std = (gain / fan_in as f64).sqrt();
            let dist = Normal::new(0.0, std).unwrap();
            let n: usize = shape.iter().product();
            let data = (0..n)
                .map(|_| T::from_f64(dist.sample(&mut rng)))
                .collect();
            Tensor::new(shape, data)?
        };
        tensors.insert(name, t);
    }
    Ok(ModelParams {
        arch: *arch,
        kind,
        tensors,
    })
}

/// Stage-1 network: encoder, bottleneck, one decoder to C_w logits.
pub fn build_unet<T: Scalar>(arch: &ArchConfig, seed: u64) -> Result<ModelParams<T>> {
    build(arch, seed, ModelKind::Unet)
}

/// Stage-2 network: the same encoder with two decoders, `decoder_w` ending
/// at C_w channels and `decoder_s` at C_s.
pub fn build_monet<T: Scalar>(arch: &ArchConfig, seed: u64) -> Result<ModelParams<T>> {
    build(arch, seed, ModelKind::Monet)
}

/// Tape ids of the logits heads plus the bound parameter leaves (for
/// gradient lookup after backward).
pub struct ForwardOutput {
    pub logits_w: TensorId,
    pub logits_s: Option<TensorId>,
}

pub struct BoundParams {
    pub ids: IndexMap<String, TensorId>,
}

/// Runs the network on a `[1, D, H, W]` patch. With `trainable` set the
/// parameters are recorded as gradient-carrying leaves; inference passes
/// skip gradient bookkeeping entirely.
pub fn forward<T: Scalar>(
    params: &ModelParams<T>,
    patch: &Tensor<T>,
    tape: &mut Tape<T>,
    trainable: bool,
) -> Result<(ForwardOutput, BoundParams)> {
    let (c_in, dims) = patch.chw()?;
    if c_in != 1 {
        return Err(Error::ShapeMismatch(format!(
            "patch must have one channel, got {c_in}"
        )));
    }
    let div = params.arch.spatial_divisor();
    if dims.iter().any(|&e| e % div != 0) {
        return Err(Error::ShapeMismatch(format!(
            "patch extents {dims:?} must be divisible by {div}"
        )));
    }
    let mut ids = IndexMap::new();
    for (name, t) in params.tensors() {
        ids.insert(name.clone(), tape.leaf(t.clone(), trainable));
    }
    let slope = T::from_f64(LEAKY_SLOPE);
    let conv_block = |tape: &mut Tape<T>, x: TensorId, prefix: &str, ids: &IndexMap<String, TensorId>| -> Result<TensorId> {
        let y = tape.conv3d(
            x,
            ids[&format!("{prefix}.weight")],
            ids[&format!("{prefix}.bias")],
        )?;
        Ok(tape.leaky_relu(y, slope))
    };

    let input = tape.leaf(patch.clone(), false);
    let mut x = input;
    let mut skips = Vec::with_capacity(params.arch.depth);
    for i in 0..params.arch.depth {
        x = conv_block(tape, x, &format!("encoder.level{i}.conv0"), &ids)?;
        x = conv_block(tape, x, &format!("encoder.level{i}.conv1"), &ids)?;
        skips.push(x);
        x = tape.max_pool3d(x)?;
    }
    x = conv_block(tape, x, "encoder.bottleneck.conv0", &ids)?;
    let encoded = conv_block(tape, x, "encoder.bottleneck.conv1", &ids)?;

    let decode = |tape: &mut Tape<T>, dec: &str| -> Result<TensorId> {
        let mut y = encoded;
        for i in (0..params.arch.depth).rev() {
            y = tape.upsample_nearest(y)?;
            y = tape.concat_channels(y, skips[i])?;
            y = conv_block(tape, y, &format!("{dec}.level{i}.conv0"), &ids)?;
            y = conv_block(tape, y, &format!("{dec}.level{i}.conv1"), &ids)?;
        }
        tape.conv3d(
            y,
            ids[&format!("{dec}.final.weight")],
            ids[&format!("{dec}.final.bias")],
        )
    };

    let out = match params.kind {
        ModelKind::Unet => ForwardOutput {
            logits_w: decode(tape, "decoder")?,
            logits_s: None,
        },
        ModelKind::Monet => ForwardOutput {
            logits_w: decode(tape, "decoder_w")?,
            logits_s: Some(decode(tape, "decoder_s")?),
        },
    };
    Ok((out, BoundParams { ids }))
}

/// Which tensors `transfer_params` copied and which it had to leave at
/// their fresh initialization.
#[derive(Debug, Clone, Serialize)]
pub struct TransferManifest {
    pub copied: Vec<String>,
    pub skipped: Vec<String>,
}

/// Loads stage-1 parameters into a MO-Net: the encoder verbatim, the stage-1
/// decoder into both `decoder_w` and `decoder_s`. The `decoder_s` final
/// classifier keeps its fresh initialization when C_s != C_w, since its
/// shape cannot accept the stage-1 layer; the manifest makes that auditable.
pub fn transfer_params<T: Scalar>(
    stage1: &ModelParams<T>,
    monet: &mut ModelParams<T>,
) -> Result<TransferManifest> {
    if stage1.kind != ModelKind::Unet || monet.kind != ModelKind::Monet {
        return Err(Error::Checkpoint(
            "transfer requires a stage-1 U-Net source and a MO-Net target".into(),
        ));
    }
    let (a, b) = (&stage1.arch, &monet.arch);
    if a.base_channels != b.base_channels
        || a.depth != b.depth
        || a.kernel_size != b.kernel_size
        || a.num_partial_classes != b.num_partial_classes
    {
        return Err(Error::Checkpoint(format!(
            "incompatible trunks: stage-1 {a:?} vs MO-Net {b:?}"
        )));
    }
    let mut manifest = TransferManifest {
        copied: Vec::new(),
        skipped: Vec::new(),
    };
    let copy_into = |name: String, src: &Tensor<T>, monet: &mut ModelParams<T>| -> Result<bool> {
        let dst = monet.get_mut(&name)?;
        if dst.shape() != src.shape() {
            return Ok(false);
        }
        *dst = src.clone();
        Ok(true)
    };
    for (name, src) in stage1.tensors() {
        if let Some(rest) = name.strip_prefix("decoder.") {
            for dec in ["decoder_w", "decoder_s"] {
                let target = format!("{dec}.{rest}");
                if copy_into(target.clone(), src, monet)? {
                    manifest.copied.push(target);
                } else {
                    manifest.skipped.push(target);
                }
            }
        } else if name.starts_with("encoder.") {
            if copy_into(name.clone(), src, monet)? {
                manifest.copied.push(name.clone());
            } else {
                return Err(Error::Checkpoint(format!(
                    "encoder tensor {name} has a mismatched shape"
                )));
            }
        } else {
            return Err(Error::Checkpoint(format!("unknown parameter {name}")));
        }
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_arch() -> ArchConfig {
        ArchConfig {
            base_channels: 2,
            depth: 1,
            kernel_size: 3,
            num_partial_classes: 2,
            num_full_classes: 4,
            ..Default::default()
        }
    }

    /// Closed-form parameter tally for the smallest config (depth 1,
    /// base 2, C_w = 2), derived by hand from the layer list:
    ///   enc  conv0 1->2:  2*1*27 + 2 =  56
    ///   enc  conv1 2->2:  2*2*27 + 2 = 110
    ///   bott conv0 2->4:  4*2*27 + 4 = 220
    ///   bott conv1 4->4:  4*4*27 + 4 = 436
    ///   dec  conv0 6->2:  2*6*27 + 2 = 326
    ///   dec  conv1 2->2:  2*2*27 + 2 = 110
    ///   final     2->2:   2*2*1  + 2 =   6
    #[test]
    fn unet_parameter_count_matches_hand_tally() {
        let p = build_unet::<f32>(&small_arch(), 0).unwrap();
        assert_eq!(p.num_scalars(), 56 + 110 + 220 + 436 + 326 + 110 + 6);
    }

    #[test]
    fn monet_count_is_unet_plus_resized_second_decoder() {
        let arch = small_arch();
        let unet = build_unet::<f32>(&arch, 0).unwrap();
        let monet = build_monet::<f32>(&arch, 0).unwrap();
        // second decoder repeats the first except the final layer, which has
        // C_s = 4 outputs instead of C_w = 2
        let decoder_trunk = 326 + 110;
        let final_s = 4 * 2 * 1 + 4;
        assert_eq!(
            monet.num_scalars(),
            unet.num_scalars() + decoder_trunk + final_s
        );
    }

    #[test]
    fn builds_are_pure_functions_of_config_and_seed() {
        let arch = small_arch();
        let a = build_unet::<f32>(&arch, 7).unwrap();
        let b = build_unet::<f32>(&arch, 7).unwrap();
        assert_eq!(a, b);
        let c = build_unet::<f32>(&arch, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn monet_names_mirror_unet_names() {
        let arch = small_arch();
        let unet = build_unet::<f32>(&arch, 0).unwrap();
        let monet = build_monet::<f32>(&arch, 0).unwrap();
        let expected: std::collections::BTreeSet<String> = unet
            .names()
            .flat_map(|n| {
                if let Some(rest) = n.strip_prefix("decoder.") {
                    vec![format!("decoder_w.{rest}"), format!("decoder_s.{rest}")]
                } else {
                    vec![n.to_string()]
                }
            })
            .collect();
        let actual: std::collections::BTreeSet<String> =
            monet.names().map(|s| s.to_string()).collect();
        assert_eq!(expected, actual);
    }

    #[test]
    fn forward_shapes_and_zeroed_final_layer_give_uniform_softmax() {
        let arch = small_arch();
        let mut monet = build_monet::<f32>(&arch, 3).unwrap();
        for dec in ["decoder_w", "decoder_s"] {
            let w = monet.get_mut(&format!("{dec}.final.weight")).unwrap();
            w.data_mut().fill(0.0);
        }
        let mut tape = Tape::new();
        let patch = Tensor::zeros(vec![1, 8, 8, 8]);
        let (out, _) = forward(&monet, &patch, &mut tape, false).unwrap();
        assert_eq!(tape.value(out.logits_w).shape(), &[2, 8, 8, 8]);
        let ls = out.logits_s.unwrap();
        assert_eq!(tape.value(ls).shape(), &[4, 8, 8, 8]);
        let pw = tape.softmax_channels(out.logits_w).unwrap();
        assert!(tape.value(pw).data().iter().all(|&p| (p - 0.5).abs() < 1e-6));
        let ps = tape.softmax_channels(ls).unwrap();
        assert!(tape.value(ps).data().iter().all(|&p| (p - 0.25).abs() < 1e-6));
    }

    #[test]
    fn forward_rejects_indivisible_extents() {
        let arch = ArchConfig {
            depth: 2,
            ..small_arch()
        };
        let unet = build_unet::<f32>(&arch, 0).unwrap();
        let mut tape = Tape::new();
        let patch = Tensor::zeros(vec![1, 6, 8, 8]);
        assert!(forward(&unet, &patch, &mut tape, false).is_err());
    }

    #[test]
    fn decoder_s_perturbation_leaves_logits_w_unchanged() {
        let arch = small_arch();
        let monet = build_monet::<f32>(&arch, 5).unwrap();
        let patch = Tensor::new(
            vec![1, 8, 8, 8],
            (0..512).map(|i| (i as f32 * 0.37).sin()).collect(),
        )
        .unwrap();
        let mut tape = Tape::new();
        let (out, _) = forward(&monet, &patch, &mut tape, false).unwrap();
        let base_w = tape.value(out.logits_w).data().to_vec();

        let mut bumped = monet.clone();
        for name in bumped.names().map(|s| s.to_string()).collect::<Vec<_>>() {
            if name.starts_with("decoder_s.") {
                for v in bumped.get_mut(&name).unwrap().data_mut() {
                    *v += 0.25;
                }
            }
        }
        let mut tape = Tape::new();
        let (out2, _) = forward(&bumped, &patch, &mut tape, false).unwrap();
        assert_eq!(base_w, tape.value(out2.logits_w).data());
    }

    #[test]
    fn transfer_copies_encoder_and_decoder_w_exactly() {
        let arch = small_arch();
        let unet = build_unet::<f32>(&arch, 1).unwrap();
        let mut monet = build_monet::<f32>(&arch, 2).unwrap();
        let manifest = transfer_params(&unet, &mut monet).unwrap();
        // C_s != C_w: exactly the decoder_s final weight+bias are skipped
        assert_eq!(
            manifest.skipped,
            vec!["decoder_s.final.weight", "decoder_s.final.bias"]
        );
        for (name, t) in unet.tensors() {
            if name.starts_with("encoder.") {
                assert_eq!(monet.get(name).unwrap(), t, "{name}");
            } else if let Some(rest) = name.strip_prefix("decoder.") {
                assert_eq!(monet.get(&format!("decoder_w.{rest}")).unwrap(), t);
            }
        }
    }

    #[test]
    fn transfer_with_equal_class_counts_skips_nothing() {
        let arch = ArchConfig {
            num_full_classes: 2,
            ..small_arch()
        };
        let unet = build_unet::<f32>(&arch, 1).unwrap();
        let mut monet = build_monet::<f32>(&arch, 2).unwrap();
        let manifest = transfer_params(&unet, &mut monet).unwrap();
        assert!(manifest.skipped.is_empty());
    }

    #[test]
    fn transfer_rejects_mismatched_trunks() {
        let unet = build_unet::<f32>(&small_arch(), 1).unwrap();
        let other = ArchConfig {
            base_channels: 4,
            ..small_arch()
        };
        let mut monet = build_monet::<f32>(&other, 2).unwrap();
        assert!(transfer_params(&unet, &mut monet).is_err());
    }

    #[test]
    fn transfer_then_forward_reproduces_stage1_logits_bit_exactly() {
        let arch = small_arch();
        let unet = build_unet::<f32>(&arch, 11).unwrap();
        let mut monet = build_monet::<f32>(&arch, 12).unwrap();
        transfer_params(&unet, &mut monet).unwrap();
        let patch = Tensor::new(
            vec![1, 8, 8, 8],
            (0..512).map(|i| ((i * 37 % 512) as f32 / 256.0) - 1.0).collect(),
        )
        .unwrap();
        let mut t1 = Tape::new();
        let (o1, _) = forward(&unet, &patch, &mut t1, false).unwrap();
        let mut t2 = Tape::new();
        let (o2, _) = forward(&monet, &patch, &mut t2, false).unwrap();
        assert_eq!(t1.value(o1.logits_w).data(), t2.value(o2.logits_w).data());
    }

    #[test]
    fn from_tensors_round_trip_and_shape_audit() {
        let arch = small_arch();
        let monet = build_monet::<f32>(&arch, 3).unwrap();
        let rebuilt = ModelParams::from_tensors(arch, monet.tensors().clone()).unwrap();
        assert_eq!(monet, rebuilt);

        let mut tensors = monet.tensors().clone();
        let first = tensors.keys().next().unwrap().clone();
        tensors.insert(first.clone(), Tensor::zeros(vec![1]));
        let err = ModelParams::from_tensors(arch, tensors).unwrap_err();
        assert!(err.to_string().contains(&first));
    }
}
