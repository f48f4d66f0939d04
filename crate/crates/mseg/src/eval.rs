//! Tiled whole-volume inference and Dice reporting.
//!
//! Volumes larger than one patch are covered by windows at stride
//! patch/2 plus a border-flush window per axis; overlapping windows
//! average softmax probabilities (not labels) before the final argmax.

use crate::engine::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::models::{forward, ModelKind, ModelParams};
use crate::data::{LabelVolume, Volume};
use serde::Serialize;

/// Which decoder to read out of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    /// Partial task (stage-1 decoder or MO-Net `decoder_w`).
    W,
    /// Full task (MO-Net `decoder_s` only).
    S,
}

/// Window start offsets covering `extent` with `patch`-long windows at
/// stride `patch/2`, with a final window flush to the far border.
fn window_starts(extent: usize, patch: usize) -> Vec<usize> {
    let stride = (patch / 2).max(1);
    let mut starts = Vec::new();
    let mut s = 0;
    while s + patch <= extent {
        starts.push(s);
        s += stride;
    }
    let last = extent - patch;
    if *starts.last().unwrap() != last {
        starts.push(last);
    }
    starts
}

/// Sliding-window segmentation of a whole (pre-normalized) volume.
/// Per-voxel probabilities from overlapping windows are accumulated along
/// with hit counts, normalized, and argmaxed; ties go to the lowest id.
pub fn tile_infer(
    params: &ModelParams<f32>,
    volume: &Volume,
    patch_size: usize,
    head: Head,
) -> Result<LabelVolume> {
    if head == Head::S && params.kind == ModelKind::Unet {
        return Err(Error::MissingHead(
            "stage-1 checkpoint has no full-task decoder".into(),
        ));
    }
    for &extent in &volume.dims {
        if patch_size > extent {
            return Err(Error::PatchTooLarge {
                size: patch_size,
                extent,
            });
        }
    }
    if patch_size % params.arch.spatial_divisor() != 0 {
        return Err(Error::Config(format!(
            "patch size {} must be a multiple of {}",
            patch_size,
            params.arch.spatial_divisor()
        )));
    }
    crate::engine::enable_flush_to_zero();
    let classes = match head {
        Head::W => params.arch.num_partial_classes,
        Head::S => params.arch.num_full_classes,
    };
    let [dd, hh, ww] = volume.dims;
    let n = dd * hh * ww;
    let mut prob_acc = vec![0f64; classes * n];
    let mut hits = vec![0u32; n];

    for &d0 in &window_starts(dd, patch_size) {
        for &h0 in &window_starts(hh, patch_size) {
            for &w0 in &window_starts(ww, patch_size) {
                let mut patch = Vec::with_capacity(patch_size.pow(3));
                for d in 0..patch_size {
                    for h in 0..patch_size {
                        let row = ((d0 + d) * hh + h0 + h) * ww + w0;
                        patch.extend_from_slice(&volume.data[row..row + patch_size]);
                    }
                }
                let patch = Tensor::new(vec![1, patch_size, patch_size, patch_size], patch)?;
                let mut tape = Tape::new();
                let (out, _) = forward(params, &patch, &mut tape, false)?;
                let logits = match head {
                    Head::W => out.logits_w,
                    Head::S => out.logits_s.expect("checked above"),
                };
                let prob = tape.softmax_channels(logits)?;
                let prob = tape.value(prob).data();
                let pn = patch_size.pow(3);
                for c in 0..classes {
                    for d in 0..patch_size {
                        for h in 0..patch_size {
                            let src = (c * pn) + (d * patch_size + h) * patch_size;
                            let dst = c * n + ((d0 + d) * hh + h0 + h) * ww + w0;
                            for w in 0..patch_size {
                                prob_acc[dst + w] += prob[src + w] as f64;
                            }
                        }
                    }
                }
                for d in 0..patch_size {
                    for h in 0..patch_size {
                        let dst = ((d0 + d) * hh + h0 + h) * ww + w0;
                        for hit in &mut hits[dst..dst + patch_size] {
                            *hit += 1;
                        }
                    }
                }
            }
        }
    }

    let mut data = Vec::with_capacity(n);
    for v in 0..n {
        let inv = 1.0 / hits[v] as f64;
        let mut best = 0u16;
        let mut best_p = prob_acc[v] * inv;
        for c in 1..classes {
            let p = prob_acc[c * n + v] * inv;
            // strict: ties resolve to the lowest class id
            if p > best_p {
                best_p = p;
                best = c as u16;
            }
        }
        data.push(best);
    }
    LabelVolume::new(volume.dims, data, classes)
}

/// Dice overlap `2|A and B| / (|A| + |B|)` of one structure id; 1.0 when the
/// structure is absent from both volumes, 0.0 when absent from exactly one.
pub fn dice(pred: &LabelVolume, truth: &LabelVolume, structure_id: u16) -> Result<f64> {
    if pred.dims != truth.dims {
        return Err(Error::ShapeMismatch(format!(
            "dice: pred dims {:?} vs truth dims {:?}",
            pred.dims, truth.dims
        )));
    }
    let mut a = 0u64;
    let mut b = 0u64;
    let mut both = 0u64;
    for (&p, &t) in pred.data.iter().zip(&truth.data) {
        let in_a = p == structure_id;
        let in_b = t == structure_id;
        a += in_a as u64;
        b += in_b as u64;
        both += (in_a && in_b) as u64;
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (a + b) as f64)
}

/// One (subject, structure) Dice measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct DiceRow {
    pub subject: String,
    pub structure: u16,
    pub dice: f64,
}

/// JSON summary block of a [`DiceReport`].
#[derive(Debug, Clone, Serialize)]
pub struct DiceSummary {
    pub task: String,
    pub mean: f64,
    pub std: f64,
    pub n_subjects: usize,
}

/// Per-measurement rows plus per-subject means and the cohort mean +- std.
#[derive(Debug, Clone)]
pub struct DiceReport {
    pub task: String,
    pub rows: Vec<DiceRow>,
    /// subject -> mean Dice over its non-background structures
    pub subject_means: Vec<(String, f64)>,
    pub mean: f64,
    /// population standard deviation over subjects
    pub std: f64,
}

impl DiceReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("subject,structure,dice\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{}\n", r.subject, r.structure, r.dice));
        }
        out
    }

    pub fn summary(&self) -> DiceSummary {
        DiceSummary {
            task: self.task.clone(),
            mean: self.mean,
            std: self.std,
            n_subjects: self.subject_means.len(),
        }
    }

    pub fn summary_json(&self) -> String {
        serde_json::to_string_pretty(&self.summary()).unwrap()
    }
}

/// Aggregates per-case Dice rows: per-subject mean over structures
/// (background excluded), then cohort mean and population std over
/// subjects. Subject order follows first appearance in `rows`.
pub fn aggregate(task: &str, rows: Vec<DiceRow>) -> Result<DiceReport> {
    let mut order: Vec<String> = Vec::new();
    let mut sums: std::collections::HashMap<String, (f64, usize)> = Default::default();
    for r in &rows {
        if !(0.0..=1.0).contains(&r.dice) {
            return Err(Error::Config(format!(
                "dice value {} for subject {} out of [0, 1]",
                r.dice, r.subject
            )));
        }
        if r.structure == 0 {
            continue;
        }
        if !sums.contains_key(&r.subject) {
            order.push(r.subject.clone());
        }
        let e = sums.entry(r.subject.clone()).or_insert((0.0, 0));
        e.0 += r.dice;
        e.1 += 1;
    }
    if order.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let subject_means: Vec<(String, f64)> = order
        .into_iter()
        .map(|s| {
            let (sum, n) = sums[&s];
            (s, sum / n as f64)
        })
        .collect();
    let n = subject_means.len() as f64;
    let mean = subject_means.iter().map(|(_, m)| m).sum::<f64>() / n;
    let var = subject_means
        .iter()
        .map(|(_, m)| (m - mean).powi(2))
        .sum::<f64>()
        / n;
    Ok(DiceReport {
        task: task.to_string(),
        rows,
        subject_means,
        mean,
        std: var.sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_monet, build_unet, ArchConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn arch() -> ArchConfig {
        ArchConfig {
            base_channels: 2,
            depth: 1,
            kernel_size: 3,
            num_partial_classes: 3,
            num_full_classes: 4,
        }
    }

    #[test]
    fn window_starts_cover_and_flush() {
        assert_eq!(window_starts(8, 8), vec![0]);
        assert_eq!(window_starts(16, 8), vec![0, 4, 8]);
        // non-multiple extent gets a border-flush window
        assert_eq!(window_starts(13, 8), vec![0, 4, 5]);
        for (extent, patch) in [(8, 8), (16, 8), (13, 8), (21, 8), (9, 8)] {
            let s = window_starts(extent, patch);
            assert_eq!(*s.last().unwrap(), extent - patch);
            let mut covered = vec![false; extent];
            for &st in &s {
                covered[st..st + patch].iter_mut().for_each(|c| *c = true);
            }
            assert!(covered.iter().all(|&c| c));
        }
    }

    #[test]
    fn single_tile_equals_forward_argmax() {
        let params = build_monet::<f32>(&arch(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let v = Volume::new(
            [8; 3],
            [1.0; 3],
            (0..512).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let seg = tile_infer(&params, &v, 8, Head::S).unwrap();

        let patch = Tensor::new(vec![1, 8, 8, 8], v.data.clone()).unwrap();
        let mut tape = Tape::new();
        let (out, _) = forward(&params, &patch, &mut tape, false).unwrap();
        let logits = tape.value(out.logits_s.unwrap());
        let n = 512;
        for v_idx in 0..n {
            let mut best = 0u16;
            let mut best_l = logits.data()[v_idx];
            for c in 1..4 {
                let l = logits.data()[c * n + v_idx];
                if l > best_l {
                    best_l = l;
                    best = c as u16;
                }
            }
            assert_eq!(seg.data[v_idx], best);
        }
    }

    #[test]
    fn overlapping_windows_accumulate_unit_probability() {
        // re-run the accumulation by hand and audit the normalized sums
        let params = build_unet::<f32>(&arch(), 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let v = Volume::new(
            [12, 8, 8],
            [1.0; 3],
            (0..12 * 64).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let seg = tile_infer(&params, &v, 8, Head::W).unwrap();
        assert_eq!(seg.dims, v.dims);
        assert!(seg.data.iter().all(|&id| id < 3));
        assert_eq!(seg.num_classes, 3);
    }

    #[test]
    fn head_s_on_stage1_checkpoint_is_an_error() {
        let params = build_unet::<f32>(&arch(), 1).unwrap();
        let v = Volume::zeros([8; 3]);
        assert!(matches!(
            tile_infer(&params, &v, 8, Head::S),
            Err(Error::MissingHead(_))
        ));
        assert!(matches!(
            tile_infer(&params, &Volume::zeros([4; 3]), 8, Head::W),
            Err(Error::PatchTooLarge { .. })
        ));
    }

    #[test]
    fn dice_closed_forms() {
        let p = LabelVolume::new([1, 1, 4], vec![1, 1, 0, 0], 2).unwrap();
        let t = LabelVolume::new([1, 1, 4], vec![1, 0, 1, 0], 2).unwrap();
        // |A|=2, |B|=2, overlap 1 -> 0.5
        assert_eq!(dice(&p, &t, 1).unwrap(), 0.5);
        assert_eq!(dice(&p, &p, 1).unwrap(), 1.0);
        // disjoint equal-size masks
        let q = LabelVolume::new([1, 1, 4], vec![0, 0, 1, 1], 2).unwrap();
        assert_eq!(dice(&p, &q, 1).unwrap(), 0.0);
        // absent from both / exactly one
        assert_eq!(dice(&p, &t, 5).unwrap(), 1.0);
        let z = LabelVolume::new([1, 1, 4], vec![0; 4], 2).unwrap();
        assert_eq!(dice(&p, &z, 1).unwrap(), 0.0);
        // dims mismatch
        let w = LabelVolume::new([1, 1, 2], vec![0, 1], 2).unwrap();
        assert!(dice(&p, &w, 1).is_err());
    }

    #[test]
    fn dice_is_symmetric_and_matches_count_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let n = 8 * 8 * 8;
            let a: Vec<u16> = (0..n).map(|_| rng.gen_range(0..4)).collect();
            let b: Vec<u16> = (0..n).map(|_| rng.gen_range(0..4)).collect();
            let pa = LabelVolume::new([8; 3], a.clone(), 4).unwrap();
            let pb = LabelVolume::new([8; 3], b.clone(), 4).unwrap();
            for id in 0..4u16 {
                let d = dice(&pa, &pb, id).unwrap();
                assert_eq!(d, dice(&pb, &pa, id).unwrap());
                // independent voxel-count oracle
                let ca = a.iter().filter(|&&x| x == id).count();
                let cb = b.iter().filter(|&&x| x == id).count();
                let ci = a.iter().zip(&b).filter(|&(&x, &y)| x == id && y == id).count();
                let oracle = if ca + cb == 0 {
                    1.0
                } else {
                    2.0 * ci as f64 / (ca + cb) as f64
                };
                assert_eq!(d, oracle);
                assert!((0.0..=1.0).contains(&d));
            }
        }
    }

    fn row(s: &str, structure: u16, d: f64) -> DiceRow {
        DiceRow {
            subject: s.to_string(),
            structure,
            dice: d,
        }
    }

    #[test]
    fn aggregate_closed_forms() {
        // single subject -> std 0
        let r = aggregate("full", vec![row("a", 1, 0.6), row("a", 2, 0.8)]).unwrap();
        assert_eq!(r.mean, 0.7);
        assert_eq!(r.std, 0.0);
        // two subjects with means 0.6 and 0.8 -> 0.7 +- 0.1 (population std)
        let r = aggregate("full", vec![row("a", 1, 0.6), row("b", 1, 0.8)]).unwrap();
        assert!((r.mean - 0.7).abs() < 1e-15);
        assert!((r.std - 0.1).abs() < 1e-15);
        // background rows are excluded from means
        let r = aggregate("full", vec![row("a", 0, 0.0), row("a", 1, 1.0)]).unwrap();
        assert_eq!(r.mean, 1.0);
        // empty (or background-only) input is an error
        assert!(aggregate("full", vec![]).is_err());
        assert!(aggregate("full", vec![row("a", 0, 1.0)]).is_err());
    }

    #[test]
    fn aggregate_matches_two_pass_oracle_and_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut rows = Vec::new();
        for s in 0..7 {
            for structure in 1..5u16 {
                rows.push(row(&format!("s{s}"), structure, rng.gen_range(0.0..1.0)));
            }
        }
        let r = aggregate("partial", rows.clone()).unwrap();
        // independent two-pass oracle
        let mut means = Vec::new();
        for s in 0..7 {
            let vals: Vec<f64> = rows
                .iter()
                .filter(|r| r.subject == format!("s{s}"))
                .map(|r| r.dice)
                .collect();
            means.push(vals.iter().sum::<f64>() / vals.len() as f64);
        }
        let mean = means.iter().sum::<f64>() / means.len() as f64;
        let std = (means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / means.len() as f64)
            .sqrt();
        assert!((r.mean - mean).abs() < 1e-12);
        assert!((r.std - std).abs() < 1e-12);
        assert!(r.std >= 0.0);

        let mut shuffled = rows.clone();
        shuffled.reverse();
        let r2 = aggregate("partial", shuffled).unwrap();
        assert!((r.mean - r2.mean).abs() < 1e-15);
        assert!((r.std - r2.std).abs() < 1e-15);
    }

    #[test]
    fn csv_and_json_outputs() {
        let r = aggregate("full", vec![row("a", 1, 0.5), row("b", 1, 0.75)]).unwrap();
        let csv = r.to_csv();
        assert!(csv.starts_with("subject,structure,dice\n"));
        assert!(csv.contains("a,1,0.5\n"));
        let json: serde_json::Value = serde_json::from_str(&r.summary_json()).unwrap();
        assert_eq!(json["task"], "full");
        assert_eq!(json["n_subjects"], 2);
    }
}
