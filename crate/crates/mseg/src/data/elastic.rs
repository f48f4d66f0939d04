//! On-the-fly elastic deformation of 3D patches.
//!
//! A random displacement field is drawn on a coarse control grid (8-voxel
//! spacing), trilinearly upsampled to a dense field, and used to warp the
//! image (trilinear interpolation, zero outside) and the label volumes
//! (nearest neighbor). Image and labels share the identical field so they
//! stay aligned.

use super::{LabelVolume, Volume};
use crate::error::{Error, Result};
use rand::Rng;

const CONTROL_SPACING: usize = 8;

struct DisplacementField {
    /// control nodes per axis
    nodes: [usize; 3],
    /// [axis][node] displacement in voxels
    values: [Vec<f64>; 3],
}

impl DisplacementField {
    fn random(dims: [usize; 3], magnitude: f64, rng: &mut impl Rng) -> Self {
        let nodes = dims.map(|d| d.div_ceil(CONTROL_SPACING) + 1);
        let n = nodes.iter().product();
        let values = [(); 3].map(|_| {
            (0..n)
                .map(|_| rng.gen_range(-magnitude..=magnitude))
                .collect::<Vec<f64>>()
        });
        DisplacementField { nodes, values }
    }

    /// Trilinear interpolation of the control grid at a dense voxel position.
    fn at(&self, axis: usize, p: [usize; 3]) -> f64 {
        let vals = &self.values[axis];
        let [nd, nh, nw] = self.nodes;
        let mut idx = [0usize; 3];
        let mut frac = [0f64; 3];
        for i in 0..3 {
            let x = p[i] as f64 / CONTROL_SPACING as f64;
            let i0 = (x.floor() as usize).min(self.nodes[i] - 2);
            idx[i] = i0;
            frac[i] = x - i0 as f64;
        }
        let node = |d: usize, h: usize, w: usize| vals[(d * nh + h) * nw + w];
        let _ = nd;
        let mut acc = 0.0;
        for (zd, fd) in [(0, 1.0 - frac[0]), (1, frac[0])] {
            for (zh, fh) in [(0, 1.0 - frac[1]), (1, frac[1])] {
                for (zw, fw) in [(0, 1.0 - frac[2]), (1, frac[2])] {
                    acc += fd * fh * fw * node(idx[0] + zd, idx[1] + zh, idx[2] + zw);
                }
            }
        }
        acc
    }
}

fn trilinear_sample(v: &Volume, p: [f64; 3]) -> f32 {
    let [dd, hh, ww] = v.dims;
    // zero outside the volume
    let mut idx = [0usize; 3];
    let mut frac = [0f64; 3];
    for i in 0..3 {
        if p[i] < 0.0 || p[i] > (v.dims[i] - 1) as f64 {
            // allow a partial cell at the far face; fully outside is zero
            if p[i] <= -1.0 || p[i] >= v.dims[i] as f64 {
                return 0.0;
            }
        }
        let x = p[i].max(0.0).min((v.dims[i] - 1) as f64);
        let i0 = (x.floor() as usize).min(v.dims[i].saturating_sub(2));
        idx[i] = i0;
        frac[i] = x - i0 as f64;
    }
    let _ = (dd, ww);
    let node = |d: usize, h: usize, w: usize| v.data[(d * hh + h) * v.dims[2] + w] as f64;
    let mut acc = 0.0;
    for (zd, fd) in [(0, 1.0 - frac[0]), (1, frac[0])] {
        for (zh, fh) in [(0, 1.0 - frac[1]), (1, frac[1])] {
            for (zw, fw) in [(0, 1.0 - frac[2]), (1, frac[2])] {
                acc += fd * fh * fw * node(idx[0] + zd, idx[1] + zh, idx[2] + zw);
            }
        }
    }
    acc as f32
}

fn nearest_label(l: &LabelVolume, p: [f64; 3]) -> u16 {
    let mut idx = [0usize; 3];
    for i in 0..3 {
        let r = p[i].round();
        if r < 0.0 || r >= l.dims[i] as f64 {
            return 0;
        }
        idx[i] = r as usize;
    }
    l.data[(idx[0] * l.dims[1] + idx[1]) * l.dims[2] + idx[2]]
}

/// Warps a patch and its aligned label volumes with one shared random
/// displacement field. `magnitude` is the per-axis displacement bound in
/// voxels; 0 returns bit-identical copies.
pub fn elastic_deform(
    patch: &Volume,
    labels: &[&LabelVolume],
    magnitude: f64,
    rng: &mut impl Rng,
) -> Result<(Volume, Vec<LabelVolume>)> {
    if magnitude < 0.0 {
        return Err(Error::Config(format!(
            "deformation magnitude {magnitude} must be non-negative"
        )));
    }
    for l in labels {
        if l.dims != patch.dims {
            return Err(Error::ShapeMismatch(format!(
                "label dims {:?} differ from patch dims {:?}",
                l.dims, patch.dims
            )));
        }
    }
    if magnitude == 0.0 {
        return Ok((patch.clone(), labels.iter().map(|&l| l.clone()).collect()));
    }
    let field = DisplacementField::random(patch.dims, magnitude, rng);
    let [dd, hh, ww] = patch.dims;
    let mut out = Volume {
        dims: patch.dims,
        spacing: patch.spacing,
        data: Vec::with_capacity(patch.data.len()),
    };
    let mut out_labels: Vec<LabelVolume> = labels
        .iter()
        .map(|&l| LabelVolume {
            dims: l.dims,
            data: Vec::with_capacity(l.data.len()),
            num_classes: l.num_classes,
        })
        .collect();
    for d in 0..dd {
        for h in 0..hh {
            for w in 0..ww {
                let src = [
                    d as f64 + field.at(0, [d, h, w]),
                    h as f64 + field.at(1, [d, h, w]),
                    w as f64 + field.at(2, [d, h, w]),
                ];
                out.data.push(trilinear_sample(patch, src));
                for (ol, &il) in out_labels.iter_mut().zip(labels) {
                    ol.data.push(nearest_label(il, src));
                }
            }
        }
    }
    Ok((out, out_labels))
}
