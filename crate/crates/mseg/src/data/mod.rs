//! Volumes, labels, phantoms, normalization, patch sampling, augmentation.

mod elastic;
mod io;
mod phantom;

pub use elastic::elastic_deform;
pub use io::{
    read_label_map, read_nifti, read_volume, write_label_map, write_volume, VolumeFile,
};
pub use phantom::{generate_phantom, PhantomSpec};

use crate::error::{Error, Result};
use rand::Rng;

/// 3D scalar image grid, dims `[D, H, W]`, W fastest, spacing in mm/voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    pub data: Vec<f32>,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f32; 3], data: Vec<f32>) -> Result<Self> {
        if data.len() != dims.iter().product::<usize>() {
            return Err(Error::ShapeMismatch(format!(
                "volume dims {dims:?} vs {} voxels",
                data.len()
            )));
        }
        if dims.iter().any(|&d| d == 0) || spacing.iter().any(|&s| s <= 0.0) {
            return Err(Error::ShapeMismatch(format!(
                "volume dims {dims:?} and spacing {spacing:?} must be positive"
            )));
        }
        Ok(Volume { dims, spacing, data })
    }

    pub fn zeros(dims: [usize; 3]) -> Self {
        Volume {
            dims,
            spacing: [1.0; 3],
            data: vec![0.0; dims.iter().product()],
        }
    }

    #[inline]
    pub fn at(&self, d: usize, h: usize, w: usize) -> f32 {
        self.data[(d * self.dims[1] + h) * self.dims[2] + w]
    }
}

/// 3D integer class-id grid; 0 is background.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    pub dims: [usize; 3],
    pub data: Vec<u16>,
    pub num_classes: usize,
}

impl LabelVolume {
    pub fn new(dims: [usize; 3], data: Vec<u16>, num_classes: usize) -> Result<Self> {
        if data.len() != dims.iter().product::<usize>() {
            return Err(Error::ShapeMismatch(format!(
                "label dims {dims:?} vs {} voxels",
                data.len()
            )));
        }
        if let Some(&bad) = data.iter().find(|&&v| v as usize >= num_classes) {
            return Err(Error::LabelOutOfRange {
                id: bad,
                classes: num_classes,
            });
        }
        Ok(LabelVolume {
            dims,
            data,
            num_classes,
        })
    }

    pub fn zeros(dims: [usize; 3], num_classes: usize) -> Self {
        LabelVolume {
            dims,
            data: vec![0; dims.iter().product()],
            num_classes,
        }
    }

    #[inline]
    pub fn at(&self, d: usize, h: usize, w: usize) -> u16 {
        self.data[(d * self.dims[1] + h) * self.dims[2] + w]
    }
}

/// Mapping from full-annotation ids to partial ids 1..=P; any full id not
/// listed maps to background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pairs: Vec<(u16, u16)>,
}

impl LabelMap {
    pub fn new(mut pairs: Vec<(u16, u16)>) -> Result<Self> {
        pairs.sort_unstable();
        let mut seen_full = std::collections::HashSet::new();
        for &(full, _) in &pairs {
            if !seen_full.insert(full) {
                return Err(Error::Config(format!(
                    "label map: duplicate full id {full}"
                )));
            }
        }
        let mut partials: Vec<u16> = pairs.iter().map(|&(_, p)| p).collect();
        partials.sort_unstable();
        for (i, &p) in partials.iter().enumerate() {
            if p as usize != i + 1 {
                return Err(Error::Config(format!(
                    "label map: partial ids must be exactly 1..{}, got {partials:?}",
                    pairs.len()
                )));
            }
        }
        Ok(LabelMap { pairs })
    }

    pub fn empty() -> Self {
        LabelMap { pairs: Vec::new() }
    }

    pub fn pairs(&self) -> &[(u16, u16)] {
        &self.pairs
    }

    /// Number of partial structures P.
    pub fn num_partial(&self) -> usize {
        self.pairs.len()
    }

    pub fn lookup(&self, full: u16) -> u16 {
        self.pairs
            .iter()
            .find(|&&(f, _)| f == full)
            .map(|&(_, p)| p)
            .unwrap_or(0)
    }
}

/// Rescales to zero mean and unit standard deviation over all voxels.
pub fn zscore_normalize(v: &Volume) -> Result<Volume> {
    let n = v.data.len() as f64;
    let mean = v.data.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = v
        .data
        .iter()
        .map(|&x| {
            let d = x as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    if var <= 0.0 {
        return Err(Error::ConstantVolume);
    }
    let std = var.sqrt();
    let data = v
        .data
        .iter()
        .map(|&x| ((x as f64 - mean) / std) as f32)
        .collect();
    Volume::new(v.dims, v.spacing, data)
}

/// Voxelwise relabeling: mapped full ids become their partial id, everything
/// else becomes background. Output has P+1 classes.
pub fn extract_partial(full: &LabelVolume, map: &LabelMap) -> LabelVolume {
    let mut table = vec![0u16; full.num_classes.max(1)];
    for &(f, p) in map.pairs() {
        if (f as usize) < table.len() {
            table[f as usize] = p;
        }
    }
    let data = full.data.iter().map(|&v| table[v as usize]).collect();
    LabelVolume {
        dims: full.dims,
        data,
        num_classes: map.num_partial() + 1,
    }
}

/// Crops an axis-aligned cubic patch at a uniformly random corner; the same
/// corner is applied to the image and every label volume so they stay
/// voxel-aligned. Returns the corner for auditability.
pub fn sample_patch(
    v: &Volume,
    labels: &[&LabelVolume],
    size: usize,
    rng: &mut impl Rng,
) -> Result<(Volume, Vec<LabelVolume>, [usize; 3])> {
    for &extent in &v.dims {
        if size > extent {
            return Err(Error::PatchTooLarge { size, extent });
        }
    }
    for l in labels {
        if l.dims != v.dims {
            return Err(Error::ShapeMismatch(format!(
                "label dims {:?} differ from image dims {:?}",
                l.dims, v.dims
            )));
        }
    }
    let corner = [
        rng.gen_range(0..=v.dims[0] - size),
        rng.gen_range(0..=v.dims[1] - size),
        rng.gen_range(0..=v.dims[2] - size),
    ];
    let crop_image = |src: &Volume| {
        let mut data = Vec::with_capacity(size * size * size);
        for d in 0..size {
            for h in 0..size {
                let row = ((corner[0] + d) * src.dims[1] + corner[1] + h) * src.dims[2] + corner[2];
                data.extend_from_slice(&src.data[row..row + size]);
            }
        }
        Volume {
            dims: [size; 3],
            spacing: src.spacing,
            data,
        }
    };
    let crop_labels = |src: &LabelVolume| {
        let mut data = Vec::with_capacity(size * size * size);
        for d in 0..size {
            for h in 0..size {
                let row = ((corner[0] + d) * src.dims[1] + corner[1] + h) * src.dims[2] + corner[2];
                data.extend_from_slice(&src.data[row..row + size]);
            }
        }
        LabelVolume {
            dims: [size; 3],
            data,
            num_classes: src.num_classes,
        }
    };
    Ok((
        crop_image(v),
        labels.iter().map(|l| crop_labels(l)).collect(),
        corner,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zscore_two_point_closed_form() {
        let v = Volume::new([1, 1, 2], [1.0; 3], vec![0.0, 2.0]).unwrap();
        let z = zscore_normalize(&v).unwrap();
        assert!((z.data[0] + 1.0).abs() < 1e-6);
        assert!((z.data[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn zscore_idempotent_and_recomputes_to_unit() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data: Vec<f32> = (0..512).map(|_| rng.gen_range(-3.0..9.0)).collect();
        let v = Volume::new([8, 8, 8], [1.0; 3], data).unwrap();
        let z = zscore_normalize(&v).unwrap();
        let n = z.data.len() as f64;
        let mean = z.data.iter().map(|&x| x as f64).sum::<f64>() / n;
        let var = z.data.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-5);
        assert!((var.sqrt() - 1.0).abs() < 1e-5);

        let zz = zscore_normalize(&z).unwrap();
        for (a, b) in z.data.iter().zip(&zz.data) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn zscore_rejects_constant_volume() {
        let v = Volume::new([2, 2, 2], [1.0; 3], vec![5.0; 8]).unwrap();
        assert!(matches!(zscore_normalize(&v), Err(Error::ConstantVolume)));
    }

    #[test]
    fn label_map_validation() {
        assert!(LabelMap::new(vec![(5, 1), (9, 2)]).is_ok());
        // partial ids must be contiguous from 1
        assert!(LabelMap::new(vec![(5, 1), (9, 3)]).is_err());
        // duplicate full id
        assert!(LabelMap::new(vec![(5, 1), (5, 2)]).is_err());
    }

    #[test]
    fn extract_partial_contracts() {
        let full = LabelVolume::new([1, 1, 4], vec![0, 5, 9, 12], 13).unwrap();
        let map = LabelMap::new(vec![(5, 1), (9, 2)]).unwrap();
        let part = extract_partial(&full, &map);
        assert_eq!(part.data, vec![0, 1, 2, 0]);
        assert_eq!(part.num_classes, 3);

        // empty map sends everything to background
        let empty = extract_partial(&full, &LabelMap::empty());
        assert!(empty.data.iter().all(|&v| v == 0));
        assert_eq!(empty.num_classes, 1);

        // identity-on-range map is idempotent
        let idmap = LabelMap::new(vec![(1, 1), (2, 2)]).unwrap();
        let lab = LabelVolume::new([1, 1, 3], vec![0, 1, 2], 3).unwrap();
        let once = extract_partial(&lab, &idmap);
        let twice = extract_partial(&once, &idmap);
        assert_eq!(once, twice);
    }

    #[test]
    fn sample_patch_degenerate_and_bounds() {
        let v = Volume::new([4, 4, 4], [1.0; 3], (0..64).map(|i| i as f32).collect()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (p, _, corner) = sample_patch(&v, &[], 4, &mut rng).unwrap();
        assert_eq!(corner, [0, 0, 0]);
        assert_eq!(p.data, v.data);
        assert!(sample_patch(&v, &[], 5, &mut rng).is_err());
    }

    #[test]
    fn sample_patch_keeps_image_and_labels_aligned() {
        // label volume encodes the source coordinate; after cropping, image
        // and label must agree voxel for voxel
        let dims = [8, 8, 8];
        let data: Vec<f32> = (0..512).map(|i| i as f32).collect();
        let ldata: Vec<u16> = (0..512).map(|i| (i % 511) as u16).collect();
        let v = Volume::new(dims, [1.0; 3], data).unwrap();
        let l = LabelVolume::new(dims, ldata, 512).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for _ in 0..10 {
            let (pv, pl, _) = sample_patch(&v, &[&l], 4, &mut rng).unwrap();
            for (iv, il) in pv.data.iter().zip(&pl[0].data) {
                assert_eq!((*iv as usize) % 511, *il as usize);
            }
        }
    }
}
