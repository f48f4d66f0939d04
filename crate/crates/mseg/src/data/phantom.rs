//! Synthetic phantom volumes with known ground truth.
//!
//! A phantom is one large "cortex-like" ellipsoidal shell (label 1)
//! containing K-1 smaller interior ellipsoids (labels 2..K). Interior structures are placed
//! by seeded rejection sampling around fixed per-label anchor directions, so
//! the same label id occupies a similar location in every phantom: that is
//! what makes a structure learnable across subjects, mirroring anatomy.
//! Intensity means are drawn per label in [0.2, 0.9] with a minimum pairwise
//! separation of 0.05, and i.i.d. Gaussian noise is added on top.

use super::{LabelMap, LabelVolume, Volume};
use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub size: usize,
    /// K: number of structures, labels 1..=K (label 1 is the enclosing ellipsoid).
    pub num_full_structures: usize,
    /// P: how many structures the partial annotation covers.
    pub partial_subset_size: usize,
    pub noise_sigma: f32,
    pub seed: u64,
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size < 8 {
            return Err(Error::Config(format!(
                "phantom size {} must be at least 8",
                self.size
            )));
        }
        if self.partial_subset_size > self.num_full_structures {
            return Err(Error::Config(format!(
                "partial subset {} exceeds structure count {}",
                self.partial_subset_size, self.num_full_structures
            )));
        }
        Ok(())
    }
}

struct Ellipsoid {
    center: [f64; 3],
    semi: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        let mut acc = 0.0;
        for i in 0..3 {
            let t = (p[i] - self.center[i]) / self.semi[i];
            acc += t * t;
        }
        acc <= 1.0
    }

    fn max_semi(&self) -> f64 {
        self.semi.iter().cloned().fold(0.0, f64::max)
    }
}

/// Fixed anchor direction for interior structure `j` of `n` (spherical
/// Fibonacci layout), shared by every phantom.
fn anchor_direction(j: usize, n: usize) -> [f64; 3] {
    let golden_angle = std::f64::consts::PI * (3.0 - 5.0f64.sqrt());
    let z = 1.0 - 2.0 * (j as f64 + 0.5) / n as f64;
    let r = (1.0 - z * z).sqrt();
    let phi = golden_angle * j as f64;
    [z, r * phi.sin(), r * phi.cos()]
}

const PLACEMENT_ATTEMPTS: usize = 1000;

fn place_interior(
    rng: &mut ChaCha8Rng,
    outer: &Ellipsoid,
    placed: &[Ellipsoid],
    anchor: [f64; 3],
    size: f64,
) -> Option<Ellipsoid> {
    // interior structures must stay a few hundred voxels at size 32: much
    // smaller and they contribute too little cross-entropy to be learnable
    let semi_min = (size / 9.0).max(1.2);
    let semi_max = (size / 7.5).max(semi_min + 0.1);
    let jitter_amp = size / 20.0;
    for attempt in 0..PLACEMENT_ATTEMPTS {
        // progressively shrink toward the (feasible) anchor point
        let scale = 1.0 - 0.8 * attempt as f64 / PLACEMENT_ATTEMPTS as f64;
        let mut center = [0.0; 3];
        for i in 0..3 {
            let target = outer.center[i] + 0.5 * outer.semi[i] * anchor[i];
            center[i] = target + rng.gen_range(-jitter_amp..jitter_amp) * scale;
        }
        let mut semi = [0.0; 3];
        // the floor also relaxes under crowding so tight configurations
        // stay feasible
        let lo = semi_min * (0.5 + 0.5 * scale);
        for s in &mut semi {
            *s = lo + rng.gen_range(0.0..semi_max - semi_min) * scale;
        }
        let cand = Ellipsoid { center, semi };
        // bounding-sphere containment with a 1-voxel margin; the outer
        // ellipsoid is near-spherical so this is barely conservative
        let dist = (0..3)
            .map(|i| (cand.center[i] - outer.center[i]).powi(2))
            .sum::<f64>()
            .sqrt();
        let outer_min = outer.semi.iter().cloned().fold(f64::MAX, f64::min);
        if dist + cand.max_semi() + 1.0 > outer_min {
            continue;
        }
        // bounding-sphere separation with a 1-voxel margin
        let clear = placed.iter().all(|e| {
            let d2: f64 = (0..3)
                .map(|i| (cand.center[i] - e.center[i]).powi(2))
                .sum();
            d2.sqrt() >= cand.max_semi() + e.max_semi() + 1.0
        });
        if clear {
            return Some(cand);
        }
    }
    None
}

fn rasterize(labels: &mut LabelVolume, e: &Ellipsoid, id: u16) {
    let [dd, hh, ww] = labels.dims;
    let lo = |c: f64, s: f64| ((c - s).floor().max(0.0)) as usize;
    let hi = |c: f64, s: f64, n: usize| ((c + s).ceil().min(n as f64 - 1.0)) as usize;
    for d in lo(e.center[0], e.semi[0])..=hi(e.center[0], e.semi[0], dd) {
        for h in lo(e.center[1], e.semi[1])..=hi(e.center[1], e.semi[1], hh) {
            for w in lo(e.center[2], e.semi[2])..=hi(e.center[2], e.semi[2], ww) {
                if e.contains([d as f64, h as f64, w as f64]) {
                    labels.data[(d * hh + h) * ww + w] = id;
                }
            }
        }
    }
}

/// Per-label intensity means: the enclosing label 1 sits low (near 0.2)
/// while interior labels spread evenly over [0.5, 0.9], plus a small
/// per-phantom jitter where spacing allows. Keeping the dominant label far
/// from every interior mean matters for learnability: a rare structure whose
/// intensity nearly matches the 30x-larger shell around it starts the
/// softmax race absorbed into that shell.
fn intensity_means(rng: &mut ChaCha8Rng, k: usize) -> Result<Vec<f64>> {
    if k == 0 {
        return Ok(Vec::new());
    }
    if k == 1 {
        return Ok(vec![0.55 + rng.gen_range(-0.02..0.02)]);
    }
    let n = k - 1;
    let mut means = vec![0.22 + rng.gen_range(-0.02..0.02)];
    if n == 1 {
        means.push(0.7 + rng.gen_range(-0.02..0.02));
        return Ok(means);
    }
    let spacing = 0.4 / (n - 1) as f64;
    if spacing < 0.05 {
        return Err(Error::Config(format!(
            "cannot place {n} interior intensity means with separation 0.05 in [0.5, 0.9]"
        )));
    }
    // jitter <= (spacing - 0.05)/4 keeps the pairwise separation at 0.05
    // even after shrinking the base range to stay inside [0.5, 0.9]
    let jitter = ((spacing - 0.05) / 4.0).min(0.02);
    let eff = (0.4 - 2.0 * jitter) / (n - 1) as f64;
    means.extend((0..n).map(|i| {
        let base = 0.5 + jitter + i as f64 * eff;
        if jitter > 0.0 {
            base + rng.gen_range(-jitter..jitter)
        } else {
            base
        }
    }));
    Ok(means)
}

pub fn generate_phantom(spec: &PhantomSpec) -> Result<(Volume, LabelVolume, LabelMap)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let size = spec.size;
    let k = spec.num_full_structures;
    let mut labels = LabelVolume::zeros([size; 3], k + 1);

    if k >= 1 {
        let s = size as f64;
        let mut center = [0.0; 3];
        for c in &mut center {
            *c = s / 2.0 + rng.gen_range(-s / 32.0..s / 32.0);
        }
        let mut semi = [0.0; 3];
        for a in &mut semi {
            *a = 0.42 * s * (1.0 + rng.gen_range(-0.06..0.06));
        }
        let outer = Ellipsoid { center, semi };
        rasterize(&mut labels, &outer, 1);
        // hollow the ellipsoid into a cortex-like shell: a solid label 1
        // dominates the voxel count so heavily that rare interior structures
        // are suppressed in the softmax race
        let cavity = Ellipsoid {
            center,
            semi: [semi[0] * 0.75, semi[1] * 0.75, semi[2] * 0.75],
        };
        rasterize(&mut labels, &cavity, 0);

        // greedy placement lets early structures take maximum size and
        // starve later ones; on failure, retry the whole configuration with
        // a globally shrunken size budget
        let n_interior = k - 1;
        let mut interior: Vec<Ellipsoid> = Vec::new();
        for round in 0.. {
            if round == 8 {
                return Err(Error::PhantomPlacement(k));
            }
            let budget = s * (1.0 - 0.1 * round as f64);
            interior.clear();
            let ok = (0..n_interior).all(|j| {
                let anchor = anchor_direction(j, n_interior);
                match place_interior(&mut rng, &outer, &interior, anchor, budget) {
                    Some(e) => {
                        interior.push(e);
                        true
                    }
                    None => false,
                }
            });
            if ok {
                break;
            }
        }
        for (j, e) in interior.iter().enumerate() {
            rasterize(&mut labels, e, (j + 2) as u16);
        }
    }

    let means = intensity_means(&mut rng, k)?;

    // partial subset: interior labels first, label 1 only if P requires it
    let mut pool: Vec<u16> = (2..=k as u16).collect();
    pool.shuffle(&mut rng);
    pool.push(1);
    let mut chosen: Vec<u16> = pool.into_iter().take(spec.partial_subset_size).collect();
    chosen.sort_unstable();
    let map = LabelMap::new(
        chosen
            .iter()
            .enumerate()
            .map(|(i, &full)| (full, (i + 1) as u16))
            .collect(),
    )?;

    let noise = Normal::new(0.0, spec.noise_sigma as f64)
        .map_err(|_| Error::Config(format!("bad noise sigma {}", spec.noise_sigma)))?;
    let mut image = Volume::zeros([size; 3]);
    for (v, &lab) in image.data.iter_mut().zip(&labels.data) {
        let mean = if lab == 0 { 0.0 } else { means[lab as usize - 1] };
        *v = (mean + noise.sample(&mut rng)) as f32;
    }

    Ok((image, labels, map))
}
