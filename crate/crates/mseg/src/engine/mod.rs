//! Reverse-mode differentiation engine.
//!
//! Provides exactly the operators the segmentation networks need, an Adam
//! optimizer, and a finite-difference harness for verifying every backward
//! rule. Generic over [`Scalar`] so training runs in `f32` while gradient
//! verification runs the identical code in `f64`.

mod adam;
mod gradcheck;
mod kernels;
mod tape;
mod tensor;

pub use adam::AdamState;

/// Sets flush-to-zero and denormals-are-zero on the calling thread.
///
/// Converged f32 training produces swarms of subnormal gradient values, and
/// x86 handles subnormal arithmetic in microcode at a many-fold slowdown;
/// flushing them to zero keeps step times flat. The flags are thread-local,
/// idempotent, and applied identically on every run, so reproducibility is
/// unaffected. A no-op on non-x86 targets.
pub fn enable_flush_to_zero() {
    #[cfg(target_arch = "x86_64")]
    // SAFETY: only sets the FTZ (bit 15) and DAZ (bit 6) MXCSR control bits.
    unsafe {
        let mut csr: u32 = 0;
        std::arch::asm!("stmxcsr [{0}]", in(reg) &mut csr, options(nostack));
        csr |= 0x8040;
        std::arch::asm!("ldmxcsr [{0}]", in(reg) &csr, options(nostack));
    }
}
pub use gradcheck::{
    finite_diff_check, op_family_suite, GradCheckEntry, GradCheckReport, LossFn, FD_STEP,
};
pub use kernels::LOG_CLAMP;
pub use tape::{Tape, TensorId};
pub use tensor::{Scalar, Tensor};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::LabelVolume;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    /// Direct six-nested-loop convolution, independent of the kernel code.
    fn conv3d_oracle(
        input: &[f64],
        c_in: usize,
        dims: [usize; 3],
        weight: &[f64],
        c_out: usize,
        k: usize,
        bias: &[f64],
    ) -> Vec<f64> {
        let [d, h, w] = dims;
        let pad = (k / 2) as isize;
        let mut out = vec![0.0; c_out * d * h * w];
        for co in 0..c_out {
            for od in 0..d {
                for oh in 0..h {
                    for ow in 0..w {
                        let mut acc = bias[co];
                        for ci in 0..c_in {
                            for kd in 0..k {
                                for kh in 0..k {
                                    for kw in 0..k {
                                        let id = od as isize + kd as isize - pad;
                                        let ih = oh as isize + kh as isize - pad;
                                        let iw = ow as isize + kw as isize - pad;
                                        if id < 0
                                            || ih < 0
                                            || iw < 0
                                            || id >= d as isize
                                            || ih >= h as isize
                                            || iw >= w as isize
                                        {
                                            continue;
                                        }
                                        let iv = input[((ci * d + id as usize) * h + ih as usize)
                                            * w
                                            + iw as usize];
                                        let wv = weight
                                            [(((co * c_in + ci) * k + kd) * k + kh) * k + kw];
                                        acc += iv * wv;
                                    }
                                }
                            }
                        }
                        out[((co * d + od) * h + oh) * w + ow] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv3d_matches_nested_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let (c_in, c_out, k) = (2, 3, 3);
        let dims = [5, 5, 5];
        let n = dims.iter().product::<usize>();
        let input = rand_vec(&mut rng, c_in * n);
        let weight = rand_vec(&mut rng, c_out * c_in * k * k * k);
        let bias = rand_vec(&mut rng, c_out);

        let mut tape = Tape::new();
        let i = tape.leaf(
            Tensor::new(vec![c_in, 5, 5, 5], input.clone()).unwrap(),
            false,
        );
        let w = tape.leaf(
            Tensor::new(vec![c_out, c_in, k, k, k], weight.clone()).unwrap(),
            false,
        );
        let b = tape.leaf(Tensor::new(vec![c_out], bias.clone()).unwrap(), false);
        let y = tape.conv3d(i, w, b).unwrap();

        let expect = conv3d_oracle(&input, c_in, dims, &weight, c_out, k, &bias);
        for (got, want) in tape.value(y).data().iter().zip(&expect) {
            let rel = (got - want).abs() / want.abs().max(1.0);
            assert!(rel < 1e-5, "got {got}, want {want}");
        }
    }

    #[test]
    fn conv3d_rejects_even_kernel_and_bad_shapes() {
        let mut tape: Tape<f32> = Tape::new();
        let i = tape.leaf(Tensor::zeros(vec![1, 2, 2, 2]), false);
        let w_even = tape.leaf(Tensor::zeros(vec![1, 1, 2, 2, 2]), false);
        let b = tape.leaf(Tensor::zeros(vec![1]), false);
        assert!(tape.conv3d(i, w_even, b).is_err());
        let w_wrong_cin = tape.leaf(Tensor::zeros(vec![1, 3, 3, 3, 3]), false);
        assert!(tape.conv3d(i, w_wrong_cin, b).is_err());
    }

    #[test]
    fn leaky_relu_values_and_gradient() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![2.0, -1.0, -3.0]).unwrap(), true);
        let y = tape.leaky_relu(x, 0.01);
        assert_eq!(tape.value(y).data(), &[2.0, -0.01, -0.03]);
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 0.01, 0.01]);
    }

    #[test]
    fn max_pool_enumeration_cube() {
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.leaf(
            Tensor::new(vec![1, 2, 2, 2], (1..=8).map(|v| v as f32).collect()).unwrap(),
            false,
        );
        let y = tape.max_pool3d(x).unwrap();
        assert_eq!(tape.value(y).data(), &[8.0]);
    }

    #[test]
    fn max_pool_tie_routes_to_first_in_scan_order() {
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 2, 2, 2], vec![5.0; 8]).unwrap(), true);
        let y = tape.max_pool3d(x).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0]);
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        let g = tape.grad(x).unwrap();
        assert_eq!(g[0], 1.0);
        assert!(g[1..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn max_pool_matches_brute_force_windows() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let data = rand_vec(&mut rng, 64);
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 4, 4, 4], data.clone()).unwrap(), false);
        let y = tape.max_pool3d(x).unwrap();
        for od in 0..2 {
            for oh in 0..2 {
                for ow in 0..2 {
                    let mut best = f64::NEG_INFINITY;
                    for zd in 0..2 {
                        for zh in 0..2 {
                            for zw in 0..2 {
                                best =
                                    best.max(data[((od * 2 + zd) * 4 + oh * 2 + zh) * 4 + ow * 2 + zw]);
                            }
                        }
                    }
                    assert_eq!(tape.value(y).data()[(od * 2 + oh) * 2 + ow], best);
                }
            }
        }
    }

    #[test]
    fn max_pool_rejects_odd_extent() {
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![1, 3, 4, 4]), false);
        assert!(tape.max_pool3d(x).is_err());
    }

    #[test]
    fn upsample_replicates_and_inverts_under_pool() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 1, 1, 1], vec![3.0]).unwrap(), false);
        let y = tape.upsample_nearest(x).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 2, 2, 2]);
        assert!(tape.value(y).data().iter().all(|&v| v == 3.0));

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data = rand_vec(&mut rng, 2 * 27);
        let x = tape.leaf(Tensor::new(vec![2, 3, 3, 3], data.clone()).unwrap(), false);
        let up = tape.upsample_nearest(x).unwrap();
        let back = tape.max_pool3d(up).unwrap();
        assert_eq!(tape.value(back).data(), &data[..]);
    }

    #[test]
    fn upsample_gradient_of_sum_is_eight() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 2, 2, 2], vec![0.5; 8]).unwrap(), true);
        let y = tape.upsample_nearest(x).unwrap();
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        assert!(tape.grad(x).unwrap().iter().all(|&g| g == 8.0));
    }

    #[test]
    fn concat_shapes_identity_and_slicing() {
        let mut tape: Tape<f32> = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let da: Vec<f32> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let db: Vec<f32> = (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let a = tape.leaf(Tensor::new(vec![1, 2, 2, 2], da.clone()).unwrap(), false);
        let b = tape.leaf(Tensor::new(vec![3, 2, 2, 2], db.clone()).unwrap(), false);
        let y = tape.concat_channels(a, b).unwrap();
        assert_eq!(tape.value(y).shape(), &[4, 2, 2, 2]);
        // slicing the first C1 channels recovers a bit-exactly
        assert_eq!(&tape.value(y).data()[..8], &da[..]);

        let empty = tape.leaf(Tensor::new(vec![0, 2, 2, 2], vec![]).unwrap(), false);
        let same = tape.concat_channels(a, empty).unwrap();
        assert_eq!(tape.value(same).data(), &da[..]);

        let mism = tape.leaf(Tensor::zeros(vec![1, 4, 2, 2]), false);
        assert!(tape.concat_channels(a, mism).is_err());
    }

    #[test]
    fn softmax_uniform_closed_form_and_sums() {
        let mut tape: Tape<f64> = Tape::new();
        let zeros = tape.leaf(Tensor::zeros(vec![4, 2, 2, 2]), false);
        let y = tape.softmax_channels(zeros).unwrap();
        assert!(tape.value(y).data().iter().all(|&p| (p - 0.25).abs() < 1e-12));

        let x = tape.leaf(
            Tensor::new(vec![2, 1, 1, 1], vec![(2.0f64).ln(), 0.0]).unwrap(),
            false,
        );
        let y = tape.softmax_channels(x).unwrap();
        assert!((tape.value(y).data()[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((tape.value(y).data()[1] - 1.0 / 3.0).abs() < 1e-12);

        // per-voxel channel sums are 1 on random logits
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data = rand_vec(&mut rng, 5 * 27);
        let x = tape.leaf(Tensor::new(vec![5, 3, 3, 3], data).unwrap(), false);
        let y = tape.softmax_channels(x).unwrap();
        let p = tape.value(y).data();
        for v in 0..27 {
            let s: f64 = (0..5).map(|c| p[c * 27 + v]).sum();
            assert!((s - 1.0).abs() < 1e-6);
            for c in 0..5 {
                assert!(p[c * 27 + v] > 0.0 && p[c * 27 + v] < 1.0);
            }
        }
    }

    #[test]
    fn softmax_shift_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let data = rand_vec(&mut rng, 3 * 8);
        let shifted: Vec<f64> = data.iter().map(|v| v + 17.25).collect();
        let mut tape: Tape<f64> = Tape::new();
        let a = tape.leaf(Tensor::new(vec![3, 2, 2, 2], data).unwrap(), false);
        let b = tape.leaf(Tensor::new(vec![3, 2, 2, 2], shifted).unwrap(), false);
        let ya = tape.softmax_channels(a).unwrap();
        let yb = tape.softmax_channels(b).unwrap();
        for (pa, pb) in tape.value(ya).data().iter().zip(tape.value(yb).data()) {
            assert!((pa - pb).abs() < 1e-6);
        }
    }

    fn labels(dims: [usize; 3], data: Vec<u16>, num_classes: usize) -> LabelVolume {
        LabelVolume {
            dims,
            data,
            num_classes,
        }
    }

    #[test]
    fn cross_entropy_closed_forms() {
        // exactly one-hot correct -> 0
        let mut tape: Tape<f64> = Tape::new();
        let mut onehot = vec![0.0; 2 * 8];
        for v in 0..8 {
            onehot[v] = 1.0; // class 0 everywhere
        }
        let p = tape.leaf(Tensor::new(vec![2, 2, 2, 2], onehot).unwrap(), false);
        let t = labels([2, 2, 2], vec![0; 8], 2);
        let l = tape.cross_entropy(p, &t).unwrap();
        assert!(tape.value(l).item().unwrap().abs() < 1e-10);

        // uniform over C classes -> ln C
        let p = tape.leaf(
            Tensor::new(vec![4, 2, 2, 2], vec![0.25; 4 * 8]).unwrap(),
            false,
        );
        let t = labels([2, 2, 2], (0..8).map(|v| (v % 4) as u16).collect(), 4);
        let l = tape.cross_entropy(p, &t).unwrap();
        assert!((tape.value(l).item().unwrap() - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_matches_per_voxel_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let dhw = 64;
        let c = 3;
        let logits = rand_vec(&mut rng, c * dhw);
        let target: Vec<u16> = (0..dhw).map(|_| rng.gen_range(0..c as u16)).collect();

        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::new(vec![c, 4, 4, 4], logits.clone()).unwrap(), false);
        let prob = tape.softmax_channels(x).unwrap();
        let l = tape.cross_entropy(prob, &labels([4, 4, 4], target.clone(), 3)).unwrap();

        // scalar oracle, computed independently per voxel
        let mut acc = 0.0;
        for v in 0..dhw {
            let mx = (0..c).map(|ci| logits[ci * dhw + v]).fold(f64::MIN, f64::max);
            let z: f64 = (0..c).map(|ci| (logits[ci * dhw + v] - mx).exp()).sum();
            let p = (logits[target[v] as usize * dhw + v] - mx).exp() / z;
            acc -= p.max(1e-12).ln();
        }
        acc /= dhw as f64;
        assert!((tape.value(l).item().unwrap() - acc).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_label() {
        let mut tape: Tape<f32> = Tape::new();
        let p = tape.leaf(Tensor::new(vec![2, 1, 1, 1], vec![0.5, 0.5]).unwrap(), false);
        let t = labels([1, 1, 1], vec![2], 3);
        assert!(tape.cross_entropy(p, &t).is_err());
    }

    #[test]
    fn backward_of_sum_is_ones_and_fanout_accumulates() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2, 2, 2, 2], vec![0.3; 16]).unwrap(), true);
        let loss = tape.sum(x);
        tape.backward(loss).unwrap();
        assert!(tape.grad(x).unwrap().iter().all(|&g| g == 1.0));

        // loss = sum(x + x) -> grad 2 everywhere
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2, 2, 2, 2], vec![0.3; 16]).unwrap(), true);
        let y = tape.add(x, x).unwrap();
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        assert!(tape.grad(x).unwrap().iter().all(|&g| g == 2.0));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![2, 2, 2, 2]), true);
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn conv_weight_gradient_matches_finite_differences() {
        // y = leaky_relu(conv3d(x, w, b)); d loss / d {w, b, x} by central
        // differences in double precision
        use indexmap::IndexMap;
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut params = IndexMap::new();
        params.insert(
            "x".to_string(),
            Tensor::new(vec![1, 4, 4, 4], rand_vec(&mut rng, 64)).unwrap(),
        );
        params.insert(
            "w".to_string(),
            Tensor::new(vec![2, 1, 3, 3, 3], rand_vec(&mut rng, 54)).unwrap(),
        );
        params.insert("b".to_string(), Tensor::new(vec![2], rand_vec(&mut rng, 2)).unwrap());
        let coeffs = rand_vec(&mut rng, 2 * 64);
        let f: Box<LossFn> = Box::new(move |p, want| {
            let mut tape = Tape::new();
            let mut ids = IndexMap::new();
            for (n, t) in p {
                ids.insert(n.clone(), tape.leaf(t.clone(), true));
            }
            let y = tape.conv3d(ids["x"], ids["w"], ids["b"])?;
            let a = tape.leaky_relu(y, 0.01);
            let loss = tape.dot(a, coeffs.clone())?;
            let l = tape.value(loss).item()?;
            if want {
                tape.backward(loss)?;
                let g = ids
                    .iter()
                    .map(|(n, &id)| (n.clone(), tape.grad(id).unwrap().to_vec()))
                    .collect();
                Ok((l, Some(g)))
            } else {
                Ok((l, None))
            }
        });
        let entry = finite_diff_check("conv_leaky", &params, &f, 16, 77).unwrap();
        assert!(entry.max_rel_err < 1e-4, "rel err {}", entry.max_rel_err);
    }
}
