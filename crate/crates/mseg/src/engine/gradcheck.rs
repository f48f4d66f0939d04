//! Finite-difference verification of the backward rules.
//!
//! Central differences with step `h = 1e-5`, run in double precision so the
//! comparison is limited by truncation error rather than rounding. Entries
//! where both the analytic and numeric gradients are below 1e-6 in magnitude
//! are compared at that absolute scale instead of relatively.
//!
//! LeakyReLU makes the loss piecewise smooth: a perturbation (a bias moves
//! every preactivation of its channel) often straddles a kink, which
//! contaminates the difference quotient by O(h) no matter how small the
//! step. Entries that look suspicious at the primary step are therefore
//! re-probed at h/10 and 10h and the best agreement is reported; kink and
//! truncation artifacts vanish at a different step, real backward bugs
//! don't.

use super::tape::Tape;
use super::tensor::Tensor;
use crate::data::LabelVolume;
use crate::error::Result;
use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
const REL_FLOOR: f64 = 1e-6;

/// Loss (and, on request, analytic gradients) at a parameter point.
pub type LossFn<'a> =
    dyn Fn(&IndexMap<String, Tensor<f64>>, bool) -> Result<(f64, Option<IndexMap<String, Vec<f64>>>)>
        + 'a;

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err() < tol
    }
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let d = (analytic - numeric).abs();
    if d == 0.0 {
        return 0.0;
    }
    d / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares analytic gradients against central differences at up to
/// `samples` entries per parameter tensor.
pub fn finite_diff_check(
    name: &str,
    params: &IndexMap<String, Tensor<f64>>,
    f: &LossFn,
    samples: usize,
    seed: u64,
) -> Result<GradCheckEntry> {
    let (_, analytic) = f(params, true)?;
    let analytic = analytic.expect("loss fn must return gradients when asked");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut working = params.clone();
    let mut worst = 0.0f64;
    for (pname, tensor) in params {
        let n = tensor.numel();
        if n == 0 {
            continue;
        }
        let indices: Vec<usize> = if n <= samples {
            (0..n).collect()
        } else {
            // always probe the first entry, then sample the rest
            std::iter::once(0)
                .chain((1..samples).map(|_| rng.gen_range(0..n)))
                .collect()
        };
        let a_grad = &analytic[pname];
        for idx in indices {
            let orig = tensor.data()[idx];
            let mut best = f64::MAX;
            // primary step first; a suspicious entry is re-probed at the
            // fallback steps, since truncation error and piecewise-linear
            // kink contamination shrink with a different h while a genuine
            // backward bug persists at every step
            for &h in &[FD_STEP, FD_STEP * 0.1, FD_STEP * 10.0] {
                working[pname].data_mut()[idx] = orig + h;
                let (lp, _) = f(&working, false)?;
                working[pname].data_mut()[idx] = orig - h;
                let (lm, _) = f(&working, false)?;
                working[pname].data_mut()[idx] = orig;
                let numeric = (lp - lm) / (2.0 * h);
                best = best.min(rel_err(a_grad[idx], numeric));
                if best < 1e-5 {
                    break;
                }
            }
            worst = worst.max(best);
        }
    }
    Ok(GradCheckEntry {
        name: name.to_string(),
        max_rel_err: worst,
    })
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape, data).unwrap()
}

/// Random values bounded away from the LeakyReLU kink so finite differences
/// never straddle it.
fn random_tensor_off_kink(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let mag = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

fn random_coeffs(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn collect_grads(
    tape: &Tape<f64>,
    ids: &IndexMap<String, super::tape::TensorId>,
) -> IndexMap<String, Vec<f64>> {
    ids.iter()
        .map(|(n, &id)| {
            let g = tape
                .grad(id)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; tape.value(id).numel()]);
            (n.clone(), g)
        })
        .collect()
}

struct Family {
    name: &'static str,
    params: IndexMap<String, Tensor<f64>>,
    f: Box<LossFn<'static>>,
}

fn families(size: usize, seed: u64) -> Vec<Family> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size;
    let mut out = Vec::new();

    // conv3d: project the output with fixed random coefficients
    {
        let mut params = IndexMap::new();
        params.insert("input".into(), random_tensor(&mut rng, vec![2, s, s, s]));
        params.insert("weight".into(), random_tensor(&mut rng, vec![3, 2, 3, 3, 3]));
        params.insert("bias".into(), random_tensor(&mut rng, vec![3]));
        let coeffs = random_coeffs(&mut rng, 3 * s * s * s);
        out.push(Family {
            name: "conv3d",
            params,
            f: Box::new(move |p, want_grads| {
                let mut tape = Tape::new();
                let mut ids = IndexMap::new();
                for (n, t) in p {
                    ids.insert(n.clone(), tape.leaf(t.clone(), true));
                }
                let y = tape.conv3d(ids["input"], ids["weight"], ids["bias"])?;
                let loss = tape.dot(y, coeffs.clone())?;
                let l = tape.value(loss).item()?;
                if want_grads {
                    tape.backward(loss)?;
                    Ok((l, Some(collect_grads(&tape, &ids))))
                } else {
                    Ok((l, None))
                }
            }),
        });
    }

    // leaky_relu, inputs held off the kink
    {
        let mut params = IndexMap::new();
        params.insert(
            "input".into(),
            random_tensor_off_kink(&mut rng, vec![2, s, s, s]),
        );
        let coeffs = random_coeffs(&mut rng, 2 * s * s * s);
        out.push(Family {
            name: "leaky_relu",
            params,
            f: Box::new(move |p, want_grads| {
                let mut tape = Tape::new();
                let mut ids = IndexMap::new();
                ids.insert("input".to_string(), tape.leaf(p["input"].clone(), true));
                let y = tape.leaky_relu(ids["input"], 0.01);
                let loss = tape.dot(y, coeffs.clone())?;
                let l = tape.value(loss).item()?;
                if want_grads {
                    tape.backward(loss)?;
                    Ok((l, Some(collect_grads(&tape, &ids))))
                } else {
                    Ok((l, None))
                }
            }),
        });
    }

    // max_pool3d: continuous random inputs, ties have probability zero
    {
        let mut params = IndexMap::new();
        params.insert("input".into(), random_tensor(&mut rng, vec![2, s, s, s]));
        let n_out = 2 * (s / 2) * (s / 2) * (s / 2);
        let coeffs = random_coeffs(&mut rng, n_out);
        out.push(Family {
            name: "max_pool3d",
            params,
            f: Box::new(move |p, want_grads| {
                let mut tape = Tape::new();
                let mut ids = IndexMap::new();
                ids.insert("input".to_string(), tape.leaf(p["input"].clone(), true));
                let y = tape.max_pool3d(ids["input"])?;
                let loss = tape.dot(y, coeffs.clone())?;
                let l = tape.value(loss).item()?;
                if want_grads {
                    tape.backward(loss)?;
                    Ok((l, Some(collect_grads(&tape, &ids))))
                } else {
                    Ok((l, None))
                }
            }),
        });
    }

    // upsample_nearest
    {
        let mut params = IndexMap::new();
        params.insert("input".into(), random_tensor(&mut rng, vec![2, s, s, s]));
        let coeffs = random_coeffs(&mut rng, 2 * 8 * s * s * s);
        out.push(Family {
            name: "upsample_nearest",
            params,
            f: Box::new(move |p, want_grads| {
                let mut tape = Tape::new();
                let mut ids = IndexMap::new();
                ids.insert("input".to_string(), tape.leaf(p["input"].clone(), true));
                let y = tape.upsample_nearest(ids["input"])?;
                let loss = tape.dot(y, coeffs.clone())?;
                let l = tape.value(loss).item()?;
                if want_grads {
                    tape.backward(loss)?;
                    Ok((l, Some(collect_grads(&tape, &ids))))
                } else {
                    Ok((l, None))
                }
            }),
        });
    }

    // concat_channels
    {
        let mut params = IndexMap::new();
        params.insert("a".into(), random_tensor(&mut rng, vec![1, s, s, s]));
        params.insert("b".into(), random_tensor(&mut rng, vec![3, s, s, s]));
        let coeffs = random_coeffs(&mut rng, 4 * s * s * s);
        out.push(Family {
            name: "concat_channels",
            params,
            f: Box::new(move |p, want_grads| {
                let mut tape = Tape::new();
                let mut ids = IndexMap::new();
                ids.insert("a".to_string(), tape.leaf(p["a"].clone(), true));
                ids.insert("b".to_string(), tape.leaf(p["b"].clone(), true));
                let y = tape.concat_channels(ids["a"], ids["b"])?;
                let loss = tape.dot(y, coeffs.clone())?;
                let l = tape.value(loss).item()?;
                if want_grads {
                    tape.backward(loss)?;
                    Ok((l, Some(collect_grads(&tape, &ids))))
                } else {
                    Ok((l, None))
                }
            }),
        });
    }

    // softmax_channels
    {
        let mut params = IndexMap::new();
        params.insert("logits".into(), random_tensor(&mut rng, vec![4, s, s, s]));
        let coeffs = random_coeffs(&mut rng, 4 * s * s * s);
        out.push(Family {
            name: "softmax_channels",
            params,
            f: Box::new(move |p, want_grads| {
                let mut tape = Tape::new();
                let mut ids = IndexMap::new();
                ids.insert("logits".to_string(), tape.leaf(p["logits"].clone(), true));
                let y = tape.softmax_channels(ids["logits"])?;
                let loss = tape.dot(y, coeffs.clone())?;
                let l = tape.value(loss).item()?;
                if want_grads {
                    tape.backward(loss)?;
                    Ok((l, Some(collect_grads(&tape, &ids))))
                } else {
                    Ok((l, None))
                }
            }),
        });
    }

    // softmax + cross-entropy against a random target
    {
        let mut params = IndexMap::new();
        params.insert("logits".into(), random_tensor(&mut rng, vec![4, s, s, s]));
        let target = LabelVolume {
            dims: [s, s, s],
            data: (0..s * s * s).map(|_| rng.gen_range(0..4u16)).collect(),
            num_classes: 4,
        };
        out.push(Family {
            name: "cross_entropy",
            params,
            f: Box::new(move |p, want_grads| {
                let mut tape = Tape::new();
                let mut ids = IndexMap::new();
                ids.insert("logits".to_string(), tape.leaf(p["logits"].clone(), true));
                let prob = tape.softmax_channels(ids["logits"])?;
                let loss = tape.cross_entropy(prob, &target)?;
                let l = tape.value(loss).item()?;
                if want_grads {
                    tape.backward(loss)?;
                    Ok((l, Some(collect_grads(&tape, &ids))))
                } else {
                    Ok((l, None))
                }
            }),
        });
    }

    // composite chain exercising op composition and fan-out
    {
        let mut params = IndexMap::new();
        params.insert("input".into(), random_tensor(&mut rng, vec![1, s, s, s]));
        params.insert("w0".into(), random_tensor(&mut rng, vec![2, 1, 3, 3, 3]));
        params.insert("b0".into(), random_tensor(&mut rng, vec![2]));
        params.insert("w1".into(), random_tensor(&mut rng, vec![2, 4, 3, 3, 3]));
        params.insert("b1".into(), random_tensor(&mut rng, vec![2]));
        let coeffs = random_coeffs(&mut rng, 2 * s * s * s);
        out.push(Family {
            name: "composite_chain",
            params,
            f: Box::new(move |p, want_grads| {
                let mut tape = Tape::new();
                let mut ids = IndexMap::new();
                for (n, t) in p {
                    ids.insert(n.clone(), tape.leaf(t.clone(), true));
                }
                let c0 = tape.conv3d(ids["input"], ids["w0"], ids["b0"])?;
                let a0 = tape.leaky_relu(c0, 0.01);
                let down = tape.max_pool3d(a0)?;
                let up = tape.upsample_nearest(down)?;
                let skip = tape.concat_channels(a0, up)?; // fan-out on a0
                let c1 = tape.conv3d(skip, ids["w1"], ids["b1"])?;
                let loss = tape.dot(c1, coeffs.clone())?;
                let l = tape.value(loss).item()?;
                if want_grads {
                    tape.backward(loss)?;
                    Ok((l, Some(collect_grads(&tape, &ids))))
                } else {
                    Ok((l, None))
                }
            }),
        });
    }

    out
}

/// Finite-difference check over every engine op family.
///
/// With `inject_fault` set, the first family's analytic gradient is
/// deliberately corrupted; the suite must then report a failure.
pub fn op_family_suite(size: usize, seed: u64, inject_fault: bool) -> Result<GradCheckReport> {
    let mut report = GradCheckReport::default();
    for (i, fam) in families(size, seed).into_iter().enumerate() {
        let entry = if inject_fault && i == 0 {
            let corrupted: Box<LossFn> = Box::new(move |p, want_grads| {
                let (l, grads) = (fam.f)(p, want_grads)?;
                let grads = grads.map(|mut g| {
                    if let Some((_, v)) = g.first_mut() {
                        if !v.is_empty() {
                            v[0] += 1.0;
                        }
                    }
                    g
                });
                Ok((l, grads))
            });
            finite_diff_check(fam.name, &fam.params, &corrupted, 16, seed ^ i as u64)?
        } else {
            finite_diff_check(fam.name, &fam.params, &fam.f, 16, seed ^ i as u64)?
        };
        report.entries.push(entry);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_op_is_exact() {
        // loss = sum(c * x) has constant gradient; central differences are
        // exact for linear maps up to rounding
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = IndexMap::new();
        params.insert("x".into(), random_tensor(&mut rng, vec![2, 4, 4, 4]));
        let coeffs = random_coeffs(&mut rng, 2 * 64);
        let f: Box<LossFn> = Box::new(move |p, want_grads| {
            let mut tape = Tape::new();
            let x = tape.leaf(p["x"].clone(), true);
            let loss = tape.dot(x, coeffs.clone())?;
            let l = tape.value(loss).item()?;
            if want_grads {
                tape.backward(loss)?;
                let mut g = IndexMap::new();
                g.insert("x".to_string(), tape.grad(x).unwrap().to_vec());
                Ok((l, Some(g)))
            } else {
                Ok((l, None))
            }
        });
        let entry = finite_diff_check("linear", &params, &f, 16, 9).unwrap();
        assert!(entry.max_rel_err < 1e-8, "rel err {}", entry.max_rel_err);
    }

    #[test]
    fn all_op_families_pass() {
        let report = op_family_suite(4, 11, false).unwrap();
        assert_eq!(report.entries.len(), 8);
        assert!(
            report.passed(1e-4),
            "max rel err {:.3e}",
            report.max_rel_err()
        );
    }

    #[test]
    fn corrupted_backward_rule_is_reported() {
        let report = op_family_suite(4, 11, true).unwrap();
        assert!(!report.passed(1e-4));
    }
}
