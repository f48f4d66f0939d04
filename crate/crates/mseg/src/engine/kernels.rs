//! Voxel kernels behind the tape operators.
//!
//! Everything here runs single-threaded with a fixed accumulation order, so
//! results are bit-reproducible run to run. Inner loops are written over
//! contiguous W-rows so the compiler can vectorize them.
//!
//! Layouts: activations `[C, D, H, W]` with W fastest; convolution weights
//! `[C_out, C_in, k, k, k]`.

use super::tensor::Scalar;

/// Probabilities below this are clamped before `log` in the cross-entropy.
pub const LOG_CLAMP: f64 = 1e-12;

/// Valid output range along one axis for a kernel tap with offset `off`.
#[inline]
fn tap_range(extent: usize, off: isize) -> (usize, usize) {
    let lo = if off < 0 { (-off) as usize } else { 0 };
    let hi = if off > 0 {
        extent.saturating_sub(off as usize)
    } else {
        extent
    };
    (lo, hi.max(lo))
}

/// Fixed-order vectorizable reduction: sixteen interleaved partial sums of
/// `a[i] * b[i]`, combined in a fixed order.
#[inline(never)]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 16];
    let mut ca = a.chunks_exact(16);
    let mut cb = b.chunks_exact(16);
    for (xa, xb) in ca.by_ref().zip(cb.by_ref()) {
        for l in 0..16 {
            acc[l] = xa[l].mul_add(xb[l], acc[l]);
        }
    }
    let mut s = T::zero();
    for l in 0..16 {
        s += acc[l];
    }
    for (&xa, &xb) in ca.remainder().iter().zip(cb.remainder()) {
        s = xa.mul_add(xb, s);
    }
    s
}

#[inline]
fn sum<T: Scalar>(a: &[T]) -> T {
    let mut acc = [T::zero(); 16];
    let mut ca = a.chunks_exact(16);
    for xa in ca.by_ref() {
        for l in 0..16 {
            acc[l] += xa[l];
        }
    }
    let mut s = T::zero();
    for l in 0..16 {
        s += acc[l];
    }
    for &xa in ca.remainder() {
        s += xa;
    }
    s
}

/// `dst[i] = src[i] * a + dst[i]`, written so the loop compiles to vector FMA.
/// Kept out-of-line: inlined into the deep conv loop nests the vectorizer
/// gives up on it and emits scalar code.
#[inline(never)]
fn axpy<T: Scalar>(a: T, src: &[T], dst: &mut [T]) {
    debug_assert_eq!(src.len(), dst.len());
    for (o, &i) in dst.iter_mut().zip(src) {
        *o = i.mul_add(a, *o);
    }
}

/// Fused three-tap row reduction for the weight gradient: returns
/// `(sum g[x]*i[x-1], sum g[x]*i[x], sum g[x]*i[x+1])` over the valid ranges.
/// One pass shares the `g` loads across all three taps and pays the
/// horizontal reduction once instead of three times per row.
#[inline(never)]
fn dot3<T: Scalar>(g: &[T], i: &[T]) -> (T, T, T) {
    let n = g.len();
    debug_assert_eq!(i.len(), n);
    if n == 1 {
        return (T::zero(), g[0] * i[0], T::zero());
    }
    let mut a0 = [T::zero(); 8];
    let mut a1 = [T::zero(); 8];
    let mut a2 = [T::zero(); 8];
    let m = n - 2;
    let mut cg = g[1..n - 1].chunks_exact(8);
    let mut c0 = i[..m].chunks_exact(8);
    let mut c1 = i[1..n - 1].chunks_exact(8);
    let mut c2 = i[2..].chunks_exact(8);
    for (((xg, x0), x1), x2) in cg.by_ref().zip(c0.by_ref()).zip(c1.by_ref()).zip(c2.by_ref()) {
        for l in 0..8 {
            a0[l] = xg[l].mul_add(x0[l], a0[l]);
            a1[l] = xg[l].mul_add(x1[l], a1[l]);
            a2[l] = xg[l].mul_add(x2[l], a2[l]);
        }
    }
    let (mut t0, mut t1, mut t2) = (T::zero(), T::zero(), T::zero());
    for l in 0..8 {
        t0 += a0[l];
        t1 += a1[l];
        t2 += a2[l];
    }
    for (((&xg, &x0), &x1), &x2) in cg
        .remainder()
        .iter()
        .zip(c0.remainder())
        .zip(c1.remainder())
        .zip(c2.remainder())
    {
        t0 = xg.mul_add(x0, t0);
        t1 = xg.mul_add(x1, t1);
        t2 = xg.mul_add(x2, t2);
    }
    t0 = g[n - 1].mul_add(i[n - 2], t0);
    t1 = g[0].mul_add(i[0], t1);
    t1 = g[n - 1].mul_add(i[n - 1], t1);
    t2 = g[0].mul_add(i[1], t2);
    (t0, t1, t2)
}

/// Fused three-tap row update: `dst[x] += w0*src[x-1] + w1*src[x] + w2*src[x+1]`
/// with zero padding, taps applied in that order per element. Tripling the
/// FMAs per dst load/store is what lifts the conv kernels off the load/store
/// port ceiling a plain axpy hits.
#[inline(never)]
fn conv_row3<T: Scalar>(w0: T, w1: T, w2: T, src: &[T], dst: &mut [T]) {
    let n = dst.len();
    debug_assert_eq!(src.len(), n);
    if n == 1 {
        dst[0] = src[0].mul_add(w1, dst[0]);
        return;
    }
    let e = src[0].mul_add(w1, dst[0]);
    dst[0] = src[1].mul_add(w2, e);
    let m = n - 2;
    {
        let (inner, s0, s1, s2) = (&mut dst[1..n - 1], &src[..m], &src[1..n - 1], &src[2..]);
        for (((o, &a), &b), &c) in inner.iter_mut().zip(s0).zip(s1).zip(s2) {
            let mut v = *o;
            v = a.mul_add(w0, v);
            v = b.mul_add(w1, v);
            v = c.mul_add(w2, v);
            *o = v;
        }
    }
    let e = src[n - 2].mul_add(w0, dst[n - 1]);
    dst[n - 1] = src[n - 1].mul_add(w1, e);
}

/// out[co] = bias[co] + sum_ci input[ci] * weight[co,ci] (cross-correlation,
/// zero padding, same spatial size).
pub fn conv3d_forward<T: Scalar>(
    input: &[T],
    c_in: usize,
    dims: [usize; 3],
    weight: &[T],
    c_out: usize,
    k: usize,
    bias: &[T],
    out: &mut [T],
) {
    let [d, h, w] = dims;
    let dhw = d * h * w;
    let k3 = k * k * k;
    let pad = (k / 2) as isize;
    // One output row is accumulated in an L1-resident buffer across every
    // input channel and kernel tap, then stored once; per-voxel accumulation
    // order is ci, then kd, kh, kw.
    let mut row = vec![T::zero(); w];
    for co in 0..c_out {
        let w_co = &weight[co * c_in * k3..][..c_in * k3];
        for od in 0..d {
            for oh in 0..h {
                row.fill(bias[co]);
                for ci in 0..c_in {
                    let in_c = &input[ci * dhw..(ci + 1) * dhw];
                    let w_ci = &w_co[ci * k3..][..k3];
                    for kd in 0..k {
                        let id = od as isize + kd as isize - pad;
                        if id < 0 || id >= d as isize {
                            continue;
                        }
                        for kh in 0..k {
                            let ih = oh as isize + kh as isize - pad;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let irow = &in_c[(id as usize * h + ih as usize) * w..][..w];
                            let wt = &w_ci[(kd * k + kh) * k..][..k];
                            if k == 3 {
                                conv_row3(wt[0], wt[1], wt[2], irow, &mut row);
                            } else {
                                for (kw, &wv) in wt.iter().enumerate() {
                                    let dx = kw as isize - pad;
                                    let (ow0, ow1) = tap_range(w, dx);
                                    if ow1 <= ow0 {
                                        continue;
                                    }
                                    axpy(
                                        wv,
                                        &irow[(ow0 as isize + dx) as usize..][..ow1 - ow0],
                                        &mut row[ow0..ow1],
                                    );
                                }
                            }
                        }
                    }
                }
                out[(co * d + od) * h * w + oh * w..][..w].copy_from_slice(&row);
            }
        }
    }
}

/// Accumulates d(loss)/d(input) given d(loss)/d(out).
pub fn conv3d_backward_input<T: Scalar>(
    grad_out: &[T],
    c_in: usize,
    dims: [usize; 3],
    weight: &[T],
    c_out: usize,
    k: usize,
    grad_in: &mut [T],
) {
    let [d, h, w] = dims;
    let dhw = d * h * w;
    let k3 = k * k * k;
    let pad = (k / 2) as isize;
    // grad_in[ci, o + off] += w[co,ci,tap] * grad_out[co, o]: one input-grad
    // row gathered in an L1-resident buffer across every output channel and
    // tap, then added to grad_in once; per-voxel order is co, then kd, kh, kw.
    let mut row = vec![T::zero(); w];
    for ci in 0..c_in {
        let gin_c = &mut grad_in[ci * dhw..(ci + 1) * dhw];
        for id in 0..d {
            for ih in 0..h {
                row.fill(T::zero());
                for co in 0..c_out {
                    let gout_c = &grad_out[co * dhw..(co + 1) * dhw];
                    let w_ci = &weight[(co * c_in + ci) * k3..][..k3];
                    for kd in 0..k {
                        let od = id as isize - (kd as isize - pad);
                        if od < 0 || od >= d as isize {
                            continue;
                        }
                        for kh in 0..k {
                            let oh = ih as isize - (kh as isize - pad);
                            if oh < 0 || oh >= h as isize {
                                continue;
                            }
                            let orow = &gout_c[(od as usize * h + oh as usize) * w..][..w];
                            let wt = &w_ci[(kd * k + kh) * k..][..k];
                            if k == 3 {
                                // the transposed taps: row[x] gathers
                                // orow[x+1], orow[x], orow[x-1]
                                conv_row3(wt[2], wt[1], wt[0], orow, &mut row);
                            } else {
                                for (kw, &wv) in wt.iter().enumerate() {
                                    let dx = kw as isize - pad;
                                    let (ow0, ow1) = tap_range(w, dx);
                                    if ow1 <= ow0 {
                                        continue;
                                    }
                                    axpy(
                                        wv,
                                        &orow[ow0..ow1],
                                        &mut row[(ow0 as isize + dx) as usize..][..ow1 - ow0],
                                    );
                                }
                            }
                        }
                    }
                }
                let grow = &mut gin_c[(id * h + ih) * w..][..w];
                for (g, &r) in grow.iter_mut().zip(&row) {
                    *g += r;
                }
            }
        }
    }
}

/// Accumulates d(loss)/d(weight) and d(loss)/d(bias).
pub fn conv3d_backward_weight<T: Scalar>(
    grad_out: &[T],
    input: &[T],
    c_in: usize,
    dims: [usize; 3],
    c_out: usize,
    k: usize,
    grad_weight: &mut [T],
    grad_bias: &mut [T],
) {
    let [d, h, w] = dims;
    let dhw = d * h * w;
    let k3 = k * k * k;
    let pad = (k / 2) as isize;
    // Both volumes are swept once per (co, ci) pair with all k^3 tap
    // accumulators carried alongside; each tap still sums its row dots in
    // (od, oh) order.
    let mut acc = vec![T::zero(); k3];
    for co in 0..c_out {
        let gout_c = &grad_out[co * dhw..(co + 1) * dhw];
        grad_bias[co] += sum(gout_c);
        for ci in 0..c_in {
            let in_c = &input[ci * dhw..(ci + 1) * dhw];
            acc.fill(T::zero());
            for od in 0..d {
                for oh in 0..h {
                    let orow_full = &gout_c[(od * h + oh) * w..][..w];
                    for kd in 0..k {
                        let id = od as isize + kd as isize - pad;
                        if id < 0 || id >= d as isize {
                            continue;
                        }
                        for kh in 0..k {
                            let ih = oh as isize + kh as isize - pad;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let irow = &in_c[(id as usize * h + ih as usize) * w..][..w];
                            if k == 3 {
                                let (t0, t1, t2) = dot3(orow_full, irow);
                                let a = &mut acc[(kd * 3 + kh) * 3..][..3];
                                a[0] += t0;
                                a[1] += t1;
                                a[2] += t2;
                            } else {
                                for kw in 0..k {
                                    let dx = kw as isize - pad;
                                    let (ow0, ow1) = tap_range(w, dx);
                                    if ow1 <= ow0 {
                                        continue;
                                    }
                                    acc[(kd * k + kh) * k + kw] += dot(
                                        &orow_full[ow0..ow1],
                                        &irow[(ow0 as isize + dx) as usize..][..ow1 - ow0],
                                    );
                                }
                            }
                        }
                    }
                }
            }
            let gw = &mut grad_weight[(co * c_in + ci) * k3..][..k3];
            for (g, &a) in gw.iter_mut().zip(&acc) {
                *g += a;
            }
        }
    }
}

pub fn leaky_relu_forward<T: Scalar>(input: &[T], slope: T, out: &mut [T]) {
    for (o, &x) in out.iter_mut().zip(input) {
        *o = if x > T::zero() { x } else { slope * x };
    }
}

pub fn leaky_relu_backward<T: Scalar>(grad_out: &[T], input: &[T], slope: T, grad_in: &mut [T]) {
    for ((g, &go), &x) in grad_in.iter_mut().zip(grad_out).zip(input) {
        *g += if x > T::zero() { go } else { slope * go };
    }
}

/// Max over disjoint 2x2x2 windows. `argmax` records, per output voxel, the
/// flat input index of the chosen voxel; ties go to the first maximum in
/// D-then-H-then-W scan order.
pub fn max_pool_forward<T: Scalar>(
    input: &[T],
    c: usize,
    dims: [usize; 3],
    out: &mut [T],
    argmax: &mut Vec<u32>,
) {
    let [d, h, w] = dims;
    let (d2, h2, w2) = (d / 2, h / 2, w / 2);
    argmax.clear();
    argmax.reserve(c * d2 * h2 * w2);
    let mut o = 0;
    for ci in 0..c {
        let base_c = ci * d * h * w;
        for od in 0..d2 {
            for oh in 0..h2 {
                for ow in 0..w2 {
                    let mut best = T::neg_infinity();
                    let mut best_idx = 0u32;
                    for zd in 0..2 {
                        for zh in 0..2 {
                            for zw in 0..2 {
                                let idx = base_c
                                    + ((od * 2 + zd) * h + (oh * 2 + zh)) * w
                                    + (ow * 2 + zw);
                                let v = input[idx];
                                if v > best {
                                    best = v;
                                    best_idx = idx as u32;
                                }
                            }
                        }
                    }
                    out[o] = best;
                    argmax.push(best_idx);
                    o += 1;
                }
            }
        }
    }
}

pub fn max_pool_backward<T: Scalar>(grad_out: &[T], argmax: &[u32], grad_in: &mut [T]) {
    for (&g, &idx) in grad_out.iter().zip(argmax) {
        grad_in[idx as usize] += g;
    }
}

/// Each voxel replicated into a 2x2x2 block.
pub fn upsample_forward<T: Scalar>(input: &[T], c: usize, dims: [usize; 3], out: &mut [T]) {
    let [d, h, w] = dims;
    let (d2, h2, w2) = (d * 2, h * 2, w * 2);
    for ci in 0..c {
        let in_c = &input[ci * d * h * w..];
        let out_c = &mut out[ci * d2 * h2 * w2..(ci + 1) * d2 * h2 * w2];
        for od in 0..d2 {
            for oh in 0..h2 {
                let irow = &in_c[(od / 2 * h + oh / 2) * w..][..w];
                let orow = &mut out_c[(od * h2 + oh) * w2..][..w2];
                for (ow, o) in orow.iter_mut().enumerate() {
                    *o = irow[ow / 2];
                }
            }
        }
    }
}

pub fn upsample_backward<T: Scalar>(grad_out: &[T], c: usize, dims: [usize; 3], grad_in: &mut [T]) {
    let [d, h, w] = dims;
    let (d2, h2, w2) = (d * 2, h * 2, w * 2);
    for ci in 0..c {
        let gout_c = &grad_out[ci * d2 * h2 * w2..];
        let gin_c = &mut grad_in[ci * d * h * w..(ci + 1) * d * h * w];
        for id in 0..d {
            for ih in 0..h {
                let grow = &mut gin_c[(id * h + ih) * w..][..w];
                // children visited in fixed (zd, zh, zw) order
                for zd in 0..2 {
                    for zh in 0..2 {
                        let orow = &gout_c[((id * 2 + zd) * h2 + (ih * 2 + zh)) * w2..][..w2];
                        for (iw, g) in grow.iter_mut().enumerate() {
                            *g += orow[iw * 2] + orow[iw * 2 + 1];
                        }
                    }
                }
            }
        }
    }
}

/// Per-voxel softmax over the channel axis, max-subtracted for stability.
pub fn softmax_forward<T: Scalar>(logits: &[T], c: usize, dhw: usize, out: &mut [T]) {
    for v in 0..dhw {
        let mut m = logits[v];
        for ci in 1..c {
            let x = logits[ci * dhw + v];
            if x > m {
                m = x;
            }
        }
        let mut z = T::zero();
        for ci in 0..c {
            let e = (logits[ci * dhw + v] - m).exp();
            out[ci * dhw + v] = e;
            z += e;
        }
        for ci in 0..c {
            out[ci * dhw + v] /= z;
        }
    }
}

pub fn softmax_backward<T: Scalar>(
    grad_out: &[T],
    prob: &[T],
    c: usize,
    dhw: usize,
    grad_in: &mut [T],
) {
    for v in 0..dhw {
        let mut inner = T::zero();
        for ci in 0..c {
            inner += grad_out[ci * dhw + v] * prob[ci * dhw + v];
        }
        for ci in 0..c {
            let i = ci * dhw + v;
            grad_in[i] += prob[i] * (grad_out[i] - inner);
        }
    }
}

/// Mean over voxels of -log(prob at the target class), log-clamped at
/// [`LOG_CLAMP`].
pub fn cross_entropy_forward<T: Scalar>(prob: &[T], target: &[u16], dhw: usize) -> T {
    let clamp = T::from_f64(LOG_CLAMP);
    let mut acc = T::zero();
    for (v, &t) in target.iter().enumerate() {
        let p = prob[t as usize * dhw + v];
        let p = if p > clamp { p } else { clamp };
        acc -= p.ln();
    }
    acc / T::from_f64(dhw as f64)
}

pub fn cross_entropy_backward<T: Scalar>(
    grad_loss: T,
    prob: &[T],
    target: &[u16],
    dhw: usize,
    grad_prob: &mut [T],
) {
    let clamp = T::from_f64(LOG_CLAMP);
    let scale = grad_loss / T::from_f64(dhw as f64);
    for (v, &t) in target.iter().enumerate() {
        let i = t as usize * dhw + v;
        let p = prob[i];
        // below the clamp the loss is locally constant in p
        if p > clamp {
            grad_prob[i] -= scale / p;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tap_range_clips_both_sides() {
        assert_eq!(tap_range(5, 0), (0, 5));
        assert_eq!(tap_range(5, -1), (1, 5));
        assert_eq!(tap_range(5, 2), (0, 3));
        assert_eq!(tap_range(1, 2), (0, 0));
    }

    #[test]
    fn dot_matches_naive() {
        let a: Vec<f64> = (0..37).map(|i| (i as f64) * 0.31 - 4.0).collect();
        let b: Vec<f64> = (0..37).map(|i| (i as f64) * -0.17 + 1.0).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-12);
    }

    #[test]
    fn single_voxel_conv_is_a_linear_map() {
        let mut out = vec![0.0f32];
        conv3d_forward(&[2.0], 1, [1, 1, 1], &[3.0], 1, 1, &[1.0], &mut out);
        assert_eq!(out, vec![7.0]);
    }

    #[test]
    fn zero_input_conv_outputs_bias() {
        let input = vec![0.0f32; 2 * 27];
        let weight = vec![0.5f32; 3 * 2 * 27];
        let bias = vec![1.0, -2.0, 0.25];
        let mut out = vec![0.0f32; 3 * 27];
        conv3d_forward(&input, 2, [3, 3, 3], &weight, 3, 3, &bias, &mut out);
        for co in 0..3 {
            assert!(out[co * 27..(co + 1) * 27].iter().all(|&v| v == bias[co]));
        }
    }
}
