//! Tape-based reverse-mode differentiation.
//!
//! The forward pass records one entry per operation; `backward` replays the
//! tape in reverse, accumulating gradients additively so fan-out is handled
//! by construction. One tape corresponds to one forward/backward pass; a
//! training step builds a fresh tape, reads the gradients it wants, and
//! drops it.

use super::kernels;
use super::tensor::{Scalar, Tensor};
use crate::data::LabelVolume;
use crate::error::{Error, Result};

/// Handle to a tensor recorded on a [`Tape`].
pub type TensorId = usize;

enum Record<T: Scalar> {
    Conv3d {
        input: TensorId,
        weight: TensorId,
        bias: TensorId,
        out: TensorId,
    },
    LeakyRelu {
        input: TensorId,
        slope: T,
        out: TensorId,
    },
    MaxPool {
        input: TensorId,
        argmax: Vec<u32>,
        out: TensorId,
    },
    Upsample {
        input: TensorId,
        out: TensorId,
    },
    Concat {
        a: TensorId,
        b: TensorId,
        out: TensorId,
    },
    Softmax {
        input: TensorId,
        out: TensorId,
    },
    CrossEntropy {
        prob: TensorId,
        target: Vec<u16>,
        out: TensorId,
    },
    Scale {
        input: TensorId,
        factor: T,
        out: TensorId,
    },
    Add {
        a: TensorId,
        b: TensorId,
        out: TensorId,
    },
    Sum {
        input: TensorId,
        out: TensorId,
    },
    /// Fixed-coefficient weighted sum, used by the gradient-check harness to
    /// project a tensor output to a scalar.
    Dot {
        input: TensorId,
        coeffs: Vec<T>,
        out: TensorId,
    },
}

pub struct Tape<T: Scalar> {
    values: Vec<Tensor<T>>,
    requires: Vec<bool>,
    grads: Vec<Option<Vec<T>>>,
    records: Vec<Record<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            requires: Vec::new(),
            grads: Vec::new(),
            records: Vec::new(),
        }
    }

    /// Registers an input tensor (parameter or data) on the tape.
    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> TensorId {
        self.push(t, requires_grad)
    }

    fn push(&mut self, t: Tensor<T>, requires_grad: bool) -> TensorId {
        self.values.push(t);
        self.requires.push(requires_grad);
        self.grads.push(None);
        self.values.len() - 1
    }

    pub fn value(&self, id: TensorId) -> &Tensor<T> {
        &self.values[id]
    }

    /// Gradient of the last `backward` target w.r.t. tensor `id`, if any.
    pub fn grad(&self, id: TensorId) -> Option<&[T]> {
        self.grads[id].as_deref()
    }

    fn check(&self, id: TensorId) -> Result<()> {
        if id >= self.values.len() {
            return Err(Error::ShapeMismatch(format!("tensor {id} not on tape")));
        }
        Ok(())
    }

    /// Same-size zero-padded 3D cross-correlation.
    pub fn conv3d(&mut self, input: TensorId, weight: TensorId, bias: TensorId) -> Result<TensorId> {
        self.check(input)?;
        self.check(weight)?;
        self.check(bias)?;
        let (c_in, dims) = self.values[input].chw()?;
        let wshape = self.values[weight].shape().to_vec();
        let (c_out, k) = match wshape[..] {
            [co, ci, k0, k1, k2] if k0 == k1 && k1 == k2 => {
                if ci != c_in {
                    return Err(Error::ShapeMismatch(format!(
                        "conv3d: weight expects {ci} input channels, input has {c_in}"
                    )));
                }
                (co, k0)
            }
            _ => {
                return Err(Error::ShapeMismatch(format!(
                    "conv3d: weight must be [C_out,C_in,k,k,k], got {wshape:?}"
                )))
            }
        };
        if k % 2 == 0 {
            return Err(Error::ShapeMismatch(format!(
                "conv3d: kernel size {k} must be odd"
            )));
        }
        if self.values[bias].shape() != [c_out] {
            return Err(Error::ShapeMismatch(format!(
                "conv3d: bias shape {:?} != [{c_out}]",
                self.values[bias].shape()
            )));
        }
        let mut out = Tensor::zeros(vec![c_out, dims[0], dims[1], dims[2]]);
        kernels::conv3d_forward(
            self.values[input].data(),
            c_in,
            dims,
            self.values[weight].data(),
            c_out,
            k,
            self.values[bias].data(),
            out.data_mut(),
        );
        let rg = self.requires[input] || self.requires[weight] || self.requires[bias];
        let id = self.push(out, rg);
        self.records.push(Record::Conv3d {
            input,
            weight,
            bias,
            out: id,
        });
        Ok(id)
    }

    pub fn leaky_relu(&mut self, input: TensorId, slope: T) -> TensorId {
        let mut out = Tensor::zeros(self.values[input].shape().to_vec());
        kernels::leaky_relu_forward(self.values[input].data(), slope, out.data_mut());
        let rg = self.requires[input];
        let id = self.push(out, rg);
        self.records.push(Record::LeakyRelu {
            input,
            slope,
            out: id,
        });
        id
    }

    pub fn max_pool3d(&mut self, input: TensorId) -> Result<TensorId> {
        let (c, dims) = self.values[input].chw()?;
        if dims.iter().any(|&e| e % 2 != 0) {
            return Err(Error::ShapeMismatch(format!(
                "max_pool3d: spatial extents {dims:?} must be even"
            )));
        }
        let mut out = Tensor::zeros(vec![c, dims[0] / 2, dims[1] / 2, dims[2] / 2]);
        let mut argmax = Vec::new();
        kernels::max_pool_forward(self.values[input].data(), c, dims, out.data_mut(), &mut argmax);
        let rg = self.requires[input];
        let id = self.push(out, rg);
        self.records.push(Record::MaxPool {
            input,
            argmax,
            out: id,
        });
        Ok(id)
    }

    pub fn upsample_nearest(&mut self, input: TensorId) -> Result<TensorId> {
        let (c, dims) = self.values[input].chw()?;
        let mut out = Tensor::zeros(vec![c, dims[0] * 2, dims[1] * 2, dims[2] * 2]);
        kernels::upsample_forward(self.values[input].data(), c, dims, out.data_mut());
        let rg = self.requires[input];
        let id = self.push(out, rg);
        self.records.push(Record::Upsample { input, out: id });
        Ok(id)
    }

    /// Channel stacking, `a` first.
    pub fn concat_channels(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ca, dims_a) = self.values[a].chw()?;
        let (cb, dims_b) = self.values[b].chw()?;
        if dims_a != dims_b {
            return Err(Error::ShapeMismatch(format!(
                "concat_channels: spatial extents differ, {dims_a:?} vs {dims_b:?}"
            )));
        }
        let mut data = Vec::with_capacity((ca + cb) * dims_a.iter().product::<usize>());
        data.extend_from_slice(self.values[a].data());
        data.extend_from_slice(self.values[b].data());
        let out = Tensor::new(vec![ca + cb, dims_a[0], dims_a[1], dims_a[2]], data)?;
        let rg = self.requires[a] || self.requires[b];
        let id = self.push(out, rg);
        self.records.push(Record::Concat { a, b, out: id });
        Ok(id)
    }

    pub fn softmax_channels(&mut self, input: TensorId) -> Result<TensorId> {
        let (c, dims) = self.values[input].chw()?;
        let dhw = dims.iter().product();
        let mut out = Tensor::zeros(vec![c, dims[0], dims[1], dims[2]]);
        kernels::softmax_forward(self.values[input].data(), c, dhw, out.data_mut());
        let rg = self.requires[input];
        let id = self.push(out, rg);
        self.records.push(Record::Softmax { input, out: id });
        Ok(id)
    }

    /// Mean over voxels of the negative log probability at the target class.
    pub fn cross_entropy(&mut self, prob: TensorId, target: &LabelVolume) -> Result<TensorId> {
        let (c, dims) = self.values[prob].chw()?;
        if dims != target.dims {
            return Err(Error::ShapeMismatch(format!(
                "cross_entropy: prob spatial {dims:?} vs target {:?}",
                target.dims
            )));
        }
        if let Some(&bad) = target.data.iter().find(|&&t| (t as usize) >= c) {
            return Err(Error::LabelOutOfRange {
                id: bad,
                classes: c,
            });
        }
        let dhw = dims.iter().product();
        let loss = kernels::cross_entropy_forward(self.values[prob].data(), &target.data, dhw);
        let rg = self.requires[prob];
        let id = self.push(Tensor::scalar(loss), rg);
        self.records.push(Record::CrossEntropy {
            prob,
            target: target.data.clone(),
            out: id,
        });
        Ok(id)
    }

    pub fn scale(&mut self, input: TensorId, factor: T) -> TensorId {
        let data = self.values[input].data().iter().map(|&v| v * factor).collect();
        let out = Tensor::new(self.values[input].shape().to_vec(), data).unwrap();
        let rg = self.requires[input];
        let id = self.push(out, rg);
        self.records.push(Record::Scale {
            input,
            factor,
            out: id,
        });
        id
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.values[a].shape() != self.values[b].shape() {
            return Err(Error::ShapeMismatch(format!(
                "add: {:?} vs {:?}",
                self.values[a].shape(),
                self.values[b].shape()
            )));
        }
        let data = self.values[a]
            .data()
            .iter()
            .zip(self.values[b].data())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor::new(self.values[a].shape().to_vec(), data)?;
        let rg = self.requires[a] || self.requires[b];
        let id = self.push(out, rg);
        self.records.push(Record::Add { a, b, out: id });
        Ok(id)
    }

    pub fn sum(&mut self, input: TensorId) -> TensorId {
        let mut acc = T::zero();
        for &v in self.values[input].data() {
            acc += v;
        }
        let rg = self.requires[input];
        let id = self.push(Tensor::scalar(acc), rg);
        self.records.push(Record::Sum { input, out: id });
        id
    }

    /// Scalar projection sum(coeffs * x) with constant coefficients.
    pub fn dot(&mut self, input: TensorId, coeffs: Vec<T>) -> Result<TensorId> {
        if coeffs.len() != self.values[input].numel() {
            return Err(Error::ShapeMismatch(format!(
                "dot: {} coefficients for {} elements",
                coeffs.len(),
                self.values[input].numel()
            )));
        }
        let mut acc = T::zero();
        for (&x, &c) in self.values[input].data().iter().zip(&coeffs) {
            acc += x * c;
        }
        let rg = self.requires[input];
        let id = self.push(Tensor::scalar(acc), rg);
        self.records.push(Record::Dot {
            input,
            coeffs,
            out: id,
        });
        Ok(id)
    }

    fn ensure_grad(&mut self, id: TensorId) {
        if self.requires[id] && self.grads[id].is_none() {
            self.grads[id] = Some(vec![T::zero(); self.values[id].numel()]);
        }
    }

    /// Populates gradients of every `requires_grad` tensor reachable from
    /// `loss`, accumulating additively across fan-out.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        self.check(loss)?;
        if !self.values[loss].is_scalar() {
            return Err(Error::NonScalarLoss(self.values[loss].shape().to_vec()));
        }
        self.grads[loss] = Some(vec![T::one()]);
        for i in (0..self.records.len()).rev() {
            let out = match &self.records[i] {
                Record::Conv3d { out, .. }
                | Record::LeakyRelu { out, .. }
                | Record::MaxPool { out, .. }
                | Record::Upsample { out, .. }
                | Record::Concat { out, .. }
                | Record::Softmax { out, .. }
                | Record::CrossEntropy { out, .. }
                | Record::Scale { out, .. }
                | Record::Add { out, .. }
                | Record::Sum { out, .. }
                | Record::Dot { out, .. } => *out,
            };
            // ops whose output never received a gradient contribute nothing
            let gout = match self.grads[out].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.records[i] {
                &Record::Conv3d {
                    input,
                    weight,
                    bias,
                    out: _,
                } => {
                    let (c_in, dims) = self.values[input].chw()?;
                    let c_out = self.values[weight].shape()[0];
                    let k = self.values[weight].shape()[2];
                    if self.requires[input] {
                        self.ensure_grad(input);
                        let mut g = self.grads[input].take().unwrap();
                        kernels::conv3d_backward_input(
                            &gout,
                            c_in,
                            dims,
                            self.values[weight].data(),
                            c_out,
                            k,
                            &mut g,
                        );
                        self.grads[input] = Some(g);
                    }
                    if self.requires[weight] || self.requires[bias] {
                        self.ensure_grad(weight);
                        self.ensure_grad(bias);
                        let mut gw = self.grads[weight].take().unwrap();
                        let mut gb = self.grads[bias].take().unwrap();
                        kernels::conv3d_backward_weight(
                            &gout,
                            self.values[input].data(),
                            c_in,
                            dims,
                            c_out,
                            k,
                            &mut gw,
                            &mut gb,
                        );
                        self.grads[weight] = Some(gw);
                        self.grads[bias] = Some(gb);
                    }
                }
                &Record::LeakyRelu {
                    input,
                    slope,
                    out: _,
                } => {
                    if self.requires[input] {
                        self.ensure_grad(input);
                        let mut g = self.grads[input].take().unwrap();
                        kernels::leaky_relu_backward(&gout, self.values[input].data(), slope, &mut g);
                        self.grads[input] = Some(g);
                    }
                }
                Record::MaxPool { input, argmax, .. } => {
                    let input = *input;
                    if self.requires[input] {
                        // inline ensure_grad: &mut self would alias the record borrow
                        if self.grads[input].is_none() {
                            self.grads[input] = Some(vec![T::zero(); self.values[input].numel()]);
                        }
                        let mut g = self.grads[input].take().unwrap();
                        kernels::max_pool_backward(&gout, argmax, &mut g);
                        self.grads[input] = Some(g);
                    }
                }
                &Record::Upsample { input, out: _ } => {
                    if self.requires[input] {
                        let (c, dims) = self.values[input].chw()?;
                        self.ensure_grad(input);
                        let mut g = self.grads[input].take().unwrap();
                        kernels::upsample_backward(&gout, c, dims, &mut g);
                        self.grads[input] = Some(g);
                    }
                }
                &Record::Concat { a, b, out: _ } => {
                    let na = self.values[a].numel();
                    if self.requires[a] {
                        self.ensure_grad(a);
                        let g = self.grads[a].as_mut().unwrap();
                        for (gi, &go) in g.iter_mut().zip(&gout[..na]) {
                            *gi += go;
                        }
                    }
                    if self.requires[b] {
                        self.ensure_grad(b);
                        let g = self.grads[b].as_mut().unwrap();
                        for (gi, &go) in g.iter_mut().zip(&gout[na..]) {
                            *gi += go;
                        }
                    }
                }
                &Record::Softmax { input, out } => {
                    if self.requires[input] {
                        let (c, dims) = self.values[input].chw()?;
                        let dhw = dims.iter().product();
                        self.ensure_grad(input);
                        let mut g = self.grads[input].take().unwrap();
                        kernels::softmax_backward(&gout, self.values[out].data(), c, dhw, &mut g);
                        self.grads[input] = Some(g);
                    }
                }
                Record::CrossEntropy { prob, target, .. } => {
                    let prob = *prob;
                    if self.requires[prob] {
                        let (_, dims) = self.values[prob].chw()?;
                        let dhw = dims.iter().product();
                        if self.grads[prob].is_none() {
                            self.grads[prob] = Some(vec![T::zero(); self.values[prob].numel()]);
                        }
                        let mut g = self.grads[prob].take().unwrap();
                        kernels::cross_entropy_backward(
                            gout[0],
                            self.values[prob].data(),
                            target,
                            dhw,
                            &mut g,
                        );
                        self.grads[prob] = Some(g);
                    }
                }
                &Record::Scale {
                    input,
                    factor,
                    out: _,
                } => {
                    if self.requires[input] {
                        self.ensure_grad(input);
                        let g = self.grads[input].as_mut().unwrap();
                        for (gi, &go) in g.iter_mut().zip(&gout) {
                            *gi += factor * go;
                        }
                    }
                }
                &Record::Add { a, b, out: _ } => {
                    for id in [a, b] {
                        if self.requires[id] {
                            self.ensure_grad(id);
                            let g = self.grads[id].as_mut().unwrap();
                            for (gi, &go) in g.iter_mut().zip(&gout) {
                                *gi += go;
                            }
                        }
                    }
                }
                &Record::Sum { input, out: _ } => {
                    if self.requires[input] {
                        self.ensure_grad(input);
                        let g = self.grads[input].as_mut().unwrap();
                        for gi in g.iter_mut() {
                            *gi += gout[0];
                        }
                    }
                }
                Record::Dot { input, coeffs, .. } => {
                    let input = *input;
                    if self.requires[input] {
                        if self.grads[input].is_none() {
                            self.grads[input] = Some(vec![T::zero(); self.values[input].numel()]);
                        }
                        let g = self.grads[input].as_mut().unwrap();
                        for (gi, &c) in g.iter_mut().zip(coeffs) {
                            *gi += gout[0] * c;
                        }
                    }
                }
            }
            self.grads[out] = Some(gout);
        }
        Ok(())
    }
}
