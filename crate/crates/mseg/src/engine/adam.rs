//! Adam with bias correction.

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};
use indexmap::IndexMap;

/// Per-parameter moment buffers plus the shared step counter.
#[derive(Debug, Clone)]
pub struct AdamState<T: Scalar> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub epsilon: T,
    pub t: u64,
    /// name -> (first moment m, second moment v), shapes matching the parameter
    pub slots: IndexMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Scalar> AdamState<T> {
    /// Fresh state with the default betas (0.9, 0.999) and epsilon 1e-8.
    pub fn new(lr: T, params: &IndexMap<String, Tensor<T>>) -> Self {
        let slots = params
            .iter()
            .map(|(n, p)| {
                (
                    n.clone(),
                    (vec![T::zero(); p.numel()], vec![T::zero(); p.numel()]),
                )
            })
            .collect();
        AdamState {
            lr,
            beta1: T::from_f64(0.9),
            beta2: T::from_f64(0.999),
            epsilon: T::from_f64(1e-8),
            t: 0,
            slots,
        }
    }

    /// One update over every parameter. Every parameter must have a gradient
    /// (a zero gradient is a valid gradient and leaves the parameter
    /// unchanged on a fresh state).
    pub fn step(
        &mut self,
        params: &mut IndexMap<String, Tensor<T>>,
        grads: &IndexMap<String, Vec<T>>,
    ) -> Result<()> {
        self.t += 1;
        let bc1 = T::one() - self.beta1.powi(self.t as i32);
        let bc2 = T::one() - self.beta2.powi(self.t as i32);
        for (name, p) in params.iter_mut() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::MissingGrad(name.clone()))?;
            if g.len() != p.numel() {
                return Err(Error::ShapeMismatch(format!(
                    "adam: gradient length {} for parameter {name} of {} elements",
                    g.len(),
                    p.numel()
                )));
            }
            let (m, v) = self
                .slots
                .get_mut(name)
                .ok_or_else(|| Error::MissingGrad(name.clone()))?;
            for ((th, &gi), (mi, vi)) in p
                .data_mut()
                .iter_mut()
                .zip(g)
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = self.beta1 * *mi + (T::one() - self.beta1) * gi;
                *vi = self.beta2 * *vi + (T::one() - self.beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *th -= self.lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}
