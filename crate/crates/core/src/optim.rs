//! Bias-corrected Adam.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use crate::unet::{Parameterized, TensorRole};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Moment estimates keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState<F: Scalar = f32> {
    pub moments: BTreeMap<String, (Tensor<F>, Tensor<F>)>,
    pub step_count: u64,
}

/// One Adam update on raw slices. `step` is the 1-based step number after increment.
pub fn adam_update<F: Scalar>(
    param: &mut [F],
    grad: &[F],
    first: &mut [F],
    second: &mut [F],
    step: u64,
    cfg: &AdamConfig,
) {
    let (b1, b2) = (F::of(cfg.beta1), F::of(cfg.beta2));
    let c1 = F::of(1.0 - cfg.beta1.powi(step as i32));
    let c2 = F::of(1.0 - cfg.beta2.powi(step as i32));
    let (lr, eps) = (F::of(cfg.lr), F::of(cfg.eps));
    for i in 0..param.len() {
        let g = grad[i];
        first[i] = b1 * first[i] + (F::one() - b1) * g;
        second[i] = b2 * second[i] + (F::one() - b2) * g * g;
        let m_hat = first[i] / c1;
        let v_hat = second[i] / c2;
        param[i] = param[i] - lr * m_hat / (v_hat.sqrt() + eps);
    }
}

impl<F: Scalar> AdamState<F> {
    pub fn new() -> Self {
        Self { moments: BTreeMap::new(), step_count: 0 }
    }

    /// Applies one update to every named parameter, using each tensor's gradient buffer.
    /// Parameters without a gradient buffer are treated as having zero gradient.
    pub fn step<'a, I>(&mut self, params: I, cfg: &AdamConfig) -> Result<()>
    where
        I: IntoIterator<Item = (String, &'a mut Tensor<F>)>,
    {
        self.step_count += 1;
        for (name, param) in params {
            let n = param.len();
            let entry = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (Tensor::zeros(param.shape()), Tensor::zeros(param.shape())));
            if entry.0.shape() != param.shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!("state for `{name}` has shape {:?}, parameter {:?}", entry.0.shape(), param.shape()),
                ));
            }
            let (data, grad) = param.data_and_grad_mut();
            debug_assert_eq!(grad.len(), n);
            let (m, v) = (&mut entry.0, &mut entry.1);
            adam_update(data, grad, m.data_mut(), v.data_mut(), self.step_count, cfg);
        }
        Ok(())
    }

    /// One update over every trainable tensor of `model`, in visit order.
    pub fn step_model(&mut self, model: &mut dyn Parameterized<F>, cfg: &AdamConfig) -> Result<()> {
        self.step_count += 1;
        let step = self.step_count;
        let mut failure = None;
        model.visit(&mut |name, param, role| {
            if role != TensorRole::Param || failure.is_some() {
                return;
            }
            let entry = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (Tensor::zeros(param.shape()), Tensor::zeros(param.shape())));
            if entry.0.shape() != param.shape() {
                failure = Some(Error::shape(
                    "adam_step",
                    format!("state for `{name}` has shape {:?}, parameter {:?}", entry.0.shape(), param.shape()),
                ));
                return;
            }
            let (data, grad) = param.data_and_grad_mut();
            adam_update(data, grad, entry.0.data_mut(), entry.1.data_mut(), step, cfg);
        });
        failure.map_or(Ok(()), Err)
    }
}
