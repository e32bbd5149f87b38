//! Leaf layers with cached forward state and hand-written backward passes.
//!
//! Each layer has an inference `forward(&self, ..)` that touches no state, a
//! `forward_train(&mut self, ..)` that caches what the backward needs, and a
//! `backward(&mut self, ..)` that accumulates parameter gradients and returns
//! the input gradient.

use crate::error::{Error, Result};
use crate::lif::{lif_sequence, lif_sequence_backward, Firing, LifParams, LifTrace};
use crate::ops::{self, BatchNormCache};
use crate::rng::RngStream;
use crate::tensor::{Scalar, Tensor};

/// Whether a visited tensor is trained or only carried along (BN running statistics).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorRole {
    Param,
    Buffer,
}

/// Named traversal over every parameter and buffer, in a fixed order.
pub trait Parameterized<F: Scalar> {
    fn visit(&mut self, f: &mut dyn FnMut(String, &mut Tensor<F>, TensorRole));
}

/// Per-call options shared by all layers of one forward pass.
pub struct PassCtx<'a, F: Scalar> {
    /// Overrides every neuron's threshold when set.
    pub threshold: Option<f64>,
    /// Called with each neuron's name and its output spike tensor.
    pub observer: Option<&'a mut dyn FnMut(&str, &Tensor<F>)>,
}

impl<'a, F: Scalar> PassCtx<'a, F> {
    pub fn plain() -> Self {
        Self { threshold: None, observer: None }
    }

    pub fn with_threshold(threshold: Option<f64>) -> Self {
        Self { threshold, observer: None }
    }

    fn observe(&mut self, name: &str, spikes: &Tensor<F>) {
        if let Some(obs) = self.observer.as_mut() {
            obs(name, spikes);
        }
    }
}

fn missing_cache(layer: &str) -> Error {
    Error::InvalidArgument(format!("backward on `{layer}` without a preceding training forward"))
}

fn kaiming<F: Scalar>(shape: &[usize], fan_in: usize, rng: &mut RngStream) -> Tensor<F> {
    Tensor::randn_scaled(shape, (2.0 / fan_in as f64).sqrt(), rng).requires_grad()
}

#[derive(Debug, Clone)]
pub struct Conv2d<F: Scalar> {
    pub name: String,
    pub weight: Tensor<F>,
    pub bias: Tensor<F>,
    pub stride: usize,
    pub pad: usize,
    input: Option<Tensor<F>>,
    flip_weight_grad: bool,
}

impl<F: Scalar> Conv2d<F> {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, kernel: usize, stride: usize, pad: usize, rng: &mut RngStream) -> Self {
        Self {
            name: name.into(),
            weight: kaiming(&[cout, cin, kernel, kernel], cin * kernel * kernel, rng),
            bias: Tensor::zeros(&[cout]).requires_grad(),
            stride,
            pad,
            input: None,
            flip_weight_grad: false,
        }
    }

    pub fn zeroed(name: impl Into<String>, cin: usize, cout: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            name: name.into(),
            weight: Tensor::zeros(&[cout, cin, kernel, kernel]).requires_grad(),
            bias: Tensor::zeros(&[cout]).requires_grad(),
            stride,
            pad,
            input: None,
            flip_weight_grad: false,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim(1)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim(0)
    }

    pub fn forward(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        ops::conv2d(x, &self.weight, Some(&self.bias), self.stride, self.pad)
    }

    pub fn forward_train(&mut self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let y = self.forward(x)?;
        self.input = Some(x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, grad_out: &Tensor<F>) -> Result<Tensor<F>> {
        let x = self.input.take().ok_or_else(|| missing_cache(&self.name))?;
        let g = ops::conv2d_backward(&x, &self.weight, grad_out, self.stride, self.pad)?;
        if self.flip_weight_grad {
            self.weight.accumulate_grad(g.weight.scale(-F::one()).data());
        } else {
            self.weight.accumulate_grad(g.weight.data());
        }
        self.bias.accumulate_grad(g.bias.data());
        Ok(g.input)
    }

    /// Test hook: negate this layer's weight gradient in every later backward.
    #[doc(hidden)]
    pub fn inject_sign_flip(&mut self) {
        self.flip_weight_grad = true;
    }
}

impl<F: Scalar> Parameterized<F> for Conv2d<F> {
    fn visit(&mut self, f: &mut dyn FnMut(String, &mut Tensor<F>, TensorRole)) {
        f(format!("{}.weight", self.name), &mut self.weight, TensorRole::Param);
        f(format!("{}.bias", self.name), &mut self.bias, TensorRole::Param);
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d<F: Scalar> {
    pub name: String,
    pub gamma: Tensor<F>,
    pub beta: Tensor<F>,
    pub running_mean: Tensor<F>,
    pub running_var: Tensor<F>,
    pub momentum: f64,
    /// Replaces the layer with the identity. Used to expose raw conv sums.
    pub bypass: bool,
    cache: Option<BatchNormCache<F>>,
}

impl<F: Scalar> BatchNorm2d<F> {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        Self {
            name: name.into(),
            gamma: Tensor::full(&[channels], F::one()).requires_grad(),
            beta: Tensor::zeros(&[channels]).requires_grad(),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], F::one()),
            momentum: 0.1,
            bypass: false,
            cache: None,
        }
    }

    pub fn forward(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        if self.bypass {
            return Ok(x.clone());
        }
        ops::batch_norm_eval(x, &self.gamma, &self.beta, &self.running_mean, &self.running_var)
    }

    /// Normalizes with batch statistics and folds them into the running averages.
    pub fn forward_train(&mut self, x: &Tensor<F>) -> Result<Tensor<F>> {
        if self.bypass {
            return Ok(x.clone());
        }
        let (y, cache) = ops::batch_norm_train(x, &self.gamma, &self.beta)?;
        let m = (x.dim(0) * x.dim(2) * x.dim(3)) as f64;
        let mom = F::of(self.momentum);
        let keep = F::one() - mom;
        let unbias = F::of(m / (m - 1.0));
        for (r, &b) in self.running_mean.data_mut().iter_mut().zip(&cache.mean) {
            *r = keep * *r + mom * b;
        }
        for (r, &b) in self.running_var.data_mut().iter_mut().zip(&cache.var) {
            *r = keep * *r + mom * b * unbias;
        }
        self.cache = Some(cache);
        Ok(y)
    }

    pub fn backward(&mut self, grad_out: &Tensor<F>) -> Result<Tensor<F>> {
        if self.bypass {
            return Ok(grad_out.clone());
        }
        let cache = self.cache.take().ok_or_else(|| missing_cache(&self.name))?;
        let g = ops::batch_norm_backward(grad_out, &cache, &self.gamma)?;
        self.gamma.accumulate_grad(g.gamma.data());
        self.beta.accumulate_grad(g.beta.data());
        Ok(g.input)
    }
}

impl<F: Scalar> Parameterized<F> for BatchNorm2d<F> {
    fn visit(&mut self, f: &mut dyn FnMut(String, &mut Tensor<F>, TensorRole)) {
        f(format!("{}.gamma", self.name), &mut self.gamma, TensorRole::Param);
        f(format!("{}.beta", self.name), &mut self.beta, TensorRole::Param);
        f(format!("{}.running_mean", self.name), &mut self.running_mean, TensorRole::Buffer);
        f(format!("{}.running_var", self.name), &mut self.running_var, TensorRole::Buffer);
    }
}

/// Convolution followed by batch normalization.
#[derive(Debug, Clone)]
pub struct ConvBn<F: Scalar> {
    pub conv: Conv2d<F>,
    pub bn: BatchNorm2d<F>,
}

impl<F: Scalar> ConvBn<F> {
    pub fn new(prefix: &str, cin: usize, cout: usize, kernel: usize, stride: usize, rng: &mut RngStream) -> Self {
        Self {
            conv: Conv2d::new(format!("{prefix}.conv"), cin, cout, kernel, stride, kernel / 2, rng),
            bn: BatchNorm2d::new(format!("{prefix}.bn"), cout),
        }
    }

    pub fn forward(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        self.bn.forward(&self.conv.forward(x)?)
    }

    pub fn forward_train(&mut self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let h = self.conv.forward_train(x)?;
        self.bn.forward_train(&h)
    }

    pub fn backward(&mut self, grad_out: &Tensor<F>) -> Result<Tensor<F>> {
        let g = self.bn.backward(grad_out)?;
        self.conv.backward(&g)
    }
}

impl<F: Scalar> Parameterized<F> for ConvBn<F> {
    fn visit(&mut self, f: &mut dyn FnMut(String, &mut Tensor<F>, TensorRole)) {
        self.conv.visit(f);
        self.bn.visit(f);
    }
}

#[derive(Debug, Clone)]
pub struct Linear<F: Scalar> {
    pub name: String,
    pub weight: Tensor<F>,
    pub bias: Tensor<F>,
    input: Option<Tensor<F>>,
}

impl<F: Scalar> Linear<F> {
    pub fn new(name: impl Into<String>, fan_in: usize, fan_out: usize, rng: &mut RngStream) -> Self {
        Self {
            name: name.into(),
            weight: kaiming(&[fan_out, fan_in], fan_in, rng),
            bias: Tensor::zeros(&[fan_out]).requires_grad(),
            input: None,
        }
    }

    pub fn forward(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        ops::linear(x, &self.weight, &self.bias)
    }

    pub fn forward_train(&mut self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let y = self.forward(x)?;
        self.input = Some(x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, grad_out: &Tensor<F>) -> Result<Tensor<F>> {
        let x = self.input.take().ok_or_else(|| missing_cache(&self.name))?;
        let g = ops::linear_backward(&x, &self.weight, grad_out)?;
        self.weight.accumulate_grad(g.weight.data());
        self.bias.accumulate_grad(g.bias.data());
        Ok(g.input)
    }
}

impl<F: Scalar> Parameterized<F> for Linear<F> {
    fn visit(&mut self, f: &mut dyn FnMut(String, &mut Tensor<F>, TensorRole)) {
        f(format!("{}.weight", self.name), &mut self.weight, TensorRole::Param);
        f(format!("{}.bias", self.name), &mut self.bias, TensorRole::Param);
    }
}

/// LIF neurons over a time-fused tensor `[T·B, ...]`.
#[derive(Debug, Clone)]
pub struct SpikeNeuron<F: Scalar> {
    pub name: String,
    pub steps: usize,
    pub lif: LifParams,
    pub firing: Firing,
    trace: Option<LifTrace<F>>,
}

impl<F: Scalar> SpikeNeuron<F> {
    pub fn new(name: impl Into<String>, steps: usize, lif: LifParams) -> Self {
        Self { name: name.into(), steps, lif, firing: Firing::Spike, trace: None }
    }

    fn params(&self, ctx: &PassCtx<'_, F>) -> LifParams {
        match ctx.threshold {
            Some(th) => self.lif.with_threshold(th),
            None => self.lif,
        }
    }

    pub fn forward(&self, x: &Tensor<F>, ctx: &mut PassCtx<'_, F>) -> Result<Tensor<F>> {
        let (spikes, _) = lif_sequence(x, self.steps, &self.params(ctx), self.firing)?;
        ctx.observe(&self.name, &spikes);
        Ok(spikes)
    }

    pub fn forward_train(&mut self, x: &Tensor<F>, ctx: &mut PassCtx<'_, F>) -> Result<Tensor<F>> {
        let (spikes, trace) = lif_sequence(x, self.steps, &self.params(ctx), self.firing)?;
        ctx.observe(&self.name, &spikes);
        self.trace = Some(trace);
        Ok(spikes)
    }

    pub fn backward(&mut self, grad_out: &Tensor<F>) -> Result<Tensor<F>> {
        let trace = self.trace.take().ok_or_else(|| missing_cache(&self.name))?;
        lif_sequence_backward(grad_out, &trace)
    }
}

/// Raw sinusoidal embedding of timestep `t`: `[sin(t·f_0..), cos(t·f_0..)]`
/// with geometrically spaced frequencies from 1 down to 1/10000.
pub fn sinusoidal_embedding(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let denom = (half.max(2) - 1) as f64;
    let freqs = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / denom).exp());
    let (sin, cos): (Vec<f64>, Vec<f64>) = freqs.map(|f| ((t * f).sin(), (t * f).cos())).unzip();
    sin.into_iter().chain(cos).collect()
}

/// Sinusoidal embedding followed by `Linear → SiLU → Linear`, shared by all blocks.
#[derive(Debug, Clone)]
pub struct TimeEmbedding<F: Scalar> {
    pub dim: usize,
    pub fc1: Linear<F>,
    pub fc2: Linear<F>,
    hidden: Option<Tensor<F>>,
}

impl<F: Scalar> TimeEmbedding<F> {
    pub fn new(dim: usize, rng: &mut RngStream) -> Self {
        Self {
            dim,
            fc1: Linear::new("temb.fc1", dim, dim, rng),
            fc2: Linear::new("temb.fc2", dim, dim, rng),
            hidden: None,
        }
    }

    pub fn raw(&self, ts: &[usize]) -> Result<Tensor<F>> {
        let data = ts
            .iter()
            .flat_map(|&t| sinusoidal_embedding(t as f64, self.dim))
            .map(F::of)
            .collect();
        Tensor::from_vec(&[ts.len(), self.dim], data)
    }

    pub fn forward(&self, ts: &[usize]) -> Result<Tensor<F>> {
        let h = self.fc1.forward(&self.raw(ts)?)?;
        self.fc2.forward(&ops::silu(&h))
    }

    pub fn forward_train(&mut self, ts: &[usize]) -> Result<Tensor<F>> {
        let h = self.fc1.forward_train(&self.raw(ts)?)?;
        let y = self.fc2.forward_train(&ops::silu(&h))?;
        self.hidden = Some(h);
        Ok(y)
    }

    pub fn backward(&mut self, grad_out: &Tensor<F>) -> Result<()> {
        let h = self.hidden.take().ok_or_else(|| missing_cache("temb"))?;
        let g = self.fc2.backward(grad_out)?;
        let g = ops::silu_backward(&h, &g);
        self.fc1.backward(&g)?;
        Ok(())
    }
}

impl<F: Scalar> Parameterized<F> for TimeEmbedding<F> {
    fn visit(&mut self, f: &mut dyn FnMut(String, &mut Tensor<F>, TensorRole)) {
        self.fc1.visit(f);
        self.fc2.visit(f);
    }
}
