//! DDPM machinery: linear noise schedule, forward perturbation, the
//! denoising-score-matching loss, and the ancestral sampler with threshold
//! guidance.
//!
//! Timesteps are 1-based throughout (`1..=N`). The marginal of the forward
//! process is `q(x_t | x_0) = N(a(t)·x_0, σ(t)²·I)` with `a(t) = √ᾱ_t` and
//! `σ(t) = √(1 − ᾱ_t)`.

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// Linear β schedule over `steps` steps, endpoints inclusive.
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::InvalidArgument("schedule needs at least one step".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}"
        )));
    }
    let betas: Vec<f64> = if steps == 1 {
        vec![beta_start]
    } else {
        let span = beta_end - beta_start;
        (0..steps)
            .map(|i| {
                if i + 1 == steps {
                    beta_end
                } else {
                    beta_start + span * i as f64 / (steps - 1) as f64
                }
            })
            .collect()
    };
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let alpha_bars = alphas
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(NoiseSchedule { betas, alphas, alpha_bars })
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn idx(&self, t: usize) -> usize {
        assert!(t >= 1 && t <= self.steps(), "timestep {t} outside 1..={}", self.steps());
        t - 1
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::InvalidArgument(format!("timestep {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[self.idx(t)]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[self.idx(t)]
    }

    /// ᾱ_t; `alpha_bar(0)` is 1 by convention.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[self.idx(t)]
        }
    }

    /// Signal scale a(t) = √ᾱ_t.
    pub fn signal(&self, t: usize) -> f64 {
        self.alpha_bar(t).sqrt()
    }

    /// Noise scale σ(t) = √(1 − ᾱ_t).
    pub fn sigma(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar(t)).sqrt()
    }

    /// Variance of the reverse step, β̃_t = β_t·(1 − ᾱ_{t−1})/(1 − ᾱ_t).
    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.beta(t) * (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t))
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }
}

/// `x_t = a(t)·x0 + σ(t)·ε`.
pub fn q_sample<F: Scalar>(x0: &Tensor<F>, t: usize, eps: &Tensor<F>, sched: &NoiseSchedule) -> Result<Tensor<F>> {
    sched.check_t(t)?;
    x0.check_same_shape("q_sample", eps)?;
    let (a, s) = (F::of(sched.signal(t)), F::of(sched.sigma(t)));
    x0.zip_map(eps, |x, e| a * x + s * e)
}

/// [`q_sample`] with one timestep per leading-axis example.
pub fn q_sample_batch<F: Scalar>(
    x0: &Tensor<F>,
    ts: &[usize],
    eps: &Tensor<F>,
    sched: &NoiseSchedule,
) -> Result<Tensor<F>> {
    x0.check_same_shape("q_sample_batch", eps)?;
    if x0.ndim() == 0 || x0.dim(0) != ts.len() {
        return Err(Error::shape("q_sample_batch", format!("{} timesteps for {:?}", ts.len(), x0.shape())));
    }
    let per = x0.len() / ts.len();
    let mut out = Vec::with_capacity(x0.len());
    for (b, &t) in ts.iter().enumerate() {
        sched.check_t(t)?;
        let (a, s) = (F::of(sched.signal(t)), F::of(sched.sigma(t)));
        let range = b * per..(b + 1) * per;
        out.extend(x0.data()[range.clone()].iter().zip(&eps.data()[range]).map(|(&x, &e)| a * x + s * e));
    }
    Tensor::from_vec(x0.shape(), out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GuidanceMode {
    Off,
    /// Lowered threshold.
    Inhibitory,
    /// Raised threshold.
    Excitatory,
}

/// Inference-time override of every spiking neuron's threshold.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GuidanceConfig {
    pub threshold: Option<f64>,
}

impl GuidanceConfig {
    pub fn off() -> Self {
        Self { threshold: None }
    }

    pub fn with_threshold(threshold: f64) -> Self {
        Self { threshold: Some(threshold) }
    }

    /// Threshold to use given the threshold the model was trained with.
    pub fn effective_threshold(&self, trained: f64) -> f64 {
        self.threshold.unwrap_or(trained)
    }

    pub fn mode(&self, trained: f64) -> GuidanceMode {
        match self.threshold {
            Some(v) if v < trained => GuidanceMode::Inhibitory,
            Some(v) if v > trained => GuidanceMode::Excitatory,
            _ => GuidanceMode::Off,
        }
    }
}

impl std::fmt::Display for GuidanceMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GuidanceMode::Off => "off",
            GuidanceMode::Inhibitory => "inhibitory",
            GuidanceMode::Excitatory => "excitatory",
        })
    }
}

/// Inference-only noise predictor ε̂(x_t, t).
pub trait NoisePredictor<F: Scalar> {
    /// `ts` holds one timestep per leading-axis example of `x_t`.
    fn predict(&self, x_t: &Tensor<F>, ts: &[usize], guidance: &GuidanceConfig) -> Result<Tensor<F>>;
}

/// A noise predictor that can be trained by backpropagation.
pub trait TrainableDenoiser<F: Scalar> {
    fn forward_train(&mut self, x_t: &Tensor<F>, ts: &[usize]) -> Result<Tensor<F>>;

    /// Accumulates parameter gradients given dL/dε̂.
    fn backward(&mut self, grad_out: &Tensor<F>) -> Result<()>;
}

/// Denoising-score-matching loss on one batch, with gradients accumulated into the model.
///
/// Draw order from `rng`: one timestep per example (uniform on `1..=N`), then ε
/// with the shape of `x0`.
pub fn dsm_loss<F: Scalar, M: TrainableDenoiser<F> + ?Sized>(
    model: &mut M,
    x0: &Tensor<F>,
    sched: &NoiseSchedule,
    rng: &mut RngStream,
) -> Result<f64> {
    if x0.ndim() == 0 || x0.dim(0) == 0 {
        return Err(Error::InvalidArgument("dsm_loss needs a nonempty batch".into()));
    }
    let ts: Vec<usize> = (0..x0.dim(0)).map(|_| 1 + rng.below(sched.steps() as u64) as usize).collect();
    let eps = Tensor::<F>::randn(x0.shape(), rng);
    let x_t = q_sample_batch(x0, &ts, &eps, sched)?;
    let pred = model.forward_train(&x_t, &ts)?;
    let diff = pred.sub(&eps)?;
    let count = diff.len() as f64;
    let loss = diff.data().iter().map(|d| d.as_f64() * d.as_f64()).sum::<f64>() / count;
    let grad = diff.scale(F::of(2.0 / count));
    model.backward(&grad)?;
    Ok(loss)
}

/// Mean of the reverse step: `(x_t − β_t/σ(t)·ε̂)/√α_t`.
pub fn posterior_mean(x_t: f64, eps_hat: f64, alpha: f64, beta: f64, sigma: f64) -> f64 {
    (x_t - beta / sigma * eps_hat) / alpha.sqrt()
}

/// Ancestral sampling from `x_N ~ N(0, I)` down to `x_0`.
pub fn ancestral_sample<F: Scalar, M: NoisePredictor<F> + ?Sized>(
    model: &M,
    sched: &NoiseSchedule,
    shape: &[usize],
    rng: &mut RngStream,
    guidance: &GuidanceConfig,
) -> Result<Tensor<F>> {
    if shape.is_empty() || shape[0] == 0 {
        return Err(Error::InvalidArgument(format!("cannot sample shape {shape:?}")));
    }
    let mut x = Tensor::<F>::randn(shape, rng);
    for t in (1..=sched.steps()).rev() {
        let ts = vec![t; shape[0]];
        let eps = model.predict(&x, &ts, guidance)?;
        x.check_same_shape("ancestral_sample", &eps)?;
        let inv_sqrt_alpha = F::of(1.0 / sched.alpha(t).sqrt());
        let coef = F::of(sched.beta(t) / sched.sigma(t));
        let mut next = x.zip_map(&eps, |xv, ev| inv_sqrt_alpha * (xv - coef * ev))?;
        if t > 1 {
            let std = F::of(sched.posterior_variance(t).sqrt());
            let z = Tensor::<F>::randn(shape, rng);
            next = next.zip_map(&z, |m, zv| m + std * zv)?;
        }
        x = next;
    }
    Ok(x)
}

/// Optimal ε for Gaussian data `x0 ~ N(μ, s²·I)`:
/// `ε*(x_t, t) = σ(t)·(x_t − a(t)·μ) / (a(t)²·s² + σ(t)²)`.
pub fn gaussian_oracle_eps<F: Scalar>(x_t: &Tensor<F>, t: usize, mean: f64, var: f64, sched: &NoiseSchedule) -> Tensor<F> {
    let (a, s) = (sched.signal(t), sched.sigma(t));
    let denom = a * a * var + s * s;
    let (scale, shift) = (F::of(s / denom), F::of(a * mean));
    x_t.map(|x| scale * (x - shift))
}

/// [`gaussian_oracle_eps`] as a [`NoisePredictor`]. Ignores guidance.
#[derive(Debug, Clone)]
pub struct GaussianOracle<'a> {
    pub mean: f64,
    pub var: f64,
    pub sched: &'a NoiseSchedule,
}

impl<F: Scalar> NoisePredictor<F> for GaussianOracle<'_> {
    fn predict(&self, x_t: &Tensor<F>, ts: &[usize], _guidance: &GuidanceConfig) -> Result<Tensor<F>> {
        let per = x_t.len() / ts.len();
        let mut out = Vec::with_capacity(x_t.len());
        for (b, &t) in ts.iter().enumerate() {
            let row = Tensor::from_vec(&[per], x_t.data()[b * per..(b + 1) * per].to_vec())?;
            out.extend(gaussian_oracle_eps(&row, t, self.mean, self.var, self.sched).into_data());
        }
        Tensor::from_vec(x_t.shape(), out)
    }
}
