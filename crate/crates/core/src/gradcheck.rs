//! Finite-difference verification of the hand-written backward passes.
//!
//! Every spike nonlinearity is replaced by its smooth relaxation, which makes
//! the unrolled network differentiable; the BPTT gradient of the scalar loss
//! `L = Σ w ⊙ ε̂` is then compared parameter by parameter against central
//! differences in 64-bit arithmetic.

use std::collections::BTreeMap;

use crate::diffusion::TrainableDenoiser;
use crate::error::Result;
use crate::lif::{Firing, LifParams};
use crate::rng::{streams, RngStream};
use crate::tensor::Tensor;
use crate::unet::{Parameterized, SpikingUNet, TensorRole, UNetConfig};

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub unet: UNetConfig,
    pub batch: usize,
    pub seed: u64,
    /// Central-difference step.
    pub step: f64,
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator, for near-zero gradients.
    pub floor: f64,
    /// Convolution whose weight gradient is negated before checking.
    pub fault: Option<String>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            unet: UNetConfig {
                in_channels: 1,
                base_channels: 8,
                channel_mults: vec![1, 2],
                blocks_per_level: 1,
                time_steps: 2,
                lif: LifParams::default(),
                temb_dim: 8,
                image_size: 8,
            },
            batch: 1,
            seed: 0,
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-5,
            fault: None,
        }
    }
}

/// Worst element of one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamWorst {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
    /// One entry per parameter tensor, in model order.
    pub per_param: Vec<ParamWorst>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }

    /// Worst entry per layer (parameter name without its last component), sorted by error.
    pub fn worst_by_layer(&self) -> Vec<(String, ParamWorst)> {
        let mut by_layer: BTreeMap<String, ParamWorst> = BTreeMap::new();
        for w in &self.per_param {
            let layer = w.param.rsplit_once('.').map_or(w.param.as_str(), |(l, _)| l).to_string();
            match by_layer.get(&layer) {
                Some(cur) if cur.rel_err >= w.rel_err => {}
                _ => {
                    by_layer.insert(layer, w.clone());
                }
            }
        }
        let mut out: Vec<_> = by_layer.into_iter().collect();
        out.sort_by(|a, b| b.1.rel_err.total_cmp(&a.1.rel_err));
        out
    }
}

fn loss(model: &mut SpikingUNet<f64>, x: &Tensor<f64>, ts: &[usize], w: &Tensor<f64>) -> Result<f64> {
    let y = model.forward_train(x, ts)?;
    Ok(y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum())
}

fn with_param<R>(model: &mut SpikingUNet<f64>, target: usize, f: impl FnOnce(&mut Tensor<f64>) -> R) -> R {
    let mut k = 0;
    let mut f = Some(f);
    let mut out = None;
    model.visit(&mut |_, t, role| {
        if role == TensorRole::Param {
            if k == target {
                out = Some((f.take().expect("visited once"))(t));
            }
            k += 1;
        }
    });
    out.expect("parameter index in range")
}

/// Builds the relaxed 64-bit model and compares every parameter gradient.
pub fn run_gradcheck(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut model = SpikingUNet::<f64>::new(cfg.unet.clone(), cfg.seed)?;
    model.set_firing(Firing::Relaxed);
    model.randomize_output(cfg.seed.wrapping_add(1));
    if let Some(name) = &cfg.fault {
        model.inject_backward_fault(name)?;
    }

    let mut rng = RngStream::new(cfg.seed, streams::PROBE);
    let u = &cfg.unet;
    let x = Tensor::<f64>::randn(&[cfg.batch, u.in_channels, u.image_size, u.image_size], &mut rng);
    let ts: Vec<usize> = (0..cfg.batch).map(|_| 1 + rng.below(1000) as usize).collect();
    let w = Tensor::<f64>::randn(x.shape(), &mut rng);

    model.zero_grad();
    model.forward_train(&x, &ts)?;
    model.backward(&w)?;

    let mut tensors: Vec<(String, Vec<f64>, usize)> = Vec::new();
    model.visit(&mut |name, t, role| {
        if role == TensorRole::Param {
            tensors.push((name, t.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]), t.len()));
        }
    });

    let mut per_param = Vec::with_capacity(tensors.len());
    let mut checked = 0;
    for (p, (name, analytic, len)) in tensors.into_iter().enumerate() {
        let mut worst = ParamWorst { param: name, index: 0, analytic: 0.0, numeric: 0.0, rel_err: 0.0 };
        for i in 0..len {
            let orig = with_param(&mut model, p, |t| t.data()[i]);
            with_param(&mut model, p, |t| t.data_mut()[i] = orig + cfg.step);
            let up = loss(&mut model, &x, &ts, &w)?;
            with_param(&mut model, p, |t| t.data_mut()[i] = orig - cfg.step);
            let down = loss(&mut model, &x, &ts, &w)?;
            with_param(&mut model, p, |t| t.data_mut()[i] = orig);
            let numeric = (up - down) / (2.0 * cfg.step);
            let a = analytic[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
            if rel > worst.rel_err || i == 0 {
                worst = ParamWorst { index: i, analytic: a, numeric, rel_err: rel, ..worst };
            }
            checked += 1;
        }
        per_param.push(worst);
    }
    let max_rel_err = per_param.iter().map(|w| w.rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport { checked, max_rel_err, tolerance: cfg.tolerance, per_param })
}
