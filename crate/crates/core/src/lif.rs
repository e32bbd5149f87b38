//! Discrete leaky integrate-and-fire dynamics with hard reset.
//!
//! Per step `n`:
//!
//! ```text
//! U[n] = λ·V[n-1] + I[n]
//! S[n] = Θ(U[n] - V_th)
//! V[n] = U[n]·(1 - S[n]) + V_reset·S[n]
//! ```
//!
//! The backward pass is BPTT with Θ' replaced by the arctangent surrogate.
//! [`Firing::Relaxed`] swaps Θ for its smooth antiderivative so that the whole
//! unrolled computation is differentiable and can be checked against finite
//! differences.

use std::f64::consts::{FRAC_PI_2, PI};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LifParams {
    /// Multiplier on the previous membrane potential (λ). 1.0 means no leak.
    pub decay: f64,
    pub threshold: f64,
    pub reset: f64,
    /// Sharpness of the arctangent surrogate.
    pub alpha: f64,
}

impl Default for LifParams {
    fn default() -> Self {
        Self { decay: 1.0, threshold: 1.0, reset: 0.0, alpha: 2.0 }
    }
}

impl LifParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.reset < self.threshold) {
            return Err(Error::Config(format!(
                "reset potential {} must be below threshold {}",
                self.reset, self.threshold
            )));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::Config(format!("decay {} must lie in (0, 1]", self.decay)));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::Config(format!("surrogate alpha {} must be positive", self.alpha)));
        }
        Ok(())
    }

    pub fn with_threshold(self, threshold: f64) -> Self {
        Self { threshold, ..self }
    }
}

/// How the spike nonlinearity is evaluated in the forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Firing {
    /// Heaviside step; outputs are exactly 0 or 1.
    #[default]
    Spike,
    /// Smooth arctangent step used only for gradient verification.
    Relaxed,
}

/// Derivative of the arctangent surrogate: `α / (2·(1 + (π/2·α·(u − v_th))²))`.
pub fn surrogate_grad(u: f64, v_th: f64, alpha: f64) -> f64 {
    let z = FRAC_PI_2 * alpha * (u - v_th);
    alpha / (2.0 * (1.0 + z * z))
}

/// `1/2 + atan(π/2·α·(u − v_th))/π`, the antiderivative of [`surrogate_grad`].
pub fn relaxed_forward(u: f64, v_th: f64, alpha: f64) -> f64 {
    0.5 + (FRAC_PI_2 * alpha * (u - v_th)).atan() / PI
}

#[inline]
fn fire<F: Scalar>(u: F, p: &LifParams, firing: Firing) -> F {
    match firing {
        Firing::Spike => {
            if u >= F::of(p.threshold) {
                F::one()
            } else {
                F::zero()
            }
        }
        Firing::Relaxed => F::of(relaxed_forward(u.as_f64(), p.threshold, p.alpha)),
    }
}

/// Membrane potential after the most recent step. Allocated on first use.
#[derive(Debug, Clone, Default)]
pub struct LifState<F: Scalar = f32> {
    potential: Option<Tensor<F>>,
}

impl<F: Scalar> LifState<F> {
    pub fn new() -> Self {
        Self { potential: None }
    }

    pub fn potential(&self) -> Option<&Tensor<F>> {
        self.potential.as_ref()
    }

    pub fn reset(&mut self) {
        self.potential = None;
    }
}

/// Output of a single step.
#[derive(Debug, Clone)]
pub struct StepOutput<F: Scalar> {
    /// Membrane potential before reset, `U[n]`.
    pub pre_reset: Tensor<F>,
    pub spikes: Tensor<F>,
}

/// Advances `state` by one step with input current `input`.
pub fn lif_step<F: Scalar>(
    state: &mut LifState<F>,
    input: &Tensor<F>,
    params: &LifParams,
    firing: Firing,
) -> Result<StepOutput<F>> {
    let v_reset = F::of(params.reset);
    let decay = F::of(params.decay);
    let prev = state
        .potential
        .get_or_insert_with(|| Tensor::full(input.shape(), v_reset));
    prev.check_same_shape("lif_step", input)?;
    let mut u = Vec::with_capacity(input.len());
    let mut s = Vec::with_capacity(input.len());
    for (v, &i) in prev.data_mut().iter_mut().zip(input.data()) {
        let un = decay * *v + i;
        let sn = fire(un, params, firing);
        *v = un * (F::one() - sn) + v_reset * sn;
        u.push(un);
        s.push(sn);
    }
    Ok(StepOutput {
        pre_reset: Tensor::from_vec(input.shape(), u)?,
        spikes: Tensor::from_vec(input.shape(), s)?,
    })
}

/// Values cached by [`lif_sequence`] for the backward pass.
#[derive(Debug, Clone)]
pub struct LifTrace<F: Scalar> {
    steps: usize,
    pre_reset: Vec<F>,
    spikes: Vec<F>,
    params: LifParams,
    firing: Firing,
}

impl<F: Scalar> LifTrace<F> {
    pub fn pre_reset(&self) -> &[F] {
        &self.pre_reset
    }
}

/// Runs the neuron over `steps` time steps. The leading axis of `inputs` is
/// time-major: the first `len/steps` elements are step 0, and so on.
/// Initial membrane potential is `V_reset`.
pub fn lif_sequence<F: Scalar>(
    inputs: &Tensor<F>,
    steps: usize,
    params: &LifParams,
    firing: Firing,
) -> Result<(Tensor<F>, LifTrace<F>)> {
    if steps == 0 {
        return Err(Error::InvalidArgument("lif_sequence needs at least one time step".into()));
    }
    if inputs.ndim() == 0 || inputs.dim(0) % steps != 0 {
        return Err(Error::shape(
            "lif_sequence",
            format!("leading dim of {:?} not divisible by {steps} steps", inputs.shape()),
        ));
    }
    let sites = inputs.len() / steps;
    let x = inputs.data();
    let v_reset = F::of(params.reset);
    let decay = F::of(params.decay);
    let mut v = vec![v_reset; sites];
    let mut pre_reset = Vec::with_capacity(x.len());
    let mut spikes = Vec::with_capacity(x.len());
    for n in 0..steps {
        for (j, vj) in v.iter_mut().enumerate() {
            let u = decay * *vj + x[n * sites + j];
            let s = fire(u, params, firing);
            *vj = u * (F::one() - s) + v_reset * s;
            pre_reset.push(u);
            spikes.push(s);
        }
    }
    let out = Tensor::from_vec(inputs.shape(), spikes.clone())?;
    Ok((out, LifTrace { steps, pre_reset, spikes, params: *params, firing }))
}

/// BPTT through [`lif_sequence`]: returns dL/dI given dL/dS.
///
/// With [`Firing::Spike`] the reset product `U·(1 − S)` treats `S` as a
/// constant. With [`Firing::Relaxed`] the reset is differentiated fully, so the
/// result is the exact gradient of the relaxed forward.
pub fn lif_sequence_backward<F: Scalar>(grad_spikes: &Tensor<F>, trace: &LifTrace<F>) -> Result<Tensor<F>> {
    if grad_spikes.len() != trace.spikes.len() {
        return Err(Error::shape(
            "lif_sequence_backward",
            format!("gradient has {} elements, trace {}", grad_spikes.len(), trace.spikes.len()),
        ));
    }
    let p = &trace.params;
    let steps = trace.steps;
    let sites = trace.spikes.len() / steps;
    let gs = grad_spikes.data();
    let decay = F::of(p.decay);
    let v_reset = F::of(p.reset);
    let full_reset = trace.firing == Firing::Relaxed;
    let mut grad_in = vec![F::zero(); gs.len()];
    // dL/dV[n], flowing backwards from step n+1.
    let mut grad_v = vec![F::zero(); sites];
    for n in (0..steps).rev() {
        for j in 0..sites {
            let idx = n * sites + j;
            let u = trace.pre_reset[idx];
            let s = trace.spikes[idx];
            let sg = F::of(surrogate_grad(u.as_f64(), p.threshold, p.alpha));
            let mut dv_du = F::one() - s;
            if full_reset {
                dv_du = dv_du + (v_reset - u) * sg;
            }
            let grad_u = gs[idx] * sg + grad_v[j] * dv_du;
            grad_in[idx] = grad_u;
            grad_v[j] = decay * grad_u;
        }
    }
    Tensor::from_vec(grad_spikes.shape(), grad_in)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step(v: f64, i: f64, params: LifParams) -> (f64, f64, f64) {
        let mut state = LifState::<f64>::new();
        state.potential = Some(Tensor::scalar(v));
        let out = lif_step(&mut state, &Tensor::scalar(i), &params, Firing::Spike).unwrap();
        (out.pre_reset.data()[0], out.spikes.data()[0], state.potential().unwrap().data()[0])
    }

    #[test]
    fn single_step_hand_values() {
        let p = LifParams::default();
        let (u, s, v) = step(0.0, 0.6, p);
        assert!((u - 0.6).abs() < 1e-15 && s == 0.0 && (v - 0.6).abs() < 1e-15);
        let (u, s, v) = step(0.6, 0.6, p);
        assert!((u - 1.2).abs() < 1e-15 && s == 1.0 && v == 0.0);
        assert_eq!(step(0.0, 0.0, p), (0.0, 0.0, 0.0));
        let (u, s, v) = step(0.8, 0.1, LifParams { decay: 0.5, ..p });
        assert!((u - 0.5).abs() < 1e-15 && s == 0.0 && (v - 0.5).abs() < 1e-15);
    }

    fn constant_train(c: f64, steps: usize) -> Vec<f64> {
        let x = Tensor::<f64>::full(&[steps, 1], c);
        let (s, _) = lif_sequence(&x, steps, &LifParams::default(), Firing::Spike).unwrap();
        s.into_data()
    }

    #[test]
    fn constant_input_patterns() {
        assert_eq!(constant_train(0.5, 4), vec![0.0, 1.0, 0.0, 1.0]);
        assert_eq!(constant_train(1.5, 3), vec![1.0, 1.0, 1.0]);
        assert_eq!(constant_train(0.0, 5), vec![0.0; 5]);
    }

    #[test]
    fn lazily_allocates_state() {
        let mut state = LifState::<f32>::new();
        assert!(state.potential().is_none());
        lif_step(&mut state, &Tensor::zeros(&[2, 3]), &LifParams::default(), Firing::Spike).unwrap();
        assert_eq!(state.potential().unwrap().shape(), &[2, 3]);
        assert!(lif_step(&mut state, &Tensor::zeros(&[3]), &LifParams::default(), Firing::Spike).is_err());
    }

    #[test]
    fn surrogate_values() {
        assert!((surrogate_grad(1.0, 1.0, 2.0) - 1.0).abs() < 1e-15);
        for x in [0.1, 0.7, 3.0] {
            assert_eq!(surrogate_grad(x, 0.0, 2.0), surrogate_grad(-x, 0.0, 2.0));
            assert!((surrogate_grad(1.0 + x, 1.0, 2.0) - surrogate_grad(1.0 - x, 1.0, 2.0)).abs() < 1e-12);
        }
        assert!(surrogate_grad(1e9, 1.0, 2.0) < 1e-15);
        assert!(surrogate_grad(-1e9, 1.0, 2.0) < 1e-15);
    }

    #[test]
    fn relaxed_values_and_derivative() {
        assert_eq!(relaxed_forward(1.0, 1.0, 2.0), 0.5);
        assert!((relaxed_forward(1e12, 1.0, 2.0) - 1.0).abs() < 1e-9);
        assert!(relaxed_forward(-1e12, 1.0, 2.0).abs() < 1e-9);
        let h = 1e-5;
        for u in [-2.0, -0.3, 0.9, 1.0, 1.4, 5.0] {
            let fd = (relaxed_forward(u + h, 1.0, 2.0) - relaxed_forward(u - h, 1.0, 2.0)) / (2.0 * h);
            assert!((fd - surrogate_grad(u, 1.0, 2.0)).abs() < 1e-8, "u={u}");
        }
    }

    #[test]
    fn params_validation() {
        assert!(LifParams::default().validate().is_ok());
        assert!(LifParams { reset: 1.0, ..Default::default() }.validate().is_err());
        assert!(LifParams { decay: 1.5, ..Default::default() }.validate().is_err());
        assert!(LifParams { alpha: 0.0, ..Default::default() }.validate().is_err());
    }
}
