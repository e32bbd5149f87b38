//! Residual blocks and resolution changes.
//!
//! The pre-spike block activates first (`Activation → Conv → BN`) so both
//! residual sums happen on real-valued membrane currents:
//!
//! ```text
//! S   = SN(O_in)
//! O_m = BN(Conv(S)) + proj(temb) + shortcut(O_in)
//! S'  = SN(O_m)
//! O   = BN(Conv(S')) + O_m
//! ```
//!
//! The standard block adds spikes to the residual branch, which is what lets
//! its pre-activations reach 2.

use crate::error::Result;
use crate::lif::LifParams;
use crate::ops;
use crate::rng::RngStream;
use crate::tensor::{Scalar, Tensor};

use super::layers::{Conv2d, ConvBn, Linear, Parameterized, PassCtx, SpikeNeuron, TensorRole};

fn fused_batch<F: Scalar>(x: &Tensor<F>, steps: usize) -> usize {
    x.dim(0) / steps
}

/// Every intermediate of one pre-spike block evaluation.
#[derive(Debug, Clone)]
pub struct PreSpikeOutputs<F: Scalar> {
    pub spikes_in: Tensor<F>,
    pub mid: Tensor<F>,
    pub spikes_mid: Tensor<F>,
    /// `BN(Conv(S'))`, the second residual branch.
    pub branch: Tensor<F>,
    pub out: Tensor<F>,
}

#[derive(Debug, Clone)]
pub struct PreSpikeBlock<F: Scalar> {
    pub name: String,
    pub steps: usize,
    pub act1: SpikeNeuron<F>,
    pub conv1: ConvBn<F>,
    pub temb_proj: Linear<F>,
    pub shortcut: Option<Conv2d<F>>,
    pub act2: SpikeNeuron<F>,
    pub conv2: ConvBn<F>,
    batch: usize,
}

impl<F: Scalar> PreSpikeBlock<F> {
    pub fn new(
        name: &str,
        cin: usize,
        cout: usize,
        temb_dim: usize,
        steps: usize,
        lif: LifParams,
        rng: &mut RngStream,
    ) -> Self {
        Self {
            name: name.to_string(),
            steps,
            act1: SpikeNeuron::new(format!("{name}.act1"), steps, lif),
            conv1: ConvBn::new(&format!("{name}.c1"), cin, cout, 3, 1, rng),
            temb_proj: Linear::new(format!("{name}.temb_proj"), temb_dim, cout, rng),
            shortcut: (cin != cout).then(|| Conv2d::new(format!("{name}.shortcut"), cin, cout, 1, 1, 0, rng)),
            act2: SpikeNeuron::new(format!("{name}.act2"), steps, lif),
            conv2: ConvBn::new(&format!("{name}.c2"), cout, cout, 3, 1, rng),
            batch: 0,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.conv1.conv.in_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.conv1.conv.out_channels()
    }

    pub fn forward_detailed(&self, o_in: &Tensor<F>, temb: &Tensor<F>, ctx: &mut PassCtx<'_, F>) -> Result<PreSpikeOutputs<F>> {
        let spikes_in = self.act1.forward(o_in, ctx)?;
        let h = self.conv1.forward(&spikes_in)?;
        let h = ops::add_channel_bias_fused(&h, &self.temb_proj.forward(temb)?, self.steps)?;
        let mid = match &self.shortcut {
            Some(sc) => h.add(&sc.forward(o_in)?)?,
            None => h.add(o_in)?,
        };
        let spikes_mid = self.act2.forward(&mid, ctx)?;
        let branch = self.conv2.forward(&spikes_mid)?;
        let out = branch.add(&mid)?;
        Ok(PreSpikeOutputs { spikes_in, mid, spikes_mid, branch, out })
    }

    pub fn forward(&self, o_in: &Tensor<F>, temb: &Tensor<F>, ctx: &mut PassCtx<'_, F>) -> Result<Tensor<F>> {
        Ok(self.forward_detailed(o_in, temb, ctx)?.out)
    }

    pub fn forward_train(&mut self, o_in: &Tensor<F>, temb: &Tensor<F>, ctx: &mut PassCtx<'_, F>) -> Result<Tensor<F>> {
        self.batch = fused_batch(o_in, self.steps);
        let s = self.act1.forward_train(o_in, ctx)?;
        let h = self.conv1.forward_train(&s)?;
        let h = ops::add_channel_bias_fused(&h, &self.temb_proj.forward_train(temb)?, self.steps)?;
        let mid = match &mut self.shortcut {
            Some(sc) => h.add(&sc.forward_train(o_in)?)?,
            None => h.add(o_in)?,
        };
        let s2 = self.act2.forward_train(&mid, ctx)?;
        self.conv2.forward_train(&s2)?.add(&mid)
    }

    /// Returns `(dL/dO_in, dL/dtemb)`.
    pub fn backward(&mut self, grad_out: &Tensor<F>) -> Result<(Tensor<F>, Tensor<F>)> {
        let g = self.conv2.backward(grad_out)?;
        let mut g_mid = self.act2.backward(&g)?;
        g_mid.add_assign(grad_out)?;

        let g_tb = ops::channel_bias_fused_backward(&g_mid, self.batch)?;
        let g_temb = self.temb_proj.backward(&g_tb)?;

        let g = self.conv1.backward(&g_mid)?;
        let mut g_in = self.act1.backward(&g)?;
        match &mut self.shortcut {
            Some(sc) => g_in.add_assign(&sc.backward(&g_mid)?)?,
            None => g_in.add_assign(&g_mid)?,
        }
        Ok((g_in, g_temb))
    }
}

impl<F: Scalar> Parameterized<F> for PreSpikeBlock<F> {
    fn visit(&mut self, f: &mut dyn FnMut(String, &mut Tensor<F>, TensorRole)) {
        self.conv1.visit(f);
        self.temb_proj.visit(f);
        if let Some(sc) = &mut self.shortcut {
            sc.visit(f);
        }
        self.conv2.visit(f);
    }
}

/// Every intermediate of one standard block evaluation.
#[derive(Debug, Clone)]
pub struct StandardOutputs<F: Scalar> {
    /// `BN(Conv(S_in)) + proj(temb) + S_in`
    pub pre1: Tensor<F>,
    pub spikes1: Tensor<F>,
    /// `BN(Conv(S1)) + S1`
    pub pre2: Tensor<F>,
    pub spikes2: Tensor<F>,
}

/// Spiking residual block whose shortcut carries spikes. Kept for ablations.
#[derive(Debug, Clone)]
pub struct StandardBlock<F: Scalar> {
    pub name: String,
    pub steps: usize,
    pub conv1: ConvBn<F>,
    pub temb_proj: Linear<F>,
    pub act1: SpikeNeuron<F>,
    pub conv2: ConvBn<F>,
    pub act2: SpikeNeuron<F>,
    batch: usize,
}

impl<F: Scalar> StandardBlock<F> {
    pub fn new(name: &str, channels: usize, temb_dim: usize, steps: usize, lif: LifParams, rng: &mut RngStream) -> Self {
        Self {
            name: name.to_string(),
            steps,
            conv1: ConvBn::new(&format!("{name}.c1"), channels, channels, 3, 1, rng),
            temb_proj: Linear::new(format!("{name}.temb_proj"), temb_dim, channels, rng),
            act1: SpikeNeuron::new(format!("{name}.act1"), steps, lif),
            conv2: ConvBn::new(&format!("{name}.c2"), channels, channels, 3, 1, rng),
            act2: SpikeNeuron::new(format!("{name}.act2"), steps, lif),
            batch: 0,
        }
    }

    /// Disables both batch norms so pre-activations are raw conv sums.
    pub fn bypass_norm(&mut self) {
        self.conv1.bn.bypass = true;
        self.conv2.bn.bypass = true;
    }

    pub fn forward_detailed(&self, s_in: &Tensor<F>, temb: &Tensor<F>, ctx: &mut PassCtx<'_, F>) -> Result<StandardOutputs<F>> {
        let h = self.conv1.forward(s_in)?;
        let h = ops::add_channel_bias_fused(&h, &self.temb_proj.forward(temb)?, self.steps)?;
        let pre1 = h.add(s_in)?;
        let spikes1 = self.act1.forward(&pre1, ctx)?;
        let pre2 = self.conv2.forward(&spikes1)?.add(&spikes1)?;
        let spikes2 = self.act2.forward(&pre2, ctx)?;
        Ok(StandardOutputs { pre1, spikes1, pre2, spikes2 })
    }

    pub fn forward_train(&mut self, s_in: &Tensor<F>, temb: &Tensor<F>, ctx: &mut PassCtx<'_, F>) -> Result<Tensor<F>> {
        self.batch = fused_batch(s_in, self.steps);
        let h = self.conv1.forward_train(s_in)?;
        let h = ops::add_channel_bias_fused(&h, &self.temb_proj.forward_train(temb)?, self.steps)?;
        let s1 = self.act1.forward_train(&h.add(s_in)?, ctx)?;
        let pre2 = self.conv2.forward_train(&s1)?.add(&s1)?;
        self.act2.forward_train(&pre2, ctx)
    }

    /// Returns `(dL/dS_in, dL/dtemb)` given dL/dS2.
    pub fn backward(&mut self, grad_spikes: &Tensor<F>) -> Result<(Tensor<F>, Tensor<F>)> {
        let g_pre2 = self.act2.backward(grad_spikes)?;
        let mut g_s1 = self.conv2.backward(&g_pre2)?;
        g_s1.add_assign(&g_pre2)?;
        let g_pre1 = self.act1.backward(&g_s1)?;
        let g_temb = self
            .temb_proj
            .backward(&ops::channel_bias_fused_backward(&g_pre1, self.batch)?)?;
        let mut g_in = self.conv1.backward(&g_pre1)?;
        g_in.add_assign(&g_pre1)?;
        Ok((g_in, g_temb))
    }
}

impl<F: Scalar> Parameterized<F> for StandardBlock<F> {
    fn visit(&mut self, f: &mut dyn FnMut(String, &mut Tensor<F>, TensorRole)) {
        self.conv1.visit(f);
        self.temb_proj.visit(f);
        self.conv2.visit(f);
    }
}

/// `SN → stride-2 Conv → BN`, halving resolution.
#[derive(Debug, Clone)]
pub struct Downsample<F: Scalar> {
    pub act: SpikeNeuron<F>,
    pub conv: ConvBn<F>,
}

impl<F: Scalar> Downsample<F> {
    pub fn new(name: &str, channels: usize, steps: usize, lif: LifParams, rng: &mut RngStream) -> Self {
        Self {
            act: SpikeNeuron::new(format!("{name}.act"), steps, lif),
            conv: ConvBn::new(name, channels, channels, 3, 2, rng),
        }
    }

    pub fn forward(&self, x: &Tensor<F>, ctx: &mut PassCtx<'_, F>) -> Result<Tensor<F>> {
        self.conv.forward(&self.act.forward(x, ctx)?)
    }

    pub fn forward_train(&mut self, x: &Tensor<F>, ctx: &mut PassCtx<'_, F>) -> Result<Tensor<F>> {
        let s = self.act.forward_train(x, ctx)?;
        self.conv.forward_train(&s)
    }

    pub fn backward(&mut self, grad_out: &Tensor<F>) -> Result<Tensor<F>> {
        let g = self.conv.backward(grad_out)?;
        self.act.backward(&g)
    }
}

/// `SN → nearest ×2 → Conv → BN`, doubling resolution.
#[derive(Debug, Clone)]
pub struct Upsample<F: Scalar> {
    pub act: SpikeNeuron<F>,
    pub conv: ConvBn<F>,
}

impl<F: Scalar> Upsample<F> {
    pub fn new(name: &str, channels: usize, steps: usize, lif: LifParams, rng: &mut RngStream) -> Self {
        Self {
            act: SpikeNeuron::new(format!("{name}.act"), steps, lif),
            conv: ConvBn::new(name, channels, channels, 3, 1, rng),
        }
    }

    pub fn forward(&self, x: &Tensor<F>, ctx: &mut PassCtx<'_, F>) -> Result<Tensor<F>> {
        let s = self.act.forward(x, ctx)?;
        self.conv.forward(&ops::upsample_nearest2x(&s)?)
    }

    pub fn forward_train(&mut self, x: &Tensor<F>, ctx: &mut PassCtx<'_, F>) -> Result<Tensor<F>> {
        let s = self.act.forward_train(x, ctx)?;
        self.conv.forward_train(&ops::upsample_nearest2x(&s)?)
    }

    pub fn backward(&mut self, grad_out: &Tensor<F>) -> Result<Tensor<F>> {
        let g = self.conv.backward(grad_out)?;
        let g = ops::upsample_nearest2x_backward(&g)?;
        self.act.backward(&g)
    }
}

impl<F: Scalar> Parameterized<F> for Downsample<F> {
    fn visit(&mut self, f: &mut dyn FnMut(String, &mut Tensor<F>, TensorRole)) {
        self.conv.visit(f);
    }
}

impl<F: Scalar> Parameterized<F> for Upsample<F> {
    fn visit(&mut self, f: &mut dyn FnMut(String, &mut Tensor<F>, TensorRole)) {
        self.conv.visit(f);
    }
}
