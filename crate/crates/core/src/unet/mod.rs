//! Spiking U-Net noise predictor ε_θ(x_t, t).
//!
//! The analog image is replicated over `T` spiking steps and fused into the
//! batch axis, so every convolution and batch norm sees `[T·B, C, H, W]`.
//! Blocks pass real-valued currents between them; spikes exist only between a
//! neuron and the convolution that consumes it. Skip connections carry the
//! real-valued block outputs and are concatenated on the way up. The decoder
//! averages the last spike train over `T` and applies one convolution, which
//! is zero-initialized.

pub mod blocks;
pub mod layers;

use crate::diffusion::{GuidanceConfig, NoisePredictor, TrainableDenoiser};
use crate::error::{Error, Result};
use crate::lif::{Firing, LifParams};
use crate::ops;
use crate::rng::{streams, RngStream};
use crate::tensor::{Scalar, Tensor};

pub use blocks::{Downsample, PreSpikeBlock, PreSpikeOutputs, StandardBlock, StandardOutputs, Upsample};
pub use layers::{
    sinusoidal_embedding, BatchNorm2d, Conv2d, ConvBn, Linear, Parameterized, PassCtx, SpikeNeuron, TensorRole,
    TimeEmbedding,
};

#[derive(Debug, Clone, PartialEq)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    /// One multiplier per resolution level.
    pub channel_mults: Vec<usize>,
    pub blocks_per_level: usize,
    /// Spiking simulation steps T.
    pub time_steps: usize,
    pub lif: LifParams,
    pub temb_dim: usize,
    pub image_size: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            base_channels: 16,
            channel_mults: vec![1, 2],
            blocks_per_level: 1,
            time_steps: 4,
            lif: LifParams::default(),
            temb_dim: 32,
            image_size: 16,
        }
    }
}

impl UNetConfig {
    /// Keys accepted by [`Self::set`], in the order [`Self::to_pairs`] emits them.
    pub const KEYS: &'static [&'static str] = &[
        "in_channels",
        "base_channels",
        "channel_mults",
        "blocks_per_level",
        "time_steps",
        "lif_decay",
        "lif_threshold",
        "lif_reset",
        "lif_alpha",
        "temb_dim",
        "image_size",
    ];

    /// `key=value` form; floats print in shortest round-trip notation.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let mults: Vec<String> = self.channel_mults.iter().map(usize::to_string).collect();
        vec![
            ("in_channels", self.in_channels.to_string()),
            ("base_channels", self.base_channels.to_string()),
            ("channel_mults", mults.join(",")),
            ("blocks_per_level", self.blocks_per_level.to_string()),
            ("time_steps", self.time_steps.to_string()),
            ("lif_decay", self.lif.decay.to_string()),
            ("lif_threshold", self.lif.threshold.to_string()),
            ("lif_reset", self.lif.reset.to_string()),
            ("lif_alpha", self.lif.alpha.to_string()),
            ("temb_dim", self.temb_dim.to_string()),
            ("image_size", self.image_size.to_string()),
        ]
    }

    /// Sets one field from its text form. Returns `Ok(false)` for keys that are not model fields.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
        }
        match key {
            "in_channels" => self.in_channels = num(key, value)?,
            "base_channels" => self.base_channels = num(key, value)?,
            "channel_mults" => {
                self.channel_mults = value.split(',').map(|v| num(key, v)).collect::<Result<_>>()?;
            }
            "blocks_per_level" => self.blocks_per_level = num(key, value)?,
            "time_steps" => self.time_steps = num(key, value)?,
            "lif_decay" => self.lif.decay = num(key, value)?,
            "lif_threshold" => self.lif.threshold = num(key, value)?,
            "lif_reset" => self.lif.reset = num(key, value)?,
            "lif_alpha" => self.lif.alpha = num(key, value)?,
            "temb_dim" => self.temb_dim = num(key, value)?,
            "image_size" => self.image_size = num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_text(&self) -> String {
        self.to_pairs().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Parses the output of [`Self::to_text`]. Every key must be present exactly once.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::BTreeSet::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value, got `{line}`")))?;
            if !cfg.set(k.trim(), v)? {
                return Err(Error::Config(format!("unknown model key `{}`", k.trim())));
            }
            if !seen.insert(k.trim().to_string()) {
                return Err(Error::Config(format!("duplicate model key `{}`", k.trim())));
            }
        }
        if let Some(missing) = Self::KEYS.iter().find(|k| !seen.contains(**k)) {
            return Err(Error::Config(format!("missing model key `{missing}`")));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn levels(&self) -> usize {
        self.channel_mults.len()
    }

    pub fn level_channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_mults[level]
    }

    /// Spatial size at `level`.
    pub fn level_size(&self, level: usize) -> usize {
        self.image_size >> level
    }

    pub fn validate(&self) -> Result<()> {
        if self.channel_mults.is_empty() {
            return Err(Error::Config("at least one resolution level is required".into()));
        }
        if self.in_channels == 0 || self.base_channels == 0 || self.channel_mults.contains(&0) {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.blocks_per_level == 0 {
            return Err(Error::Config("blocks_per_level must be at least 1".into()));
        }
        if self.time_steps == 0 {
            return Err(Error::Config("time_steps must be at least 1".into()));
        }
        if self.temb_dim < 2 || self.temb_dim % 2 != 0 {
            return Err(Error::Config(format!("temb_dim {} must be even and >= 2", self.temb_dim)));
        }
        let factor = 1usize << (self.levels() - 1);
        if self.image_size == 0 || self.image_size % factor != 0 {
            return Err(Error::Config(format!(
                "image_size {} must be divisible by {factor} for {} levels",
                self.image_size,
                self.levels()
            )));
        }
        self.lif.validate()
    }
}

#[derive(Debug, Clone)]
pub struct DownLevel<F: Scalar> {
    pub blocks: Vec<PreSpikeBlock<F>>,
    pub downsample: Option<Downsample<F>>,
}

#[derive(Debug, Clone)]
pub struct UpLevel<F: Scalar> {
    pub blocks: Vec<PreSpikeBlock<F>>,
    pub upsample: Option<Upsample<F>>,
}

#[derive(Debug, Clone, Default)]
struct TrainCache {
    batch: usize,
    /// Channels of the running activation at each up-block concatenation, in forward order.
    concat_split: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct SpikingUNet<F: Scalar = f32> {
    config: UNetConfig,
    pub temb: TimeEmbedding<F>,
    pub enc: ConvBn<F>,
    pub down: Vec<DownLevel<F>>,
    pub mid: PreSpikeBlock<F>,
    pub up: Vec<UpLevel<F>>,
    pub dec_act: SpikeNeuron<F>,
    pub dec_conv: Conv2d<F>,
    cache: Option<TrainCache>,
}

impl<F: Scalar> SpikingUNet<F> {
    /// Builds a model with Kaiming-normal weights drawn from the init stream of `seed`.
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = RngStream::new(seed, streams::INIT);
        let rng = &mut rng;
        let (steps, lif, d) = (config.time_steps, config.lif, config.temb_dim);
        let temb = TimeEmbedding::new(d, rng);
        let ch0 = config.level_channels(0);
        let enc = ConvBn::new("enc", config.in_channels, ch0, 3, 1, rng);

        let mut down = Vec::new();
        let mut skip_channels = Vec::new();
        let mut ch = ch0;
        for level in 0..config.levels() {
            let out = config.level_channels(level);
            let mut blocks = Vec::new();
            for i in 0..config.blocks_per_level {
                blocks.push(PreSpikeBlock::new(&format!("down{level}.b{i}"), ch, out, d, steps, lif, rng));
                ch = out;
                skip_channels.push(ch);
            }
            let downsample = (level + 1 < config.levels())
                .then(|| Downsample::new(&format!("down{level}.ds"), ch, steps, lif, rng));
            down.push(DownLevel { blocks, downsample });
        }

        let mid = PreSpikeBlock::new("mid", ch, ch, d, steps, lif, rng);

        let mut up = Vec::new();
        for level in (0..config.levels()).rev() {
            let out = config.level_channels(level);
            let mut blocks = Vec::new();
            for i in 0..config.blocks_per_level {
                let skip = skip_channels.pop().expect("one skip per down block");
                blocks.push(PreSpikeBlock::new(&format!("up{level}.b{i}"), ch + skip, out, d, steps, lif, rng));
                ch = out;
            }
            let upsample = (level > 0).then(|| Upsample::new(&format!("up{level}.us"), ch, steps, lif, rng));
            up.push(UpLevel { blocks, upsample });
        }

        let dec_act = SpikeNeuron::new("dec.act", steps, lif);
        let dec_conv = Conv2d::zeroed("dec.conv", ch, config.in_channels, 3, 1, 1);
        Ok(Self { config, temb, enc, down, mid, up, dec_act, dec_conv, cache: None })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    /// Every spiking neuron layer, in forward order.
    pub fn neurons_mut(&mut self) -> Vec<&mut SpikeNeuron<F>> {
        let mut out = Vec::new();
        for level in &mut self.down {
            for b in &mut level.blocks {
                out.push(&mut b.act1);
                out.push(&mut b.act2);
            }
            if let Some(ds) = &mut level.downsample {
                out.push(&mut ds.act);
            }
        }
        out.push(&mut self.mid.act1);
        out.push(&mut self.mid.act2);
        for level in &mut self.up {
            for b in &mut level.blocks {
                out.push(&mut b.act1);
                out.push(&mut b.act2);
            }
            if let Some(us) = &mut level.upsample {
                out.push(&mut us.act);
            }
        }
        out.push(&mut self.dec_act);
        out
    }

    pub fn set_firing(&mut self, firing: Firing) {
        for n in self.neurons_mut() {
            n.firing = firing;
        }
    }

    /// Replaces the zero-initialized output convolution with random weights.
    pub fn randomize_output(&mut self, seed: u64) {
        let (cin, cout) = (self.dec_conv.in_channels(), self.dec_conv.out_channels());
        let mut rng = RngStream::new(seed, streams::INIT);
        self.dec_conv = Conv2d::new("dec.conv", cin, cout, 3, 1, 1, &mut rng);
    }

    fn visit_convs(&mut self, f: &mut dyn FnMut(&mut Conv2d<F>)) {
        f(&mut self.enc.conv);
        let block = |b: &mut PreSpikeBlock<F>, f: &mut dyn FnMut(&mut Conv2d<F>)| {
            f(&mut b.conv1.conv);
            if let Some(sc) = &mut b.shortcut {
                f(sc);
            }
            f(&mut b.conv2.conv);
        };
        for level in &mut self.down {
            for b in &mut level.blocks {
                block(b, f);
            }
            if let Some(ds) = &mut level.downsample {
                f(&mut ds.conv.conv);
            }
        }
        block(&mut self.mid, f);
        for level in &mut self.up {
            for b in &mut level.blocks {
                block(b, f);
            }
            if let Some(us) = &mut level.upsample {
                f(&mut us.conv.conv);
            }
        }
        f(&mut self.dec_conv);
    }

    /// Test hook: negates the weight gradient of the named convolution
    /// (`<layer>.conv`, `<block>.shortcut`, `dec.conv`).
    #[doc(hidden)]
    pub fn inject_backward_fault(&mut self, conv_name: &str) -> Result<()> {
        let mut found = false;
        self.visit_convs(&mut |c| {
            if c.name == conv_name {
                c.inject_sign_flip();
                found = true;
            }
        });
        if found {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("no convolution named `{conv_name}`")))
        }
    }

    /// Names of all convolutions, in forward order.
    pub fn conv_names(&mut self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit_convs(&mut |c| names.push(c.name.clone()));
        names
    }

    pub fn num_params(&mut self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t, role| {
            if role == TensorRole::Param {
                n += t.len();
            }
        });
        n
    }

    pub fn zero_grad(&mut self) {
        self.visit(&mut |_, t, _| t.zero_grad());
    }

    fn check_input(&self, x: &Tensor<F>, ts: &[usize]) -> Result<()> {
        let c = &self.config;
        let expect = [c.in_channels, c.image_size, c.image_size];
        if x.ndim() != 4 || x.shape()[1..] != expect {
            return Err(Error::shape(
                "unet",
                format!("input {:?} does not match [B,{},{},{}]", x.shape(), expect[0], expect[1], expect[2]),
            ));
        }
        if ts.len() != x.dim(0) {
            return Err(Error::shape("unet", format!("{} timesteps for batch {}", ts.len(), x.dim(0))));
        }
        Ok(())
    }

    /// Replicates `x[B,C,H,W]` over T steps into `[T·B,C,H,W]` and applies the first Conv-BN.
    pub fn encode(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        self.enc.forward(&ops::replicate_time(x, self.config.time_steps)?)
    }

    /// Inference forward pass. Batch norms use running statistics.
    pub fn forward_with(&self, x: &Tensor<F>, ts: &[usize], ctx: &mut PassCtx<'_, F>) -> Result<Tensor<F>> {
        self.check_input(x, ts)?;
        let steps = self.config.time_steps;
        let temb = self.temb.forward(ts)?;
        let mut h = self.encode(x)?;
        let mut skips = Vec::new();
        for level in &self.down {
            for b in &level.blocks {
                h = b.forward(&h, &temb, ctx)?;
                skips.push(h.clone());
            }
            if let Some(ds) = &level.downsample {
                h = ds.forward(&h, ctx)?;
            }
        }
        h = self.mid.forward(&h, &temb, ctx)?;
        for level in &self.up {
            for b in &level.blocks {
                let skip = skips.pop().expect("skip stack");
                h = b.forward(&ops::concat_channels(&h, &skip)?, &temb, ctx)?;
            }
            if let Some(us) = &level.upsample {
                h = us.forward(&h, ctx)?;
            }
        }
        let spikes = self.dec_act.forward(&h, ctx)?;
        self.dec_conv.forward(&ops::mean_time(&spikes, steps)?)
    }

    pub fn forward(&self, x: &Tensor<F>, ts: &[usize]) -> Result<Tensor<F>> {
        self.forward_with(x, ts, &mut PassCtx::plain())
    }

    /// Training forward pass: batch statistics, caches for [`Self::backward_pass`].
    pub fn forward_train_with(&mut self, x: &Tensor<F>, ts: &[usize], ctx: &mut PassCtx<'_, F>) -> Result<Tensor<F>> {
        self.check_input(x, ts)?;
        let steps = self.config.time_steps;
        let mut cache = TrainCache { batch: x.dim(0), concat_split: Vec::new() };
        let temb = self.temb.forward_train(ts)?;
        let mut h = self.enc.forward_train(&ops::replicate_time(x, steps)?)?;
        let mut skips = Vec::new();
        for level in &mut self.down {
            for b in &mut level.blocks {
                h = b.forward_train(&h, &temb, ctx)?;
                skips.push(h.clone());
            }
            if let Some(ds) = &mut level.downsample {
                h = ds.forward_train(&h, ctx)?;
            }
        }
        h = self.mid.forward_train(&h, &temb, ctx)?;
        for level in &mut self.up {
            for b in &mut level.blocks {
                let skip = skips.pop().expect("skip stack");
                cache.concat_split.push(h.dim(1));
                h = b.forward_train(&ops::concat_channels(&h, &skip)?, &temb, ctx)?;
            }
            if let Some(us) = &mut level.upsample {
                h = us.forward_train(&h, ctx)?;
            }
        }
        let spikes = self.dec_act.forward_train(&h, ctx)?;
        let out = self.dec_conv.forward_train(&ops::mean_time(&spikes, steps)?)?;
        self.cache = Some(cache);
        Ok(out)
    }

    /// Backpropagates dL/dε̂ through the cached training pass, accumulating parameter gradients.
    pub fn backward_pass(&mut self, grad_out: &Tensor<F>) -> Result<()> {
        let mut cache = self
            .cache
            .take()
            .ok_or_else(|| Error::InvalidArgument("backward without a training forward".into()))?;
        let steps = self.config.time_steps;
        let mut g_temb = Tensor::<F>::zeros(&[cache.batch, self.config.temb_dim]);

        let g = self.dec_conv.backward(grad_out)?;
        let g = ops::mean_time_backward(&g, steps)?;
        let mut g = self.dec_act.backward(&g)?;

        let mut skip_grads = Vec::new();
        for level in self.up.iter_mut().rev() {
            if let Some(us) = &mut level.upsample {
                g = us.backward(&g)?;
            }
            for b in level.blocks.iter_mut().rev() {
                let (g_cat, gt) = b.backward(&g)?;
                g_temb.add_assign(&gt)?;
                let split = cache.concat_split.pop().expect("concat record");
                let (g_h, g_skip) = ops::split_channels(&g_cat, split)?;
                skip_grads.push(g_skip);
                g = g_h;
            }
        }

        let (g_mid, gt) = self.mid.backward(&g)?;
        g_temb.add_assign(&gt)?;
        g = g_mid;

        for level in self.down.iter_mut().rev() {
            if let Some(ds) = &mut level.downsample {
                g = ds.backward(&g)?;
            }
            for b in level.blocks.iter_mut().rev() {
                g.add_assign(&skip_grads.pop().expect("skip gradient"))?;
                let (g_in, gt) = b.backward(&g)?;
                g_temb.add_assign(&gt)?;
                g = g_in;
            }
        }

        self.enc.backward(&g)?;
        self.temb.backward(&g_temb)?;
        Ok(())
    }
}

impl<F: Scalar> Parameterized<F> for SpikingUNet<F> {
    fn visit(&mut self, f: &mut dyn FnMut(String, &mut Tensor<F>, TensorRole)) {
        self.temb.visit(f);
        self.enc.visit(f);
        for level in &mut self.down {
            for b in &mut level.blocks {
                b.visit(f);
            }
            if let Some(ds) = &mut level.downsample {
                ds.visit(f);
            }
        }
        self.mid.visit(f);
        for level in &mut self.up {
            for b in &mut level.blocks {
                b.visit(f);
            }
            if let Some(us) = &mut level.upsample {
                us.visit(f);
            }
        }
        self.dec_conv.visit(f);
    }
}

impl<F: Scalar> NoisePredictor<F> for SpikingUNet<F> {
    fn predict(&self, x_t: &Tensor<F>, ts: &[usize], guidance: &GuidanceConfig) -> Result<Tensor<F>> {
        self.forward_with(x_t, ts, &mut PassCtx::with_threshold(guidance.threshold))
    }
}

impl<F: Scalar> TrainableDenoiser<F> for SpikingUNet<F> {
    fn forward_train(&mut self, x_t: &Tensor<F>, ts: &[usize]) -> Result<Tensor<F>> {
        self.forward_train_with(x_t, ts, &mut PassCtx::plain())
    }

    fn backward(&mut self, grad_out: &Tensor<F>) -> Result<()> {
        self.backward_pass(grad_out)
    }
}
