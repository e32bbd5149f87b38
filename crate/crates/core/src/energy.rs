//! Energy estimates from operation counts and measured firing rates.
//!
//! A layer whose input is a spike train performs one accumulate per synapse
//! per input spike, so its cost is `rate · T · MACs · E_AC`. Layers fed with
//! real values pay full multiply-accumulates. Batch-norm and elementwise adds
//! are counted but kept out of the totals.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::diffusion::{q_sample_batch, NoiseSchedule};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::{Scalar, Tensor};
use crate::unet::{PassCtx, SpikingUNet, UNetConfig};

/// Per-operation energy in picojoules.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyConstants {
    pub e_mac: f64,
    pub e_ac: f64,
}

impl Default for EnergyConstants {
    fn default() -> Self {
        Self { e_mac: 4.6, e_ac: 0.9 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnergyMode {
    Snn,
    Ann,
}

impl std::fmt::Display for EnergyMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EnergyMode::Snn => "snn",
            EnergyMode::Ann => "ann",
        })
    }
}

impl std::str::FromStr for EnergyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "snn" => Ok(EnergyMode::Snn),
            "ann" => Ok(EnergyMode::Ann),
            other => Err(Error::InvalidArgument(format!("unknown energy mode `{other}`"))),
        }
    }
}

/// How a layer's input arrives, which decides what each MAC costs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OpKind {
    /// First conv on the replicated analog image: a MAC every step.
    Encoding,
    /// Input is the spike train of the named neuron layer.
    Spiking { neuron: String },
    /// Real-valued input, either every step or once per image.
    Analog { per_step: bool },
}

impl OpKind {
    fn label(&self) -> &'static str {
        match self {
            OpKind::Encoding => "encoding",
            OpKind::Spiking { .. } => "spiking",
            OpKind::Analog { per_step: true } => "analog_per_step",
            OpKind::Analog { per_step: false } => "analog_once",
        }
    }
}

/// Operation counts of one weighted layer, per image and per time step.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerOps {
    pub name: String,
    pub kind: OpKind,
    pub macs: u64,
}

/// Full op census of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct OpCounts {
    pub layers: Vec<LayerOps>,
    /// Batch-norm affine ops per image per step (one per output element).
    pub bn_ops: u64,
    /// Residual and embedding additions per image per step.
    pub add_ops: u64,
}

impl OpCounts {
    /// Neuron layers referenced by spiking entries.
    pub fn neurons(&self) -> Vec<&str> {
        self.layers
            .iter()
            .filter_map(|l| match &l.kind {
                OpKind::Spiking { neuron } => Some(neuron.as_str()),
                _ => None,
            })
            .collect()
    }
}

fn conv_macs(cin: usize, cout: usize, k: usize, out_hw: usize) -> u64 {
    (cout * cin * k * k * out_hw * out_hw) as u64
}

struct Census {
    counts: OpCounts,
}

impl Census {
    fn push(&mut self, name: String, kind: OpKind, macs: u64) {
        self.counts.layers.push(LayerOps { name, kind, macs });
    }

    fn spiking(&mut self, name: String, neuron: String, macs: u64) {
        self.push(name, OpKind::Spiking { neuron }, macs);
    }

    fn block(&mut self, name: &str, cin: usize, cout: usize, temb_dim: usize, hw: usize) {
        let px = (hw * hw) as u64;
        let c = cout as u64;
        self.spiking(format!("{name}.c1.conv"), format!("{name}.act1"), conv_macs(cin, cout, 3, hw));
        self.push(format!("{name}.temb_proj"), OpKind::Analog { per_step: false }, (temb_dim * cout) as u64);
        if cin != cout {
            self.push(format!("{name}.shortcut"), OpKind::Analog { per_step: true }, conv_macs(cin, cout, 1, hw));
        }
        self.spiking(format!("{name}.c2.conv"), format!("{name}.act2"), conv_macs(cout, cout, 3, hw));
        self.counts.bn_ops += 2 * c * px;
        // temb broadcast, shortcut sum, second residual sum
        self.counts.add_ops += 3 * c * px;
    }
}

/// Counts MACs per image and time step for every weighted layer of the model described by `config`.
pub fn count_ops(config: &UNetConfig) -> Result<OpCounts> {
    config.validate()?;
    let d = config.temb_dim;
    let mut census = Census { counts: OpCounts { layers: Vec::new(), bn_ops: 0, add_ops: 0 } };
    let c = &mut census;
    c.push("temb.fc1".into(), OpKind::Analog { per_step: false }, (d * d) as u64);
    c.push("temb.fc2".into(), OpKind::Analog { per_step: false }, (d * d) as u64);

    let size0 = config.image_size;
    let ch0 = config.level_channels(0);
    c.push("enc.conv".into(), OpKind::Encoding, conv_macs(config.in_channels, ch0, 3, size0));
    c.counts.bn_ops += (ch0 * size0 * size0) as u64;

    let mut ch = ch0;
    let mut skips = Vec::new();
    for level in 0..config.levels() {
        let (out, hw) = (config.level_channels(level), config.level_size(level));
        for i in 0..config.blocks_per_level {
            c.block(&format!("down{level}.b{i}"), ch, out, d, hw);
            ch = out;
            skips.push(ch);
        }
        if level + 1 < config.levels() {
            let name = format!("down{level}.ds");
            let hw2 = config.level_size(level + 1);
            c.spiking(format!("{name}.conv"), format!("{name}.act"), conv_macs(ch, ch, 3, hw2));
            c.counts.bn_ops += (ch * hw2 * hw2) as u64;
        }
    }
    let deepest = config.level_size(config.levels() - 1);
    c.block("mid", ch, ch, d, deepest);
    for level in (0..config.levels()).rev() {
        let (out, hw) = (config.level_channels(level), config.level_size(level));
        for i in 0..config.blocks_per_level {
            let skip = skips.pop().expect("one skip per down block");
            c.block(&format!("up{level}.b{i}"), ch + skip, out, d, hw);
            ch = out;
        }
        if level > 0 {
            let name = format!("up{level}.us");
            let hw2 = config.level_size(level - 1);
            c.spiking(format!("{name}.conv"), format!("{name}.act"), conv_macs(ch, ch, 3, hw2));
            c.counts.bn_ops += (ch * hw2 * hw2) as u64;
        }
    }
    // conv(mean_T S) = mean_T conv(S): the decoder accumulates spikes like any other layer.
    c.spiking("dec.conv".into(), "dec.act".into(), conv_macs(ch, config.in_channels, 3, size0));
    Ok(census.counts)
}

/// Running spike averages per neuron layer.
#[derive(Debug, Clone, Default)]
pub struct RateMeter {
    sums: BTreeMap<String, (f64, u64)>,
}

impl RateMeter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn observe<F: Scalar>(&mut self, name: &str, spikes: &Tensor<F>) {
        let entry = self.sums.entry(name.to_string()).or_insert((0.0, 0));
        entry.0 += spikes.data().iter().map(|v| v.as_f64()).sum::<f64>();
        entry.1 += spikes.len() as u64;
    }

    /// Mean spike value per layer over every site and step seen so far.
    pub fn rates(&self) -> BTreeMap<String, f64> {
        self.sums
            .iter()
            .map(|(k, &(s, n))| (k.clone(), if n == 0 { 0.0 } else { s / n as f64 }))
            .collect()
    }
}

/// Noises `batch` to uniformly drawn timesteps and records every neuron layer's firing rate.
pub fn measure_firing_rates<F: Scalar>(
    model: &SpikingUNet<F>,
    batch: &Tensor<F>,
    sched: &NoiseSchedule,
    rng: &mut RngStream,
) -> Result<BTreeMap<String, f64>> {
    let n = batch.dim(0);
    let ts: Vec<usize> = (0..n).map(|_| 1 + rng.below(sched.steps() as u64) as usize).collect();
    let eps = Tensor::<F>::randn(batch.shape(), rng);
    let x_t = q_sample_batch(batch, &ts, &eps, sched)?;
    let mut meter = RateMeter::new();
    let mut obs = |name: &str, s: &Tensor<F>| meter.observe(name, s);
    model.forward_with(&x_t, &ts, &mut PassCtx { threshold: None, observer: Some(&mut obs) })?;
    Ok(meter.rates())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerEnergy {
    pub name: String,
    pub kind: OpKind,
    pub macs: u64,
    /// Input firing rate, for spiking layers.
    pub rate: Option<f64>,
    /// Effective operations charged: SOPs for spiking layers, MACs otherwise.
    pub ops: f64,
    pub energy_pj: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnergyReport {
    pub mode: EnergyMode,
    pub time_steps: usize,
    pub constants: EnergyConstants,
    pub layers: Vec<LayerEnergy>,
    pub total_pj: f64,
    /// Excluded from the total.
    pub bn_ops: u64,
    /// Excluded from the total.
    pub add_ops: u64,
}

impl EnergyReport {
    pub fn total_mj(&self) -> f64 {
        self.total_pj * 1e-9
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "mode: {}", self.mode);
        let _ = writeln!(s, "time steps: {}", self.time_steps);
        let _ = writeln!(s, "E_MAC = {} pJ, E_AC = {} pJ", self.constants.e_mac, self.constants.e_ac);
        let _ = writeln!(s);
        let _ = writeln!(s, "{:<22} {:<16} {:>12} {:>8} {:>14} {:>14}", "layer", "kind", "MACs", "rate", "ops", "energy_pJ");
        for l in &self.layers {
            let rate = l.rate.map_or("-".to_string(), |r| format!("{r:.4}"));
            let _ = writeln!(
                s,
                "{:<22} {:<16} {:>12} {:>8} {:>14.1} {:>14.1}",
                l.name,
                l.kind.label(),
                l.macs,
                rate,
                l.ops,
                l.energy_pj
            );
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "total: {:.1} pJ ({:.6} mJ) per image", self.total_pj, self.total_mj());
        let _ = writeln!(s, "not included: {} batch-norm ops, {} additions", self.bn_ops, self.add_ops);
        s
    }

    /// One row per layer, then a `total` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,kind,macs,rate,time_steps,ops,energy_pj\n");
        for l in &self.layers {
            let rate = l.rate.map_or(String::new(), |r| r.to_string());
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                l.name,
                l.kind.label(),
                l.macs,
                rate,
                self.time_steps,
                l.ops,
                l.energy_pj
            );
        }
        let _ = writeln!(s, "total,,,,{},,{}", self.time_steps, self.total_pj);
        s
    }
}

/// Energy per image. In SNN mode the rates must cover exactly the neuron
/// layers named by the spiking entries of `counts`.
pub fn energy_report(
    counts: &OpCounts,
    rates: &BTreeMap<String, f64>,
    time_steps: usize,
    constants: EnergyConstants,
    mode: EnergyMode,
) -> Result<EnergyReport> {
    if time_steps == 0 {
        return Err(Error::InvalidArgument("time_steps must be at least 1".into()));
    }
    let needed: std::collections::BTreeSet<&str> = counts.neurons().into_iter().collect();
    let given: std::collections::BTreeSet<&str> = rates.keys().map(String::as_str).collect();
    if needed != given {
        let missing: Vec<_> = needed.difference(&given).collect();
        let extra: Vec<_> = given.difference(&needed).collect();
        return Err(Error::InvalidArgument(format!(
            "firing rates do not match the counted layers: missing {missing:?}, unexpected {extra:?}"
        )));
    }
    for (name, &r) in rates {
        if !(0.0..=1.0).contains(&r) {
            return Err(Error::InvalidArgument(format!("firing rate {r} of `{name}` outside [0,1]")));
        }
    }

    let t = time_steps as f64;
    let layers: Vec<LayerEnergy> = counts
        .layers
        .iter()
        .map(|l| {
            let macs = l.macs as f64;
            let rate = match &l.kind {
                OpKind::Spiking { neuron } => Some(rates[neuron]),
                _ => None,
            };
            let (ops, e) = match (mode, &l.kind) {
                (EnergyMode::Ann, _) => (macs, constants.e_mac),
                (EnergyMode::Snn, OpKind::Spiking { .. }) => (rate.unwrap_or(0.0) * t * macs, constants.e_ac),
                (EnergyMode::Snn, OpKind::Encoding | OpKind::Analog { per_step: true }) => (t * macs, constants.e_mac),
                (EnergyMode::Snn, OpKind::Analog { per_step: false }) => (macs, constants.e_mac),
            };
            LayerEnergy { name: l.name.clone(), kind: l.kind.clone(), macs: l.macs, rate, ops, energy_pj: ops * e }
        })
        .collect();
    let total_pj = layers.iter().map(|l| l.energy_pj).sum();
    let steps = if mode == EnergyMode::Snn { time_steps as u64 } else { 1 };
    Ok(EnergyReport {
        mode,
        time_steps,
        constants,
        layers,
        total_pj,
        bn_ops: counts.bn_ops * steps,
        add_ops: counts.add_ops * steps,
    })
}
