//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Unknown or repeated keys are
//! errors. [`RunConfig::to_text`] writes every key with its effective value,
//! and parsing that text reproduces the same configuration.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use sddpm_core::energy::EnergyConstants;
use sddpm_core::unet::UNetConfig;

use crate::CliError;

/// Guidance thresholds swept by `sample` in sweep mode unless overridden.
pub const DEFAULT_SWEEP: [f64; 7] = [0.997, 0.998, 0.999, 1.0, 1.001, 1.002, 1.003];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    TwoMode,
    Blobs,
    Idx,
}

impl DatasetKind {
    fn name(self) -> &'static str {
        match self {
            DatasetKind::TwoMode => "two_mode",
            DatasetKind::Blobs => "blobs",
            DatasetKind::Idx => "idx",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    Single,
    Sweep,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub unet: UNetConfig,

    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,

    pub lr: f64,
    pub batch: usize,
    pub steps: u64,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub log_every: u64,

    pub dataset: DatasetKind,
    pub dataset_path: Option<PathBuf>,
    pub dataset_size: usize,
    pub dataset_noise: f64,

    pub guidance_threshold: Option<f64>,
    pub sample_mode: SampleMode,
    pub sweep_thresholds: Vec<f64>,
    pub sample_count: usize,
    pub grid_cols: usize,

    pub probe_batch: usize,
    pub e_mac: f64,
    pub e_ac: f64,

    /// Sign-flip fault for `gradcheck`; a test hook.
    pub gradcheck_fault: Option<String>,

    pub checkpoint: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// 0 picks the machine default.
    pub threads: usize,

    /// Keys given explicitly in the parsed text, as opposed to defaults.
    explicit: BTreeSet<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            unet: UNetConfig::default(),
            diffusion_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            lr: 1e-5,
            batch: 128,
            steps: 0,
            seed: 0,
            checkpoint_every: 500,
            log_every: 100,
            dataset: DatasetKind::TwoMode,
            dataset_path: None,
            dataset_size: 1024,
            dataset_noise: 0.05,
            guidance_threshold: None,
            sample_mode: SampleMode::Single,
            sweep_thresholds: DEFAULT_SWEEP.to_vec(),
            sample_count: 16,
            grid_cols: 4,
            probe_batch: 16,
            e_mac: 4.6,
            e_ac: 0.9,
            gradcheck_fault: None,
            checkpoint: None,
            out_dir: PathBuf::from("out"),
            threads: 0,
            explicit: BTreeSet::new(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value
        .parse()
        .map_err(|_| CliError::Usage(format!("`{key}`: cannot parse `{value}`")))
}

fn optional(value: &str) -> Option<&str> {
    match value {
        "" | "none" | "off" => None,
        v => Some(v),
    }
}

fn floats(key: &str, value: &str) -> Result<Vec<f64>, CliError> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

impl RunConfig {
    pub fn energy_constants(&self) -> EnergyConstants {
        EnergyConstants { e_mac: self.e_mac, e_ac: self.e_ac }
    }

    /// Whether `key` was set in the parsed text or by a command-line flag.
    pub fn is_explicit(&self, key: &str) -> bool {
        self.explicit.contains(key)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let value = value.trim();
        if self.unet.set(key, value).map_err(|e| CliError::Usage(e.to_string()))? {
            self.explicit.insert(key.to_string());
            return Ok(());
        }
        match key {
            "diffusion_steps" => self.diffusion_steps = parse(key, value)?,
            "beta_start" => self.beta_start = parse(key, value)?,
            "beta_end" => self.beta_end = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "batch" => self.batch = parse(key, value)?,
            "steps" => self.steps = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "log_every" => self.log_every = parse(key, value)?,
            "dataset" => {
                self.dataset = match value {
                    "two_mode" => DatasetKind::TwoMode,
                    "blobs" => DatasetKind::Blobs,
                    "idx" => DatasetKind::Idx,
                    other => return Err(CliError::Usage(format!("unknown dataset `{other}` (two_mode, blobs, idx)"))),
                }
            }
            "dataset_path" => self.dataset_path = optional(value).map(PathBuf::from),
            "dataset_size" => self.dataset_size = parse(key, value)?,
            "dataset_noise" => self.dataset_noise = parse(key, value)?,
            "guidance_threshold" => self.guidance_threshold = optional(value).map(|v| parse(key, v)).transpose()?,
            "sample_mode" => {
                self.sample_mode = match value {
                    "single" => SampleMode::Single,
                    "sweep" => SampleMode::Sweep,
                    other => return Err(CliError::Usage(format!("unknown sample_mode `{other}` (single, sweep)"))),
                }
            }
            "sweep_thresholds" => self.sweep_thresholds = floats(key, value)?,
            "sample_count" => self.sample_count = parse(key, value)?,
            "grid_cols" => self.grid_cols = parse(key, value)?,
            "probe_batch" => self.probe_batch = parse(key, value)?,
            "e_mac" => self.e_mac = parse(key, value)?,
            "e_ac" => self.e_ac = parse(key, value)?,
            "gradcheck_fault" => self.gradcheck_fault = optional(value).map(String::from),
            "checkpoint" => self.checkpoint = optional(value).map(PathBuf::from),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "threads" => self.threads = parse(key, value)?,
            other => return Err(CliError::Usage(format!("unknown configuration key `{other}`"))),
        }
        self.explicit.insert(key.to_string());
        Ok(())
    }

    pub fn parse_str(text: &str) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        let mut seen = BTreeSet::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("line {}: expected `key = value`, got `{line}`", no + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(CliError::Usage(format!("line {}: `{key}` given twice", no + 1)));
            }
            cfg.set(key, value).map_err(|e| match e {
                CliError::Usage(msg) => CliError::Usage(format!("line {}: {msg}", no + 1)),
                other => other,
            })?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse_str(&text)
    }

    /// Checks cross-field constraints shared by every command.
    pub fn validate(&self) -> Result<(), CliError> {
        self.unet.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        let bad = |msg: String| Err(CliError::Usage(msg));
        if self.diffusion_steps == 0 {
            return bad("diffusion_steps must be at least 1".into());
        }
        if self.batch == 0 || self.sample_count == 0 || self.grid_cols == 0 || self.probe_batch == 0 {
            return bad("batch, sample_count, grid_cols and probe_batch must be positive".into());
        }
        if !(self.lr > 0.0) {
            return bad(format!("lr {} must be positive", self.lr));
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every must be at least 1".into());
        }
        if self.dataset == DatasetKind::Idx && self.dataset_path.is_none() {
            return bad("dataset = idx needs dataset_path".into());
        }
        if self.sweep_thresholds.is_empty() {
            return bad("sweep_thresholds is empty".into());
        }
        if let Some(th) = self.guidance_threshold.into_iter().chain(self.sweep_thresholds.iter().copied()).find(|t| !(*t > self.unet.lif.reset)) {
            return bad(format!("guidance threshold {th} must exceed the reset potential {}", self.unet.lif.reset));
        }
        Ok(())
    }

    /// Every key with its effective value.
    pub fn to_text(&self) -> String {
        fn opt<T: ToString>(v: &Option<T>) -> String {
            v.as_ref().map_or_else(|| "none".into(), T::to_string)
        }
        fn path(p: &Option<PathBuf>) -> String {
            p.as_ref().map_or_else(|| "none".into(), |p| p.display().to_string())
        }
        let join = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
        let mut s = String::from("# effective configuration\n");
        for (k, v) in self.unet.to_pairs() {
            s += &format!("{k} = {v}\n");
        }
        let rest: Vec<(&str, String)> = vec![
            ("diffusion_steps", self.diffusion_steps.to_string()),
            ("beta_start", self.beta_start.to_string()),
            ("beta_end", self.beta_end.to_string()),
            ("lr", self.lr.to_string()),
            ("batch", self.batch.to_string()),
            ("steps", self.steps.to_string()),
            ("seed", self.seed.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("log_every", self.log_every.to_string()),
            ("dataset", self.dataset.name().to_string()),
            ("dataset_path", path(&self.dataset_path)),
            ("dataset_size", self.dataset_size.to_string()),
            ("dataset_noise", self.dataset_noise.to_string()),
            ("guidance_threshold", opt(&self.guidance_threshold)),
            ("sample_mode", match self.sample_mode {
                SampleMode::Single => "single".into(),
                SampleMode::Sweep => "sweep".into(),
            }),
            ("sweep_thresholds", join(&self.sweep_thresholds)),
            ("sample_count", self.sample_count.to_string()),
            ("grid_cols", self.grid_cols.to_string()),
            ("probe_batch", self.probe_batch.to_string()),
            ("e_mac", self.e_mac.to_string()),
            ("e_ac", self.e_ac.to_string()),
            ("gradcheck_fault", opt(&self.gradcheck_fault)),
            ("checkpoint", path(&self.checkpoint)),
            ("out_dir", self.out_dir.display().to_string()),
            ("threads", self.threads.to_string()),
        ];
        for (k, v) in rest {
            s += &format!("{k} = {v}\n");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        let back = RunConfig::parse_str(&cfg.to_text()).unwrap();
        assert_eq!(back.to_text(), cfg.to_text());
    }

    #[test]
    fn edited_values_round_trip() {
        let text = "base_channels = 8  # small\nchannel_mults=1,2,2\nlr = 0.0001\nguidance_threshold = 0.998\n\
                    dataset = blobs\nlif_threshold = 0.75\nsweep_thresholds = 0.9,1.1\n";
        let cfg = RunConfig::parse_str(text).unwrap();
        assert_eq!(cfg.unet.channel_mults, vec![1, 2, 2]);
        assert_eq!(cfg.guidance_threshold, Some(0.998));
        assert!(cfg.is_explicit("base_channels") && !cfg.is_explicit("temb_dim"));
        let back = RunConfig::parse_str(&cfg.to_text()).unwrap();
        assert_eq!(back.to_text(), cfg.to_text());
        assert_eq!(back.unet, cfg.unet);
        assert_eq!(back.lr, 1e-4);
    }

    #[test]
    fn unknown_and_duplicate_keys_are_errors() {
        assert!(RunConfig::parse_str("learning_rate = 1").is_err());
        assert!(RunConfig::parse_str("lr = 1\nlr = 2").is_err());
        assert!(RunConfig::parse_str("lr").is_err());
        assert!(RunConfig::parse_str("batch = many").is_err());
        assert!(RunConfig::parse_str("# only a comment\n\n").is_ok());
    }

    #[test]
    fn validation_catches_inconsistent_values() {
        assert!(RunConfig::parse_str("image_size = 15").unwrap().validate().is_err());
        assert!(RunConfig::parse_str("dataset = idx").unwrap().validate().is_err());
        assert!(RunConfig::parse_str("guidance_threshold = -1").unwrap().validate().is_err());
        assert!(RunConfig::default().validate().is_ok());
    }
}
