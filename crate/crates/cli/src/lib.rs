//! Commands behind the `sddpm` binary.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 unreadable or
//! malformed data, 3 failed verification.

pub mod config;

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use sddpm_core::data::{load_checkpoint, load_idx, save_checkpoint, synth_dataset, write_image_grid, Checkpoint, Dataset, SynthKind};
use sddpm_core::diffusion::{ancestral_sample, make_schedule, GuidanceConfig, NoiseSchedule};
use sddpm_core::energy::{count_ops, energy_report, measure_firing_rates, EnergyMode};
use sddpm_core::gradcheck::{run_gradcheck, GradCheckConfig};
use sddpm_core::optim::AdamConfig;
use sddpm_core::rng::streams;
use sddpm_core::train::Trainer;
use sddpm_core::unet::{SpikingUNet, UNetConfig};
use sddpm_core::{Error, RngStream, Tensor};

pub use config::{DatasetKind, RunConfig, SampleMode};

pub const CHECKPOINT_FILE: &str = "checkpoint.sdpm";
pub const LOSS_FILE: &str = "loss.csv";
pub const TIMING_FILE: &str = "timing.csv";
pub const CONFIG_ECHO: &str = "config.txt";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] Error),
    #[error("verification failed: {0}")]
    Verify(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(e) if e.is_data_error() => 2,
            CliError::Core(_) => 1,
            CliError::Verify(_) => 3,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Core(Error::Io { path: path.to_path_buf(), source })
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    fs::write(path, bytes).map_err(io_err(path))
}

/// Sizes the global thread pool. 0 keeps the default.
pub fn init_threads(threads: usize) -> CliResult<()> {
    if threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot size the thread pool: {e}")))?;
    }
    Ok(())
}

fn schedule(cfg: &RunConfig) -> CliResult<NoiseSchedule> {
    make_schedule(cfg.diffusion_steps, cfg.beta_start, cfg.beta_end).map_err(|e| CliError::Usage(e.to_string()))
}

/// Builds the configured dataset at the model's resolution.
pub fn load_dataset(cfg: &RunConfig) -> CliResult<Dataset> {
    let size = cfg.unet.image_size;
    let data = match cfg.dataset {
        DatasetKind::TwoMode | DatasetKind::Blobs => {
            let kind = if cfg.dataset == DatasetKind::Blobs { SynthKind::Blobs } else { SynthKind::TwoMode };
            synth_dataset(kind, cfg.dataset_size, size, cfg.seed, cfg.dataset_noise).map_err(|e| CliError::Usage(e.to_string()))?
        }
        DatasetKind::Idx => {
            let path = cfg.dataset_path.as_deref().ok_or_else(|| CliError::Usage("dataset = idx needs dataset_path".into()))?;
            load_idx(path, None)?.fit_to(size)?
        }
    };
    if data.images.dim(1) != cfg.unet.in_channels {
        return Err(CliError::Usage(format!(
            "dataset has {} channels but in_channels = {}",
            data.images.dim(1),
            cfg.unet.in_channels
        )));
    }
    Ok(data)
}

/// Model keys set explicitly in the run config must agree with the checkpoint.
fn reconcile(cfg: &mut RunConfig, stored: &UNetConfig) -> CliResult<()> {
    let ours = cfg.unet.to_pairs();
    for (key, theirs) in stored.to_pairs() {
        let mine = &ours.iter().find(|(k, _)| *k == key).expect("same key set").1;
        if cfg.is_explicit(key) && *mine != theirs {
            return Err(CliError::Usage(format!("`{key}` is {mine} in the config but {theirs} in the checkpoint")));
        }
    }
    cfg.unet = stored.clone();
    Ok(())
}

fn prepare_out_dir(cfg: &RunConfig) -> CliResult<()> {
    fs::create_dir_all(&cfg.out_dir).map_err(io_err(&cfg.out_dir))?;
    write_file(&cfg.out_dir.join(CONFIG_ECHO), cfg.to_text().as_bytes())
}

fn open_checkpoint(cfg: &mut RunConfig) -> CliResult<Option<Checkpoint<f32>>> {
    let Some(path) = cfg.checkpoint.clone() else { return Ok(None) };
    let ck = load_checkpoint::<f32>(&path)?;
    reconcile(cfg, &ck.config)?;
    Ok(Some(ck))
}

/// Rows of a `step,...` log with step ≤ `keep`, header included. Missing file gives nothing.
fn log_prefix(path: &Path, keep: u64) -> CliResult<Vec<String>> {
    let Ok(file) = File::open(path) else { return Ok(Vec::new()) };
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if i == 0 {
            rows.push(line);
            continue;
        }
        match line.split(',').next().and_then(|s| s.parse::<u64>().ok()) {
            Some(step) if step <= keep => rows.push(line),
            _ => break,
        }
    }
    Ok(rows)
}

fn open_log(path: &Path, header: &str, keep: u64) -> CliResult<File> {
    let mut rows = log_prefix(path, keep)?;
    if rows.first().map(String::as_str) != Some(header) {
        rows = vec![header.to_string()];
    }
    let mut text = rows.join("\n");
    text.push('\n');
    write_file(path, text.as_bytes())?;
    fs::OpenOptions::new().append(true).open(path).map_err(io_err(path))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub start_step: u64,
    pub end_step: u64,
    pub last_loss: Option<f64>,
    pub checkpoint: PathBuf,
}

/// Trains until `cfg.steps` total steps, resuming from `cfg.checkpoint` if given.
///
/// `loss.csv` holds `step,loss` for every step; wall-clock times go to
/// `timing.csv` so that the loss log is reproducible byte for byte.
pub fn train(cfg: &RunConfig) -> CliResult<TrainSummary> {
    let mut cfg = cfg.clone();
    let resumed = open_checkpoint(&mut cfg)?;
    cfg.validate()?;
    let data = load_dataset(&cfg)?;
    let sched = schedule(&cfg)?;
    let adam = AdamConfig { lr: cfg.lr, ..AdamConfig::default() };
    let mut trainer = match &resumed {
        Some(ck) => Trainer::resume(ck, sched, adam, cfg.batch)?,
        None => Trainer::new(SpikingUNet::new(cfg.unet.clone(), cfg.seed)?, sched, adam, cfg.batch, cfg.seed)?,
    };
    prepare_out_dir(&cfg)?;
    let start = trainer.step;
    if start > cfg.steps {
        return Err(CliError::Usage(format!("checkpoint is already at step {start}, past steps = {}", cfg.steps)));
    }
    let ck_path = cfg.out_dir.join(CHECKPOINT_FILE);
    let loss_path = cfg.out_dir.join(LOSS_FILE);
    let timing_path = cfg.out_dir.join(TIMING_FILE);
    let mut loss_log = open_log(&loss_path, "step,loss", start)?;
    let mut timing_log = open_log(&timing_path, "step,wall_seconds", start)?;

    let mut last_loss = None;
    let clock = Instant::now();
    while trainer.step < cfg.steps {
        let t0 = Instant::now();
        let loss = trainer.train_step(&data)?;
        let step = trainer.step;
        last_loss = Some(loss);
        writeln!(loss_log, "{step},{loss}").map_err(io_err(&loss_path))?;
        writeln!(timing_log, "{step},{:.6}", t0.elapsed().as_secs_f64()).map_err(io_err(&timing_path))?;
        if cfg.log_every > 0 && step % cfg.log_every == 0 {
            eprintln!("step {step:>7}  loss {loss:.5}  {:.1}s", clock.elapsed().as_secs_f64());
        }
        if step % cfg.checkpoint_every == 0 && step < cfg.steps {
            save_checkpoint(&trainer.checkpoint(), &ck_path)?;
        }
    }
    save_checkpoint(&trainer.checkpoint(), &ck_path)?;
    Ok(TrainSummary { start_step: start, end_step: trainer.step, last_loss, checkpoint: ck_path })
}

fn threshold_tag(th: Option<f64>) -> String {
    th.map_or_else(|| "off".to_string(), |v| format!("vth_{v}"))
}

fn grid_ext(channels: usize) -> &'static str {
    if channels == 3 {
        "ppm"
    } else {
        "pgm"
    }
}

fn raw_f32(t: &Tensor<f32>) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleStats {
    pub threshold: Option<f64>,
    pub mode: String,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub grid: PathBuf,
}

fn stats(x: &Tensor<f32>) -> (f64, f64, f64, f64) {
    let n = x.len() as f64;
    let mean = x.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = x.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let min = x.data().iter().fold(f64::INFINITY, |m, &v| m.min(v as f64));
    let max = x.data().iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    (mean, var.sqrt(), min, max)
}

fn sample_one(model: &SpikingUNet<f32>, cfg: &RunConfig, sched: &NoiseSchedule, threshold: Option<f64>, stem: &str) -> CliResult<SampleStats> {
    let u = &cfg.unet;
    let shape = [cfg.sample_count, u.in_channels, u.image_size, u.image_size];
    // Every threshold starts from the same noise.
    let mut rng = RngStream::new(cfg.seed, streams::SAMPLE);
    let guidance = GuidanceConfig { threshold };
    let x = ancestral_sample(model, sched, &shape, &mut rng, &guidance)?;
    let grid = cfg.out_dir.join(format!("{stem}.{}", grid_ext(u.in_channels)));
    write_image_grid(&x, cfg.grid_cols, &grid)?;
    write_file(&cfg.out_dir.join(format!("{stem}.f32")), &raw_f32(&x))?;
    let (mean, std, min, max) = stats(&x);
    Ok(SampleStats { threshold, mode: guidance.mode(u.lif.threshold).to_string(), mean, std, min, max, grid })
}

/// Ancestral sampling from a trained checkpoint, once or across the threshold sweep.
pub fn sample(cfg: &RunConfig) -> CliResult<Vec<SampleStats>> {
    let mut cfg = cfg.clone();
    let ck = open_checkpoint(&mut cfg)?.ok_or_else(|| CliError::Usage("sample needs --checkpoint".into()))?;
    cfg.validate()?;
    let sched = schedule(&cfg)?;
    let (model, _) = ck.restore()?;
    prepare_out_dir(&cfg)?;
    match cfg.sample_mode {
        SampleMode::Single => Ok(vec![sample_one(&model, &cfg, &sched, cfg.guidance_threshold, "samples")?]),
        SampleMode::Sweep => {
            let mut all = Vec::new();
            let mut csv = String::from("threshold,mode,mean,std,min,max\n");
            for &th in &cfg.sweep_thresholds {
                let s = sample_one(&model, &cfg, &sched, Some(th), &format!("samples_{}", threshold_tag(Some(th))))?;
                let _ = writeln!(csv, "{th},{},{},{},{},{}", s.mode, s.mean, s.std, s.min, s.max);
                all.push(s);
            }
            write_file(&cfg.out_dir.join("sweep_summary.csv"), csv.as_bytes())?;
            Ok(all)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProfileSummary {
    pub snn_pj: f64,
    pub ann_pj: f64,
    pub rates: Vec<(String, f64)>,
}

/// Firing rates on a probe batch and the per-image energy estimate in both modes.
///
/// Uses the checkpoint when one is given, otherwise a freshly initialized model.
pub fn profile(cfg: &RunConfig) -> CliResult<ProfileSummary> {
    let mut cfg = cfg.clone();
    let ck = open_checkpoint(&mut cfg)?;
    cfg.validate()?;
    let model = match &ck {
        Some(ck) => ck.restore()?.0,
        None => SpikingUNet::new(cfg.unet.clone(), cfg.seed)?,
    };
    let data = load_dataset(&cfg)?;
    let sched = schedule(&cfg)?;
    prepare_out_dir(&cfg)?;
    let mut rng = RngStream::new(cfg.seed, streams::PROBE);
    let idx: Vec<usize> = (0..cfg.probe_batch).map(|_| rng.below(data.len() as u64) as usize).collect();
    let batch = data.gather(&idx)?;
    let rates = measure_firing_rates(&model, &batch, &sched, &mut rng)?;
    let counts = count_ops(&cfg.unet)?;
    let mut totals = [0.0; 2];
    for (i, mode) in [EnergyMode::Snn, EnergyMode::Ann].into_iter().enumerate() {
        let report = energy_report(&counts, &rates, cfg.unet.time_steps, cfg.energy_constants(), mode)?;
        let stem = format!("energy_{}", mode.to_string().to_lowercase());
        write_file(&cfg.out_dir.join(format!("{stem}.txt")), report.to_text().as_bytes())?;
        write_file(&cfg.out_dir.join(format!("{stem}.csv")), report.to_csv().as_bytes())?;
        totals[i] = report.total_pj;
    }
    let mut csv = String::from("layer,rate\n");
    for (k, v) in &rates {
        let _ = writeln!(csv, "{k},{v}");
    }
    write_file(&cfg.out_dir.join("rates.csv"), csv.as_bytes())?;
    Ok(ProfileSummary { snn_pj: totals[0], ann_pj: totals[1], rates: rates.into_iter().collect() })
}

/// Finite-difference check of the relaxed 64-bit model. Fails with exit code 3 past tolerance.
///
/// Checks the built-in 2-level model unless the config sets model keys, in
/// which case its architecture is checked instead.
pub fn gradcheck(cfg: &RunConfig) -> CliResult<String> {
    let mut gc = GradCheckConfig { seed: cfg.seed, fault: cfg.gradcheck_fault.clone(), ..GradCheckConfig::default() };
    if UNetConfig::KEYS.iter().any(|k| cfg.is_explicit(k)) {
        cfg.validate()?;
        gc.unet = cfg.unet.clone();
    }
    let started = Instant::now();
    let report = run_gradcheck(&gc).map_err(|e| match e {
        Error::InvalidArgument(m) | Error::Config(m) => CliError::Usage(m),
        other => CliError::Core(other),
    })?;
    let mut s = String::new();
    let _ = writeln!(s, "{:<28} {:>7} {:>14} {:>14} {:>10}", "layer", "index", "analytic", "numeric", "rel_err");
    for (layer, w) in report.worst_by_layer() {
        let _ = writeln!(s, "{layer:<28} {:>7} {:>14.6e} {:>14.6e} {:>10.2e}", w.index, w.analytic, w.numeric, w.rel_err);
    }
    let _ = writeln!(
        s,
        "checked {} parameters in {:.1}s, max relative error {:.3e} (tolerance {:.0e})",
        report.checked,
        started.elapsed().as_secs_f64(),
        report.max_rel_err,
        report.tolerance
    );
    if report.passed() {
        Ok(s)
    } else {
        let worst = report.worst_by_layer().into_iter().next().map(|(l, _)| l).unwrap_or_default();
        Err(CliError::Verify(format!("{s}worst layer: {worst}")))
    }
}
