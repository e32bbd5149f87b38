use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sddpm::{CliError, CliResult, RunConfig};

#[derive(Parser)]
#[command(name = "sddpm", version, about = "Spiking diffusion model: train, sample, profile, gradcheck")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train with denoising score matching, resuming from --checkpoint if given.
    Train(Common),
    /// Draw samples from a checkpoint.
    Sample(Common),
    /// Measure firing rates and estimate energy per image.
    Profile(Common),
    /// Finite-difference gradient check of the surrogate backward pass.
    Gradcheck(Common),
}

#[derive(Args)]
struct Common {
    /// key = value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads, 0 for the default.
    #[arg(long)]
    threads: Option<usize>,
}

impl Common {
    fn resolve(&self) -> CliResult<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(p) = &self.checkpoint {
            cfg.set("checkpoint", &p.display().to_string())?;
        }
        if let Some(p) = &self.out {
            cfg.set("out_dir", &p.display().to_string())?;
        }
        if let Some(s) = self.seed {
            cfg.set("seed", &s.to_string())?;
        }
        if let Some(t) = self.threads {
            cfg.set("threads", &t.to_string())?;
        }
        sddpm::init_threads(cfg.threads)?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train(c) => {
            let s = sddpm::train(&c.resolve()?)?;
            match s.last_loss {
                Some(l) => println!("trained steps {}..{}, final loss {l:.5}", s.start_step, s.end_step),
                None => println!("no steps to run, at step {}", s.end_step),
            }
            println!("checkpoint: {}", s.checkpoint.display());
        }
        Command::Sample(c) => {
            for s in sddpm::sample(&c.resolve()?)? {
                let th = s.threshold.map_or("off".to_string(), |v| v.to_string());
                println!(
                    "threshold {th} ({}): mean {:.4} std {:.4} range [{:.3}, {:.3}] -> {}",
                    s.mode,
                    s.mean,
                    s.std,
                    s.min,
                    s.max,
                    s.grid.display()
                );
            }
        }
        Command::Profile(c) => {
            let p = sddpm::profile(&c.resolve()?)?;
            for (layer, rate) in &p.rates {
                println!("{layer:<24} rate {rate:.4}");
            }
            println!("SNN {:.1} pJ, ANN {:.1} pJ per image ({:.2}x)", p.snn_pj, p.ann_pj, p.ann_pj / p.snn_pj);
        }
        Command::Gradcheck(c) => print!("{}", sddpm::gradcheck(&c.resolve()?)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // clap uses 2 for usage errors; 2 is reserved for data errors here.
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match &e {
                CliError::Verify(_) => eprintln!("{e}"),
                _ => eprintln!("error: {e}"),
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
