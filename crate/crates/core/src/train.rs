//! Minibatch DSM training with Adam.

use crate::data::{Checkpoint, Dataset};
use crate::diffusion::{dsm_loss, NoiseSchedule};
use crate::error::{Error, Result};
use crate::optim::{AdamConfig, AdamState};
use crate::rng::{streams, RngStream};
use crate::tensor::Scalar;
use crate::unet::SpikingUNet;

pub struct Trainer<F: Scalar = f32> {
    pub model: SpikingUNet<F>,
    pub adam: AdamState<F>,
    pub adam_cfg: AdamConfig,
    pub sched: NoiseSchedule,
    pub batch: usize,
    /// Steps completed so far.
    pub step: u64,
    rng: RngStream,
}

impl<F: Scalar> Trainer<F> {
    pub fn new(model: SpikingUNet<F>, sched: NoiseSchedule, adam_cfg: AdamConfig, batch: usize, seed: u64) -> Result<Self> {
        if batch == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        Ok(Self {
            model,
            adam: AdamState::new(),
            adam_cfg,
            sched,
            batch,
            step: 0,
            rng: RngStream::new(seed, streams::TRAIN),
        })
    }

    /// Continues from a checkpoint: weights, optimizer moments, step and stream position.
    pub fn resume(ck: &Checkpoint<F>, sched: NoiseSchedule, adam_cfg: AdamConfig, batch: usize) -> Result<Self> {
        let (model, adam) = ck.restore()?;
        let mut t = Self::new(model, sched, adam_cfg, batch, ck.rng.seed)?;
        t.adam = adam;
        t.step = ck.step;
        t.rng = ck.rng.stream();
        Ok(t)
    }

    pub fn rng(&self) -> &RngStream {
        &self.rng
    }

    /// One optimizer step on a uniformly drawn minibatch (with replacement). Returns the batch loss.
    ///
    /// Draw order per step: `batch` example indices, then the DSM draws.
    pub fn train_step(&mut self, data: &Dataset) -> Result<f64> {
        let idx: Vec<usize> = (0..self.batch).map(|_| self.rng.below(data.len() as u64) as usize).collect();
        let x0 = data.gather(&idx)?.cast::<F>();
        self.model.zero_grad();
        let loss = dsm_loss(&mut self.model, &x0, &self.sched, &mut self.rng)?;
        if !loss.is_finite() {
            return Err(Error::InvalidArgument(format!("loss became {loss} at step {}", self.step + 1)));
        }
        self.adam.step_model(&mut self.model, &self.adam_cfg)?;
        self.step += 1;
        Ok(loss)
    }

    pub fn checkpoint(&mut self) -> Checkpoint<F> {
        Checkpoint::capture(&mut self.model, &self.adam, self.step, &self.rng)
    }
}
