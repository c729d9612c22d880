//! Training loops: clean finetuning, Gaussian augmentation, a PGD baseline and
//! the alternating model/generator loop.

mod optim;
mod state;
mod steps;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{collate, Dataset, Example};
use crate::error::{Error, Result};
use crate::model::{EmbeddingBatch, ModelConfig};
use crate::noise::{MaskingConfig, PerturbationConfig};
use crate::rng::{stream, Purpose};

pub use optim::{adamw_store, adamw_update, lr_at_step, AdamConfig};
pub use state::TrainState;
pub use steps::{pgd_deltas, StepStats};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Clean,
    Gaussian,
    Pgd,
    Mango,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Clean, Mode::Gaussian, Mode::Pgd, Mode::Mango];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Clean => "clean",
            Mode::Gaussian => "gaussian",
            Mode::Pgd => "pgd",
            Mode::Mango => "mango",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?}")))
    }
}

/// Weights of the clean and perturbed terms in the model loss (pgd and mango
/// modes). A zero weight removes the term from the graph entirely.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub clean: f64,
    pub adversarial: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            clean: 1.0,
            adversarial: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PgdConfig {
    pub iters: usize,
    /// Length of each normalized ascent step, per position.
    pub step_size: f64,
}

impl Default for PgdConfig {
    fn default() -> Self {
        Self {
            iters: 3,
            step_size: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub seed: u64,
    pub total_steps: usize,
    pub batch_size: usize,
    pub grad_accum_steps: usize,
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    /// Record every `log_every` steps (the last step is always recorded).
    pub log_every: usize,
    pub loss_weights: LossWeights,
    pub pgd: PgdConfig,
    pub perturbation: PerturbationConfig,
    pub masking: MaskingConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Clean,
            seed: 0,
            total_steps: 300,
            batch_size: 32,
            grad_accum_steps: 1,
            peak_lr: 2e-3,
            warmup_fraction: 0.1,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            log_every: 1,
            loss_weights: LossWeights::default(),
            pgd: PgdConfig::default(),
            perturbation: PerturbationConfig::default(),
            masking: MaskingConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 || self.batch_size == 0 || self.grad_accum_steps == 0 {
            return Err(Error::Config("total_steps, batch_size, grad_accum_steps must be >= 1".into()));
        }
        if !self.batch_size.is_multiple_of(self.grad_accum_steps) {
            return Err(Error::Config(format!(
                "batch_size {} not divisible by grad_accum_steps {}",
                self.batch_size, self.grad_accum_steps
            )));
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return Err(Error::Config("warmup_fraction must be in (0, 1)".into()));
        }
        if self.peak_lr < 0.0 || self.loss_weights.clean < 0.0 || self.loss_weights.adversarial < 0.0 {
            return Err(Error::Config("learning rate and loss weights must be >= 0".into()));
        }
        if self.pgd.step_size <= 0.0 {
            return Err(Error::Config("pgd.step_size must be > 0".into()));
        }
        self.perturbation.validate()?;
        self.masking.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// One structured log line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub mode: Mode,
    pub lr: f64,
    pub loss_clean: Option<f64>,
    pub loss_adv: Option<f64>,
    pub r_kl: Option<f64>,
    pub delta_norm_mean: Option<f64>,
}

/// Seeded epoch-wise shuffling; the batch for a step is a pure function of
/// `(seed, step)`.
pub struct DataOrder {
    seed: u64,
    n: usize,
    batch_size: usize,
    perms: BTreeMap<u64, Vec<usize>>,
}

impl DataOrder {
    pub fn new(seed: u64, n: usize, batch_size: usize) -> Self {
        Self {
            seed,
            n,
            batch_size,
            perms: BTreeMap::new(),
        }
    }

    fn perm(&mut self, epoch: u64) -> &[usize] {
        let (seed, n) = (self.seed, self.n);
        self.perms.entry(epoch).or_insert_with(|| {
            use rand::seq::SliceRandom;
            let mut p: Vec<usize> = (0..n).collect();
            p.shuffle(&mut stream(seed, Purpose::Data, &[epoch]));
            p
        })
    }

    /// Dataset indices for `step`.
    pub fn batch_indices(&mut self, step: u64) -> Vec<usize> {
        let start = step as usize * self.batch_size;
        let n = self.n;
        (start..start + self.batch_size)
            .map(|pos| {
                let epoch = (pos / n) as u64;
                self.perm(epoch)[pos % n]
            })
            .collect()
    }
}

/// A training run over one dataset.
pub struct Trainer<'a> {
    pub model_config: ModelConfig,
    pub config: TrainConfig,
    data: &'a Dataset,
    order: DataOrder,
}

impl<'a> Trainer<'a> {
    pub fn new(model_config: ModelConfig, config: TrainConfig, data: &'a Dataset) -> Result<Self> {
        model_config.validate()?;
        config.validate()?;
        if data.is_empty() {
            return Err(Error::Contract("empty training set".into()));
        }
        let order = DataOrder::new(config.seed, data.len(), config.batch_size);
        Ok(Self {
            model_config,
            config,
            data,
            order,
        })
    }

    pub fn init_state(&self) -> Result<TrainState> {
        TrainState::new(&self.model_config, &self.config)
    }

    /// The collated minibatch and example keys for `step`.
    pub fn batch_for_step(&mut self, step: u64) -> Result<(EmbeddingBatch, Vec<u64>)> {
        let idx = self.order.batch_indices(step);
        let exs: Vec<&Example> = idx.iter().map(|&i| &self.data.examples[i]).collect();
        let keys = exs.iter().map(|e| e.key).collect();
        Ok((collate(&exs, &self.model_config)?, keys))
    }

    /// Executes one step in the configured mode.
    pub fn step(&mut self, state: &mut TrainState) -> Result<LogRecord> {
        let step = state.step;
        if step as usize >= self.config.total_steps {
            return Err(Error::Contract("training already complete".into()));
        }
        let (batch, keys) = self.batch_for_step(step)?;
        let lr = lr_at_step(self.config.total_steps, self.config.warmup_fraction, self.config.peak_lr, step as usize)?;
        let stats = steps::train_step(&self.model_config, &self.config, state, &batch, &keys, lr)?;
        state.step += 1;
        Ok(LogRecord {
            step: state.step,
            mode: self.config.mode,
            lr,
            loss_clean: stats.loss_clean,
            loss_adv: stats.loss_adv,
            r_kl: stats.r_kl,
            delta_norm_mean: stats.delta_norm_mean,
        })
    }

    /// Steps until `until` (exclusive upper bound on `state.step`, capped at
    /// `total_steps`), passing logged records to `sink`.
    pub fn run_until(
        &mut self,
        state: &mut TrainState,
        until: u64,
        sink: &mut dyn FnMut(&LogRecord),
    ) -> Result<()> {
        let end = until.min(self.config.total_steps as u64);
        while state.step < end {
            let rec = self.step(state)?;
            let last = rec.step == self.config.total_steps as u64;
            if last || rec.step % self.config.log_every.max(1) as u64 == 0 {
                sink(&rec);
            }
        }
        Ok(())
    }
}

/// Runs a full training job from a fresh initialization.
pub fn run_training(
    model_config: &ModelConfig,
    config: &TrainConfig,
    data: &Dataset,
) -> Result<(TrainState, Vec<LogRecord>)> {
    let mut trainer = Trainer::new(model_config.clone(), config.clone(), data)?;
    let mut state = trainer.init_state()?;
    let mut log = Vec::new();
    trainer.run_until(&mut state, u64::MAX, &mut |r| log.push(r.clone()))?;
    Ok((state, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn data_order_covers_each_epoch_once() {
        let mut o = DataOrder::new(3, 10, 4);
        let mut seen: Vec<usize> = (0..5).flat_map(|s| o.batch_indices(s)).collect();
        assert_eq!(seen.len(), 20);
        let mut first: Vec<usize> = seen.drain(..10).collect();
        first.sort();
        assert_eq!(first, (0..10).collect::<Vec<_>>());
        let mut o2 = DataOrder::new(3, 10, 4);
        assert_eq!(o2.batch_indices(3), o.batch_indices(3));
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("mango".parse::<Mode>().unwrap(), Mode::Mango);
        assert!("adv".parse::<Mode>().is_err());
    }
}
