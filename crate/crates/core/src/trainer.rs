//! Teacher-forced training with AdamW and gradient accumulation.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::connector::ConnectorMode;
use crate::error::{Error, Result};
use crate::model::{is_trainable, record_for, KeypointModel, LoraConfig};
use crate::optim::{AdamW, AdamWParams};
use crate::synth_data::SkeletonSample;
use crate::tensor::Tensor;
use crate::vision_encoder::GradScope;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub micro_batch: usize,
    pub accumulation_steps: usize,
    pub seed: u64,
    pub connector_mode: ConnectorMode,
    pub lora: LoraConfig,
    /// Also update embeddings, positional tables and output heads.
    pub train_embeddings: bool,
    /// Keypoint queries drawn per sample and epoch.
    pub queries_per_sample: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            lr: 1e-3,
            weight_decay: 0.0,
            micro_batch: 8,
            accumulation_steps: 4,
            seed: 0,
            connector_mode: ConnectorMode::Mlp,
            lora: LoraConfig::default(),
            train_embeddings: false,
            queries_per_sample: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("train.epochs", self.epochs),
            ("train.micro_batch", self.micro_batch),
            ("train.accumulation_steps", self.accumulation_steps),
            ("train.queries_per_sample", self.queries_per_sample),
            ("lora.rank", self.lora.rank),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("train.lr must be finite and non-negative, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("train.weight_decay must be finite and non-negative".into()));
        }
        if !(self.lora.alpha.is_finite() && self.lora.alpha > 0.0) {
            return Err(Error::Config("lora.alpha must be positive".into()));
        }
        Ok(())
    }

    pub fn effective_batch(&self) -> usize {
        self.micro_batch * self.accumulation_steps
    }

    pub fn scope(&self) -> GradScope {
        GradScope {
            blocks: false,
            embeddings: self.train_embeddings,
        }
    }

    pub fn adamw(&self) -> AdamWParams {
        AdamWParams::new(self.lr, self.weight_decay)
    }
}

/// One `(sample index, keypoint)` query.
pub type Query = (usize, usize);

/// Deterministic record order of one epoch: shuffled samples, each with
/// `queries` distinct visible keypoints.
pub fn epoch_plan(samples: &[SkeletonSample], seed: u64, epoch: usize, queries: usize) -> Vec<Query> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng);
    let mut plan = Vec::with_capacity(samples.len() * queries);
    for i in order {
        let visible: Vec<usize> = (0..samples[i].visibility.len())
            .filter(|&k| samples[i].is_visible(k))
            .collect();
        for &k in visible.choose_multiple(&mut rng, queries) {
            plan.push((i, k));
        }
    }
    plan
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub seed: u64,
    /// Completed epochs.
    pub epoch: usize,
    /// Queries of the current epoch already consumed.
    pub cursor: usize,
    pub optimizer: AdamW,
    /// `(step, mean answer-token loss)` for every optimizer step so far.
    pub losses: Vec<(u64, f64)>,
}

impl TrainState {
    pub fn new(seed: u64) -> Self {
        TrainState {
            seed,
            epoch: 0,
            cursor: 0,
            optimizer: AdamW::default(),
            losses: Vec::new(),
        }
    }

    pub fn step(&self) -> u64 {
        self.optimizer.step
    }

    pub fn running_loss(&self) -> Option<f64> {
        self.losses.last().map(|&(_, l)| l)
    }
}

pub struct Trainer<'d> {
    pub config: TrainConfig,
    pub state: TrainState,
    data: &'d [SkeletonSample],
    plan: Vec<Query>,
    grads: KeypointModel,
}

impl<'d> Trainer<'d> {
    pub fn new(config: TrainConfig, model: &KeypointModel, data: &'d [SkeletonSample]) -> Result<Self> {
        let state = TrainState::new(config.seed);
        Self::resume(config, state, model, data)
    }

    pub fn resume(
        config: TrainConfig,
        state: TrainState,
        model: &KeypointModel,
        data: &'d [SkeletonSample],
    ) -> Result<Self> {
        config.validate()?;
        if data.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        if state.seed != config.seed {
            return Err(Error::Config(format!(
                "saved state was trained with seed {}, config has {}",
                state.seed, config.seed
            )));
        }
        if model.connector.mode() != config.connector_mode {
            return Err(Error::Config(format!(
                "model connector is {}, config asks for {}",
                model.connector.mode(),
                config.connector_mode
            )));
        }
        let plan = epoch_plan(data, config.seed, state.epoch, config.queries_per_sample);
        Ok(Trainer {
            grads: model.zeros_like(),
            config,
            state,
            data,
            plan,
        })
    }

    pub fn finished(&self) -> bool {
        self.state.epoch >= self.config.epochs
    }

    /// Optimizer steps of a full run, from the epoch plans.
    pub fn total_steps(&self) -> u64 {
        let eff = self.config.effective_batch();
        (0..self.config.epochs)
            .map(|e| {
                let n = epoch_plan(self.data, self.config.seed, e, self.config.queries_per_sample).len();
                n.div_ceil(eff) as u64
            })
            .sum()
    }

    /// One optimizer step over the next effective batch; `None` once all epochs are done.
    pub fn step(&mut self, model: &mut KeypointModel) -> Result<Option<f64>> {
        while !self.finished() && self.state.cursor >= self.plan.len() {
            self.state.epoch += 1;
            self.state.cursor = 0;
            self.plan = epoch_plan(self.data, self.config.seed, self.state.epoch, self.config.queries_per_sample);
        }
        if self.finished() {
            return Ok(None);
        }
        let end = (self.state.cursor + self.config.effective_batch()).min(self.plan.len());
        let batch = &self.plan[self.state.cursor..end];
        let scope = self.config.scope();
        self.grads.visit_mut(&mut |_, t| t.fill(0.0));
        let mut sum = 0.0;
        let mut count = 0;
        for micro in batch.chunks(self.config.micro_batch) {
            // Queries of one sample that land in the same micro-batch share an encoder pass.
            for run in micro.chunk_by(|a, b| a.0 == b.0) {
                let sample = &self.data[run[0].0];
                let records = run
                    .iter()
                    .map(|&(_, k)| record_for(sample, k))
                    .collect::<Result<Vec<_>>>()?;
                let (s, c) = model.accumulate_grad_shared(&sample.image(), &records, &mut self.grads, scope)?;
                sum += s;
                count += c;
            }
        }
        let step = self.state.step() + 1;
        let loss = sum / count as f64;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step, loss });
        }
        let inv = 1.0 / count as f64;
        self.grads.visit_mut(&mut |_, t| t.scale(inv));
        let mut grads: Vec<(String, &Tensor)> = Vec::new();
        self.grads.visit(&mut |n, t| grads.push((n.to_string(), t)));
        let hp = self.config.adamw();
        let optimizer = &mut self.state.optimizer;
        optimizer.advance();
        let mut idx = 0;
        let mut result = Ok(());
        model.visit_mut(&mut |name, p| {
            let (gname, g) = &grads[idx];
            idx += 1;
            debug_assert_eq!(name, gname);
            if result.is_ok() && is_trainable(name, scope) {
                result = optimizer.apply(name, p, g, &hp);
            }
        });
        result?;
        self.state.cursor = end;
        self.state.losses.push((step, loss));
        Ok(Some(loss))
    }

    /// Runs until the configured epochs are exhausted or `max_steps` more steps were taken.
    pub fn run(
        &mut self,
        model: &mut KeypointModel,
        max_steps: Option<u64>,
        mut on_step: impl FnMut(u64, f64),
    ) -> Result<()> {
        let mut taken: u64 = 0;
        while max_steps.is_none_or(|m| taken < m) {
            match self.step(model)? {
                Some(loss) => on_step(self.state.step(), loss),
                None => break,
            }
            taken += 1;
        }
        Ok(())
    }
}

/// Two-column `step loss` text.
pub fn format_loss_curve(losses: &[(u64, f64)]) -> String {
    losses.iter().map(|(s, l)| format!("{s}\t{l:.17e}\n")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::small_config;
    use crate::synth_data::{generate_sample, GeneratorConfig};

    fn data(n: u64) -> Vec<SkeletonSample> {
        let cfg = GeneratorConfig {
            image_size: 16,
            ..GeneratorConfig::default()
        };
        (0..n).map(|s| generate_sample(s, &cfg).unwrap()).collect()
    }

    #[test]
    fn plan_is_deterministic_and_visible_only() {
        let d = data(6);
        let a = epoch_plan(&d, 3, 0, 2);
        assert_eq!(a, epoch_plan(&d, 3, 0, 2));
        assert_ne!(a, epoch_plan(&d, 3, 1, 2));
        assert!(a.iter().all(|&(i, k)| d[i].is_visible(k)));
    }

    #[test]
    fn zero_lr_leaves_weights_and_gives_flat_curve() {
        let d = data(4);
        let cfg = TrainConfig {
            epochs: 1,
            lr: 0.0,
            micro_batch: 1,
            accumulation_steps: 1,
            ..TrainConfig::default()
        };
        let mut model = KeypointModel::new(small_config(), Some(&cfg.lora), 0).unwrap();
        let before = model.clone();
        let mut trainer = Trainer::new(cfg, &model, &d).unwrap();
        trainer.run(&mut model, None, |_, _| {}).unwrap();
        assert_eq!(model, before);
        assert_eq!(trainer.state.losses.len(), 4);
    }

    #[test]
    fn zero_counts_are_rejected() {
        let cfg = TrainConfig {
            micro_batch: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
