//! Block-NLL training: crop a sequence at a random split, corrupt the block
//! at a random timestep, and take one AdamW step on the mean loss.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::corpus::{PackedCorpus, TokenId};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParameters};
use crate::optim::{check_divergence, mean_loss_and_grads, AdamW, AdamWConfig};
use crate::rng::{self, RngState, SeededRng};
use crate::schedule::{NoiseSchedule, DEFAULT_OFFSET};
use crate::simplex::{forward_diffuse, logits_generation};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Training sequence length `L`.
    pub seq_len: usize,
    /// Block length `B_train`.
    pub block_len: usize,
    /// Diffusion steps `T_train`.
    pub diffusion_steps: usize,
    pub one_hot_k: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub total_steps: u64,
    pub seed: u64,
    /// Steps between checkpoints; 0 keeps only the final one.
    pub checkpoint_interval: u64,
    pub schedule_offset: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seq_len: 64,
            block_len: 8,
            diffusion_steps: 200,
            one_hot_k: 5.0,
            batch_size: 32,
            learning_rate: 1e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            total_steps: 1000,
            seed: 0,
            checkpoint_interval: 0,
            schedule_offset: DEFAULT_OFFSET,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.block_len < 1 || self.block_len >= self.seq_len {
            return Err(Error::invalid(format!(
                "block_len {} must satisfy 1 <= block_len < seq_len {}",
                self.block_len, self.seq_len
            )));
        }
        if self.diffusion_steps < 1 {
            return Err(Error::invalid("diffusion_steps must be at least 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if !(self.one_hot_k > 0.0) {
            return Err(Error::invalid("one_hot_k must be positive"));
        }
        if !(self.learning_rate >= 0.0) || !(self.weight_decay >= 0.0) || !(self.eps >= 0.0) {
            return Err(Error::invalid("learning_rate, weight_decay and eps must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("Adam betas must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::cosine(self.diffusion_steps, self.schedule_offset)
    }
}

/// One training example after cropping and corruption.
struct Example<'c> {
    context: &'c [TokenId],
    targets: &'c [TokenId],
    noisy: crate::simplex::LogitBlock,
    t: usize,
}

/// One optimizer step on `batch`. Returns the mean per-token NLL measured
/// before the update.
///
/// Randomness is drawn serially from `rng` (split, timestep, noise per item)
/// so the step is a pure function of the RNG state; the per-item
/// forward/backward passes then run in parallel and are reduced in batch order.
pub fn train_step(
    params: &mut ModelParameters,
    optimizer: &mut AdamW,
    batch: &[&[TokenId]],
    schedule: &NoiseSchedule,
    config: &TrainConfig,
    rng: &mut SeededRng,
) -> Result<f64> {
    let (l, b) = (config.seq_len, config.block_len);
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let vocab = params.config().vocab_size;
    let mut examples = Vec::with_capacity(batch.len());
    for seq in batch {
        if seq.len() != l {
            return Err(Error::invalid(format!("sequence of length {} in a batch for L = {l}", seq.len())));
        }
        let c = rng.random_range(1..=l - b);
        let t = rng.random_range(1..=schedule.len());
        let clean = logits_generation(&seq[c..c + b], config.one_hot_k, vocab)?;
        let noisy = forward_diffuse(&clean, schedule, t, rng)?;
        examples.push(Example {
            context: &seq[..c],
            targets: &seq[c..c + b],
            noisy,
            t,
        });
    }

    let model = &*params;
    let results: Vec<(f64, Vec<Tensor>)> = examples
        .par_iter()
        .map(|ex| model.block_nll_grad(ex.context, &ex.noisy, ex.t, schedule, ex.targets))
        .collect::<Result<_>>()?;

    let (loss, grads) = mean_loss_and_grads(results)?;
    check_divergence(optimizer.step_count() + 1, loss, &grads)?;
    optimizer.update(params.store_mut(), &grads)?;
    Ok(loss)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: u64,
    pub per_token_nll: f64,
}

/// Training state that can be checkpointed and resumed bit-exactly.
pub struct Trainer {
    config: TrainConfig,
    schedule: NoiseSchedule,
    params: ModelParameters,
    optimizer: AdamW,
    rng: SeededRng,
    step: u64,
    vocab_hash: String,
}

impl Trainer {
    /// Fresh parameters drawn from stream 0 of `config.seed`; training
    /// randomness uses stream 1.
    pub fn new(config: TrainConfig, model_config: ModelConfig, vocab_hash: impl Into<String>) -> Result<Self> {
        config.validate()?;
        if model_config.one_hot_k != config.one_hot_k {
            return Err(Error::invalid(format!(
                "model one_hot_k {} differs from training one_hot_k {}",
                model_config.one_hot_k, config.one_hot_k
            )));
        }
        if model_config.max_len < config.seq_len {
            return Err(Error::invalid(format!(
                "model max_len {} shorter than seq_len {}",
                model_config.max_len, config.seq_len
            )));
        }
        let params = ModelParameters::init(model_config, &mut rng::substream(config.seed, 0))?;
        let optimizer = AdamW::new(config.optimizer(), params.store());
        Ok(Trainer {
            schedule: config.schedule()?,
            rng: rng::substream(config.seed, 1),
            config,
            params,
            optimizer,
            step: 0,
            vocab_hash: vocab_hash.into(),
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        ckpt.train_config.validate()?;
        Ok(Trainer {
            schedule: ckpt.train_config.schedule()?,
            rng: ckpt.rng.restore(),
            config: ckpt.train_config,
            params: ckpt.params,
            optimizer: ckpt.optimizer,
            step: ckpt.step,
            vocab_hash: ckpt.vocab_hash,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Raises the step budget, e.g. when resuming into a longer run.
    pub fn set_total_steps(&mut self, total: u64) {
        self.config.total_steps = total;
    }

    pub fn params(&self) -> &ModelParameters {
        &self.params
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            params: self.params.clone(),
            train_config: self.config.clone(),
            optimizer: self.optimizer.clone(),
            step: self.step,
            rng: RngState::capture(&self.rng),
            vocab_hash: self.vocab_hash.clone(),
        }
    }

    pub fn train_step(&mut self, corpus: &PackedCorpus) -> Result<LossRecord> {
        if corpus.seq_len() != self.config.seq_len {
            return Err(Error::invalid(format!(
                "corpus sequence length {} != seq_len {}",
                corpus.seq_len(),
                self.config.seq_len
            )));
        }
        let batch = corpus.sample_batch(self.config.batch_size, &mut self.rng)?;
        let loss = train_step(
            &mut self.params,
            &mut self.optimizer,
            &batch,
            &self.schedule,
            &self.config,
            &mut self.rng,
        )?;
        self.step += 1;
        Ok(LossRecord {
            step: self.step,
            per_token_nll: loss,
        })
    }

    /// Steps until `total_steps`, calling `on_step` after each update.
    pub fn run<F>(&mut self, corpus: &PackedCorpus, mut on_step: F) -> Result<()>
    where
        F: FnMut(&Trainer, LossRecord) -> Result<()>,
    {
        corpus.validate(self.params.config().vocab_size)?;
        while self.step < self.config.total_steps {
            let rec = self.train_step(corpus)?;
            on_step(self, rec)?;
        }
        Ok(())
    }
}

/// Trains from scratch and returns the final checkpoint and loss curve.
pub fn train_loop(
    config: TrainConfig,
    model_config: ModelConfig,
    corpus: &PackedCorpus,
    vocab_hash: &str,
) -> Result<(Checkpoint, Vec<LossRecord>)> {
    let mut trainer = Trainer::new(config, model_config, vocab_hash)?;
    let mut log = Vec::new();
    trainer.run(corpus, |_, rec| {
        log.push(rec);
        Ok(())
    })?;
    Ok((trainer.checkpoint(), log))
}

/// Mean per-token block NLL over every sequence, using `samples` fixed
/// (split, timestep, noise) draws per sequence from `seed`. Timesteps are
/// drawn uniformly from `1..=max_t` (the full schedule when `None`).
pub fn evaluate_nll(
    params: &ModelParameters,
    sequences: &[Vec<TokenId>],
    schedule: &NoiseSchedule,
    block_len: usize,
    samples: usize,
    max_t: Option<usize>,
    seed: u64,
) -> Result<f64> {
    let max_t = max_t.unwrap_or(schedule.len()).min(schedule.len());
    let k = params.config().one_hot_k;
    let vocab = params.config().vocab_size;
    let mut rng = rng::seeded(seed);
    let mut jobs = Vec::new();
    for seq in sequences {
        if seq.len() <= block_len {
            return Err(Error::invalid("sequence shorter than one block plus context"));
        }
        for _ in 0..samples {
            let c = rng.random_range(1..=seq.len() - block_len);
            let t = rng.random_range(1..=max_t);
            let clean = logits_generation(&seq[c..c + block_len], k, vocab)?;
            let noisy = forward_diffuse(&clean, schedule, t, &mut rng)?;
            jobs.push((&seq[..c], &seq[c..c + block_len], noisy, t));
        }
    }
    if jobs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let losses: Vec<f64> = jobs
        .par_iter()
        .map(|(ctx, tgt, noisy, t)| params.block_nll(ctx, noisy, *t, schedule, tgt))
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}
