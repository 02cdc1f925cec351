//! Reverse diffusion within a block, semi-autoregressive chaining of
//! blocks, and optional classifier guidance.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::classifier::ClassifierHandle;
use crate::corpus::{TokenId, BOS_ID};
use crate::error::{Error, Result};
use crate::model::ModelParameters;
use crate::rng::{self, SeededRng};
use crate::schedule::NoiseSchedule;
use crate::simplex::{logits_projection, renoise, LogitBlock, ProjectionStrategy};
use crate::tensor::Tensor;

/// Which classifier score the guidance term climbs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GuidanceObjective {
    /// `∇ log f(y | ·)`.
    #[default]
    LogProb,
    /// `∇ f(y | ·)`.
    Prob,
}

impl fmt::Display for GuidanceObjective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GuidanceObjective::LogProb => "log-prob",
            GuidanceObjective::Prob => "prob",
        })
    }
}

impl FromStr for GuidanceObjective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "log-prob" => Ok(GuidanceObjective::LogProb),
            "prob" => Ok(GuidanceObjective::Prob),
            _ => Err(Error::invalid(format!("unknown guidance objective {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    /// Block length `B_decode`.
    pub block_len: usize,
    /// Reverse steps `T_decode`, evenly subsampled from the training grid.
    pub steps: usize,
    pub projection: ProjectionStrategy,
    /// Guidance weight `λ`; 0 disables guidance.
    pub guidance: f64,
    pub objective: GuidanceObjective,
    /// Number of blocks `m`.
    pub iterations: usize,
    pub seed: u64,
    /// Cap on prompt plus generated length; the model limit applies when `None`.
    pub max_len: Option<usize>,
    /// Stop after the first block containing this token.
    pub eos: Option<TokenId>,
    pub record_trajectory: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            block_len: 8,
            steps: 200,
            projection: ProjectionStrategy::Greedy,
            guidance: 0.0,
            objective: GuidanceObjective::LogProb,
            iterations: 1,
            seed: 0,
            max_len: None,
            eos: None,
            record_trajectory: false,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.block_len < 1 || self.steps < 1 || self.iterations < 1 {
            return Err(Error::invalid("block_len, steps and iterations must be at least 1"));
        }
        if !(self.guidance >= 0.0) || !self.guidance.is_finite() {
            return Err(Error::invalid(format!("guidance weight {} must be finite and >= 0", self.guidance)));
        }
        self.projection.validate()
    }
}

/// A frozen classifier and the label to steer toward.
#[derive(Clone, Copy, Debug)]
pub struct Guidance<'h> {
    pub classifier: &'h ClassifierHandle,
    pub label: usize,
}

/// Argmax snapshots at one reverse step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub block: usize,
    /// Timestep on the training grid.
    pub t: usize,
    /// Argmax of the (possibly guided) predicted logits.
    pub predicted: Vec<TokenId>,
    /// Argmax of the re-noised simplex handed to the next step.
    pub noisy: Vec<TokenId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub prompt: Vec<TokenId>,
    pub blocks: Vec<Vec<TokenId>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trajectory: Vec<TrajectoryStep>,
    pub config: DecodeConfig,
    pub seed: u64,
    pub stream: u64,
}

impl GenerationRecord {
    pub fn output(&self) -> Vec<TokenId> {
        self.blocks.concat()
    }
}

/// `w_logits + λ·∇ obj(y)` with the gradient taken through the classifier's
/// softmax input.
pub fn guided_logits(
    w_logits: &LogitBlock,
    context: &[TokenId],
    classifier: &ClassifierHandle,
    label: usize,
    lambda: f64,
    objective: GuidanceObjective,
) -> Result<LogitBlock> {
    if lambda == 0.0 {
        return Ok(w_logits.clone());
    }
    let (log_f, grad) = classifier.grad_wrt_logits(context, w_logits, label)?;
    let scale = match objective {
        GuidanceObjective::LogProb => lambda,
        GuidanceObjective::Prob => lambda * log_f.exp(),
    };
    let mut out = w_logits.logits().clone();
    for (v, g) in out.data_mut().iter_mut().zip(grad.data()) {
        *v += scale * g;
    }
    LogitBlock::new(out, w_logits.k())
}

fn check_guidance(params: &ModelParameters, guidance: Option<&Guidance<'_>>) -> Result<()> {
    if let Some(g) = guidance {
        let (lm, cl) = (params.config().vocab_size, g.classifier.config().vocab_size);
        if lm != cl {
            return Err(Error::VocabMismatch {
                expected: format!("{lm} tokens"),
                found: format!("{cl} tokens"),
            });
        }
        if g.label >= g.classifier.labels().len() {
            return Err(Error::InvalidLabel {
                label: g.label,
                labels: g.classifier.labels().len(),
            });
        }
    }
    Ok(())
}

/// Generates one block of `config.block_len` tokens after `context`.
///
/// `schedule` is the decoding grid (see [`NoiseSchedule::subsample`]).
/// Steps recorded into `trajectory` when the config asks for them.
#[allow(clippy::too_many_arguments)]
pub fn decode_block(
    params: &ModelParameters,
    context: &[TokenId],
    config: &DecodeConfig,
    schedule: &NoiseSchedule,
    guidance: Option<&Guidance<'_>>,
    rng: &mut SeededRng,
    block_index: usize,
    trajectory: &mut Vec<TrajectoryStep>,
) -> Result<Vec<TokenId>> {
    config.validate()?;
    check_guidance(params, guidance)?;
    let mc = params.config();
    let needed = context.len() + config.block_len;
    let max = config.max_len.unwrap_or(mc.max_len).min(mc.max_len);
    if needed > max {
        return Err(Error::LengthOverflow { needed, max });
    }
    let k = mc.one_hot_k;
    let mut x = LogitBlock::noise(config.block_len, mc.vocab_size, k, k, rng);
    for t in (1..=schedule.len()).rev() {
        let mut logits = params.forward(context, &x, t, schedule)?;
        if let Some(g) = guidance {
            if config.guidance > 0.0 {
                logits = guided_logits(&logits, context, g.classifier, g.label, config.guidance, config.objective)?;
            }
        }
        let projected = logits_projection(&logits, config.projection, rng);
        x = renoise(projected.logits(), schedule.alpha_bar(t - 1), k, k, rng);
        if config.record_trajectory {
            trajectory.push(TrajectoryStep {
                block: block_index,
                t: schedule.timestep(t),
                predicted: logits.argmax(),
                noisy: x.argmax(),
            });
        }
    }
    Ok(x.argmax())
}

/// `m` chained blocks, each appended to the context of the next. An empty
/// prompt is replaced by the BOS sentinel as context (the sentinel is not
/// part of the record's prompt).
pub fn decode_sequence(
    params: &ModelParameters,
    prompt: &[TokenId],
    config: &DecodeConfig,
    schedule: &NoiseSchedule,
    guidance: Option<&Guidance<'_>>,
    stream: u64,
) -> Result<GenerationRecord> {
    config.validate()?;
    check_guidance(params, guidance)?;
    let grid = schedule.subsample(config.steps)?;
    let mut context: Vec<TokenId> = if prompt.is_empty() { vec![BOS_ID] } else { prompt.to_vec() };
    let needed = context.len() + config.iterations * config.block_len;
    let max = config.max_len.unwrap_or(params.config().max_len).min(params.config().max_len);
    if needed > max {
        return Err(Error::LengthOverflow { needed, max });
    }
    let mut rng = rng::substream(config.seed, stream);
    let mut record = GenerationRecord {
        prompt: prompt.to_vec(),
        blocks: Vec::with_capacity(config.iterations),
        trajectory: Vec::new(),
        config: config.clone(),
        seed: config.seed,
        stream,
    };
    for i in 0..config.iterations {
        let block = decode_block(params, &context, config, &grid, guidance, &mut rng, i, &mut record.trajectory)?;
        context.extend_from_slice(&block);
        let stop = config.eos.is_some_and(|e| block.contains(&e));
        record.blocks.push(block);
        if stop {
            break;
        }
    }
    Ok(record)
}

/// The reverse-step formulas compared in the DDPM ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DdpmVariant {
    /// `(x_t − (1−α_t)/sqrt(1−ᾱ_t)·ε) / sqrt(α_t)`.
    Direct,
    /// Predict `x̂_0 = (x_t − sqrt(1−ᾱ_t)·ε)/sqrt(ᾱ_t)`, then
    /// `sqrt(ᾱ_{t−1})·x̂_0 + c_t·sqrt(1−ᾱ_{t−1})·ε` with the compensation
    /// coefficient `c_t`. Algebraically equal to `Direct`.
    Compensated,
    /// As `Compensated` with `c_t` replaced by 1.
    Uncompensated,
}

/// One deterministic reverse step given a noise prediction `eps`.
pub fn ddpm_step(x_t: &Tensor, eps: &Tensor, schedule: &NoiseSchedule, t: usize, variant: DdpmVariant) -> Result<Tensor> {
    if x_t.shape() != eps.shape() {
        return Err(Error::shape("ddpm_step", format!("{:?} vs {:?}", x_t.shape(), eps.shape())));
    }
    let alpha = schedule.alpha(t)?;
    let ab = schedule.alpha_bar(t);
    let ab_prev = schedule.alpha_bar(t - 1);
    let data = match variant {
        DdpmVariant::Direct => {
            let c = (1.0 - alpha) / (1.0 - ab).sqrt();
            let s = alpha.sqrt();
            x_t.data().iter().zip(eps.data()).map(|(x, e)| (x - c * e) / s).collect()
        }
        DdpmVariant::Compensated | DdpmVariant::Uncompensated => {
            let coef = if variant == DdpmVariant::Compensated {
                schedule.compensation_coefficient(t)?
            } else {
                1.0
            };
            let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
            let (pa, pn) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
            x_t.data()
                .iter()
                .zip(eps.data())
                .map(|(x, e)| pa * ((x - sn * e) / sa) + coef * pn * e)
                .collect()
        }
    };
    Tensor::new(x_t.shape().to_vec(), data)
}
