//! Flat TOML run configuration with `--set key=value` overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use sdlm_core::corpus::TokenizerMode;
use sdlm_core::decoder::GuidanceObjective;
use sdlm_core::model::ModelConfig;
use sdlm_core::reference::Averaging;
use sdlm_core::simplex::ProjectionStrategy;
use sdlm_core::trainer::TrainConfig;

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,

    // data
    pub corpus: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub tokenizer: String,
    pub vocab_size: usize,
    pub holdout_fraction: f64,

    // denoiser
    pub max_len: Option<usize>,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub one_hot_k: f64,

    // training
    pub seq_len: usize,
    pub block_len: usize,
    pub diffusion_steps: usize,
    pub schedule_offset: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub total_steps: u64,
    pub checkpoint_interval: u64,
    pub resume: Option<PathBuf>,
    pub wall_time: bool,

    // decoding
    pub checkpoint: Option<PathBuf>,
    pub prompts: Option<PathBuf>,
    pub samples: usize,
    pub decode_block_len: Option<usize>,
    pub decode_steps: Option<usize>,
    pub projection: String,
    pub iterations: usize,
    pub max_total_len: Option<usize>,
    pub eos: Option<String>,
    pub trajectory: bool,

    // control
    pub classifier: Option<PathBuf>,
    pub external_classifier: Option<PathBuf>,
    pub label: Option<String>,
    pub lambdas: Vec<f64>,
    pub guidance_objective: String,

    // evaluation
    pub generations: Option<PathBuf>,
    pub gold: Option<PathBuf>,
    pub reference: Option<PathBuf>,
    pub ppl_averaging: String,

    // classifier and reference training
    pub labeled_corpus: Option<PathBuf>,
    pub aux_d_model: usize,
    pub aux_n_layers: usize,
    pub aux_n_heads: usize,
    pub aux_d_ff: usize,
    pub aux_max_len: usize,
    pub aux_steps: u64,
    pub aux_batch_size: usize,
    pub aux_learning_rate: f64,

    // synthetic corpora
    pub synth_sequences: usize,
    pub synth_prefix_len: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let t = TrainConfig::default();
        RunConfig {
            seed: None,
            output_dir: None,
            corpus: None,
            vocab: None,
            tokenizer: "word".into(),
            vocab_size: m.vocab_size,
            holdout_fraction: 0.05,
            max_len: None,
            d_model: m.d_model,
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            d_ff: m.d_ff,
            one_hot_k: m.one_hot_k,
            seq_len: t.seq_len,
            block_len: t.block_len,
            diffusion_steps: t.diffusion_steps,
            schedule_offset: t.schedule_offset,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            weight_decay: t.weight_decay,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            total_steps: t.total_steps,
            checkpoint_interval: t.checkpoint_interval,
            resume: None,
            wall_time: false,
            checkpoint: None,
            prompts: None,
            samples: 1,
            decode_block_len: None,
            decode_steps: None,
            projection: "greedy".into(),
            iterations: 1,
            max_total_len: None,
            eos: None,
            trajectory: false,
            classifier: None,
            external_classifier: None,
            label: None,
            lambdas: vec![0.0, 100.0, 500.0, 2000.0],
            guidance_objective: "log-prob".into(),
            generations: None,
            gold: None,
            reference: None,
            ppl_averaging: "micro".into(),
            labeled_corpus: None,
            aux_d_model: 64,
            aux_n_layers: 2,
            aux_n_heads: 4,
            aux_d_ff: 128,
            aux_max_len: 128,
            aux_steps: 300,
            aux_batch_size: 16,
            aux_learning_rate: 3e-3,
            synth_sequences: 32,
            synth_prefix_len: 8,
        }
    }
}

/// Splits `key=value`; the value is read as a TOML literal, falling back to
/// a bare string.
fn parse_override(item: &str) -> Result<(String, toml::Value), CliError> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| CliError::config(format!("override {item:?} is not key=value")))?;
    let key = key.trim().to_string();
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    Ok((key, value))
}

impl RunConfig {
    /// Reads `path` (if any), applies overrides in order, and deserializes.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut table = match path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| CliError::config(format!("cannot read config {}: {e}", p.display())))?;
                // typed pass first so diagnostics carry line numbers
                toml::from_str::<RunConfig>(&text)
                    .map_err(|e| CliError::config(format!("{}: {e}", p.display())))?;
                toml::from_str::<toml::Table>(&text).map_err(|e| CliError::config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for item in overrides {
            let (k, v) = parse_override(item)?;
            table.insert(k, v);
        }
        RunConfig::deserialize(toml::Value::Table(table)).map_err(|e| CliError::config(format!("config: {e}")))
    }

    /// The effective config without `output_dir`, so runs written to
    /// different places still share a hash.
    pub fn to_toml(&self) -> String {
        let c = RunConfig {
            output_dir: None,
            ..self.clone()
        };
        toml::to_string(&c).expect("run config serializes")
    }

    /// First 16 hex digits of the SHA-256 of [`Self::to_toml`].
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn seed(&self) -> Result<u64, CliError> {
        self.seed.ok_or_else(|| CliError::config("missing required field `seed`"))
    }

    pub fn output_dir(&self) -> Result<&Path, CliError> {
        self.output_dir
            .as_deref()
            .ok_or_else(|| CliError::config("missing required field `output_dir`"))
    }

    /// A required path field that must exist.
    pub fn existing(&self, field: &'static str, value: &Option<PathBuf>) -> Result<PathBuf, CliError> {
        let p = value
            .as_ref()
            .ok_or_else(|| CliError::config(format!("missing required field `{field}`")))?;
        if !p.exists() {
            return Err(CliError::config(format!("`{field}`: {} does not exist", p.display())));
        }
        Ok(p.clone())
    }

    /// An optional path field that must exist when given.
    pub fn existing_opt(&self, field: &'static str, value: &Option<PathBuf>) -> Result<Option<PathBuf>, CliError> {
        match value {
            Some(_) => self.existing(field, value).map(Some),
            None => Ok(None),
        }
    }

    pub fn tokenizer(&self) -> Result<TokenizerMode, CliError> {
        self.tokenizer.parse().map_err(|e| CliError::config(format!("`tokenizer`: {e}")))
    }

    pub fn projection(&self) -> Result<ProjectionStrategy, CliError> {
        self.projection.parse().map_err(|e| CliError::config(format!("`projection`: {e}")))
    }

    pub fn objective(&self) -> Result<GuidanceObjective, CliError> {
        self.guidance_objective
            .parse()
            .map_err(|e| CliError::config(format!("`guidance_objective`: {e}")))
    }

    pub fn averaging(&self) -> Result<Averaging, CliError> {
        match self.ppl_averaging.as_str() {
            "micro" => Ok(Averaging::Micro),
            "macro" => Ok(Averaging::Macro),
            other => Err(CliError::config(format!("`ppl_averaging`: expected micro or macro, got {other:?}"))),
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        let c = TrainConfig {
            seq_len: self.seq_len,
            block_len: self.block_len,
            diffusion_steps: self.diffusion_steps,
            one_hot_k: self.one_hot_k,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            total_steps: self.total_steps,
            seed: self.seed()?,
            checkpoint_interval: self.checkpoint_interval,
            schedule_offset: self.schedule_offset,
        };
        c.validate().map_err(|e| CliError::config(e.to_string()))?;
        Ok(c)
    }

    pub fn model_config(&self, vocab_size: usize) -> Result<ModelConfig, CliError> {
        let c = ModelConfig {
            vocab_size,
            max_len: self.max_len.unwrap_or(self.seq_len),
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            one_hot_k: self.one_hot_k,
        };
        c.validate().map_err(|e| CliError::config(e.to_string()))?;
        Ok(c)
    }
}
