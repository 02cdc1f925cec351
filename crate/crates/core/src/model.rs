//! Bidirectional transformer denoiser.
//!
//! Input rows `0..c` embed the discrete context through a lookup table.
//! Rows `c..c+B` embed the noisy block as `softmax(w̃_t) · W_diff`, the
//! expected embedding under each row's simplex, plus a learned affine
//! timestep embedding of `t/T`. Positional embeddings are added to every
//! row and attention is unmasked. Only the block rows are projected to
//! vocabulary logits.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::TokenId;
use crate::error::{Error, Result};
use crate::nn::{self, Init, LayerIds, Layout, ParamStore};
use crate::schedule::NoiseSchedule;
use crate::simplex::LogitBlock;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    /// Longest context + block the positional table covers.
    pub max_len: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// One-hot constant `K`.
    pub one_hot_k: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 2048,
            max_len: 96,
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            d_ff: 512,
            one_hot_k: 5.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 1 || self.max_len < 1 || self.d_model < 1 || self.n_heads < 1 || self.d_ff < 1 {
            return Err(Error::invalid("model dimensions must be positive"));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::invalid(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(self.one_hot_k > 0.0) {
            return Err(Error::invalid("one-hot constant must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct DenoiserIds {
    ctx_emb: usize,
    diff_emb: usize,
    pos_emb: usize,
    time_w: usize,
    time_b: usize,
    layers: Vec<LayerIds>,
    lnf_g: usize,
    lnf_b: usize,
    out_w: usize,
    out_b: usize,
}

fn layout(cfg: &ModelConfig) -> (Layout, DenoiserIds) {
    let (v, d) = (cfg.vocab_size, cfg.d_model);
    let emb = Init::Normal(0.02);
    let mut l = Layout::default();
    let ctx_emb = l.add("ctx_emb", &[v, d], emb);
    let diff_emb = l.add("diff_emb", &[v, d], emb);
    let pos_emb = l.add("pos_emb", &[cfg.max_len, d], emb);
    let time_w = l.add("time.w", &[d], emb);
    let time_b = l.add("time.b", &[d], Init::Zeros);
    let layers = (0..cfg.n_layers)
        .map(|i| nn::layer_layout(&mut l, &format!("layer{i}"), d, cfg.d_ff, cfg.n_layers))
        .collect();
    let lnf_g = l.add("ln_f.gain", &[d], Init::Ones);
    let lnf_b = l.add("ln_f.bias", &[d], Init::Zeros);
    // Zero head: an untrained model predicts the uniform distribution.
    let out_w = l.add("out.w", &[d, v], Init::Zeros);
    let out_b = l.add("out.b", &[v], Init::Zeros);
    let ids = DenoiserIds {
        ctx_emb,
        diff_emb,
        pos_emb,
        time_w,
        time_b,
        layers,
        lnf_g,
        lnf_b,
        out_w,
        out_b,
    };
    (l, ids)
}

/// Learnable weights of the denoiser.
#[derive(Clone, Debug)]
pub struct ModelParameters {
    config: ModelConfig,
    store: ParamStore,
    ids: DenoiserIds,
}

impl ModelParameters {
    /// Random initialization with a zero output projection.
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (l, ids) = layout(&config);
        let store = l.init(rng);
        Ok(ModelParameters { config, store, ids })
    }

    pub fn from_store(config: ModelConfig, store: ParamStore) -> Result<Self> {
        config.validate()?;
        let (l, ids) = layout(&config);
        l.check(&store)?;
        Ok(ModelParameters { config, store, ids })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn check_inputs(&self, context: &[TokenId], noisy: &LogitBlock, t: usize, schedule: &NoiseSchedule) -> Result<()> {
        let v = self.config.vocab_size;
        if noisy.vocab() != v {
            return Err(Error::shape("denoiser", format!("block vocab {} != {v}", noisy.vocab())));
        }
        let needed = context.len() + noisy.rows();
        if needed > self.config.max_len {
            return Err(Error::LengthOverflow {
                needed,
                max: self.config.max_len,
            });
        }
        if t == 0 || t > schedule.len() {
            return Err(Error::TimestepOutOfRange {
                t,
                min: 1,
                max: schedule.len(),
            });
        }
        if let Some(&bad) = context.iter().find(|&&id| id as usize >= v) {
            return Err(Error::TokenOutOfRange { id: bad as usize, vocab: v });
        }
        Ok(())
    }

    /// Records the forward pass and returns the `[B, V]` block logits.
    fn logits_on_tape<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        p: &[Var],
        context: &[TokenId],
        noisy: &LogitBlock,
        time_fraction: f64,
        mut attn_maps: Option<&mut Vec<Tensor>>,
    ) -> Result<Var> {
        let ids = &self.ids;
        let c = context.len();
        let b = noisy.rows();

        let simplex = tape.constant(noisy.logits().clone());
        let simplex = tape.softmax_rows(simplex)?;
        let block = tape.weighted_embedding(simplex, p[ids.diff_emb])?;
        let tw = tape.scale(p[ids.time_w], time_fraction)?;
        let time = tape.add(tw, p[ids.time_b])?;
        let block = tape.add_row(block, time)?;

        let x = if c > 0 {
            let ctx_ids: Vec<usize> = context.iter().map(|&t| t as usize).collect();
            let ctx = tape.gather_rows(p[ids.ctx_emb], &ctx_ids)?;
            tape.concat_rows(&[ctx, block])?
        } else {
            block
        };
        let positions: Vec<usize> = (0..c + b).collect();
        let pos = tape.gather_rows(p[ids.pos_emb], &positions)?;
        let mut x = tape.add(x, pos)?;

        for layer in &ids.layers {
            x = nn::encoder_layer(tape, p, layer, x, self.config.n_heads, false, attn_maps.as_deref_mut())?;
        }
        let x = tape.slice_rows(x, c, b)?;
        let x = tape.layer_norm(x, p[ids.lnf_g], p[ids.lnf_b])?;
        nn::linear(tape, x, p[ids.out_w], p[ids.out_b])
    }

    /// Predicted logits for the block positions, `[B, V]`.
    pub fn forward(&self, context: &[TokenId], noisy: &LogitBlock, t: usize, schedule: &NoiseSchedule) -> Result<LogitBlock> {
        self.check_inputs(context, noisy, t, schedule)?;
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape);
        let out = self.logits_on_tape(&mut tape, &p, context, noisy, schedule.time_fraction(t), None)?;
        LogitBlock::new(tape.tensor(out), noisy.k())
    }

    /// Attention matrices of every layer and head, layer-major.
    pub fn attention_maps(
        &self,
        context: &[TokenId],
        noisy: &LogitBlock,
        t: usize,
        schedule: &NoiseSchedule,
    ) -> Result<Vec<Tensor>> {
        self.check_inputs(context, noisy, t, schedule)?;
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape);
        let mut maps = Vec::new();
        self.logits_on_tape(&mut tape, &p, context, noisy, schedule.time_fraction(t), Some(&mut maps))?;
        Ok(maps)
    }

    /// Mean per-token negative log-likelihood of `targets` at the block rows.
    pub fn block_nll(
        &self,
        context: &[TokenId],
        noisy: &LogitBlock,
        t: usize,
        schedule: &NoiseSchedule,
        targets: &[TokenId],
    ) -> Result<f64> {
        self.check_inputs(context, noisy, t, schedule)?;
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape);
        let loss = self.loss_on_tape(&mut tape, &p, context, noisy, schedule.time_fraction(t), targets)?;
        Ok(tape.value(loss)[0])
    }

    /// [`Self::block_nll`] plus its gradient for every parameter, in store order.
    pub fn block_nll_grad(
        &self,
        context: &[TokenId],
        noisy: &LogitBlock,
        t: usize,
        schedule: &NoiseSchedule,
        targets: &[TokenId],
    ) -> Result<(f64, Vec<Tensor>)> {
        self.check_inputs(context, noisy, t, schedule)?;
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape);
        let loss = self.loss_on_tape(&mut tape, &p, context, noisy, schedule.time_fraction(t), targets)?;
        let mut grads = tape.backward(loss)?;
        let value = tape.value(loss)[0];
        Ok((value, p.iter().map(|&v| grads.take(v)).collect()))
    }

    fn loss_on_tape<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        p: &[Var],
        context: &[TokenId],
        noisy: &LogitBlock,
        time_fraction: f64,
        targets: &[TokenId],
    ) -> Result<Var> {
        if targets.len() != noisy.rows() {
            return Err(Error::shape(
                "block_nll",
                format!("{} targets for a block of {}", targets.len(), noisy.rows()),
            ));
        }
        let logits = self.logits_on_tape(tape, p, context, noisy, time_fraction, None)?;
        let targets: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
        tape.cross_entropy_rows(logits, &targets)
    }
}
