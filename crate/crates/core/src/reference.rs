//! Small causal transformer used as an independent perplexity scorer.

use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{get_json, put_json, Container, ContainerKind, MetaValue};
use crate::classifier::log_softmax;
use crate::corpus::{PackedCorpus, TokenId, BOS_ID};
use crate::error::{Error, Result};
use crate::nn::{self, Init, LayerIds, Layout, ParamStore};
use crate::optim::{check_divergence, mean_loss_and_grads, AdamW, AdamWConfig};
use crate::rng;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceConfig {
    pub vocab_size: usize,
    /// Longest input including the leading BOS.
    pub max_len: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
}

impl ReferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 1 || self.max_len < 2 || self.d_model < 1 || self.n_heads < 1 || self.d_ff < 1 {
            return Err(Error::invalid("reference dimensions must be positive"));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::invalid("reference heads must divide d_model"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceTrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for ReferenceTrainConfig {
    fn default() -> Self {
        ReferenceTrainConfig {
            steps: 500,
            batch_size: 16,
            learning_rate: 1e-3,
            weight_decay: 0.01,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
struct ReferenceIds {
    tok_emb: usize,
    pos_emb: usize,
    layers: Vec<LayerIds>,
    lnf_g: usize,
    lnf_b: usize,
    out_w: usize,
    out_b: usize,
}

fn layout(cfg: &ReferenceConfig) -> (Layout, ReferenceIds) {
    let (v, d) = (cfg.vocab_size, cfg.d_model);
    let mut l = Layout::default();
    let tok_emb = l.add("tok_emb", &[v, d], Init::Normal(0.02));
    let pos_emb = l.add("pos_emb", &[cfg.max_len, d], Init::Normal(0.02));
    let layers = (0..cfg.n_layers)
        .map(|i| nn::layer_layout(&mut l, &format!("layer{i}"), d, cfg.d_ff, cfg.n_layers))
        .collect();
    let lnf_g = l.add("ln_f.gain", &[d], Init::Ones);
    let lnf_b = l.add("ln_f.bias", &[d], Init::Zeros);
    let out_w = l.add("out.w", &[d, v], Init::Zeros);
    let out_b = l.add("out.b", &[v], Init::Zeros);
    (
        l,
        ReferenceIds {
            tok_emb,
            pos_emb,
            layers,
            lnf_g,
            lnf_b,
            out_w,
            out_b,
        },
    )
}

/// Left-to-right language model `p(w_j | w_<j)` with strictly causal attention.
#[derive(Clone, Debug)]
pub struct ARReferenceModel {
    config: ReferenceConfig,
    store: ParamStore,
    ids: ReferenceIds,
    vocab_hash: String,
}

impl ARReferenceModel {
    /// Zero output head: every next-token distribution is uniform.
    pub fn init<R: Rng + ?Sized>(config: ReferenceConfig, vocab_hash: impl Into<String>, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (l, ids) = layout(&config);
        Ok(ARReferenceModel {
            store: l.init(rng),
            config,
            ids,
            vocab_hash: vocab_hash.into(),
        })
    }

    pub fn config(&self) -> &ReferenceConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn vocab_hash(&self) -> &str {
        &self.vocab_hash
    }

    pub fn check_vocab(&self, hash: &str) -> Result<()> {
        if self.vocab_hash != hash {
            return Err(Error::VocabMismatch {
                expected: hash.to_string(),
                found: self.vocab_hash.clone(),
            });
        }
        Ok(())
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::invalid("empty input"));
        }
        if tokens.len() > self.config.max_len {
            return Err(Error::LengthOverflow {
                needed: tokens.len(),
                max: self.config.max_len,
            });
        }
        let v = self.config.vocab_size;
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= v) {
            return Err(Error::TokenOutOfRange { id: bad as usize, vocab: v });
        }
        Ok(())
    }

    /// Next-token logits for every input position, `[n, V]`.
    fn logits_on_tape<'a>(&'a self, tape: &mut Tape<'a>, p: &[Var], input: &[TokenId]) -> Result<Var> {
        let ids = &self.ids;
        let toks: Vec<usize> = input.iter().map(|&t| t as usize).collect();
        let x = tape.gather_rows(p[ids.tok_emb], &toks)?;
        let pos = tape.gather_rows(p[ids.pos_emb], &(0..input.len()).collect::<Vec<_>>())?;
        let mut x = tape.add(x, pos)?;
        for layer in &ids.layers {
            x = nn::encoder_layer(tape, p, layer, x, self.config.n_heads, true, None)?;
        }
        let x = tape.layer_norm(x, p[ids.lnf_g], p[ids.lnf_b])?;
        nn::linear(tape, x, p[ids.out_w], p[ids.out_b])
    }

    pub fn next_token_logits(&self, input: &[TokenId]) -> Result<Tensor> {
        self.check_tokens(input)?;
        let mut tape = Tape::new();
        let p = self.store.bind_frozen(&mut tape);
        let out = self.logits_on_tape(&mut tape, &p, input)?;
        Ok(tape.tensor(out))
    }

    /// Summed NLL of `continuation` given `BOS + context`, and its token count.
    pub fn continuation_nll(&self, context: &[TokenId], continuation: &[TokenId]) -> Result<(f64, usize)> {
        if continuation.is_empty() {
            return Err(Error::invalid("nothing to score"));
        }
        let mut input = Vec::with_capacity(1 + context.len() + continuation.len());
        input.push(BOS_ID);
        input.extend_from_slice(context);
        input.extend_from_slice(continuation);
        input.pop();
        self.check_tokens(continuation)?;
        let logits = self.next_token_logits(&input)?;
        let start = context.len();
        let nll = continuation
            .iter()
            .enumerate()
            .map(|(j, &tok)| -log_softmax(logits.row(start + j))[tok as usize])
            .sum();
        Ok((nll, continuation.len()))
    }

    fn loss_grad(&self, seq: &[TokenId]) -> Result<(f64, Vec<Tensor>)> {
        let mut input = Vec::with_capacity(seq.len());
        input.push(BOS_ID);
        input.extend_from_slice(&seq[..seq.len() - 1]);
        self.check_tokens(&input)?;
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape);
        let logits = self.logits_on_tape(&mut tape, &p, &input)?;
        let targets: Vec<usize> = seq.iter().map(|&t| t as usize).collect();
        let loss = tape.cross_entropy_rows(logits, &targets)?;
        let mut grads = tape.backward(loss)?;
        Ok((tape.value(loss)[0], p.iter().map(|&v| grads.take(v)).collect()))
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(ContainerKind::Reference);
        put_json(&mut c, "reference_config", &self.config);
        c.put("vocab_hash", MetaValue::Str(self.vocab_hash.clone()));
        for (name, t) in self.store.iter() {
            c.tensors.push((name.to_string(), t.clone()));
        }
        c
    }

    pub fn from_container(c: Container) -> Result<Self> {
        c.expect_kind(ContainerKind::Reference)?;
        let config: ReferenceConfig = get_json(&c, "reference_config")?;
        config.validate()?;
        let hash = c.meta_str("vocab_hash")?.to_string();
        let mut store = ParamStore::new();
        for (name, t) in c.tensors {
            store.push(name, t);
        }
        let (l, ids) = layout(&config);
        l.check(&store)?;
        Ok(ARReferenceModel {
            config,
            store,
            ids,
            vocab_hash: hash,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(Container::load(path)?)
    }
}

/// Next-token training on the corpus' training split.
pub fn train_ar_reference(
    corpus: &PackedCorpus,
    config: ReferenceConfig,
    train: &ReferenceTrainConfig,
    vocab_hash: &str,
) -> Result<(ARReferenceModel, Vec<f64>)> {
    corpus.validate(config.vocab_size)?;
    if corpus.seq_len() > config.max_len {
        return Err(Error::LengthOverflow {
            needed: corpus.seq_len(),
            max: config.max_len,
        });
    }
    let mut model = ARReferenceModel::init(config, vocab_hash, &mut rng::substream(train.seed, 0))?;
    let mut opt = AdamW::new(
        AdamWConfig {
            learning_rate: train.learning_rate,
            weight_decay: train.weight_decay,
            ..Default::default()
        },
        model.store(),
    );
    let mut rng = rng::substream(train.seed, 1);
    let mut curve = Vec::with_capacity(train.steps as usize);
    for step in 0..train.steps {
        let batch = corpus.sample_batch(train.batch_size, &mut rng)?;
        let m = &model;
        let results: Vec<(f64, Vec<Tensor>)> = batch.par_iter().map(|s| m.loss_grad(s)).collect::<Result<_>>()?;
        let (loss, grads) = mean_loss_and_grads(results)?;
        check_divergence(step + 1, loss, &grads)?;
        opt.update(model.store_mut(), &grads)?;
        curve.push(loss);
    }
    Ok((model, curve))
}

/// How per-sample perplexities are pooled.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Averaging {
    /// `exp(total NLL / total tokens)`.
    Micro,
    /// Mean of per-sample `exp(NLL / tokens)`.
    Macro,
}

/// Perplexity of each continuation given its context.
pub fn conditional_perplexity(
    model: &ARReferenceModel,
    pairs: &[(&[TokenId], &[TokenId])],
    averaging: Averaging,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let scored: Vec<(f64, usize)> = pairs
        .par_iter()
        .map(|(ctx, cont)| model.continuation_nll(ctx, cont))
        .collect::<Result<_>>()?;
    Ok(match averaging {
        Averaging::Micro => {
            let nll: f64 = scored.iter().map(|s| s.0).sum();
            let n: usize = scored.iter().map(|s| s.1).sum();
            (nll / n as f64).exp()
        }
        Averaging::Macro => scored.iter().map(|(nll, n)| (nll / *n as f64).exp()).sum::<f64>() / scored.len() as f64,
    })
}

/// Micro-averaged perplexity of whole samples, each scored after a BOS.
pub fn reference_perplexity(model: &ARReferenceModel, samples: &[Vec<TokenId>]) -> Result<f64> {
    let pairs: Vec<(&[TokenId], &[TokenId])> = samples.iter().map(|s| (&[][..], s.as_slice())).collect();
    conditional_perplexity(model, &pairs, Averaging::Micro)
}
