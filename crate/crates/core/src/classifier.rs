//! Attribute classifier over (discrete context, simplex block) inputs.
//!
//! Context tokens are looked up in the token table; block rows embed as
//! `softmax(logits) · table`, so the classifier is differentiable with
//! respect to raw block logits. With `n_layers = 0` it degrades to a
//! bag-of-embeddings model.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{get_json, put_json, Container, ContainerKind, MetaValue};
use crate::corpus::TokenId;
use crate::error::{Error, Result};
use crate::nn::{self, Init, LayerIds, Layout, ParamStore};
use crate::optim::{check_divergence, mean_loss_and_grads, AdamW, AdamWConfig};
use crate::rng;
use crate::simplex::LogitBlock;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub labels: Vec<String>,
}

impl ClassifierConfig {
    pub fn new(vocab_size: usize, max_len: usize, labels: Vec<String>) -> Self {
        ClassifierConfig {
            vocab_size,
            max_len,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            labels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.len() < 2 {
            return Err(Error::invalid("classifier needs at least two labels"));
        }
        let mut sorted = self.labels.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.labels.len() {
            return Err(Error::invalid("duplicate classifier labels"));
        }
        if self.vocab_size < 1 || self.max_len < 1 || self.d_model < 1 {
            return Err(Error::invalid("classifier dimensions must be positive"));
        }
        if self.n_layers > 0 && (self.n_heads < 1 || self.d_model % self.n_heads != 0 || self.d_ff < 1) {
            return Err(Error::invalid("classifier heads must divide d_model"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierTrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        ClassifierTrainConfig {
            steps: 300,
            batch_size: 16,
            learning_rate: 3e-3,
            weight_decay: 0.01,
            holdout_fraction: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
struct ClassifierIds {
    tok_emb: usize,
    pos_emb: usize,
    layers: Vec<LayerIds>,
    lnf_g: usize,
    lnf_b: usize,
    head_w: usize,
    head_b: usize,
}

fn layout(cfg: &ClassifierConfig) -> (Layout, ClassifierIds) {
    let d = cfg.d_model;
    let mut l = Layout::default();
    let tok_emb = l.add("tok_emb", &[cfg.vocab_size, d], Init::Normal(1.0));
    let pos_emb = l.add("pos_emb", &[cfg.max_len, d], Init::Normal(0.02));
    let layers = (0..cfg.n_layers)
        .map(|i| nn::layer_layout(&mut l, &format!("layer{i}"), d, cfg.d_ff, cfg.n_layers))
        .collect();
    let lnf_g = l.add("ln_f.gain", &[d], Init::Ones);
    let lnf_b = l.add("ln_f.bias", &[d], Init::Zeros);
    let head_w = l.add("head.w", &[d, cfg.labels.len()], Init::Zeros);
    let head_b = l.add("head.b", &[cfg.labels.len()], Init::Zeros);
    (
        l,
        ClassifierIds {
            tok_emb,
            pos_emb,
            layers,
            lnf_g,
            lnf_b,
            head_w,
            head_b,
        },
    )
}

/// Frozen-or-trainable classifier `f_φ(y | context, block)`.
#[derive(Clone, Debug)]
pub struct ClassifierHandle {
    config: ClassifierConfig,
    store: ParamStore,
    ids: ClassifierIds,
    vocab_hash: String,
}

impl ClassifierHandle {
    pub fn init<R: Rng + ?Sized>(config: ClassifierConfig, vocab_hash: impl Into<String>, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (l, ids) = layout(&config);
        Ok(ClassifierHandle {
            store: l.init(rng),
            config,
            ids,
            vocab_hash: vocab_hash.into(),
        })
    }

    pub fn from_store(config: ClassifierConfig, store: ParamStore, vocab_hash: impl Into<String>) -> Result<Self> {
        config.validate()?;
        let (l, ids) = layout(&config);
        l.check(&store)?;
        Ok(ClassifierHandle {
            config,
            store,
            ids,
            vocab_hash: vocab_hash.into(),
        })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn labels(&self) -> &[String] {
        &self.config.labels
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.config.labels.iter().position(|l| l == label)
    }

    pub fn vocab_hash(&self) -> &str {
        &self.vocab_hash
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Fails unless `hash` names the classifier's vocabulary.
    pub fn check_vocab(&self, hash: &str) -> Result<()> {
        if self.vocab_hash != hash {
            return Err(Error::VocabMismatch {
                expected: hash.to_string(),
                found: self.vocab_hash.clone(),
            });
        }
        Ok(())
    }

    fn check_label(&self, label: usize) -> Result<()> {
        if label >= self.config.labels.len() {
            return Err(Error::InvalidLabel {
                label,
                labels: self.config.labels.len(),
            });
        }
        Ok(())
    }

    fn check_inputs(&self, context: &[TokenId], block_rows: usize, block_vocab: Option<usize>) -> Result<()> {
        let v = self.config.vocab_size;
        if let Some(bv) = block_vocab {
            if bv != v {
                return Err(Error::shape("classifier", format!("block vocab {bv} != classifier vocab {v}")));
            }
        }
        let needed = context.len() + block_rows;
        if needed == 0 {
            return Err(Error::invalid("classifier input is empty"));
        }
        if needed > self.config.max_len {
            return Err(Error::LengthOverflow {
                needed,
                max: self.config.max_len,
            });
        }
        if let Some(&bad) = context.iter().find(|&&id| id as usize >= v) {
            return Err(Error::TokenOutOfRange { id: bad as usize, vocab: v });
        }
        Ok(())
    }

    /// Label logits `[1, labels]`; `block` holds raw block logits.
    fn logits_on_tape<'a>(&'a self, tape: &mut Tape<'a>, p: &[Var], context: &[TokenId], block: Option<Var>) -> Result<Var> {
        let ids = &self.ids;
        let mut parts = Vec::with_capacity(2);
        if !context.is_empty() {
            let ctx: Vec<usize> = context.iter().map(|&t| t as usize).collect();
            parts.push(tape.gather_rows(p[ids.tok_emb], &ctx)?);
        }
        if let Some(b) = block {
            let simplex = tape.softmax_rows(b)?;
            parts.push(tape.weighted_embedding(simplex, p[ids.tok_emb])?);
        }
        let x = if parts.len() == 1 { parts[0] } else { tape.concat_rows(&parts)? };
        let n = tape.shape(x)[0];
        let pos = tape.gather_rows(p[ids.pos_emb], &(0..n).collect::<Vec<_>>())?;
        let mut x = tape.add(x, pos)?;
        for layer in &ids.layers {
            x = nn::encoder_layer(tape, p, layer, x, self.config.n_heads, false, None)?;
        }
        let pooled = tape.mean_rows(x)?;
        let h = tape.layer_norm(pooled, p[ids.lnf_g], p[ids.lnf_b])?;
        nn::linear(tape, h, p[ids.head_w], p[ids.head_b])
    }

    /// Normalized label log-probabilities for a context and a simplex block.
    pub fn classify_simplex(&self, context: &[TokenId], block: &LogitBlock) -> Result<Vec<f64>> {
        self.check_inputs(context, block.rows(), Some(block.vocab()))?;
        let mut tape = Tape::new();
        let p = self.store.bind_frozen(&mut tape);
        let b = tape.constant(block.logits().clone());
        let out = self.logits_on_tape(&mut tape, &p, context, Some(b))?;
        Ok(log_softmax(tape.value(out)))
    }

    /// Label log-probabilities for a fully discrete token sequence.
    pub fn classify_tokens(&self, tokens: &[TokenId]) -> Result<Vec<f64>> {
        self.check_inputs(tokens, 0, None)?;
        let mut tape = Tape::new();
        let p = self.store.bind_frozen(&mut tape);
        let out = self.logits_on_tape(&mut tape, &p, tokens, None)?;
        Ok(log_softmax(tape.value(out)))
    }

    /// `(log f(label | context, softmax(block)), ∇_block log f)`, the
    /// gradient taken with respect to the raw block logits.
    pub fn grad_wrt_logits(&self, context: &[TokenId], block: &LogitBlock, label: usize) -> Result<(f64, Tensor)> {
        self.check_label(label)?;
        self.check_inputs(context, block.rows(), Some(block.vocab()))?;
        let mut tape = Tape::new();
        let p = self.store.bind_frozen(&mut tape);
        let b = tape.variable(block.logits().clone());
        let out = self.logits_on_tape(&mut tape, &p, context, Some(b))?;
        let nll = tape.cross_entropy_rows(out, &[label])?;
        let mut grads = tape.backward(nll)?;
        let mut g = grads.take(b);
        for v in g.data_mut() {
            *v = -*v;
        }
        Ok((-tape.value(nll)[0], g))
    }

    /// Mean cross-entropy of `label` and its parameter gradients, in store order.
    fn loss_grad(&self, context: &[TokenId], block: Option<&Tensor>, label: usize) -> Result<(f64, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape);
        let b = block.map(|t| tape.constant(t.clone()));
        let out = self.logits_on_tape(&mut tape, &p, context, b)?;
        let nll = tape.cross_entropy_rows(out, &[label])?;
        let mut grads = tape.backward(nll)?;
        Ok((tape.value(nll)[0], p.iter().map(|&v| grads.take(v)).collect()))
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(ContainerKind::Classifier);
        put_json(&mut c, "classifier_config", &self.config);
        c.put("vocab_hash", MetaValue::Str(self.vocab_hash.clone()));
        for (name, t) in self.store.iter() {
            c.tensors.push((name.to_string(), t.clone()));
        }
        c
    }

    pub fn from_container(c: Container) -> Result<Self> {
        c.expect_kind(ContainerKind::Classifier)?;
        let config: ClassifierConfig = get_json(&c, "classifier_config")?;
        let hash = c.meta_str("vocab_hash")?.to_string();
        let mut store = ParamStore::new();
        for (name, t) in c.tensors {
            store.push(name, t);
        }
        Self::from_store(config, store, hash)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(Container::load(path)?)
    }
}

pub(crate) fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierReport {
    pub train_accuracy: f64,
    pub heldout_accuracy: Option<f64>,
    pub final_loss: f64,
    pub train_examples: usize,
    pub heldout_examples: usize,
}

/// Fraction of `examples` whose argmax label (on discrete input) is correct.
pub fn accuracy(handle: &ClassifierHandle, examples: &[(Vec<TokenId>, usize)]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut correct = 0usize;
    for (tokens, label) in examples {
        let lp = handle.classify_tokens(tokens)?;
        if crate::tensor::argmax(&lp) == *label {
            correct += 1;
        }
    }
    Ok(correct as f64 / examples.len() as f64)
}

/// Cross-entropy training on labeled token sequences.
///
/// Each training example is split at a random point: the prefix is fed as
/// discrete context and the suffix as an almost-one-hot simplex block, so
/// the classifier sees both input paths it is queried with during guidance.
pub fn train_classifier(
    examples: &[(Vec<TokenId>, String)],
    config: ClassifierConfig,
    train: &ClassifierTrainConfig,
    one_hot_k: f64,
    vocab_hash: &str,
) -> Result<(ClassifierHandle, ClassifierReport)> {
    config.validate()?;
    let mut indexed = Vec::with_capacity(examples.len());
    for (tokens, label) in examples {
        let y = config
            .labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| Error::invalid(format!("label {label:?} not in {:?}", config.labels)))?;
        if tokens.is_empty() {
            return Err(Error::invalid("empty classifier example"));
        }
        indexed.push((tokens.clone(), y));
    }
    for (y, name) in config.labels.iter().enumerate() {
        if !indexed.iter().any(|(_, l)| *l == y) {
            return Err(Error::invalid(format!("degenerate label set: no examples for {name:?}")));
        }
    }
    if !(0.0..1.0).contains(&train.holdout_fraction) || train.batch_size == 0 {
        return Err(Error::invalid("holdout_fraction must lie in [0, 1) and batch_size be positive"));
    }

    let mut rng = rng::substream(train.seed, 0);
    indexed.shuffle(&mut rng);
    let n_held = (indexed.len() as f64 * train.holdout_fraction).floor() as usize;
    let (held, train_set) = indexed.split_at(n_held);
    if train_set.is_empty() {
        return Err(Error::EmptyTrainSplit);
    }

    let mut handle = ClassifierHandle::init(config, vocab_hash, &mut rng::substream(train.seed, 1))?;
    let mut opt = AdamW::new(
        AdamWConfig {
            learning_rate: train.learning_rate,
            weight_decay: train.weight_decay,
            ..Default::default()
        },
        handle.store(),
    );
    let mut rng = rng::substream(train.seed, 2);
    let v = handle.config.vocab_size;
    let mut final_loss = f64::NAN;
    for step in 0..train.steps {
        let mut jobs = Vec::with_capacity(train.batch_size);
        for _ in 0..train.batch_size {
            let (tokens, y) = &train_set[rng.random_range(0..train_set.len())];
            let c = rng.random_range(0..=tokens.len());
            let block = if c < tokens.len() {
                Some(crate::simplex::logits_generation(&tokens[c..], one_hot_k, v)?.into_tensor())
            } else {
                None
            };
            jobs.push((&tokens[..c], block, *y));
        }
        let results: Vec<(f64, Vec<Tensor>)> = {
            use rayon::prelude::*;
            let h = &handle;
            jobs.par_iter()
                .map(|(ctx, block, y)| {
                    h.check_inputs(ctx, block.as_ref().map_or(0, |b| b.rows()), None)?;
                    h.loss_grad(ctx, block.as_ref(), *y)
                })
                .collect::<Result<_>>()?
        };
        let (loss, grads) = mean_loss_and_grads(results)?;
        check_divergence(step + 1, loss, &grads)?;
        opt.update(handle.store_mut(), &grads)?;
        final_loss = loss;
    }

    let report = ClassifierReport {
        train_accuracy: accuracy(&handle, train_set)?,
        heldout_accuracy: if held.is_empty() { None } else { Some(accuracy(&handle, held)?) },
        final_loss,
        train_examples: train_set.len(),
        heldout_examples: held.len(),
    };
    Ok((handle, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simplex::logits_generation;

    fn small(n_layers: usize) -> ClassifierConfig {
        ClassifierConfig {
            vocab_size: 9,
            max_len: 10,
            d_model: 8,
            n_layers,
            n_heads: 2,
            d_ff: 16,
            labels: vec!["neg".into(), "pos".into()],
        }
    }

    fn randomized(n_layers: usize, seed: u64) -> ClassifierHandle {
        let mut h = ClassifierHandle::init(small(n_layers), "h", &mut rng::seeded(seed)).unwrap();
        let mut r = rng::seeded(seed + 100);
        for t in h.store_mut().tensors_mut() {
            for v in t.data_mut() {
                *v += 0.3 * rng::gaussian(&mut r, 1.0);
            }
        }
        h
    }

    #[test]
    fn zero_head_is_uniform_with_zero_gradient() {
        let h = ClassifierHandle::init(small(2), "h", &mut rng::seeded(0)).unwrap();
        let block = LogitBlock::noise(3, 9, 5.0, 5.0, &mut rng::seeded(1));
        let lp = h.classify_simplex(&[2, 3], &block).unwrap();
        assert!(lp.iter().all(|&v| (v + 2f64.ln()).abs() < 1e-15));
        let (_, g) = h.grad_wrt_logits(&[2, 3], &block, 1).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn outputs_normalize_and_are_shift_invariant() {
        for layers in [0, 2] {
            let h = randomized(layers, 3);
            let block = LogitBlock::noise(3, 9, 5.0, 5.0, &mut rng::seeded(2));
            let lp = h.classify_simplex(&[4], &block).unwrap();
            assert!((lp.iter().map(|v| v.exp()).sum::<f64>() - 1.0).abs() < 1e-12);
            let mut shifted = block.logits().clone();
            for (i, v) in shifted.data_mut().iter_mut().enumerate() {
                *v += [3.0, -1.5, 0.25][i / 9];
            }
            let lp2 = h.classify_simplex(&[4], &LogitBlock::new(shifted, 5.0).unwrap()).unwrap();
            for (a, b) in lp.iter().zip(&lp2) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn one_hot_block_matches_discrete_tokens() {
        let h = randomized(2, 4);
        let tokens = [2u32, 5, 7, 3];
        let discrete = h.classify_tokens(&tokens).unwrap();
        // K large enough that softmax leakage is negligible
        let block = logits_generation(&tokens[2..], 20.0, 9).unwrap();
        let mixed = h.classify_simplex(&tokens[..2], &block).unwrap();
        for (a, b) in discrete.iter().zip(&mixed) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn gradient_rows_sum_to_zero_and_ascend() {
        let h = randomized(2, 5);
        let block = LogitBlock::noise(3, 9, 5.0, 2.0, &mut rng::seeded(6));
        let (lp, g) = h.grad_wrt_logits(&[1, 2], &block, 1).unwrap();
        for r in 0..3 {
            assert!(g.row(r).iter().sum::<f64>().abs() < 1e-12);
        }
        let mut up = block.logits().clone();
        for (v, gv) in up.data_mut().iter_mut().zip(g.data()) {
            *v += 1e-4 * gv;
        }
        let lp2 = h.classify_simplex(&[1, 2], &LogitBlock::new(up, 5.0).unwrap()).unwrap()[1];
        assert!(lp2 >= lp);
    }

    #[test]
    fn input_errors() {
        let h = randomized(2, 5);
        let block = LogitBlock::noise(3, 9, 5.0, 2.0, &mut rng::seeded(6));
        assert!(matches!(h.grad_wrt_logits(&[1], &block, 2), Err(Error::InvalidLabel { label: 2, labels: 2 })));
        let wrong = LogitBlock::noise(3, 8, 5.0, 2.0, &mut rng::seeded(6));
        assert!(h.classify_simplex(&[1], &wrong).is_err());
        assert!(matches!(h.classify_simplex(&[1; 8], &block), Err(Error::LengthOverflow { .. })));
        assert!(matches!(h.check_vocab("other"), Err(Error::VocabMismatch { .. })));
    }

    #[test]
    fn degenerate_labels_rejected() {
        let ex = vec![(vec![2u32, 3], "neg".to_string())];
        let r = train_classifier(&ex, small(0), &ClassifierTrainConfig::default(), 5.0, "h");
        assert!(r.is_err());
    }

    #[test]
    fn overfits_a_single_batch() {
        let ex: Vec<(Vec<TokenId>, String)> = vec![
            (vec![2, 3, 4], "neg".into()),
            (vec![5, 6, 7], "pos".into()),
            (vec![3, 2, 8], "neg".into()),
            (vec![7, 8, 5], "pos".into()),
        ];
        let train = ClassifierTrainConfig {
            steps: 150,
            batch_size: 4,
            learning_rate: 1e-2,
            holdout_fraction: 0.0,
            ..Default::default()
        };
        let (h, report) = train_classifier(&ex, small(2), &train, 5.0, "h").unwrap();
        assert_eq!(report.train_accuracy, 1.0);
        assert!(report.heldout_accuracy.is_none());
        let back = ClassifierHandle::from_container(Container::from_bytes(&h.to_container().to_bytes()).unwrap()).unwrap();
        assert_eq!(back.store(), h.store());
        assert_eq!(back.config(), h.config());
    }
}
