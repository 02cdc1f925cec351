//! Generated corpora for the memorization and attribute-control experiments.

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{PackedCorpus, TokenId, TokenizerMode, Vocabulary};
use crate::error::{Error, Result};
use crate::rng;

const RESERVED: [&str; 2] = ["<pad>", "<unk>"];

/// `n` sequences of `seq_len` tokens drawn uniformly from `vocab_size − 2`
/// word types `w0, w1, …`.
pub fn memorization_corpus(n: usize, seq_len: usize, vocab_size: usize, seed: u64) -> Result<(Vocabulary, PackedCorpus)> {
    if n == 0 || seq_len == 0 || vocab_size < 3 {
        return Err(Error::invalid("memorization corpus needs n, seq_len >= 1 and vocab_size >= 3"));
    }
    let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
    tokens.extend((0..vocab_size - 2).map(|i| format!("w{i}")));
    let vocab = Vocabulary::from_tokens(TokenizerMode::Word, tokens)?;
    let mut rng = rng::seeded(seed);
    let seqs = (0..n)
        .map(|_| (0..seq_len).map(|_| rng.random_range(2..vocab_size as TokenId)).collect())
        .collect();
    Ok((vocab, PackedCorpus::from_sequences(seqs)?))
}

/// Two-polarity marker-token corpus.
///
/// Every sequence starts with `prefix_len` neutral tokens. Each later
/// position holds, with probability `marker_rate`, a marker from the
/// sequence's polarity set, and a neutral token otherwise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeCorpusConfig {
    pub sequences: usize,
    pub seq_len: usize,
    pub prefix_len: usize,
    pub neutral_tokens: usize,
    pub markers_per_label: usize,
    pub marker_rate: f64,
    pub seed: u64,
}

impl Default for AttributeCorpusConfig {
    fn default() -> Self {
        AttributeCorpusConfig {
            sequences: 512,
            seq_len: 32,
            prefix_len: 8,
            neutral_tokens: 24,
            markers_per_label: 4,
            marker_rate: 0.3,
            seed: 0,
        }
    }
}

pub const NEGATIVE: &str = "neg";
pub const POSITIVE: &str = "pos";

#[derive(Clone, Debug)]
pub struct AttributeCorpus {
    pub vocab: Vocabulary,
    /// Token sequences with their label, alternating labels.
    pub examples: Vec<(Vec<TokenId>, String)>,
    pub negative_markers: Vec<TokenId>,
    pub positive_markers: Vec<TokenId>,
}

impl AttributeCorpus {
    pub fn sequences(&self) -> Vec<Vec<TokenId>> {
        self.examples.iter().map(|(s, _)| s.clone()).collect()
    }

    pub fn labeled_lines(&self) -> Result<String> {
        let mut out = String::new();
        for (s, label) in &self.examples {
            out.push_str(label);
            out.push('\t');
            out.push_str(&self.vocab.decode(s)?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Vocabulary layout: reserved ids, `n0…` neutral words, `neg0…`, `pos0…`.
pub fn attribute_corpus(cfg: &AttributeCorpusConfig) -> Result<AttributeCorpus> {
    if cfg.prefix_len >= cfg.seq_len || cfg.neutral_tokens == 0 || cfg.markers_per_label == 0 {
        return Err(Error::invalid("attribute corpus needs prefix_len < seq_len and non-empty token sets"));
    }
    if !(0.0..=1.0).contains(&cfg.marker_rate) {
        return Err(Error::invalid("marker_rate must lie in [0, 1]"));
    }
    let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
    tokens.extend((0..cfg.neutral_tokens).map(|i| format!("n{i}")));
    tokens.extend((0..cfg.markers_per_label).map(|i| format!("{NEGATIVE}{i}")));
    tokens.extend((0..cfg.markers_per_label).map(|i| format!("{POSITIVE}{i}")));
    let vocab = Vocabulary::from_tokens(TokenizerMode::Word, tokens)?;

    let neutral: Vec<TokenId> = (2..2 + cfg.neutral_tokens as TokenId).collect();
    let neg_start = 2 + cfg.neutral_tokens as TokenId;
    let negative: Vec<TokenId> = (neg_start..neg_start + cfg.markers_per_label as TokenId).collect();
    let pos_start = neg_start + cfg.markers_per_label as TokenId;
    let positive: Vec<TokenId> = (pos_start..pos_start + cfg.markers_per_label as TokenId).collect();

    let mut rng = rng::seeded(cfg.seed);
    let mut examples = Vec::with_capacity(cfg.sequences);
    for i in 0..cfg.sequences {
        let (label, markers) = if i % 2 == 0 { (NEGATIVE, &negative) } else { (POSITIVE, &positive) };
        let mut seq: Vec<TokenId> = (0..cfg.prefix_len).map(|_| *neutral.choose(&mut rng).unwrap()).collect();
        for _ in cfg.prefix_len..cfg.seq_len {
            let pool = if rng.random::<f64>() < cfg.marker_rate { markers } else { &neutral };
            seq.push(*pool.choose(&mut rng).unwrap());
        }
        examples.push((seq, label.to_string()));
    }
    Ok(AttributeCorpus {
        vocab,
        examples,
        negative_markers: negative,
        positive_markers: positive,
    })
}
