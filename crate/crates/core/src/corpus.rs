//! Tokenization, vocabulary construction and fixed-length packing.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng;

pub type TokenId = u32;

/// Padding sentinel, also used as the beginning-of-sequence marker when a
/// prompt is empty.
pub const PAD_ID: TokenId = 0;
pub const BOS_ID: TokenId = PAD_ID;
pub const UNK_ID: TokenId = 1;

const PAD_TOKEN: &str = "<pad>";
const UNK_TOKEN: &str = "<unk>";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenizerMode {
    /// Whitespace-separated words; decoding joins with single spaces.
    Word,
    /// Unicode scalar values, whitespace included.
    Char,
}

impl fmt::Display for TokenizerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TokenizerMode::Word => "word",
            TokenizerMode::Char => "char",
        })
    }
}

impl FromStr for TokenizerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "word" => Ok(TokenizerMode::Word),
            "char" => Ok(TokenizerMode::Char),
            other => Err(Error::invalid(format!("unknown tokenizer mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Vocabulary {
    mode: TokenizerMode,
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

fn split<'t>(text: &'t str, mode: TokenizerMode) -> Box<dyn Iterator<Item = &'t str> + 't> {
    match mode {
        TokenizerMode::Word => Box::new(text.split_whitespace()),
        TokenizerMode::Char => Box::new(text.char_indices().map(move |(i, c)| &text[i..i + c.len_utf8()])),
    }
}

/// Keeps the `max_size - 2` most frequent tokens after the two reserved
/// ids; frequency ties go to the lexicographically smaller token.
pub fn build_vocab(text: &str, mode: TokenizerMode, max_size: usize) -> Result<Vocabulary> {
    if max_size < 3 {
        return Err(Error::invalid(format!("vocabulary size {max_size} < 3")));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for tok in split(text, mode) {
        if tok != PAD_TOKEN && tok != UNK_TOKEN {
            *counts.entry(tok).or_default() += 1;
        }
    }
    if counts.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked.truncate(max_size - 2);

    let mut tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
    tokens.extend(ranked.into_iter().map(|(t, _)| t.to_string()));
    Vocabulary::from_tokens(mode, tokens)
}

impl Vocabulary {
    /// Wraps an explicit token table. Ids 0 and 1 must be the reserved
    /// padding and unknown tokens.
    pub fn from_tokens(mode: TokenizerMode, tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 3 {
            return Err(Error::invalid("vocabulary needs at least 3 entries"));
        }
        if tokens[0] != PAD_TOKEN || tokens[1] != UNK_TOKEN {
            return Err(Error::invalid("ids 0 and 1 must be <pad> and <unk>"));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::invalid(format!("duplicate token {t:?}")));
            }
        }
        Ok(Vocabulary { mode, tokens, index })
    }

    pub fn mode(&self) -> TokenizerMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        split(text, self.mode)
            .map(|t| self.id(t).unwrap_or(UNK_ID))
            .collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let mut parts = Vec::with_capacity(ids.len());
        for &id in ids {
            let tok = self.token(id).ok_or(Error::TokenOutOfRange {
                id: id as usize,
                vocab: self.len(),
            })?;
            parts.push(tok);
        }
        Ok(match self.mode {
            TokenizerMode::Word => parts.join(" "),
            TokenizerMode::Char => parts.concat(),
        })
    }

    /// One escaped token per line; line number is the id.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(&escape(t));
            out.push('\n');
        }
        out
    }

    pub fn from_file_string(mode: TokenizerMode, contents: &str) -> Result<Self> {
        let tokens = contents.lines().map(unescape).collect::<Result<Vec<_>>>()?;
        Self::from_tokens(mode, tokens)
    }

    /// Short content hash used to check that two models share a tokenizer.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.mode.to_string().as_bytes());
        h.update(b"\n");
        h.update(self.to_file_string().as_bytes());
        let digest = h.finalize();
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn escape(token: &str) -> String {
    let mut s = String::with_capacity(token.len());
    for c in token.chars() {
        match c {
            '\\' => s.push_str("\\\\"),
            '\n' => s.push_str("\\n"),
            '\r' => s.push_str("\\r"),
            '\t' => s.push_str("\\t"),
            c => s.push(c),
        }
    }
    s
}

fn unescape(line: &str) -> Result<String> {
    let mut out = String::with_capacity(line.len());
    let mut chars = line.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            Some('t') => out.push('\t'),
            other => {
                return Err(Error::invalid(format!("bad escape \\{other:?} in vocabulary line {line:?}")))
            }
        }
    }
    Ok(out)
}

/// Fixed-length training sequences with a held-out split.
#[derive(Clone, Debug)]
pub struct PackedCorpus {
    seq_len: usize,
    sequences: Vec<Vec<TokenId>>,
    heldout: Vec<bool>,
    holdout_fraction: f64,
    train_idx: Vec<usize>,
}

/// Cuts the stream into consecutive non-overlapping windows of `seq_len`
/// (the tail remainder is dropped) and sends each window to the held-out
/// split with probability `holdout_fraction`.
pub fn pack_sequences(
    ids: &[TokenId],
    seq_len: usize,
    holdout_fraction: f64,
    seed: u64,
) -> Result<PackedCorpus> {
    if seq_len == 0 {
        return Err(Error::invalid("sequence length must be positive"));
    }
    if !(0.0..=1.0).contains(&holdout_fraction) {
        return Err(Error::invalid(format!("holdout fraction {holdout_fraction} not in [0,1]")));
    }
    if ids.len() < seq_len {
        return Err(Error::StreamTooShort {
            len: ids.len(),
            seq_len,
        });
    }
    let mut rng = rng::seeded(seed);
    let sequences: Vec<Vec<TokenId>> = ids.chunks_exact(seq_len).map(<[TokenId]>::to_vec).collect();
    let heldout = sequences
        .iter()
        .map(|_| rng.random::<f64>() < holdout_fraction)
        .collect();
    Ok(PackedCorpus::from_parts(seq_len, sequences, heldout, holdout_fraction))
}

impl PackedCorpus {
    fn from_parts(seq_len: usize, sequences: Vec<Vec<TokenId>>, heldout: Vec<bool>, holdout_fraction: f64) -> Self {
        let train_idx = heldout
            .iter()
            .enumerate()
            .filter(|(_, &h)| !h)
            .map(|(i, _)| i)
            .collect();
        PackedCorpus {
            seq_len,
            sequences,
            heldout,
            holdout_fraction,
            train_idx,
        }
    }

    /// Every sequence goes to the training split.
    pub fn from_sequences(sequences: Vec<Vec<TokenId>>) -> Result<Self> {
        let seq_len = sequences.first().map(Vec::len).ok_or(Error::EmptyCorpus)?;
        if sequences.iter().any(|s| s.len() != seq_len) {
            return Err(Error::invalid("sequences differ in length"));
        }
        let heldout = vec![false; sequences.len()];
        Ok(Self::from_parts(seq_len, sequences, heldout, 0.0))
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn holdout_fraction(&self) -> f64 {
        self.holdout_fraction
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn sequences(&self) -> &[Vec<TokenId>] {
        &self.sequences
    }

    pub fn is_heldout(&self, i: usize) -> bool {
        self.heldout[i]
    }

    pub fn train(&self) -> impl Iterator<Item = &[TokenId]> {
        self.train_idx.iter().map(|&i| self.sequences[i].as_slice())
    }

    pub fn heldout(&self) -> impl Iterator<Item = &[TokenId]> {
        self.sequences
            .iter()
            .zip(&self.heldout)
            .filter(|(_, &h)| h)
            .map(|(s, _)| s.as_slice())
    }

    pub fn train_len(&self) -> usize {
        self.train_idx.len()
    }

    /// Checks length and id-range invariants.
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        for s in &self.sequences {
            if s.len() != self.seq_len {
                return Err(Error::invalid(format!("sequence of length {} != {}", s.len(), self.seq_len)));
            }
            if let Some(&bad) = s.iter().find(|&&t| t as usize >= vocab_size) {
                return Err(Error::TokenOutOfRange {
                    id: bad as usize,
                    vocab: vocab_size,
                });
            }
        }
        if self.heldout.len() != self.sequences.len() {
            return Err(Error::invalid("split flags do not cover every sequence"));
        }
        Ok(())
    }

    /// Uniform draws with replacement from the training split.
    pub fn sample_batch<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<Vec<&[TokenId]>> {
        if self.train_idx.is_empty() {
            return Err(Error::EmptyTrainSplit);
        }
        Ok((0..batch)
            .map(|_| {
                let i = self.train_idx[rng.random_range(0..self.train_idx.len())];
                self.sequences[i].as_slice()
            })
            .collect())
    }
}

/// Parses `label<TAB>text` lines; blank lines are skipped.
pub fn parse_labeled(contents: &str) -> Result<Vec<(String, String)>> {
    contents
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            l.split_once('\t')
                .map(|(a, b)| (a.to_string(), b.to_string()))
                .ok_or_else(|| Error::invalid(format!("line {}: expected label<TAB>text", n + 1)))
        })
        .collect()
}
