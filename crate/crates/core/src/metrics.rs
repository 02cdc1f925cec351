//! Diversity and repetition statistics over generated token sequences.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use serde::Serialize;

use crate::corpus::TokenId;
use crate::error::{Error, Result};

/// Longest phrase considered by [`repetition_rate`].
pub const REP_WINDOW: usize = 8;
/// Consecutive copies needed for a suffix to count as repetitive.
pub const REP_MIN_REPEATS: usize = 3;

/// Mean over samples of `unique n-grams / total n-grams`, in percent.
/// Samples shorter than `n` are skipped.
pub fn dist_n(samples: &[Vec<TokenId>], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::invalid("n-gram order must be at least 1"));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for s in samples.iter().filter(|s| s.len() >= n) {
        let grams: HashSet<&[TokenId]> = s.windows(n).collect();
        sum += grams.len() as f64 / (s.len() - n + 1) as f64;
        count += 1;
    }
    if count == 0 {
        return Err(Error::invalid(format!("no sample has at least {n} tokens")));
    }
    Ok(100.0 * sum / count as f64)
}

/// True when the sequence ends in some phrase of length `1..=window`
/// repeated at least `repeats` times back to back.
pub fn ends_in_repetition(tokens: &[TokenId], window: usize, repeats: usize) -> bool {
    (1..=window).any(|k| {
        let span = k * repeats;
        if span > tokens.len() {
            return false;
        }
        let tail = &tokens[tokens.len() - span..];
        let phrase = &tail[..k];
        tail.chunks_exact(k).all(|c| c == phrase)
    })
}

/// Percentage of samples whose suffix is a phrase of at most `window`
/// tokens repeated [`REP_MIN_REPEATS`] times.
pub fn repetition_rate(samples: &[Vec<TokenId>], window: usize) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let hits = samples
        .iter()
        .filter(|s| ends_in_repetition(s, window, REP_MIN_REPEATS))
        .count();
    Ok(100.0 * hits as f64 / samples.len() as f64)
}

/// Negated least-squares slope of `ln frequency` against `ln rank` over the
/// pooled unigram counts. Equal counts are ranked by token id.
pub fn zipf_coefficient(samples: &[Vec<TokenId>]) -> Result<f64> {
    let mut counts: HashMap<TokenId, usize> = HashMap::new();
    for &t in samples.iter().flatten() {
        *counts.entry(t).or_default() += 1;
    }
    if counts.len() < 2 {
        return Err(Error::invalid("Zipf fit needs at least two distinct tokens"));
    }
    let mut freq: Vec<(TokenId, usize)> = counts.into_iter().collect();
    freq.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let pts: Vec<(f64, f64)> = freq
        .iter()
        .enumerate()
        .map(|(i, &(_, c))| (((i + 1) as f64).ln(), (c as f64).ln()))
        .collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    Ok(-sxy / sxx)
}

/// `|ln a − ln b|`.
pub fn delta_log_ppl(gen_ppl: f64, gold_ppl: f64) -> Result<f64> {
    if !(gen_ppl > 0.0) || !(gold_ppl > 0.0) {
        return Err(Error::invalid("perplexities must be positive"));
    }
    Ok((gen_ppl.ln() - gold_ppl.ln()).abs())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub samples: usize,
    pub dist1: f64,
    pub dist2: f64,
    pub dist3: f64,
    pub zipf: f64,
    pub rep: f64,
    pub reference_ppl: Option<f64>,
    pub gold_ppl: Option<f64>,
    pub delta_log_ppl: Option<f64>,
}

impl MetricReport {
    /// Diversity statistics only; perplexity fields are left empty.
    pub fn from_samples(samples: &[Vec<TokenId>]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        Ok(MetricReport {
            samples: samples.len(),
            dist1: dist_n(samples, 1)?,
            dist2: dist_n(samples, 2)?,
            dist3: dist_n(samples, 3)?,
            zipf: zipf_coefficient(samples)?,
            rep: repetition_rate(samples, REP_WINDOW)?,
            reference_ppl: None,
            gold_ppl: None,
            delta_log_ppl: None,
        })
    }

    pub fn with_perplexity(mut self, gen_ppl: f64, gold_ppl: Option<f64>) -> Result<Self> {
        self.reference_ppl = Some(gen_ppl);
        if let Some(g) = gold_ppl {
            self.gold_ppl = Some(g);
            self.delta_log_ppl = Some(delta_log_ppl(gen_ppl, g)?);
        }
        Ok(self)
    }

    fn fields(&self) -> Vec<(&'static str, String)> {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        vec![
            ("samples", self.samples.to_string()),
            ("dist1", format!("{:.6}", self.dist1)),
            ("dist2", format!("{:.6}", self.dist2)),
            ("dist3", format!("{:.6}", self.dist3)),
            ("zipf", format!("{:.6}", self.zipf)),
            ("rep", format!("{:.6}", self.rep)),
            ("reference_ppl", opt(self.reference_ppl)),
            ("gold_ppl", opt(self.gold_ppl)),
            ("delta_log_ppl", opt(self.delta_log_ppl)),
        ]
    }

    /// Header line plus one data line.
    pub fn to_csv(&self) -> String {
        let f = self.fields();
        let header: Vec<&str> = f.iter().map(|(k, _)| *k).collect();
        let row: Vec<&str> = f.iter().map(|(_, v)| v.as_str()).collect();
        format!("{}\n{}\n", header.join(","), row.join(","))
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.fields() {
            let v = if v.is_empty() { "-".to_string() } else { v };
            let _ = writeln!(out, "{k:<14} {v:>14}");
        }
        out
    }
}
