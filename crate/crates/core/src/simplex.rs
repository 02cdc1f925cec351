//! Almost-one-hot logit blocks: encoding tokens, noising them, and
//! projecting predicted logits back onto `{−K, +K}`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::TokenId;
use crate::error::{Error, Result};
use crate::rng::gaussian;
use crate::schedule::NoiseSchedule;
use crate::tensor::{argmax, softmax_into, Tensor};

/// `B × V` logits plus the one-hot constant `K` they are expressed in.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitBlock {
    logits: Tensor,
    k: f64,
}

impl LogitBlock {
    pub fn new(logits: Tensor, k: f64) -> Result<Self> {
        if logits.shape().len() != 2 {
            return Err(Error::shape("logit block", format!("expected [B, V], got {:?}", logits.shape())));
        }
        logits.ensure_finite("logit block")?;
        if !(k > 0.0) {
            return Err(Error::invalid(format!("one-hot constant {k} must be positive")));
        }
        Ok(LogitBlock { logits, k })
    }

    /// Pure noise with i.i.d. `N(0, std²)` entries.
    pub fn noise<R: Rng + ?Sized>(rows: usize, vocab: usize, k: f64, std: f64, rng: &mut R) -> Self {
        LogitBlock {
            logits: Tensor::randn(&[rows, vocab], std, rng),
            k,
        }
    }

    pub fn rows(&self) -> usize {
        self.logits.shape()[0]
    }

    pub fn vocab(&self) -> usize {
        self.logits.shape()[1]
    }

    pub fn k(&self) -> f64 {
        self.k
    }

    pub fn logits(&self) -> &Tensor {
        &self.logits
    }

    pub fn into_tensor(self) -> Tensor {
        self.logits
    }

    /// Row-wise argmax, lowest id on ties.
    pub fn argmax(&self) -> Vec<TokenId> {
        self.logits.argmax_rows().into_iter().map(|i| i as TokenId).collect()
    }

    /// True when every entry is `±K` and each row has a `+K`.
    pub fn is_almost_one_hot(&self) -> bool {
        (0..self.rows()).all(|r| {
            let row = self.logits.row(r);
            row.iter().all(|&v| v == self.k || v == -self.k) && row.contains(&self.k)
        })
    }
}

/// `+K` at each token's id, `−K` elsewhere.
pub fn logits_generation(tokens: &[TokenId], k: f64, vocab: usize) -> Result<LogitBlock> {
    if !(k > 0.0) {
        return Err(Error::invalid(format!("one-hot constant {k} must be positive")));
    }
    let mut data = vec![-k; tokens.len() * vocab];
    for (r, &tok) in tokens.iter().enumerate() {
        let t = tok as usize;
        if t >= vocab {
            return Err(Error::TokenOutOfRange { id: t, vocab });
        }
        data[r * vocab + t] = k;
    }
    Ok(LogitBlock {
        logits: Tensor::from_parts(vec![tokens.len(), vocab], data),
        k,
    })
}

/// `sqrt(ᾱ_t)·clean + sqrt(1 − ᾱ_t)·ε` with `ε ~ N(0, K²I)`; `t` indexes
/// the schedule grid.
pub fn forward_diffuse<R: Rng + ?Sized>(
    clean: &LogitBlock,
    schedule: &NoiseSchedule,
    t: usize,
    rng: &mut R,
) -> Result<LogitBlock> {
    forward_diffuse_with_std(clean, schedule, t, clean.k, rng)
}

/// [`forward_diffuse`] with an explicit noise standard deviation.
pub fn forward_diffuse_with_std<R: Rng + ?Sized>(
    clean: &LogitBlock,
    schedule: &NoiseSchedule,
    t: usize,
    noise_std: f64,
    rng: &mut R,
) -> Result<LogitBlock> {
    if t > schedule.len() {
        return Err(Error::TimestepOutOfRange {
            t,
            min: 0,
            max: schedule.len(),
        });
    }
    let ab = schedule.alpha_bar(t);
    Ok(renoise(&clean.logits, ab, clean.k, noise_std, rng))
}

/// `sqrt(ab)·x + sqrt(1 − ab)·z` with `z ~ N(0, std²)`. When `ab == 1`
/// the input is returned unchanged and no noise is drawn.
pub(crate) fn renoise<R: Rng + ?Sized>(x: &Tensor, ab: f64, k: f64, std: f64, rng: &mut R) -> LogitBlock {
    if ab == 1.0 {
        return LogitBlock { logits: x.clone(), k };
    }
    let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = x.data().iter().map(|&v| sa * v + sn * gaussian(rng, std)).collect();
    LogitBlock {
        logits: Tensor::from_parts(x.shape().to_vec(), data),
        k,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ProjectionStrategy {
    Greedy,
    Sampling { top_p: f64 },
    MultiHot { top_p: f64 },
}

impl ProjectionStrategy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ProjectionStrategy::Greedy => Ok(()),
            ProjectionStrategy::Sampling { top_p } | ProjectionStrategy::MultiHot { top_p } => {
                if (0.0..=1.0).contains(&top_p) {
                    Ok(())
                } else {
                    Err(Error::invalid(format!("top-p {top_p} not in [0, 1]")))
                }
            }
        }
    }
}

impl fmt::Display for ProjectionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProjectionStrategy::Greedy => write!(f, "greedy"),
            ProjectionStrategy::Sampling { top_p } => write!(f, "sampling:{top_p}"),
            ProjectionStrategy::MultiHot { top_p } => write!(f, "multi-hot:{top_p}"),
        }
    }
}

impl FromStr for ProjectionStrategy {
    type Err = Error;

    /// `greedy`, `sampling:<p>` or `multi-hot:<p>`.
    fn from_str(s: &str) -> Result<Self> {
        let (kind, p) = match s.split_once(':') {
            Some((k, p)) => (k, Some(p)),
            None => (s, None),
        };
        let top_p = || -> Result<f64> {
            p.ok_or_else(|| Error::invalid(format!("{kind} needs a top-p, e.g. {kind}:0.9")))?
                .parse::<f64>()
                .map_err(|e| Error::invalid(format!("bad top-p: {e}")))
        };
        let strategy = match kind {
            "greedy" if p.is_none() => ProjectionStrategy::Greedy,
            "sampling" => ProjectionStrategy::Sampling { top_p: top_p()? },
            "multi-hot" | "multihot" => ProjectionStrategy::MultiHot { top_p: top_p()? },
            _ => return Err(Error::invalid(format!("unknown projection {s:?}"))),
        };
        strategy.validate()?;
        Ok(strategy)
    }
}

/// Smallest set of highest-probability ids whose mass reaches `top_p`.
///
/// Ordering is by descending logit with lower ids first on ties, and the
/// nucleus always holds at least one id. `top_p >= 1` selects the whole
/// vocabulary.
pub fn nucleus(row: &[f64], top_p: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    if top_p >= 1.0 {
        return order;
    }
    let mut probs = vec![0.0; row.len()];
    softmax_into(row, &mut probs);
    let mut mass = 0.0;
    let mut keep = 0;
    for &i in &order {
        mass += probs[i];
        keep += 1;
        if mass >= top_p {
            break;
        }
    }
    order.truncate(keep);
    order
}

/// Draws one id from the renormalised nucleus. A single-element nucleus
/// consumes no randomness.
fn sample_nucleus<R: Rng + ?Sized>(row: &[f64], top_p: f64, rng: &mut R) -> usize {
    let members = nucleus(row, top_p);
    if members.len() == 1 {
        return members[0];
    }
    let mut probs = vec![0.0; row.len()];
    softmax_into(row, &mut probs);
    let mass: f64 = members.iter().map(|&i| probs[i]).sum();
    let u = rng.random::<f64>() * mass;
    let mut acc = 0.0;
    for &i in &members {
        acc += probs[i];
        if u < acc {
            return i;
        }
    }
    *members.last().expect("nucleus is never empty")
}

/// Maps raw logits back to `{−K, +K}` rows.
pub fn logits_projection<R: Rng + ?Sized>(raw: &LogitBlock, strategy: ProjectionStrategy, rng: &mut R) -> LogitBlock {
    let (rows, vocab, k) = (raw.rows(), raw.vocab(), raw.k);
    let mut data = vec![-k; rows * vocab];
    for r in 0..rows {
        let row = raw.logits.row(r);
        let out = &mut data[r * vocab..(r + 1) * vocab];
        match strategy {
            ProjectionStrategy::Greedy => out[argmax(row)] = k,
            ProjectionStrategy::Sampling { top_p } => out[sample_nucleus(row, top_p, rng)] = k,
            ProjectionStrategy::MultiHot { top_p } => {
                for i in nucleus(row, top_p) {
                    out[i] = k;
                }
            }
        }
    }
    LogitBlock {
        logits: Tensor::from_parts(vec![rows, vocab], data),
        k,
    }
}
