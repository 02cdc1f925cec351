//! Independent reference implementations used by the integration and
//! acceptance tests: central finite differences and brute-force metrics.
#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::Rng;
use sdlm_core::corpus::TokenId;
use sdlm_core::model::ModelParameters;
use sdlm_core::rng::gaussian;
use sdlm_core::schedule::NoiseSchedule;
use sdlm_core::simplex::LogitBlock;
use sdlm_core::{Result, Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-3;

/// Relative disagreement between an analytic and a numeric directional
/// derivative; differences below `1e-9` count as agreement.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff < 1e-9 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs())
}

/// A random unit direction shaped like `t`.
pub fn direction<R: Rng>(t: &Tensor, rng: &mut R) -> Tensor {
    let data: Vec<f64> = (0..t.len()).map(|_| gaussian(rng, 1.0)).collect();
    let norm = data.iter().map(|x| x * x).sum::<f64>().sqrt();
    Tensor::new(t.shape().to_vec(), data.into_iter().map(|x| x / norm).collect()).unwrap()
}

pub fn axpy(t: &Tensor, alpha: f64, d: &Tensor) -> Tensor {
    let data = t.data().iter().zip(d.data()).map(|(a, b)| a + alpha * b).collect();
    Tensor::new(t.shape().to_vec(), data).unwrap()
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Worst relative error over `directions` random directions per input of
/// the scalar function `f`, comparing tape gradients with central
/// differences.
pub fn check_tape_fn<F, R>(inputs: &[Tensor], f: F, directions: usize, rng: &mut R) -> f64
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Result<Var>,
    R: Rng,
{
    let eval = |xs: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.param(x)).collect();
        let out = f(&mut tape, &vars).unwrap();
        tape.value(out)[0]
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x)).collect();
    let out = f(&mut tape, &vars).unwrap();
    let grads = tape.backward(out).unwrap();
    let mut worst: f64 = 0.0;
    for (i, x) in inputs.iter().enumerate() {
        let g = grads.get(vars[i]);
        for _ in 0..directions {
            let d = direction(x, rng);
            let mut plus = inputs.to_vec();
            plus[i] = axpy(x, FD_STEP, &d);
            let mut minus = inputs.to_vec();
            minus[i] = axpy(x, -FD_STEP, &d);
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(dot(&g, &d), numeric));
        }
    }
    worst
}

/// Worst relative error of `block_nll_grad` against central differences of
/// `block_nll`, over `directions` directions for every parameter tensor.
pub fn check_block_nll<R: Rng>(
    params: &ModelParameters,
    context: &[TokenId],
    noisy: &LogitBlock,
    t: usize,
    schedule: &NoiseSchedule,
    targets: &[TokenId],
    directions: usize,
    rng: &mut R,
) -> f64 {
    let (_, grads) = params.block_nll_grad(context, noisy, t, schedule, targets).unwrap();
    let mut worst: f64 = 0.0;
    for (i, g) in grads.iter().enumerate() {
        for _ in 0..directions {
            let base = params.store().get(i);
            let d = direction(base, rng);
            let mut p = params.clone();
            *p.store_mut().get_mut(i) = axpy(base, FD_STEP, &d);
            let up = p.block_nll(context, noisy, t, schedule, targets).unwrap();
            *p.store_mut().get_mut(i) = axpy(base, -FD_STEP, &d);
            let down = p.block_nll(context, noisy, t, schedule, targets).unwrap();
            worst = worst.max(rel_err(dot(g, &d), (up - down) / (2.0 * FD_STEP)));
        }
    }
    worst
}

/// Distinct n-gram ratio by pairwise comparison, in percent, averaged over
/// samples with at least `n` tokens.
pub fn dist_n_oracle(samples: &[Vec<TokenId>], n: usize) -> Option<f64> {
    let mut total = 0.0;
    let mut count = 0;
    for s in samples {
        if s.len() < n {
            continue;
        }
        let grams = s.len() - n + 1;
        let mut unique = 0;
        for i in 0..grams {
            if (0..i).all(|j| s[j..j + n] != s[i..i + n]) {
                unique += 1;
            }
        }
        total += unique as f64 / grams as f64;
        count += 1;
    }
    (count > 0).then(|| 100.0 * total / count as f64)
}

/// Does `s` end with `repeats` back-to-back copies of some phrase of at
/// most `window` tokens? Checked position by position.
pub fn ends_in_repetition_oracle(s: &[TokenId], window: usize, repeats: usize) -> bool {
    for k in 1..=window {
        if k * repeats > s.len() {
            break;
        }
        let start = s.len() - k * repeats;
        let mut ok = true;
        for r in 1..repeats {
            for j in 0..k {
                if s[start + j] != s[start + r * k + j] {
                    ok = false;
                }
            }
        }
        if ok {
            return true;
        }
    }
    false
}

pub fn repetition_rate_oracle(samples: &[Vec<TokenId>], window: usize, repeats: usize) -> f64 {
    let hits = samples.iter().filter(|s| ends_in_repetition_oracle(s, window, repeats)).count();
    100.0 * hits as f64 / samples.len() as f64
}

/// Zipf slope through the closed-form simple regression on
/// `(ln rank, ln count)` using raw sums.
pub fn zipf_oracle(samples: &[Vec<TokenId>]) -> Option<f64> {
    let mut counts: BTreeMap<TokenId, usize> = BTreeMap::new();
    for &t in samples.iter().flatten() {
        *counts.entry(t).or_default() += 1;
    }
    if counts.len() < 2 {
        return None;
    }
    let mut c: Vec<(usize, TokenId)> = counts.into_iter().map(|(t, n)| (n, t)).collect();
    c.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let n = c.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for (i, (cnt, _)) in c.iter().enumerate() {
        let x = ((i + 1) as f64).ln();
        let y = (*cnt as f64).ln();
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
    }
    Some(-(n * sxy - sx * sy) / (n * sxx - sx * sx))
}

/// Smallest number of entries whose softmax mass reaches `p`, found by
/// trying every subset. Only for short rows.
pub fn min_nucleus_size(row: &[f64], p: f64) -> usize {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    let probs: Vec<f64> = e.iter().map(|x| x / z).collect();
    let mut best = row.len();
    for mask in 1u32..(1 << row.len()) {
        let size = mask.count_ones() as usize;
        let mass: f64 = (0..row.len()).filter(|i| mask >> i & 1 == 1).map(|i| probs[i]).sum();
        if mass >= p && size < best {
            best = size;
        }
    }
    best
}

fn weighted_sum(tape: &mut Tape<'_>, y: Var, w: &Tensor) -> Result<Var> {
    let w = tape.constant(w.clone());
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

/// Worst finite-difference error of every tape primitive, each reduced to a
/// scalar through a fixed random weighting.
pub fn primitive_checks<R: Rng>(directions: usize, rng: &mut R) -> Vec<(&'static str, f64)> {
    let m = |r: usize, c: usize, rng: &mut R| Tensor::randn(&[r, c], 1.0, rng);
    let a = m(3, 4, rng);
    let b = m(4, 5, rng);
    let bt = m(5, 4, rng);
    let same = m(3, 4, rng);
    let row = Tensor::randn(&[4], 1.0, rng);
    let w34 = m(3, 4, rng);
    let w35 = m(3, 5, rng);
    let w44 = m(4, 4, rng);
    let w64 = m(6, 4, rng);
    let w38 = m(3, 8, rng);
    let w32 = m(3, 2, rng);
    let sq = m(4, 4, rng);
    let simplex = {
        let raw = m(3, 4, rng);
        sdlm_core::tensor::softmax_rows(&raw)
    };
    let w4 = m(1, 4, rng);
    let gain = Tensor::randn(&[4], 1.0, rng);
    let bias = Tensor::randn(&[4], 1.0, rng);

    let mut out = Vec::new();
    out.push(("matmul", check_tape_fn(&[a.clone(), b.clone()], |t, v| {
        let y = t.matmul(v[0], v[1])?;
        weighted_sum(t, y, &w35)
    }, directions, rng)));
    out.push(("matmul_t", check_tape_fn(&[a.clone(), bt.clone()], |t, v| {
        let y = t.matmul_t(v[0], v[1])?;
        weighted_sum(t, y, &w35)
    }, directions, rng)));
    out.push(("weighted_embedding", check_tape_fn(&[simplex.clone(), sq.clone()], |t, v| {
        let y = t.weighted_embedding(v[0], v[1])?;
        weighted_sum(t, y, &w34)
    }, directions, rng)));
    out.push(("add", check_tape_fn(&[a.clone(), same.clone()], |t, v| {
        let y = t.add(v[0], v[1])?;
        weighted_sum(t, y, &w34)
    }, directions, rng)));
    out.push(("add_row", check_tape_fn(&[a.clone(), row.clone()], |t, v| {
        let y = t.add_row(v[0], v[1])?;
        weighted_sum(t, y, &w34)
    }, directions, rng)));
    out.push(("mul", check_tape_fn(&[a.clone(), same.clone()], |t, v| {
        let y = t.mul(v[0], v[1])?;
        weighted_sum(t, y, &w34)
    }, directions, rng)));
    out.push(("scale", check_tape_fn(&[a.clone()], |t, v| {
        let y = t.scale(v[0], -1.7)?;
        weighted_sum(t, y, &w34)
    }, directions, rng)));
    out.push(("gelu", check_tape_fn(&[a.clone()], |t, v| {
        let y = t.gelu(v[0])?;
        weighted_sum(t, y, &w34)
    }, directions, rng)));
    out.push(("softmax_rows", check_tape_fn(&[a.clone()], |t, v| {
        let y = t.softmax_rows(v[0])?;
        weighted_sum(t, y, &w34)
    }, directions, rng)));
    out.push(("softmax_rows_causal", check_tape_fn(&[sq.clone()], |t, v| {
        let y = t.softmax_rows_causal(v[0])?;
        weighted_sum(t, y, &w44)
    }, directions, rng)));
    out.push(("layer_norm", check_tape_fn(&[a.clone(), gain, bias], |t, v| {
        let y = t.layer_norm(v[0], v[1], v[2])?;
        weighted_sum(t, y, &w34)
    }, directions, rng)));
    out.push(("cross_entropy_rows", check_tape_fn(&[a.clone()], |t, v| {
        t.cross_entropy_rows(v[0], &[2, 0, 3])
    }, directions, rng)));
    out.push(("gather_rows", check_tape_fn(&[sq.clone()], |t, v| {
        let y = t.gather_rows(v[0], &[1, 3, 1])?;
        weighted_sum(t, y, &w34)
    }, directions, rng)));
    out.push(("concat_rows", check_tape_fn(&[a.clone(), same.clone()], |t, v| {
        let y = t.concat_rows(&[v[0], v[1]])?;
        weighted_sum(t, y, &w64)
    }, directions, rng)));
    out.push(("slice_rows", check_tape_fn(&[sq.clone()], |t, v| {
        let y = t.slice_rows(v[0], 1, 3)?;
        weighted_sum(t, y, &w34)
    }, directions, rng)));
    out.push(("concat_cols", check_tape_fn(&[a.clone(), same.clone()], |t, v| {
        let y = t.concat_cols(&[v[0], v[1]])?;
        weighted_sum(t, y, &w38)
    }, directions, rng)));
    out.push(("slice_cols", check_tape_fn(&[a.clone()], |t, v| {
        let y = t.slice_cols(v[0], 1, 2)?;
        weighted_sum(t, y, &w32)
    }, directions, rng)));
    out.push(("sum", check_tape_fn(&[a.clone()], |t, v| {
        let y = t.mul(v[0], v[0])?;
        t.sum(y)
    }, directions, rng)));
    out.push(("mean_rows", check_tape_fn(&[a], |t, v| {
        let y = t.mean_rows(v[0])?;
        weighted_sum(t, y, &w4)
    }, directions, rng)));
    out
}
