//! Named parameter storage and the pre-LN transformer layer shared by the
//! denoiser, the attribute classifier and the autoregressive reference.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Parameters in a fixed, named order. Optimizer moments and checkpoints
/// follow the same order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalar parameters.
    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Puts every parameter on the tape as a borrowed gradient leaf.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.param(t)).collect()
    }

    /// Like [`Self::bind`] but without gradients.
    pub fn bind_frozen<'a>(&'a self, tape: &mut Tape<'a>) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.frozen(t)).collect()
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

/// Parameter names, shapes and initializers, in store order.
#[derive(Default)]
pub(crate) struct Layout {
    entries: Vec<(String, Vec<usize>, Init)>,
}

impl Layout {
    pub(crate) fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> usize {
        self.entries.push((name.into(), shape.to_vec(), init));
        self.entries.len() - 1
    }

    pub(crate) fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamStore {
        let mut store = ParamStore::new();
        for (name, shape, init) in &self.entries {
            let t = match *init {
                Init::Zeros => Tensor::zeros(shape),
                Init::Ones => Tensor::full(shape, 1.0),
                Init::Normal(std) => Tensor::randn(shape, std, rng),
            };
            store.push(name.clone(), t);
        }
        store
    }

    /// Confirms a loaded store has exactly this layout.
    pub(crate) fn check(&self, store: &ParamStore) -> Result<()> {
        if store.len() != self.entries.len() {
            return Err(Error::invalid(format!(
                "expected {} parameter tensors, found {}",
                self.entries.len(),
                store.len()
            )));
        }
        for ((name, shape, _), (sname, t)) in self.entries.iter().zip(store.iter()) {
            if name != sname || shape.as_slice() != t.shape() {
                return Err(Error::invalid(format!(
                    "parameter {sname} {:?} does not match expected {name} {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Store indices of one encoder layer.
#[derive(Clone, Debug)]
pub(crate) struct LayerIds {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

pub(crate) fn layer_layout(layout: &mut Layout, prefix: &str, d: usize, d_ff: usize, n_layers: usize) -> LayerIds {
    let w = Init::Normal(1.0 / (d as f64).sqrt());
    let resid = Init::Normal(1.0 / (d as f64).sqrt() / (2.0 * n_layers as f64).sqrt());
    let resid_ff = Init::Normal(1.0 / (d_ff as f64).sqrt() / (2.0 * n_layers as f64).sqrt());
    let mut add = |name: &str, shape: &[usize], init| layout.add(format!("{prefix}.{name}"), shape, init);
    LayerIds {
        ln1_g: add("ln1.gain", &[d], Init::Ones),
        ln1_b: add("ln1.bias", &[d], Init::Zeros),
        wq: add("attn.wq", &[d, d], w),
        bq: add("attn.bq", &[d], Init::Zeros),
        wk: add("attn.wk", &[d, d], w),
        bk: add("attn.bk", &[d], Init::Zeros),
        wv: add("attn.wv", &[d, d], w),
        bv: add("attn.bv", &[d], Init::Zeros),
        wo: add("attn.wo", &[d, d], resid),
        bo: add("attn.bo", &[d], Init::Zeros),
        ln2_g: add("ln2.gain", &[d], Init::Ones),
        ln2_b: add("ln2.bias", &[d], Init::Zeros),
        w1: add("ff.w1", &[d, d_ff], w),
        b1: add("ff.b1", &[d_ff], Init::Zeros),
        w2: add("ff.w2", &[d_ff, d], resid_ff),
        b2: add("ff.b2", &[d], Init::Zeros),
    }
}

/// `x·W + b` for `x: [n, in]`, `W: [in, out]`.
pub(crate) fn linear(tape: &mut Tape<'_>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

/// One pre-LN block: `x + Attn(LN(x))`, then `x + FF(LN(x))`.
///
/// When `attn_maps` is given, each head's attention matrix is appended to it.
pub(crate) fn encoder_layer(
    tape: &mut Tape<'_>,
    p: &[Var],
    ids: &LayerIds,
    x: Var,
    n_heads: usize,
    causal: bool,
    mut attn_maps: Option<&mut Vec<Tensor>>,
) -> Result<Var> {
    let d = tape.shape(x)[1];
    let head = d / n_heads;
    let scale = 1.0 / (head as f64).sqrt();

    let h = tape.layer_norm(x, p[ids.ln1_g], p[ids.ln1_b])?;
    let q = linear(tape, h, p[ids.wq], p[ids.bq])?;
    let k = linear(tape, h, p[ids.wk], p[ids.bk])?;
    let v = linear(tape, h, p[ids.wv], p[ids.bv])?;
    let mut heads = Vec::with_capacity(n_heads);
    for i in 0..n_heads {
        let qh = tape.slice_cols(q, i * head, head)?;
        let kh = tape.slice_cols(k, i * head, head)?;
        let vh = tape.slice_cols(v, i * head, head)?;
        let scores = tape.matmul_t(qh, kh)?;
        let scores = tape.scale(scores, scale)?;
        let probs = if causal {
            tape.softmax_rows_causal(scores)?
        } else {
            tape.softmax_rows(scores)?
        };
        if let Some(maps) = attn_maps.as_deref_mut() {
            maps.push(tape.tensor(probs));
        }
        heads.push(tape.matmul(probs, vh)?);
    }
    let merged = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
    let attn = linear(tape, merged, p[ids.wo], p[ids.bo])?;
    let x = tape.add(x, attn)?;

    let h = tape.layer_norm(x, p[ids.ln2_g], p[ids.ln2_b])?;
    let f = linear(tape, h, p[ids.w1], p[ids.b1])?;
    let f = tape.gelu(f)?;
    let f = linear(tape, f, p[ids.w2], p[ids.b2])?;
    tape.add(x, f)
}
