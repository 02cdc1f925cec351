//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Nodes are appended in forward execution order, so the tape index is a
//! topological order and the backward sweep is a single reverse scan.
//! Leaves can borrow parameter tensors for the tape's lifetime, which keeps
//! per-sequence forward passes from copying the whole model.

use std::borrow::Cow;

use super::kernels::gemm;
use super::{softmax_into, Tensor};
use crate::error::{Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize, trans_b: bool },
    Add { a: usize, b: usize },
    AddRow { a: usize, row: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, factor: f64 },
    Gelu { a: usize },
    Softmax { a: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    CrossEntropy { logits: usize, targets: Vec<usize>, probs: Vec<f64> },
    Gather { table: usize, ids: Vec<usize> },
    ConcatRows { parts: Vec<usize> },
    SliceRows { a: usize, start: usize },
    ConcatCols { parts: Vec<usize> },
    SliceCols { a: usize, start: usize },
    Sum { a: usize },
    MeanRows { a: usize },
}

struct Node<'a> {
    value: Cow<'a, [f64]>,
    shape: Vec<usize>,
    op: Op,
    needs_grad: bool,
}

impl Node<'_> {
    fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    fn rows(&self) -> usize {
        let c = self.cols();
        if c == 0 {
            0
        } else {
            self.value.len() / c
        }
    }
}

/// Recorded forward computation.
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    check_finite: bool,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::with_capacity(256),
            check_finite: false,
        }
    }

    /// Every recorded op checks its output for NaN/Inf and fails with
    /// [`Error::NonFinite`] instead of propagating it.
    pub fn with_finite_checks(mut self) -> Self {
        self.check_finite = true;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Borrowed leaf that receives a gradient.
    pub fn param(&mut self, t: &'a Tensor) -> Var {
        self.leaf(Cow::Borrowed(t.data()), t.shape().to_vec(), true)
    }

    /// Borrowed leaf without a gradient.
    pub fn frozen(&mut self, t: &'a Tensor) -> Var {
        self.leaf(Cow::Borrowed(t.data()), t.shape().to_vec(), false)
    }

    /// Owned leaf that receives a gradient.
    pub fn variable(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.leaf(Cow::Owned(t.into_data()), shape, true)
    }

    /// Owned leaf without a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.leaf(Cow::Owned(t.into_data()), shape, false)
    }

    fn leaf(&mut self, value: Cow<'a, [f64]>, shape: Vec<usize>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            shape,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Vec<f64>, shape: Vec<usize>, op: Op, inputs: &[usize]) -> Result<Var> {
        if self.check_finite && value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(name));
        }
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            shape,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::from_parts(n.shape.clone(), n.value.to_vec())
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.nodes[v.0].shape.as_slice() {
            &[r, c] => Ok((r, c)),
            s => Err(Error::shape(op, format!("expected a matrix, got shape {s:?}"))),
        }
    }

    /// `a · b` for `[m,k] × [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` for `[m,k] × [n,k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (br, bc) = self.matrix_dims(b, "matmul")?;
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(Error::shape(
                "matmul",
                format!("inner dimensions {k} and {kb} differ"),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), trans_b, &mut out, false);
        self.push("matmul", out, vec![m, n], Op::MatMul { a: a.0, b: b.0, trans_b }, &[a.0, b.0])
    }

    /// Multiplies a row-distribution matrix `[n,V]` into an embedding table
    /// `[V,d]`, giving the expected embedding of each row.
    pub fn weighted_embedding(&mut self, simplex: Var, table: Var) -> Result<Var> {
        self.matmul(simplex, table)
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push("add", out, shape, Op::Add { a: a.0, b: b.0 }, &[a.0, b.0])
    }

    /// Adds a vector of length `cols(a)` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let cols = self.nodes[a.0].cols();
        if self.nodes[row.0].value.len() != cols {
            return Err(Error::shape(
                "add_row",
                format!("row of length {} for {cols} columns", self.nodes[row.0].value.len()),
            ));
        }
        let r = self.value(row);
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, x)| x + r[i % cols])
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push("add_row", out, shape, Op::AddRow { a: a.0, row: row.0 }, &[a.0, row.0])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push("mul", out, shape, Op::Mul { a: a.0, b: b.0 }, &[a.0, b.0])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let out: Vec<f64> = self.value(a).iter().map(|x| x * factor).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push("scale", out, shape, Op::Scale { a: a.0, factor }, &[a.0])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push("gelu", out, shape, Op::Gelu { a: a.0 }, &[a.0])
    }

    /// Softmax over the last dimension, stabilised by the row maximum.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.softmax_impl(a, false)
    }

    /// Softmax of a square score matrix where row `i` only sees columns `<= i`.
    pub fn softmax_rows_causal(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims(a, "softmax_causal")?;
        if r != c {
            return Err(Error::shape("softmax_causal", format!("{r}x{c} is not square")));
        }
        self.softmax_impl(a, true)
    }

    fn softmax_impl(&mut self, a: Var, causal: bool) -> Result<Var> {
        let node = &self.nodes[a.0];
        let (rows, cols) = (node.rows(), node.cols());
        let mut out = vec![0.0; node.value.len()];
        for r in 0..rows {
            let width = if causal { r + 1 } else { cols };
            let src = &node.value[r * cols..r * cols + width];
            softmax_into(src, &mut out[r * cols..r * cols + width]);
        }
        let shape = node.shape.clone();
        self.push("softmax", out, shape, Op::Softmax { a: a.0 }, &[a.0])
    }

    /// Normalises each row to zero mean and unit variance (with `1e-5`
    /// added to the variance), then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let node = &self.nodes[x.0];
        let (rows, cols) = (node.rows(), node.cols());
        if self.nodes[gain.0].value.len() != cols || self.nodes[bias.0].value.len() != cols {
            return Err(Error::shape(
                "layer_norm",
                format!("gain/bias must have {cols} entries"),
            ));
        }
        let g = &self.nodes[gain.0].value;
        let b = &self.nodes[bias.0].value;
        let mut xhat = vec![0.0; node.value.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; node.value.len()];
        for r in 0..rows {
            let row = &node.value[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        let shape = node.shape.clone();
        let op = Op::LayerNorm {
            x: x.0,
            gain: gain.0,
            bias: bias.0,
            xhat,
            rstd,
        };
        self.push("layer_norm", out, shape, op, &[x.0, gain.0, bias.0])
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let node = &self.nodes[logits.0];
        let (rows, cols) = (node.rows(), node.cols());
        if targets.len() != rows {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} targets for {rows} rows", targets.len()),
            ));
        }
        if rows == 0 {
            return Err(Error::shape("cross_entropy", "no rows"));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= cols) {
            return Err(Error::TokenOutOfRange { id: bad, vocab: cols });
        }
        let mut probs = vec![0.0; node.value.len()];
        let mut loss = 0.0;
        for (r, &target) in targets.iter().enumerate() {
            let row = &node.value[r * cols..(r + 1) * cols];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[target];
            for c in 0..cols {
                probs[r * cols + c] = (row[c] - lse).exp();
            }
        }
        let op = Op::CrossEntropy {
            logits: logits.0,
            targets: targets.to_vec(),
            probs,
        };
        self.push("cross_entropy", vec![loss / rows as f64], vec![1], op, &[logits.0])
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, dim) = self.matrix_dims(table, "gather")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::TokenOutOfRange { id: bad, vocab });
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &i in ids {
            out.extend_from_slice(&t[i * dim..(i + 1) * dim]);
        }
        let op = Op::Gather {
            table: table.0,
            ids: ids.to_vec(),
        };
        self.push("gather", out, vec![ids.len(), dim], op, &[table.0])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("concat_rows", "no inputs"))?;
        let cols = self.matrix_dims(*first, "concat_rows")?.1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.matrix_dims(p, "concat_rows")?;
            if c != cols {
                return Err(Error::shape("concat_rows", format!("{c} vs {cols} columns")));
            }
            rows += r;
            out.extend_from_slice(self.value(p));
        }
        let idx: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push("concat_rows", out, vec![rows, cols], Op::ConcatRows { parts: idx.clone() }, &idx)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.matrix_dims(a, "slice_rows")?;
        if start + len > r {
            return Err(Error::shape("slice_rows", format!("{start}+{len} > {r} rows")));
        }
        let out = self.value(a)[start * c..(start + len) * c].to_vec();
        self.push("slice_rows", out, vec![len, c], Op::SliceRows { a: a.0, start }, &[a.0])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("concat_cols", "no inputs"))?;
        let rows = self.matrix_dims(*first, "concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.matrix_dims(p, "concat_cols")?;
            if r != rows {
                return Err(Error::shape("concat_cols", format!("{r} vs {rows} rows")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let v = self.value(p);
            for r in 0..rows {
                out[r * total + offset..r * total + offset + w].copy_from_slice(&v[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let idx: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push("concat_cols", out, vec![rows, total], Op::ConcatCols { parts: idx.clone() }, &idx)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.matrix_dims(a, "slice_cols")?;
        if start + len > c {
            return Err(Error::shape("slice_cols", format!("{start}+{len} > {c} columns")));
        }
        let v = self.value(a);
        let mut out = Vec::with_capacity(r * len);
        for row in 0..r {
            out.extend_from_slice(&v[row * c + start..row * c + start + len]);
        }
        self.push("slice_cols", out, vec![r, len], Op::SliceCols { a: a.0, start }, &[a.0])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().sum();
        self.push("sum", vec![s], vec![1], Op::Sum { a: a.0 }, &[a.0])
    }

    /// Column means, shape `[1, cols]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims(a, "mean_rows")?;
        if r == 0 {
            return Err(Error::shape("mean_rows", "no rows"));
        }
        let v = self.value(a);
        let mut out = vec![0.0; c];
        for row in 0..r {
            for (o, x) in out.iter_mut().zip(&v[row * c..(row + 1) * c]) {
                *o += x;
            }
        }
        for o in &mut out {
            *o /= r as f64;
        }
        self.push("mean_rows", out, vec![1, c], Op::MeanRows { a: a.0 }, &[a.0])
    }

    /// Gradients of the scalar `root` with respect to every leaf created
    /// with [`Tape::param`] or [`Tape::variable`].
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_node = &self.nodes[root.0];
        if root_node.value.len() != 1 {
            return Err(Error::NonScalarRoot(root_node.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                &Op::MatMul { a, b, trans_b } => {
                    let (m, k) = (self.nodes[a].rows(), self.nodes[a].cols());
                    let n = node.cols();
                    if self.nodes[a].needs_grad {
                        // dA = dC·Bᵀ  (B stored [k,n]) or dC·B (B stored [n,k])
                        let da = slot(&mut grads, a, m * k);
                        gemm(m, n, k, &g, false, &self.nodes[b].value, !trans_b, da, true);
                    }
                    if self.nodes[b].needs_grad {
                        let db = slot(&mut grads, b, k * n);
                        if trans_b {
                            // dB[n,k] = dCᵀ·A
                            gemm(n, m, k, &g, true, &self.nodes[a].value, false, db, true);
                        } else {
                            // dB[k,n] = Aᵀ·dC
                            gemm(k, m, n, &self.nodes[a].value, true, &g, false, db, true);
                        }
                    }
                }
                &Op::Add { a, b } => {
                    accumulate(&mut grads, &self.nodes, a, &g);
                    accumulate(&mut grads, &self.nodes, b, &g);
                }
                &Op::AddRow { a, row } => {
                    accumulate(&mut grads, &self.nodes, a, &g);
                    if self.nodes[row].needs_grad {
                        let cols = node.cols();
                        let dr = slot(&mut grads, row, cols);
                        for (i, gv) in g.iter().enumerate() {
                            dr[i % cols] += gv;
                        }
                    }
                }
                &Op::Mul { a, b } => {
                    if self.nodes[a].needs_grad {
                        let bv = &self.nodes[b].value;
                        let da = slot(&mut grads, a, g.len());
                        for ((d, gv), y) in da.iter_mut().zip(&g).zip(bv.iter()) {
                            *d += gv * y;
                        }
                    }
                    if self.nodes[b].needs_grad {
                        let av = &self.nodes[a].value;
                        let db = slot(&mut grads, b, g.len());
                        for ((d, gv), x) in db.iter_mut().zip(&g).zip(av.iter()) {
                            *d += gv * x;
                        }
                    }
                }
                &Op::Scale { a, factor } => {
                    if self.nodes[a].needs_grad {
                        let da = slot(&mut grads, a, g.len());
                        for (d, gv) in da.iter_mut().zip(&g) {
                            *d += gv * factor;
                        }
                    }
                }
                &Op::Gelu { a } => {
                    if self.nodes[a].needs_grad {
                        let xv = &self.nodes[a].value;
                        let da = slot(&mut grads, a, g.len());
                        for ((d, gv), &x) in da.iter_mut().zip(&g).zip(xv.iter()) {
                            let u = GELU_C * (x + 0.044715 * x * x * x);
                            let th = u.tanh();
                            let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                            *d += gv * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du);
                        }
                    }
                }
                &Op::Softmax { a } => {
                    if self.nodes[a].needs_grad {
                        let cols = node.cols();
                        let y = &node.value;
                        let da = slot(&mut grads, a, g.len());
                        for r in 0..node.rows() {
                            let ys = &y[r * cols..(r + 1) * cols];
                            let gs = &g[r * cols..(r + 1) * cols];
                            let dot: f64 = ys.iter().zip(gs).map(|(p, q)| p * q).sum();
                            for c in 0..cols {
                                da[r * cols + c] += ys[c] * (gs[c] - dot);
                            }
                        }
                    }
                }
                Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                    let (x, gain, bias) = (*x, *gain, *bias);
                    let cols = node.cols();
                    let rows = node.rows();
                    if self.nodes[gain].needs_grad {
                        let dg = slot(&mut grads, gain, cols);
                        for (i, gv) in g.iter().enumerate() {
                            dg[i % cols] += gv * xhat[i];
                        }
                    }
                    if self.nodes[bias].needs_grad {
                        let db = slot(&mut grads, bias, cols);
                        for (i, gv) in g.iter().enumerate() {
                            db[i % cols] += gv;
                        }
                    }
                    if self.nodes[x].needs_grad {
                        let gain_v = &self.nodes[gain].value;
                        let dx = slot(&mut grads, x, g.len());
                        let mut dxhat = vec![0.0; cols];
                        for r in 0..rows {
                            let off = r * cols;
                            let mut mean_d = 0.0;
                            let mut mean_dx = 0.0;
                            for c in 0..cols {
                                dxhat[c] = g[off + c] * gain_v[c];
                                mean_d += dxhat[c];
                                mean_dx += dxhat[c] * xhat[off + c];
                            }
                            mean_d /= cols as f64;
                            mean_dx /= cols as f64;
                            for c in 0..cols {
                                dx[off + c] += rstd[r] * (dxhat[c] - mean_d - xhat[off + c] * mean_dx);
                            }
                        }
                    }
                }
                Op::CrossEntropy { logits, targets, probs } => {
                    let logits = *logits;
                    if self.nodes[logits].needs_grad {
                        let cols = self.nodes[logits].cols();
                        let scale = g[0] / targets.len() as f64;
                        let dl = slot(&mut grads, logits, probs.len());
                        for (i, (d, p)) in dl.iter_mut().zip(probs).enumerate() {
                            *d += scale * p;
                            if targets[i / cols] == i % cols {
                                *d -= scale;
                            }
                        }
                    }
                }
                Op::Gather { table, ids } => {
                    let table = *table;
                    if self.nodes[table].needs_grad {
                        let dim = self.nodes[table].cols();
                        let n = self.nodes[table].value.len();
                        let dt = slot(&mut grads, table, n);
                        for (r, &id) in ids.iter().enumerate() {
                            for c in 0..dim {
                                dt[id * dim + c] += g[r * dim + c];
                            }
                        }
                    }
                }
                Op::ConcatRows { parts } => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.nodes[p].value.len();
                        accumulate(&mut grads, &self.nodes, p, &g[offset..offset + len]);
                        offset += len;
                    }
                }
                &Op::SliceRows { a, start } => {
                    if self.nodes[a].needs_grad {
                        let cols = node.cols();
                        let n = self.nodes[a].value.len();
                        let da = slot(&mut grads, a, n);
                        for (d, gv) in da[start * cols..start * cols + g.len()].iter_mut().zip(&g) {
                            *d += gv;
                        }
                    }
                }
                Op::ConcatCols { parts } => {
                    let total = node.cols();
                    let rows = node.rows();
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.nodes[p].cols();
                        if self.nodes[p].needs_grad {
                            let dp = slot(&mut grads, p, rows * w);
                            for r in 0..rows {
                                for c in 0..w {
                                    dp[r * w + c] += g[r * total + offset + c];
                                }
                            }
                        }
                        offset += w;
                    }
                }
                &Op::SliceCols { a, start } => {
                    if self.nodes[a].needs_grad {
                        let w = node.cols();
                        let cols = self.nodes[a].cols();
                        let n = self.nodes[a].value.len();
                        let da = slot(&mut grads, a, n);
                        for r in 0..node.rows() {
                            for c in 0..w {
                                da[r * cols + start + c] += g[r * w + c];
                            }
                        }
                    }
                }
                &Op::Sum { a } => {
                    if self.nodes[a].needs_grad {
                        let n = self.nodes[a].value.len();
                        let da = slot(&mut grads, a, n);
                        for d in da.iter_mut() {
                            *d += g[0];
                        }
                    }
                }
                &Op::MeanRows { a } => {
                    if self.nodes[a].needs_grad {
                        let cols = node.cols();
                        let rows = self.nodes[a].rows();
                        let inv = 1.0 / rows as f64;
                        let da = slot(&mut grads, a, rows * cols);
                        for (i, d) in da.iter_mut().enumerate() {
                            *d += g[i % cols] * inv;
                        }
                    }
                }
            }
        }

        let shapes = self.nodes.iter().map(|n| n.shape.clone()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn slot<'g>(grads: &'g mut [Option<Vec<f64>>], idx: usize, len: usize) -> &'g mut [f64] {
    grads[idx].get_or_insert_with(|| vec![0.0; len])
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node<'_>], idx: usize, g: &[f64]) {
    if !nodes[idx].needs_grad {
        return;
    }
    match &mut grads[idx] {
        Some(existing) => {
            for (e, v) in existing.iter_mut().zip(g) {
                *e += v;
            }
        }
        empty => *empty = Some(g.to_vec()),
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of a leaf; leaves that did not influence the root get zeros.
    pub fn get(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => Tensor::zeros(&shape),
        }
    }

    /// Moves a leaf gradient out, avoiding a copy.
    pub fn take(&mut self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match self.grads[v.0].take() {
            Some(g) => Tensor::from_parts(shape, g),
            None => Tensor::zeros(&shape),
        }
    }
}
