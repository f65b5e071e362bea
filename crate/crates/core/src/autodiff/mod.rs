//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every primitive in execution order, so node inputs
//! always precede the node and a single reverse sweep visits each node once.
//! Parameters are registered by name; registering the same name twice
//! returns the same [`Var`], which is how one weight can feed several paths
//! and still receive a single accumulated gradient.

mod gradcheck;

use std::collections::{BTreeMap, HashMap};

pub use gradcheck::{grad_check, relative_error, GradCheckReport, ParamCheck, REL_FLOOR};

use crate::error::{Error, Result};
use crate::tensor::kernels::{normalize_rows, sigmoid, softmax_rows};
use crate::tensor::{gemm, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Gradients keyed by parameter name. Every registered parameter is present;
/// parameters the loss does not depend on map to zeros.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientMap(BTreeMap<String, Tensor>);

impl GradientMap {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> BTreeMap<String, Tensor> {
        self.0
    }
}

impl From<BTreeMap<String, Tensor>> for GradientMap {
    fn from(m: BTreeMap<String, Tensor>) -> Self {
        GradientMap(m)
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Silu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Option<Var>,
        bias: Option<Var>,
        x_hat: Vec<f64>,
        rstd: Vec<f64>,
    },
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    Mse(Var, Tensor),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
    by_name: HashMap<String, Var>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn req(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Registers a trainable leaf. A name already on the tape returns the
    /// existing node and ignores `value`.
    pub fn param(&mut self, name: &str, value: &Tensor) -> Var {
        if let Some(&v) = self.by_name.get(name) {
            return v;
        }
        let v = self.push(value.clone(), Op::Leaf, true);
        self.params.push((name.to_string(), v));
        self.by_name.insert(name.to_string(), v);
        v
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.by_name.get(name).copied()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = crate::tensor::matmul(self.value(a), self.value(b))?;
        let rg = self.req(a) || self.req(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `x * w + b` with `x: [N, I]`, `w: [I, O]`, `b: [O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let mut out = crate::tensor::matmul(self.value(x), self.value(w))?;
        if let Some(b) = b {
            out = add_row(&out, self.value(b), "linear")?;
        }
        let rg = self.req(x) || self.req(w) || b.is_some_and(|b| self.req(b));
        Ok(self.push(out, Op::Linear { x, w, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let rg = self.req(a) || self.req(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        let rg = self.req(a) || self.req(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).scale(s)?;
        let rg = self.req(a);
        Ok(self.push(out, Op::Scale(a, s), rg))
    }

    /// Adds a length-`C` row to every row of `a: [N, C]`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let out = add_row(self.value(a), self.value(row), "add_row")?;
        let rg = self.req(a) || self.req(row);
        Ok(self.push(out, Op::AddRow(a, row), rg))
    }

    /// Multiplies every row of `a: [N, C]` by a length-`C` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (n, c) = self.value(a).dims2("mul_row")?;
        let r = self.value(row);
        if r.numel() != c {
            return Err(Error::dim("mul_row", format!("row of {} vs width {c}", r.numel())));
        }
        let mut out = self.value(a).to_vec();
        for chunk in out.chunks_exact_mut(c) {
            for (v, s) in chunk.iter_mut().zip(r.data()) {
                *v *= s;
            }
        }
        let out = Tensor::checked("mul_row", vec![n, c], out)?;
        let rg = self.req(a) || self.req(row);
        Ok(self.push(out, Op::MulRow(a, row), rg))
    }

    /// Scales row `i` of `a: [N, C]` by `col[i]`, with `col: [N, 1]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (n, c) = self.value(a).dims2("mul_col")?;
        let w = self.value(col);
        if w.numel() != n {
            return Err(Error::dim("mul_col", format!("column of {} vs {n} rows", w.numel())));
        }
        let mut out = self.value(a).to_vec();
        for (chunk, s) in out.chunks_exact_mut(c).zip(w.data()) {
            for v in chunk.iter_mut() {
                *v *= s;
            }
        }
        let out = Tensor::checked("mul_col", vec![n, c], out)?;
        let rg = self.req(a) || self.req(col);
        Ok(self.push(out, Op::MulCol(a, col), rg))
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let out = crate::tensor::silu(self.value(a))?;
        let rg = self.req(a);
        Ok(self.push(out, Op::Silu(a), rg))
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let out = crate::tensor::softmax_lastdim(self.value(a))?;
        let rg = self.req(a);
        Ok(self.push(out, Op::Softmax(a), rg))
    }

    /// Row-wise layer norm over the last axis of `x: [N, C]`, with optional
    /// affine gain and bias (each of length `C`).
    pub fn layer_norm(
        &mut self,
        x: Var,
        gain: Option<Var>,
        bias: Option<Var>,
        eps: f64,
    ) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::Contract(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let (n, c) = self.value(x).dims2("layer_norm")?;
        for p in [gain, bias].into_iter().flatten() {
            if self.value(p).numel() != c {
                return Err(Error::dim("layer_norm", format!("affine of {:?} vs C = {c}", self.value(p).shape())));
            }
        }
        let (x_hat, stats) = normalize_rows(self.value(x).data(), c, eps);
        let mut out = x_hat.clone();
        if let Some(g) = gain {
            let g = self.value(g).data();
            for row in out.chunks_exact_mut(c) {
                for (v, s) in row.iter_mut().zip(g) {
                    *v *= s;
                }
            }
        }
        if let Some(b) = bias {
            let b = self.value(b).data();
            for row in out.chunks_exact_mut(c) {
                for (v, s) in row.iter_mut().zip(b) {
                    *v += s;
                }
            }
        }
        let out = Tensor::checked("layer_norm", vec![n, c], out)?;
        let rg = self.req(x)
            || gain.is_some_and(|g| self.req(g))
            || bias.is_some_and(|b| self.req(b));
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                x_hat,
                rstd: stats.rstd,
            },
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_rows(&values)?;
        let rg = parts.iter().any(|&p| self.req(p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(a).slice_rows(start, len)?;
        let rg = self.req(a);
        Ok(self.push(out, Op::SliceRows(a, start), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_cols(&values)?;
        let rg = parts.iter().any(|&p| self.req(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(a).slice_cols(start, len)?;
        let rg = self.req(a);
        Ok(self.push(out, Op::SliceCols(a, start), rg))
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q: [Sq, C]`, `k, v: [Sk, C]`; head `h` owns channels
    /// `h*d..(h+1)*d` with `d = C / heads`, scores are scaled by `1/sqrt(d)`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (out, probs) = attention_forward(self.value(q), self.value(k), self.value(v), heads)?;
        let rg = self.req(q) || self.req(k) || self.req(v);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            rg,
        ))
    }

    /// Attention probabilities saved by an [`Tape::attention`] node, as
    /// `[heads, Sq, Sk]`.
    pub fn attention_probs(&self, node: Var) -> Option<Tensor> {
        match &self.nodes[node.0].op {
            Op::Attention { q, k, heads, probs, .. } => {
                let sq = self.value(*q).shape()[0];
                let sk = self.value(*k).shape()[0];
                Some(Tensor::from_parts(vec![*heads, sq, sk], probs.clone()))
            }
            _ => None,
        }
    }

    /// Mean squared error between `a` and a constant target, as a scalar.
    pub fn mse(&mut self, a: Var, target: &Tensor) -> Result<Var> {
        let av = self.value(a);
        av.expect_same_shape(target, "mse")?;
        let n = av.numel() as f64;
        let total: f64 = av
            .data()
            .iter()
            .zip(target.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let out = Tensor::checked("mse", vec![1], vec![total / n])?;
        let rg = self.req(a);
        Ok(self.push(out, Op::Mse(a, target.clone()), rg))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::checked("sum", vec![1], vec![self.value(a).sum()])?;
        let rg = self.req(a);
        Ok(self.push(out, Op::Sum(a), rg))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::checked("mean", vec![1], vec![self.value(a).mean()])?;
        let rg = self.req(a);
        Ok(self.push(out, Op::Mean(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape.to_vec())?;
        let rg = self.req(a);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<GradientMap> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }
        let mut out = BTreeMap::new();
        for (name, v) in &self.params {
            let shape = self.value(*v).shape().to_vec();
            let t = match grads[v.0].take() {
                Some(g) => Tensor::checked("backward", shape, g)?,
                None => Tensor::zeros(shape),
            };
            out.insert(name.clone(), t);
        }
        Ok(GradientMap(out))
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims(self.value(*a));
                let n = node.value.shape()[1];
                if self.req(*a) {
                    // dA = dC * B^T
                    let ga = slot(grads, *a, m * k);
                    gemm(m, n, k, g, n as isize, 1, self.value(*b).data(), 1, n as isize, 1.0, ga, k as isize, 1);
                }
                if self.req(*b) {
                    // dB = A^T * dC
                    let gb = slot(grads, *b, k * n);
                    gemm(k, m, n, self.value(*a).data(), 1, k as isize, g, n as isize, 1, 1.0, gb, n as isize, 1);
                }
            }
            Op::Linear { x, w, b } => {
                let (m, k) = dims(self.value(*x));
                let n = node.value.shape()[1];
                if self.req(*x) {
                    let gx = slot(grads, *x, m * k);
                    gemm(m, n, k, g, n as isize, 1, self.value(*w).data(), 1, n as isize, 1.0, gx, k as isize, 1);
                }
                if self.req(*w) {
                    let gw = slot(grads, *w, k * n);
                    gemm(k, m, n, self.value(*x).data(), 1, k as isize, g, n as isize, 1, 1.0, gw, n as isize, 1);
                }
                if let Some(b) = b {
                    if self.req(*b) {
                        let gb = slot(grads, *b, n);
                        for row in g.chunks_exact(n) {
                            for (d, s) in gb.iter_mut().zip(row) {
                                *d += s;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for p in [a, b] {
                    if self.req(*p) {
                        add_into(slot(grads, *p, g.len()), g);
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.req(*a) {
                    let bv = self.value(*b).data();
                    let ga = slot(grads, *a, g.len());
                    for ((d, gi), bi) in ga.iter_mut().zip(g).zip(bv) {
                        *d += gi * bi;
                    }
                }
                if self.req(*b) {
                    let av = self.value(*a).data();
                    let gb = slot(grads, *b, g.len());
                    for ((d, gi), ai) in gb.iter_mut().zip(g).zip(av) {
                        *d += gi * ai;
                    }
                }
            }
            Op::Scale(a, s) => {
                let ga = slot(grads, *a, g.len());
                for (d, gi) in ga.iter_mut().zip(g) {
                    *d += gi * s;
                }
            }
            Op::AddRow(a, row) => {
                if self.req(*a) {
                    add_into(slot(grads, *a, g.len()), g);
                }
                if self.req(*row) {
                    let c = self.value(*row).numel();
                    let gr = slot(grads, *row, c);
                    for chunk in g.chunks_exact(c) {
                        add_into(gr, chunk);
                    }
                }
            }
            Op::MulRow(a, row) => {
                let c = self.value(*row).numel();
                if self.req(*a) {
                    let r = self.value(*row).data();
                    let ga = slot(grads, *a, g.len());
                    for (dst, src) in ga.chunks_exact_mut(c).zip(g.chunks_exact(c)) {
                        for ((d, gi), s) in dst.iter_mut().zip(src).zip(r) {
                            *d += gi * s;
                        }
                    }
                }
                if self.req(*row) {
                    let av = self.value(*a).data();
                    let gr = slot(grads, *row, c);
                    for (src, arow) in g.chunks_exact(c).zip(av.chunks_exact(c)) {
                        for ((d, gi), x) in gr.iter_mut().zip(src).zip(arow) {
                            *d += gi * x;
                        }
                    }
                }
            }
            Op::MulCol(a, col) => {
                let n = self.value(*col).numel();
                let c = g.len() / n;
                if self.req(*a) {
                    let w = self.value(*col).data();
                    let ga = slot(grads, *a, g.len());
                    for ((dst, src), s) in ga.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(w) {
                        for (d, gi) in dst.iter_mut().zip(src) {
                            *d += gi * s;
                        }
                    }
                }
                if self.req(*col) {
                    let av = self.value(*a).data();
                    let gc = slot(grads, *col, n);
                    for ((d, src), arow) in gc.iter_mut().zip(g.chunks_exact(c)).zip(av.chunks_exact(c)) {
                        *d += src.iter().zip(arow).map(|(x, y)| x * y).sum::<f64>();
                    }
                }
            }
            Op::Silu(a) => {
                let av = self.value(*a).data();
                let ga = slot(grads, *a, g.len());
                for ((d, gi), &x) in ga.iter_mut().zip(g).zip(av) {
                    let s = sigmoid(x);
                    *d += gi * s * (1.0 + x * (1.0 - s));
                }
            }
            Op::Softmax(a) => {
                let c = node.value.rows_cols().1;
                let y = node.value.data();
                let ga = slot(grads, *a, g.len());
                for ((dst, gr), yr) in ga.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(y.chunks_exact(c)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                    for ((d, gi), yi) in dst.iter_mut().zip(gr).zip(yr) {
                        *d += yi * (gi - dot);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                x_hat,
                rstd,
            } => {
                let c = node.value.shape()[1];
                if let Some(b) = bias {
                    if self.req(*b) {
                        let gb = slot(grads, *b, c);
                        for row in g.chunks_exact(c) {
                            add_into(gb, row);
                        }
                    }
                }
                if let Some(gn) = gain {
                    if self.req(*gn) {
                        let gg = slot(grads, *gn, c);
                        for (row, xr) in g.chunks_exact(c).zip(x_hat.chunks_exact(c)) {
                            for ((d, gi), xh) in gg.iter_mut().zip(row).zip(xr) {
                                *d += gi * xh;
                            }
                        }
                    }
                }
                if self.req(*x) {
                    let gain_v = gain.map(|gn| self.value(gn).data());
                    let gx = slot(grads, *x, g.len());
                    let mut dxh = vec![0.0; c];
                    for (((dst, row), xr), r) in gx
                        .chunks_exact_mut(c)
                        .zip(g.chunks_exact(c))
                        .zip(x_hat.chunks_exact(c))
                        .zip(rstd)
                    {
                        for j in 0..c {
                            dxh[j] = row[j] * gain_v.map_or(1.0, |gv| gv[j]);
                        }
                        let mean_d = dxh.iter().sum::<f64>() / c as f64;
                        let mean_dx = dxh.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            dst[j] += r * (dxh[j] - mean_d - xr[j] * mean_dx);
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).numel();
                    if self.req(*p) {
                        add_into(slot(grads, *p, len), &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::SliceRows(a, start) => {
                let c = node.value.shape()[1];
                let total = self.value(*a).numel();
                let ga = slot(grads, *a, total);
                add_into(&mut ga[start * c..start * c + g.len()], g);
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = dims(&node.value);
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).shape()[1];
                    if self.req(*p) {
                        let gp = slot(grads, *p, rows * w);
                        for r in 0..rows {
                            add_into(&mut gp[r * w..(r + 1) * w], &g[r * total + offset..r * total + offset + w]);
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceCols(a, start) => {
                let (rows, len) = dims(&node.value);
                let (_, c) = dims(self.value(*a));
                let ga = slot(grads, *a, rows * c);
                for r in 0..rows {
                    add_into(&mut ga[r * c + start..r * c + start + len], &g[r * len..(r + 1) * len]);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => self.attention_backward(*q, *k, *v, *heads, probs, g, grads),
            Op::Mse(a, target) => {
                let av = self.value(*a).data();
                let scale = 2.0 * g[0] / av.len() as f64;
                let ga = slot(grads, *a, av.len());
                for ((d, x), y) in ga.iter_mut().zip(av).zip(target.data()) {
                    *d += scale * (x - y);
                }
            }
            Op::Sum(a) => {
                let ga = slot(grads, *a, self.value(*a).numel());
                for d in ga.iter_mut() {
                    *d += g[0];
                }
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                let ga = slot(grads, *a, n);
                for d in ga.iter_mut() {
                    *d += g[0] / n as f64;
                }
            }
            Op::Reshape(a) => {
                add_into(slot(grads, *a, g.len()), g);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (sq, c) = dims(self.value(q));
        let sk = self.value(k).shape()[0];
        let d = c / heads;
        let scale = 1.0 / (d as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let ci = c as isize;
        let mut dq = vec![0.0; sq * c];
        let mut dk = vec![0.0; sk * c];
        let mut dv = vec![0.0; sk * c];
        let mut dp = vec![0.0; sq * sk];
        for h in 0..heads {
            let p = &probs[h * sq * sk..(h + 1) * sq * sk];
            let off = h * d;
            // dV_h = P^T dO_h
            gemm(sk, sq, d, p, 1, sk as isize, &g[off..], ci, 1, 1.0, &mut dv[off..], ci, 1);
            // dP = dO_h V_h^T
            gemm(sq, d, sk, &g[off..], ci, 1, &vd[off..], 1, ci, 0.0, &mut dp, sk as isize, 1);
            // dS = P * (dP - rowsum(dP * P)), folded with the score scale
            for (dr, pr) in dp.chunks_exact_mut(sk).zip(p.chunks_exact(sk)) {
                let dot: f64 = dr.iter().zip(pr).map(|(a, b)| a * b).sum();
                for (x, pi) in dr.iter_mut().zip(pr) {
                    *x = pi * (*x - dot) * scale;
                }
            }
            // dQ_h = dS K_h ; dK_h = dS^T Q_h
            gemm(sq, sk, d, &dp, sk as isize, 1, &kd[off..], ci, 1, 1.0, &mut dq[off..], ci, 1);
            gemm(sk, sq, d, &dp, 1, sk as isize, &qd[off..], ci, 1, 1.0, &mut dk[off..], ci, 1);
        }
        for (var, buf) in [(q, dq), (k, dk), (v, dv)] {
            if self.req(var) {
                add_into(slot(grads, var, buf.len()), &buf);
            }
        }
    }
}

/// Multi-head attention forward; returns the output `[Sq, C]` and the
/// probabilities `[heads, Sq, Sk]` flattened.
pub(crate) fn attention_forward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
) -> Result<(Tensor, Vec<f64>)> {
    let (sq, c) = q.dims2("attention")?;
    let (sk, ck) = k.dims2("attention")?;
    let (sv, cv) = v.dims2("attention")?;
    if ck != c || cv != c || sv != sk {
        return Err(Error::dim(
            "attention",
            format!("q {:?}, k {:?}, v {:?}", q.shape(), k.shape(), v.shape()),
        ));
    }
    if heads == 0 || c % heads != 0 {
        return Err(Error::dim("attention", format!("{heads} heads do not divide C = {c}")));
    }
    let d = c / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let ci = c as isize;
    let mut out = vec![0.0; sq * c];
    let mut probs = vec![0.0; heads * sq * sk];
    let mut scores = vec![0.0; sq * sk];
    for h in 0..heads {
        let off = h * d;
        gemm(sq, d, sk, &q.data()[off..], ci, 1, &k.data()[off..], 1, ci, 0.0, &mut scores, sk as isize, 1);
        for s in scores.iter_mut() {
            *s *= scale;
        }
        let p = &mut probs[h * sq * sk..(h + 1) * sq * sk];
        softmax_rows(&scores, sk, p);
        gemm(sq, sk, d, p, sk as isize, 1, &v.data()[off..], ci, 1, 0.0, &mut out[off..], ci, 1);
    }
    Ok((Tensor::checked("attention", vec![sq, c], out)?, probs))
}

fn add_row(a: &Tensor, row: &Tensor, op: &'static str) -> Result<Tensor> {
    let (n, c) = a.dims2(op)?;
    if row.numel() != c {
        return Err(Error::dim(op, format!("row of {} vs width {c}", row.numel())));
    }
    let mut out = a.to_vec();
    for chunk in out.chunks_exact_mut(c) {
        for (v, b) in chunk.iter_mut().zip(row.data()) {
            *v += b;
        }
    }
    Tensor::checked(op, vec![n, c], out)
}

fn dims(t: &Tensor) -> (usize, usize) {
    (t.shape()[0], t.shape()[1])
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    #[test]
    fn sum_and_square_gradients() {
        let mut rng = SeededRng::new(1);
        let p = rng.normal_tensor(&[3, 2]);
        let mut tape = Tape::new();
        let v = tape.param("p", &p);
        let s = tape.sum(v).unwrap();
        assert_eq!(tape.backward(s).unwrap().get("p").unwrap(), &Tensor::ones([3, 2]));

        let mut tape = Tape::new();
        let v = tape.param("p", &p);
        let sq = tape.mul(v, v).unwrap();
        let s = tape.sum(sq).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get("p").unwrap(), &p.scale(2.0).unwrap());
    }

    #[test]
    fn unused_params_get_zero_and_nonscalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let a = tape.param("a", &Tensor::ones([2, 2]));
        let _b = tape.param("b", &Tensor::ones([3]));
        assert!(matches!(tape.backward(a), Err(Error::Contract(_))));
        let s = tape.sum(a).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get("b").unwrap(), &Tensor::zeros([3]));
        assert_eq!(g.len(), 2);
    }

    #[test]
    fn reused_param_accumulates() {
        let mut tape = Tape::new();
        let x = Tensor::new(vec![1, 1], vec![3.0]).unwrap();
        let a = tape.param("x", &x);
        let b = tape.param("x", &Tensor::zeros([1, 1]));
        assert_eq!(a, b);
        let y = tape.matmul(a, b).unwrap();
        let s = tape.sum(y).unwrap();
        assert_eq!(tape.backward(s).unwrap().get("x").unwrap().data(), &[6.0]);
    }

    #[test]
    fn attention_probs_rows_sum_to_one() {
        let mut rng = SeededRng::new(4);
        let mut tape = Tape::new();
        let q = tape.constant(rng.normal_tensor(&[5, 8]));
        let k = tape.constant(rng.normal_tensor(&[7, 8]));
        let v = tape.constant(rng.normal_tensor(&[7, 8]));
        let o = tape.attention(q, k, v, 2).unwrap();
        let p = tape.attention_probs(o).unwrap();
        assert_eq!(p.shape(), &[2, 5, 7]);
        for row in p.data().chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        assert!(tape.attention(q, k, v, 3).is_err());
    }
}
