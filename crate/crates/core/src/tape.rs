//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation eagerly: each op computes its output
//! immediately and appends a node holding the value plus whatever the
//! backward rule needs (saved probabilities, normalized activations). Node
//! indices are assigned in recording order, so parents always precede their
//! children and a single reverse sweep is a valid topological traversal.
//!
//! ```
//! use amd_core::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor::scalar(3.0));
//! let y = tape.mul(x, x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().item().unwrap(), 6.0);
//! ```
//!
//! A tape supports exactly one backward pass. Recording further operations
//! or calling [`Tape::backward`] again afterwards is a state error.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Error, Result};
use crate::kernels;
use crate::math;
use crate::tensor::Tensor;

static NEXT_TAPE_ID: AtomicUsize = AtomicUsize::new(1);

/// Layer-norm epsilon used by every normalization in the model.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a tensor recorded on a particular tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: usize,
    index: usize,
}

impl Var {
    pub fn tape_id(&self) -> usize {
        self.tape
    }

    pub fn index(&self) -> usize {
        self.index
    }
}

pub(crate) enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddRowBias(usize, usize),
    Sum(usize),
    Gelu(usize),
    ScaleGroups {
        x: usize,
        gate: usize,
        group: usize,
    },
    LayerNorm {
        x: usize,
        weight: usize,
        bias: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Attention {
        qkv: usize,
        batch: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    AssembleTokens {
        patches: usize,
        cls: usize,
        pos: usize,
        batch: usize,
    },
    SelectRows {
        x: usize,
        stride: usize,
        offset: usize,
    },
    Softmax {
        x: usize,
        gamma: f64,
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    KlSoft {
        student: usize,
        gamma: f64,
        teacher_probs: Vec<f64>,
        student_probs: Vec<f64>,
    },
    Mse {
        model: usize,
        teacher: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation graph for one forward pass.
pub struct Tape {
    id: usize,
    nodes: Vec<Node>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss with respect to the tape's trainable leaves.
#[derive(Debug, Clone)]
pub struct Gradients {
    tape: usize,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a trainable leaf; `None` for constants or foreign vars.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get(var.index).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get_mut(var.index).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input tensor. Trainable leaves receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push_unchecked(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        assert_eq!(var.tape, self.id, "var recorded on a different tape");
        &self.nodes[var.index].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.index].requires_grad
    }

    fn check(&self, var: Var) -> Result<usize> {
        if var.tape != self.id || var.index >= self.nodes.len() {
            return Err(Error::Contract(format!(
                "var {var:?} does not belong to tape {}",
                self.id
            )));
        }
        Ok(var.index)
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            index,
        }
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op, parents: &[usize]) -> Result<Var> {
        if self.consumed {
            return Err(Error::State(
                "cannot record operations after backward".into(),
            ));
        }
        let requires_grad = parents.iter().any(|&p| self.nodes[p].requires_grad);
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    pub(crate) fn resolve(&self, var: Var) -> Result<(usize, &Tensor)> {
        let i = self.check(var)?;
        Ok((i, &self.nodes[i].value))
    }

    /// Matrix product `a[r×k] · b[k×c]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ta) = self.resolve(a)?;
        let (ib, tb) = self.resolve(b)?;
        let (r, k) = ta.dims2()?;
        let (k2, c) = tb.dims2()?;
        if k != k2 {
            return Err(Error::dim("matmul", ta.shape(), tb.shape()));
        }
        let mut out = vec![0.0; r * c];
        kernels::gemm_nn(r, k, c, ta.data(), tb.data(), &mut out);
        let value = Tensor::new(&[r, c], out)?;
        self.push(value, Op::MatMul(ia, ib), &[ia, ib])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ta) = self.resolve(a)?;
        let (ib, tb) = self.resolve(b)?;
        if ta.shape() != tb.shape() {
            return Err(Error::dim("add", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(ta.shape(), data)?;
        self.push(value, Op::Add(ia, ib), &[ia, ib])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ta) = self.resolve(a)?;
        let (ib, tb) = self.resolve(b)?;
        if ta.shape() != tb.shape() {
            return Err(Error::dim("mul", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(ta.shape(), data)?;
        self.push(value, Op::Mul(ia, ib), &[ia, ib])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let (ix, tx) = self.resolve(x)?;
        let data = tx.data().iter().map(|v| v * factor).collect();
        let value = Tensor::new(tx.shape(), data)?;
        self.push(value, Op::Scale(ix, factor), &[ix])
    }

    /// Adds a length-`c` bias to every row of `x[n×c]`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (ix, tx) = self.resolve(x)?;
        let (ib, tb) = self.resolve(bias)?;
        let (n, c) = tx.dims2()?;
        if tb.shape() != [c] {
            return Err(Error::dim("add_row_bias", tx.shape(), tb.shape()));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_exact_mut(c) {
            for (v, b) in row.iter_mut().zip(tb.data()) {
                *v += b;
            }
        }
        let value = Tensor::new(&[n, c], data)?;
        self.push(value, Op::AddRowBias(ix, ib), &[ix, ib])
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let (ix, tx) = self.resolve(x)?;
        let total = tx.data().iter().sum();
        self.push(Tensor::scalar(total), Op::Sum(ix), &[ix])
    }

    /// Gaussian error linear unit, `x·Φ(x)` with the exact normal CDF.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let (ix, tx) = self.resolve(x)?;
        let data = tx
            .data()
            .iter()
            .map(|&v| 0.5 * v * (1.0 + math::erf(v * core::f64::consts::FRAC_1_SQRT_2)))
            .collect();
        let value = Tensor::new(tx.shape(), data)?;
        self.push(value, Op::Gelu(ix), &[ix])
    }

    /// Multiplies contiguous column groups of `x[n×(G·group)]` by `gate[G]`.
    ///
    /// Used to switch attention heads (group = head dim) and MLP units
    /// (group = 1) on and off; the gate gradient is the sensitivity probe
    /// used for importance estimation.
    pub fn scale_groups(&mut self, x: Var, gate: Var, group: usize) -> Result<Var> {
        let (ix, tx) = self.resolve(x)?;
        let (ig, tg) = self.resolve(gate)?;
        let (n, c) = tx.dims2()?;
        if tg.shape().len() != 1 || group == 0 || tg.len() * group != c {
            return Err(Error::dim("scale_groups", tx.shape(), tg.shape()));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_exact_mut(c) {
            for (chunk, &g) in row.chunks_exact_mut(group).zip(tg.data()) {
                for v in chunk {
                    *v *= g;
                }
            }
        }
        let value = Tensor::new(&[n, c], data)?;
        self.push(value, Op::ScaleGroups { x: ix, gate: ig, group }, &[ix, ig])
    }

    /// Row-wise layer normalization with affine weight and bias.
    pub fn layer_norm(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let (ix, tx) = self.resolve(x)?;
        let (iw, tw) = self.resolve(weight)?;
        let (ib, tb) = self.resolve(bias)?;
        let (n, c) = tx.dims2()?;
        if tw.shape() != [c] || tb.shape() != [c] {
            return Err(Error::dim("layer_norm", tx.shape(), tw.shape()));
        }
        let mut xhat = vec![0.0; n * c];
        let mut inv_std = vec![0.0; n];
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            let row = &tx.data()[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / math::sqrt(var + LAYER_NORM_EPS);
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = h * tw.data()[j] + tb.data()[j];
            }
        }
        let value = Tensor::new(&[n, c], out)?;
        self.push(
            value,
            Op::LayerNorm {
                x: ix,
                weight: iw,
                bias: ib,
                xhat,
                inv_std,
            },
            &[ix, iw, ib],
        )
    }

    /// Multi-head scaled dot-product self-attention.
    ///
    /// `qkv` is `[batch·tokens × 3·heads·head_dim]` with the query, key and
    /// value blocks laid side by side and heads contiguous inside each block.
    /// Output is `[batch·tokens × heads·head_dim]`, heads contiguous.
    pub fn attention(&mut self, qkv: Var, batch: usize, heads: usize) -> Result<Var> {
        let (iq, tq) = self.resolve(qkv)?;
        let (rows, cols) = tq.dims2()?;
        if batch == 0 || heads == 0 || rows % batch != 0 || cols % (3 * heads) != 0 {
            return Err(Error::dim("attention", tq.shape(), &[batch, heads]));
        }
        let tokens = rows / batch;
        let width = cols / 3;
        let hd = width / heads;
        let scale = 1.0 / math::sqrt(hd as f64);
        let src = tq.data();
        let mut probs = vec![0.0; batch * heads * tokens * tokens];
        let mut out = vec![0.0; rows * width];
        let mut scores = vec![0.0; tokens];
        for b in 0..batch {
            for h in 0..heads {
                let base = (b * heads + h) * tokens * tokens;
                for i in 0..tokens {
                    let qi = &src[(b * tokens + i) * cols + h * hd..][..hd];
                    let mut max = f64::NEG_INFINITY;
                    for (j, s) in scores.iter_mut().enumerate() {
                        let kj = &src[(b * tokens + j) * cols + width + h * hd..][..hd];
                        *s = kernels::dot(qi, kj) * scale;
                        max = max.max(*s);
                    }
                    let mut denom = 0.0;
                    for s in scores.iter_mut() {
                        *s = math::exp(*s - max);
                        denom += *s;
                    }
                    let p_row = &mut probs[base + i * tokens..base + (i + 1) * tokens];
                    let o = &mut out[(b * tokens + i) * width + h * hd..][..hd];
                    for (j, (p, s)) in p_row.iter_mut().zip(&scores).enumerate() {
                        *p = s / denom;
                        let vj = &src[(b * tokens + j) * cols + 2 * width + h * hd..][..hd];
                        for (ov, vv) in o.iter_mut().zip(vj) {
                            *ov += *p * vv;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(&[rows, width], out)?;
        self.push(
            value,
            Op::Attention {
                qkv: iq,
                batch,
                heads,
                probs,
            },
            &[iq],
        )
    }

    /// Prepends the class token to each image's patch embeddings and adds
    /// positional embeddings: `[batch·P × d] → [batch·(P+1) × d]`.
    pub fn assemble_tokens(&mut self, patches: Var, cls: Var, pos: Var, batch: usize) -> Result<Var> {
        let (ip, tp) = self.resolve(patches)?;
        let (ic, tc) = self.resolve(cls)?;
        let (ipos, tpos) = self.resolve(pos)?;
        let (rows, d) = tp.dims2()?;
        let (tokens, d2) = tpos.dims2()?;
        if batch == 0 || rows != batch * (tokens - 1) || d2 != d || tc.shape() != [d] {
            return Err(Error::dim("assemble_tokens", tp.shape(), tpos.shape()));
        }
        let np = tokens - 1;
        let mut out = vec![0.0; batch * tokens * d];
        for b in 0..batch {
            for t in 0..tokens {
                let dst = &mut out[(b * tokens + t) * d..][..d];
                let src = if t == 0 {
                    tc.data()
                } else {
                    &tp.data()[(b * np + t - 1) * d..][..d]
                };
                let pe = &tpos.data()[t * d..][..d];
                for ((o, s), p) in dst.iter_mut().zip(src).zip(pe) {
                    *o = s + p;
                }
            }
        }
        let value = Tensor::new(&[batch * tokens, d], out)?;
        self.push(
            value,
            Op::AssembleTokens {
                patches: ip,
                cls: ic,
                pos: ipos,
                batch,
            },
            &[ip, ic, ipos],
        )
    }

    /// Picks rows `offset, offset+stride, …` of `x[n×c]`.
    pub fn select_rows(&mut self, x: Var, stride: usize, offset: usize) -> Result<Var> {
        let (ix, tx) = self.resolve(x)?;
        let (n, c) = tx.dims2()?;
        if stride == 0 || offset >= stride || n % stride != 0 {
            return Err(Error::dim("select_rows", tx.shape(), &[stride, offset]));
        }
        let count = n / stride;
        let mut out = Vec::with_capacity(count * c);
        for k in 0..count {
            out.extend_from_slice(tx.row(k * stride + offset));
        }
        let value = Tensor::new(&[count, c], out)?;
        self.push(value, Op::SelectRows { x: ix, stride, offset }, &[ix])
    }

    /// Back-propagates from a scalar loss and returns the gradients of every
    /// trainable leaf. Leaves the loss does not depend on get zero gradients.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        let il = self.check(loss)?;
        if self.consumed {
            return Err(Error::State("backward already ran on this tape".into()));
        }
        if !self.nodes[il].value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[il].value.shape()
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[il] = Some(vec![1.0]);
        for i in (0..=il).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backward_node(i, &g, &mut grads);
        }
        let out = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match (&node.op, node.requires_grad) {
                (Op::Leaf, true) => Some(match g {
                    Some(g) => Tensor::new(node.value.shape(), g).expect("gradient shape"),
                    None => Tensor::zeros(node.value.shape()),
                }),
                _ => None,
            })
            .collect();
        Ok(Gradients {
            tape: self.id,
            grads: out,
        })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], index: usize) -> Option<&'g mut [f64]> {
        if !self.nodes[index].requires_grad {
            return None;
        }
        let n = self.nodes[index].value.len();
        Some(grads[index].get_or_insert_with(|| vec![0.0; n]).as_mut_slice())
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let ta = &self.nodes[a].value;
                let tb = &self.nodes[b].value;
                let (r, k) = ta.dims2().expect("matmul lhs");
                let c = tb.shape()[1];
                if let Some(ga) = self.acc(grads, a) {
                    kernels::gemm_nt(r, c, k, g, tb.data(), ga);
                }
                if let Some(gb) = self.acc(grads, b) {
                    kernels::gemm_tn(r, k, c, ta.data(), g, gb);
                }
            }
            &Op::Add(a, b) => {
                for p in [a, b] {
                    if let Some(gp) = self.acc(grads, p) {
                        add_into(gp, g);
                    }
                }
            }
            &Op::Mul(a, b) => {
                let ta = self.nodes[a].value.data();
                let tb = self.nodes[b].value.data();
                if let Some(ga) = self.acc(grads, a) {
                    for ((o, gv), bv) in ga.iter_mut().zip(g).zip(tb) {
                        *o += gv * bv;
                    }
                }
                if let Some(gb) = self.acc(grads, b) {
                    for ((o, gv), av) in gb.iter_mut().zip(g).zip(ta) {
                        *o += gv * av;
                    }
                }
            }
            &Op::Scale(x, f) => {
                if let Some(gx) = self.acc(grads, x) {
                    for (o, gv) in gx.iter_mut().zip(g) {
                        *o += gv * f;
                    }
                }
            }
            &Op::AddRowBias(x, b) => {
                let c = self.nodes[b].value.len();
                if let Some(gx) = self.acc(grads, x) {
                    add_into(gx, g);
                }
                if let Some(gb) = self.acc(grads, b) {
                    for row in g.chunks_exact(c) {
                        add_into(gb, row);
                    }
                }
            }
            &Op::Sum(x) => {
                if let Some(gx) = self.acc(grads, x) {
                    for o in gx.iter_mut() {
                        *o += g[0];
                    }
                }
            }
            &Op::Gelu(x) => {
                let tx = self.nodes[x].value.data();
                if let Some(gx) = self.acc(grads, x) {
                    for ((o, gv), &v) in gx.iter_mut().zip(g).zip(tx) {
                        *o += gv * gelu_grad(v);
                    }
                }
            }
            &Op::ScaleGroups { x, gate, group } => {
                let tx = self.nodes[x].value.data();
                let tg = self.nodes[gate].value.data();
                let c = tg.len() * group;
                if let Some(gx) = self.acc(grads, x) {
                    for (grow, orow) in g.chunks_exact(c).zip(gx.chunks_exact_mut(c)) {
                        for ((gc, oc), &gv) in grow
                            .chunks_exact(group)
                            .zip(orow.chunks_exact_mut(group))
                            .zip(tg)
                        {
                            for (o, d) in oc.iter_mut().zip(gc) {
                                *o += d * gv;
                            }
                        }
                    }
                }
                if let Some(gg) = self.acc(grads, gate) {
                    for (grow, xrow) in g.chunks_exact(c).zip(tx.chunks_exact(c)) {
                        for ((gc, xc), o) in grow
                            .chunks_exact(group)
                            .zip(xrow.chunks_exact(group))
                            .zip(gg.iter_mut())
                        {
                            *o += kernels::dot(gc, xc);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                weight,
                bias,
                xhat,
                inv_std,
            } => {
                let tw = self.nodes[*weight].value.data();
                let c = tw.len();
                if let Some(gw) = self.acc(grads, *weight) {
                    for (grow, hrow) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        for ((o, gv), h) in gw.iter_mut().zip(grow).zip(hrow) {
                            *o += gv * h;
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *bias) {
                    for grow in g.chunks_exact(c) {
                        add_into(gb, grow);
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    let inv_c = 1.0 / c as f64;
                    let mut dh = vec![0.0; c];
                    for (r, ((grow, hrow), orow)) in g
                        .chunks_exact(c)
                        .zip(xhat.chunks_exact(c))
                        .zip(gx.chunks_exact_mut(c))
                        .enumerate()
                    {
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for j in 0..c {
                            dh[j] = grow[j] * tw[j];
                            sum_dh += dh[j];
                            sum_dh_h += dh[j] * hrow[j];
                        }
                        let is = inv_std[r];
                        for j in 0..c {
                            orow[j] += is * (dh[j] - inv_c * sum_dh - hrow[j] * inv_c * sum_dh_h);
                        }
                    }
                }
            }
            Op::Attention {
                qkv,
                batch,
                heads,
                probs,
            } => {
                let Some(gq) = self.acc(grads, *qkv) else { return };
                let tq = &self.nodes[*qkv].value;
                let (rows, cols) = tq.dims2().expect("qkv");
                let src = tq.data();
                let (batch, heads) = (*batch, *heads);
                let tokens = rows / batch;
                let width = cols / 3;
                let hd = width / heads;
                let scale = 1.0 / math::sqrt(hd as f64);
                let mut dp = vec![0.0; tokens];
                for b in 0..batch {
                    for h in 0..heads {
                        let base = (b * heads + h) * tokens * tokens;
                        for i in 0..tokens {
                            let go = &g[(b * tokens + i) * width + h * hd..][..hd];
                            let p_row = &probs[base + i * tokens..base + (i + 1) * tokens];
                            let mut row_dot = 0.0;
                            for j in 0..tokens {
                                let vj = &src[(b * tokens + j) * cols + 2 * width + h * hd..][..hd];
                                dp[j] = kernels::dot(go, vj);
                                row_dot += p_row[j] * dp[j];
                            }
                            let qi_off = (b * tokens + i) * cols + h * hd;
                            for j in 0..tokens {
                                let ds = p_row[j] * (dp[j] - row_dot) * scale;
                                let kj_off = (b * tokens + j) * cols + width + h * hd;
                                let vj_off = kj_off + width;
                                for t in 0..hd {
                                    gq[qi_off + t] += ds * src[kj_off + t];
                                    gq[kj_off + t] += ds * src[qi_off + t];
                                    gq[vj_off + t] += p_row[j] * go[t];
                                }
                            }
                        }
                    }
                }
            }
            &Op::AssembleTokens {
                patches,
                cls,
                pos,
                batch,
            } => {
                let d = self.nodes[cls].value.len();
                let tokens = self.nodes[pos].value.shape()[0];
                let np = tokens - 1;
                if let Some(gp) = self.acc(grads, patches) {
                    for b in 0..batch {
                        for t in 1..tokens {
                            add_into(
                                &mut gp[(b * np + t - 1) * d..][..d],
                                &g[(b * tokens + t) * d..][..d],
                            );
                        }
                    }
                }
                if let Some(gc) = self.acc(grads, cls) {
                    for b in 0..batch {
                        add_into(gc, &g[b * tokens * d..][..d]);
                    }
                }
                if let Some(gpos) = self.acc(grads, pos) {
                    for b in 0..batch {
                        add_into(gpos, &g[b * tokens * d..][..tokens * d]);
                    }
                }
            }
            &Op::SelectRows { x, stride, offset } => {
                let c = node.value.shape()[1];
                if let Some(gx) = self.acc(grads, x) {
                    for (k, grow) in g.chunks_exact(c).enumerate() {
                        add_into(&mut gx[(k * stride + offset) * c..][..c], grow);
                    }
                }
            }
            &Op::Softmax { x, gamma } => {
                let y = node.value.data();
                let c = *node.value.shape().last().expect("softmax rank");
                if let Some(gx) = self.acc(grads, x) {
                    for ((grow, yrow), orow) in g
                        .chunks_exact(c)
                        .zip(y.chunks_exact(c))
                        .zip(gx.chunks_exact_mut(c))
                    {
                        let s = kernels::dot(grow, yrow);
                        for j in 0..c {
                            orow[j] += yrow[j] * (grow[j] - s) / gamma;
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let n = labels.len();
                let c = probs.len() / n;
                if let Some(gl) = self.acc(grads, *logits) {
                    let w = g[0] / n as f64;
                    for (r, &label) in labels.iter().enumerate() {
                        for j in 0..c {
                            let target = if j == label { 1.0 } else { 0.0 };
                            gl[r * c + j] += w * (probs[r * c + j] - target);
                        }
                    }
                }
            }
            Op::KlSoft {
                student,
                gamma,
                teacher_probs,
                student_probs,
            } => {
                let (n, _) = self.nodes[*student].value.dims2().expect("kl student");
                if let Some(gs) = self.acc(grads, *student) {
                    let w = g[0] / (n as f64 * gamma);
                    for ((o, ps), pt) in gs.iter_mut().zip(student_probs).zip(teacher_probs) {
                        *o += w * (ps - pt);
                    }
                }
            }
            &Op::Mse { model, teacher } => {
                let tm = self.nodes[model].value.data();
                let tt = self.nodes[teacher].value.data();
                if let Some(gm) = self.acc(grads, model) {
                    let w = 2.0 * g[0] / tm.len() as f64;
                    for ((o, a), b) in gm.iter_mut().zip(tm).zip(tt) {
                        *o += w * (a - b);
                    }
                }
            }
        }
    }
}

#[inline]
fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + math::erf(x * core::f64::consts::FRAC_1_SQRT_2));
    let pdf = math::exp(-0.5 * x * x) * 0.398_942_280_401_432_7;
    cdf + x * pdf
}
