//! Reverse-mode differentiation over a linear tape of tensor operations.
//!
//! A [`Graph`] records every forward op as a node holding its output value
//! and whatever it needs for the backward pass. [`Graph::backward`] replays
//! the tape in reverse and adds parameter gradients into the [`ParamSet`]
//! the parameters were read from. Gradients accumulate across calls until
//! [`ParamSet::zero_grad`] is called.

use rand::Rng;

use super::kernels;
use super::tensor::{axis_split, check_shape, numel, ParamId, ParamSet, Tensor};
use crate::error::{contract_err, dim_err, Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: f64 },
    AddBias { x: Var, bias: Var },
    Gelu { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Softmax { x: Var, axis: usize },
    MaxReduce { x: Var, axis: usize, argmax: Vec<usize> },
    WeightedReduce { x: Var, w: Var, axis: usize, mask: Option<Vec<bool>> },
    Select { x: Var, axis: usize, index: usize },
    Stack { inputs: Vec<Var> },
    Reshape { x: Var },
    Embedding { table: Var, ids: Vec<usize> },
    GatherRows { x: Var, rows: Vec<usize> },
    Dropout { x: Var, scale: Vec<f64> },
    Attention(Box<AttentionSaved>),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    Sum { x: Var },
}

#[derive(Debug)]
struct AttentionSaved {
    q: Var,
    k: Var,
    v: Var,
    batch: usize,
    seq: usize,
    heads: usize,
    /// Keys considered per sequence: everything up to the last unmasked one.
    key_len: Vec<usize>,
    /// Attention probabilities; block `(b, head)` is `seq × key_len[b]`.
    probs: Vec<f64>,
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Tape of forward operations.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// Graph that tracks gradients for parameters.
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grad_enabled: true }
    }

    /// Graph for pure evaluation; parameters are read as constants.
    pub fn inference() -> Self {
        Self { nodes: Vec::new(), grad_enabled: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node { shape, value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("graph nodes hold consistent shapes")
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    /// Constant leaf; no gradient flows into it.
    pub fn input(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.values().to_vec(), Op::Input, false)
    }

    pub fn constant(&mut self, shape: &[usize], values: Vec<f64>) -> Result<Var> {
        check_shape(shape)?;
        if numel(shape) != values.len() {
            return Err(dim_err(format!("constant of shape {shape:?} got {} values", values.len())));
        }
        Ok(self.push(shape.to_vec(), values, Op::Input, false))
    }

    /// Leaf reading the current value of a parameter.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        let t = &params.get(id).tensor;
        let ng = self.grad_enabled;
        self.push(t.shape().to_vec(), t.values().to_vec(), Op::Param(id), ng)
    }

    /// Matrix product of `a [m×k]` and `b [k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(dim_err(format!("matmul of {sa:?} by {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let value = kernels::matmul(self.value(a), self.value(b), m, k, n);
        let ng = self.ng(&[a, b]);
        Ok(self.push(vec![m, n], value, Op::MatMul { a, b, m, k, n }, ng))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(format!("{what} of {:?} and {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let ng = self.ng(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), value, Op::Add { a, b }, ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let ng = self.ng(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), value, Op::Mul { a, b }, ng))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x).iter().map(|v| v * factor).collect();
        let ng = self.ng(&[x]);
        self.push(self.shape(x).to_vec(), value, Op::Scale { x, factor }, ng)
    }

    /// Adds `bias [n]` to every length-`n` row of `x [..., n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sb.len() != 1 || sx.last() != Some(&sb[0]) {
            return Err(dim_err(format!("bias {sb:?} does not match last dimension of {sx:?}")));
        }
        let n = sb[0];
        let b = self.value(bias);
        let mut value = self.value(x).to_vec();
        for row in value.chunks_mut(n) {
            row.iter_mut().zip(b).for_each(|(v, b)| *v += b);
        }
        let ng = self.ng(&[x, bias]);
        Ok(self.push(self.shape(x).to_vec(), value, Op::AddBias { x, bias }, ng))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).iter().map(|&v| kernels::gelu(v)).collect();
        let ng = self.ng(&[x]);
        self.push(self.shape(x).to_vec(), value, Op::Gelu { x }, ng)
    }

    /// Normalizes every length-`H` row of `x [..., H]` to zero mean and unit
    /// variance, then applies `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x);
        let h = *sx.last().ok_or_else(|| dim_err("layer_norm on a scalar"))?;
        if self.shape(gamma) != [h] || self.shape(beta) != [h] {
            return Err(dim_err(format!(
                "layer_norm affine {:?}/{:?} does not match hidden size {h}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let rows = self.value(x).len() / h;
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![0.0; rows * h];
        let mut inv_std = vec![0.0; rows];
        let mut value = vec![0.0; rows * h];
        for (r, row) in self.value(x).chunks(h).enumerate() {
            let mean = row.iter().sum::<f64>() / h as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / h as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..h {
                let xh = (row[j] - mean) * is;
                xhat[r * h + j] = xh;
                value[r * h + j] = g[j] * xh + b[j];
            }
        }
        let ng = self.ng(&[x, gamma, beta]);
        Ok(self.push(sx.to_vec(), value, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, ng))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, n, inner) = axis_split(self.shape(x), axis)?;
        let mut value = self.value(x).to_vec();
        let mut buf = vec![0.0; n];
        for o in 0..outer {
            for j in 0..inner {
                for i in 0..n {
                    buf[i] = value[(o * n + i) * inner + j];
                }
                kernels::masked_softmax_row(&mut buf, None);
                for i in 0..n {
                    value[(o * n + i) * inner + j] = buf[i];
                }
            }
        }
        let ng = self.ng(&[x]);
        Ok(self.push(self.shape(x).to_vec(), value, Op::Softmax { x, axis }, ng))
    }

    /// Maximum over `axis`, restricted to positions where `mask` is true.
    /// The subgradient goes to the first maximizing position.
    pub fn max_reduce(&mut self, x: Var, axis: usize, mask: Option<&[bool]>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = axis_split(&shape, axis)?;
        check_mask(mask, n)?;
        let xv = self.value(x);
        let mut value = vec![f64::NEG_INFINITY; outer * inner];
        let mut argmax = vec![usize::MAX; outer * inner];
        for o in 0..outer {
            for i in 0..n {
                if mask.is_some_and(|m| !m[i]) {
                    continue;
                }
                let src = &xv[(o * n + i) * inner..(o * n + i + 1) * inner];
                let dst = &mut value[o * inner..(o + 1) * inner];
                let arg = &mut argmax[o * inner..(o + 1) * inner];
                for j in 0..inner {
                    if arg[j] == usize::MAX || src[j] > dst[j] {
                        dst[j] = src[j];
                        arg[j] = i;
                    }
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let ng = self.ng(&[x]);
        Ok(self.push(out_shape, value, Op::MaxReduce { x, axis, argmax }, ng))
    }

    /// `Σ_i w[i] · x[.., i, ..]` over `axis`; masked-out positions contribute
    /// zero and the remaining weights are not renormalized.
    pub fn weighted_reduce(&mut self, x: Var, w: Var, axis: usize, mask: Option<&[bool]>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = axis_split(&shape, axis)?;
        if self.shape(w) != [n] {
            return Err(dim_err(format!(
                "weights {:?} do not match axis {axis} of length {n} in {shape:?}",
                self.shape(w)
            )));
        }
        if let Some(m) = mask {
            if m.len() != n {
                return Err(dim_err(format!("mask of length {} over axis of length {n}", m.len())));
            }
        }
        let (xv, wv) = (self.value(x), self.value(w));
        let mut value = vec![0.0; outer * inner];
        for o in 0..outer {
            let dst = &mut value[o * inner..(o + 1) * inner];
            for i in 0..n {
                if mask.is_some_and(|m| !m[i]) {
                    continue;
                }
                let wi = wv[i];
                let src = &xv[(o * n + i) * inner..(o * n + i + 1) * inner];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += wi * s);
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let ng = self.ng(&[x, w]);
        Ok(self.push(out_shape, value, Op::WeightedReduce { x, w, axis, mask: mask.map(<[bool]>::to_vec) }, ng))
    }

    /// Slice at `index` along `axis`, dropping that axis.
    pub fn select(&mut self, x: Var, axis: usize, index: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = axis_split(&shape, axis)?;
        if index >= n {
            return Err(dim_err(format!("index {index} out of range for axis {axis} of {shape:?}")));
        }
        let xv = self.value(x);
        let mut value = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            value.extend_from_slice(&xv[(o * n + index) * inner..(o * n + index + 1) * inner]);
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let ng = self.ng(&[x]);
        Ok(self.push(out_shape, value, Op::Select { x, axis, index }, ng))
    }

    /// Stacks equal-shape nodes along a new leading axis.
    pub fn stack(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs.first().ok_or_else(|| dim_err("stack of zero tensors"))?;
        let base = self.shape(first).to_vec();
        let mut value = Vec::with_capacity(numel(&base) * inputs.len());
        for &v in inputs {
            if self.shape(v) != base.as_slice() {
                return Err(dim_err(format!("stack of {base:?} with {:?}", self.shape(v))));
            }
            value.extend_from_slice(self.value(v));
        }
        let mut shape = vec![inputs.len()];
        shape.extend_from_slice(&base);
        let ng = self.ng(inputs);
        Ok(self.push(shape, value, Op::Stack { inputs: inputs.to_vec() }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        check_shape(shape)?;
        if numel(shape) != self.value(x).len() {
            return Err(dim_err(format!("cannot reshape {:?} into {shape:?}", self.shape(x))));
        }
        let value = self.value(x).to_vec();
        let ng = self.ng(&[x]);
        Ok(self.push(shape.to_vec(), value, Op::Reshape { x }, ng))
    }

    /// Row lookup `table [V×H]` at `ids`, giving `[ids.len()×H]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let st = self.shape(table);
        if st.len() != 2 {
            return Err(dim_err(format!("embedding table must be 2-D, got {st:?}")));
        }
        let (vocab, h) = (st[0], st[1]);
        if let Some(&id) = ids.iter().find(|&&id| id >= vocab) {
            return Err(Error::Vocabulary { id, vocab });
        }
        if ids.is_empty() {
            return Err(dim_err("embedding lookup of zero ids"));
        }
        let tv = self.value(table);
        let mut value = Vec::with_capacity(ids.len() * h);
        for &id in ids {
            value.extend_from_slice(&tv[id * h..(id + 1) * h]);
        }
        let ng = self.ng(&[table]);
        Ok(self.push(vec![ids.len(), h], value, Op::Embedding { table, ids: ids.to_vec() }, ng))
    }

    /// Picks rows of a 2-D node.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() != 2 {
            return Err(dim_err(format!("gather_rows needs a 2-D input, got {sx:?}")));
        }
        let (m, n) = (sx[0], sx[1]);
        if rows.is_empty() || rows.iter().any(|&r| r >= m) {
            return Err(dim_err(format!("row selection out of range for {m} rows")));
        }
        let xv = self.value(x);
        let mut value = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            value.extend_from_slice(&xv[r * n..(r + 1) * n]);
        }
        let ng = self.ng(&[x]);
        Ok(self.push(vec![rows.len(), n], value, Op::GatherRows { x, rows: rows.to_vec() }, ng))
    }

    /// Inverted dropout. Returns `x` unchanged when `p` is zero.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(contract_err(format!("dropout probability {p} outside [0, 1)")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let scale: Vec<f64> =
            (0..self.value(x).len()).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect();
        let value = self.value(x).iter().zip(&scale).map(|(v, s)| v * s).collect();
        let ng = self.ng(&[x]);
        Ok(self.push(self.shape(x).to_vec(), value, Op::Dropout { x, scale }, ng))
    }

    /// Multi-head scaled dot-product self-attention.
    ///
    /// `q`, `k`, `v` are `[batch·seq × H]` with heads laid out as contiguous
    /// column blocks. Keys where `key_mask` is false receive zero weight.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        key_mask: &[bool],
        batch: usize,
        seq: usize,
        heads: usize,
    ) -> Result<Var> {
        let sq = self.shape(q).to_vec();
        if sq.len() != 2 || self.shape(k) != sq.as_slice() || self.shape(v) != sq.as_slice() {
            return Err(dim_err(format!(
                "attention inputs {:?}/{:?}/{:?} must share a 2-D shape",
                sq,
                self.shape(k),
                self.shape(v)
            )));
        }
        let h = sq[1];
        if sq[0] != batch * seq || key_mask.len() != batch * seq || heads == 0 || h % heads != 0 {
            return Err(dim_err(format!("attention over {batch}×{seq} tokens with {heads} heads does not fit {sq:?}")));
        }
        let dh = h / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut key_len = Vec::with_capacity(batch);
        for b in 0..batch {
            let mask = &key_mask[b * seq..(b + 1) * seq];
            match mask.iter().rposition(|&m| m) {
                Some(last) => key_len.push(last + 1),
                None => return Err(Error::InvalidMask(format!("sequence {b} has no attendable positions"))),
            }
        }
        let mut out = vec![0.0; batch * seq * h];
        let mut probs = vec![0.0; heads * seq * key_len.iter().sum::<usize>()];
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut offset = 0;
        for b in 0..batch {
            let kn = key_len[b];
            let mask = &key_mask[b * seq..b * seq + kn];
            for hd in 0..heads {
                let qh = head_block(qv, b, hd, seq, seq, h, dh);
                let kh = head_block(kv, b, hd, seq, kn, h, dh);
                let vh = head_block(vv, b, hd, seq, kn, h, dh);
                let p = &mut probs[offset..offset + seq * kn];
                offset += seq * kn;
                kernels::matmul_bt_acc(&qh, &kh, p, seq, dh, kn);
                for row in p.chunks_mut(kn) {
                    row.iter_mut().for_each(|x| *x *= scale);
                    kernels::masked_softmax_row(row, Some(mask));
                }
                let oh = kernels::matmul(p, &vh, seq, kn, dh);
                scatter_head_block(&mut out, &oh, b, hd, seq, seq, h, dh);
            }
        }
        let ng = self.ng(&[q, k, v]);
        Ok(self.push(
            vec![batch * seq, h],
            out,
            Op::Attention(Box::new(AttentionSaved { q, k, v, batch, seq, heads, key_len, probs })),
            ng,
        ))
    }

    /// Mean cross-entropy of `logits [N×C]` against class `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let sl = self.shape(logits);
        if sl.len() != 2 || sl[0] != targets.len() {
            return Err(dim_err(format!("cross_entropy of {sl:?} against {} targets", targets.len())));
        }
        let c = sl[1];
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(contract_err(format!("target class {t} out of range for {c} classes")));
        }
        let mut probs = self.value(logits).to_vec();
        let mut loss = 0.0;
        for (row, &t) in probs.chunks_mut(c).zip(targets) {
            kernels::masked_softmax_row(row, None);
            loss -= row[t].max(f64::MIN_POSITIVE).ln();
        }
        loss /= targets.len() as f64;
        let ng = self.ng(&[logits]);
        Ok(self.push(Vec::new(), vec![loss], Op::CrossEntropy { logits, targets: targets.to_vec(), probs }, ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let ng = self.ng(&[x]);
        self.push(Vec::new(), vec![s], Op::Sum { x }, ng)
    }

    /// Back-propagates from a scalar `loss`, adding gradients into the
    /// parameters of `params` that were read into this graph.
    pub fn backward(&self, loss: Var, params: &mut ParamSet) -> Result<()> {
        if self.node(loss).value.len() != 1 {
            return Err(contract_err(format!("backward needs a scalar loss, got shape {:?}", self.shape(loss))));
        }
        if !self.grad_enabled {
            return Err(contract_err("backward on an inference graph"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads, params)?;
        }
        Ok(())
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>], params: &mut ParamSet) -> Result<()> {
        match &node.op {
            Op::Input => {}
            Op::Param(id) => {
                if id.0 >= params.len() || params.get(*id).tensor.numel() != g.len() {
                    return Err(contract_err("graph parameter does not belong to this parameter set"));
                }
                params.get_mut(*id).tensor.accumulate_grad(g)?;
            }
            &Op::MatMul { a, b, m, k, n } => {
                if self.wants(a) {
                    let da = slot(grads, a, m * k);
                    kernels::matmul_bt_acc(g, self.value(b), da, m, n, k);
                }
                if self.wants(b) {
                    let db = slot(grads, b, k * n);
                    kernels::matmul_at_acc(self.value(a), g, db, m, k, n);
                }
            }
            &Op::Add { a, b } => {
                for x in [a, b] {
                    if self.wants(x) {
                        accumulate(grads, x, g);
                    }
                }
            }
            &Op::Mul { a, b } => {
                if self.wants(a) {
                    let (da, bv) = (slot(grads, a, g.len()), self.value(b));
                    da.iter_mut().zip(g.iter().zip(bv)).for_each(|(d, (g, b))| *d += g * b);
                }
                if self.wants(b) {
                    let (db, av) = (slot(grads, b, g.len()), self.value(a));
                    db.iter_mut().zip(g.iter().zip(av)).for_each(|(d, (g, a))| *d += g * a);
                }
            }
            &Op::Scale { x, factor } => {
                if self.wants(x) {
                    slot(grads, x, g.len()).iter_mut().zip(g).for_each(|(d, g)| *d += g * factor);
                }
            }
            &Op::AddBias { x, bias } => {
                if self.wants(x) {
                    accumulate(grads, x, g);
                }
                if self.wants(bias) {
                    let n = self.shape(bias)[0];
                    let db = slot(grads, bias, n);
                    for row in g.chunks(n) {
                        add_into(db, row);
                    }
                }
            }
            &Op::Gelu { x } => {
                if self.wants(x) {
                    let xv = self.value(x);
                    let dx = slot(grads, x, g.len());
                    for i in 0..g.len() {
                        dx[i] += g[i] * kernels::gelu_grad(xv[i]);
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let h = self.shape(*gamma)[0];
                if self.wants(*gamma) {
                    let dg = slot(grads, *gamma, h);
                    for (grow, xrow) in g.chunks(h).zip(xhat.chunks(h)) {
                        dg.iter_mut().zip(grow.iter().zip(xrow)).for_each(|(d, (g, x))| *d += g * x);
                    }
                }
                if self.wants(*beta) {
                    let db = slot(grads, *beta, h);
                    for grow in g.chunks(h) {
                        add_into(db, grow);
                    }
                }
                if self.wants(*x) {
                    let gam = self.value(*gamma);
                    let dx = slot(grads, *x, g.len());
                    let mut dxhat = vec![0.0; h];
                    for (r, (grow, xrow)) in g.chunks(h).zip(xhat.chunks(h)).enumerate() {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..h {
                            dxhat[j] = grow[j] * gam[j];
                            mean_d += dxhat[j];
                            mean_dx += dxhat[j] * xrow[j];
                        }
                        mean_d /= h as f64;
                        mean_dx /= h as f64;
                        let is = inv_std[r];
                        for j in 0..h {
                            dx[r * h + j] += is * (dxhat[j] - mean_d - xrow[j] * mean_dx);
                        }
                    }
                }
            }
            &Op::Softmax { x, axis } => {
                if self.wants(x) {
                    let (outer, n, inner) = axis_split(&node.shape, axis)?;
                    let y = &node.value;
                    let dx = slot(grads, x, g.len());
                    for o in 0..outer {
                        for j in 0..inner {
                            let at = |i: usize| (o * n + i) * inner + j;
                            let dot: f64 = (0..n).map(|i| g[at(i)] * y[at(i)]).sum();
                            for i in 0..n {
                                dx[at(i)] += y[at(i)] * (g[at(i)] - dot);
                            }
                        }
                    }
                }
            }
            Op::MaxReduce { x, axis, argmax } => {
                if self.wants(*x) {
                    let (outer, n, inner) = axis_split(self.shape(*x), *axis)?;
                    let dx = slot(grads, *x, outer * n * inner);
                    for o in 0..outer {
                        for j in 0..inner {
                            let i = argmax[o * inner + j];
                            dx[(o * n + i) * inner + j] += g[o * inner + j];
                        }
                    }
                }
            }
            Op::WeightedReduce { x, w, axis, mask } => {
                let (outer, n, inner) = axis_split(self.shape(*x), *axis)?;
                let included = |i: usize| mask.as_ref().is_none_or(|m| m[i]);
                if self.wants(*x) {
                    let wv = self.value(*w);
                    let dx = slot(grads, *x, outer * n * inner);
                    for o in 0..outer {
                        let grow = &g[o * inner..(o + 1) * inner];
                        for i in (0..n).filter(|&i| included(i)) {
                            let dst = &mut dx[(o * n + i) * inner..(o * n + i + 1) * inner];
                            dst.iter_mut().zip(grow).for_each(|(d, g)| *d += wv[i] * g);
                        }
                    }
                }
                if self.wants(*w) {
                    let xv = self.value(*x);
                    let dw = slot(grads, *w, n);
                    for o in 0..outer {
                        let grow = &g[o * inner..(o + 1) * inner];
                        for i in (0..n).filter(|&i| included(i)) {
                            let src = &xv[(o * n + i) * inner..(o * n + i + 1) * inner];
                            dw[i] += src.iter().zip(grow).map(|(x, g)| x * g).sum::<f64>();
                        }
                    }
                }
            }
            &Op::Select { x, axis, index } => {
                if self.wants(x) {
                    let (outer, n, inner) = axis_split(self.shape(x), axis)?;
                    let dx = slot(grads, x, outer * n * inner);
                    for o in 0..outer {
                        add_into(
                            &mut dx[(o * n + index) * inner..(o * n + index + 1) * inner],
                            &g[o * inner..(o + 1) * inner],
                        );
                    }
                }
            }
            Op::Stack { inputs } => {
                let chunk = g.len() / inputs.len();
                for (i, &x) in inputs.iter().enumerate() {
                    if self.wants(x) {
                        accumulate(grads, x, &g[i * chunk..(i + 1) * chunk]);
                    }
                }
            }
            &Op::Reshape { x } => {
                if self.wants(x) {
                    accumulate(grads, x, g);
                }
            }
            Op::Embedding { table, ids } => {
                if self.wants(*table) {
                    let st = self.shape(*table);
                    let h = st[1];
                    let dt = slot(grads, *table, st[0] * h);
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut dt[id * h..(id + 1) * h], &g[r * h..(r + 1) * h]);
                    }
                }
            }
            Op::GatherRows { x, rows } => {
                if self.wants(*x) {
                    let sx = self.shape(*x);
                    let n = sx[1];
                    let dx = slot(grads, *x, sx[0] * n);
                    for (r, &src) in rows.iter().enumerate() {
                        add_into(&mut dx[src * n..(src + 1) * n], &g[r * n..(r + 1) * n]);
                    }
                }
            }
            Op::Dropout { x, scale } => {
                if self.wants(*x) {
                    let dx = slot(grads, *x, g.len());
                    for i in 0..g.len() {
                        dx[i] += g[i] * scale[i];
                    }
                }
            }
            Op::Attention(saved) => self.attention_backward(saved, g, grads),
            Op::CrossEntropy { logits, targets, probs } => {
                if self.wants(*logits) {
                    let c = self.shape(*logits)[1];
                    let n = targets.len() as f64;
                    let dl = slot(grads, *logits, probs.len());
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let y = if j == t { 1.0 } else { 0.0 };
                            dl[r * c + j] += g[0] * (probs[r * c + j] - y) / n;
                        }
                    }
                }
            }
            &Op::Sum { x } => {
                if self.wants(x) {
                    slot(grads, x, self.value(x).len()).iter_mut().for_each(|d| *d += g[0]);
                }
            }
        }
        Ok(())
    }

    fn attention_backward(&self, s: &AttentionSaved, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let h = self.shape(s.q)[1];
        let (seq, heads) = (s.seq, s.heads);
        let dh = h / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(s.q), self.value(s.k), self.value(s.v));
        let total = s.batch * seq * h;
        let mut dq = vec![0.0; total];
        let mut dk = vec![0.0; total];
        let mut dv = vec![0.0; total];
        let mut offset = 0;
        for b in 0..s.batch {
            let kn = s.key_len[b];
            for hd in 0..heads {
                let p = &s.probs[offset..offset + seq * kn];
                offset += seq * kn;
                let go = head_block(g, b, hd, seq, seq, h, dh);
                let qh = head_block(qv, b, hd, seq, seq, h, dh);
                let kh = head_block(kv, b, hd, seq, kn, h, dh);
                let vh = head_block(vv, b, hd, seq, kn, h, dh);
                // dV = Pᵀ dO
                let mut dvh = vec![0.0; kn * dh];
                kernels::matmul_at_acc(p, &go, &mut dvh, seq, kn, dh);
                // dP = dO Vᵀ, then through the row softmax
                let mut ds = vec![0.0; seq * kn];
                kernels::matmul_bt_acc(&go, &vh, &mut ds, seq, dh, kn);
                for (drow, prow) in ds.chunks_mut(kn).zip(p.chunks(kn)) {
                    let dot: f64 = drow.iter().zip(prow).map(|(d, p)| d * p).sum();
                    drow.iter_mut().zip(prow).for_each(|(d, p)| *d = p * (*d - dot) * scale);
                }
                let dqh = kernels::matmul(&ds, &kh, seq, kn, dh);
                let mut dkh = vec![0.0; kn * dh];
                kernels::matmul_at_acc(&ds, &qh, &mut dkh, seq, kn, dh);
                scatter_head_block(&mut dq, &dqh, b, hd, seq, seq, h, dh);
                scatter_head_block(&mut dk, &dkh, b, hd, seq, kn, h, dh);
                scatter_head_block(&mut dv, &dvh, b, hd, seq, kn, h, dh);
            }
        }
        for (x, d) in [(s.q, dq), (s.k, dk), (s.v, dv)] {
            if self.wants(x) {
                match &mut grads[x.0] {
                    Some(acc) => add_into(acc, &d),
                    empty => *empty = Some(d),
                }
            }
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }
}

fn check_mask(mask: Option<&[bool]>, n: usize) -> Result<()> {
    if let Some(m) = mask {
        if m.len() != n {
            return Err(dim_err(format!("mask of length {} over axis of length {n}", m.len())));
        }
        if !m.iter().any(|&b| b) {
            return Err(Error::InvalidMask("mask excludes every position".into()));
        }
    }
    Ok(())
}

fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], v: Var, len: usize) -> &'a mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

/// Adds `src` to the gradient of `v`, copying it when no gradient exists yet.
fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, src: &[f64]) {
    match &mut grads[v.0] {
        Some(acc) => add_into(acc, src),
        empty => *empty = Some(src.to_vec()),
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// Rows `0..rows` of head `hd` for sequence `b`, as a `rows × dh` block.
fn head_block(x: &[f64], b: usize, hd: usize, seq: usize, rows: usize, h: usize, dh: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * dh);
    for s in 0..rows {
        let start = (b * seq + s) * h + hd * dh;
        out.extend_from_slice(&x[start..start + dh]);
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn scatter_head_block(dst: &mut [f64], src: &[f64], b: usize, hd: usize, seq: usize, rows: usize, h: usize, dh: usize) {
    for s in 0..rows {
        let start = (b * seq + s) * h + hd * dh;
        dst[start..start + dh].copy_from_slice(&src[s * dh..(s + 1) * dh]);
    }
}
