//! Define-by-run computation graph. Each training step builds a fresh tape;
//! `backward` walks it in reverse creation order, which is already a valid
//! topological order.

use super::params::{ParamId, ParamStore};
use super::shape::{broadcast_offset, broadcast_shapes, unravel};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale(f64),
    AddScalar,
    Matmul,
    Conv1d,
    AvgPool2,
    Upsample2,
    LayerNorm,
    GroupNorm { groups: usize },
    Softmax,
    Sdpa { heads: usize },
    Silu,
    Gelu,
    Mish,
    Embedding { ids: Vec<usize> },
    Concat { axis: usize },
    Slice { axis: usize, start: usize },
    Sum,
    Mean,
    MeanAxis { axis: usize },
    MseLoss,
    Reshape,
}

#[derive(Debug, Clone)]
enum Aux {
    None,
    /// Per-row (or per-group) mean and 1/std cached by the normalization ops.
    Norm { mean: Vec<f64>, inv_std: Vec<f64> },
    /// Attention probabilities cached by scaled dot-product attention,
    /// laid out as [batch, heads, rows, cols].
    Attn { probs: Vec<f64> },
}

struct Node {
    op: Op,
    inputs: Vec<usize>,
    value: Tensor,
    aux: Aux,
    param: Option<ParamId>,
}

/// Gradient buffers produced by [`Graph::backward`].
pub struct Gradients {
    node_grads: Vec<Option<Tensor>>,
    param_nodes: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. an arbitrary graph node, if it was reached.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.node_grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients aligned with `store`, zero-filled for parameters the loss
    /// never reached.
    pub fn by_param(&self, store: &ParamStore) -> Vec<Tensor> {
        let mut out: Vec<Tensor> =
            store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        for &(pid, node) in &self.param_nodes {
            if let Some(g) = &self.node_grads[node] {
                let acc = &mut out[pid.index()];
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
        }
        out
    }
}

/// A define-by-run tape of tensor operations.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_nodes: Vec<(ParamId, usize)>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, inputs: Vec<usize>, value: Tensor, aux: Aux) -> Var {
        self.nodes.push(Node { op, inputs, value, aux, param: None });
        Var(self.nodes.len() - 1)
    }

    /// Insert a constant input (no parameter tracking).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, vec![], t, Aux::None)
    }

    /// Insert a parameter leaf; its gradient is retrievable per [`ParamId`].
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let v = self.push(Op::Leaf, vec![], store.value(id).clone(), Aux::None);
        self.nodes[v.0].param = Some(id);
        self.param_nodes.push((id, v.0));
        v
    }

    // ---- elementwise / broadcasting -------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binop(Op::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binop(Op::Sub, a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binop(Op::Mul, a, b, |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.nodes[a.0].value.map(|x| x * c);
        self.push(Op::Scale(c), vec![a.0], value, Aux::None)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.nodes[a.0].value.map(|x| x + c);
        self.push(Op::AddScalar, vec![a.0], value, Aux::None)
    }

    fn binop(&mut self, op: Op, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let out_shape = broadcast_shapes(ta.shape(), tb.shape())?;
        let value = if ta.shape() == out_shape.as_slice() && tb.shape() == out_shape.as_slice() {
            // fast path: no broadcasting
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::from_vec(out_shape, data)?
        } else {
            let n: usize = out_shape.iter().product();
            let mut data = vec![0.0; n];
            let mut coords = vec![0usize; out_shape.len()];
            for (flat, slot) in data.iter_mut().enumerate() {
                unravel(flat, &out_shape, &mut coords);
                let x = ta.data()[broadcast_offset(&coords, ta.shape())];
                let y = tb.data()[broadcast_offset(&coords, tb.shape())];
                *slot = f(x, y);
            }
            Tensor::from_vec(out_shape, data)?
        };
        Ok(self.push(op, vec![a.0, b.0], value, Aux::None))
    }

    // ---- activations ------------------------------------------------------

    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(silu);
        self.push(Op::Silu, vec![a.0], value, Aux::None)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(gelu);
        self.push(Op::Gelu, vec![a.0], value, Aux::None)
    }

    pub fn mish(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(mish);
        self.push(Op::Mish, vec![a.0], value, Aux::None)
    }

    // ---- linear algebra ---------------------------------------------------

    /// `a` of shape `[.., k]` times `b` of shape `[k, n]`; leading axes of `a`
    /// are treated as a flat batch of rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if tb.shape().len() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "matmul rhs must be rank 2, got {:?}",
                tb.shape()
            )));
        }
        let (k, n) = (tb.shape()[0], tb.shape()[1]);
        let a_shape = ta.shape();
        if a_shape.is_empty() || *a_shape.last().unwrap() != k {
            return Err(Error::ShapeMismatch(format!(
                "matmul: lhs {:?} incompatible with rhs {:?}",
                a_shape,
                tb.shape()
            )));
        }
        let m = ta.numel() / k;
        let mut out = vec![0.0; m * n];
        matmul_mkn(ta.data(), tb.data(), m, k, n, &mut out);
        let mut out_shape = a_shape[..a_shape.len() - 1].to_vec();
        out_shape.push(n);
        let value = Tensor::from_vec(out_shape, out)?;
        Ok(self.push(Op::Matmul, vec![a.0, b.0], value, Aux::None))
    }

    /// Fully connected layer: `matmul(x, w) + b` with `b` broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add(y, b)
    }

    // ---- convolution / resampling ------------------------------------------

    /// 1-D convolution over the middle (time) axis with stride 1 and "same"
    /// zero padding. `x: [B, L, Cin]`, `w: [Cout, Cin, K]`, `b: [Cout]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) =
            (&self.nodes[x.0].value, &self.nodes[w.0].value, &self.nodes[b.0].value);
        let xs = tx.shape();
        let ws = tw.shape();
        if xs.len() != 3 || ws.len() != 3 {
            return Err(Error::ShapeMismatch(format!(
                "conv1d expects x [B,L,Cin] and w [Cout,Cin,K], got {:?} and {:?}",
                xs, ws
            )));
        }
        let (bsz, len, cin) = (xs[0], xs[1], xs[2]);
        let (cout, wcin, k) = (ws[0], ws[1], ws[2]);
        if cin != wcin || tb.shape() != [cout] || k % 2 == 0 {
            return Err(Error::ShapeMismatch(format!(
                "conv1d: x {:?}, w {:?}, b {:?} (kernel must be odd)",
                xs,
                ws,
                tb.shape()
            )));
        }
        let half = k / 2;
        let mut out = vec![0.0; bsz * len * cout];
        for bi in 0..bsz {
            let xb = &tx.data()[bi * len * cin..(bi + 1) * len * cin];
            let ob = &mut out[bi * len * cout..(bi + 1) * len * cout];
            for l in 0..len {
                let orow = &mut ob[l * cout..(l + 1) * cout];
                for (co, slot) in orow.iter_mut().enumerate() {
                    let wrow = &tw.data()[co * cin * k..(co + 1) * cin * k];
                    let mut acc = tb.data()[co];
                    for kk in 0..k {
                        let src = l as isize + kk as isize - half as isize;
                        if src < 0 || src >= len as isize {
                            continue;
                        }
                        let xrow = &xb[src as usize * cin..(src as usize + 1) * cin];
                        for ci in 0..cin {
                            acc += xrow[ci] * wrow[ci * k + kk];
                        }
                    }
                    *slot = acc;
                }
            }
        }
        let value = Tensor::from_vec(vec![bsz, len, cout], out)?;
        Ok(self.push(Op::Conv1d, vec![x.0, w.0, b.0], value, Aux::None))
    }

    /// Halve the time axis of `[B, L, C]` by averaging adjacent pairs.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let xs = tx.shape();
        if xs.len() != 3 || xs[1] % 2 != 0 {
            return Err(Error::ShapeMismatch(format!(
                "avg_pool2 expects [B, even L, C], got {:?}",
                xs
            )));
        }
        let (bsz, len, c) = (xs[0], xs[1], xs[2]);
        let mut out = vec![0.0; bsz * (len / 2) * c];
        for bi in 0..bsz {
            for l in 0..len / 2 {
                for ci in 0..c {
                    let a = tx.data()[(bi * len + 2 * l) * c + ci];
                    let b = tx.data()[(bi * len + 2 * l + 1) * c + ci];
                    out[(bi * (len / 2) + l) * c + ci] = 0.5 * (a + b);
                }
            }
        }
        let value = Tensor::from_vec(vec![bsz, len / 2, c], out)?;
        Ok(self.push(Op::AvgPool2, vec![x.0], value, Aux::None))
    }

    /// Double the time axis of `[B, L, C]` by nearest-neighbor repetition.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let xs = tx.shape();
        if xs.len() != 3 {
            return Err(Error::ShapeMismatch(format!("upsample2 expects [B,L,C], got {:?}", xs)));
        }
        let (bsz, len, c) = (xs[0], xs[1], xs[2]);
        let mut out = vec![0.0; bsz * len * 2 * c];
        for bi in 0..bsz {
            for l in 0..len {
                let row = &tx.data()[(bi * len + l) * c..(bi * len + l + 1) * c];
                out[(bi * 2 * len + 2 * l) * c..(bi * 2 * len + 2 * l + 1) * c]
                    .copy_from_slice(row);
                out[(bi * 2 * len + 2 * l + 1) * c..(bi * 2 * len + 2 * l + 2) * c]
                    .copy_from_slice(row);
            }
        }
        let value = Tensor::from_vec(vec![bsz, 2 * len, c], out)?;
        Ok(self.push(Op::Upsample2, vec![x.0], value, Aux::None))
    }

    // ---- normalization ------------------------------------------------------

    /// Layer normalization over the last axis, without affine parameters.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let xs = tx.shape().to_vec();
        let c = *xs
            .last()
            .ok_or_else(|| Error::ShapeMismatch("layer_norm on rank-0 tensor".into()))?;
        let rows = tx.numel() / c;
        let mut out = vec![0.0; tx.numel()];
        let mut means = vec![0.0; rows];
        let mut inv_stds = vec![0.0; rows];
        for r in 0..rows {
            let src = &tx.data()[r * c..(r + 1) * c];
            let mean = src.iter().sum::<f64>() / c as f64;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            means[r] = mean;
            inv_stds[r] = inv;
            for (o, &v) in out[r * c..(r + 1) * c].iter_mut().zip(src) {
                *o = (v - mean) * inv;
            }
        }
        let value = Tensor::from_vec(xs, out)?;
        Ok(self.push(
            Op::LayerNorm,
            vec![x.0],
            value,
            Aux::Norm { mean: means, inv_std: inv_stds },
        ))
    }

    /// Group normalization of `[B, L, C]` over (time x channels-in-group),
    /// without affine parameters.
    pub fn group_norm(&mut self, x: Var, groups: usize, eps: f64) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let xs = tx.shape();
        if xs.len() != 3 {
            return Err(Error::ShapeMismatch(format!("group_norm expects [B,L,C], got {:?}", xs)));
        }
        let (bsz, len, c) = (xs[0], xs[1], xs[2]);
        if groups == 0 || c % groups != 0 {
            return Err(Error::ShapeMismatch(format!(
                "group_norm: {} channels not divisible by {} groups",
                c, groups
            )));
        }
        let gc = c / groups;
        let mut out = vec![0.0; tx.numel()];
        let mut means = vec![0.0; bsz * groups];
        let mut inv_stds = vec![0.0; bsz * groups];
        for bi in 0..bsz {
            for g in 0..groups {
                let mut sum = 0.0;
                let mut sq = 0.0;
                for l in 0..len {
                    for j in 0..gc {
                        let v = tx.data()[(bi * len + l) * c + g * gc + j];
                        sum += v;
                        sq += v * v;
                    }
                }
                let n = (len * gc) as f64;
                let mean = sum / n;
                let var = sq / n - mean * mean;
                let inv = 1.0 / (var.max(0.0) + eps).sqrt();
                means[bi * groups + g] = mean;
                inv_stds[bi * groups + g] = inv;
                for l in 0..len {
                    for j in 0..gc {
                        let idx = (bi * len + l) * c + g * gc + j;
                        out[idx] = (tx.data()[idx] - mean) * inv;
                    }
                }
            }
        }
        let value = Tensor::from_vec(xs.to_vec(), out)?;
        Ok(self.push(
            Op::GroupNorm { groups },
            vec![x.0],
            value,
            Aux::Norm { mean: means, inv_std: inv_stds },
        ))
    }

    // ---- softmax / attention -------------------------------------------------

    /// Numerically stable softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let xs = tx.shape().to_vec();
        let c = *xs
            .last()
            .ok_or_else(|| Error::ShapeMismatch("softmax on rank-0 tensor".into()))?;
        let rows = tx.numel() / c;
        let mut out = vec![0.0; tx.numel()];
        for r in 0..rows {
            softmax_row(&tx.data()[r * c..(r + 1) * c], &mut out[r * c..(r + 1) * c]);
        }
        let value = Tensor::from_vec(xs, out)?;
        Ok(self.push(Op::Softmax, vec![x.0], value, Aux::None))
    }

    /// Multi-head scaled dot-product attention. `q`, `k`, `v` are
    /// `[B, L, E]` with `E` divisible by `heads`; heads are contiguous column
    /// blocks. Attention probabilities are cached and retrievable through
    /// [`Graph::attention_probs`].
    pub fn sdpa(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (tq, tk, tv) =
            (&self.nodes[q.0].value, &self.nodes[k.0].value, &self.nodes[v.0].value);
        let qs = tq.shape();
        if qs.len() != 3 || tk.shape() != qs || tv.shape() != qs {
            return Err(Error::ShapeMismatch(format!(
                "sdpa expects equal [B,L,E] inputs, got {:?} {:?} {:?}",
                qs,
                tk.shape(),
                tv.shape()
            )));
        }
        let (bsz, len, e) = (qs[0], qs[1], qs[2]);
        if heads == 0 || e % heads != 0 {
            return Err(Error::ShapeMismatch(format!(
                "sdpa: embed dim {} not divisible by {} heads",
                e, heads
            )));
        }
        let dh = e / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = vec![0.0; bsz * len * e];
        let mut probs = vec![0.0; bsz * heads * len * len];
        let mut qh = vec![0.0; len * dh];
        let mut kh = vec![0.0; len * dh];
        let mut vh = vec![0.0; len * dh];
        let mut scores = vec![0.0; len * len];
        for bi in 0..bsz {
            for h in 0..heads {
                gather_head(tq.data(), &mut qh, bi, h, len, e, dh);
                gather_head(tk.data(), &mut kh, bi, h, len, e, dh);
                gather_head(tv.data(), &mut vh, bi, h, len, e, dh);
                // scores = q kᵀ * scale
                for i in 0..len {
                    for j in 0..len {
                        let mut s = 0.0;
                        for d in 0..dh {
                            s += qh[i * dh + d] * kh[j * dh + d];
                        }
                        scores[i * len + j] = s * scale;
                    }
                }
                let pslice = &mut probs[(bi * heads + h) * len * len..][..len * len];
                for i in 0..len {
                    softmax_row(&scores[i * len..(i + 1) * len], &mut pslice[i * len..(i + 1) * len]);
                }
                // out_h = probs @ v_h, scattered back into column block h
                for i in 0..len {
                    let orow = &mut out[(bi * len + i) * e + h * dh..][..dh];
                    for j in 0..len {
                        let p = pslice[i * len + j];
                        let vrow = &vh[j * dh..(j + 1) * dh];
                        for d in 0..dh {
                            orow[d] += p * vrow[d];
                        }
                    }
                }
            }
        }
        let value = Tensor::from_vec(vec![bsz, len, e], out)?;
        Ok(self.push(Op::Sdpa { heads }, vec![q.0, k.0, v.0], value, Aux::Attn { probs }))
    }

    /// Cached attention probabilities of an `sdpa` output node, shaped
    /// `[B, heads, L, L]`.
    pub fn attention_probs(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        match (&node.op, &node.aux) {
            (Op::Sdpa { heads }, Aux::Attn { probs }) => {
                let shape = node.value.shape();
                let (bsz, len) = (shape[0], shape[1]);
                Tensor::from_vec(vec![bsz, *heads, len, len], probs.clone()).ok()
            }
            _ => None,
        }
    }

    // ---- indexing / shaping ---------------------------------------------------

    /// Row lookup: `table: [V, E]`, fixed ids -> `[ids.len(), E]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = &self.nodes[table.0].value;
        let ts = tt.shape();
        if ts.len() != 2 {
            return Err(Error::ShapeMismatch(format!("embedding table must be [V,E], got {:?}", ts)));
        }
        let (v, e) = (ts[0], ts[1]);
        let mut out = Vec::with_capacity(ids.len() * e);
        for &id in ids {
            if id >= v {
                return Err(Error::Contract(format!("embedding id {} out of range {}", id, v)));
            }
            out.extend_from_slice(&tt.data()[id * e..(id + 1) * e]);
        }
        let value = Tensor::from_vec(vec![ids.len(), e], out)?;
        Ok(self.push(Op::Embedding { ids: ids.to_vec() }, vec![table.0], value, Aux::None))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat of zero tensors".into()));
        }
        let first = self.nodes[parts[0].0].value.shape().to_vec();
        if axis >= first.len() {
            return Err(Error::ShapeMismatch(format!("concat axis {} out of range", axis)));
        }
        let mut axis_total = 0usize;
        for p in parts {
            let s = self.nodes[p.0].value.shape();
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(Error::ShapeMismatch(format!(
                    "concat part {:?} incompatible with {:?} along axis {}",
                    s, first, axis
                )));
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = vec![0.0; out_shape.iter().product()];
        let mut offset = 0usize;
        for p in parts {
            let t = &self.nodes[p.0].value;
            let width = t.shape()[axis] * inner;
            for o in 0..outer {
                let src = &t.data()[o * width..(o + 1) * width];
                let dst_start = o * axis_total * inner + offset;
                out[dst_start..dst_start + width].copy_from_slice(src);
            }
            offset += width;
        }
        let value = Tensor::from_vec(out_shape, out)?;
        Ok(self.push(Op::Concat { axis }, parts.iter().map(|p| p.0).collect(), value, Aux::None))
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let xs = tx.shape();
        if axis >= xs.len() || start + len > xs[axis] {
            return Err(Error::ShapeMismatch(format!(
                "slice {}..{} along axis {} of {:?}",
                start,
                start + len,
                axis,
                xs
            )));
        }
        let outer: usize = xs[..axis].iter().product();
        let inner: usize = xs[axis + 1..].iter().product();
        let mut out_shape = xs.to_vec();
        out_shape[axis] = len;
        let mut out = vec![0.0; outer * len * inner];
        for o in 0..outer {
            let src = &tx.data()[(o * xs[axis] + start) * inner..(o * xs[axis] + start + len) * inner];
            out[o * len * inner..(o + 1) * len * inner].copy_from_slice(src);
        }
        let value = Tensor::from_vec(out_shape, out)?;
        Ok(self.push(Op::Slice { axis, start }, vec![x.0], value, Aux::None))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.nodes[x.0].value.clone().reshaped(shape)?;
        Ok(self.push(Op::Reshape, vec![x.0], value, Aux::None))
    }

    // ---- reductions / losses -----------------------------------------------------

    /// Sum of all elements (rank-0 result).
    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.nodes[x.0].value.data().iter().sum();
        self.push(Op::Sum, vec![x.0], Tensor::scalar(s), Aux::None)
    }

    /// Mean of all elements (rank-0 result).
    pub fn mean(&mut self, x: Var) -> Var {
        let t = &self.nodes[x.0].value;
        let m = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Op::Mean, vec![x.0], Tensor::scalar(m), Aux::None)
    }

    /// Mean along one axis (axis removed from the shape).
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let xs = tx.shape();
        if axis >= xs.len() {
            return Err(Error::ShapeMismatch(format!("mean_axis {} of {:?}", axis, xs)));
        }
        let outer: usize = xs[..axis].iter().product();
        let mid = xs[axis];
        let inner: usize = xs[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for m in 0..mid {
                for i in 0..inner {
                    out[o * inner + i] += tx.data()[(o * mid + m) * inner + i];
                }
            }
        }
        let inv = 1.0 / mid as f64;
        for v in &mut out {
            *v *= inv;
        }
        let mut out_shape = xs.to_vec();
        out_shape.remove(axis);
        let value = Tensor::from_vec(out_shape, out)?;
        Ok(self.push(Op::MeanAxis { axis }, vec![x.0], value, Aux::None))
    }

    /// Mean squared error over all elements (rank-0 result).
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (tp, tt) = (&self.nodes[pred.0].value, &self.nodes[target.0].value);
        if tp.shape() != tt.shape() {
            return Err(Error::ShapeMismatch(format!(
                "mse_loss: {:?} vs {:?}",
                tp.shape(),
                tt.shape()
            )));
        }
        let n = tp.numel() as f64;
        let s: f64 = tp
            .data()
            .iter()
            .zip(tt.data())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum();
        Ok(self.push(Op::MseLoss, vec![pred.0, target.0], Tensor::scalar(s / n), Aux::None))
    }

    // ---- backward ---------------------------------------------------------------

    /// Reverse-mode sweep from a scalar `loss`. Returns gradients for every
    /// reached node; parameters never reached report zeros via
    /// [`Gradients::by_param`].
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss_node.value.shape()
            )));
        }
        // mark ancestors of the loss
        let mut reachable = vec![false; self.nodes.len()];
        let mut stack = vec![loss.0];
        while let Some(i) = stack.pop() {
            if reachable[i] {
                continue;
            }
            reachable[i] = true;
            stack.extend_from_slice(&self.nodes[i].inputs);
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::from_vec(
            loss_node.value.shape().to_vec(),
            vec![1.0],
        )?);

        for i in (0..=loss.0).rev() {
            if !reachable[i] {
                continue;
            }
            let dy = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate_input_grads(i, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        Ok(Gradients { node_grads: grads, param_nodes: self.param_nodes.clone() })
    }

    fn accumulate_input_grads(&self, i: usize, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let input_vals: Vec<&Tensor> = node.inputs.iter().map(|&j| &self.nodes[j].value).collect();
        let contribs: Vec<Tensor> = match &node.op {
            Op::Leaf => vec![],
            Op::Add => {
                let da = reduce_to_shape(dy, input_vals[0].shape());
                let db = reduce_to_shape(dy, input_vals[1].shape());
                vec![da, db]
            }
            Op::Sub => {
                let da = reduce_to_shape(dy, input_vals[0].shape());
                let mut db = reduce_to_shape(dy, input_vals[1].shape());
                for v in db.data_mut() {
                    *v = -*v;
                }
                vec![da, db]
            }
            Op::Mul => {
                let da = mul_then_reduce(dy, input_vals[1], input_vals[0].shape());
                let db = mul_then_reduce(dy, input_vals[0], input_vals[1].shape());
                vec![da, db]
            }
            Op::Scale(c) => vec![dy.map(|v| v * c)],
            Op::AddScalar => vec![dy.clone()],
            Op::Matmul => self.backward_matmul(dy, input_vals[0], input_vals[1]),
            Op::Conv1d => self.backward_conv1d(dy, input_vals[0], input_vals[1]),
            Op::AvgPool2 => {
                let xs = input_vals[0].shape();
                let (bsz, len, c) = (xs[0], xs[1], xs[2]);
                let mut dx = Tensor::zeros(xs);
                for bi in 0..bsz {
                    for l in 0..len / 2 {
                        for ci in 0..c {
                            let g = 0.5 * dy.data()[(bi * (len / 2) + l) * c + ci];
                            dx.data_mut()[(bi * len + 2 * l) * c + ci] += g;
                            dx.data_mut()[(bi * len + 2 * l + 1) * c + ci] += g;
                        }
                    }
                }
                vec![dx]
            }
            Op::Upsample2 => {
                let xs = input_vals[0].shape();
                let (bsz, len, c) = (xs[0], xs[1], xs[2]);
                let mut dx = Tensor::zeros(xs);
                for bi in 0..bsz {
                    for l in 0..len {
                        for ci in 0..c {
                            let g = dy.data()[(bi * 2 * len + 2 * l) * c + ci]
                                + dy.data()[(bi * 2 * len + 2 * l + 1) * c + ci];
                            dx.data_mut()[(bi * len + l) * c + ci] += g;
                        }
                    }
                }
                vec![dx]
            }
            Op::LayerNorm => {
                let (mean, inv_std) = match &node.aux {
                    Aux::Norm { mean, inv_std } => (mean, inv_std),
                    _ => unreachable!(),
                };
                vec![backward_norm_rows(
                    input_vals[0],
                    dy,
                    mean,
                    inv_std,
                    *input_vals[0].shape().last().unwrap(),
                )]
            }
            Op::GroupNorm { groups } => {
                let (mean, inv_std) = match &node.aux {
                    Aux::Norm { mean, inv_std } => (mean, inv_std),
                    _ => unreachable!(),
                };
                vec![backward_group_norm(input_vals[0], dy, mean, inv_std, *groups)]
            }
            Op::Softmax => {
                let y = &node.value;
                let c = *y.shape().last().unwrap();
                let rows = y.numel() / c;
                let mut dx = Tensor::zeros(y.shape());
                for r in 0..rows {
                    let yr = &y.data()[r * c..(r + 1) * c];
                    let gr = &dy.data()[r * c..(r + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..c {
                        dx.data_mut()[r * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                vec![dx]
            }
            Op::Sdpa { heads } => {
                let probs = match &node.aux {
                    Aux::Attn { probs } => probs,
                    _ => unreachable!(),
                };
                self.backward_sdpa(dy, input_vals[0], input_vals[1], input_vals[2], probs, *heads)
            }
            Op::Silu => vec![elemwise_grad(dy, input_vals[0], silu_grad)],
            Op::Gelu => vec![elemwise_grad(dy, input_vals[0], gelu_grad)],
            Op::Mish => vec![elemwise_grad(dy, input_vals[0], mish_grad)],
            Op::Embedding { ids } => {
                let ts = input_vals[0].shape();
                let e = ts[1];
                let mut dt = Tensor::zeros(ts);
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..e {
                        dt.data_mut()[id * e + j] += dy.data()[r * e + j];
                    }
                }
                vec![dt]
            }
            Op::Concat { axis } => {
                let out_shape = node.value.shape();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let axis_total = out_shape[*axis];
                let mut offset = 0usize;
                let mut parts = Vec::with_capacity(input_vals.len());
                for t in &input_vals {
                    let width = t.shape()[*axis] * inner;
                    let mut dp = Tensor::zeros(t.shape());
                    for o in 0..outer {
                        let src = &dy.data()[o * axis_total * inner + offset..][..width];
                        dp.data_mut()[o * width..(o + 1) * width].copy_from_slice(src);
                    }
                    offset += width;
                    parts.push(dp);
                }
                parts
            }
            Op::Slice { axis, start } => {
                let xs = input_vals[0].shape();
                let outer: usize = xs[..*axis].iter().product();
                let inner: usize = xs[*axis + 1..].iter().product();
                let len = node.value.shape()[*axis];
                let mut dx = Tensor::zeros(xs);
                for o in 0..outer {
                    let dst =
                        &mut dx.data_mut()[(o * xs[*axis] + start) * inner..][..len * inner];
                    dst.copy_from_slice(&dy.data()[o * len * inner..(o + 1) * len * inner]);
                }
                vec![dx]
            }
            Op::Sum => {
                let g = dy.item();
                vec![Tensor::full(input_vals[0].shape(), g)]
            }
            Op::Mean => {
                let g = dy.item() / input_vals[0].numel() as f64;
                vec![Tensor::full(input_vals[0].shape(), g)]
            }
            Op::MeanAxis { axis } => {
                let xs = input_vals[0].shape();
                let outer: usize = xs[..*axis].iter().product();
                let mid = xs[*axis];
                let inner: usize = xs[*axis + 1..].iter().product();
                let inv = 1.0 / mid as f64;
                let mut dx = Tensor::zeros(xs);
                for o in 0..outer {
                    for m in 0..mid {
                        for j in 0..inner {
                            dx.data_mut()[(o * mid + m) * inner + j] =
                                dy.data()[o * inner + j] * inv;
                        }
                    }
                }
                vec![dx]
            }
            Op::MseLoss => {
                let g = dy.item();
                let n = input_vals[0].numel() as f64;
                let mut da = Tensor::zeros(input_vals[0].shape());
                let mut db = Tensor::zeros(input_vals[1].shape());
                for ((a, b), (ga, gb)) in input_vals[0]
                    .data()
                    .iter()
                    .zip(input_vals[1].data())
                    .zip(da.data_mut().iter_mut().zip(db.data_mut().iter_mut()))
                {
                    let d = 2.0 * (a - b) * g / n;
                    *ga = d;
                    *gb = -d;
                }
                vec![da, db]
            }
            Op::Reshape => {
                vec![dy
                    .clone()
                    .reshaped(input_vals[0].shape().to_vec())
                    .expect("reshape backward")]
            }
        };
        for (j, contrib) in node.inputs.iter().zip(contribs) {
            match &mut grads[*j] {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(contrib.data()) {
                        *a += b;
                    }
                }
                slot => *slot = Some(contrib),
            }
        }
    }

    fn backward_matmul(&self, dy: &Tensor, a: &Tensor, b: &Tensor) -> Vec<Tensor> {
        let (k, n) = (b.shape()[0], b.shape()[1]);
        let m = a.numel() / k;
        let mut da = Tensor::zeros(a.shape());
        let mut db = Tensor::zeros(b.shape());
        // da = dy bᵀ
        for i in 0..m {
            let dyr = &dy.data()[i * n..(i + 1) * n];
            let dar = &mut da.data_mut()[i * k..(i + 1) * k];
            for (p, slot) in dar.iter_mut().enumerate() {
                let br = &b.data()[p * n..(p + 1) * n];
                let mut s = 0.0;
                for j in 0..n {
                    s += dyr[j] * br[j];
                }
                *slot = s;
            }
        }
        // db = aᵀ dy
        for i in 0..m {
            let ar = &a.data()[i * k..(i + 1) * k];
            let dyr = &dy.data()[i * n..(i + 1) * n];
            for (p, &aip) in ar.iter().enumerate() {
                let dbr = &mut db.data_mut()[p * n..(p + 1) * n];
                for j in 0..n {
                    dbr[j] += aip * dyr[j];
                }
            }
        }
        vec![da, db]
    }

    fn backward_conv1d(&self, dy: &Tensor, x: &Tensor, w: &Tensor) -> Vec<Tensor> {
        let xs = x.shape();
        let ws = w.shape();
        let (bsz, len, cin) = (xs[0], xs[1], xs[2]);
        let (cout, _, k) = (ws[0], ws[1], ws[2]);
        let half = k / 2;
        let mut dx = Tensor::zeros(xs);
        let mut dw = Tensor::zeros(ws);
        let mut db = Tensor::zeros(&[cout]);
        for bi in 0..bsz {
            for l in 0..len {
                let dyr = &dy.data()[(bi * len + l) * cout..(bi * len + l + 1) * cout];
                for co in 0..cout {
                    let g = dyr[co];
                    if g == 0.0 {
                        continue;
                    }
                    db.data_mut()[co] += g;
                    let wrow = &w.data()[co * cin * k..(co + 1) * cin * k];
                    for kk in 0..k {
                        let src = l as isize + kk as isize - half as isize;
                        if src < 0 || src >= len as isize {
                            continue;
                        }
                        let xoff = (bi * len + src as usize) * cin;
                        for ci in 0..cin {
                            dx.data_mut()[xoff + ci] += g * wrow[ci * k + kk];
                        }
                    }
                }
                // dw accumulation in a second pass over kernel taps
                for kk in 0..k {
                    let src = l as isize + kk as isize - half as isize;
                    if src < 0 || src >= len as isize {
                        continue;
                    }
                    let xrow = &x.data()[(bi * len + src as usize) * cin..][..cin];
                    for co in 0..cout {
                        let g = dyr[co];
                        if g == 0.0 {
                            continue;
                        }
                        let dwrow = &mut dw.data_mut()[co * cin * k..][..cin * k];
                        for ci in 0..cin {
                            dwrow[ci * k + kk] += g * xrow[ci];
                        }
                    }
                }
            }
        }
        vec![dx, dw, db]
    }

    fn backward_sdpa(
        &self,
        dy: &Tensor,
        q: &Tensor,
        k: &Tensor,
        v: &Tensor,
        probs: &[f64],
        heads: usize,
    ) -> Vec<Tensor> {
        let qs = q.shape();
        let (bsz, len, e) = (qs[0], qs[1], qs[2]);
        let dh = e / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = Tensor::zeros(qs);
        let mut dk = Tensor::zeros(qs);
        let mut dv = Tensor::zeros(qs);
        let mut qh = vec![0.0; len * dh];
        let mut kh = vec![0.0; len * dh];
        let mut vh = vec![0.0; len * dh];
        let mut doh = vec![0.0; len * dh];
        let mut da = vec![0.0; len * len];
        let mut ds = vec![0.0; len * len];
        for bi in 0..bsz {
            for h in 0..heads {
                gather_head(q.data(), &mut qh, bi, h, len, e, dh);
                gather_head(k.data(), &mut kh, bi, h, len, e, dh);
                gather_head(v.data(), &mut vh, bi, h, len, e, dh);
                gather_head(dy.data(), &mut doh, bi, h, len, e, dh);
                let p = &probs[(bi * heads + h) * len * len..][..len * len];
                // dV_h = Pᵀ dO_h ; dA = dO_h V_hᵀ
                for i in 0..len {
                    for j in 0..len {
                        let mut s = 0.0;
                        for d in 0..dh {
                            s += doh[i * dh + d] * vh[j * dh + d];
                        }
                        da[i * len + j] = s;
                    }
                }
                for i in 0..len {
                    let pi = &p[i * len..(i + 1) * len];
                    let dai = &da[i * len..(i + 1) * len];
                    let dot: f64 = pi.iter().zip(dai).map(|(&a, &b)| a * b).sum();
                    for j in 0..len {
                        ds[i * len + j] = pi[j] * (dai[j] - dot) * scale;
                    }
                }
                for bi_out in 0..len {
                    // dq_h[i] = Σ_j ds[i,j] k_h[j]; dk_h[j] = Σ_i ds[i,j] q_h[i]
                    let dqrow =
                        &mut dq.data_mut()[(bi * len + bi_out) * e + h * dh..][..dh];
                    for j in 0..len {
                        let s = ds[bi_out * len + j];
                        for d in 0..dh {
                            dqrow[d] += s * kh[j * dh + d];
                        }
                    }
                }
                for j in 0..len {
                    let dkrow = &mut dk.data_mut()[(bi * len + j) * e + h * dh..][..dh];
                    for i in 0..len {
                        let s = ds[i * len + j];
                        for d in 0..dh {
                            dkrow[d] += s * qh[i * dh + d];
                        }
                    }
                    let dvrow = &mut dv.data_mut()[(bi * len + j) * e + h * dh..][..dh];
                    for i in 0..len {
                        let pij = p[i * len + j];
                        for d in 0..dh {
                            dvrow[d] += pij * doh[i * dh + d];
                        }
                    }
                }
            }
        }
        vec![dq, dk, dv]
    }
}

// ── scalar activation kernels ──────────────────────────────────────────

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s + x * s * (1.0 - s)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn mish(x: f64) -> f64 {
    x * softplus(x).tanh()
}

fn mish_grad(x: f64) -> f64 {
    let sp = softplus(x);
    let t = sp.tanh();
    t + x * (1.0 - t * t) * sigmoid(x)
}

fn softmax_row(src: &[f64], dst: &mut [f64]) {
    let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (d, &s) in dst.iter_mut().zip(src) {
        let e = (s - max).exp();
        *d = e;
        sum += e;
    }
    let inv = 1.0 / sum;
    for d in dst.iter_mut() {
        *d *= inv;
    }
}

// ── helpers ─────────────────────────────────────────────────────────────

fn matmul_mkn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += aip * brow[j];
            }
        }
    }
}

fn gather_head(src: &[f64], dst: &mut [f64], b: usize, h: usize, len: usize, e: usize, dh: usize) {
    for l in 0..len {
        let off = (b * len + l) * e + h * dh;
        dst[l * dh..(l + 1) * dh].copy_from_slice(&src[off..off + dh]);
    }
}

fn elemwise_grad(dy: &Tensor, x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let data = dy
        .data()
        .iter()
        .zip(x.data())
        .map(|(&g, &v)| g * f(v))
        .collect();
    Tensor::from_vec(x.shape().to_vec(), data).expect("elemwise grad shape")
}

/// Sum `dy` over broadcast axes so it matches `target` shape.
fn reduce_to_shape(dy: &Tensor, target: &[usize]) -> Tensor {
    if dy.shape() == target {
        return dy.clone();
    }
    let mut out = Tensor::zeros(target);
    let nd = dy.shape().len();
    let mut coords = vec![0usize; nd];
    for flat in 0..dy.numel() {
        unravel(flat, dy.shape(), &mut coords);
        let off = broadcast_offset(&coords, target);
        out.data_mut()[off] += dy.data()[flat];
    }
    out
}

/// Elementwise multiply `dy` by the broadcast `other`, then reduce to `target`.
fn mul_then_reduce(dy: &Tensor, other: &Tensor, target: &[usize]) -> Tensor {
    if dy.shape() == other.shape() && dy.shape() == target {
        let data = dy.data().iter().zip(other.data()).map(|(&a, &b)| a * b).collect();
        return Tensor::from_vec(target.to_vec(), data).expect("mul grad shape");
    }
    let mut out = Tensor::zeros(target);
    let nd = dy.shape().len();
    let mut coords = vec![0usize; nd];
    for flat in 0..dy.numel() {
        unravel(flat, dy.shape(), &mut coords);
        let o = other.data()[broadcast_offset(&coords, other.shape())];
        let t = broadcast_offset(&coords, target);
        out.data_mut()[t] += dy.data()[flat] * o;
    }
    out
}

/// Shared layer-norm backward over independent rows of width `c`.
fn backward_norm_rows(x: &Tensor, dy: &Tensor, mean: &[f64], inv_std: &[f64], c: usize) -> Tensor {
    let rows = x.numel() / c;
    let mut dx = Tensor::zeros(x.shape());
    for r in 0..rows {
        let xr = &x.data()[r * c..(r + 1) * c];
        let gr = &dy.data()[r * c..(r + 1) * c];
        let (m, is) = (mean[r], inv_std[r]);
        let mut g_sum = 0.0;
        let mut gx_sum = 0.0;
        for j in 0..c {
            let xc = (xr[j] - m) * is;
            g_sum += gr[j];
            gx_sum += gr[j] * xc;
        }
        let n = c as f64;
        for j in 0..c {
            let xc = (xr[j] - m) * is;
            dx.data_mut()[r * c + j] = is * (gr[j] - g_sum / n - xc * gx_sum / n);
        }
    }
    dx
}

fn backward_group_norm(
    x: &Tensor,
    dy: &Tensor,
    mean: &[f64],
    inv_std: &[f64],
    groups: usize,
) -> Tensor {
    let xs = x.shape();
    let (bsz, len, c) = (xs[0], xs[1], xs[2]);
    let gc = c / groups;
    let n = (len * gc) as f64;
    let mut dx = Tensor::zeros(xs);
    for bi in 0..bsz {
        for g in 0..groups {
            let (m, is) = (mean[bi * groups + g], inv_std[bi * groups + g]);
            let mut g_sum = 0.0;
            let mut gx_sum = 0.0;
            for l in 0..len {
                for j in 0..gc {
                    let idx = (bi * len + l) * c + g * gc + j;
                    let xc = (x.data()[idx] - m) * is;
                    g_sum += dy.data()[idx];
                    gx_sum += dy.data()[idx] * xc;
                }
            }
            for l in 0..len {
                for j in 0..gc {
                    let idx = (bi * len + l) * c + g * gc + j;
                    let xc = (x.data()[idx] - m) * is;
                    dx.data_mut()[idx] =
                        is * (dy.data()[idx] - g_sum / n - xc * gx_sum / n);
                }
            }
        }
    }
    dx
}
