//! Tape-style reverse-mode autodiff.
//!
//! A [`Graph`] is rebuilt on every forward pass. Each op appends a node whose
//! inputs precede it, so insertion order is a topological order and
//! [`Graph::backward`] is a single reverse sweep. Index order for every op is
//! row-major over the documented shapes.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{shape_err, Error, Result};
use crate::kernels::{self, MacTag};
use crate::tensor::Tensor;

static NEXT_GRAPH: AtomicU64 = AtomicU64::new(1);

/// Handle to a node of one particular graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId {
    graph: u64,
    index: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Bmm { a: usize, b: usize, batch: usize, m: usize, k: usize, n: usize, trans_b: bool },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    AddBias { x: usize, b: usize, d: usize },
    AddChannel { x: usize, v: usize, c: usize, hw: usize },
    Scale { x: usize, c: f64 },
    Sum { x: usize },
    Mean { x: usize },
    Softmax { x: usize, outer: usize, len: usize, inner: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, d: usize, mean: Vec<f64>, rstd: Vec<f64> },
    Conv1x1 { x: usize, w: usize, b: usize, cin: usize, cout: usize, hw: usize },
    Conv3x3 { x: usize, w: usize, b: usize, cin: usize, cout: usize, h: usize, wd: usize, stride: usize },
    Silu { x: usize },
    Permute { x: usize, inverse: Vec<usize> },
    Reshape { x: usize },
    Concat { xs: Vec<(usize, usize)>, outer: usize, inner: usize, total: usize },
    Slice { x: usize, outer: usize, len_in: usize, start: usize, len: usize, inner: usize },
    Upsample2x { x: usize, c: usize, h: usize, w: usize },
    Tile { x: usize, n: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only computation tape.
pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..data.len() {
        out.push(data[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Graph {
    pub fn new() -> Self {
        Self { id: NEXT_GRAPH.fetch_add(1, Ordering::Relaxed), nodes: Vec::new(), leaf_grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, id: NodeId) -> Result<usize> {
        if id.graph != self.id || id.index >= self.nodes.len() {
            return Err(Error::DetachedGraph);
        }
        Ok(id.index)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[usize]) -> NodeId {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        self.leaf_grads.push(None);
        NodeId { graph: self.id, index: self.nodes.len() - 1 }
    }

    fn make(shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).expect("op produced inconsistent shape")
    }

    /// Binds a tensor as a leaf; it is differentiable iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        let rg = t.requires_grad();
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad: rg });
        self.leaf_grads.push(None);
        NodeId { graph: self.id, index: self.nodes.len() - 1 }
    }

    pub fn param(&mut self, t: Tensor) -> NodeId {
        self.leaf(t.with_requires_grad(true))
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        let i = self.idx(id).expect("node from another graph");
        &self.nodes[i].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.value(id).shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.idx(id).map(|i| self.nodes[i].requires_grad).unwrap_or(false)
    }

    /// Accumulated gradient of a leaf, if backward has reached it.
    pub fn grad(&self, id: NodeId) -> Option<Tensor> {
        let i = self.idx(id).ok()?;
        let g = self.leaf_grads[i].as_ref()?;
        Some(Self::make(self.nodes[i].value.shape(), g.clone()))
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    // ---- linear algebra ----

    /// `[m,k] · [k,n] -> [m,n]`
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (sa, sb) = (self.nodes[ia].value.shape(), self.nodes[ib].value.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::matmul_nn(self.nodes[ia].value.data(), self.nodes[ib].value.data(), &mut out, m, k, n);
        Ok(self.push(Self::make(&[m, n], out), Op::MatMul { a: ia, b: ib, m, k, n }, &[ia, ib]))
    }

    /// Batched product `[B,m,k] · [B,k,n]`, or `[B,m,k] · [B,n,k]ᵀ` when
    /// `trans_b` is set.
    pub fn bmm(&mut self, a: NodeId, b: NodeId, trans_b: bool) -> Result<NodeId> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (sa, sb) = (self.nodes[ia].value.shape(), self.nodes[ib].value.shape());
        let ok =
            sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] && if trans_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(shape_err("bmm", format!("{sa:?} x {sb:?} (trans_b={trans_b})")));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let mut out = vec![0.0; batch * m * n];
        kernels::bmm(self.nodes[ia].value.data(), self.nodes[ib].value.data(), &mut out, batch, m, k, n, trans_b);
        Ok(self.push(Self::make(&[batch, m, n], out), Op::Bmm { a: ia, b: ib, batch, m, k, n, trans_b }, &[ia, ib]))
    }

    pub(crate) fn bmm_tagged(&mut self, a: NodeId, b: NodeId, trans_b: bool, tag: MacTag) -> Result<NodeId> {
        kernels::tagged(tag, || self.bmm(a, b, trans_b))
    }

    // ---- elementwise ----

    fn binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        name: &'static str,
        f: fn(f64, f64) -> f64,
    ) -> Result<(usize, usize, Tensor)> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let v = self.nodes[ia].value.zip_map(&self.nodes[ib].value, f).map_err(|_| {
            shape_err(name, format!("{:?} vs {:?}", self.nodes[ia].value.shape(), self.nodes[ib].value.shape()))
        })?;
        Ok((ia, ib, v))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ia, ib, v) = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(v, Op::Add { a: ia, b: ib }, &[ia, ib]))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ia, ib, v) = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(v, Op::Sub { a: ia, b: ib }, &[ia, ib]))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ia, ib, v) = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul { a: ia, b: ib }, &[ia, ib]))
    }

    /// `x[..., d] + b[d]`
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (ix, ib) = (self.idx(x)?, self.idx(b)?);
        let sx = self.nodes[ix].value.shape();
        let sb = self.nodes[ib].value.shape();
        let d = *sx.last().unwrap();
        if sb != [d] {
            return Err(shape_err("add_bias", format!("{sx:?} + {sb:?}")));
        }
        let bias = self.nodes[ib].value.data();
        let out: Vec<f64> = self.nodes[ix].value.data().iter().enumerate().map(|(i, &v)| v + bias[i % d]).collect();
        let shape = sx.to_vec();
        Ok(self.push(Self::make(&shape, out), Op::AddBias { x: ix, b: ib, d }, &[ix, ib]))
    }

    /// `x[C,H,W] + v[C]` broadcast over pixels.
    pub fn add_channel(&mut self, x: NodeId, v: NodeId) -> Result<NodeId> {
        let (ix, iv) = (self.idx(x)?, self.idx(v)?);
        let sx = self.nodes[ix].value.shape().to_vec();
        let sv = self.nodes[iv].value.shape();
        if sx.len() != 3 || sv != [sx[0]] {
            return Err(shape_err("add_channel", format!("{sx:?} + {sv:?}")));
        }
        let (c, hw) = (sx[0], sx[1] * sx[2]);
        let vd = self.nodes[iv].value.data();
        let out: Vec<f64> = self.nodes[ix].value.data().iter().enumerate().map(|(i, &a)| a + vd[i / hw]).collect();
        Ok(self.push(Self::make(&sx, out), Op::AddChannel { x: ix, v: iv, c, hw }, &[ix, iv]))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let ix = self.idx(x)?;
        let v = self.nodes[ix].value.map(|a| a * c);
        Ok(self.push(v, Op::Scale { x: ix, c }, &[ix]))
    }

    pub fn silu(&mut self, x: NodeId) -> Result<NodeId> {
        let ix = self.idx(x)?;
        let v = self.nodes[ix].value.map(|a| a * sigmoid(a));
        Ok(self.push(v, Op::Silu { x: ix }, &[ix]))
    }

    // ---- reductions ----

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let ix = self.idx(x)?;
        let s = self.nodes[ix].value.sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum { x: ix }, &[ix]))
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let ix = self.idx(x)?;
        let s = self.nodes[ix].value.mean();
        Ok(self.push(Tensor::scalar(s), Op::Mean { x: ix }, &[ix]))
    }

    /// Softmax along `axis`, stabilized by subtracting the slice maximum.
    /// NaN inputs propagate to NaN outputs.
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let ix = self.idx(x)?;
        let shape = self.nodes[ix].value.shape().to_vec();
        if axis >= shape.len() {
            return Err(shape_err("softmax", format!("axis {axis} for shape {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let xd = self.nodes[ix].value.data();
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for j in 0..len {
                    mx = mx.max(xd[at(j)]);
                }
                let mut z = 0.0;
                for j in 0..len {
                    let e = (xd[at(j)] - mx).exp();
                    out[at(j)] = e;
                    z += e;
                }
                for j in 0..len {
                    out[at(j)] /= z;
                }
            }
        }
        Ok(self.push(Self::make(&shape, out), Op::Softmax { x: ix, outer, len, inner }, &[ix]))
    }

    /// Normalizes over the last axis then applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let (ix, ig, ib) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        let shape = self.nodes[ix].value.shape().to_vec();
        let d = *shape.last().unwrap();
        if self.nodes[ig].value.shape() != [d] || self.nodes[ib].value.shape() != [d] {
            return Err(shape_err(
                "layer_norm",
                format!(
                    "x {shape:?}, gamma {:?}, beta {:?}",
                    self.nodes[ig].value.shape(),
                    self.nodes[ib].value.shape()
                ),
            ));
        }
        let rows = self.nodes[ix].value.numel() / d;
        let (xd, gd, bd) = (self.nodes[ix].value.data(), self.nodes[ig].value.data(), self.nodes[ib].value.data());
        let mut out = vec![0.0; xd.len()];
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                out[r * d + j] = (row[j] - mean) * rstd * gd[j] + bd[j];
            }
            means.push(mean);
            rstds.push(rstd);
        }
        Ok(self.push(
            Self::make(&shape, out),
            Op::LayerNorm { x: ix, gamma: ig, beta: ib, d, mean: means, rstd: rstds },
            &[ix, ig, ib],
        ))
    }

    // ---- convolutions ----

    /// Per-pixel linear map: `x[c_in,h,w]`, `w[c_out,c_in]`, `b[c_out]`.
    pub fn conv1x1(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (ix, iw, ib) = (self.idx(x)?, self.idx(w)?, self.idx(b)?);
        let sx = self.nodes[ix].value.shape().to_vec();
        let sw = self.nodes[iw].value.shape().to_vec();
        if sx.len() != 3 || sw.len() != 2 || sw[1] != sx[0] || self.nodes[ib].value.shape() != [sw[0]] {
            return Err(shape_err("conv1x1", format!("x {sx:?}, w {sw:?}, b {:?}", self.nodes[ib].value.shape())));
        }
        let (cin, cout, hw) = (sx[0], sw[0], sx[1] * sx[2]);
        let mut out = vec![0.0; cout * hw];
        let bd = self.nodes[ib].value.data();
        for (c, chunk) in out.chunks_mut(hw).enumerate() {
            chunk.fill(bd[c]);
        }
        kernels::matmul_nn(self.nodes[iw].value.data(), self.nodes[ix].value.data(), &mut out, cout, cin, hw);
        Ok(self.push(
            Self::make(&[cout, sx[1], sx[2]], out),
            Op::Conv1x1 { x: ix, w: iw, b: ib, cin, cout, hw },
            &[ix, iw, ib],
        ))
    }

    /// 3×3 convolution with zero padding 1: `x[c_in,h,w]`, `w[c_out,c_in,3,3]`,
    /// `b[c_out]`; output extents are `(h-1)/stride + 1`.
    pub fn conv3x3(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize) -> Result<NodeId> {
        let (ix, iw, ib) = (self.idx(x)?, self.idx(w)?, self.idx(b)?);
        let sx = self.nodes[ix].value.shape().to_vec();
        let sw = self.nodes[iw].value.shape().to_vec();
        if stride == 0
            || sx.len() != 3
            || sw.len() != 4
            || sw[1] != sx[0]
            || sw[2] != 3
            || sw[3] != 3
            || self.nodes[ib].value.shape() != [sw[0]]
        {
            return Err(shape_err("conv3x3", format!("x {sx:?}, w {sw:?}, stride {stride}")));
        }
        let (cin, cout, h, wd) = (sx[0], sw[0], sx[1], sx[2]);
        let (cols, ho, wo) = kernels::im2col3x3(self.nodes[ix].value.data(), cin, h, wd, stride);
        let mut out = vec![0.0; cout * ho * wo];
        let bd = self.nodes[ib].value.data();
        for (c, chunk) in out.chunks_mut(ho * wo).enumerate() {
            chunk.fill(bd[c]);
        }
        kernels::matmul_nn(self.nodes[iw].value.data(), &cols, &mut out, cout, cin * 9, ho * wo);
        Ok(self.push(
            Self::make(&[cout, ho, wo], out),
            Op::Conv3x3 { x: ix, w: iw, b: ib, cin, cout, h, wd, stride },
            &[ix, iw, ib],
        ))
    }

    /// Nearest-neighbour 2× upsampling of `[C,H,W]`.
    pub fn upsample2x(&mut self, x: NodeId) -> Result<NodeId> {
        let ix = self.idx(x)?;
        let s = self.nodes[ix].value.shape().to_vec();
        if s.len() != 3 {
            return Err(shape_err("upsample2x", format!("{s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let xd = self.nodes[ix].value.data();
        let mut out = vec![0.0; c * 4 * h * w];
        for ci in 0..c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[ci * 4 * h * w + y * 2 * w + xx] = xd[ci * h * w + (y / 2) * w + xx / 2];
                }
            }
        }
        Ok(self.push(Self::make(&[c, 2 * h, 2 * w], out), Op::Upsample2x { x: ix, c, h, w }, &[ix]))
    }

    // ---- layout ----

    pub fn permute(&mut self, x: NodeId, axes: &[usize]) -> Result<NodeId> {
        let ix = self.idx(x)?;
        let shape = self.nodes[ix].value.shape().to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true))
        {
            return Err(shape_err("permute", format!("axes {axes:?} for shape {shape:?}")));
        }
        let (data, out_shape) = permute_data(self.nodes[ix].value.data(), &shape, axes);
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        Ok(self.push(Self::make(&out_shape, data), Op::Permute { x: ix, inverse }, &[ix]))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let ix = self.idx(x)?;
        let v = self.nodes[ix].value.reshape(shape)?.with_requires_grad(false);
        Ok(self.push(v, Op::Reshape { x: ix }, &[ix]))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, xs: &[NodeId], axis: usize) -> Result<NodeId> {
        let idxs = xs.iter().map(|&x| self.idx(x)).collect::<Result<Vec<_>>>()?;
        let first = self.nodes[*idxs.first().ok_or_else(|| shape_err("concat", "no inputs"))?].value.shape().to_vec();
        if axis >= first.len() {
            return Err(shape_err("concat", format!("axis {axis} for {first:?}")));
        }
        let mut total = 0;
        for &i in &idxs {
            let s = self.nodes[i].value.shape();
            let same =
                s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !same {
                return Err(shape_err("concat", format!("{s:?} vs {first:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = vec![0.0; outer * total * inner];
        let mut parts = Vec::with_capacity(idxs.len());
        let mut offset = 0;
        for &i in &idxs {
            let len = self.nodes[i].value.shape()[axis];
            let src = self.nodes[i].value.data();
            for o in 0..outer {
                let dst = o * total * inner + offset * inner;
                out[dst..dst + len * inner].copy_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
            parts.push((i, len));
            offset += len;
        }
        let mut shape = first;
        shape[axis] = total;
        Ok(self.push(Self::make(&shape, out), Op::Concat { xs: parts, outer, inner, total }, &idxs))
    }

    /// Keeps `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let ix = self.idx(x)?;
        let shape = self.nodes[ix].value.shape().to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(shape_err("slice", format!("[{start}, {}) on axis {axis} of {shape:?}", start + len)));
        }
        let (outer, len_in, inner) = split_axis(&shape, axis);
        let src = self.nodes[ix].value.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * len_in * inner + start * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut s = shape;
        s[axis] = len;
        Ok(self.push(Self::make(&s, out), Op::Slice { x: ix, outer, len_in, start, len, inner }, &[ix]))
    }

    /// Repeats `x` `n` times along a new leading axis.
    pub fn tile(&mut self, x: NodeId, n: usize) -> Result<NodeId> {
        let ix = self.idx(x)?;
        if n == 0 {
            return Err(shape_err("tile", "n must be positive"));
        }
        let src = self.nodes[ix].value.data();
        let mut out = Vec::with_capacity(src.len() * n);
        for _ in 0..n {
            out.extend_from_slice(src);
        }
        let mut shape = vec![n];
        shape.extend_from_slice(self.nodes[ix].value.shape());
        Ok(self.push(Self::make(&shape, out), Op::Tile { x: ix, n }, &[ix]))
    }

    // ---- backward ----

    /// Reverse sweep from a scalar `loss`. Leaf gradients accumulate across
    /// calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let li = self.idx(loss)?;
        if !self.nodes[li].value.is_scalar() {
            return Err(Error::NotScalar(self.nodes[li].value.shape().to_vec()));
        }
        if !self.nodes[li].requires_grad {
            return Err(Error::DetachedGraph);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; li + 1];
        grads[li] = Some(vec![1.0]);
        for i in (0..=li).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                match &mut self.leaf_grads[i] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(g),
                }
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let wants = |j: usize| nodes[j].requires_grad;
        let val = |j: usize| nodes[j].value.data();
        fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], j: usize) -> &'a mut Vec<f64> {
            grads[j].get_or_insert_with(|| vec![0.0; nodes[j].value.numel()])
        }
        match &nodes[i].op {
            Op::Leaf => unreachable!(),
            &Op::MatMul { a, b, m, k, n } => {
                if wants(a) {
                    kernels::matmul_nt(g, val(b), slot(grads, nodes, a), m, n, k);
                }
                if wants(b) {
                    kernels::matmul_tn(val(a), g, slot(grads, nodes, b), k, m, n);
                }
            }
            &Op::Bmm { a, b, batch, m, k, n, trans_b } => {
                let (sa, sb, so) = (m * k, k * n, m * n);
                if wants(a) {
                    let bd = val(b);
                    let da = slot(grads, nodes, a);
                    for bi in 0..batch {
                        let (gb, bb, db) = (&g[bi * so..][..so], &bd[bi * sb..][..sb], &mut da[bi * sa..][..sa]);
                        if trans_b {
                            // b is [n,k]
                            kernels::matmul_nn(gb, bb, db, m, n, k);
                        } else {
                            kernels::matmul_nt(gb, bb, db, m, n, k);
                        }
                    }
                }
                if wants(b) {
                    let ad = val(a);
                    let dbuf = slot(grads, nodes, b);
                    for bi in 0..batch {
                        let (gb, ab, db) = (&g[bi * so..][..so], &ad[bi * sa..][..sa], &mut dbuf[bi * sb..][..sb]);
                        if trans_b {
                            // d(b)[n,k] = gᵀ[n,m] · a[m,k]
                            kernels::matmul_tn(gb, ab, db, n, m, k);
                        } else {
                            kernels::matmul_tn(ab, gb, db, k, m, n);
                        }
                    }
                }
            }
            &Op::Add { a, b } => {
                for (j, sign) in [(a, 1.0), (b, 1.0)] {
                    if wants(j) {
                        slot(grads, nodes, j).iter_mut().zip(g).for_each(|(d, &gv)| *d += sign * gv);
                    }
                }
            }
            &Op::Sub { a, b } => {
                for (j, sign) in [(a, 1.0), (b, -1.0)] {
                    if wants(j) {
                        slot(grads, nodes, j).iter_mut().zip(g).for_each(|(d, &gv)| *d += sign * gv);
                    }
                }
            }
            &Op::Mul { a, b } => {
                if wants(a) {
                    let bd = val(b);
                    slot(grads, nodes, a).iter_mut().zip(g).zip(bd).for_each(|((d, &gv), &bv)| *d += gv * bv);
                }
                if wants(b) {
                    let ad = val(a);
                    slot(grads, nodes, b).iter_mut().zip(g).zip(ad).for_each(|((d, &gv), &av)| *d += gv * av);
                }
            }
            &Op::AddBias { x, b, d } => {
                if wants(x) {
                    slot(grads, nodes, x).iter_mut().zip(g).for_each(|(dx, &gv)| *dx += gv);
                }
                if wants(b) {
                    let db = slot(grads, nodes, b);
                    for (i, &gv) in g.iter().enumerate() {
                        db[i % d] += gv;
                    }
                }
            }
            &Op::AddChannel { x, v, c, hw } => {
                if wants(x) {
                    slot(grads, nodes, x).iter_mut().zip(g).for_each(|(dx, &gv)| *dx += gv);
                }
                if wants(v) {
                    let dv = slot(grads, nodes, v);
                    for ci in 0..c {
                        dv[ci] += g[ci * hw..(ci + 1) * hw].iter().sum::<f64>();
                    }
                }
            }
            &Op::Scale { x, c } => {
                slot(grads, nodes, x).iter_mut().zip(g).for_each(|(d, &gv)| *d += c * gv);
            }
            &Op::Silu { x } => {
                let xd = val(x);
                slot(grads, nodes, x).iter_mut().zip(g).zip(xd).for_each(|((d, &gv), &xv)| {
                    let s = sigmoid(xv);
                    *d += gv * s * (1.0 + xv * (1.0 - s));
                });
            }
            &Op::Sum { x } => {
                slot(grads, nodes, x).iter_mut().for_each(|d| *d += g[0]);
            }
            &Op::Mean { x } => {
                let n = nodes[x].value.numel() as f64;
                slot(grads, nodes, x).iter_mut().for_each(|d| *d += g[0] / n);
            }
            &Op::Softmax { x, outer, len, inner } => {
                let y = nodes[i].value.data();
                let dx = slot(grads, nodes, x);
                for o in 0..outer {
                    for ii in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + ii;
                        let dotp: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            dx[at(j)] += y[at(j)] * (g[at(j)] - dotp);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, d, mean, rstd } => {
                let (x, gamma, beta, d) = (*x, *gamma, *beta, *d);
                let xd = val(x);
                let gd = val(gamma);
                let rows = xd.len() / d;
                if wants(gamma) || wants(beta) {
                    let mut dg = vec![0.0; d];
                    let mut db = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            let xhat = (xd[r * d + j] - mean[r]) * rstd[r];
                            dg[j] += g[r * d + j] * xhat;
                            db[j] += g[r * d + j];
                        }
                    }
                    if wants(gamma) {
                        slot(grads, nodes, gamma).iter_mut().zip(&dg).for_each(|(a, b)| *a += b);
                    }
                    if wants(beta) {
                        slot(grads, nodes, beta).iter_mut().zip(&db).for_each(|(a, b)| *a += b);
                    }
                }
                if wants(x) {
                    let dx = slot(grads, nodes, x);
                    let df = d as f64;
                    for r in 0..rows {
                        let mut sum_dy = 0.0;
                        let mut sum_dy_xhat = 0.0;
                        for j in 0..d {
                            let dyh = g[r * d + j] * gd[j];
                            let xhat = (xd[r * d + j] - mean[r]) * rstd[r];
                            sum_dy += dyh;
                            sum_dy_xhat += dyh * xhat;
                        }
                        for j in 0..d {
                            let dyh = g[r * d + j] * gd[j];
                            let xhat = (xd[r * d + j] - mean[r]) * rstd[r];
                            dx[r * d + j] += rstd[r] * (dyh - sum_dy / df - xhat * sum_dy_xhat / df);
                        }
                    }
                }
            }
            &Op::Conv1x1 { x, w, b, cin, cout, hw } => {
                if wants(x) {
                    kernels::matmul_tn(val(w), g, slot(grads, nodes, x), cin, cout, hw);
                }
                if wants(w) {
                    kernels::matmul_nt(g, val(x), slot(grads, nodes, w), cout, hw, cin);
                }
                if wants(b) {
                    let db = slot(grads, nodes, b);
                    for c in 0..cout {
                        db[c] += g[c * hw..(c + 1) * hw].iter().sum::<f64>();
                    }
                }
            }
            &Op::Conv3x3 { x, w, b, cin, cout, h, wd, stride } => {
                let ho = (h - 1) / stride + 1;
                let wo = (wd - 1) / stride + 1;
                let p = ho * wo;
                if wants(w) {
                    let (cols, _, _) = kernels::im2col3x3(val(x), cin, h, wd, stride);
                    kernels::matmul_nt(g, &cols, slot(grads, nodes, w), cout, p, cin * 9);
                }
                if wants(x) {
                    let mut dcols = vec![0.0; cin * 9 * p];
                    kernels::matmul_tn(val(w), g, &mut dcols, cin * 9, cout, p);
                    kernels::col2im3x3(&dcols, slot(grads, nodes, x), cin, h, wd, stride);
                }
                if wants(b) {
                    let db = slot(grads, nodes, b);
                    for c in 0..cout {
                        db[c] += g[c * p..(c + 1) * p].iter().sum::<f64>();
                    }
                }
            }
            Op::Permute { x, inverse } => {
                let (data, _) = permute_data(g, nodes[i].value.shape(), inverse);
                slot(grads, nodes, *x).iter_mut().zip(&data).for_each(|(a, b)| *a += b);
            }
            &Op::Reshape { x } => {
                slot(grads, nodes, x).iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
            Op::Concat { xs, outer, inner, total } => {
                let mut offset = 0;
                for &(j, len) in xs {
                    if wants(j) {
                        let dj = slot(grads, nodes, j);
                        for o in 0..*outer {
                            let src = o * total * inner + offset * inner;
                            dj[o * len * inner..(o + 1) * len * inner]
                                .iter_mut()
                                .zip(&g[src..src + len * inner])
                                .for_each(|(a, b)| *a += b);
                        }
                    }
                    offset += len;
                }
            }
            &Op::Slice { x, outer, len_in, start, len, inner } => {
                let dx = slot(grads, nodes, x);
                for o in 0..outer {
                    let base = o * len_in * inner + start * inner;
                    dx[base..base + len * inner]
                        .iter_mut()
                        .zip(&g[o * len * inner..(o + 1) * len * inner])
                        .for_each(|(a, b)| *a += b);
                }
            }
            &Op::Upsample2x { x, c, h, w } => {
                let dx = slot(grads, nodes, x);
                for ci in 0..c {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            dx[ci * h * w + (y / 2) * w + xx / 2] += g[ci * 4 * h * w + y * 2 * w + xx];
                        }
                    }
                }
            }
            &Op::Tile { x, n } => {
                let dx = slot(grads, nodes, x);
                let len = dx.len();
                for r in 0..n {
                    dx.iter_mut().zip(&g[r * len..(r + 1) * len]).for_each(|(a, b)| *a += b);
                }
            }
        }
    }
}
