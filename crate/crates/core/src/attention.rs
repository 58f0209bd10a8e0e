//! Spatial knitting attention kernels.
//!
//! A 2D feature map `[C,H,W]` is never flattened. Attention first runs
//! independently over every row (the `W` positions of a row are the tokens),
//! then independently over every column of the row-stage result. Each stage is
//! a pre-norm residual block, `x + MHA(LN(x))`, with one parameter set shared
//! by all slices of that stage.
//!
//! * [`sk_cross_attention`]: every row/column attends to an external token
//!   sequence.
//! * [`sk_reference_attention`]: every row of the map is concatenated with the
//!   matching row of a reference map (map first), self-attention runs over
//!   the `2W` tokens, and the first `W` tokens are kept. Columns likewise.
//! * [`flat_attention_baseline`]: the conventional route, one attention over
//!   all `H·W` positions.

use rand::Rng;

use crate::error::{shape_err, Result};
use crate::graph::NodeId;
use crate::kernels::MacTag;
use crate::params::{Ctx, ParamStore};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// The axis a stage attends along.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Tokens are the `W` positions of one row; `H` independent slices.
    Rows,
    /// Tokens are the `H` positions of one column; `W` independent slices.
    Cols,
}

impl Axis {
    fn tag(self) -> &'static str {
        match self {
            Axis::Rows => "row",
            Axis::Cols => "col",
        }
    }
}

/// Shape and naming of one attention module. Weights live in a
/// [`ParamStore`] under `{prefix}.{row|col}.{wq,wk,wv,wo,ln_g,ln_b}`;
/// projections act on the right of token rows (`tokens · W`).
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub prefix: String,
    pub d_model: usize,
    pub n_heads: usize,
    /// Width of external key/value tokens. Equals `d_model` for self-attention.
    pub d_context: usize,
    /// Sinusoidal encoding along the attended axis, per stage (row, column).
    pub positional: [bool; 2],
}

impl AttentionParams {
    pub fn new(prefix: impl Into<String>, d_model: usize, n_heads: usize, d_context: usize) -> Result<Self> {
        if d_model == 0 || n_heads == 0 || d_model % n_heads != 0 {
            return Err(shape_err("attention_params", format!("d_model {d_model} not divisible by n_heads {n_heads}")));
        }
        Ok(Self { prefix: prefix.into(), d_model, n_heads, d_context, positional: [false, false] })
    }

    pub fn with_positional(mut self, on: bool) -> Self {
        self.positional = [on, on];
        self
    }

    pub fn name(&self, axis: Axis, what: &str) -> String {
        format!("{}.{}.{}", self.prefix, axis.tag(), what)
    }

    fn positional_on(&self, axis: Axis) -> bool {
        match axis {
            Axis::Rows => self.positional[0],
            Axis::Cols => self.positional[1],
        }
    }

    /// Random projections and unit layer norms for both stages.
    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        for axis in [Axis::Rows, Axis::Cols] {
            let (d, dc) = (self.d_model, self.d_context);
            store.init_normal(self.name(axis, "wq"), &[d, d], d, 1.0, rng);
            store.init_normal(self.name(axis, "wk"), &[dc, d], dc, 1.0, rng);
            store.init_normal(self.name(axis, "wv"), &[dc, d], dc, 1.0, rng);
            store.init_normal(self.name(axis, "wo"), &[d, d], d, 1.0, rng);
            store.init_ones(self.name(axis, "ln_g"), &[d]);
            store.init_zeros(self.name(axis, "ln_b"), &[d]);
        }
    }

    /// Sets the output projection of both stages to zero.
    pub fn zero_output(&self, store: &mut ParamStore) {
        for axis in [Axis::Rows, Axis::Cols] {
            store.init_zeros(self.name(axis, "wo"), &[self.d_model, self.d_model]);
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut v = Vec::new();
        for axis in [Axis::Rows, Axis::Cols] {
            for w in ["wq", "wk", "wv", "wo", "ln_g", "ln_b"] {
                v.push(self.name(axis, w));
            }
        }
        v
    }
}

/// Sinusoidal encoding `[positions.len(), d]`: even channels `sin`, odd `cos`.
pub fn sinusoidal_encoding(positions: &[f64], d: usize) -> Tensor {
    let mut data = Vec::with_capacity(positions.len() * d);
    for &p in positions {
        for j in 0..d {
            let i = (j / 2) as f64;
            let angle = p / 10_000f64.powf(2.0 * i / d as f64);
            data.push(if j % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::new(&[positions.len(), d], data).expect("encoding shape")
}

/// `softmax(Q Kᵀ / √d) V` for `[n,d]` or batched `[B,n,d]` operands.
pub fn scaled_dot_attention(ctx: &mut Ctx, q: NodeId, k: NodeId, v: NodeId) -> Result<NodeId> {
    let (sq, sk, sv) = (ctx.g.shape(q).to_vec(), ctx.g.shape(k).to_vec(), ctx.g.shape(v).to_vec());
    let rank = sq.len();
    let ok = (rank == 2 || rank == 3)
        && sk.len() == rank
        && sv.len() == rank
        && sq[rank - 1] == sk[rank - 1]
        && sk == sv
        && (rank == 2 || sq[0] == sk[0]);
    if !ok {
        return Err(shape_err("scaled_dot_attention", format!("q {sq:?}, k {sk:?}, v {sv:?}")));
    }
    if rank == 2 {
        let q3 = ctx.g.reshape(q, &[1, sq[0], sq[1]])?;
        let k3 = ctx.g.reshape(k, &[1, sk[0], sk[1]])?;
        let v3 = ctx.g.reshape(v, &[1, sv[0], sv[1]])?;
        let o = attend(ctx, q3, k3, v3)?;
        return ctx.g.reshape(o, &[sq[0], sq[1]]);
    }
    attend(ctx, q, k, v)
}

fn attend(ctx: &mut Ctx, q: NodeId, k: NodeId, v: NodeId) -> Result<NodeId> {
    let d = ctx.g.shape(q)[2];
    let scores = ctx.g.bmm_tagged(q, k, true, MacTag::Score)?;
    let scores = ctx.g.scale(scores, 1.0 / (d as f64).sqrt())?;
    let probs = ctx.g.softmax(scores, 2)?;
    ctx.g.bmm_tagged(probs, v, false, MacTag::Value)
}

fn split_heads(ctx: &mut Ctx, x: NodeId, heads: usize) -> Result<NodeId> {
    let s = ctx.g.shape(x).to_vec();
    let (b, n, d) = (s[0], s[1], s[2]);
    let r = ctx.g.reshape(x, &[b, n, heads, d / heads])?;
    let p = ctx.g.permute(r, &[0, 2, 1, 3])?;
    ctx.g.reshape(p, &[b * heads, n, d / heads])
}

fn merge_heads(ctx: &mut Ctx, x: NodeId, batch: usize, heads: usize) -> Result<NodeId> {
    let s = ctx.g.shape(x).to_vec();
    let (n, dh) = (s[1], s[2]);
    let r = ctx.g.reshape(x, &[batch, heads, n, dh])?;
    let p = ctx.g.permute(r, &[0, 2, 1, 3])?;
    ctx.g.reshape(p, &[batch, n, heads * dh])
}

fn project(ctx: &mut Ctx, x: NodeId, w: &str) -> Result<NodeId> {
    let s = ctx.g.shape(x).to_vec();
    let rows: usize = s[..s.len() - 1].iter().product();
    let flat = ctx.g.reshape(x, &[rows, s[s.len() - 1]])?;
    let y = ctx.linear(flat, w, None)?;
    let d_out = ctx.g.shape(y)[1];
    let mut out_shape = s[..s.len() - 1].to_vec();
    out_shape.push(d_out);
    ctx.g.reshape(y, &out_shape)
}

/// Source of keys and values for one attention call.
#[derive(Clone, Copy, Debug)]
pub enum KeysValues {
    /// `[B, m, d_context]`, one set per batch slice.
    PerSlice(NodeId),
    /// `[m, d_context]`, the same tokens for every batch slice.
    Shared(NodeId),
}

/// Head split, per-head [`scaled_dot_attention`], head merge and output
/// projection. `queries` is `[B, n, d_model]`; the result has the same shape.
pub fn multi_head_attention(
    ctx: &mut Ctx,
    queries: NodeId,
    keys_values: KeysValues,
    params: &AttentionParams,
    stage: Axis,
) -> Result<NodeId> {
    let sq = ctx.g.shape(queries).to_vec();
    if sq.len() != 3 || sq[2] != params.d_model {
        return Err(shape_err("multi_head_attention", format!("queries {sq:?}, d_model {}", params.d_model)));
    }
    let batch = sq[0];
    let (k, v) = match keys_values {
        KeysValues::PerSlice(kv) => {
            let s = ctx.g.shape(kv);
            if s.len() != 3 || s[0] != batch || s[2] != params.d_context {
                return Err(shape_err("multi_head_attention", format!("keys/values {s:?}")));
            }
            (project(ctx, kv, &params.name(stage, "wk"))?, project(ctx, kv, &params.name(stage, "wv"))?)
        }
        KeysValues::Shared(kv) => {
            let s = ctx.g.shape(kv);
            if s.len() != 2 || s[1] != params.d_context {
                return Err(shape_err("multi_head_attention", format!("shared keys/values {s:?}")));
            }
            let k = project(ctx, kv, &params.name(stage, "wk"))?;
            let v = project(ctx, kv, &params.name(stage, "wv"))?;
            (ctx.g.tile(k, batch)?, ctx.g.tile(v, batch)?)
        }
    };
    let q = project(ctx, queries, &params.name(stage, "wq"))?;
    let heads = params.n_heads;
    let out = if heads == 1 {
        attend(ctx, q, k, v)?
    } else {
        let (qh, kh, vh) = (split_heads(ctx, q, heads)?, split_heads(ctx, k, heads)?, split_heads(ctx, v, heads)?);
        let o = attend(ctx, qh, kh, vh)?;
        merge_heads(ctx, o, batch, heads)?
    };
    project(ctx, out, &params.name(stage, "wo"))
}

/// Pre-norm residual attention over token slices `x[B, n, d_model]`.
/// With `context = None` this is self-attention. `positions` gives the
/// encoding index of each of the `n` tokens.
pub fn attention_block(
    ctx: &mut Ctx,
    x: NodeId,
    context: Option<KeysValues>,
    params: &AttentionParams,
    stage: Axis,
    positions: &[f64],
) -> Result<NodeId> {
    let s = ctx.g.shape(x).to_vec();
    let g = ctx.p(&params.name(stage, "ln_g"))?;
    let b = ctx.p(&params.name(stage, "ln_b"))?;
    let mut h = ctx.g.layer_norm(x, g, b, LAYER_NORM_EPS)?;
    if params.positional_on(stage) {
        debug_assert_eq!(positions.len(), s[1]);
        let pe = sinusoidal_encoding(positions, s[2]);
        let pe = ctx.g.constant(Tensor::stack(&vec![pe; s[0]])?);
        h = ctx.g.add(h, pe)?;
    }
    let kv = context.unwrap_or(KeysValues::PerSlice(h));
    let a = multi_head_attention(ctx, h, kv, params, stage)?;
    ctx.g.add(x, a)
}

fn check_map(ctx: &Ctx, map: NodeId, d_model: usize, op: &'static str) -> Result<(usize, usize, usize)> {
    let s = ctx.g.shape(map);
    if s.len() != 3 || s[0] != d_model {
        return Err(shape_err(op, format!("map {s:?}, d_model {d_model}")));
    }
    Ok((s[0], s[1], s[2]))
}

fn positions(n: usize) -> Vec<f64> {
    (0..n).map(|i| i as f64).collect()
}

/// Slices of a `[C,H,W]` map along `axis`: `[H,W,C]` for rows, `[W,H,C]`
/// for columns.
fn to_slices(ctx: &mut Ctx, map: NodeId, axis: Axis) -> Result<NodeId> {
    match axis {
        Axis::Rows => ctx.g.permute(map, &[1, 2, 0]),
        Axis::Cols => ctx.g.permute(map, &[2, 1, 0]),
    }
}

fn from_slices(ctx: &mut Ctx, slices: NodeId, axis: Axis) -> Result<NodeId> {
    match axis {
        Axis::Rows => ctx.g.permute(slices, &[2, 0, 1]),
        Axis::Cols => ctx.g.permute(slices, &[2, 1, 0]),
    }
}

/// One cross-attention stage: every slice along `axis` attends to `seq`.
pub fn cross_stage(ctx: &mut Ctx, map: NodeId, seq: NodeId, params: &AttentionParams, axis: Axis) -> Result<NodeId> {
    check_map(ctx, map, params.d_model, "sk_cross_attention")?;
    let ss = ctx.g.shape(seq);
    if ss.len() != 2 || ss[1] != params.d_context {
        return Err(shape_err("sk_cross_attention", format!("seq {ss:?}, d_context {}", params.d_context)));
    }
    let x = to_slices(ctx, map, axis)?;
    let n = ctx.g.shape(x)[1];
    let y = attention_block(ctx, x, Some(KeysValues::Shared(seq)), params, axis, &positions(n))?;
    from_slices(ctx, y, axis)
}

/// One reference stage: each slice of `map` is concatenated with the same
/// slice of `reference`, self-attended, and the map half is kept.
pub fn reference_stage(
    ctx: &mut Ctx,
    map: NodeId,
    reference: NodeId,
    params: &AttentionParams,
    axis: Axis,
) -> Result<NodeId> {
    check_map(ctx, map, params.d_model, "sk_reference_attention")?;
    if ctx.g.shape(map) != ctx.g.shape(reference) {
        return Err(shape_err(
            "sk_reference_attention",
            format!("map {:?} vs reference {:?}", ctx.g.shape(map), ctx.g.shape(reference)),
        ));
    }
    let x = to_slices(ctx, map, axis)?;
    let r = to_slices(ctx, reference, axis)?;
    let n = ctx.g.shape(x)[1];
    let joined = ctx.g.concat(&[x, r], 1)?;
    let mut pos = positions(n);
    pos.extend(positions(n));
    let y = attention_block(ctx, joined, None, params, axis, &pos)?;
    let kept = ctx.g.slice(y, 1, 0, n)?;
    from_slices(ctx, kept, axis)
}

/// Row stage then column stage of cross-attention against `seq[L, d_context]`.
pub fn sk_cross_attention(ctx: &mut Ctx, map: NodeId, seq: NodeId, params: &AttentionParams) -> Result<NodeId> {
    let rows = cross_stage(ctx, map, seq, params, Axis::Rows)?;
    cross_stage(ctx, rows, seq, params, Axis::Cols)
}

/// Row stage then column stage of reference attention; `map` and `reference`
/// share one shape.
pub fn sk_reference_attention(
    ctx: &mut Ctx,
    map: NodeId,
    reference: NodeId,
    params: &AttentionParams,
) -> Result<NodeId> {
    let rows = reference_stage(ctx, map, reference, params, Axis::Rows)?;
    reference_stage(ctx, rows, reference, params, Axis::Cols)
}

/// Row-major flattening of all `H·W` positions into one token sequence and a
/// single cross-attention against `seq`, using the row-stage weights.
pub fn flat_attention_baseline(ctx: &mut Ctx, map: NodeId, seq: NodeId, params: &AttentionParams) -> Result<NodeId> {
    let (c, h, w) = check_map(ctx, map, params.d_model, "flat_attention_baseline")?;
    let ss = ctx.g.shape(seq);
    if ss.len() != 2 || ss[1] != params.d_context {
        return Err(shape_err("flat_attention_baseline", format!("seq {ss:?}")));
    }
    let tokens = ctx.g.permute(map, &[1, 2, 0])?;
    let tokens = ctx.g.reshape(tokens, &[1, h * w, c])?;
    let y = attention_block(ctx, tokens, Some(KeysValues::Shared(seq)), params, Axis::Rows, &positions(h * w))?;
    let y = ctx.g.reshape(y, &[h, w, c])?;
    ctx.g.permute(y, &[2, 0, 1])
}

/// Flattened self-attention over all `H·W` positions (row-stage weights).
/// The conventional counterpart of [`sk_reference_attention`] for cost
/// comparisons.
pub fn flat_self_attention(ctx: &mut Ctx, map: NodeId, params: &AttentionParams) -> Result<NodeId> {
    let (c, h, w) = check_map(ctx, map, params.d_model, "flat_self_attention")?;
    let tokens = ctx.g.permute(map, &[1, 2, 0])?;
    let tokens = ctx.g.reshape(tokens, &[1, h * w, c])?;
    let y = attention_block(ctx, tokens, None, params, Axis::Rows, &positions(h * w))?;
    let y = ctx.g.reshape(y, &[h, w, c])?;
    ctx.g.permute(y, &[2, 0, 1])
}

/// Attention layouts whose cost [`attention_op_count`] predicts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionVariant {
    FlatSelf,
    FlatCross,
    SkCross,
    SkReference,
}

impl AttentionVariant {
    pub const ALL: [AttentionVariant; 4] = [
        AttentionVariant::FlatSelf,
        AttentionVariant::FlatCross,
        AttentionVariant::SkCross,
        AttentionVariant::SkReference,
    ];

    pub fn label(self) -> &'static str {
        match self {
            AttentionVariant::FlatSelf => "flat-self",
            AttentionVariant::FlatCross => "flat-cross",
            AttentionVariant::SkCross => "sk-cross",
            AttentionVariant::SkReference => "sk-reference",
        }
    }
}

/// Multiply-accumulates of the `QKᵀ` and `PV` products.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MacCount {
    pub score: u64,
    pub value: u64,
}

impl MacCount {
    pub fn total(&self) -> u64 {
        self.score + self.value
    }
}

/// Closed-form score and value MACs, one entry per attention stage.
pub fn attention_stage_counts(h: usize, w: usize, l: usize, d: usize, variant: AttentionVariant) -> Vec<MacCount> {
    let (h, w, l, d) = (h as u64, w as u64, l as u64, d as u64);
    let same = |n: u64| MacCount { score: n, value: n };
    match variant {
        AttentionVariant::FlatSelf => vec![same((h * w) * (h * w) * d)],
        AttentionVariant::FlatCross => vec![same(h * w * l * d)],
        AttentionVariant::SkCross => vec![same(h * w * l * d), same(w * h * l * d)],
        AttentionVariant::SkReference => vec![same(h * (2 * w) * (2 * w) * d), same(w * (2 * h) * (2 * h) * d)],
    }
}

/// Total closed-form MACs of the score and value products of `variant` on an
/// `H×W` map with `L` context tokens and width `d`.
pub fn attention_op_count(h: usize, w: usize, l: usize, d: usize, variant: AttentionVariant) -> MacCount {
    attention_stage_counts(h, w, l, d, variant)
        .into_iter()
        .fold(MacCount::default(), |acc, c| MacCount { score: acc.score + c.score, value: acc.value + c.value })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::params::Trainable;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(d: usize, heads: usize, dc: usize, seed: u64) -> (ParamStore, AttentionParams, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = AttentionParams::new("attn", d, heads, dc).unwrap();
        let mut store = ParamStore::new();
        params.init(&mut store, &mut rng);
        (store, params, rng)
    }

    #[test]
    fn single_key_returns_value_row() {
        let (store, _, mut rng) = setup(4, 1, 4, 1);
        let mut g = Graph::new();
        let mut ctx = Ctx::new(&mut g, &store, Trainable::Nothing);
        let q = ctx.g.constant(Tensor::randn(&[3, 4], 1.0, &mut rng));
        let k = ctx.g.constant(Tensor::randn(&[1, 4], 1.0, &mut rng));
        let v = ctx.g.constant(Tensor::randn(&[1, 4], 1.0, &mut rng));
        let o = scaled_dot_attention(&mut ctx, q, k, v).unwrap();
        let vv = ctx.g.value(v).data().to_vec();
        for row in ctx.g.value(o).data().chunks(4) {
            assert_eq!(row, &vv[..]);
        }
    }

    #[test]
    fn sharp_query_picks_matching_value() {
        // orthonormal keys, q = 50·k_1: softmax weights computed exactly below
        let store = ParamStore::new();
        let mut g = Graph::new();
        let mut ctx = Ctx::new(&mut g, &store, Trainable::Nothing);
        let k = ctx.g.constant(Tensor::eye(3));
        let q = ctx.g.constant(Tensor::new(&[1, 3], vec![0.0, 50.0, 0.0]).unwrap());
        let v = ctx.g.constant(Tensor::new(&[3, 3], vec![1.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 3.0]).unwrap());
        let o = scaled_dot_attention(&mut ctx, q, k, v).unwrap();
        let s = 50.0 / 3f64.sqrt();
        let z = 2.0 + s.exp();
        let want = [1.0 / z, 2.0 * s.exp() / z, 3.0 / z];
        for (a, b) in ctx.g.value(o).data().iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((ctx.g.value(o).data()[1] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn mismatched_widths_rejected() {
        let store = ParamStore::new();
        let mut g = Graph::new();
        let mut ctx = Ctx::new(&mut g, &store, Trainable::Nothing);
        let q = ctx.g.constant(Tensor::zeros(&[2, 3]));
        let k = ctx.g.constant(Tensor::zeros(&[2, 4]));
        assert!(scaled_dot_attention(&mut ctx, q, k, k).is_err());
    }

    #[test]
    fn heads_must_divide_width() {
        assert!(AttentionParams::new("a", 6, 4, 6).is_err());
    }

    #[test]
    fn zero_output_projection_gives_zero() {
        let (mut store, params, mut rng) = setup(8, 2, 5, 3);
        params.zero_output(&mut store);
        let mut g = Graph::new();
        let mut ctx = Ctx::new(&mut g, &store, Trainable::Nothing);
        let q = ctx.g.constant(Tensor::randn(&[2, 3, 8], 1.0, &mut rng));
        let kv = ctx.g.constant(Tensor::randn(&[2, 7, 5], 1.0, &mut rng));
        let o = multi_head_attention(&mut ctx, q, KeysValues::PerSlice(kv), &params, Axis::Rows).unwrap();
        assert_eq!(ctx.g.shape(o), &[2, 3, 8]);
        assert!(ctx.g.value(o).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_head_is_projected_attention() {
        let (store, params, mut rng) = setup(4, 1, 4, 4);
        let mut g = Graph::new();
        let mut ctx = Ctx::new(&mut g, &store, Trainable::Nothing);
        let x = ctx.g.constant(Tensor::randn(&[1, 3, 4], 1.0, &mut rng));
        let o = multi_head_attention(&mut ctx, x, KeysValues::PerSlice(x), &params, Axis::Rows).unwrap();
        let x2 = ctx.g.reshape(x, &[3, 4]).unwrap();
        let q = ctx.linear(x2, "attn.row.wq", None).unwrap();
        let k = ctx.linear(x2, "attn.row.wk", None).unwrap();
        let v = ctx.linear(x2, "attn.row.wv", None).unwrap();
        let a = scaled_dot_attention(&mut ctx, q, k, v).unwrap();
        let want = ctx.linear(a, "attn.row.wo", None).unwrap();
        assert!(ctx.g.value(o).reshape(&[3, 4]).unwrap().max_abs_diff(ctx.g.value(want)) < 1e-14);
    }

    #[test]
    fn op_count_examples() {
        let flat = attention_op_count(16, 16, 0, 64, AttentionVariant::FlatSelf);
        assert_eq!(flat.score, 4_194_304);
        assert_eq!(flat.total(), 2 * 256 * 256 * 64);
        let sk = attention_op_count(16, 16, 5, 64, AttentionVariant::SkCross);
        assert_eq!(sk.score, 163_840);
        assert_eq!(sk.total(), 2 * (16 * 16 * 5 * 64 + 16 * 16 * 5 * 64));
    }
}
