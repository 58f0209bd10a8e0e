//! Temporal self-attention across frames, gated by a zero convolution.

use rand::Rng;

use crate::adapter::{zero_conv, zero_conv_init};
use crate::attention::{multi_head_attention, sinusoidal_encoding, AttentionParams, Axis, KeysValues, LAYER_NORM_EPS};
use crate::error::{shape_err, Result};
use crate::graph::NodeId;
use crate::params::{Ctx, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct MotionParams {
    /// Only the row-stage weights are used; the frame axis plays the token role.
    pub attn: AttentionParams,
    pub gate: String,
}

impl MotionParams {
    pub fn new(prefix: &str, channels: usize, heads: usize, positional: bool) -> Result<Self> {
        Ok(Self {
            attn: AttentionParams::new(format!("{prefix}.attn"), channels, heads, channels)?
                .with_positional(positional),
            gate: format!("{prefix}.gate"),
        })
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let d = self.attn.d_model;
        for w in ["wq", "wk", "wv", "wo"] {
            store.init_normal(self.attn.name(Axis::Rows, w), &[d, d], d, 1.0, rng);
        }
        store.init_ones(self.attn.name(Axis::Rows, "ln_g"), &[d]);
        store.init_zeros(self.attn.name(Axis::Rows, "ln_b"), &[d]);
        zero_conv_init(store, &self.gate, d, d);
    }
}

/// At every spatial position, self-attention over the frame axis; each frame
/// receives `frame + gate(attention output)`.
pub fn temporal_attention(ctx: &mut Ctx, frames: &[NodeId], params: &MotionParams) -> Result<Vec<NodeId>> {
    let Some(&first) = frames.first() else {
        return Err(shape_err("temporal_attention", "no frames"));
    };
    let s = ctx.g.shape(first).to_vec();
    if s.len() != 3 || s[0] != params.attn.d_model {
        return Err(shape_err("temporal_attention", format!("frame {s:?}, d_model {}", params.attn.d_model)));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let f = frames.len();
    let mut stacked = Vec::with_capacity(f);
    for &fr in frames {
        if ctx.g.shape(fr) != s.as_slice() {
            return Err(shape_err("temporal_attention", format!("frame {:?} vs {s:?}", ctx.g.shape(fr))));
        }
        stacked.push(ctx.g.reshape(fr, &[1, c, h, w])?);
    }
    let x = ctx.g.concat(&stacked, 0)?;
    let x = ctx.g.permute(x, &[2, 3, 0, 1])?;
    let x = ctx.g.reshape(x, &[h * w, f, c])?;
    let gamma = ctx.p(&params.attn.name(Axis::Rows, "ln_g"))?;
    let beta = ctx.p(&params.attn.name(Axis::Rows, "ln_b"))?;
    let mut n = ctx.g.layer_norm(x, gamma, beta, LAYER_NORM_EPS)?;
    if params.attn.positional[0] {
        let pos: Vec<f64> = (0..f).map(|i| i as f64).collect();
        let pe = sinusoidal_encoding(&pos, c);
        let pe = ctx.g.constant(Tensor::stack(&vec![pe; h * w])?);
        n = ctx.g.add(n, pe)?;
    }
    let a = multi_head_attention(ctx, n, KeysValues::PerSlice(n), &params.attn, Axis::Rows)?;
    let a = ctx.g.reshape(a, &[h, w, f, c])?;
    let a = ctx.g.permute(a, &[2, 3, 0, 1])?;
    let mut out = Vec::with_capacity(f);
    for (i, &fr) in frames.iter().enumerate() {
        let ai = ctx.g.slice(a, 0, i, 1)?;
        let ai = ctx.g.reshape(ai, &[c, h, w])?;
        let gated = zero_conv(ctx, ai, &params.gate)?;
        out.push(ctx.g.add(fr, gated)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::params::Trainable;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fresh_gate_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = MotionParams::new("m", 4, 2, true).unwrap();
        let mut store = ParamStore::new();
        params.init(&mut store, &mut rng);
        let mut g = Graph::new();
        let mut ctx = Ctx::new(&mut g, &store, Trainable::Nothing);
        let frames: Vec<NodeId> = (0..3).map(|_| ctx.g.constant(Tensor::randn(&[4, 2, 3], 1.0, &mut rng))).collect();
        let out = temporal_attention(&mut ctx, &frames, &params).unwrap();
        for (a, b) in frames.iter().zip(&out) {
            assert_eq!(g.value(*a).data(), g.value(*b).data());
        }
    }
}
