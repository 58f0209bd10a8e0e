//! Adapter branches attached to the frozen UNet: the pose/expression control
//! pyramid, reference-feature injection and zero-convolution gates.

use rand::Rng;

use crate::attention::{sk_cross_attention, sk_reference_attention, AttentionParams};
use crate::config::ModelConfig;
use crate::error::{shape_err, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{Ctx, ParamStore};
use crate::pose::{
    assemble_expression_features, ExpressionCoefficients, ExpressionProjection, PatchEmbeddings, PoseImage,
};
use crate::tensor::Tensor;

/// Default replication count for identity tokens.
pub const DEFAULT_ID_TILES: usize = 5;

/// Stores an all-zero 1×1 convolution `{name}.w [c_out, c_in]`, `{name}.b [c_out]`.
pub fn zero_conv_init(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize) {
    assert!(c_in > 0 && c_out > 0, "zero_conv_init needs positive channel counts");
    store.init_zeros(format!("{name}.w"), &[c_out, c_in]);
    store.init_zeros(format!("{name}.b"), &[c_out]);
}

pub fn zero_conv(ctx: &mut Ctx, x: NodeId, name: &str) -> Result<NodeId> {
    ctx.conv1x1(x, name)
}

pub fn add_control(g: &mut Graph, hidden: NodeId, control: NodeId) -> Result<NodeId> {
    if g.shape(hidden) != g.shape(control) {
        return Err(shape_err(
            "add_control",
            format!("hidden {:?} vs control {:?}", g.shape(hidden), g.shape(control)),
        ));
    }
    g.add(hidden, control)
}

/// Parameters of one reference-injection site.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceSite {
    pub name: String,
    pub attn: AttentionParams,
    pub gate: String,
}

impl ReferenceSite {
    pub fn new(name: &str, channels: usize, heads: usize, positional: bool) -> Result<Self> {
        let prefix = format!("adapter.ref.{name}");
        Ok(Self {
            name: name.to_string(),
            attn: AttentionParams::new(format!("{prefix}.attn"), channels, heads, channels)?
                .with_positional(positional),
            gate: format!("{prefix}.gate"),
        })
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        self.attn.init(store, rng);
        zero_conv_init(store, &self.gate, self.attn.d_model, self.attn.d_model);
    }
}

/// `hidden + zero_conv(sk_reference_attention(hidden, ref_hidden))`.
pub fn inject_reference(ctx: &mut Ctx, hidden: NodeId, ref_hidden: NodeId, site: &ReferenceSite) -> Result<NodeId> {
    if ctx.g.shape(hidden) != ctx.g.shape(ref_hidden) {
        return Err(shape_err(
            "inject_reference",
            format!("hidden {:?} vs reference {:?}", ctx.g.shape(hidden), ctx.g.shape(ref_hidden)),
        ));
    }
    let fused = sk_reference_attention(ctx, hidden, ref_hidden, &site.attn)?;
    let gated = zero_conv(ctx, fused, &site.gate)?;
    ctx.g.add(hidden, gated)
}

/// `n` copies of a `[D]` (or `[1, D]`) vector as an `[n, D]` token sequence.
pub fn tile_id_feature(g: &mut Graph, id_vec: NodeId, n: usize) -> Result<NodeId> {
    let s = g.shape(id_vec).to_vec();
    let d = match s.as_slice() {
        [d] | [1, d] => *d,
        _ => return Err(shape_err("tile_id_feature", format!("expected a vector, got {s:?}"))),
    };
    let v = g.reshape(id_vec, &[d])?;
    g.tile(v, n)
}

/// Everything that conditions one generated frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameCondition {
    pub pose: PoseImage,
    pub coeffs: ExpressionCoefficients,
    pub patches: PatchEmbeddings,
}

/// Names and shapes of all adapter parameters for one model configuration.
#[derive(Clone, Debug)]
pub struct AdapterLayout {
    pub channels: [usize; 3],
    pub pose_size: usize,
    pub expr: ExpressionProjection,
    pub encoders: [String; 3],
    pub control_attn: [AttentionParams; 3],
    pub control_gates: [String; 3],
    pub sites: Vec<ReferenceSite>,
}

impl AdapterLayout {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        let c = cfg.channels;
        let attn = |l: usize| -> Result<AttentionParams> {
            Ok(AttentionParams::new(format!("adapter.ctrl.attn{l}"), c[l], cfg.attn_heads, cfg.expr_dim)?
                .with_positional(cfg.adapter_positional))
        };
        let mut sites = Vec::new();
        for name in &cfg.reference_sites {
            let level = crate::unet::site_level(name)?;
            sites.push(ReferenceSite::new(name, c[level], cfg.attn_heads, cfg.adapter_positional)?);
        }
        Ok(Self {
            channels: c,
            pose_size: cfg.pose_image_size,
            expr: ExpressionProjection::new("adapter.expr", cfg.expr_dim),
            encoders: [0, 1, 2].map(|l| format!("adapter.ctrl.enc{l}")),
            control_attn: [attn(0)?, attn(1)?, attn(2)?],
            control_gates: [0, 1, 2].map(|l| format!("adapter.ctrl.gate{l}")),
            sites,
        })
    }

    pub fn site(&self, name: &str) -> Option<&ReferenceSite> {
        self.sites.iter().find(|s| s.name == name)
    }

    /// Random encoder/attention weights; every gate starts at zero.
    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        self.expr.init(store, rng);
        let c_in = [3, self.channels[0], self.channels[1]];
        for l in 0..3 {
            let (ci, co) = (c_in[l], self.channels[l]);
            store.init_normal(format!("{}.w", self.encoders[l]), &[co, ci, 3, 3], ci * 9, 1.0, rng);
            store.init_zeros(format!("{}.b", self.encoders[l]), &[co]);
            self.control_attn[l].init(store, rng);
            zero_conv_init(store, &self.control_gates[l], co, co);
        }
        for site in &self.sites {
            site.init(store, rng);
        }
    }

    /// Names of every zero-convolution gate parameter.
    pub fn gate_names(&self) -> Vec<String> {
        let mut v = Vec::new();
        for g in self.control_gates.iter().chain(self.sites.iter().map(|s| &s.gate)) {
            v.push(format!("{g}.w"));
            v.push(format!("{g}.b"));
        }
        v
    }

    /// `[3, D]` expression tokens of one frame condition.
    pub fn expression_tokens(&self, ctx: &mut Ctx, cond: &FrameCondition) -> Result<NodeId> {
        assemble_expression_features(ctx, &cond.coeffs, &cond.patches, &self.expr)
    }

    /// Graph for the pyramid of one frame condition.
    pub fn condition_pyramid(&self, ctx: &mut Ctx, cond: &FrameCondition) -> Result<[NodeId; 3]> {
        let pose = ctx.g.constant(cond.pose.to_tensor());
        let expr = self.expression_tokens(ctx, cond)?;
        control_pyramid(ctx, self, pose, expr)
    }

    /// Pyramid values outside any training graph.
    pub fn pyramid_tensors(&self, store: &ParamStore, cond: &FrameCondition) -> Result<[Tensor; 3]> {
        let mut g = Graph::new();
        let mut ctx = Ctx::new(&mut g, store, crate::params::Trainable::Nothing);
        let maps = self.condition_pyramid(&mut ctx, cond)?;
        Ok(maps.map(|m| g.value(m).clone()))
    }
}

/// Three-scale control maps: strided encoder over the pose raster, fusion
/// with expression tokens by SK cross-attention at each scale, and a zero
/// gate per scale.
pub fn control_pyramid(ctx: &mut Ctx, layout: &AdapterLayout, pose: NodeId, expr: NodeId) -> Result<[NodeId; 3]> {
    let s = ctx.g.shape(pose);
    if s != [3, layout.pose_size, layout.pose_size] {
        return Err(shape_err("control_pyramid", format!("pose image {s:?}, expected 3x{0}x{0}", layout.pose_size)));
    }
    let mut h = pose;
    let mut out = Vec::with_capacity(3);
    for l in 0..3 {
        let c = ctx.conv3x3(h, &layout.encoders[l], 2)?;
        h = ctx.g.silu(c)?;
        let fused = sk_cross_attention(ctx, h, expr, &layout.control_attn[l])?;
        out.push(zero_conv(ctx, fused, &layout.control_gates[l])?);
    }
    Ok([out[0], out[1], out[2]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Trainable;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fresh_gate_outputs_zero() {
        let mut store = ParamStore::new();
        zero_conv_init(&mut store, "g", 3, 2);
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ctx = Ctx::new(&mut g, &store, Trainable::Nothing);
        let x = ctx.g.constant(Tensor::randn(&[3, 4, 5], 1.0, &mut rng));
        let y = zero_conv(&mut ctx, x, "g").unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
        assert_eq!(g.shape(y), &[2, 4, 5]);
    }

    #[test]
    fn tiling_repeats_rows() {
        let mut g = Graph::new();
        let v = g.constant(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
        let t = tile_id_feature(&mut g, v, DEFAULT_ID_TILES).unwrap();
        assert_eq!(g.shape(t), &[5, 3]);
        assert!(g.value(t).data().chunks(3).all(|r| r == [1.0, 2.0, 3.0]));
    }

    #[test]
    fn add_control_checks_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 4, 4]));
        let b = g.constant(Tensor::zeros(&[2, 4, 3]));
        assert!(add_control(&mut g, a, b).is_err());
    }
}
