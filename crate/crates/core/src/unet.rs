//! Three-level denoising UNet with optional adapter hooks.
//!
//! Base weights live under `base.*`, adapter weights under `adapter.*`,
//! motion weights under `motion.*`. Frames are processed in lockstep so the
//! temporal blocks on the up path can mix them.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adapter::{add_control, inject_reference, AdapterLayout};
use crate::attention::{sinusoidal_encoding, LAYER_NORM_EPS};
use crate::config::ModelConfig;
use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, NodeId};
use crate::motion::{temporal_attention, MotionParams};
use crate::params::{Ctx, ParamStore, Trainable};
use crate::tensor::Tensor;

/// Injection sites in forward order.
pub const SITES: [&str; 6] = ["d0", "d1", "d2", "u2", "u1", "u0"];

pub fn site_level(name: &str) -> Result<usize> {
    match name {
        "d0" | "u0" => Ok(0),
        "d1" | "u1" => Ok(1),
        "d2" | "u2" => Ok(2),
        _ => Err(Error::InvalidConfig(format!("unknown site `{name}`"))),
    }
}

pub const BASE_PREFIX: &str = "base.";
pub const ADAPTER_PREFIX: &str = "adapter.";
pub const MOTION_PREFIX: &str = "motion.";

/// Optional inputs beyond the noisy latents.
#[derive(Clone, Copy, Debug, Default)]
pub struct Conditioning<'a> {
    /// Control pyramid per frame; a single entry is shared by all frames.
    pub control: Option<&'a [[NodeId; 3]]>,
    /// Reference features keyed by site name.
    pub reference: Option<&'a BTreeMap<String, NodeId>>,
    pub motion: bool,
}

pub struct ForwardOutput {
    /// Network output per frame (clean latent or noise, see `Prediction`).
    pub pred: Vec<NodeId>,
    /// Hidden map at every site, before injection, per frame.
    pub site_features: BTreeMap<String, Vec<NodeId>>,
}

enum Init {
    Normal { fan_in: usize, gain: f64 },
    Zeros,
    Ones,
}

/// Model structure: base UNet, adapter layout and motion blocks.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub adapters: AdapterLayout,
    pub motion: [MotionParams; 3],
}

impl Model {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let m = |l: usize| {
            MotionParams::new(&format!("motion.u{l}"), cfg.channels[l], cfg.attn_heads, cfg.motion_positional)
        };
        Ok(Self { cfg: cfg.clone(), adapters: AdapterLayout::new(cfg)?, motion: [m(0)?, m(1)?, m(2)?] })
    }

    fn conv_shape(&self, c_out: usize, c_in: usize, k: usize) -> Vec<usize> {
        if k == 1 {
            vec![c_out, c_in]
        } else {
            vec![c_out, c_in, 3, 3]
        }
    }

    fn res_block_specs(&self, p: &str, c_in: usize, c_out: usize, out: &mut Vec<(String, Vec<usize>, Init)>) {
        let k = self.cfg.res_kernel;
        let te = self.cfg.time_embed_dim;
        out.push((format!("{p}.n1.g"), vec![c_in], Init::Ones));
        out.push((format!("{p}.n1.b"), vec![c_in], Init::Zeros));
        out.push((
            format!("{p}.c1.w"),
            self.conv_shape(c_out, c_in, k),
            Init::Normal { fan_in: c_in * k * k, gain: 1.0 },
        ));
        out.push((format!("{p}.c1.b"), vec![c_out], Init::Zeros));
        out.push((format!("{p}.t.w"), vec![te, c_out], Init::Normal { fan_in: te, gain: 1.0 }));
        out.push((format!("{p}.t.b"), vec![c_out], Init::Zeros));
        out.push((format!("{p}.n2.g"), vec![c_out], Init::Ones));
        out.push((format!("{p}.n2.b"), vec![c_out], Init::Zeros));
        out.push((
            format!("{p}.c2.w"),
            self.conv_shape(c_out, c_out, k),
            Init::Normal { fan_in: c_out * k * k, gain: 0.3 },
        ));
        out.push((format!("{p}.c2.b"), vec![c_out], Init::Zeros));
        if c_in != c_out {
            out.push((format!("{p}.skip.w"), vec![c_out, c_in], Init::Normal { fan_in: c_in, gain: 1.0 }));
            out.push((format!("{p}.skip.b"), vec![c_out], Init::Zeros));
        }
    }

    fn base_specs(&self) -> Vec<(String, Vec<usize>, Init)> {
        let c = self.cfg.channels;
        let (lc, k, te) = (self.cfg.latent_channels, self.cfg.res_kernel, self.cfg.time_embed_dim);
        let mut v = Vec::new();
        v.push(("base.time.l1.w".into(), vec![te, te], Init::Normal { fan_in: te, gain: 1.0 }));
        v.push(("base.time.l1.b".into(), vec![te], Init::Zeros));
        v.push(("base.time.l2.w".into(), vec![te, te], Init::Normal { fan_in: te, gain: 1.0 }));
        v.push(("base.time.l2.b".into(), vec![te], Init::Zeros));
        v.push(("base.in.w".into(), vec![c[0], lc, 3, 3], Init::Normal { fan_in: lc * 9, gain: 1.0 }));
        v.push(("base.in.b".into(), vec![c[0]], Init::Zeros));
        for l in 0..3 {
            if l > 0 {
                v.push((
                    format!("base.down{l}.w"),
                    vec![c[l], c[l - 1], 3, 3],
                    Init::Normal { fan_in: c[l - 1] * 9, gain: 1.0 },
                ));
                v.push((format!("base.down{l}.b"), vec![c[l]], Init::Zeros));
            }
            for i in 0..self.cfg.res_blocks {
                self.res_block_specs(&format!("base.d{l}.r{i}"), c[l], c[l], &mut v);
            }
        }
        for l in (0..3).rev() {
            if l < 2 {
                v.push((format!("base.u{l}.up.w"), vec![c[l], c[l + 1]], Init::Normal { fan_in: c[l + 1], gain: 1.0 }));
                v.push((format!("base.u{l}.up.b"), vec![c[l]], Init::Zeros));
            }
            for i in 0..self.cfg.res_blocks {
                let c_in = if i == 0 && l < 2 { 2 * c[l] } else { c[l] };
                self.res_block_specs(&format!("base.u{l}.r{i}"), c_in, c[l], &mut v);
            }
        }
        v.push(("base.out.n.g".into(), vec![c[0]], Init::Ones));
        v.push(("base.out.n.b".into(), vec![c[0]], Init::Zeros));
        v.push(("base.out.w".into(), self.conv_shape(lc, c[0], k), Init::Normal { fan_in: c[0] * k * k, gain: 1.0 }));
        v.push(("base.out.b".into(), vec![lc], Init::Zeros));
        v
    }

    pub fn init_base<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        for (name, shape, init) in self.base_specs() {
            match init {
                Init::Normal { fan_in, gain } => store.init_normal(name, &shape, fan_in, gain, rng),
                Init::Zeros => store.init_zeros(name, &shape),
                Init::Ones => store.init_ones(name, &shape),
            }
        }
    }

    pub fn init_adapters<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        self.adapters.init(store, rng);
    }

    pub fn init_motion<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        for m in &self.motion {
            m.init(store, rng);
        }
    }

    /// Fresh base, adapter and motion weights from one seed.
    pub fn init_all(&self, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        self.init_base(&mut store, &mut rng);
        self.init_adapters(&mut store, &mut rng);
        self.init_motion(&mut store, &mut rng);
        store
    }

    fn channel_norm(&self, ctx: &mut Ctx, x: NodeId, prefix: &str) -> Result<NodeId> {
        let g = ctx.p(&format!("{prefix}.g"))?;
        let b = ctx.p(&format!("{prefix}.b"))?;
        let t = ctx.g.permute(x, &[1, 2, 0])?;
        let t = ctx.g.layer_norm(t, g, b, LAYER_NORM_EPS)?;
        ctx.g.permute(t, &[2, 0, 1])
    }

    fn spatial_conv(&self, ctx: &mut Ctx, x: NodeId, prefix: &str) -> Result<NodeId> {
        if self.cfg.res_kernel == 1 {
            ctx.conv1x1(x, prefix)
        } else {
            ctx.conv3x3(x, prefix, 1)
        }
    }

    fn res_block(&self, ctx: &mut Ctx, x: NodeId, temb: NodeId, p: &str) -> Result<NodeId> {
        let h = self.channel_norm(ctx, x, &format!("{p}.n1"))?;
        let h = ctx.g.silu(h)?;
        let h = self.spatial_conv(ctx, h, &format!("{p}.c1"))?;
        let tproj = ctx.linear(temb, &format!("{p}.t.w"), Some(&format!("{p}.t.b")))?;
        let c = ctx.g.shape(tproj)[1];
        let tproj = ctx.g.reshape(tproj, &[c])?;
        let h = ctx.g.add_channel(h, tproj)?;
        let h = self.channel_norm(ctx, h, &format!("{p}.n2"))?;
        let h = ctx.g.silu(h)?;
        let h = self.spatial_conv(ctx, h, &format!("{p}.c2"))?;
        let skip_name = format!("{p}.skip.w");
        let skip = if ctx.store().contains(&skip_name) { ctx.conv1x1(x, &format!("{p}.skip"))? } else { x };
        ctx.g.add(skip, h)
    }

    fn time_embedding(&self, ctx: &mut Ctx, t: f64) -> Result<NodeId> {
        let te = self.cfg.time_embed_dim;
        let s = ctx.g.constant(sinusoidal_encoding(&[t], te));
        let h = ctx.linear(s, "base.time.l1.w", Some("base.time.l1.b"))?;
        let h = ctx.g.silu(h)?;
        ctx.linear(h, "base.time.l2.w", Some("base.time.l2.b"))
    }

    fn site(
        &self,
        ctx: &mut Ctx,
        name: &str,
        h: Vec<NodeId>,
        cond: &Conditioning,
        captured: &mut BTreeMap<String, Vec<NodeId>>,
    ) -> Result<Vec<NodeId>> {
        captured.insert(name.to_string(), h.clone());
        let (Some(refs), Some(site)) = (cond.reference, self.adapters.site(name)) else {
            return Ok(h);
        };
        let Some(&r) = refs.get(name) else {
            return Ok(h);
        };
        h.into_iter().map(|x| inject_reference(ctx, x, r, site)).collect()
    }

    /// Noise prediction for `frames` (each `[latent_channels, s, s]`) at
    /// timestep `t`.
    pub fn forward(&self, ctx: &mut Ctx, frames: &[NodeId], t: f64, cond: &Conditioning) -> Result<ForwardOutput> {
        let shape = self.cfg.latent_shape();
        for &f in frames {
            if ctx.g.shape(f) != shape {
                return Err(shape_err("unet_forward", format!("latent {:?}, expected {shape:?}", ctx.g.shape(f))));
            }
        }
        if frames.is_empty() {
            return Err(shape_err("unet_forward", "no frames"));
        }
        if let Some(c) = cond.control {
            if c.len() != 1 && c.len() != frames.len() {
                return Err(shape_err(
                    "unet_forward",
                    format!("{} control pyramids for {} frames", c.len(), frames.len()),
                ));
            }
        }
        let temb = self.time_embedding(ctx, t)?;
        let mut captured = BTreeMap::new();
        let mut h: Vec<NodeId> = frames.iter().map(|&f| ctx.conv3x3(f, "base.in", 1)).collect::<Result<_>>()?;
        let mut skips: Vec<Vec<NodeId>> = Vec::with_capacity(3);
        for l in 0..3 {
            if l > 0 {
                h = h.into_iter().map(|x| ctx.conv3x3(x, &format!("base.down{l}"), 2)).collect::<Result<_>>()?;
            }
            for i in 0..self.cfg.res_blocks {
                let p = format!("base.d{l}.r{i}");
                h = h.into_iter().map(|x| self.res_block(ctx, x, temb, &p)).collect::<Result<_>>()?;
            }
            if let Some(control) = cond.control {
                h = h
                    .into_iter()
                    .enumerate()
                    .map(|(f, x)| add_control(ctx.g, x, control[if control.len() == 1 { 0 } else { f }][l]))
                    .collect::<Result<_>>()?;
            }
            h = self.site(ctx, SITES[l], h, cond, &mut captured)?;
            skips.push(h.clone());
        }
        for l in (0..3).rev() {
            if l < 2 {
                let mut next = Vec::with_capacity(h.len());
                for (x, &s) in h.into_iter().zip(&skips[l]) {
                    let u = ctx.g.upsample2x(x)?;
                    let u = ctx.conv1x1(u, &format!("base.u{l}.up"))?;
                    next.push(ctx.g.concat(&[u, s], 0)?);
                }
                h = next;
            }
            for i in 0..self.cfg.res_blocks {
                let p = format!("base.u{l}.r{i}");
                h = h.into_iter().map(|x| self.res_block(ctx, x, temb, &p)).collect::<Result<_>>()?;
            }
            h = self.site(ctx, SITES[5 - l], h, cond, &mut captured)?;
            if cond.motion {
                h = temporal_attention(ctx, &h, &self.motion[l])?;
            }
        }
        let mut pred = Vec::with_capacity(h.len());
        for x in h {
            let y = self.channel_norm(ctx, x, "base.out.n")?;
            let y = ctx.g.silu(y)?;
            pred.push(self.spatial_conv(ctx, y, "base.out")?);
        }
        Ok(ForwardOutput { pred, site_features: captured })
    }

    /// Frozen-base hidden maps of `ref_latent` at every configured site,
    /// evaluated once at timestep `t_ref`.
    pub fn reference_pass(
        &self,
        store: &ParamStore,
        ref_latent: &Tensor,
        t_ref: f64,
    ) -> Result<BTreeMap<String, Tensor>> {
        let mut g = Graph::new();
        let mut ctx = Ctx::new(&mut g, store, Trainable::Nothing);
        let z = ctx.g.constant(ref_latent.clone());
        let out = self.forward(&mut ctx, &[z], t_ref, &Conditioning::default())?;
        let mut feats = BTreeMap::new();
        for site in &self.adapters.sites {
            let id = out.site_features[&site.name][0];
            feats.insert(site.name.clone(), g.value(id).clone());
        }
        Ok(feats)
    }
}

/// Adds reference tensors to `g` as constants.
pub fn bind_reference(g: &mut Graph, feats: &BTreeMap<String, Tensor>) -> BTreeMap<String, NodeId> {
    feats.iter().map(|(k, v)| (k.clone(), g.constant(v.clone()))).collect()
}

/// Adds per-frame pyramid tensors to `g` as constants.
pub fn bind_control(g: &mut Graph, pyramids: &[[Tensor; 3]]) -> Vec<[NodeId; 3]> {
    pyramids.iter().map(|p| [0, 1, 2].map(|l| g.constant(p[l].clone()))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            latent_size: 8,
            pose_image_size: 16,
            channels: [8, 8, 16],
            res_blocks: 1,
            expr_dim: 8,
            time_embed_dim: 8,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn output_shape_and_sites() {
        let model = Model::new(&small()).unwrap();
        let store = model.init_all(1);
        let mut g = Graph::new();
        let mut ctx = Ctx::new(&mut g, &store, Trainable::Nothing);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = ctx.g.constant(Tensor::randn(&[4, 8, 8], 1.0, &mut rng));
        let out = model.forward(&mut ctx, &[z], 10.0, &Conditioning::default()).unwrap();
        assert_eq!(g.shape(out.pred[0]), &[4, 8, 8]);
        assert_eq!(g.shape(out.site_features["d2"][0]), &[16, 2, 2]);
        assert_eq!(g.shape(out.site_features["u0"][0]), &[8, 8, 8]);
    }
}
