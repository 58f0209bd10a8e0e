//! Independent oracles shared by the integration tests and the acceptance run.
#![allow(dead_code)]

use nalgebra::{Matrix3, Point3, Rotation3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use skattn::attention::{sk_cross_attention, sk_reference_attention, AttentionParams, Axis, LAYER_NORM_EPS};
use skattn::{Ctx, Graph, ParamStore, Tensor, Trainable};

/// Plain-loop pre-norm residual multi-head attention of one token slice.
pub struct Oracle<'a> {
    pub store: &'a ParamStore,
    pub params: &'a AttentionParams,
    pub axis: Axis,
}

impl Oracle<'_> {
    fn w(&self, what: &str) -> Vec<f64> {
        self.store.get(&self.params.name(self.axis, what)).unwrap().data().to_vec()
    }

    fn matvec(x: &[f64], w: &[f64], d_out: usize) -> Vec<f64> {
        (0..d_out).map(|j| x.iter().enumerate().map(|(i, xi)| xi * w[i * d_out + j]).sum()).collect()
    }

    fn layer_norm(&self, x: &[f64]) -> Vec<f64> {
        let (g, b) = (self.w("ln_g"), self.w("ln_b"));
        let n = x.len() as f64;
        let mu = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
        x.iter().enumerate().map(|(i, v)| (v - mu) / (var + LAYER_NORM_EPS).sqrt() * g[i] + b[i]).collect()
    }

    /// `tokens` attend to `context` (normed tokens when `None`).
    pub fn block(&self, tokens: &[Vec<f64>], context: Option<&[Vec<f64>]>) -> Vec<Vec<f64>> {
        let d = self.params.d_model;
        let heads = self.params.n_heads;
        let dh = d / heads;
        let normed: Vec<Vec<f64>> = tokens.iter().map(|t| self.layer_norm(t)).collect();
        let ctx_tokens = context.map(|c| c.to_vec()).unwrap_or_else(|| normed.clone());
        let (wq, wk, wv, wo) = (self.w("wq"), self.w("wk"), self.w("wv"), self.w("wo"));
        let q: Vec<Vec<f64>> = normed.iter().map(|t| Self::matvec(t, &wq, d)).collect();
        let k: Vec<Vec<f64>> = ctx_tokens.iter().map(|t| Self::matvec(t, &wk, d)).collect();
        let v: Vec<Vec<f64>> = ctx_tokens.iter().map(|t| Self::matvec(t, &wv, d)).collect();
        tokens
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let mut merged = vec![0.0; d];
                for h in 0..heads {
                    let r = h * dh..(h + 1) * dh;
                    let scores: Vec<f64> = k
                        .iter()
                        .map(|kj| {
                            q[i][r.clone()].iter().zip(&kj[r.clone()]).map(|(a, b)| a * b).sum::<f64>()
                                / (dh as f64).sqrt()
                        })
                        .collect();
                    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                    let z: f64 = e.iter().sum();
                    for (j, vj) in v.iter().enumerate() {
                        for c in r.clone() {
                            merged[c] += e[j] / z * vj[c];
                        }
                    }
                }
                let o = Self::matvec(&merged, &wo, d);
                x.iter().zip(o).map(|(a, b)| a + b).collect()
            })
            .collect()
    }
}

pub fn slice_tokens(map: &Tensor, axis: Axis, idx: usize) -> Vec<Vec<f64>> {
    let s = map.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let at = |ch: usize, y: usize, x: usize| map.data()[(ch * h + y) * w + x];
    match axis {
        Axis::Rows => (0..w).map(|x| (0..c).map(|ch| at(ch, idx, x)).collect()).collect(),
        Axis::Cols => (0..h).map(|y| (0..c).map(|ch| at(ch, y, idx)).collect()).collect(),
    }
}

pub fn seq_tokens(seq: &Tensor) -> Vec<Vec<f64>> {
    seq.data().chunks(seq.shape()[1]).map(|r| r.to_vec()).collect()
}

pub fn setup(d: usize, heads: usize, dc: usize, seed: u64) -> (ParamStore, AttentionParams, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = AttentionParams::new("a", d, heads, dc).unwrap();
    let mut store = ParamStore::new();
    params.init(&mut store, &mut rng);
    for name in params.param_names().into_iter().filter(|n| n.contains(".ln_")) {
        let t = Tensor::randn(&[d], 0.3, &mut rng).map(|v| v + if name.ends_with("ln_g") { 1.0 } else { 0.0 });
        store.insert(name, t);
    }
    (store, params, rng)
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn permute_axis(t: &Tensor, axis: usize, perm: &[usize]) -> Tensor {
    let s = t.shape().to_vec();
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut out = vec![0.0; t.numel()];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = if axis == 1 { (perm[y], x) } else { (y, perm[x]) };
                out[(ch * h + y) * w + x] = t.data()[(ch * h + sy) * w + sx];
            }
        }
    }
    Tensor::new(&s, out).unwrap()
}

pub fn run_sk(store: &ParamStore, params: &AttentionParams, map: &Tensor, other: &Tensor, reference: bool) -> Tensor {
    let mut g = Graph::new();
    let mut ctx = Ctx::new(&mut g, store, Trainable::Nothing);
    let (m, o) = (ctx.g.constant(map.clone()), ctx.g.constant(other.clone()));
    let out = if reference {
        sk_reference_attention(&mut ctx, m, o, params).unwrap()
    } else {
        sk_cross_attention(&mut ctx, m, o, params).unwrap()
    };
    ctx.g.value(out).clone()
}

/// Corner pixels projected with nalgebra: `R = Rz(roll)·Ry(yaw)·Rx(pitch)`,
/// pinhole `K`, round to nearest.
pub fn nalgebra_corners(yaw: f64, pitch: f64, roll: f64, t: [f64; 3], focal: f64, size: usize) -> [(i64, i64); 4] {
    let r = Rotation3::from_euler_angles(pitch, yaw, roll);
    let c = size as f64 / 2.0;
    let k = Matrix3::new(focal, 0.0, c, 0.0, focal, c, 0.0, 0.0, 1.0);
    let (a, b) = (1.0, 1.4);
    let corners = [(-a, -b), (a, -b), (a, b), (-a, b)];
    corners.map(|(x, y)| {
        let p = r * Point3::new(x, y, 0.0) + Vector3::new(t[0], t[1], t[2]);
        let uvw = k * p.coords;
        ((uvw.x / uvw.z).round() as i64, (uvw.y / uvw.z).round() as i64)
    })
}

pub const CASES: [(&str, f64, f64, f64, [f64; 3]); 4] = [
    ("identity", 0.0, 0.0, 0.0, [0.0, 0.0, 5.0]),
    ("roll", 0.0, 0.0, 0.4, [0.0, 0.0, 5.0]),
    ("yaw", 0.5, 0.0, 0.0, [0.3, 0.0, 5.0]),
    ("pitch", 0.0, -0.45, 0.15, [0.0, -0.2, 5.5]),
];

/// Frames rebuilt from unblended patches: frame `i` of patch `k > 0` with
/// `i < overlap` moves the running value toward itself by `(i+1)/(overlap+1)`.
pub fn cross_fade(patches: &[skattn::video::Patch], n: usize, overlap: usize) -> Vec<Vec<f64>> {
    let mut out: Vec<Option<Vec<f64>>> = vec![None; n];
    for (k, p) in patches.iter().enumerate() {
        for (i, f) in p.frames.iter().enumerate() {
            let slot = &mut out[p.start + i];
            *slot = Some(match slot.take() {
                Some(prev) if k > 0 && i < overlap => {
                    let w = (i + 1) as f64 / (overlap + 1) as f64;
                    prev.iter().zip(f.data()).map(|(a, b)| a + w * (b - a)).collect()
                }
                _ => f.data().to_vec(),
            });
        }
    }
    out.into_iter().map(|f| f.expect("every frame covered")).collect()
}
