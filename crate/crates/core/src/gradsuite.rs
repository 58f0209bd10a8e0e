//! Finite-difference suite over every differentiable op and the composite
//! attention/adapter paths, each on several random shapes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adapter::{inject_reference, zero_conv_init, ReferenceSite};
use crate::attention::{flat_attention_baseline, sk_cross_attention, sk_reference_attention, AttentionParams};
use crate::diffusion::weighted_loss;
use crate::error::Result;
use crate::gradcheck::{grad_check, GradCheckReport};
use crate::graph::{Graph, NodeId};
use crate::motion::{temporal_attention, MotionParams};
use crate::params::{Ctx, ParamStore, Trainable};
use crate::tensor::Tensor;

pub const SUITE_H: f64 = 1e-5;
pub const SUITE_TOL: f64 = 1e-4;

/// Result of one op on one random shape.
#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub op: &'static str,
    pub shape: String,
    pub report: GradCheckReport,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.report.passed()
    }
}

fn var(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng).with_requires_grad(true)
}

fn fixed(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// `sum(out · r)` with `r` the last input, so every output element matters.
fn readout(g: &mut Graph, out: NodeId, r: NodeId) -> Result<NodeId> {
    let p = g.mul(out, r)?;
    g.sum(p)
}

fn dim(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.gen_range(lo..=hi)
}

type Builder = fn(&mut ChaCha8Rng) -> Result<(String, GradCheckReport)>;

fn check<F>(f: F, inputs: &[Tensor]) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    grad_check(f, inputs, SUITE_H, SUITE_TOL)
}

fn binary(
    rng: &mut ChaCha8Rng,
    op: fn(&mut Graph, NodeId, NodeId) -> Result<NodeId>,
) -> Result<(String, GradCheckReport)> {
    let rank = dim(rng, 1, 3);
    let shape: Vec<usize> = (0..rank).map(|_| dim(rng, 1, 4)).collect();
    let r = check(
        |g, x| {
            let y = op(g, x[0], x[1])?;
            readout(g, y, x[2])
        },
        &[var(&shape, rng), var(&shape, rng), fixed(&shape, rng)],
    )?;
    Ok((format!("{shape:?}"), r))
}

fn unary(
    rng: &mut ChaCha8Rng,
    shape: Vec<usize>,
    out_shape: Vec<usize>,
    op: impl Fn(&mut Graph, NodeId) -> Result<NodeId>,
) -> Result<(String, GradCheckReport)> {
    let r = check(
        |g, x| {
            let y = op(g, x[0])?;
            readout(g, y, x[1])
        },
        &[var(&shape, rng), fixed(&out_shape, rng)],
    )?;
    Ok((format!("{shape:?}"), r))
}

fn attention_store(params: &AttentionParams, rng: &mut ChaCha8Rng) -> ParamStore {
    let mut store = ParamStore::new();
    params.init(&mut store, rng);
    // perturb norms so their gradients are generic
    for name in params.param_names() {
        if name.ends_with("ln_g") || name.ends_with("ln_b") {
            let t = store.get(&name).unwrap().map(|v| v + 0.1);
            store.insert(name, t);
        }
    }
    store
}

/// Parameters become leaves (appended after `data`) so they are checked too.
fn with_params(store: &ParamStore, names: &[String], data: Vec<Tensor>) -> Vec<Tensor> {
    let mut v = data;
    for n in names {
        v.push(store.get(n).unwrap().clone().with_requires_grad(true));
    }
    v
}

fn bind<'g, 's>(
    g: &'g mut Graph,
    store: &'s ParamStore,
    names: &[String],
    ids: &[NodeId],
    first: usize,
) -> Ctx<'g, 's> {
    let mut ctx = Ctx::new(g, store, Trainable::Nothing);
    for (k, n) in names.iter().enumerate() {
        ctx.preset(n, ids[first + k]);
    }
    ctx
}

fn builders() -> Vec<(&'static str, Builder)> {
    vec![
        ("matmul", |rng| {
            let (m, k, n) = (dim(rng, 1, 5), dim(rng, 1, 5), dim(rng, 1, 5));
            let r = check(
                |g, x| {
                    let y = g.matmul(x[0], x[1])?;
                    readout(g, y, x[2])
                },
                &[var(&[m, k], rng), var(&[k, n], rng), fixed(&[m, n], rng)],
            )?;
            Ok((format!("[{m},{k}]x[{k},{n}]"), r))
        }),
        ("bmm", |rng| {
            let (b, m, k, n) = (dim(rng, 1, 3), dim(rng, 1, 4), dim(rng, 1, 4), dim(rng, 1, 4));
            let trans = rng.gen_bool(0.5);
            let bs = if trans { [b, n, k] } else { [b, k, n] };
            let r = check(
                |g, x| {
                    let y = g.bmm(x[0], x[1], trans)?;
                    readout(g, y, x[2])
                },
                &[var(&[b, m, k], rng), var(&bs, rng), fixed(&[b, m, n], rng)],
            )?;
            Ok((format!("[{b},{m},{k}]x{bs:?} trans_b={trans}"), r))
        }),
        ("add", |rng| binary(rng, Graph::add)),
        ("sub", |rng| binary(rng, Graph::sub)),
        ("mul", |rng| binary(rng, Graph::mul)),
        ("add_bias", |rng| {
            let (n, d) = (dim(rng, 1, 5), dim(rng, 1, 5));
            let r = check(
                |g, x| {
                    let y = g.add_bias(x[0], x[1])?;
                    readout(g, y, x[2])
                },
                &[var(&[n, d], rng), var(&[d], rng), fixed(&[n, d], rng)],
            )?;
            Ok((format!("[{n},{d}]+[{d}]"), r))
        }),
        ("add_channel", |rng| {
            let (c, h, w) = (dim(rng, 1, 4), dim(rng, 1, 4), dim(rng, 1, 4));
            let r = check(
                |g, x| {
                    let y = g.add_channel(x[0], x[1])?;
                    readout(g, y, x[2])
                },
                &[var(&[c, h, w], rng), var(&[c], rng), fixed(&[c, h, w], rng)],
            )?;
            Ok((format!("[{c},{h},{w}]+[{c}]"), r))
        }),
        ("scale", |rng| {
            let s = vec![dim(rng, 1, 5), dim(rng, 1, 5)];
            let c = rng.gen_range(-2.0..2.0);
            unary(rng, s.clone(), s, move |g, x| g.scale(x, c))
        }),
        ("silu", |rng| {
            let s = vec![dim(rng, 1, 5), dim(rng, 1, 5)];
            unary(rng, s.clone(), s, Graph::silu)
        }),
        ("sum", |rng| {
            let s = vec![dim(rng, 1, 5), dim(rng, 1, 5)];
            let r = check(
                |g, x| {
                    let sq = g.mul(x[0], x[0])?;
                    g.sum(sq)
                },
                &[var(&s, rng)],
            )?;
            Ok((format!("{s:?}"), r))
        }),
        ("mean", |rng| {
            let s = vec![dim(rng, 1, 5), dim(rng, 1, 5)];
            let r = check(
                |g, x| {
                    let sq = g.mul(x[0], x[0])?;
                    g.mean(sq)
                },
                &[var(&s, rng)],
            )?;
            Ok((format!("{s:?}"), r))
        }),
        ("softmax", |rng| {
            let s = vec![dim(rng, 1, 4), dim(rng, 1, 4), dim(rng, 1, 4)];
            let axis = rng.gen_range(0..3);
            let (shape, r) = unary(rng, s.clone(), s, move |g, x| g.softmax(x, axis))?;
            Ok((format!("{shape} axis={axis}"), r))
        }),
        ("layer_norm", |rng| {
            let (n, d) = (dim(rng, 1, 4), dim(rng, 2, 6));
            let r = check(
                |g, x| {
                    let y = g.layer_norm(x[0], x[1], x[2], 1e-5)?;
                    readout(g, y, x[3])
                },
                &[var(&[n, d], rng), var(&[d], rng), var(&[d], rng), fixed(&[n, d], rng)],
            )?;
            Ok((format!("[{n},{d}]"), r))
        }),
        ("conv1x1", |rng| {
            let (ci, co, h, w) = (dim(rng, 1, 4), dim(rng, 1, 4), dim(rng, 1, 4), dim(rng, 1, 4));
            let r = check(
                |g, x| {
                    let y = g.conv1x1(x[0], x[1], x[2])?;
                    readout(g, y, x[3])
                },
                &[var(&[ci, h, w], rng), var(&[co, ci], rng), var(&[co], rng), fixed(&[co, h, w], rng)],
            )?;
            Ok((format!("[{ci},{h},{w}]->{co}"), r))
        }),
        ("conv3x3", |rng| {
            let (ci, co, h, w) = (dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 5), dim(rng, 1, 5));
            let stride = dim(rng, 1, 2);
            let (oh, ow) = ((h - 1) / stride + 1, (w - 1) / stride + 1);
            let r = check(
                |g, x| {
                    let y = g.conv3x3(x[0], x[1], x[2], stride)?;
                    readout(g, y, x[3])
                },
                &[var(&[ci, h, w], rng), var(&[co, ci, 3, 3], rng), var(&[co], rng), fixed(&[co, oh, ow], rng)],
            )?;
            Ok((format!("[{ci},{h},{w}]->{co} stride={stride}"), r))
        }),
        ("upsample2x", |rng| {
            let (c, h, w) = (dim(rng, 1, 3), dim(rng, 1, 4), dim(rng, 1, 4));
            unary(rng, vec![c, h, w], vec![c, 2 * h, 2 * w], Graph::upsample2x)
        }),
        ("permute", |rng| {
            let s = [dim(rng, 1, 4), dim(rng, 1, 4), dim(rng, 1, 4)];
            let perms = [[0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
            let p = perms[rng.gen_range(0..perms.len())];
            let (shape, r) = unary(rng, s.to_vec(), p.iter().map(|&a| s[a]).collect(), move |g, x| g.permute(x, &p))?;
            Ok((format!("{shape} perm={p:?}"), r))
        }),
        ("reshape", |rng| {
            let (a, b, c) = (dim(rng, 1, 4), dim(rng, 1, 4), dim(rng, 1, 4));
            unary(rng, vec![a, b, c], vec![a * b, c], move |g, x| g.reshape(x, &[a * b, c]))
        }),
        ("concat", |rng| {
            let axis = rng.gen_range(0..2);
            let (a, b, other) = (dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3));
            let (sa, sb, so) = if axis == 0 {
                ([a, other], [b, other], [a + b, other])
            } else {
                ([other, a], [other, b], [other, a + b])
            };
            let r = check(
                |g, x| {
                    let y = g.concat(&[x[0], x[1]], axis)?;
                    readout(g, y, x[2])
                },
                &[var(&sa, rng), var(&sb, rng), fixed(&so, rng)],
            )?;
            Ok((format!("{sa:?}++{sb:?} axis={axis}"), r))
        }),
        ("slice", |rng| {
            let (n, m) = (dim(rng, 2, 6), dim(rng, 1, 3));
            let start = rng.gen_range(0..n);
            let len = rng.gen_range(1..=n - start);
            let (shape, r) = unary(rng, vec![m, n], vec![m, len], move |g, x| g.slice(x, 1, start, len))?;
            Ok((format!("{shape} [{start}..+{len}]"), r))
        }),
        ("tile", |rng| {
            let (a, b, n) = (dim(rng, 1, 4), dim(rng, 1, 4), dim(rng, 1, 3));
            unary(rng, vec![a, b], vec![n, a, b], move |g, x| g.tile(x, n))
        }),
        ("sk_cross_attention", |rng| {
            let heads = dim(rng, 1, 2);
            let d = heads * dim(rng, 1, 2);
            let (h, w, l, dc) = (dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3));
            let pe = rng.gen_bool(0.5);
            let params = AttentionParams::new("a", d, heads, dc)?.with_positional(pe);
            let store = attention_store(&params, rng);
            let names = params.param_names();
            let inputs =
                with_params(&store, &names, vec![var(&[d, h, w], rng), var(&[l, dc], rng), fixed(&[d, h, w], rng)]);
            let r = check(
                |g, x| {
                    let mut ctx = bind(g, &store, &names, x, 3);
                    let y = sk_cross_attention(&mut ctx, x[0], x[1], &params)?;
                    readout(ctx.g, y, x[2])
                },
                &inputs,
            )?;
            Ok((format!("map [{d},{h},{w}] seq [{l},{dc}] heads={heads} pe={pe}"), r))
        }),
        ("sk_reference_attention", |rng| {
            let heads = dim(rng, 1, 2);
            let d = heads * dim(rng, 1, 2);
            let (h, w) = (dim(rng, 1, 3), dim(rng, 1, 3));
            let pe = rng.gen_bool(0.5);
            let params = AttentionParams::new("a", d, heads, d)?.with_positional(pe);
            let store = attention_store(&params, rng);
            let names = params.param_names();
            let inputs =
                with_params(&store, &names, vec![var(&[d, h, w], rng), var(&[d, h, w], rng), fixed(&[d, h, w], rng)]);
            let r = check(
                |g, x| {
                    let mut ctx = bind(g, &store, &names, x, 3);
                    let y = sk_reference_attention(&mut ctx, x[0], x[1], &params)?;
                    readout(ctx.g, y, x[2])
                },
                &inputs,
            )?;
            Ok((format!("map [{d},{h},{w}] heads={heads} pe={pe}"), r))
        }),
        ("flat_attention_baseline", |rng| {
            let d = dim(rng, 1, 3);
            let (h, w, l) = (dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3));
            let params = AttentionParams::new("a", d, 1, d)?;
            let store = attention_store(&params, rng);
            let r = check(
                |g, x| {
                    let mut ctx = Ctx::new(g, &store, Trainable::Nothing);
                    let y = flat_attention_baseline(&mut ctx, x[0], x[1], &params)?;
                    readout(ctx.g, y, x[2])
                },
                &[var(&[d, h, w], rng), var(&[l, d], rng), fixed(&[d, h, w], rng)],
            )?;
            Ok((format!("map [{d},{h},{w}] seq [{l},{d}]"), r))
        }),
        ("temporal_attention", |rng| {
            let (c, h, w, f) = (dim(rng, 1, 3), dim(rng, 1, 2), dim(rng, 1, 2), dim(rng, 1, 3));
            let params = MotionParams::new("m", c, 1, rng.gen_bool(0.5))?;
            let mut store = ParamStore::new();
            params.init(&mut store, rng);
            // open the gate so the attention path is exercised
            store.insert(format!("{}.w", params.gate), fixed(&[c, c], rng));
            let mut inputs: Vec<Tensor> = (0..f).map(|_| var(&[c, h, w], rng)).collect();
            inputs.extend((0..f).map(|_| fixed(&[c, h, w], rng)));
            let r = check(
                |g, x| {
                    let mut ctx = Ctx::new(g, &store, Trainable::Nothing);
                    let out = temporal_attention(&mut ctx, &x[..f], &params)?;
                    let mut acc = readout(ctx.g, out[0], x[f])?;
                    for i in 1..f {
                        let t = readout(ctx.g, out[i], x[f + i])?;
                        acc = ctx.g.add(acc, t)?;
                    }
                    Ok(acc)
                },
                &inputs,
            )?;
            Ok((format!("{f} frames of [{c},{h},{w}]"), r))
        }),
        ("inject_reference", |rng| {
            let d = dim(rng, 1, 3);
            let (h, w) = (dim(rng, 1, 3), dim(rng, 1, 3));
            let site = ReferenceSite::new("s", d, 1, true)?;
            let mut store = ParamStore::new();
            site.init(&mut store, rng);
            zero_conv_init(&mut store, &site.gate, d, d);
            let gate = vec![format!("{}.w", site.gate), format!("{}.b", site.gate)];
            let inputs = vec![
                var(&[d, h, w], rng),
                var(&[d, h, w], rng),
                fixed(&[d, h, w], rng),
                var(&[d, d], rng),
                var(&[d], rng),
            ];
            let r = check(
                |g, x| {
                    let mut ctx = bind(g, &store, &gate, x, 3);
                    let y = inject_reference(&mut ctx, x[0], x[1], &site)?;
                    readout(ctx.g, y, x[2])
                },
                &inputs,
            )?;
            Ok((format!("[{d},{h},{w}]"), r))
        }),
        ("weighted_loss", |rng| {
            let (c, h, w) = (dim(rng, 1, 4), dim(rng, 1, 4), dim(rng, 1, 4));
            let mask =
                Tensor::new(&[1, h, w], (0..h * w).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect())?;
            let t = rng.gen_range(0.0..1000.0);
            let r = check(
                |g, x| Ok(weighted_loss(g, x[0], x[1], &mask, t, 1e-8)?.total),
                &[var(&[c, h, w], rng), var(&[c, h, w], rng)],
            )?;
            Ok((format!("[{c},{h},{w}] t={t:.1}"), r))
        }),
    ]
}

/// Names of the ops the suite covers.
pub fn suite_ops() -> Vec<&'static str> {
    builders().into_iter().map(|(n, _)| n).collect()
}

/// Runs every op on `shapes_per_op` random shapes drawn from `seed`.
pub fn run_suite(seed: u64, shapes_per_op: usize) -> Result<Vec<SuiteEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (op, build) in builders() {
        for _ in 0..shapes_per_op {
            let (shape, report) = build(&mut rng)?;
            out.push(SuiteEntry { op, shape, report });
        }
    }
    Ok(out)
}
