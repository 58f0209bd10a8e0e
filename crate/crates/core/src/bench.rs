//! Attention cost: closed-form MAC predictions next to instrumented counts
//! and wall time.

use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{
    attention_op_count, flat_attention_baseline, flat_self_attention, sk_cross_attention, sk_reference_attention,
    AttentionParams, AttentionVariant, MacCount,
};
use crate::error::Result;
use crate::graph::Graph;
use crate::kernels::count_macs;
use crate::params::{Ctx, ParamStore, Trainable};
use crate::tensor::Tensor;

/// Runs one forward pass of `variant` on a random `d×h×w` map with `l`
/// context tokens, returning the counted MACs and the elapsed time.
pub fn measure_attention(
    h: usize,
    w: usize,
    l: usize,
    d: usize,
    variant: AttentionVariant,
    seed: u64,
) -> Result<(MacCount, Duration)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = AttentionParams::new("bench", d, 1, d)?;
    let mut store = ParamStore::new();
    params.init(&mut store, &mut rng);
    let map = Tensor::randn(&[d, h, w], 1.0, &mut rng);
    let seq = Tensor::randn(&[l, d], 1.0, &mut rng);
    let reference = Tensor::randn(&[d, h, w], 1.0, &mut rng);
    let mut g = Graph::new();
    let mut ctx = Ctx::new(&mut g, &store, Trainable::Nothing);
    let m = ctx.g.constant(map);
    let s = ctx.g.constant(seq);
    let r = ctx.g.constant(reference);
    let start = Instant::now();
    let (out, score, value) = count_macs(|| match variant {
        AttentionVariant::FlatSelf => flat_self_attention(&mut ctx, m, &params),
        AttentionVariant::FlatCross => flat_attention_baseline(&mut ctx, m, s, &params),
        AttentionVariant::SkCross => sk_cross_attention(&mut ctx, m, s, &params),
        AttentionVariant::SkReference => sk_reference_attention(&mut ctx, m, r, &params),
    });
    let elapsed = start.elapsed();
    out?;
    Ok((MacCount { score, value }, elapsed))
}

/// One CSV row of `bench-attn`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub variant: &'static str,
    pub h: usize,
    pub w: usize,
    pub l: usize,
    pub d: usize,
    pub predicted_score_macs: u64,
    pub predicted_value_macs: u64,
    pub measured_score_macs: u64,
    pub measured_value_macs: u64,
    pub wall_ms: f64,
}

impl BenchRow {
    pub fn matches(&self) -> bool {
        self.predicted_score_macs == self.measured_score_macs && self.predicted_value_macs == self.measured_value_macs
    }
}

/// Best wall time over `reps` runs; MAC counts come from the first.
pub fn bench_attention(
    h: usize,
    w: usize,
    l: usize,
    d: usize,
    variant: AttentionVariant,
    reps: usize,
) -> Result<BenchRow> {
    let predicted = attention_op_count(h, w, l, d, variant);
    let (measured, mut best) = measure_attention(h, w, l, d, variant, 0)?;
    for rep in 1..reps {
        best = best.min(measure_attention(h, w, l, d, variant, rep as u64)?.1);
    }
    Ok(BenchRow {
        variant: variant.label(),
        h,
        w,
        l,
        d,
        predicted_score_macs: predicted.score,
        predicted_value_macs: predicted.value,
        measured_score_macs: measured.score,
        measured_value_macs: measured.value,
        wall_ms: best.as_secs_f64() * 1e3,
    })
}
