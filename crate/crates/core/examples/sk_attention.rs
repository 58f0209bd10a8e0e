//! Runs both spatial knitting attention variants on a random feature map
//! and compares their multiply-accumulate counts with flattened attention.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use skattn::attention::{
    attention_op_count, sk_cross_attention, sk_reference_attention, AttentionParams, AttentionVariant,
};
use skattn::{Ctx, Graph, ParamStore, Result, Tensor, Trainable};

fn main() -> Result<()> {
    let (d, h, w, l) = (8, 6, 10, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cross = AttentionParams::new("cross", d, 2, 5)?;
    let reference = AttentionParams::new("ref", d, 2, d)?;
    let mut store = ParamStore::new();
    cross.init(&mut store, &mut rng);
    reference.init(&mut store, &mut rng);

    let mut g = Graph::new();
    let mut ctx = Ctx::new(&mut g, &store, Trainable::Nothing);
    let map = ctx.g.constant(Tensor::randn(&[d, h, w], 1.0, &mut rng));
    let tokens = ctx.g.constant(Tensor::randn(&[l, 5], 1.0, &mut rng));
    let other = ctx.g.constant(Tensor::randn(&[d, h, w], 1.0, &mut rng));
    let a = sk_cross_attention(&mut ctx, map, tokens, &cross)?;
    let b = sk_reference_attention(&mut ctx, map, other, &reference)?;
    println!("sk cross output {:?}, sk reference output {:?}", ctx.g.shape(a), ctx.g.shape(b));

    println!("variant, H, W, score MACs, value MACs");
    for side in [4, 8, 16, 32] {
        for v in AttentionVariant::ALL {
            let c = attention_op_count(side, side, 5, 64, v);
            println!("{}, {side}, {side}, {}, {}", v.label(), c.score, c.value);
        }
    }
    Ok(())
}
