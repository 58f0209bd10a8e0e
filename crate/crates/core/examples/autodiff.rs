//! Builds a small two-layer network on the tape, backpropagates a scalar
//! loss and checks the gradients against central differences.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use skattn::gradcheck::grad_check;
use skattn::{Graph, NodeId, Result, Tensor};

fn mlp(g: &mut Graph, ids: &[NodeId]) -> Result<NodeId> {
    let (x, w1, w2) = (ids[0], ids[1], ids[2]);
    let h = g.matmul(x, w1)?;
    let h = g.silu(h)?;
    let y = g.matmul(h, w2)?;
    let p = g.softmax(y, 1)?;
    let sq = g.mul(p, p)?;
    g.sum(sq)
}

fn main() -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::randn(&[3, 4], 1.0, &mut rng);
    let w1 = Tensor::randn(&[4, 6], 0.5, &mut rng).with_requires_grad(true);
    let w2 = Tensor::randn(&[6, 2], 0.5, &mut rng).with_requires_grad(true);

    let mut g = Graph::new();
    let ids = [g.constant(x.clone()), g.leaf(w1.clone()), g.leaf(w2.clone())];
    let loss = mlp(&mut g, &ids)?;
    g.backward(loss)?;
    println!("loss {:.6}", g.value(loss).item());
    println!("dL/dw2 {:?}", g.grad(ids[2]).map(|t| t.to_vec()));

    let report = grad_check(mlp, &[x, w1, w2], 1e-5, 1e-4)?;
    println!("gradient check max relative error {:.2e}, passed {}", report.max_rel_err(), report.passed());
    Ok(())
}
