//! Evaluates the region-weighted diffusion loss across timesteps: the mask
//! term fades out linearly and vanishes at t = 1000.

use skattn::diffusion::weighted_loss;
use skattn::{Graph, Result, Tensor};

fn main() -> Result<()> {
    let z = Tensor::zeros(&[4, 4, 4]);
    let z_hat = Tensor::new(&[4, 4, 4], (0..64).map(|i| (i % 5) as f64 * 0.1).collect())?;
    let mask = Tensor::new(&[1, 4, 4], (0..16).map(|i| f64::from(u8::from((5..11).contains(&i)))).collect())?;
    println!("timestep, total, mean term, mask term");
    for t in [0.0, 250.0, 500.0, 750.0, 1000.0] {
        let mut g = Graph::new();
        let (a, b) = (g.constant(z.clone()), g.constant(z_hat.clone()));
        let l = weighted_loss(&mut g, a, b, &mask, t, 1e-8)?;
        println!("{t}, {:.5}, {:.5}, {:.5}", g.value(l.total).item(), g.value(l.mean).item(), g.value(l.masked).item());
    }
    Ok(())
}
