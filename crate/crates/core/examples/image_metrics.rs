//! PSNR and SSIM between a synthetic driving frame, its reference frame and
//! noisy copies of itself.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use skattn::config::{DataConfig, ModelConfig};
use skattn::imaging::Image;
use skattn::metrics::{psnr, ssim_default};
use skattn::synth::Synth;
use skattn::Result;

fn main() -> Result<()> {
    let cfg = ModelConfig::default();
    let s = &Synth::new(&cfg, &DataConfig::default()).dataset(1, 2)?[0];
    println!(
        "reference vs driving: PSNR {:.2} dB, SSIM {:.3}",
        psnr(&s.reference, &s.driving)?,
        ssim_default(&s.reference, &s.driving)?
    );
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for sigma in [0.01, 0.05, 0.1] {
        let n = Normal::new(0.0, sigma).expect("positive sigma");
        let data = s.driving.data.iter().map(|v| (v + n.sample(&mut rng)).clamp(0.0, 1.0)).collect();
        let noisy = Image::new(s.driving.channels, s.driving.height, s.driving.width, data)?;
        println!(
            "noise sigma {sigma}: PSNR {:.2} dB, SSIM {:.3}",
            psnr(&noisy, &s.driving)?,
            ssim_default(&noisy, &s.driving)?
        );
    }
    Ok(())
}
