//! Image similarity metrics over `[0,1]` images.

use crate::error::{shape_err, Result};
use crate::imaging::Image;

pub const SSIM_WINDOW: usize = 8;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check(a: &Image, b: &Image, op: &'static str) -> Result<()> {
    if !a.same_shape(b) {
        return Err(shape_err(
            op,
            format!("{}x{}x{} vs {}x{}x{}", a.channels, a.height, a.width, b.channels, b.height, b.width),
        ));
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check(a, b, "mse")?;
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data.len() as f64)
}

/// `10·log10(1/MSE)`; identical images give `+∞`.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 { f64::INFINITY } else { 10.0 * (1.0 / m).log10() })
}

/// Mean SSIM over every `window × window` position of every channel, with
/// uniform weights and population statistics. Images smaller than the
/// window use one window covering the whole image.
pub fn ssim(a: &Image, b: &Image, window: usize, k1: f64, k2: f64) -> Result<f64> {
    check(a, b, "ssim")?;
    let (c1, c2) = ((k1 * 1.0f64).powi(2), (k2 * 1.0f64).powi(2));
    let wy = window.min(a.height).max(1);
    let wx = window.min(a.width).max(1);
    let n = (wx * wy) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..a.channels {
        for y0 in 0..=a.height - wy {
            for x0 in 0..=a.width - wx {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for y in y0..y0 + wy {
                    for x in x0..x0 + wx {
                        let (p, q) = (a.get(c, y, x), b.get(c, y, x));
                        sa += p;
                        sb += q;
                        saa += p * p;
                        sbb += q * q;
                        sab += p * q;
                    }
                }
                let (ma, mb) = (sa / n, sb / n);
                let va = saa / n - ma * ma;
                let vb = sbb / n - mb * mb;
                let cov = sab / n - ma * mb;
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// [`ssim`] with the default window and constants.
pub fn ssim_default(a: &Image, b: &Image) -> Result<f64> {
    ssim(a, b, SSIM_WINDOW, SSIM_K1, SSIM_K2)
}
