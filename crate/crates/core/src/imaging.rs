//! Planar `f64` images in `[0, 1]` and conversions to and from 8-bit PNG.

use std::path::Path;

use image::{ImageBuffer, Rgb, Rgba};

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Planar image `[channels, height, width]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels * height * width != data.len() || channels == 0 || height == 0 || width == 0 {
            return Err(shape_err("image", format!("{channels}x{height}x{width} vs {} values", data.len())));
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn filled(channels: usize, height: usize, width: usize, v: f64) -> Self {
        Self { channels, height, width, data: vec![v; channels * height * width] }
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }

    /// Channel average.
    pub fn to_gray(&self) -> Image {
        let hw = self.height * self.width;
        let mut out = vec![0.0; hw];
        for c in 0..self.channels {
            for (o, v) in out.iter_mut().zip(&self.data[c * hw..(c + 1) * hw]) {
                *o += v / self.channels as f64;
            }
        }
        Image { channels: 1, height: self.height, width: self.width, data: out }
    }

    /// Bilinear resampling with pixel centres aligned (`align_corners = false`).
    pub fn resize(&self, height: usize, width: usize) -> Image {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let mut out = Image::filled(self.channels, height, width, 0.0);
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        for y in 0..height {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let (y0, ty) = (fy.floor() as usize, fy - fy.floor());
            let y1 = (y0 + 1).min(self.height - 1);
            for x in 0..width {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let (x0, tx) = (fx.floor() as usize, fx - fx.floor());
                let x1 = (x0 + 1).min(self.width - 1);
                for c in 0..self.channels {
                    let top = self.get(c, y0, x0) * (1.0 - tx) + self.get(c, y0, x1) * tx;
                    let bot = self.get(c, y1, x0) * (1.0 - tx) + self.get(c, y1, x1) * tx;
                    out.set(c, y, x, top * (1.0 - ty) + bot * ty);
                }
            }
        }
        out
    }

    /// Maps `[0,1]` to the `[-1,1]` latent range as a `[C,H,W]` tensor.
    pub fn to_latent(&self) -> Tensor {
        let data = self.data.iter().map(|v| 2.0 * v - 1.0).collect();
        Tensor::new(&[self.channels, self.height, self.width], data).expect("image shape")
    }

    /// Inverse of [`Image::to_latent`], clamped to `[0,1]`.
    pub fn from_latent(t: &Tensor) -> Result<Image> {
        let s = t.shape();
        if s.len() != 3 {
            return Err(shape_err("from_latent", format!("{s:?}")));
        }
        let data = t.data().iter().map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0)).collect();
        Image::new(s[0], s[1], s[2], data)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.channels, self.height, self.width], self.data.clone()).expect("image shape")
    }

    /// Writes an 8-bit PNG: 1 channel as gray, 3 as RGB, 4 as RGBA.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        let (w, h) = (self.width as u32, self.height as u32);
        match self.channels {
            1 => {
                let buf = ImageBuffer::from_fn(w, h, |x, y| image::Luma([q(self.get(0, y as usize, x as usize))]));
                buf.save(path)?;
            }
            3 => {
                let buf =
                    ImageBuffer::from_fn(w, h, |x, y| Rgb([0, 1, 2].map(|c| q(self.get(c, y as usize, x as usize)))));
                buf.save(path)?;
            }
            4 => {
                let buf = ImageBuffer::from_fn(w, h, |x, y| {
                    Rgba([0, 1, 2, 3].map(|c| q(self.get(c, y as usize, x as usize))))
                });
                buf.save(path)?;
            }
            c => return Err(shape_err("save_png", format!("{c} channels"))),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_constant_stays_constant() {
        let img = Image::filled(2, 5, 7, 0.3);
        let r = img.resize(16, 16);
        assert!(r.data.iter().all(|&v| (v - 0.3).abs() < 1e-15));
    }

    #[test]
    fn latent_roundtrip() {
        let img = Image::new(1, 1, 3, vec![0.0, 0.25, 1.0]).unwrap();
        let back = Image::from_latent(&img.to_latent()).unwrap();
        assert_eq!(back, img);
    }
}
