//! Noise schedule, forward noising, the weighted reconstruction loss and the
//! deterministic DDIM update.

use crate::config::{DiffusionConfig, Prediction};
use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

/// Linear beta schedule with cumulative products.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 2 || !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidConfig(format!("bad schedule: {steps} steps, betas {beta_start}..{beta_end}")));
        }
        let betas: Vec<f64> =
            (0..steps).map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64).collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(Self { betas, alphas, alpha_bars })
    }

    pub fn from_config(cfg: &DiffusionConfig) -> Result<Self> {
        Self::linear(cfg.train_steps, cfg.beta_start, cfg.beta_end)
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bars.get(t).copied().ok_or(Error::StepOutOfRange { t, steps: self.len() })
    }

    /// `ᾱ` of a DDIM target step; `None` is the clean end point (`ᾱ = 1`).
    fn alpha_bar_or_one(&self, t: Option<usize>) -> Result<f64> {
        t.map_or(Ok(1.0), |t| self.alpha_bar(t))
    }
}

/// `√ᾱ_t · z0 + √(1−ᾱ_t) · noise`.
pub fn q_sample(z0: &Tensor, t: usize, noise: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    let ab = schedule.alpha_bar(t)?;
    if z0.shape() != noise.shape() {
        return Err(shape_err("q_sample", format!("z0 {:?} vs noise {:?}", z0.shape(), noise.shape())));
    }
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    z0.zip_map(noise, |z, n| a * z + b * n)
}

/// The regression target of a noised training example.
pub fn training_target<'a>(z0: &'a Tensor, noise: &'a Tensor, prediction: Prediction) -> &'a Tensor {
    match prediction {
        Prediction::Sample => z0,
        Prediction::Epsilon => noise,
    }
}

/// Noise estimate implied by a network output at `z_t`.
pub fn output_to_eps(
    z_t: &Tensor,
    output: &Tensor,
    t: usize,
    schedule: &NoiseSchedule,
    prediction: Prediction,
) -> Result<Tensor> {
    match prediction {
        Prediction::Epsilon => Ok(output.clone()),
        Prediction::Sample => {
            let ab = schedule.alpha_bar(t)?;
            let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
            z_t.zip_map(output, |z, x| (z - sa * x) / sb)
        }
    }
}

/// Node ids of the loss and its two terms.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: NodeId,
    pub mean: NodeId,
    pub masked: NodeId,
}

/// `mean(L) + sum(M·L) · (1000 − timestep)/1000 · 1/(sum(M) + eps_norm)` with
/// `L = (z − ẑ)²`. A single-channel mask is broadcast over latent channels
/// and `sum(M)` counts the broadcast mask.
pub fn weighted_loss(
    g: &mut Graph,
    z: NodeId,
    z_hat: NodeId,
    mask: &Tensor,
    timestep: f64,
    eps_norm: f64,
) -> Result<LossTerms> {
    let s = g.shape(z).to_vec();
    if g.shape(z_hat) != s.as_slice() {
        return Err(shape_err("weighted_loss", format!("z {s:?} vs z_hat {:?}", g.shape(z_hat))));
    }
    let mask = broadcast_mask(mask, &s)?;
    let alpha = (1000.0 - timestep) / 1000.0;
    let beta = 1.0 / (mask.sum() + eps_norm);
    let diff = g.sub(z, z_hat)?;
    let l = g.mul(diff, diff)?;
    let mean = g.mean(l)?;
    let m = g.constant(mask);
    let ml = g.mul(m, l)?;
    let ml = g.sum(ml)?;
    let masked = g.scale(ml, alpha * beta)?;
    let total = g.add(mean, masked)?;
    Ok(LossTerms { total, mean, masked })
}

fn broadcast_mask(mask: &Tensor, shape: &[usize]) -> Result<Tensor> {
    let ms = mask.shape();
    if ms == shape {
        return Ok(mask.clone());
    }
    if shape.len() == 3 && ms == [1, shape[1], shape[2]] {
        return Tensor::stack(&vec![mask.reshape(&[shape[1], shape[2]])?; shape[0]]);
    }
    Err(shape_err("weighted_loss", format!("mask {ms:?} vs latent {shape:?}")))
}

/// Descending DDIM timesteps from `t_start` in `steps` even strides.
pub fn ddim_timesteps(t_start: usize, steps: usize) -> Vec<usize> {
    let mut ts: Vec<usize> =
        (0..steps).map(|i| ((t_start as f64) * (steps - i) as f64 / steps as f64).round() as usize).collect();
    ts.dedup();
    ts
}

/// One deterministic (`eta = 0`) DDIM move from `t` to `t_prev`.
pub fn ddim_step(
    z_t: &Tensor,
    eps: &Tensor,
    t: usize,
    t_prev: Option<usize>,
    schedule: &NoiseSchedule,
    clip: bool,
) -> Result<Tensor> {
    let ab = schedule.alpha_bar(t)?;
    let ab_prev = schedule.alpha_bar_or_one(t_prev)?;
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    let x0 = z_t.zip_map(eps, |z, e| {
        let x = (z - sb * e) / sa;
        if clip {
            x.clamp(-1.0, 1.0)
        } else {
            x
        }
    })?;
    // Re-derive the noise direction after clipping so the trajectory stays consistent.
    let eps = if clip { z_t.zip_map(&x0, |z, x| (z - sa * x) / sb)? } else { eps.clone() };
    let (pa, pb) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
    x0.zip_map(&eps, |x, e| pa * x + pb * e)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_monotone() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        assert!(s.alpha_bars.windows(2).all(|w| w[1] < w[0]));
        assert!(matches!(s.alpha_bar(1000), Err(Error::StepOutOfRange { .. })));
    }

    #[test]
    fn timesteps_cover_range() {
        assert_eq!(ddim_timesteps(999, 1), vec![999]);
        let ts = ddim_timesteps(999, 8);
        assert_eq!(ts.len(), 8);
        assert_eq!(ts[0], 999);
        assert!(ts.windows(2).all(|w| w[1] < w[0]));
        assert_eq!(ddim_timesteps(3, 10), vec![3, 2, 1, 0]);
    }

    #[test]
    fn loss_hand_example() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[1, 4, 4]));
        let zh = g.constant(Tensor::full(&[1, 4, 4], 1.0));
        let terms = weighted_loss(&mut g, z, zh, &Tensor::full(&[1, 4, 4], 1.0), 0.0, 0.0).unwrap();
        assert_eq!(g.value(terms.total).item(), 2.0);
    }
}
