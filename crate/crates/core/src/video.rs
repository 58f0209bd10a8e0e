//! Sampling: single-frame DDIM and the two-stage clip generator.
//!
//! Stage 1 samples each frame on its own from one shared initial noise with
//! few steps. Stage 2 re-noises the stage-1 frames with one shared noise
//! tensor and denoises them in overlapping patches with the temporal blocks
//! active, cross-fading frames that two patches share.

use std::collections::BTreeMap;

use crate::adapter::FrameCondition;
use crate::config::Prediction;
use crate::config::{DiffusionConfig, VideoConfig};
use crate::diffusion::{ddim_step, ddim_timesteps, output_to_eps, q_sample, NoiseSchedule};
use crate::error::{shape_err, Error, Result};
use crate::graph::Graph;
use crate::params::{Ctx, ParamStore, Trainable};
use crate::tensor::Tensor;
use crate::unet::{bind_control, bind_reference, Conditioning, Model};

/// Ordered latent frames.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub frames: Vec<Tensor>,
    pub fps: f64,
}

impl VideoClip {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Mean absolute difference between consecutive frames, averaged over
    /// frame pairs (0 for fewer than two frames).
    pub fn adjacent_mad(&self) -> f64 {
        if self.frames.len() < 2 {
            return 0.0;
        }
        let pairs = self.frames.windows(2);
        let n = (self.frames.len() - 1) as f64;
        pairs
            .map(|w| w[0].data().iter().zip(w[1].data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / w[0].numel() as f64)
            .sum::<f64>()
            / n
    }
}

/// Precomputed condition tensors of one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameInputs {
    pub control: Option<[Tensor; 3]>,
}

/// Frozen weights plus everything needed to run denoising trajectories.
pub struct Sampler<'a> {
    pub model: &'a Model,
    pub store: &'a ParamStore,
    pub schedule: NoiseSchedule,
    pub clip_denoised: bool,
    pub reference_timestep: f64,
    pub prediction: Prediction,
}

impl<'a> Sampler<'a> {
    pub fn new(model: &'a Model, store: &'a ParamStore, diffusion: &DiffusionConfig) -> Result<Self> {
        Ok(Self {
            model,
            store,
            schedule: NoiseSchedule::from_config(diffusion)?,
            clip_denoised: diffusion.clip_denoised,
            reference_timestep: diffusion.reference_timestep as f64,
            prediction: diffusion.prediction,
        })
    }

    pub fn reference_features(&self, ref_latent: &Tensor) -> Result<BTreeMap<String, Tensor>> {
        self.model.reference_pass(self.store, ref_latent, self.reference_timestep)
    }

    pub fn frame_inputs(&self, cond: &FrameCondition) -> Result<FrameInputs> {
        Ok(FrameInputs { control: Some(self.model.adapters.pyramid_tensors(self.store, cond)?) })
    }

    /// Raw network outputs for frames that share timestep `t`.
    pub fn predict(
        &self,
        frames: &[Tensor],
        t: usize,
        inputs: &[FrameInputs],
        reference: Option<&BTreeMap<String, Tensor>>,
        motion: bool,
    ) -> Result<Vec<Tensor>> {
        if inputs.len() != frames.len() {
            return Err(shape_err("predict", format!("{} frames, {} condition sets", frames.len(), inputs.len())));
        }
        let mut g = Graph::new();
        let mut ctx = Ctx::new(&mut g, self.store, Trainable::Nothing);
        let refs = reference.map(|r| bind_reference(ctx.g, r));
        let pyramids: Option<Vec<[Tensor; 3]>> = inputs.iter().map(|i| i.control.clone()).collect();
        let control = pyramids.map(|p| bind_control(ctx.g, &p));
        let nodes: Vec<_> = frames.iter().map(|f| ctx.g.constant(f.clone())).collect();
        let cond = Conditioning { control: control.as_deref(), reference: refs.as_ref(), motion };
        let out = self.model.forward(&mut ctx, &nodes, t as f64, &cond)?;
        Ok(out.pred.iter().map(|&e| g.value(e).clone()).collect())
    }

    /// Deterministic DDIM over `timesteps` (descending) for frames that are
    /// denoised in lockstep.
    pub fn denoise(
        &self,
        mut frames: Vec<Tensor>,
        timesteps: &[usize],
        inputs: &[FrameInputs],
        reference: Option<&BTreeMap<String, Tensor>>,
        motion: bool,
    ) -> Result<Vec<Tensor>> {
        for (i, &t) in timesteps.iter().enumerate() {
            let eps = self.predict(&frames, t, inputs, reference, motion)?;
            let t_prev = timesteps.get(i + 1).copied();
            frames = frames
                .iter()
                .zip(&eps)
                .map(|(z, out)| {
                    let e = output_to_eps(z, out, t, &self.schedule, self.prediction)?;
                    ddim_step(z, &e, t, t_prev, &self.schedule, self.clip_denoised)
                })
                .collect::<Result<_>>()?;
        }
        Ok(frames)
    }

    /// Full trajectory from `t = T−1` to a clean latent in `steps` moves.
    pub fn ddim_sample(
        &self,
        initial_noise: &Tensor,
        inputs: &FrameInputs,
        reference: Option<&BTreeMap<String, Tensor>>,
        steps: usize,
    ) -> Result<Tensor> {
        if steps == 0 {
            return Err(Error::InvalidConfig("ddim_sample needs at least one step".into()));
        }
        let ts = ddim_timesteps(self.schedule.len() - 1, steps);
        let out = self.denoise(vec![initial_noise.clone()], &ts, std::slice::from_ref(inputs), reference, false)?;
        Ok(out.into_iter().next().expect("one frame"))
    }

    /// Stage 1: every frame sampled independently from `shared_noise`.
    pub fn stage1_generate(
        &self,
        reference: &BTreeMap<String, Tensor>,
        inputs: &[FrameInputs],
        shared_noise: &Tensor,
        steps: usize,
        fps: f64,
    ) -> Result<VideoClip> {
        let frames = inputs
            .iter()
            .map(|inp| self.ddim_sample(shared_noise, inp, Some(reference), steps))
            .collect::<Result<_>>()?;
        Ok(VideoClip { frames, fps })
    }

    /// Stage 2: re-noise, patchwise joint denoising with temporal blocks,
    /// overlap cross-fade.
    pub fn stage2_generate(
        &self,
        stage1: &VideoClip,
        reference: &BTreeMap<String, Tensor>,
        inputs: &[FrameInputs],
        renoise_noise: &Tensor,
        params: &Stage2Params,
    ) -> Result<Stage2Output> {
        params.validate()?;
        let n = stage1.len();
        if inputs.len() != n {
            return Err(shape_err("stage2_generate", format!("{n} frames, {} condition sets", inputs.len())));
        }
        let t_start = ((params.renoise_strength * (self.schedule.len() - 1) as f64).round() as usize)
            .min(self.schedule.len() - 1);
        let noisy: Vec<Tensor> =
            stage1.frames.iter().map(|f| q_sample(f, t_start, renoise_noise, &self.schedule)).collect::<Result<_>>()?;
        let ts = ddim_timesteps(t_start, params.steps);
        let mut patches = Vec::new();
        for (start, len) in patch_layout(n, params.patch_len, params.overlap) {
            let out = self.denoise(
                noisy[start..start + len].to_vec(),
                &ts,
                &inputs[start..start + len],
                Some(reference),
                true,
            )?;
            patches.push(Patch { start, frames: out });
        }
        let frames = blend_patches(&patches, n, params.overlap)?;
        Ok(Stage2Output { clip: VideoClip { frames, fps: stage1.fps }, patches })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stage2Params {
    pub renoise_strength: f64,
    pub patch_len: usize,
    pub overlap: usize,
    pub steps: usize,
}

impl Stage2Params {
    pub fn from_config(v: &VideoConfig) -> Self {
        Self { renoise_strength: v.renoise_strength, patch_len: v.patch_len, overlap: v.overlap, steps: v.stage2_steps }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_len == 0 || self.overlap == 0 || self.overlap >= self.patch_len {
            return Err(Error::PatchConfigInvalid(format!(
                "need 0 < overlap < patch_len, got overlap {} and patch_len {}",
                self.overlap, self.patch_len
            )));
        }
        if !(self.renoise_strength > 0.0 && self.renoise_strength <= 1.0) {
            return Err(Error::PatchConfigInvalid(format!(
                "renoise_strength {} outside (0, 1]",
                self.renoise_strength
            )));
        }
        if self.steps == 0 {
            return Err(Error::PatchConfigInvalid("stage-2 steps must be positive".into()));
        }
        Ok(())
    }
}

/// Unblended output of one patch.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub start: usize,
    pub frames: Vec<Tensor>,
}

pub struct Stage2Output {
    pub clip: VideoClip,
    pub patches: Vec<Patch>,
}

/// `(start, len)` of each patch. Patches advance by `patch_len − overlap`;
/// the last one may be shorter so it ends at the final frame. A clip no
/// longer than `patch_len` is a single patch.
pub fn patch_layout(n: usize, patch_len: usize, overlap: usize) -> Vec<(usize, usize)> {
    if n <= patch_len {
        return vec![(0, n)];
    }
    let stride = patch_len - overlap;
    let mut out = Vec::new();
    let mut start = 0;
    loop {
        let len = patch_len.min(n - start);
        out.push((start, len));
        if start + len >= n {
            break;
        }
        start += stride;
    }
    out
}

/// Cross-fade weight of the `i`-th shared frame (`0`-based).
pub fn blend_weight(i: usize, overlap: usize) -> f64 {
    (i + 1) as f64 / (overlap + 1) as f64
}

/// Writes patches in order; the first `overlap` frames of every later patch
/// are mixed into what is already there as `prev + w·(next − prev)`.
pub fn blend_patches(patches: &[Patch], n: usize, overlap: usize) -> Result<Vec<Tensor>> {
    let mut out: Vec<Option<Tensor>> = vec![None; n];
    for (k, p) in patches.iter().enumerate() {
        for (i, f) in p.frames.iter().enumerate() {
            let idx = p.start + i;
            let slot = out.get_mut(idx).ok_or_else(|| shape_err("blend_patches", format!("frame {idx} beyond {n}")))?;
            *slot = Some(match slot.take() {
                Some(prev) if k > 0 && i < overlap => {
                    let w = blend_weight(i, overlap);
                    prev.zip_map(f, |a, b| a + w * (b - a))?
                }
                _ => f.clone(),
            });
        }
    }
    out.into_iter()
        .enumerate()
        .map(|(i, f)| f.ok_or_else(|| shape_err("blend_patches", format!("frame {i} not covered"))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layouts() {
        assert_eq!(patch_layout(5, 16, 4), vec![(0, 5)]);
        assert_eq!(patch_layout(16, 16, 4), vec![(0, 16)]);
        assert_eq!(patch_layout(20, 16, 4), vec![(0, 16), (12, 8)]);
        assert_eq!(patch_layout(6, 4, 3), vec![(0, 4), (1, 4), (2, 4)]);
        for (n, p, o) in [(30, 16, 4), (9, 4, 2), (17, 5, 4)] {
            let l = patch_layout(n, p, o);
            assert_eq!(l.last().map(|&(s, len)| s + len), Some(n));
            assert!(l.iter().all(|&(_, len)| len > o));
        }
    }

    #[test]
    fn stage2_params_checked() {
        let ok = Stage2Params { renoise_strength: 0.6, patch_len: 16, overlap: 4, steps: 25 };
        ok.validate().unwrap();
        for bad in [
            Stage2Params { overlap: 16, ..ok },
            Stage2Params { overlap: 0, ..ok },
            Stage2Params { renoise_strength: 0.0, ..ok },
        ] {
            assert!(matches!(bad.validate(), Err(Error::PatchConfigInvalid(_))));
        }
    }
}
