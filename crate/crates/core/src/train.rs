//! Optimizer, learning-rate schedule and the three training phases: base
//! pretraining, adapter training on reference/driving pairs, and motion
//! fine-tuning on short clips.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::FrameCondition;
use crate::config::{DiffusionConfig, OptimConfig, RunConfig};
use crate::diffusion::{q_sample, training_target, weighted_loss, NoiseSchedule};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::params::{Ctx, ParamStore, Trainable};
use crate::pose::PatchEncoder;
use crate::synth::{Synth, SynthSample};
use crate::tensor::Tensor;
use crate::unet::{bind_reference, Conditioning, Model, ADAPTER_PREFIX, BASE_PREFIX, MOTION_PREFIX};

/// Adam with bias correction and optional global-norm clipping.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: OptimConfig,
    t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: &OptimConfig) -> Self {
        Self { cfg: cfg.clone(), t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Applies one update to every parameter in `grads`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(String, Tensor)], lr: f64) -> Result<()> {
        self.t += 1;
        let norm = grads.iter().map(|(_, g)| g.data().iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
        let clip = if self.cfg.grad_clip > 0.0 && norm > self.cfg.grad_clip { self.cfg.grad_clip / norm } else { 1.0 };
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (name, g) in grads {
            let p = store.get(name)?;
            let n = p.numel();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let mut data = p.to_vec();
            for i in 0..n {
                let gi = g.data()[i] * clip;
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                data[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.cfg.eps);
            }
            let shape = p.shape().to_vec();
            store.insert(name.clone(), Tensor::new(&shape, data)?);
        }
        Ok(())
    }
}

/// Linear warmup then cosine decay from `lr_max` to `lr_min` over `steps`.
pub fn cosine_lr(cfg: &OptimConfig, step: usize) -> f64 {
    if step < cfg.warmup_steps {
        return cfg.lr_max * (step + 1) as f64 / cfg.warmup_steps as f64;
    }
    let span = cfg.steps.saturating_sub(cfg.warmup_steps).max(1);
    let p = ((step - cfg.warmup_steps) as f64 / span as f64).min(1.0);
    cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + (std::f64::consts::PI * p).cos())
}

/// One row of the loss log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// Timestep of the first example in the batch.
    pub t_sampled: usize,
    pub loss_total: f64,
    pub loss_mean: f64,
    pub loss_masked: f64,
}

/// Model-ready form of one training pair.
#[derive(Clone, Debug)]
pub struct TrainExample {
    pub reference: Tensor,
    pub driving: Tensor,
    pub condition: FrameCondition,
    pub mask: Tensor,
    pub reference_features: Arc<BTreeMap<String, Tensor>>,
}

/// Examples in the fixed loss probe of a training run.
pub const PROBE_SIZE: usize = 32;

/// One fixed (example, noise, timestep) triple of a loss probe.
#[derive(Clone, Debug)]
pub struct ProbeItem {
    pub example: TrainExample,
    pub noise: Tensor,
    pub t: usize,
}

/// Probe over `examples` with timesteps spread evenly across the schedule
/// and noise drawn from `seed`.
pub fn build_probe(examples: Vec<TrainExample>, schedule_len: usize, seed: u64) -> Vec<ProbeItem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = examples.len();
    examples
        .into_iter()
        .enumerate()
        .map(|(i, example)| {
            let t = (((i as f64 + 0.5) * schedule_len as f64 / n as f64) as usize).min(schedule_len - 1);
            let noise = Tensor::randn(example.driving.shape(), 1.0, &mut rng);
            ProbeItem { example, noise, t }
        })
        .collect()
}

/// Mean of the last `window` totals (or of all when fewer).
pub fn smoothed_tail(log: &[StepRecord], window: usize) -> f64 {
    let w = window.min(log.len()).max(1);
    log[log.len().saturating_sub(w)..].iter().map(|r| r.loss_total).sum::<f64>() / w as f64
}

/// Mean of the first `window` totals.
pub fn smoothed_head(log: &[StepRecord], window: usize) -> f64 {
    let w = window.min(log.len()).max(1);
    log[..w].iter().map(|r| r.loss_total).sum::<f64>() / w as f64
}

/// Shared state of the training phases.
pub struct Trainer<'m> {
    pub model: &'m Model,
    pub schedule: NoiseSchedule,
    pub diffusion: DiffusionConfig,
    pub encoder: PatchEncoder,
    pub rng: ChaCha8Rng,
}

impl<'m> Trainer<'m> {
    pub fn new(model: &'m Model, diffusion: &DiffusionConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            model,
            schedule: NoiseSchedule::from_config(diffusion)?,
            diffusion: diffusion.clone(),
            encoder: PatchEncoder::new(model.cfg.expr_dim, model.cfg.patch_encoder_seed),
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// Converts a synthetic sample; `blur` randomizes the patch blur.
    pub fn example(&mut self, store: &ParamStore, s: &SynthSample, blur: Option<(f64, f64)>) -> Result<TrainExample> {
        let reference = s.reference.to_latent();
        let feats = self.model.reference_pass(store, &reference, self.diffusion.reference_timestep as f64)?;
        Ok(self.example_with_features(s, blur, Arc::new(feats)))
    }

    pub fn example_with_features(
        &mut self,
        s: &SynthSample,
        blur: Option<(f64, f64)>,
        feats: Arc<BTreeMap<String, Tensor>>,
    ) -> TrainExample {
        let blur = blur.map(|range| (range, self.rng.gen::<u64>()));
        TrainExample {
            reference: s.reference.to_latent(),
            driving: s.driving.to_latent(),
            condition: s.condition(&self.encoder, blur),
            mask: s.mask.clone(),
            reference_features: feats,
        }
    }

    fn noise_and_t(&mut self, shape: &[usize]) -> (Tensor, usize) {
        let t = self.rng.gen_range(0..self.schedule.len());
        (Tensor::randn(shape, 1.0, &mut self.rng), t)
    }

    /// Weighted loss terms `[total, mean, masked]` of one example at a
    /// given noise and timestep, with `adapter.*` gradients of `scale·total`
    /// when `backward` is set.
    fn adapter_loss(
        &self,
        store: &ParamStore,
        ex: &TrainExample,
        noise: &Tensor,
        t: usize,
        scale: f64,
        backward: bool,
    ) -> Result<([f64; 3], Vec<(String, Tensor)>)> {
        let z_t = q_sample(&ex.driving, t, noise, &self.schedule)?;
        let mut g = Graph::new();
        let train = if backward { Trainable::prefixes(&[ADAPTER_PREFIX]) } else { Trainable::Nothing };
        let mut ctx = Ctx::new(&mut g, store, train);
        let pyramid = self.model.adapters.condition_pyramid(&mut ctx, &ex.condition)?;
        let refs = bind_reference(ctx.g, &ex.reference_features);
        let zn = ctx.g.constant(z_t);
        let control = [pyramid];
        let cond = Conditioning { control: Some(&control), reference: Some(&refs), motion: false };
        let out = self.model.forward(&mut ctx, &[zn], t as f64, &cond)?;
        let target = ctx.g.constant(training_target(&ex.driving, noise, self.diffusion.prediction).clone());
        let terms = weighted_loss(ctx.g, target, out.pred[0], &ex.mask, t as f64, self.diffusion.loss_eps_norm)?;
        let values = [terms.total, terms.mean, terms.masked].map(|n| ctx.g.value(n).item());
        if !backward {
            return Ok((values, Vec::new()));
        }
        let total = ctx.g.scale(terms.total, scale)?;
        ctx.g.backward(total)?;
        Ok((values, ctx.param_grads()))
    }

    /// Mean weighted loss over a fixed probe set; no parameters change.
    pub fn probe_loss(&self, store: &ParamStore, probe: &[ProbeItem]) -> Result<f64> {
        if probe.is_empty() {
            return Err(Error::InvalidConfig("empty probe set".into()));
        }
        let mut sum = 0.0;
        for p in probe {
            sum += self.adapter_loss(store, &p.example, &p.noise, p.t, 1.0, false)?.0[0];
        }
        Ok(sum / probe.len() as f64)
    }

    /// Adapter update on `batch`: noising at a uniform random timestep,
    /// noise prediction, weighted loss, Adam on `adapter.*` only.
    pub fn adapter_step(
        &mut self,
        store: &mut ParamStore,
        opt: &mut Adam,
        batch: &[TrainExample],
        lr: f64,
        step: usize,
    ) -> Result<StepRecord> {
        if batch.is_empty() {
            return Err(Error::InvalidConfig("empty batch".into()));
        }
        let mut acc: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut rec = StepRecord { step, t_sampled: 0, loss_total: 0.0, loss_mean: 0.0, loss_masked: 0.0 };
        let inv = 1.0 / batch.len() as f64;
        for (i, ex) in batch.iter().enumerate() {
            let (noise, t) = self.noise_and_t(ex.driving.shape());
            if i == 0 {
                rec.t_sampled = t;
            }
            let (terms, grads) = self.adapter_loss(store, ex, &noise, t, inv, true)?;
            rec.loss_total += terms[0] * inv;
            rec.loss_mean += terms[1] * inv;
            rec.loss_masked += terms[2] * inv;
            accumulate(&mut acc, grads)?;
        }
        let grads: Vec<(String, Tensor)> = acc.into_iter().collect();
        opt.step(store, &grads, lr)?;
        Ok(rec)
    }

    /// Unconditional noise-prediction update of `base.*` (mean squared error).
    pub fn base_step(
        &mut self,
        store: &mut ParamStore,
        opt: &mut Adam,
        batch: &[Tensor],
        lr: f64,
        step: usize,
    ) -> Result<StepRecord> {
        let mut acc: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut rec = StepRecord { step, t_sampled: 0, loss_total: 0.0, loss_mean: 0.0, loss_masked: 0.0 };
        let inv = 1.0 / batch.len() as f64;
        for (i, z0) in batch.iter().enumerate() {
            let (noise, t) = self.noise_and_t(z0.shape());
            if i == 0 {
                rec.t_sampled = t;
            }
            let z_t = q_sample(z0, t, &noise, &self.schedule)?;
            let mut g = Graph::new();
            let snapshot: &ParamStore = store;
            let mut ctx = Ctx::new(&mut g, snapshot, Trainable::prefixes(&[BASE_PREFIX]));
            let zn = ctx.g.constant(z_t);
            let out = self.model.forward(&mut ctx, &[zn], t as f64, &Conditioning::default())?;
            let target = ctx.g.constant(training_target(z0, &noise, self.diffusion.prediction).clone());
            let d = ctx.g.sub(target, out.pred[0])?;
            let sq = ctx.g.mul(d, d)?;
            let loss = ctx.g.mean(sq)?;
            let scaled = ctx.g.scale(loss, inv)?;
            ctx.g.backward(scaled)?;
            let l = ctx.g.value(loss).item() * inv;
            rec.loss_total += l;
            rec.loss_mean += l;
            accumulate(&mut acc, ctx.param_grads())?;
        }
        let grads: Vec<(String, Tensor)> = acc.into_iter().collect();
        opt.step(store, &grads, lr)?;
        Ok(rec)
    }

    /// Joint update of `motion.*` on one clip: shared timestep, independent
    /// noise per frame, temporal blocks active.
    pub fn motion_step(
        &mut self,
        store: &mut ParamStore,
        opt: &mut Adam,
        clip: &[TrainExample],
        lr: f64,
        step: usize,
    ) -> Result<StepRecord> {
        let Some(first) = clip.first() else {
            return Err(Error::InvalidConfig("empty clip".into()));
        };
        let t = self.rng.gen_range(0..self.schedule.len());
        let mut g = Graph::new();
        let snapshot: &ParamStore = store;
        let mut ctx = Ctx::new(&mut g, snapshot, Trainable::prefixes(&[MOTION_PREFIX]));
        let refs = bind_reference(ctx.g, &first.reference_features);
        let mut frames = Vec::new();
        let mut noises = Vec::new();
        let mut control = Vec::new();
        for ex in clip {
            let noise = Tensor::randn(ex.driving.shape(), 1.0, &mut self.rng);
            frames.push(ctx.g.constant(q_sample(&ex.driving, t, &noise, &self.schedule)?));
            noises.push(noise);
            control.push(self.model.adapters.condition_pyramid(&mut ctx, &ex.condition)?);
        }
        let cond = Conditioning { control: Some(&control), reference: Some(&refs), motion: true };
        let out = self.model.forward(&mut ctx, &frames, t as f64, &cond)?;
        let inv = 1.0 / clip.len() as f64;
        let mut rec = StepRecord { step, t_sampled: t, loss_total: 0.0, loss_mean: 0.0, loss_masked: 0.0 };
        let mut total = None;
        for ((ex, noise), eps) in clip.iter().zip(noises).zip(&out.pred) {
            let target = ctx.g.constant(training_target(&ex.driving, &noise, self.diffusion.prediction).clone());
            let terms = weighted_loss(ctx.g, target, *eps, &ex.mask, t as f64, self.diffusion.loss_eps_norm)?;
            rec.loss_total += ctx.g.value(terms.total).item() * inv;
            rec.loss_mean += ctx.g.value(terms.mean).item() * inv;
            rec.loss_masked += ctx.g.value(terms.masked).item() * inv;
            let s = ctx.g.scale(terms.total, inv)?;
            total = Some(match total {
                None => s,
                Some(acc) => ctx.g.add(acc, s)?,
            });
        }
        ctx.g.backward(total.expect("nonempty clip"))?;
        let grads = ctx.param_grads();
        opt.step(store, &grads, lr)?;
        Ok(rec)
    }
}

fn accumulate(acc: &mut BTreeMap<String, Tensor>, grads: Vec<(String, Tensor)>) -> Result<()> {
    for (name, g) in grads {
        let merged = match acc.remove(&name) {
            Some(prev) => prev.zip_map(&g, |a, b| a + b)?,
            None => g,
        };
        acc.insert(name, merged);
    }
    Ok(())
}

/// Which training phase produced a log row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Base,
    Adapter,
    Motion,
}

/// Weights and logs of a full run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub store: ParamStore,
    pub base_log: Vec<StepRecord>,
    pub adapter_log: Vec<StepRecord>,
    pub motion_log: Vec<StepRecord>,
    /// Digest of `base.*` when adapter training starts and when the run ends.
    pub base_digest: (String, String),
    /// Fixed-probe adapter loss before the first and after the last adapter step.
    pub adapter_probe: (f64, f64),
}

/// Base pretraining, then adapter training, then optional motion training.
/// `on_step` sees every log row as it is produced; `on_checkpoint` is called
/// every `checkpoint_every` adapter steps.
pub fn run_training(
    cfg: &RunConfig,
    mut on_step: impl FnMut(Phase, &StepRecord),
    mut on_checkpoint: impl FnMut(usize, &ParamStore) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model = Model::new(&cfg.model)?;
    let tc = &cfg.train;
    let mut store = model.init_all(tc.seed);
    let synth = Synth::new(&cfg.model, &cfg.data);
    let data = synth.dataset(tc.dataset_size, tc.seed)?;
    let mut trainer = Trainer::new(&model, &cfg.diffusion, tc.seed ^ 0xa5a5)?;

    let mut base_log = Vec::with_capacity(tc.base.steps);
    let mut opt = Adam::new(&tc.base);
    let pool: Vec<Tensor> = data.iter().flat_map(|s| [s.driving.to_latent(), s.reference.to_latent()]).collect();
    for step in 0..tc.base.steps {
        let batch: Vec<Tensor> =
            (0..tc.base.batch_size).map(|_| pool[trainer.rng.gen_range(0..pool.len())].clone()).collect();
        let rec = trainer.base_step(&mut store, &mut opt, &batch, cosine_lr(&tc.base, step), step)?;
        on_step(Phase::Base, &rec);
        base_log.push(rec);
    }

    let digest_before = store.digest(BASE_PREFIX);
    let mut feats: Vec<Option<Arc<BTreeMap<String, Tensor>>>> = vec![None; data.len()];
    let mut probe_examples = Vec::with_capacity(PROBE_SIZE.min(data.len()));
    for (i, s) in data.iter().enumerate().take(PROBE_SIZE) {
        let f = Arc::new(model.reference_pass(
            &store,
            &s.reference.to_latent(),
            cfg.diffusion.reference_timestep as f64,
        )?);
        feats[i] = Some(f.clone());
        probe_examples.push(trainer.example_with_features(s, None, f));
    }
    let probe = build_probe(probe_examples, trainer.schedule.len(), tc.seed ^ 0x9b0e);
    let probe_before = trainer.probe_loss(&store, &probe)?;
    let mut adapter_log = Vec::with_capacity(tc.adapter.steps);
    let mut opt = Adam::new(&tc.adapter);
    for step in 0..tc.adapter.steps {
        let mut batch = Vec::with_capacity(tc.adapter.batch_size);
        for _ in 0..tc.adapter.batch_size {
            let i = trainer.rng.gen_range(0..data.len());
            let f = match &feats[i] {
                Some(f) => f.clone(),
                None => {
                    let ref_latent = data[i].reference.to_latent();
                    let f =
                        Arc::new(model.reference_pass(&store, &ref_latent, cfg.diffusion.reference_timestep as f64)?);
                    feats[i] = Some(f.clone());
                    f
                }
            };
            batch.push(trainer.example_with_features(&data[i], Some(tc.patch_blur), f));
        }
        let rec = trainer.adapter_step(&mut store, &mut opt, &batch, cosine_lr(&tc.adapter, step), step)?;
        on_step(Phase::Adapter, &rec);
        adapter_log.push(rec);
        if tc.checkpoint_every > 0 && (step + 1) % tc.checkpoint_every == 0 {
            on_checkpoint(step + 1, &store)?;
        }
    }

    let probe_after = trainer.probe_loss(&store, &probe)?;

    let mut motion_log = Vec::with_capacity(tc.motion.steps);
    let mut opt = Adam::new(&tc.motion);
    for step in 0..tc.motion.steps {
        let seed = trainer.rng.gen::<u64>();
        let clip = synth.clip(tc.motion_clip_len, seed)?;
        let ref_latent = clip[0].reference.to_latent();
        let f = Arc::new(model.reference_pass(&store, &ref_latent, cfg.diffusion.reference_timestep as f64)?);
        let examples: Vec<TrainExample> =
            clip.iter().map(|s| trainer.example_with_features(s, Some(tc.patch_blur), f.clone())).collect();
        let rec = trainer.motion_step(&mut store, &mut opt, &examples, cosine_lr(&tc.motion, step), step)?;
        on_step(Phase::Motion, &rec);
        motion_log.push(rec);
    }
    on_checkpoint(tc.adapter.steps, &store)?;
    let digest_after = store.digest(BASE_PREFIX);
    Ok(TrainOutcome {
        store,
        base_log,
        adapter_log,
        motion_log,
        base_digest: (digest_before, digest_after),
        adapter_probe: (probe_before, probe_after),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        let cfg = OptimConfig { steps: 100, lr_max: 1.0, lr_min: 0.1, ..OptimConfig::default() };
        assert!((cosine_lr(&cfg, 0) - 1.0).abs() < 1e-12);
        assert!((cosine_lr(&cfg, 100) - 0.1).abs() < 1e-12);
        assert!(cosine_lr(&cfg, 50) < 1.0 && cosine_lr(&cfg, 50) > 0.1);
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut store = ParamStore::new();
        store.insert("p", Tensor::new(&[2], vec![1.0, -1.0]).unwrap());
        let mut opt = Adam::new(&OptimConfig::default());
        let g = vec![("p".to_string(), Tensor::new(&[2], vec![0.5, -0.5]).unwrap())];
        opt.step(&mut store, &g, 0.1).unwrap();
        let p = store.get("p").unwrap().data().to_vec();
        assert!(p[0] < 1.0 && p[1] > -1.0);
    }
}
