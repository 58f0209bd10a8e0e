//! Two-stage generation with a reduced model whose gates are opened at
//! random: independent frames first, then re-noised overlapping patches
//! blended by cross-fade.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use skattn::config::{DataConfig, DiffusionConfig, ModelConfig};
use skattn::pose::PatchEncoder;
use skattn::synth::Synth;
use skattn::unet::{Model, MOTION_PREFIX};
use skattn::video::{patch_layout, FrameInputs, Sampler, Stage2Params};
use skattn::{Result, Tensor};

fn main() -> Result<()> {
    let cfg = ModelConfig {
        latent_size: 8,
        pose_image_size: 16,
        channels: [8, 8, 16],
        res_blocks: 1,
        ..ModelConfig::default()
    };
    let model = Model::new(&cfg)?;
    let mut store = model.init_all(0);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let motion_gates: Vec<String> =
        store.names_with_prefix(MOTION_PREFIX).filter(|n| n.contains(".gate.")).cloned().collect();
    for name in model.adapters.gate_names().into_iter().chain(motion_gates) {
        let shape = store.get(&name)?.shape().to_vec();
        store.insert(name, Tensor::randn(&shape, 0.3, &mut rng));
    }
    let sampler = Sampler::new(&model, &store, &DiffusionConfig::default())?;
    let clip = Synth::new(&cfg, &DataConfig::default()).clip(10, 4)?;
    let encoder = PatchEncoder::new(cfg.expr_dim, cfg.patch_encoder_seed);
    let reference = sampler.reference_features(&clip[0].reference.to_latent())?;
    let inputs: Vec<FrameInputs> =
        clip.iter().map(|s| sampler.frame_inputs(&s.condition(&encoder, None))).collect::<Result<_>>()?;

    let noise = Tensor::randn(&cfg.latent_shape(), 1.0, &mut rng);
    let renoise = Tensor::randn(&cfg.latent_shape(), 1.0, &mut rng);
    let stage1 = sampler.stage1_generate(&reference, &inputs, &noise, 4, 15.0)?;
    let params = Stage2Params { renoise_strength: 0.6, patch_len: 4, overlap: 2, steps: 4 };
    println!("patches (start, len): {:?}", patch_layout(clip.len(), params.patch_len, params.overlap));
    let stage2 = sampler.stage2_generate(&stage1, &reference, &inputs, &renoise, &params)?;
    println!("adjacent-frame MAD: stage 1 {:.4}, stage 2 {:.4}", stage1.adjacent_mad(), stage2.clip.adjacent_mad());
    Ok(())
}
