//! Fresh zero-convolution gates leave the base UNet untouched; opening one
//! gate makes the condition change the output.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use skattn::config::{DataConfig, ModelConfig};
use skattn::pose::PatchEncoder;
use skattn::synth::Synth;
use skattn::unet::Model;
use skattn::video::{FrameInputs, Sampler};
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
    let s = &Synth::new(&cfg, &DataConfig::default()).dataset(1, 0)?[0];
    let encoder = PatchEncoder::new(cfg.expr_dim, cfg.patch_encoder_seed);
    let z = Tensor::randn(&cfg.latent_shape(), 1.0, &mut ChaCha8Rng::seed_from_u64(1));

    let diff = |store: &skattn::ParamStore| -> Result<f64> {
        let sampler = Sampler::new(&model, store, &Default::default())?;
        let bare = sampler.predict(std::slice::from_ref(&z), 400, &[FrameInputs { control: None }], None, false)?;
        let reference = sampler.reference_features(&s.reference.to_latent())?;
        let inputs = sampler.frame_inputs(&s.condition(&encoder, None))?;
        let cond = sampler.predict(std::slice::from_ref(&z), 400, &[inputs], Some(&reference), false)?;
        Ok(bare[0].data().iter().zip(cond[0].data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
    };
    println!("fresh gates: max |base - conditioned| = {:e}", diff(&store)?);

    let gate = model.adapters.gate_names().into_iter().next().expect("at least one gate");
    let shape = store.get(&gate)?.shape().to_vec();
    store.insert(gate.clone(), Tensor::randn(&shape, 0.5, &mut ChaCha8Rng::seed_from_u64(2)));
    println!("opened {gate}: max |base - conditioned| = {:e}", diff(&store)?);
    Ok(())
}
