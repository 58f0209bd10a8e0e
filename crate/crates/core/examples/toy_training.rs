//! Short end-to-end training run on a reduced model: base pretraining, then
//! adapter training with the base frozen.

use skattn::config::{ModelConfig, RunConfig};
use skattn::train::{run_training, smoothed_tail, Phase};
use skattn::Result;

fn main() -> Result<()> {
    let mut cfg = RunConfig {
        model: ModelConfig {
            latent_size: 8,
            pose_image_size: 16,
            channels: [16, 16, 32],
            res_blocks: 1,
            ..ModelConfig::default()
        },
        ..RunConfig::default()
    };
    cfg.train.dataset_size = 32;
    cfg.train.base.steps = 300;
    cfg.train.adapter.steps = 500;
    cfg.train.adapter.batch_size = 4;
    cfg.train.adapter.lr_max = 3e-3;
    let out = run_training(
        &cfg,
        |phase, r| {
            if r.step % 100 == 0 && phase != Phase::Motion {
                println!("{phase:?} step {:>4} t {:>3} loss {:.4}", r.step, r.t_sampled, r.loss_total);
            }
        },
        |_, _| Ok(()),
    )?;
    println!(
        "adapter loss: step 0 {:.4} (probe), smoothed final {:.4}; base frozen {}",
        out.adapter_probe.0,
        smoothed_tail(&out.adapter_log, 50),
        out.base_digest.0 == out.base_digest.1
    );
    Ok(())
}
