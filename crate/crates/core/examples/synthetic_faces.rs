//! Renders a few synthetic subjects: reference frame, driving frame, the
//! pose raster and the eye/mouth crops.

use skattn::config::{DataConfig, ModelConfig};
use skattn::synth::Synth;
use skattn::Result;

fn main() -> Result<()> {
    let out = std::env::temp_dir().join("skattn-synth");
    std::fs::create_dir_all(&out)?;
    let model = ModelConfig { latent_size: 64, pose_image_size: 64, ..ModelConfig::default() };
    let synth = Synth::new(&model, &DataConfig::default());
    for (i, s) in synth.dataset(4, 3)?.iter().enumerate() {
        s.reference.save_png(out.join(format!("{i}_reference.png")))?;
        s.driving.save_png(out.join(format!("{i}_driving.png")))?;
        s.pose_image.save_png(out.join(format!("{i}_pose.png")))?;
        s.eye_patch.save_png(out.join(format!("{i}_eye.png")))?;
        s.mouth_patch.save_png(out.join(format!("{i}_mouth.png")))?;
        println!("subject {i}: roll {:.2}, coefficients {:.2?}", s.pose.roll(), &s.coeffs.values()[..2]);
    }
    println!("wrote {}", out.display());
    Ok(())
}
