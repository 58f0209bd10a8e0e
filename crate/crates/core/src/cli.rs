//! Command-line surface of the `skattn` binary.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::{load_weights_with, save_weights_with};
use crate::attention::{attention_op_count, AttentionVariant};
use crate::bench::{bench_attention, BenchRow};
use crate::config::RunConfig;
use crate::diffusion::weighted_loss;
use crate::error::{Error, Result};
use crate::eval::self_reenactment;
use crate::golden::{check_golden, write_golden};
use crate::gradsuite::run_suite;
use crate::graph::Graph;
use crate::imaging::Image;
use crate::metrics::{psnr, ssim_default};
use crate::params::ParamStore;
use crate::pose::{ExpressionCoefficients, PatchEncoder, PoseRT, NUM_COEFFICIENTS};
use crate::synth::{Identity, Synth, SynthSample};
use crate::tensor::Tensor;
use crate::train::{run_training, StepRecord};
use crate::unet::{Model, BASE_PREFIX};
use crate::video::{FrameInputs, Sampler, Stage2Params};

pub const SEED_ENV: &str = "SKATTN_SEED";

#[derive(Parser, Debug)]
#[command(name = "skattn", version, about = "Toy portrait-reenactment adapters with spatial knitting attention")]
struct Cli {
    /// JSON run configuration; missing fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Print the effective configuration as JSON and exit.
    #[arg(long, global = true)]
    print_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pretrain the base UNet, then train the adapters.
    Train(TrainArgs),
    /// Generate a clip from a checkpoint with the two-stage sampler.
    Reenact(ReenactArgs),
    /// Predicted and measured attention MACs as CSV.
    BenchAttn(BenchArgs),
    /// Finite-difference gradient suite.
    GradCheck(GradArgs),
    /// Compare or regenerate the pose-raster fixtures.
    RasterGolden(GoldenArgs),
    /// Fast end-to-end sanity checks.
    SelfTest,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    base_steps: Option<usize>,
    #[arg(long)]
    adapter_steps: Option<usize>,
    #[arg(long)]
    motion_steps: Option<usize>,
}

#[derive(Args, Debug)]
struct ReenactArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Condition script (JSON); without it a synthetic clip is generated.
    #[arg(long)]
    script: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    clip_len: usize,
    #[arg(long, default_value_t = 0)]
    clip_seed: u64,
    #[arg(long, default_value_t = 0)]
    noise_seed: u64,
    /// Also score self-reenactment on this many held-out samples.
    #[arg(long, default_value_t = 0)]
    eval_samples: usize,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long = "H", default_value_t = 16)]
    h: usize,
    #[arg(long = "W", default_value_t = 16)]
    w: usize,
    #[arg(long = "L", default_value_t = 5)]
    l: usize,
    #[arg(long, default_value_t = 64)]
    d: usize,
    #[arg(long, default_value_t = 3)]
    reps: usize,
}

#[derive(Args, Debug)]
struct GradArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    shapes: usize,
}

#[derive(Args, Debug)]
struct GoldenArgs {
    #[arg(long, default_value = "crates/core/tests/fixtures/raster")]
    dir: PathBuf,
    /// Regenerate instead of compare.
    #[arg(long)]
    write: bool,
}

/// One driven frame of a condition script.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptFrame {
    #[serde(default)]
    pub yaw: f64,
    #[serde(default)]
    pub pitch: f64,
    #[serde(default)]
    pub roll: f64,
    pub translation: [f64; 3],
    /// Leading expression coefficients; the rest are zero.
    #[serde(default)]
    pub coefficients: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionScript {
    pub identity_seed: u64,
    pub frames: Vec<ScriptFrame>,
}

impl ConditionScript {
    pub fn samples(&self, synth: &Synth) -> Result<Vec<SynthSample>> {
        if self.frames.is_empty() {
            return Err(Error::InvalidConfig("condition script has no frames".into()));
        }
        let id = Identity::random(&mut ChaCha8Rng::seed_from_u64(self.identity_seed));
        self.frames
            .iter()
            .map(|f| {
                if f.coefficients.len() > NUM_COEFFICIENTS {
                    return Err(Error::InvalidConfig(format!("more than {NUM_COEFFICIENTS} coefficients")));
                }
                let mut c = f.coefficients.clone();
                c.resize(NUM_COEFFICIENTS, 0.0);
                let pose = PoseRT::from_euler(f.yaw, f.pitch, f.roll, f.translation);
                pose.validate()?;
                synth.sample(&id, pose, ExpressionCoefficients::new(c)?)
            })
            .collect()
    }
}

/// Frame and clip scores written by `reenact`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReenactMetrics {
    pub frames: usize,
    pub stage1_psnr: Vec<f64>,
    pub stage2_psnr: Vec<f64>,
    pub copy_psnr: Vec<f64>,
    pub stage1_ssim: Vec<f64>,
    pub stage2_ssim: Vec<f64>,
    pub stage1_adjacent_mad: f64,
    pub stage2_adjacent_mad: f64,
    pub weights_digest: String,
    pub self_reenactment: Option<SelfEvalSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelfEvalSummary {
    pub samples: usize,
    pub model_psnr: f64,
    pub copy_psnr: f64,
    pub model_ssim: f64,
    pub copy_ssim: f64,
}

/// Parses `argv` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let cfg = match load_config(cli.config.as_deref()) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    if cli.print_config {
        let _ = writeln!(std::io::stdout(), "{}", cfg.to_json());
        return 0;
    }
    let Some(command) = cli.command else {
        eprintln!("error: a subcommand is required\n\nusage: skattn [--config FILE] [--print-config] <train|reenact|bench-attn|grad-check|raster-golden|self-test>");
        return 2;
    };
    let outcome = match command {
        Command::Train(a) => train(&cfg, &a),
        Command::Reenact(a) => reenact(&a),
        Command::BenchAttn(a) => bench(&a),
        Command::GradCheck(a) => grad_check(&a),
        Command::RasterGolden(a) => raster_golden(&a),
        Command::SelfTest => self_test(&cfg),
    };
    match outcome {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e @ (Error::InvalidConfig(_) | Error::PatchConfigInvalid(_))) => {
            eprintln!("error: {e}");
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// Reads the config file (or defaults) and applies the seed override.
pub fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::from_json(&fs::read_to_string(p)?)?,
        None => RunConfig::default(),
    };
    if let Ok(v) = std::env::var(SEED_ENV) {
        cfg.train.seed =
            v.trim().parse().map_err(|_| Error::InvalidConfig(format!("{SEED_ENV}={v:?} is not a u64")))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_loss_csv(path: &Path, log: &[StepRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in log {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn checkpoint_metadata(cfg: &RunConfig, step: usize) -> BTreeMap<String, String> {
    BTreeMap::from([("config".to_string(), cfg.to_json()), ("adapter_step".to_string(), step.to_string())])
}

fn train(cfg: &RunConfig, a: &TrainArgs) -> Result<bool> {
    let mut cfg = cfg.clone();
    if let Some(n) = a.base_steps {
        cfg.train.base.steps = n;
    }
    if let Some(n) = a.adapter_steps {
        cfg.train.adapter.steps = n;
    }
    if let Some(n) = a.motion_steps {
        cfg.train.motion.steps = n;
    }
    cfg.validate()?;
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("config.json"), cfg.to_json())?;
    let total = cfg.train.base.steps + cfg.train.adapter.steps + cfg.train.motion.steps;
    let mut done = 0usize;
    let out = run_training(
        &cfg,
        |phase, r: &StepRecord| {
            done += 1;
            if r.step % 100 == 0 {
                eprintln!("[{done}/{total}] {phase:?} step {} loss {:.5}", r.step, r.loss_total);
            }
        },
        |step, store| {
            let name = if step == cfg.train.adapter.steps {
                "final.skaw".to_string()
            } else {
                format!("checkpoint-{step:06}.skaw")
            };
            save_weights_with(store, &checkpoint_metadata(&cfg, step), a.out.join(name))
        },
    )?;
    write_loss_csv(&a.out.join("loss.csv"), &out.adapter_log)?;
    write_loss_csv(&a.out.join("base_loss.csv"), &out.base_log)?;
    if !out.motion_log.is_empty() {
        write_loss_csv(&a.out.join("motion_loss.csv"), &out.motion_log)?;
    }
    let frozen = out.base_digest.0 == out.base_digest.1;
    let summary = serde_json::json!({
        "base_digest_before": out.base_digest.0,
        "base_digest_after": out.base_digest.1,
        "base_frozen": frozen,
        "adapter_probe_before": out.adapter_probe.0,
        "adapter_probe_after": out.adapter_probe.1,
        "weights_digest": out.store.digest(""),
    });
    fs::write(a.out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    println!("wrote {}", a.out.join("final.skaw").display());
    if !frozen {
        eprintln!("base weights changed during adapter training");
    }
    Ok(frozen)
}

/// Loads a checkpoint together with the configuration it was trained with.
pub fn load_checkpoint(path: &Path) -> Result<(RunConfig, ParamStore)> {
    let (store, meta) = load_weights_with(path)?;
    let cfg = match meta.get("config") {
        Some(text) => RunConfig::from_json(text)?,
        None => RunConfig::default(),
    };
    Ok((cfg, store))
}

fn save_frames(dir: &Path, frames: &[Image]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, f) in frames.iter().enumerate() {
        f.save_png(dir.join(format!("frame_{i:03}.png")))?;
    }
    Ok(())
}

/// Runs stage 1 and stage 2 on `samples` and scores both against the
/// rendered ground truth.
pub fn reenact_samples(
    cfg: &RunConfig,
    store: &ParamStore,
    samples: &[SynthSample],
    noise_seed: u64,
) -> Result<(ReenactMetrics, Vec<Image>, Vec<Image>)> {
    let model = Model::new(&cfg.model)?;
    let sampler = Sampler::new(&model, store, &cfg.diffusion)?;
    let encoder = PatchEncoder::new(cfg.model.expr_dim, cfg.model.patch_encoder_seed);
    let reference_img = &samples[0].reference;
    let reference = sampler.reference_features(&reference_img.to_latent())?;
    let inputs: Vec<FrameInputs> =
        samples.iter().map(|s| sampler.frame_inputs(&s.condition(&encoder, None))).collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let shape = cfg.model.latent_shape();
    let noise = Tensor::randn(&shape, 1.0, &mut rng);
    let renoise = Tensor::randn(&shape, 1.0, &mut rng);
    let stage1 = sampler.stage1_generate(&reference, &inputs, &noise, cfg.video.stage1_steps, cfg.video.fps)?;
    let stage2 =
        sampler.stage2_generate(&stage1, &reference, &inputs, &renoise, &Stage2Params::from_config(&cfg.video))?;
    let to_images = |frames: &[Tensor]| frames.iter().map(Image::from_latent).collect::<Result<Vec<_>>>();
    let img1 = to_images(&stage1.frames)?;
    let img2 = to_images(&stage2.clip.frames)?;
    let score = |imgs: &[Image], f: fn(&Image, &Image) -> Result<f64>| {
        imgs.iter().zip(samples).map(|(i, s)| f(i, &s.driving)).collect::<Result<Vec<_>>>()
    };
    let metrics = ReenactMetrics {
        frames: samples.len(),
        stage1_psnr: score(&img1, psnr)?,
        stage2_psnr: score(&img2, psnr)?,
        copy_psnr: samples.iter().map(|s| psnr(reference_img, &s.driving)).collect::<Result<_>>()?,
        stage1_ssim: score(&img1, ssim_default)?,
        stage2_ssim: score(&img2, ssim_default)?,
        stage1_adjacent_mad: stage1.adjacent_mad(),
        stage2_adjacent_mad: stage2.clip.adjacent_mad(),
        weights_digest: store.digest(""),
        self_reenactment: None,
    };
    Ok((metrics, img1, img2))
}

fn reenact(a: &ReenactArgs) -> Result<bool> {
    let (cfg, store) = load_checkpoint(&a.checkpoint)?;
    let synth = Synth::new(&cfg.model, &cfg.data);
    let samples = match &a.script {
        Some(p) => serde_json::from_str::<ConditionScript>(&fs::read_to_string(p)?)
            .map_err(|e| Error::InvalidConfig(format!("condition script: {e}")))?
            .samples(&synth)?,
        None if a.clip_len == 0 => return Err(Error::InvalidConfig("--clip-len must be positive".into())),
        None => synth.clip(a.clip_len, a.clip_seed)?,
    };
    let (mut metrics, img1, img2) = reenact_samples(&cfg, &store, &samples, a.noise_seed)?;
    if a.eval_samples > 0 {
        let model = Model::new(&cfg.model)?;
        let held = synth.dataset(a.eval_samples, a.clip_seed.wrapping_add(999))?;
        let (s, _) = self_reenactment(&model, &store, &cfg.diffusion, &held, cfg.video.stage2_steps, a.noise_seed)?;
        metrics.self_reenactment = Some(SelfEvalSummary {
            samples: held.len(),
            model_psnr: s.mean_model_psnr(),
            copy_psnr: s.mean_copy_psnr(),
            model_ssim: s.mean_model_ssim(),
            copy_ssim: s.mean_copy_ssim(),
        });
    }
    fs::create_dir_all(&a.out)?;
    samples[0].reference.save_png(a.out.join("reference.png"))?;
    save_frames(&a.out.join("stage1"), &img1)?;
    save_frames(&a.out.join("stage2"), &img2)?;
    save_frames(&a.out.join("driving"), &samples.iter().map(|s| s.driving.clone()).collect::<Vec<_>>())?;
    fs::write(a.out.join("metrics.json"), serde_json::to_string_pretty(&metrics)?)?;
    println!(
        "{} frames, adjacent MAD stage1 {:.5} stage2 {:.5}",
        metrics.frames, metrics.stage1_adjacent_mad, metrics.stage2_adjacent_mad
    );
    Ok(true)
}

fn bench(a: &BenchArgs) -> Result<bool> {
    if a.h == 0 || a.w == 0 || a.l == 0 || a.d == 0 || a.reps == 0 {
        return Err(Error::InvalidConfig("H, W, L, d and reps must be positive".into()));
    }
    let rows: Vec<BenchRow> =
        AttentionVariant::ALL.iter().map(|&v| bench_attention(a.h, a.w, a.l, a.d, v, a.reps)).collect::<Result<_>>()?;
    let mut w = csv::Writer::from_writer(std::io::stdout());
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(rows.iter().all(BenchRow::matches))
}

fn grad_check(a: &GradArgs) -> Result<bool> {
    if a.shapes == 0 {
        return Err(Error::InvalidConfig("--shapes must be positive".into()));
    }
    let entries = run_suite(a.seed, a.shapes)?;
    let mut out = std::io::stdout().lock();
    for e in &entries {
        let verdict = if e.passed() { "ok" } else { "FAIL" };
        writeln!(out, "{verdict:4} {:24} max_rel {:.3e}  {}", e.op, e.report.max_rel_err(), e.shape)?;
    }
    let failed = entries.iter().filter(|e| !e.passed()).count();
    writeln!(out, "{} checks, {failed} failed", entries.len())?;
    Ok(failed == 0)
}

fn raster_golden(a: &GoldenArgs) -> Result<bool> {
    if a.write {
        write_golden(&a.dir)?;
        println!("wrote fixtures to {}", a.dir.display());
        return Ok(true);
    }
    let checks = check_golden(&a.dir)?;
    for c in &checks {
        let ok = c.pixels_match && c.sidecar_match;
        println!(
            "{} {} pixels={} sidecar={}",
            if ok { "ok  " } else { "FAIL" },
            c.name,
            c.pixels_match,
            c.sidecar_match
        );
    }
    Ok(checks.iter().all(|c| c.pixels_match && c.sidecar_match))
}

fn report(name: &str, ok: bool) -> bool {
    println!("{} {name}", if ok { "PASS" } else { "FAIL" });
    ok
}

fn self_test(cfg: &RunConfig) -> Result<bool> {
    let mut all = true;

    let model = Model::new(&cfg.model)?;
    let store = model.init_all(cfg.train.seed);
    let sampler = Sampler::new(&model, &store, &cfg.diffusion)?;
    let synth = Synth::new(&cfg.model, &cfg.data);
    let encoder = PatchEncoder::new(cfg.model.expr_dim, cfg.model.patch_encoder_seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let mut transparent = true;
    for s in synth.dataset(3, cfg.train.seed)? {
        let z = Tensor::randn(&cfg.model.latent_shape(), 1.0, &mut rng);
        let bare = sampler.predict(std::slice::from_ref(&z), 500, &[FrameInputs { control: None }], None, false)?;
        let reference = sampler.reference_features(&s.reference.to_latent())?;
        let inputs = sampler.frame_inputs(&s.condition(&encoder, None))?;
        let adapted = sampler.predict(&[z], 500, &[inputs], Some(&reference), true)?;
        transparent &= bare == adapted;
    }
    all &= report("fresh adapters leave the base forward unchanged", transparent);

    let mut g = Graph::new();
    let z = g.constant(Tensor::zeros(&[1, 4, 4]));
    let zh = g.constant(Tensor::new(&[1, 4, 4], vec![1.0; 16])?);
    let loss = weighted_loss(&mut g, z, zh, &Tensor::new(&[1, 4, 4], vec![1.0; 16])?, 0.0, 0.0)?;
    all &= report("weighted loss hand example", g.value(loss.total).item() == 2.0);

    let predicted = attention_op_count(16, 16, 5, 64, AttentionVariant::SkCross);
    let row = bench_attention(16, 16, 5, 64, AttentionVariant::SkCross, 1)?;
    all &= report("sk-cross MAC count", predicted.score == 163_840 && row.matches());

    let bytes = crate::archive::to_bytes(&store, &BTreeMap::new());
    let (back, _) = crate::archive::from_bytes(&bytes)?;
    all &= report(
        "weight archive round trip",
        back.digest("") == store.digest("") && back.digest(BASE_PREFIX) == store.digest(BASE_PREFIX),
    );

    let suite = run_suite(cfg.train.seed, 1)?;
    all &= report("gradient suite (one shape per op)", suite.iter().all(|e| e.passed()));

    Ok(all)
}
