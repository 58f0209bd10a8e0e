use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use skattn::archive::{from_bytes, load_weights, save_weights, to_bytes};
use skattn::cli::{load_checkpoint, reenact_samples};
use skattn::config::{ModelConfig, RunConfig};
use skattn::imaging::Image;
use skattn::metrics::{psnr, ssim};
use skattn::pose::ExpressionCoefficients;
use skattn::synth::{Synth, JAW_OPEN};
use skattn::{Error, ParamStore, Tensor};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_skattn"));
    c.current_dir(Path::new(env!("CARGO_MANIFEST_DIR")).join("../.."));
    c.env_remove("SKATTN_SEED");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn pairs() -> Vec<(Image, Image)> {
    let wave = |c: usize, h: usize, w: usize, f: f64, p: f64| {
        let data = (0..c * h * w).map(|i| 0.5 + 0.45 * ((i as f64) * f + p).sin()).collect();
        Image::new(c, h, w, data).unwrap()
    };
    vec![
        (wave(1, 8, 8, 0.3, 0.0), wave(1, 8, 8, 0.31, 0.2)),
        (wave(3, 12, 10, 0.7, 1.0), wave(3, 12, 10, 0.7, 1.4)),
        (Image::filled(4, 5, 6, 0.25), wave(4, 5, 6, 1.3, -0.5)),
    ]
}

fn scalar_psnr(a: &Image, b: &Image) -> f64 {
    let mut s = 0.0;
    for c in 0..a.channels {
        for y in 0..a.height {
            for x in 0..a.width {
                s += (a.get(c, y, x) - b.get(c, y, x)).powi(2);
            }
        }
    }
    -10.0 * (s / (a.channels * a.height * a.width) as f64).log10()
}

/// Two-pass window statistics.
fn scalar_ssim(a: &Image, b: &Image, win: usize) -> f64 {
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let (wy, wx) = (win.min(a.height), win.min(a.width));
    let mut vals = Vec::new();
    for c in 0..a.channels {
        for y0 in 0..=a.height - wy {
            for x0 in 0..=a.width - wx {
                let px: Vec<(f64, f64)> = (y0..y0 + wy)
                    .flat_map(|y| (x0..x0 + wx).map(move |x| (y, x)))
                    .map(|(y, x)| (a.get(c, y, x), b.get(c, y, x)))
                    .collect();
                let n = px.len() as f64;
                let ma = px.iter().map(|p| p.0).sum::<f64>() / n;
                let mb = px.iter().map(|p| p.1).sum::<f64>() / n;
                let va = px.iter().map(|p| (p.0 - ma).powi(2)).sum::<f64>() / n;
                let vb = px.iter().map(|p| (p.1 - mb).powi(2)).sum::<f64>() / n;
                let cov = px.iter().map(|p| (p.0 - ma) * (p.1 - mb)).sum::<f64>() / n;
                vals.push((2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2)));
            }
        }
    }
    vals.iter().sum::<f64>() / vals.len() as f64
}

#[test]
fn metrics_match_scalar_implementations() {
    for (a, b) in pairs() {
        assert!((psnr(&a, &b).unwrap() - scalar_psnr(&a, &b)).abs() < 1e-9);
        assert!((ssim(&a, &b, 8, 0.01, 0.03).unwrap() - scalar_ssim(&a, &b, 8)).abs() < 1e-9);
        assert!((ssim(&a, &a, 8, 0.01, 0.03).unwrap() - 1.0).abs() < 1e-12);
    }
    let (a, _) = &pairs()[0];
    assert!(matches!(psnr(a, &Image::filled(1, 4, 4, 0.0)), Err(Error::ShapeMismatch { .. })));
}

fn sample_store() -> ParamStore {
    let mut s = ParamStore::new();
    s.insert("a.w", Tensor::new(&[2, 3], vec![1.0, -2.5, 3.25, f64::MIN_POSITIVE, -0.0, 1e300]).unwrap());
    s.insert("b", Tensor::new(&[4], vec![0.1, 0.2, 0.3, 0.4]).unwrap());
    s
}

#[test]
fn archive_round_trips_bit_exactly() {
    let store = sample_store();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.skaw");
    save_weights(&store, &path).unwrap();
    let back = load_weights(&path).unwrap();
    for (name, t) in store.iter() {
        let u = back.get(name).unwrap();
        assert_eq!(t.shape(), u.shape());
        assert!(t.data().iter().zip(u.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    assert_eq!(back.digest(""), store.digest(""));
}

#[test]
fn damaged_archives_are_rejected() {
    let bytes = to_bytes(&sample_store(), &BTreeMap::new());
    assert!(matches!(from_bytes(&bytes[..10]), Err(Error::CorruptHeader(_))));
    assert!(matches!(from_bytes(&bytes[..bytes.len() - 8]), Err(Error::CorruptHeader(_))));
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert!(matches!(from_bytes(&bad_magic), Err(Error::CorruptHeader(_))));
    let mut version = bytes.clone();
    version[4] = 9;
    assert!(matches!(from_bytes(&version), Err(Error::FormatVersionMismatch { found: 9, .. })));
    let mut garbled = bytes.clone();
    garbled[17] = b'#';
    assert!(matches!(from_bytes(&garbled), Err(Error::CorruptHeader(_))));

    let text = String::from_utf8_lossy(&bytes).into_owned();
    let at = text.find("[2,3]").unwrap();
    let mut reshaped = bytes.clone();
    reshaped[at..at + 5].copy_from_slice(b"[3,3]");
    assert!(matches!(from_bytes(&reshaped), Err(Error::CorruptHeader(_))));
}

#[test]
fn cli_exit_codes() {
    assert_eq!(run(&["grad-check", "--shapes", "1"]).status.code(), Some(0));
    assert_eq!(run(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(run(&[]).status.code(), Some(2));
    assert_eq!(run(&["bench-attn", "--H", "x"]).status.code(), Some(2));
    let bad_seed = bin().args(["self-test"]).env("SKATTN_SEED", "abc").output().unwrap();
    assert_eq!(bad_seed.status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.skaw");
    let out = run(&["reenact", "--checkpoint", missing.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(run(&["raster-golden"]).status.code(), Some(0));
}

#[test]
fn bench_reports_the_sk_cross_count() {
    let out = run(&["bench-attn", "--reps", "1"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    let row = text.lines().find(|l| l.starts_with("sk-cross")).unwrap();
    assert!(row.split(',').any(|f| f == "163840"), "{row}");
}

#[test]
fn print_config_reflects_seed_override() {
    let out = bin().args(["--print-config"]).env("SKATTN_SEED", "77").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let cfg = RunConfig::from_json(&String::from_utf8(out.stdout).unwrap()).unwrap();
    assert_eq!(cfg.train.seed, 77);
}

fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig {
        model: ModelConfig {
            latent_size: 8,
            pose_image_size: 16,
            channels: [8, 8, 16],
            res_blocks: 1,
            expr_dim: 8,
            time_embed_dim: 8,
            ..ModelConfig::default()
        },
        ..RunConfig::default()
    };
    cfg.train.dataset_size = 4;
    cfg.train.base.steps = 4;
    cfg.train.adapter.steps = 6;
    cfg.train.motion.steps = 2;
    cfg.train.motion_clip_len = 4;
    cfg.train.checkpoint_every = 3;
    cfg.video.stage1_steps = 2;
    cfg.video.stage2_steps = 2;
    cfg.video.patch_len = 4;
    cfg.video.overlap = 2;
    cfg
}

fn train_into(dir: &Path, config: &Path) -> Output {
    bin().args(["--config", config.to_str().unwrap(), "train", "--out", dir.to_str().unwrap()]).output().unwrap()
}

#[test]
fn training_is_deterministic_and_checkpoints_reload_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("tiny.json");
    std::fs::write(&config, tiny_config().to_json()).unwrap();
    let (a, b): (PathBuf, PathBuf) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        let out = train_into(d, &config);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for f in ["loss.csv", "base_loss.csv", "motion_loss.csv", "final.skaw", "checkpoint-000003.skaw"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["base_frozen"], true);

    let (cfg, store) = load_checkpoint(&a.join("final.skaw")).unwrap();
    assert_eq!(cfg, tiny_config());
    let clip = Synth::new(&cfg.model, &cfg.data).clip(5, 3).unwrap();
    let (m1, s1, t1) = reenact_samples(&cfg, &store, &clip, 4).unwrap();
    let copy = tmp.path().join("copy.skaw");
    save_weights(&store, &copy).unwrap();
    let (m2, s2, t2) = reenact_samples(&cfg, &load_weights(&copy).unwrap(), &clip, 4).unwrap();
    assert_eq!((m1, s1, t1), (m2, s2, t2));

    let out_dir = tmp.path().join("reenact");
    let out = run(&[
        "reenact",
        "--checkpoint",
        a.join("final.skaw").to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--clip-len",
        "5",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["reference.png", "stage1/frame_004.png", "stage2/frame_000.png", "driving/frame_002.png", "metrics.json"]
    {
        assert!(out_dir.join(f).exists(), "{f}");
    }
}

#[test]
fn invalid_patch_config_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    cfg.video.overlap = cfg.video.patch_len;
    let config = tmp.path().join("bad.json");
    std::fs::write(&config, cfg.to_json()).unwrap();
    assert_eq!(run(&["--config", config.to_str().unwrap(), "self-test"]).status.code(), Some(2));
}

#[test]
fn synth_is_seeded_and_jaw_only_touches_the_mask() {
    let cfg = tiny_config();
    let synth = Synth::new(&cfg.model, &cfg.data);
    assert_eq!(synth.dataset(3, 5).unwrap(), synth.dataset(3, 5).unwrap());
    assert_ne!(synth.dataset(3, 5).unwrap(), synth.dataset(3, 6).unwrap());
    for s in synth.dataset(6, 8).unwrap() {
        let mut open = s.coeffs.values().to_vec();
        open[JAW_OPEN] = 1.0;
        let mut shut = open.clone();
        shut[JAW_OPEN] = 0.0;
        let a = synth.render(&s.identity, &s.pose, &ExpressionCoefficients::new(open).unwrap());
        let b = synth.render(&s.identity, &s.pose, &ExpressionCoefficients::new(shut).unwrap());
        let side = a.width;
        let mut changed = 0;
        for c in 0..a.channels {
            for y in 0..a.height {
                for x in 0..a.width {
                    if a.get(c, y, x) != b.get(c, y, x) {
                        changed += 1;
                        assert_eq!(s.mask.data()[y * side + x], 1.0, "pixel ({y},{x}) outside mask");
                    }
                }
            }
        }
        assert!(changed > 0);
    }
}
