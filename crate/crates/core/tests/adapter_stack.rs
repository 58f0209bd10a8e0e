use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use skattn::adapter::{add_control, inject_reference, tile_id_feature, zero_conv, zero_conv_init, ReferenceSite};
use skattn::attention::sk_reference_attention;
use skattn::config::{DataConfig, ModelConfig, OptimConfig, RunConfig};
use skattn::pose::PatchEncoder;
use skattn::synth::Synth;
use skattn::train::{Adam, Trainer};
use skattn::unet::{bind_control, bind_reference, Conditioning, Model, ADAPTER_PREFIX, BASE_PREFIX};
use skattn::{Ctx, Graph, ParamStore, Tensor, Trainable};

fn small(latent: usize) -> ModelConfig {
    ModelConfig {
        latent_size: latent,
        pose_image_size: 2 * latent,
        channels: [8, 8, 16],
        res_blocks: 1,
        expr_dim: 8,
        time_embed_dim: 8,
        ..ModelConfig::default()
    }
}

fn open_gates(model: &Model, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    for name in model.adapters.gate_names() {
        let shape = store.get(&name).unwrap().shape().to_vec();
        store.insert(name, Tensor::randn(&shape, 0.5, rng));
    }
}

fn output(model: &Model, store: &ParamStore, z: &Tensor, t: f64, conditioned: bool, seed: u64) -> Tensor {
    let synth = Synth::new(&model.cfg, &DataConfig::default());
    let s = &synth.dataset(1, seed).unwrap()[0];
    let encoder = PatchEncoder::new(model.cfg.expr_dim, model.cfg.patch_encoder_seed);
    let feats = model.reference_pass(store, &s.reference.to_latent(), 0.0).unwrap();
    let pyramid = model.adapters.pyramid_tensors(store, &s.condition(&encoder, None)).unwrap();
    let mut g = Graph::new();
    let mut ctx = Ctx::new(&mut g, store, Trainable::Nothing);
    let refs = bind_reference(ctx.g, &feats);
    let control = bind_control(ctx.g, &[pyramid]);
    let zn = ctx.g.constant(z.clone());
    let cond = if conditioned {
        Conditioning { control: Some(&control), reference: Some(&refs), motion: true }
    } else {
        Conditioning::default()
    };
    let out = model.forward(&mut ctx, &[zn], t, &cond).unwrap();
    g.value(out.pred[0]).clone()
}

#[test]
fn fresh_adapters_leave_the_base_forward_bit_exact() {
    let model = Model::new(&small(8)).unwrap();
    let store = model.init_all(3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for i in 0..5 {
        let z = Tensor::randn(&[4, 8, 8], 1.0, &mut rng);
        let t = (i * 211) as f64;
        assert_eq!(output(&model, &store, &z, t, false, i), output(&model, &store, &z, t, true, i));
    }
}

#[test]
fn open_gates_make_the_condition_matter() {
    let model = Model::new(&small(8)).unwrap();
    let mut store = model.init_all(3);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    open_gates(&model, &mut store, &mut rng);
    let z = Tensor::randn(&[4, 8, 8], 1.0, &mut rng);
    assert_ne!(output(&model, &store, &z, 100.0, false, 0), output(&model, &store, &z, 100.0, true, 0));
}

#[test]
fn one_adapter_step_moves_gates_and_spares_the_base() {
    let cfg = RunConfig { model: small(8), ..RunConfig::default() };
    let model = Model::new(&cfg.model).unwrap();
    let mut store = model.init_all(1);
    let gates = model.adapters.gate_names();
    assert!(gates.iter().all(|n| store.get(n).unwrap().data().iter().all(|&v| v == 0.0)));
    let base = store.digest(BASE_PREFIX);
    let synth = Synth::new(&cfg.model, &cfg.data);
    let data = synth.dataset(2, 9).unwrap();
    let mut trainer = Trainer::new(&model, &cfg.diffusion, 2).unwrap();
    let batch: Vec<_> = data.iter().map(|s| trainer.example(&store, s, None).unwrap()).collect();
    let mut opt = Adam::new(&OptimConfig { lr_max: 1e-3, ..OptimConfig::default() });
    trainer.adapter_step(&mut store, &mut opt, &batch, 1e-3, 0).unwrap();
    for n in &gates {
        assert!(store.get(n).unwrap().data().iter().any(|&v| v != 0.0), "{n} still zero");
    }
    assert_eq!(store.digest(BASE_PREFIX), base);
    assert_ne!(store.digest(ADAPTER_PREFIX), model.init_all(1).digest(ADAPTER_PREFIX));
}

#[test]
fn gate_init_is_idempotent_zero() {
    let mut a = ParamStore::new();
    let mut b = ParamStore::new();
    zero_conv_init(&mut a, "g", 3, 5);
    zero_conv_init(&mut b, "g", 3, 5);
    zero_conv_init(&mut b, "g", 3, 5);
    assert_eq!(a.digest(""), b.digest(""));
    assert!(a.get("g.w").unwrap().data().iter().chain(a.get("g.b").unwrap().data()).all(|&v| v == 0.0));
}

#[test]
fn expression_projection_receives_gradient_through_open_gates() {
    let model = Model::new(&small(8)).unwrap();
    let mut store = model.init_all(2);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    open_gates(&model, &mut store, &mut rng);
    let synth = Synth::new(&model.cfg, &DataConfig::default());
    let s = &synth.dataset(1, 1).unwrap()[0];
    let encoder = PatchEncoder::new(model.cfg.expr_dim, model.cfg.patch_encoder_seed);
    let mut g = Graph::new();
    let mut ctx = Ctx::new(&mut g, &store, Trainable::prefixes(&["adapter.expr"]));
    let maps = model.adapters.condition_pyramid(&mut ctx, &s.condition(&encoder, None)).unwrap();
    let mut total = None;
    for m in maps {
        let shape = ctx.g.shape(m).to_vec();
        let r = ctx.g.constant(Tensor::randn(&shape, 1.0, &mut rng));
        let p = ctx.g.mul(m, r).unwrap();
        let s = ctx.g.sum(p).unwrap();
        total = Some(match total {
            None => s,
            Some(t) => ctx.g.add(t, s).unwrap(),
        });
    }
    ctx.g.backward(total.unwrap()).unwrap();
    let grads = ctx.param_grads();
    assert!(!grads.is_empty());
    for (name, grad) in grads {
        assert!(name.starts_with("adapter.expr"));
        assert!(grad.data().iter().any(|&v| v != 0.0), "{name} has zero gradient");
    }
}

#[test]
fn pyramid_extents_follow_the_latent_size() {
    for latent in [8, 16, 32] {
        let model = Model::new(&small(latent)).unwrap();
        let store = model.init_all(0);
        let synth = Synth::new(&model.cfg, &DataConfig::default());
        let s = &synth.dataset(1, 0).unwrap()[0];
        let encoder = PatchEncoder::new(model.cfg.expr_dim, model.cfg.patch_encoder_seed);
        let maps = model.adapters.pyramid_tensors(&store, &s.condition(&encoder, None)).unwrap();
        for (l, m) in maps.iter().enumerate() {
            assert_eq!(m.shape(), &[model.cfg.channels[l], latent >> l, latent >> l]);
            assert!(m.data().iter().all(|&v| v == 0.0));
        }
    }
}

#[test]
fn injection_differs_from_hidden_only_by_the_gated_branch() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let site = ReferenceSite::new("d1", 4, 2, true).unwrap();
    let mut store = ParamStore::new();
    site.init(&mut store, &mut rng);
    let mut g = Graph::new();
    let mut ctx = Ctx::new(&mut g, &store, Trainable::Nothing);
    let h = ctx.g.constant(Tensor::randn(&[4, 3, 5], 1.0, &mut rng));
    let r = ctx.g.constant(Tensor::randn(&[4, 3, 5], 1.0, &mut rng));
    let fresh = inject_reference(&mut ctx, h, r, &site).unwrap();
    assert_eq!(ctx.g.value(fresh), ctx.g.value(h));
    let same = inject_reference(&mut ctx, h, h, &site).unwrap();
    assert_eq!(ctx.g.shape(same), ctx.g.shape(h));

    store.insert(format!("{}.w", site.gate), Tensor::randn(&[4, 4], 1.0, &mut rng));
    store.insert(format!("{}.b", site.gate), Tensor::randn(&[4], 1.0, &mut rng));
    let mut g = Graph::new();
    let mut ctx = Ctx::new(&mut g, &store, Trainable::Nothing);
    let hv = Tensor::randn(&[4, 3, 5], 1.0, &mut rng);
    let h = ctx.g.constant(hv.clone());
    let r = ctx.g.constant(Tensor::randn(&[4, 3, 5], 1.0, &mut rng));
    let out = inject_reference(&mut ctx, h, r, &site).unwrap();
    let fused = sk_reference_attention(&mut ctx, h, r, &site.attn).unwrap();
    let branch = zero_conv(&mut ctx, fused, &site.gate).unwrap();
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut ctx.g.value(out).data().iter().zip(hv.data()).map(|(a, b)| a - b));
    let b = norm(&mut ctx.g.value(branch).data().iter().copied());
    assert!(b > 0.0 && (diff - b).abs() <= 1e-12 * b);
}

#[test]
fn tiled_feature_has_n_identical_rows() {
    let mut g = Graph::new();
    let v = g.constant(Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap());
    for n in [1, 5] {
        let t = tile_id_feature(&mut g, v, n).unwrap();
        assert_eq!(g.shape(t), &[n, 3]);
        for row in g.value(t).data().chunks(3) {
            assert_eq!(row, &[0.5, -1.0, 2.0]);
        }
    }
}

proptest! {
    #[test]
    fn add_control_is_a_plain_sum(seed in any::<u64>(), c in 1usize..4, h in 1usize..5, w in 1usize..5, k in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (hv, cv) = (Tensor::randn(&[c, h, w], 1.0, &mut rng), Tensor::randn(&[c, h, w], 1.0, &mut rng));
        let mut g = Graph::new();
        let (hn, cn, zero) = (g.constant(hv.clone()), g.constant(cv.clone()), g.constant(Tensor::zeros(&[c, h, w])));
        let a = add_control(&mut g, hn, zero).unwrap();
        prop_assert_eq!(g.value(a), &hv);
        let b = add_control(&mut g, zero, cn).unwrap();
        prop_assert_eq!(g.value(b), &cv);
        let sum = add_control(&mut g, hn, cn).unwrap();
        let (hk, ck) = (g.constant(hv.map(|x| x * k)), g.constant(cv.map(|x| x * k)));
        let scaled = add_control(&mut g, hk, ck).unwrap();
        for (s, t) in g.value(sum).data().iter().zip(g.value(scaled).data()) {
            prop_assert!((s * k - t).abs() < 1e-12);
        }
    }
}
