use super::*;
use crate::data::{
    render_reference_images, render_video, AppearanceConcept, CorpusItem, HeldOut, MotionConcept,
    Shape, Trajectory,
};
use crate::model::{build_denoiser, randomize_for_tests, DenoiserConfig};
use ndarray::{ArrayD, IxDyn};

fn tiny_config() -> DenoiserConfig {
    DenoiserConfig::with_dims(3, 3, 8, 8, 8, 8, 8)
}

fn tiny_sched() -> NoiseSchedule {
    NoiseSchedule::linear(20, 1e-4, 0.05).unwrap()
}

fn test_prompt() -> Prompt {
    Prompt::parse("a sks1 circle mot2").unwrap()
}

fn test_routing<A: Real>(d: usize) -> PromptRouting<A> {
    PromptRouting::uniform(&embed_prompt(&test_prompt(), d))
}

fn one_item_corpus<A: Real>(cfg: &DenoiserConfig) -> Corpus<A> {
    let a = AppearanceConcept::new(Shape::Circle, 1);
    let m = MotionConcept::new(Trajectory::LinearRight);
    let video = render_video(&a, &m, cfg.frames, cfg.height, cfg.width, 5).unwrap();
    Corpus {
        items: vec![CorpusItem {
            video,
            prompt: test_prompt(),
        }],
        held_out: HeldOut::default(),
    }
}

fn short_cfg(steps: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        steps,
        batch: 2,
        ..TrainConfig::pretrain(seed)
    }
}

fn param_bits<A: Real>(model: &Denoiser<A>) -> Vec<u64> {
    let mut out = Vec::new();
    model.for_each_param(&mut |_, view| {
        out.extend(view.iter().map(|v| v.as_f64().to_bits()));
    });
    out
}

#[test]
fn perfect_prediction_gives_zero_loss() {
    let mut rng = derive_rng(1, &["x"]);
    let x: Array4<f64> = normal_array(&mut rng, (2, 3, 4, 4));
    let (loss, grad) = mse_loss(&x, &x.clone()).unwrap();
    assert_eq!(loss, 0.0);
    assert!(grad.iter().all(|&v| v == 0.0));

    let y: Array4<f64> = normal_array(&mut rng, (2, 3, 4, 4));
    let (loss, _) = mse_loss(&x, &y).unwrap();
    assert!(loss > 0.0);
    let bad: Array4<f64> = Array4::zeros((2, 3, 4, 5));
    assert!(mse_loss(&x, &bad).is_err());
}

#[test]
fn diffusion_loss_is_deterministic_and_nonnegative() {
    let cfg = tiny_config();
    let mut model = build_denoiser::<f64>(&cfg, 2).unwrap();
    randomize_for_tests(&mut model, 3);
    let corpus = one_item_corpus::<f64>(&cfg);
    let routing = test_routing::<f64>(cfg.embed_dim);
    let sched = tiny_sched();

    let (a, ga) = diffusion_loss(&model, None, &corpus.items[0].video, &routing, &sched, 7).unwrap();
    let (b, gb) = diffusion_loss(&model, None, &corpus.items[0].video, &routing, &sched, 7).unwrap();
    assert!(a >= 0.0);
    assert_eq!(a.to_bits(), b.to_bits());
    assert_eq!(ga, gb);
    let (c, _) = diffusion_loss(&model, None, &corpus.items[0].video, &routing, &sched, 8).unwrap();
    assert_ne!(a.to_bits(), c.to_bits());

    // The freshly built model predicts exactly zero, so the loss is the mean
    // squared noise: near 1 for a few hundred standard normal draws.
    let zero_model = build_denoiser::<f64>(&cfg, 2).unwrap();
    let (l0, _) =
        diffusion_loss(&zero_model, None, &corpus.items[0].video, &routing, &sched, 9).unwrap();
    assert!((0.5..1.5).contains(&l0), "loss {l0}");
}

#[test]
fn diffusion_loss_rejects_empty_trainable_set_and_bad_shapes() {
    let cfg = tiny_config();
    let model = build_denoiser::<f64>(&cfg, 2).unwrap();
    let routing = test_routing::<f64>(cfg.embed_dim);
    let sched = tiny_sched();
    let video = one_item_corpus::<f64>(&cfg).items.remove(0).video;

    let err = diffusion_loss(&model, Some(&[]), &video, &routing, &sched, 1).unwrap_err();
    assert!(err.to_string().contains("empty trainable set"), "{err}");

    let bad = Array4::<f64>::zeros((2, 3, 8, 8));
    assert!(diffusion_loss(&model, None, &bad, &routing, &sched, 1).is_err());
}

#[test]
fn adapter_gradients_through_loss_match_finite_differences() {
    let cfg = tiny_config();
    let mut model = build_denoiser::<f64>(&cfg, 11).unwrap();
    randomize_for_tests(&mut model, 12);
    let mut adapter =
        init_adapter(&model, &[2, 6], ModuleKind::Spatial, 2, 13).unwrap();
    for (e, entry) in adapter.entries.iter_mut().enumerate() {
        let mut rng = derive_rng(14, &["f", &e.to_string()]);
        for v in entry.a.iter_mut().chain(entry.b.iter_mut()) {
            *v = rng.sample::<f64, _>(rand_distr::StandardNormal) * 0.1;
        }
    }
    let routing = test_routing::<f64>(cfg.embed_dim);
    let sched = tiny_sched();
    let video = one_item_corpus::<f64>(&cfg).items.remove(0).video;
    let seed = 15;

    let (_, grads) =
        diffusion_loss(&model, Some(&[&adapter]), &video, &routing, &sched, seed).unwrap();
    assert!(grads.keys().all(|k| k.starts_with("adapter0.")));

    let step = 1e-4;
    let mut checked = 0;
    for (key, which, entry_idx, elem) in [
        ("adapter0.layer2.spatial.self_attn.wq.a", 'a', 0usize, 3usize),
        ("adapter0.layer2.spatial.cross_attn.wv.b", 'b', 0, 5),
        ("adapter0.layer6.spatial.self_attn.wo.b", 'b', 0, 0),
        ("adapter0.layer6.spatial.cross_attn.wq.a", 'a', 0, 7),
    ] {
        let target_name = key
            .trim_start_matches("adapter0.")
            .trim_end_matches(".a")
            .trim_end_matches(".b");
        let pos = adapter
            .entries
            .iter()
            .position(|e| e.target.name() == target_name)
            .unwrap_or_else(|| panic!("no entry {target_name}"));
        let _ = entry_idx;
        let eval = |delta: f64| {
            let mut tweaked = adapter.clone();
            let m = if which == 'a' {
                &mut tweaked.entries[pos].a
            } else {
                &mut tweaked.entries[pos].b
            };
            m.as_slice_mut().unwrap()[elem] += delta;
            let (l, _) =
                diffusion_loss(&model, Some(&[&tweaked]), &video, &routing, &sched, seed).unwrap();
            l
        };
        let numeric = (eval(step) - eval(-step)) / (2.0 * step);
        let analytic = grads[key].as_slice().unwrap()[elem];
        let denom = analytic.abs().max(numeric.abs()).max(1e-6);
        let rel = (analytic - numeric).abs() / denom;
        assert!(rel < 1e-4, "{key}[{elem}]: analytic {analytic}, fd {numeric}");
        checked += 1;
    }
    assert_eq!(checked, 4);
}

#[test]
fn lion_fixed_point_and_exact_step_size() {
    let mut rng = derive_rng(21, &["p"]);
    let p0: ArrayD<f64> = normal_array(&mut rng, IxDyn(&[4, 3]));
    let mut params = IndexMap::new();
    params.insert("w".to_string(), p0.clone());
    let mut state = OptimizerState::new();

    // Zero gradient, zero momentum: nothing moves.
    let mut grads = Grads::default();
    grads.insert("w".to_string(), ArrayD::zeros(IxDyn(&[4, 3])));
    lion_step(&mut params, &grads, &mut state, 0.1, 0.9, 0.99, 0.0).unwrap();
    assert_eq!(params["w"], p0);
    assert_eq!(state.step, 1);

    // Nonzero gradient from zero params: every element moves by exactly lr.
    let g: ArrayD<f64> = normal_array(&mut rng, IxDyn(&[4, 3]));
    let mut params = IndexMap::new();
    params.insert("w".to_string(), ArrayD::<f64>::zeros(IxDyn(&[4, 3])));
    let mut state = OptimizerState::new();
    let mut grads = Grads::default();
    grads.insert("w".to_string(), g.clone());
    lion_step(&mut params, &grads, &mut state, 0.05, 0.9, 0.99, 0.0).unwrap();
    for (p, &gv) in params["w"].iter().zip(g.iter()) {
        assert_eq!(p.abs(), 0.05);
        assert_eq!(-p.signum(), gv.signum());
    }

    // lr = 0 is the identity even with gradients and decay.
    let before = params["w"].clone();
    lion_step(&mut params, &grads, &mut state, 0.0, 0.9, 0.99, 0.5).unwrap();
    assert_eq!(params["w"], before);
}

#[test]
fn lion_matches_scalar_recurrence() {
    let (lr, b1, b2, wd) = (0.03, 0.9, 0.99, 0.1);
    let mut rng = derive_rng(22, &["o"]);
    let n = 12;
    let p0: ArrayD<f64> = normal_array(&mut rng, IxDyn(&[n]));
    let gs: Vec<ArrayD<f64>> = (0..3).map(|_| normal_array(&mut rng, IxDyn(&[n]))).collect();

    let mut params = IndexMap::new();
    params.insert("w".to_string(), p0.clone());
    let mut state = OptimizerState::new();
    for g in &gs {
        let mut grads = Grads::default();
        grads.insert("w".to_string(), g.clone());
        lion_step(&mut params, &grads, &mut state, lr, b1, b2, wd).unwrap();
    }

    // Independent elementwise recurrence.
    for i in 0..n {
        let mut p = p0[i];
        let mut m = 0.0f64;
        for g in &gs {
            let c: f64 = b1 * m + (1.0 - b1) * g[i];
            let s = if c > 0.0 {
                1.0
            } else if c < 0.0 {
                -1.0
            } else {
                0.0
            };
            p -= lr * (s + wd * p);
            m = b2 * m + (1.0 - b2) * g[i];
        }
        assert!((params["w"][i] - p).abs() < 1e-12);
        assert!((state.momentum["w"][i] - m).abs() < 1e-12);
    }
    assert_eq!(state.step, 3);
}

#[test]
fn lion_rejects_missing_or_misshapen_gradients() {
    let mut params = IndexMap::new();
    params.insert("w".to_string(), ArrayD::<f64>::zeros(IxDyn(&[2, 2])));
    let mut state = OptimizerState::new();
    let empty = Grads::default();
    assert!(lion_step(&mut params, &empty, &mut state, 0.1, 0.9, 0.99, 0.0).is_err());

    let mut bad = Grads::default();
    bad.insert("w".to_string(), ArrayD::<f64>::zeros(IxDyn(&[2, 3])));
    assert!(lion_step(&mut params, &bad, &mut state, 0.1, 0.9, 0.99, 0.0).is_err());
}

#[test]
fn sgd_single_step_matches_hand_applied_gradients() {
    let cfg = tiny_config();
    let model0 = build_denoiser::<f64>(&cfg, 31).unwrap();
    let corpus = one_item_corpus::<f64>(&cfg);
    let sched = tiny_sched();
    let train_cfg = TrainConfig {
        steps: 1,
        lr: 0.01,
        batch: 1,
        optimizer: OptKind::Sgd,
        cond_drop_prob: 0.0,
        ..TrainConfig::pretrain(41)
    };

    let mut trained = model0.clone();
    pretrain_base(&mut trained, &corpus, &sched, &train_cfg).unwrap();

    let routing = PromptRouting::uniform(&embed_prompt(&corpus.items[0].prompt, cfg.embed_dim));
    let loss_seed = derive_seed(41, &["train", "0", "0", "loss"]);
    let (_, grads) =
        diffusion_loss(&model0, None, &corpus.items[0].video, &routing, &sched, loss_seed).unwrap();

    let mut expect = model0.clone();
    expect.for_each_param_mut(&mut |name, mut view| {
        let g = &grads[name];
        for (p, &gv) in view.iter_mut().zip(g.iter()) {
            *p -= 0.01 * gv;
        }
    });
    assert_eq!(param_bits(&trained), param_bits(&expect));
}

#[test]
fn pretraining_overfits_a_single_item() {
    // Width 16: the width-8 config used elsewhere lacks the capacity to push
    // the noise-prediction loss below ~0.17 on even a single clip.
    let cfg = DenoiserConfig::with_dims(3, 3, 8, 8, 16, 16, 16);
    let mut model = build_denoiser::<f32>(&cfg, 51).unwrap();
    let corpus = one_item_corpus::<f32>(&cfg);
    // A higher noise floor than the default schedule: at beta_start=1e-4 the
    // t=0 noise-prediction target demands ~100x amplification of the noise
    // component, which a desk-size model only fits given many more steps.
    let sched = NoiseSchedule::linear(20, 5e-3, 0.05).unwrap();
    let steps = 350;
    let train_cfg = TrainConfig {
        steps,
        ..TrainConfig::pretrain(52)
    };
    let report = pretrain_base(&mut model, &corpus, &sched, &train_cfg).unwrap();

    assert_eq!(report.losses.len(), steps);
    // Single-step losses are noisy (random timestep and noise draw each step),
    // so compare window averages instead of endpoints.
    let initial = report.losses[..10].iter().sum::<f64>() / 10.0;
    let final_loss = report.losses[steps - 50..].iter().sum::<f64>() / 50.0;
    assert!(
        final_loss <= 0.1 * initial,
        "loss only moved {initial:.4} -> {final_loss:.4}"
    );
}

#[test]
fn pretraining_is_seed_reproducible() {
    let cfg = tiny_config();
    let corpus = one_item_corpus::<f32>(&cfg);
    let sched = tiny_sched();

    let mut m1 = build_denoiser::<f32>(&cfg, 61).unwrap();
    let r1 = pretrain_base(&mut m1, &corpus, &sched, &short_cfg(12, 62)).unwrap();
    let mut m2 = build_denoiser::<f32>(&cfg, 61).unwrap();
    let r2 = pretrain_base(&mut m2, &corpus, &sched, &short_cfg(12, 62)).unwrap();
    assert_eq!(r1.losses, r2.losses);
    assert_eq!(param_bits(&m1), param_bits(&m2));

    let mut m3 = build_denoiser::<f32>(&cfg, 61).unwrap();
    let r3 = pretrain_base(&mut m3, &corpus, &sched, &short_cfg(12, 63)).unwrap();
    assert_ne!(r1.losses, r3.losses);
}

#[test]
fn pretraining_rejects_empty_corpus_and_bad_config() {
    let cfg = tiny_config();
    let mut model = build_denoiser::<f32>(&cfg, 71).unwrap();
    let sched = tiny_sched();
    let empty = Corpus::<f32> {
        items: vec![],
        held_out: HeldOut::default(),
    };
    assert!(pretrain_base(&mut model, &empty, &sched, &short_cfg(3, 1)).is_err());

    let corpus = one_item_corpus::<f32>(&cfg);
    for bad in [
        TrainConfig { steps: 0, ..short_cfg(3, 1) },
        TrainConfig { batch: 0, ..short_cfg(3, 1) },
        TrainConfig { lr: f64::NAN, ..short_cfg(3, 1) },
        TrainConfig { cond_drop_prob: 1.5, ..short_cfg(3, 1) },
        TrainConfig { lion_beta1: -0.1, ..short_cfg(3, 1) },
    ] {
        assert!(pretrain_base(&mut model, &corpus, &sched, &bad).is_err());
    }
}

#[test]
fn runaway_loss_trips_the_divergence_guard() {
    let cfg = tiny_config();
    let mut model = build_denoiser::<f32>(&cfg, 81).unwrap();
    let corpus = one_item_corpus::<f32>(&cfg);
    let sched = tiny_sched();
    let cfg_bad = TrainConfig {
        lr: 10.0,
        batch: 1,
        steps: 300,
        ..TrainConfig::pretrain(82)
    };
    let err = pretrain_base(&mut model, &corpus, &sched, &cfg_bad).unwrap_err();
    assert!(matches!(err, Error::Divergence(_)), "{err}");
}

#[test]
fn always_dropped_conditioning_trains_a_prompt_blind_model() {
    let cfg = tiny_config();
    let mut model = build_denoiser::<f32>(&cfg, 91).unwrap();
    let corpus = one_item_corpus::<f32>(&cfg);
    let sched = tiny_sched();
    let train_cfg = TrainConfig {
        cond_drop_prob: 1.0,
        ..short_cfg(40, 92)
    };
    pretrain_base(&mut model, &corpus, &sched, &train_cfg).unwrap();

    let z = normal_array::<f32, _>(
        &mut derive_rng(93, &["z"]),
        (cfg.frames, cfg.channels, cfg.height, cfg.width),
    );
    let opts = ForwardOpts::default();
    let outs: Vec<Array4<f32>> = ["a sks1 circle mot2", "a sks3 triangle", "plain square"]
        .iter()
        .map(|p| {
            let routing =
                PromptRouting::uniform(&embed_prompt(&Prompt::parse(p).unwrap(), cfg.embed_dim));
            model.forward(&z, 5, &routing, &[], &opts).unwrap()
        })
        .collect();
    let null_out = model
        .forward(
            &z,
            5,
            &PromptRouting::uniform(&embed_prompt::<f32>(&Prompt::null(), cfg.embed_dim)),
            &[],
            &opts,
        )
        .unwrap();
    for out in &outs {
        assert_eq!(out, &null_out);
    }
}

#[test]
fn appearance_lora_trains_only_adapter_factors() {
    let cfg = tiny_config();
    let mut base = build_denoiser::<f32>(&cfg, 101).unwrap();
    randomize_for_tests(&mut base, 102);
    let concept = AppearanceConcept::new(Shape::Triangle, 3);
    let refs = render_reference_images::<f32>(&concept, 2, cfg.height, cfg.width, 103).unwrap();
    let prompt = Prompt::parse("a sks3 triangle").unwrap();
    let sched = tiny_sched();
    let train_cfg = TrainConfig {
        steps: 5,
        ..TrainConfig::appearance(104)
    };

    let before = param_bits(&base);
    let (adapter, report) =
        train_appearance_lora(&base, &refs, &prompt, &[2, 6], 2, &sched, &train_cfg).unwrap();
    assert_eq!(param_bits(&base), before, "base weights must stay frozen");
    assert_eq!(report.losses.len(), 5);
    assert!(report.warnings.is_empty());
    assert_eq!(adapter.kind, AdapterKind::Appearance);
    assert_eq!(adapter.concept_id, "sks3");
    for entry in &adapter.entries {
        assert!(matches!(entry.target.module_kind, ModuleKind::Spatial));
        assert!([2, 6].contains(&entry.target.layer));
        // Training moved B off its zero initialization.
        assert!(entry.b.iter().any(|&v| v != 0.0));
    }

    // Same seed reproduces the adapter bit for bit.
    let (again, _) =
        train_appearance_lora(&base, &refs, &prompt, &[2, 6], 2, &sched, &train_cfg).unwrap();
    for (x, y) in adapter.entries.iter().zip(&again.entries) {
        assert_eq!(x.a, y.a);
        assert_eq!(x.b, y.b);
    }
}

#[test]
fn appearance_lora_warns_on_layers_without_cross_attention() {
    let cfg = tiny_config();
    let base = build_denoiser::<f32>(&cfg, 111).unwrap();
    let concept = AppearanceConcept::new(Shape::Circle, 1);
    let refs = render_reference_images::<f32>(&concept, 1, cfg.height, cfg.width, 112).unwrap();
    let prompt = Prompt::parse("a sks1 circle").unwrap();
    let sched = tiny_sched();
    let train_cfg = TrainConfig {
        steps: 2,
        ..TrainConfig::appearance(113)
    };

    let (adapter, report) =
        train_appearance_lora(&base, &refs, &prompt, &[3, 5], 2, &sched, &train_cfg).unwrap();
    assert_eq!(report.warnings.len(), 2);
    assert!(report.warnings[0].contains("no cross-attention"));
    assert!(adapter
        .entries
        .iter()
        .all(|e| e.target.matrix.starts_with("self_attn.")));

    assert!(train_appearance_lora(&base, &[], &prompt, &[2], 2, &sched, &train_cfg).is_err());
}

#[test]
fn motion_lora_targets_temporal_modules_and_rejects_the_middle_layer() {
    let cfg = tiny_config();
    let mut base = build_denoiser::<f32>(&cfg, 121).unwrap();
    randomize_for_tests(&mut base, 122);
    let a = AppearanceConcept::new(Shape::Square, 2);
    let m = MotionConcept::new(Trajectory::LinearUp);
    let ref_video = render_video::<f32>(&a, &m, cfg.frames, cfg.height, cfg.width, 123).unwrap();
    let prompt = Prompt::parse("a square mot0").unwrap();
    let sched = tiny_sched();
    let train_cfg = TrainConfig {
        steps: 4,
        ..TrainConfig::motion(124)
    };

    let before = param_bits(&base);
    let (adapter, report) =
        train_motion_lora(&base, &ref_video, &prompt, &[2, 5], 2, &sched, &train_cfg).unwrap();
    assert_eq!(param_bits(&base), before);
    assert_eq!(report.losses.len(), 4);
    assert_eq!(adapter.kind, AdapterKind::Motion);
    assert_eq!(adapter.concept_id, "mot0");
    for entry in &adapter.entries {
        assert!(matches!(entry.target.module_kind, ModuleKind::Temporal));
        assert!([2, 5].contains(&entry.target.layer));
    }

    let err =
        train_motion_lora(&base, &ref_video, &prompt, &[4], 2, &sched, &train_cfg).unwrap_err();
    assert!(err.to_string().contains("no temporal module"), "{err}");

    let bad = Array4::<f32>::zeros((cfg.frames + 1, 3, cfg.height, cfg.width));
    assert!(train_motion_lora(&base, &bad, &prompt, &[2, 5], 2, &sched, &train_cfg).is_err());
}

#[test]
#[ignore = "slow probe: one-item overfit at full default dimensions"]
fn probe_default_config_overfit() {
    let cfg = DenoiserConfig::default();
    let mut model = build_denoiser::<f32>(&cfg, 51).unwrap();
    let corpus = one_item_corpus::<f32>(&cfg);
    let sched = NoiseSchedule::default();
    let cfg_train = TrainConfig {
        steps: 300,
        ..TrainConfig::pretrain(52)
    };
    let report = pretrain_base(&mut model, &corpus, &sched, &cfg_train).unwrap();
    for (i, chunk) in report.losses.chunks(25).enumerate() {
        let mean = chunk.iter().sum::<f64>() / chunk.len() as f64;
        println!("steps {:3}-{:3}: mean loss {mean:.4}", i * 25, i * 25 + chunk.len() - 1);
    }
    let initial = report.losses[0];
    let final_loss = *report.losses.last().unwrap();
    println!("initial {initial:.4} final {final_loss:.4} ratio {:.4}", final_loss / initial);
}

#[test]
fn default_temporal_rate_is_five_times_spatial() {
    let s = TrainConfig::appearance(0);
    let t = TrainConfig::motion(0);
    assert_eq!(t.lr, 5.0 * s.lr);
    assert_eq!(s.cond_drop_prob, 0.0);
    assert_eq!(t.cond_drop_prob, 0.0);
    assert_eq!(TrainConfig::pretrain(0).cond_drop_prob, 0.1);
}
